#pragma once

#include <string>
#include <vector>

#include "metamorph/bundle.hpp"

// Weight sampling: one configuration's weights are the mean of K generations
// under coordinate perturbation, which trades a little bias for a lot of
// variance. Disabled perturbation short-circuits to a single pass, so any K
// then matches K = 1 exactly.

namespace metamorph {

struct SamplerSpec {
    int K = 16;
    PerturbationSpec perturbation;
    uint64_t seed = 0;
    void validate() const;
};

std::vector<MetaBlockWeights> sample_weights(const INRBundle& bundle, const NetworkConfig& cfg,
                                             const SamplerSpec& spec);

// Assembles a self-contained network at one compression ratio, shared across
// all metamorphosed blocks. Ratios outside the training pool are allowed;
// `warning` (when non-null) receives a diagnostic in that case.
MorphModel sample_model(const PriorNetwork& base, const INRBundle& bundle,
                        const std::vector<Tensor>& alphas, double gamma, const SamplerSpec& spec,
                        std::string* warning = nullptr);

}  // namespace metamorph
