#include "metamorph/sampler.hpp"

#include <sstream>

#include "metamorph/errors.hpp"

namespace metamorph {

namespace {

void add_into(Tensor& acc, const Tensor& t) {
    auto& a = acc.data();
    const auto& b = t.data();
    for (size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

void divide_by(Tensor& acc, float k) {
    for (float& v : acc.data()) v /= k;
}

}  // namespace

void SamplerSpec::validate() const {
    if (K < 1) throw ContractError("SamplerSpec: K must be positive");
}

std::vector<MetaBlockWeights> sample_weights(const INRBundle& bundle, const NetworkConfig& cfg,
                                             const SamplerSpec& spec) {
    spec.validate();
    if (cfg.blocks.size() != bundle.blocks.size())
        throw ContractError("sample_weights: configuration does not match the bundle");
    for (size_t b = 0; b < cfg.blocks.size(); ++b) {
        if (!(cfg.blocks[b].block == bundle.blocks[b].block) ||
            cfg.blocks[b].reference != bundle.blocks[b].reference)
            throw ContractError("sample_weights: configuration blocks disagree with the bundle");
    }

    NoGradGuard guard;
    RngStream root(spec.seed);

    auto generate_pass = [&](const PerturbationSpec& pert, RngStream& rng) {
        std::vector<MetaBlockWeights> out;
        out.reserve(bundle.blocks.size());
        for (size_t b = 0; b < bundle.blocks.size(); ++b)
            out.push_back(generate_block_weights(bundle.blocks[b], cfg.blocks[b].width, pert, rng,
                                                 bundle.fourier));
        return out;
    };

    if (!spec.perturbation.enabled) {
        RngStream rng = root.split("sample").split(uint64_t(0));
        return generate_pass(spec.perturbation, rng);
    }

    std::vector<MetaBlockWeights> mean;
    for (int k = 0; k < spec.K; ++k) {
        RngStream rng = root.split("sample").split(uint64_t(k));
        std::vector<MetaBlockWeights> pass = generate_pass(spec.perturbation, rng);
        if (k == 0) {
            mean = std::move(pass);
            continue;
        }
        for (size_t b = 0; b < mean.size(); ++b) {
            add_into(mean[b].conv1_kernel, pass[b].conv1_kernel);
            add_into(mean[b].conv1_bias, pass[b].conv1_bias);
            add_into(mean[b].conv2_kernel, pass[b].conv2_kernel);
            add_into(mean[b].conv2_bias, pass[b].conv2_bias);
        }
    }
    for (auto& w : mean) {
        divide_by(w.conv1_kernel, float(spec.K));
        divide_by(w.conv1_bias, float(spec.K));
        divide_by(w.conv2_kernel, float(spec.K));
        divide_by(w.conv2_bias, float(spec.K));
    }
    return mean;
}

MorphModel sample_model(const PriorNetwork& base, const INRBundle& bundle,
                        const std::vector<Tensor>& alphas, double gamma, const SamplerSpec& spec,
                        std::string* warning) {
    if (alphas.size() != bundle.blocks.size())
        throw ContractError("sample_model: one alpha per bundle block required");

    NetworkConfig cfg = instantiate_config(bundle.block_ids(), bundle.references(), gamma);

    std::ostringstream oss;
    for (const BlockConfig& bc : cfg.blocks) {
        auto pool = ConfigurationPool::from_reference(bc.reference);
        if (!pool.contains(bc.width)) {
            if (oss.tellp() == 0)
                oss << "gamma " << gamma << " falls outside the training pool:";
            oss << " " << bc.block.str() << " width " << bc.width << "/" << bc.reference;
        }
    }
    if (warning != nullptr) *warning = oss.str();

    MorphModel model;
    model.base = base.clone_values();
    model.meta_blocks = bundle.block_ids();
    model.config = cfg;
    model.weights = sample_weights(bundle, cfg, spec);
    model.alphas.reserve(alphas.size());
    for (const Tensor& a : alphas) {
        if (a.numel() != 1) throw ContractError("sample_model: alpha must be scalar");
        model.alphas.push_back(Tensor::scalar(a.data()[0]));
    }
    return model;
}

}  // namespace metamorph
