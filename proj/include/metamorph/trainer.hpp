#pragma once

#include <functional>
#include <string>
#include <vector>

#include "metamorph/bundle.hpp"
#include "metamorph/dataset.hpp"

// Hypernetwork training: block-wise incremental stages, per-step accumulation
// over a window of sampled configurations (the uncompressed one always
// included), per-configuration updates for the shared parameters, and one
// averaged update for the INR weights.

namespace metamorph {

struct LossWeights {
    double task = 1e2;    // cross-entropy
    double recon = 1.0;   // prior reconstruction, gated on gamma = 0
    double reg = 1e-3;    // L2 norm of the generated weights
    void validate() const;
};

struct AblationFlags {
    bool incremental = true;    // off: all blocks at once, same epoch budget
    bool alpha_scaling = true;  // off: alpha pinned to 1, not learnable
    bool grad_accum = true;     // off: one sampled configuration per step
    bool pre_init = true;       // off: every INR starts from its own draw
    bool disentangle = true;    // off: single head, bias read off the kernel grid
};

struct StagePlan {
    int num_blocks = 3;
    int epochs_per_stage = 50;
    int accum = 4;
    int warmup_epochs = 20;
    double peak_lr = 8e-4;
    double shared_lr = -1.0;  // negative: shared params track the INR schedule
    int batch_size = 128;
    bool per_block_gamma = false;  // default: one gamma for the whole window entry
    bool strict_shared = false;    // on: last block stays frozen like the rest
    bool include_last_block = false;
    bool augment = true;
    AblationFlags ablation;
    LossWeights loss;
    PerturbationSpec perturbation;
    INRConfig kernel_inr{8, 512, 384, 9, true};
    INRConfig bias_inr{8, 512, 384, 1, true};
    FourierSpec fourier;
    uint64_t seed = 0;
    void validate() const;
};

// Linear warm-up from zero over `warmup_epochs`, constant afterwards.
double lr_schedule(int epoch, int warmup_epochs, double peak_lr);

struct LossTerms {
    Tensor task, recon, reg, total;
};

// Eq.-style objective on one forward: weighted cross-entropy, plus the
// reconstruction term only for the uncompressed configuration, plus the
// L2 norm of everything the INRs generated.
LossTerms compute_loss_terms(const Tensor& logits, const std::vector<int>& labels,
                             const std::vector<Tensor>& generated,
                             const std::vector<Tensor>& prior_target, bool uncompressed,
                             const LossWeights& weights);
Tensor compute_loss(const Tensor& logits, const std::vector<int>& labels,
                    const std::vector<Tensor>& generated,
                    const std::vector<Tensor>& prior_target, bool uncompressed,
                    const LossWeights& weights);

// Uniform draw from the width pool.
int sample_width(const ConfigurationPool& pool, RngStream& rng);

// Shared mode draws one gamma (from the widest block's pool) and applies it
// everywhere; per-block mode draws each width independently.
NetworkConfig sample_config(const std::vector<BlockId>& blocks, const std::vector<int>& references,
                            bool per_block, RngStream& rng);

struct EpochMetrics {
    int stage = 0;
    int epoch = 0;  // within the stage
    double lr = 0.0;
    double task = 0.0, recon = 0.0, reg = 0.0, total = 0.0;  // means over forwards
    double train_accuracy = 0.0;  // uncompressed-configuration forwards only
};

using MetricsFn = std::function<void(const EpochMetrics&)>;

struct TrainResult {
    PriorNetwork network;  // folded prior with the shared parameters as trained
    INRBundle bundle;
    std::vector<Tensor> alphas;  // one scalar per metamorphosed block
    std::vector<EpochMetrics> history;
};

// Runs every stage. `prior` must be smoothed and folded. On a non-finite
// loss the last healthy state is written under `failure_dir` (when given)
// and a TrainingError is thrown.
TrainResult train_all(const PriorNetwork& prior, const Dataset& train, const StagePlan& plan,
                      const MetricsFn& on_epoch = {}, const std::string& failure_dir = {});

}  // namespace metamorph
