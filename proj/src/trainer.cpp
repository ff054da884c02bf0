#include "metamorph/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "metamorph/checkpoint.hpp"
#include "metamorph/errors.hpp"
#include "metamorph/io.hpp"
#include "metamorph/optim.hpp"

namespace metamorph {

namespace {

struct Snapshot {
    std::vector<uint8_t> bundle_bytes, network_bytes;
    bool valid = false;
};

double batch_accuracy(const Tensor& logits, const std::vector<int>& labels) {
    const Shape& s = logits.shape();
    int64_t n = s[0], classes = s[1];
    const float* p = logits.data().data();
    int64_t hits = 0;
    for (int64_t i = 0; i < n; ++i) {
        const float* row = p + i * classes;
        int best = 0;
        for (int c = 1; c < classes; ++c)
            if (row[c] > row[best]) best = c;
        if (best == labels[size_t(i)]) ++hits;
    }
    return double(hits) / double(n);
}

}  // namespace

void LossWeights::validate() const {
    if (task < 0 || recon < 0 || reg < 0 || !std::isfinite(task) || !std::isfinite(recon) ||
        !std::isfinite(reg))
        throw ContractError("LossWeights: coefficients must be finite and non-negative");
}

void StagePlan::validate() const {
    loss.validate();
    if (num_blocks < 1) throw ContractError("StagePlan: num_blocks must be positive");
    if (epochs_per_stage < 0) throw ContractError("StagePlan: epochs_per_stage must be >= 0");
    if (accum < 1) throw ContractError("StagePlan: accum must be >= 1");
    if (warmup_epochs < 0) throw ContractError("StagePlan: warmup_epochs must be >= 0");
    if (peak_lr < 0 || !std::isfinite(peak_lr))
        throw ContractError("StagePlan: peak_lr must be finite and non-negative");
    if (batch_size < 1) throw ContractError("StagePlan: batch_size must be positive");
    if (kernel_inr.input_dim != fourier.embedding_length() ||
        bias_inr.input_dim != fourier.embedding_length())
        throw ContractError("StagePlan: INR input width must match the Fourier embedding");
    if (ablation.disentangle && bias_inr.output_dim != 1)
        throw ContractError("StagePlan: bias INR must emit one value per coordinate");
}

double lr_schedule(int epoch, int warmup_epochs, double peak_lr) {
    if (epoch < 0) throw ContractError("lr_schedule: epoch must be non-negative");
    if (warmup_epochs <= 0 || epoch >= warmup_epochs) return peak_lr;
    return peak_lr * double(epoch) / double(warmup_epochs);
}

LossTerms compute_loss_terms(const Tensor& logits, const std::vector<int>& labels,
                             const std::vector<Tensor>& generated,
                             const std::vector<Tensor>& prior_target, bool uncompressed,
                             const LossWeights& weights) {
    weights.validate();
    LossTerms t;
    t.task = softmax_cross_entropy(logits, labels);

    if (uncompressed) {
        if (generated.size() != prior_target.size())
            throw ContractError("compute_loss_terms: generated/target tensor counts disagree");
        for (size_t i = 0; i < generated.size(); ++i)
            if (generated[i].shape() != prior_target[i].shape())
                throw ContractError(
                    "compute_loss_terms: uncompressed configuration but shapes disagree with the "
                    "prior");
        Tensor acc;
        for (size_t i = 0; i < generated.size(); ++i) {
            Tensor ss = sum_of_squares(sub(prior_target[i], generated[i]));
            acc = i == 0 ? ss : add(acc, ss);
        }
        t.recon = generated.empty() ? Tensor::scalar(0.0f) : acc;
    } else {
        t.recon = Tensor::scalar(0.0f);
    }

    Tensor ss_all;
    for (size_t i = 0; i < generated.size(); ++i) {
        Tensor ss = sum_of_squares(generated[i]);
        ss_all = i == 0 ? ss : add(ss_all, ss);
    }
    t.reg = generated.empty() ? Tensor::scalar(0.0f) : sqrt_elem(ss_all);

    t.total = add(add(scale(t.task, float(weights.task)), scale(t.recon, float(weights.recon))),
                  scale(t.reg, float(weights.reg)));
    return t;
}

Tensor compute_loss(const Tensor& logits, const std::vector<int>& labels,
                    const std::vector<Tensor>& generated, const std::vector<Tensor>& prior_target,
                    bool uncompressed, const LossWeights& weights) {
    return compute_loss_terms(logits, labels, generated, prior_target, uncompressed, weights).total;
}

int sample_width(const ConfigurationPool& pool, RngStream& rng) {
    if (pool.widths.empty()) throw ContractError("sample_width: empty pool");
    return pool.widths[size_t(rng.uniform_int(uint64_t(pool.widths.size())))];
}

NetworkConfig sample_config(const std::vector<BlockId>& blocks, const std::vector<int>& references,
                            bool per_block, RngStream& rng) {
    if (blocks.empty() || blocks.size() != references.size())
        throw ContractError("sample_config: blocks/references must be non-empty and aligned");

    if (per_block) {
        NetworkConfig cfg;
        cfg.blocks.reserve(blocks.size());
        for (size_t i = 0; i < blocks.size(); ++i) {
            auto pool = ConfigurationPool::from_reference(references[i]);
            cfg.blocks.push_back(BlockConfig{blocks[i], references[i], sample_width(pool, rng)});
        }
        cfg.validate();
        return cfg;
    }

    int max_ref = *std::max_element(references.begin(), references.end());
    auto pool = ConfigurationPool::from_reference(max_ref);
    int width = sample_width(pool, rng);
    return instantiate_config(blocks, references, gamma_from_width(width, max_ref));
}

TrainResult train_all(const PriorNetwork& prior, const Dataset& train, const StagePlan& plan,
                      const MetricsFn& on_epoch, const std::string& failure_dir) {
    plan.validate();
    if (!prior.folded) throw ContractError("train_all: prior must be smoothed and folded");
    if (train.count() == 0) throw ContractError("train_all: empty training set");

    TrainResult res;
    res.network = prior.clone_values();
    res.network.set_requires_grad(false);

    auto candidates = metamorphic_candidates(res.network.arch, plan.include_last_block);
    if (plan.num_blocks > int(candidates.size()))
        throw ContractError("train_all: num_blocks exceeds the metamorphic candidates");
    std::vector<BlockId> blocks(candidates.begin(), candidates.begin() + plan.num_blocks);

    res.bundle.arch = res.network.arch;
    res.bundle.kernel_cfg = plan.kernel_inr;
    res.bundle.bias_cfg = plan.bias_inr;
    res.bundle.fourier = plan.fourier;
    res.bundle.disentangled = plan.ablation.disentangle;

    std::vector<Tensor> shared{res.network.fc_weight, res.network.fc_bias};
    if (!plan.strict_shared && !plan.include_last_block) {
        ResBlock& last = res.network.layers.back().back();
        shared.push_back(last.conv1.kernel);
        shared.push_back(last.conv1.bias);
        shared.push_back(last.conv2.kernel);
        shared.push_back(last.conv2.bias);
    }
    for (Tensor& t : shared) t.set_requires_grad(true);

    AdamWOptions<float> shared_opts;
    shared_opts.learning_rate = 0.0f;
    AdamW shared_opt(shared_opts);
    shared_opt.add_params(shared);

    AdamWOptions<float> inr_opts;
    inr_opts.learning_rate = 0.0f;
    AdamW inr_opt(inr_opts);

    std::vector<std::vector<Tensor>> targets;
    targets.reserve(blocks.size());
    for (const BlockId& id : blocks) targets.push_back(prior_block_tensors(res.network, id));

    RngStream root(plan.seed);
    Snapshot snap;
    auto take_snapshot = [&]() {
        if (failure_dir.empty()) return;
        snap.bundle_bytes = encode_checkpoint(bundle_to_checkpoint(res.bundle, res.alphas));
        snap.network_bytes = encode_checkpoint(to_checkpoint(res.network, "prior"));
        snap.valid = true;
    };
    auto fail = [&](int stage, int epoch, const std::string& cause) {
        if (snap.valid) {
            std::filesystem::create_directories(failure_dir);
            io::write_file_atomic(failure_dir + "/last_healthy_bundle.nmck", snap.bundle_bytes);
            io::write_file_atomic(failure_dir + "/last_healthy_prior.nmck", snap.network_bytes);
        }
        throw TrainingError("train_all: " + cause + " at stage " + std::to_string(stage) +
                            " epoch " + std::to_string(epoch) +
                            (snap.valid ? "; last healthy state written to " + failure_dir : ""));
    };

    const int num_stages = plan.ablation.incremental ? plan.num_blocks : 1;
    const int window_size = plan.ablation.grad_accum ? plan.accum : 1;

    std::vector<int64_t> indices(size_t(train.count()));
    std::iota(indices.begin(), indices.end(), 0);

    for (int s = 0; s < num_stages; ++s) {
        const size_t stage_end = plan.ablation.incremental ? size_t(s) + 1 : blocks.size();
        for (size_t b = res.bundle.blocks.size(); b < stage_end; ++b) {
            RngStream init_rng = root.split("inr_init").split(uint64_t(b));
            const BlockINR* pred = nullptr;
            if (plan.ablation.pre_init && plan.ablation.incremental && b > 0)
                pred = &res.bundle.blocks[b - 1];
            res.bundle.blocks.push_back(make_block_inr(res.network.arch, blocks[b],
                                                       plan.kernel_inr, plan.bias_inr,
                                                       res.bundle.disentangled, init_rng, pred));
            inr_opt.add_params(res.bundle.block_parameters(b));
            Tensor alpha = plan.ablation.alpha_scaling ? Tensor::scalar(0.0f, true)
                                                       : Tensor::scalar(1.0f);
            res.alphas.push_back(alpha);
            if (plan.ablation.alpha_scaling) shared_opt.add_param(alpha);
        }

        const size_t active = res.bundle.blocks.size();
        const std::vector<BlockId> act_ids(blocks.begin(), blocks.begin() + active);
        const std::vector<int> act_refs = res.bundle.references();
        std::vector<Tensor> flat_targets;
        for (size_t b = 0; b < active; ++b)
            flat_targets.insert(flat_targets.end(), targets[b].begin(), targets[b].end());

        const int stage_epochs = plan.ablation.incremental
                                     ? plan.epochs_per_stage
                                     : plan.epochs_per_stage * plan.num_blocks;
        take_snapshot();

        for (int e = 0; e < stage_epochs; ++e) {
            const double lr = lr_schedule(e, plan.warmup_epochs, plan.peak_lr);
            inr_opt.set_learning_rate(float(lr));
            shared_opt.set_learning_rate(float(plan.shared_lr < 0 ? lr : plan.shared_lr));

            RngStream shuffle_rng = root.split("shuffle").split(uint64_t(s)).split(uint64_t(e));
            RngStream aug_rng = root.split("aug").split(uint64_t(s)).split(uint64_t(e));
            RngStream cfg_rng = root.split("configs").split(uint64_t(s)).split(uint64_t(e));
            RngStream pert_rng = root.split("perturb").split(uint64_t(s)).split(uint64_t(e));

            for (size_t i = indices.size(); i > 1; --i) {
                size_t j = size_t(shuffle_rng.uniform_int(uint64_t(i)));
                std::swap(indices[i - 1], indices[j]);
            }

            EpochMetrics m;
            m.stage = s;
            m.epoch = e;
            m.lr = lr;
            int64_t forwards = 0, uncomp = 0;
            double acc_uncomp = 0.0, acc_all = 0.0;

            for (size_t start = 0; start < indices.size(); start += size_t(plan.batch_size)) {
                size_t stop = std::min(indices.size(), start + size_t(plan.batch_size));
                std::vector<int64_t> batch(indices.begin() + int64_t(start),
                                           indices.begin() + int64_t(stop));
                Tensor x = make_batch(train, batch, plan.augment, aug_rng);
                std::vector<int> labels = batch_labels(train, batch);

                std::vector<NetworkConfig> window;
                window.reserve(size_t(window_size));
                if (window_size > 1) {
                    window.push_back(instantiate_config(act_ids, act_refs, 0.0));
                    for (int k = 1; k < window_size; ++k)
                        window.push_back(
                            sample_config(act_ids, act_refs, plan.per_block_gamma, cfg_rng));
                } else {
                    window.push_back(
                        sample_config(act_ids, act_refs, plan.per_block_gamma, cfg_rng));
                }

                for (const NetworkConfig& cfg : window) {
                    LossTerms terms;
                    double acc = 0.0;
                    bool at_prior = cfg.uncompressed();
                    try {
                        std::vector<MetaBlockWeights> gen;
                        std::vector<Tensor> flat_gen;
                        gen.reserve(active);
                        for (size_t b = 0; b < active; ++b) {
                            gen.push_back(generate_block_weights(res.bundle.blocks[b],
                                                                 cfg.blocks[b].width,
                                                                 plan.perturbation, pert_rng,
                                                                 plan.fourier));
                            auto flat = generated_tensors(gen.back());
                            flat_gen.insert(flat_gen.end(), flat.begin(), flat.end());
                        }

                        Tensor logits = morph_forward(res.network, act_ids, res.alphas, gen, x);
                        terms = compute_loss_terms(logits, labels, flat_gen, flat_targets,
                                                   at_prior, plan.loss);
                        if (!std::isfinite(double(terms.total.item())))
                            throw NumericError("loss is not finite");
                        backward(terms.total);
                        acc = batch_accuracy(logits, labels);
                    } catch (const NumericError& err) {
                        fail(s, e, std::string("training diverged (") + err.what() + ")");
                        throw;  // unreachable; fail always throws
                    }
                    shared_opt.step();
                    shared_opt.zero_grad();

                    m.task += double(terms.task.item());
                    m.recon += double(terms.recon.item());
                    m.reg += double(terms.reg.item());
                    m.total += double(terms.total.item());
                    acc_all += acc;
                    if (at_prior) {
                        acc_uncomp += acc;
                        ++uncomp;
                    }
                    ++forwards;
                }

                inr_opt.scale_grads(1.0f / float(window.size()));
                inr_opt.step();
                inr_opt.zero_grad();
            }

            if (forwards > 0) {
                m.task /= double(forwards);
                m.recon /= double(forwards);
                m.reg /= double(forwards);
                m.total /= double(forwards);
                m.train_accuracy =
                    uncomp > 0 ? acc_uncomp / double(uncomp) : acc_all / double(forwards);
            }
            res.history.push_back(m);
            if (on_epoch) on_epoch(m);
            take_snapshot();
        }
    }
    return res;
}

}  // namespace metamorph
