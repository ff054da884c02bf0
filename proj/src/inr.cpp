#include "metamorph/inr.hpp"

#include <cmath>

namespace metamorph {

INRModel::INRModel(const INRConfig& cfg, RngStream& rng) : cfg_(cfg) {
    if (cfg.depth < 2) throw ContractError("INRModel: depth must be at least 2");
    if (cfg.width < 1 || cfg.input_dim < 1 || cfg.output_dim < 1)
        throw ContractError("INRModel: non-positive dimension");
    weights_.reserve(size_t(cfg.depth));
    biases_.reserve(size_t(cfg.depth));
    for (int i = 0; i < cfg.depth; ++i) {
        int fan_in = i == 0 ? cfg.input_dim : cfg.width;
        int fan_out = i == cfg.depth - 1 ? cfg.output_dim : cfg.width;
        // Kaiming-uniform fan-in bound; the final layer starts 10x smaller so
        // freshly generated weights are near zero.
        float bound = float(std::sqrt(6.0 / fan_in));
        if (i == cfg.depth - 1) bound *= 0.1f;
        weights_.push_back(Tensor::uniform({fan_out, fan_in}, rng, -bound, bound, true));
        biases_.push_back(Tensor::zeros({fan_out}, true));
    }
}

Tensor INRModel::forward(const Tensor& embeddings) const {
    if (!initialized()) throw ContractError("INRModel: forward on uninitialized model");
    if (embeddings.ndim() != 2 || embeddings.dim(1) != cfg_.input_dim)
        throw ShapeError("INRModel: embedding shape " + shape_str(embeddings.shape()) +
                         " does not match input_dim " + std::to_string(cfg_.input_dim));
    Tensor h = elu(linear(embeddings, weights_[0], biases_[0]));
    for (int i = 1; i + 1 < cfg_.depth; ++i) {
        Tensor z = elu(linear(h, weights_[size_t(i)], biases_[size_t(i)]));
        h = cfg_.residual ? add(z, h) : z;
    }
    Tensor out = linear(h, weights_.back(), biases_.back());
    detail::check_finite(out, "INRModel::forward");
    return out;
}

std::vector<Tensor> INRModel::parameters() const {
    std::vector<Tensor> ps;
    ps.reserve(weights_.size() * 2);
    for (size_t i = 0; i < weights_.size(); ++i) {
        ps.push_back(weights_[i]);
        ps.push_back(biases_[i]);
    }
    return ps;
}

int64_t INRModel::param_count() const {
    int64_t n = 0;
    for (const auto& w : weights_) n += w.numel();
    for (const auto& b : biases_) n += b.numel();
    return n;
}

void INRModel::copy_parameters_from(const INRModel& other) {
    if (!other.initialized()) throw ContractError("copy_parameters_from: source uninitialized");
    if (!(cfg_ == other.cfg_))
        throw ContractError("copy_parameters_from: architecture mismatch");
    for (size_t i = 0; i < weights_.size(); ++i) {
        weights_[i].copy_values_from(other.weights_[i]);
        biases_[i].copy_values_from(other.biases_[i]);
    }
}

void init_from_predecessor(INRModel& fresh, const INRModel& predecessor) {
    fresh.copy_parameters_from(predecessor);
}

namespace {

LayerIndexRef make_ref(const LayerCoordInfo& info, int in_index, int out_index) {
    LayerIndexRef ref;
    ref.layer = info.layer_index;
    ref.num_layers = info.num_layers;
    ref.in_index = in_index;
    ref.in_ref = info.in_ref;
    ref.out_index = out_index;
    ref.out_ref = info.out_ref;
    ref.normalizer = info.normalizer;
    return ref;
}

}  // namespace

Tensor embed_kernel_grid(const LayerCoordInfo& info, int out_cfg, int in_cfg,
                         const PerturbationSpec& perturbation, RngStream& rng,
                         const FourierSpec& fourier) {
    int emb = fourier.embedding_length();
    Tensor grid = Tensor::zeros({out_cfg * in_cfg, emb});
    float* out = grid.data().data();
    for (int co = 1; co <= out_cfg; ++co)
        for (int ci = 1; ci <= in_cfg; ++ci) {
            CoordinateVector cv = perturb(make_ref(info, ci, co), perturbation, rng);
            fourier_embed_into(cv, fourier, out);
            out += emb;
        }
    return grid;
}

// A bias has no input-channel index: its c_in slot is pinned to the reference
// count (entry value 1 before perturbation), so bias coordinates are shared
// across sampled widths exactly like kernel grid points.
Tensor embed_bias_grid(const LayerCoordInfo& info, int out_cfg, int /*in_cfg*/,
                       const PerturbationSpec& perturbation, RngStream& rng,
                       const FourierSpec& fourier) {
    int emb = fourier.embedding_length();
    Tensor grid = Tensor::zeros({out_cfg, emb});
    float* out = grid.data().data();
    for (int co = 1; co <= out_cfg; ++co) {
        CoordinateVector cv = perturb(make_ref(info, info.in_ref, co), perturbation, rng);
        fourier_embed_into(cv, fourier, out);
        out += emb;
    }
    return grid;
}

GeneratedLayer generate_layer_weights(const LayerINR& entry, int out_cfg, int in_cfg,
                                      const PerturbationSpec& perturbation, RngStream& rng,
                                      const FourierSpec& fourier) {
    const LayerCoordInfo& info = entry.info;
    if (out_cfg < 1 || in_cfg < 1)
        throw ContractError("generate_layer_weights: sampled widths must be positive");
    int k = info.kernel_size;
    int d2 = entry.kernel_inr.config().output_dim;

    Tensor kgrid = embed_kernel_grid(info, out_cfg, in_cfg, perturbation, rng, fourier);
    Tensor kout = entry.kernel_inr.forward(kgrid);  // [out*in, D]

    GeneratedLayer gen;
    if (d2 == k * k) {
        gen.kernel = reshape(kout, {out_cfg, in_cfg, k, k});
    } else {
        // legacy shared head: D = d*d with d odd > k; take the central window
        int d = int(std::llround(std::sqrt(double(d2))));
        if (d * d != d2 || d % 2 == 0 || d < k)
            throw ContractError("generate_layer_weights: head dim is not an odd square >= k*k");
        int off = (d - k) / 2;
        Tensor rows = reshape(kout, {out_cfg * in_cfg, d, d});
        Tensor window = slice(slice(rows, 1, off, k), 2, off, k);
        gen.kernel = reshape(window, {out_cfg, in_cfg, k, k});
    }

    Tensor bgrid = embed_bias_grid(info, out_cfg, in_cfg, perturbation, rng, fourier);
    if (entry.disentangled) {
        if (entry.bias_inr.config().output_dim != 1)
            throw ContractError("generate_layer_weights: bias head must have D = 1");
        gen.bias = reshape(entry.bias_inr.forward(bgrid), {out_cfg});
    } else {
        // first value of the shared head's output vector
        Tensor bout = entry.kernel_inr.forward(bgrid);
        gen.bias = reshape(slice(bout, 1, 0, 1), {out_cfg});
    }
    return gen;
}

GeneratedLayer generate_linear_weights(const LayerINR& entry, int out_cfg, int in_cfg,
                                       const PerturbationSpec& perturbation, RngStream& rng,
                                       const FourierSpec& fourier) {
    const LayerCoordInfo& info = entry.info;
    if (out_cfg < 1 || in_cfg < 1)
        throw ContractError("generate_linear_weights: sampled widths must be positive");
    int d2 = entry.kernel_inr.config().output_dim;

    Tensor grid = embed_kernel_grid(info, out_cfg, in_cfg, perturbation, rng, fourier);
    Tensor out = entry.kernel_inr.forward(grid);  // [out*in, D]
    // each projection weight is the mean of its D predicted values
    Tensor w = scale(reshape(matmul(out, Tensor::ones({d2, 1})), {out_cfg, in_cfg}),
                     1.0f / float(d2));

    Tensor bgrid = embed_bias_grid(info, out_cfg, in_cfg, perturbation, rng, fourier);
    Tensor bout = entry.disentangled ? entry.bias_inr.forward(bgrid)
                                     : slice(entry.kernel_inr.forward(bgrid), 1, 0, 1);
    GeneratedLayer gen;
    gen.kernel = w;
    gen.bias = reshape(bout, {out_cfg});
    return gen;
}

}  // namespace metamorph
