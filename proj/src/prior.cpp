#include "metamorph/prior.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

#include "metamorph/errors.hpp"
#include "metamorph/optim.hpp"

namespace metamorph {

namespace {

constexpr float kBnMomentum = 0.1f;

Tensor he_normal(Shape shape, int fan_in, RngStream& rng) {
    float s = float(std::sqrt(2.0 / double(fan_in)));
    return Tensor::normal(std::move(shape), rng, 0.0f, s);
}

ConvBN make_convbn(int c_out, int c_in, int k, int stride, int padding, RngStream& rng) {
    ConvBN cb;
    cb.kernel = he_normal({c_out, c_in, k, k}, c_in * k * k, rng);
    cb.bias = Tensor::zeros({c_out});
    cb.stride = stride;
    cb.padding = padding;
    cb.has_bn = true;
    cb.bn_scale = Tensor::ones({c_out});
    cb.bn_shift = Tensor::zeros({c_out});
    cb.bn_mean.assign(size_t(c_out), 0.0f);
    cb.bn_var.assign(size_t(c_out), 1.0f);
    return cb;
}

void validate_arch(const ArchSpec& arch) {
    if (arch.widths.empty()) throw ContractError("arch: needs at least one stage width");
    for (int w : arch.widths)
        if (w < 1) throw ContractError("arch: stage widths must be positive");
    if (arch.blocks_per_layer < 1) throw ContractError("arch: blocks_per_layer must be positive");
    if (arch.num_classes < 2) throw ContractError("arch: need at least two classes");
    if (arch.in_channels < 1) throw ContractError("arch: in_channels must be positive");
}

// Permutes slices along `axis` of a value tensor in place.
void reorder_axis(Tensor& t, int axis, const std::vector<int>& order) {
    const Shape& s = t.shape();
    if (axis < 0 || axis >= int(s.size())) throw ContractError("reorder_axis: axis out of range");
    if (int(order.size()) != s[size_t(axis)])
        throw ShapeError("reorder_axis: permutation length does not match axis extent");
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[size_t(i)];
    for (int i = axis + 1; i < int(s.size()); ++i) inner *= s[size_t(i)];
    int64_t c = s[size_t(axis)];
    std::vector<float>& d = t.data();
    std::vector<float> tmp(size_t(c * inner));
    for (int64_t o = 0; o < outer; ++o) {
        float* base = d.data() + o * c * inner;
        for (int64_t i = 0; i < c; ++i)
            std::memcpy(tmp.data() + i * inner, base + int64_t(order[size_t(i)]) * inner,
                        size_t(inner) * sizeof(float));
        std::memcpy(base, tmp.data(), size_t(c * inner) * sizeof(float));
    }
}

void reorder_vec(std::vector<float>& v, const std::vector<int>& order) {
    std::vector<float> tmp(v.size());
    for (size_t i = 0; i < order.size(); ++i) tmp[i] = v[size_t(order[i])];
    v.swap(tmp);
}

// Reorders the output channels of a ConvBN, including normalization state.
void reorder_out_channels(ConvBN& cb, const std::vector<int>& order) {
    reorder_axis(cb.kernel, 0, order);
    reorder_axis(cb.bias, 0, order);
    if (cb.has_bn) {
        reorder_axis(cb.bn_scale, 0, order);
        reorder_axis(cb.bn_shift, 0, order);
        reorder_vec(cb.bn_mean, order);
        reorder_vec(cb.bn_var, order);
    }
}

void append_slice_axis0(std::vector<float>& row, const Tensor& t, int index) {
    int64_t slice = t.numel() / t.dim(0);
    const float* src = t.data().data() + int64_t(index) * slice;
    row.insert(row.end(), src, src + slice);
}

void append_slice_axis1(std::vector<float>& row, const Tensor& t, int index) {
    const Shape& s = t.shape();
    int64_t inner = 1;
    for (size_t i = 2; i < s.size(); ++i) inner *= s[i];
    for (int o = 0; o < s[0]; ++o) {
        const float* src = t.data().data() + (int64_t(o) * s[1] + index) * inner;
        row.insert(row.end(), src, src + inner);
    }
}

struct FeatureSpec {
    const Tensor* tensor;
    int axis;  // 0 = out channels, 1 = in channels
};

Tensor gather_features(const std::vector<FeatureSpec>& specs, int channels) {
    std::vector<float> rows;
    int64_t width = -1;
    for (int c = 0; c < channels; ++c) {
        std::vector<float> row;
        for (const auto& sp : specs) {
            if (sp.tensor->dim(sp.axis) != channels)
                throw ShapeError("channel features: tensor extent does not match channel count");
            if (sp.axis == 0)
                append_slice_axis0(row, *sp.tensor, c);
            else
                append_slice_axis1(row, *sp.tensor, c);
        }
        if (width < 0) width = int64_t(row.size());
        rows.insert(rows.end(), row.begin(), row.end());
    }
    return Tensor::from_data({channels, int(width)}, std::move(rows));
}

std::vector<std::vector<double>> pairwise_l1(const Tensor& features) {
    int c = features.dim(0), f = features.dim(1);
    const float* d = features.data().data();
    std::vector<std::vector<double>> dist(size_t(c), std::vector<double>(size_t(c), 0.0));
    for (int i = 0; i < c; ++i)
        for (int j = i + 1; j < c; ++j) {
            double acc = 0.0;
            const float* a = d + int64_t(i) * f;
            const float* b = d + int64_t(j) * f;
            for (int t = 0; t < f; ++t) acc += std::abs(double(a[t]) - double(b[t]));
            dist[size_t(i)][size_t(j)] = acc;
            dist[size_t(j)][size_t(i)] = acc;
        }
    return dist;
}

double path_cost(const std::vector<std::vector<double>>& dist, const std::vector<int>& order) {
    double acc = 0.0;
    for (size_t i = 0; i + 1 < order.size(); ++i)
        acc += dist[size_t(order[i])][size_t(order[i + 1])];
    return acc;
}

std::vector<int> exhaustive_path(const std::vector<std::vector<double>>& dist, int c) {
    std::vector<int> perm(size_t(c), 0);
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<int> best = perm;
    double best_cost = path_cost(dist, perm);
    while (std::next_permutation(perm.begin(), perm.end())) {
        double cost = path_cost(dist, perm);
        if (cost < best_cost) {
            best_cost = cost;
            best = perm;
        }
    }
    return best;
}

std::vector<int> greedy_path(const std::vector<std::vector<double>>& dist, int c, int start) {
    std::vector<int> order;
    order.reserve(size_t(c));
    std::vector<bool> used(size_t(c), false);
    order.push_back(start);
    used[size_t(start)] = true;
    for (int step = 1; step < c; ++step) {
        int cur = order.back(), pick = -1;
        double best = std::numeric_limits<double>::infinity();
        for (int j = 0; j < c; ++j) {
            if (used[size_t(j)]) continue;
            if (dist[size_t(cur)][size_t(j)] < best) {
                best = dist[size_t(cur)][size_t(j)];
                pick = j;
            }
        }
        order.push_back(pick);
        used[size_t(pick)] = true;
    }
    return order;
}

void two_opt(const std::vector<std::vector<double>>& dist, std::vector<int>& order) {
    int c = int(order.size());
    auto d = [&](int a, int b) { return dist[size_t(order[size_t(a)])][size_t(order[size_t(b)])]; };
    bool improved = true;
    int guard = 0;
    while (improved && guard++ < 1000) {
        improved = false;
        for (int i = 0; i < c - 1 && !improved; ++i) {
            for (int j = i + 1; j < c && !improved; ++j) {
                // reverse order[i..j]; only the boundary edges change
                double before = (i > 0 ? d(i - 1, i) : 0.0) + (j + 1 < c ? d(j, j + 1) : 0.0);
                double after = (i > 0 ? d(i - 1, j) : 0.0) + (j + 1 < c ? d(i, j + 1) : 0.0);
                if (after < before - 1e-12) {
                    std::reverse(order.begin() + i, order.begin() + j + 1);
                    improved = true;
                }
            }
        }
    }
}

double block_tv(const ResBlock& b) {
    return total_variation(b.conv1.kernel) + total_variation(b.conv2.kernel);
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward passes

Tensor ConvBN::forward(const Tensor& x, bool training) {
    Tensor y = conv2d(x, kernel, bias, stride, padding);
    if (has_bn)
        y = batchnorm2d(y, bn_scale, bn_shift, bn_mean, bn_var, training, kBnMomentum, bn_eps);
    return y;
}

ConvBN ConvBN::clone_values() const {
    ConvBN out;
    out.kernel = kernel.clone();
    out.bias = bias.clone();
    out.stride = stride;
    out.padding = padding;
    out.has_bn = has_bn;
    if (has_bn) {
        out.bn_scale = bn_scale.clone();
        out.bn_shift = bn_shift.clone();
        out.bn_mean = bn_mean;
        out.bn_var = bn_var;
    }
    out.bn_eps = bn_eps;
    return out;
}

Tensor ResBlock::forward(const Tensor& x, bool training) {
    Tensor h = relu(conv1.forward(x, training));
    h = conv2.forward(h, training);
    Tensor s = has_projection ? projection.forward(x, training) : x;
    return relu(add(h, s));
}

ResBlock ResBlock::clone_values() const {
    ResBlock out;
    out.conv1 = conv1.clone_values();
    out.conv2 = conv2.clone_values();
    out.has_projection = has_projection;
    if (has_projection) out.projection = projection.clone_values();
    return out;
}

PriorNetwork PriorNetwork::random_init(const ArchSpec& arch, RngStream& rng) {
    validate_arch(arch);
    PriorNetwork net;
    net.arch = arch;
    net.stem = make_convbn(arch.widths[0], arch.in_channels, 3, 1, 1, rng);
    int in_w = arch.widths[0];
    for (size_t s = 0; s < arch.widths.size(); ++s) {
        int w = arch.widths[s];
        std::vector<ResBlock> stage;
        for (int j = 0; j < arch.blocks_per_layer; ++j) {
            ResBlock b;
            bool downsample = s > 0 && j == 0;
            int stride = downsample ? 2 : 1;
            int cin = j == 0 ? in_w : w;
            b.conv1 = make_convbn(w, cin, 3, stride, 1, rng);
            b.conv2 = make_convbn(w, w, 3, 1, 1, rng);
            b.has_projection = downsample;
            if (downsample) b.projection = make_convbn(w, cin, 1, stride, 0, rng);
            stage.push_back(std::move(b));
        }
        net.layers.push_back(std::move(stage));
        in_w = w;
    }
    int fan_in = arch.widths.back();
    float bound = 1.0f / float(std::sqrt(double(fan_in)));
    net.fc_weight = Tensor::uniform({arch.num_classes, fan_in}, rng, -bound, bound);
    net.fc_bias = Tensor::zeros({arch.num_classes});
    return net;
}

Tensor PriorNetwork::forward(const Tensor& x, bool training) {
    Tensor h = relu(stem.forward(x, training));
    for (auto& stage : layers)
        for (auto& block : stage) h = block.forward(h, training);
    h = global_avg_pool(h);
    return linear(h, fc_weight, fc_bias);
}

std::vector<Tensor> PriorNetwork::parameters() {
    std::vector<Tensor> out;
    auto collect = [&out](ConvBN& cb) {
        out.push_back(cb.kernel);
        if (cb.has_bn) {
            out.push_back(cb.bn_scale);
            out.push_back(cb.bn_shift);
        } else {
            out.push_back(cb.bias);
        }
    };
    collect(stem);
    for (auto& stage : layers)
        for (auto& block : stage) {
            collect(block.conv1);
            collect(block.conv2);
            if (block.has_projection) collect(block.projection);
        }
    out.push_back(fc_weight);
    out.push_back(fc_bias);
    return out;
}

void PriorNetwork::set_requires_grad(bool on) {
    for (auto& p : parameters()) p.set_requires_grad(on);
}

int64_t PriorNetwork::param_count() const {
    int64_t n = 0;
    auto count = [&n](const ConvBN& cb) {
        n += cb.kernel.numel() + cb.bias.numel();
        if (cb.has_bn) n += cb.bn_scale.numel() + cb.bn_shift.numel();
    };
    count(stem);
    for (const auto& stage : layers)
        for (const auto& block : stage) {
            count(block.conv1);
            count(block.conv2);
            if (block.has_projection) count(block.projection);
        }
    n += fc_weight.numel() + fc_bias.numel();
    return n;
}

PriorNetwork PriorNetwork::clone_values() const {
    PriorNetwork out;
    out.arch = arch;
    out.stem = stem.clone_values();
    for (const auto& stage : layers) {
        std::vector<ResBlock> copy;
        for (const auto& block : stage) copy.push_back(block.clone_values());
        out.layers.push_back(std::move(copy));
    }
    out.fc_weight = fc_weight.clone();
    out.fc_bias = fc_bias.clone();
    out.folded = folded;
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint round trip

namespace {

void put_convbn(Checkpoint& ckpt, const std::string& prefix, const ConvBN& cb) {
    ckpt.add(prefix + ".kernel", cb.kernel.shape(), cb.kernel.data());
    ckpt.add(prefix + ".bias", cb.bias.shape(), cb.bias.data());
    ckpt.meta[prefix + ".stride"] = std::to_string(cb.stride);
    ckpt.meta[prefix + ".padding"] = std::to_string(cb.padding);
    if (cb.has_bn) {
        ckpt.add(prefix + ".bn_scale", cb.bn_scale.shape(), cb.bn_scale.data());
        ckpt.add(prefix + ".bn_shift", cb.bn_shift.shape(), cb.bn_shift.data());
        ckpt.add(prefix + ".bn_mean", {int(cb.bn_mean.size())}, cb.bn_mean);
        ckpt.add(prefix + ".bn_var", {int(cb.bn_var.size())}, cb.bn_var);
    }
}

ConvBN take_convbn(const Checkpoint& ckpt, const std::string& prefix) {
    ConvBN cb;
    cb.kernel = ckpt.get(prefix + ".kernel", false);
    cb.bias = ckpt.get(prefix + ".bias", false);
    cb.stride = std::stoi(ckpt.meta_at(prefix + ".stride"));
    cb.padding = std::stoi(ckpt.meta_at(prefix + ".padding"));
    cb.has_bn = ckpt.has(prefix + ".bn_scale");
    if (cb.has_bn) {
        cb.bn_scale = ckpt.get(prefix + ".bn_scale", false);
        cb.bn_shift = ckpt.get(prefix + ".bn_shift", false);
        cb.bn_mean = ckpt.get_vector(prefix + ".bn_mean");
        cb.bn_var = ckpt.get_vector(prefix + ".bn_var");
    }
    return cb;
}

std::string block_prefix(size_t stage, int j) {
    return "layer" + std::to_string(stage) + ".block" + std::to_string(j);
}

}  // namespace

Checkpoint to_checkpoint(const PriorNetwork& net, const std::string& model_kind) {
    Checkpoint ckpt;
    ckpt.meta["model_kind"] = model_kind;
    ckpt.meta["folded"] = net.folded ? "1" : "0";
    ckpt.meta["num_classes"] = std::to_string(net.arch.num_classes);
    ckpt.meta["in_channels"] = std::to_string(net.arch.in_channels);
    ckpt.meta["blocks_per_layer"] = std::to_string(net.arch.blocks_per_layer);
    std::string widths;
    for (size_t i = 0; i < net.arch.widths.size(); ++i) {
        if (i) widths += ",";
        widths += std::to_string(net.arch.widths[i]);
    }
    ckpt.meta["widths"] = widths;
    put_convbn(ckpt, "stem", net.stem);
    for (size_t s = 0; s < net.layers.size(); ++s)
        for (int j = 0; j < int(net.layers[s].size()); ++j) {
            const ResBlock& b = net.layers[s][size_t(j)];
            put_convbn(ckpt, block_prefix(s, j) + ".conv1", b.conv1);
            put_convbn(ckpt, block_prefix(s, j) + ".conv2", b.conv2);
            if (b.has_projection) put_convbn(ckpt, block_prefix(s, j) + ".proj", b.projection);
        }
    ckpt.add("fc.weight", net.fc_weight.shape(), net.fc_weight.data());
    ckpt.add("fc.bias", net.fc_bias.shape(), net.fc_bias.data());
    return ckpt;
}

PriorNetwork prior_from_checkpoint(const Checkpoint& ckpt) {
    PriorNetwork net;
    net.arch.num_classes = std::stoi(ckpt.meta_at("num_classes"));
    net.arch.in_channels = std::stoi(ckpt.meta_at("in_channels"));
    net.arch.blocks_per_layer = std::stoi(ckpt.meta_at("blocks_per_layer"));
    net.arch.widths.clear();
    std::string widths = ckpt.meta_at("widths");
    size_t pos = 0;
    while (pos < widths.size()) {
        size_t comma = widths.find(',', pos);
        if (comma == std::string::npos) comma = widths.size();
        net.arch.widths.push_back(std::stoi(widths.substr(pos, comma - pos)));
        pos = comma + 1;
    }
    validate_arch(net.arch);
    net.folded = ckpt.meta_at("folded") == "1";
    net.stem = take_convbn(ckpt, "stem");
    for (size_t s = 0; s < net.arch.widths.size(); ++s) {
        std::vector<ResBlock> stage;
        for (int j = 0; j < net.arch.blocks_per_layer; ++j) {
            ResBlock b;
            b.conv1 = take_convbn(ckpt, block_prefix(s, j) + ".conv1");
            b.conv2 = take_convbn(ckpt, block_prefix(s, j) + ".conv2");
            b.has_projection = ckpt.has(block_prefix(s, j) + ".proj.kernel");
            if (b.has_projection) b.projection = take_convbn(ckpt, block_prefix(s, j) + ".proj");
            stage.push_back(std::move(b));
        }
        net.layers.push_back(std::move(stage));
    }
    net.fc_weight = ckpt.get("fc.weight", false);
    net.fc_bias = ckpt.get("fc.bias", false);
    return net;
}

// ---------------------------------------------------------------------------
// Training and evaluation

PriorNetwork train_prior(const Dataset& train, const ArchSpec& arch, const PriorTrainSpec& spec,
                         uint64_t seed) {
    if (spec.epochs < 0) throw ContractError("train_prior: negative epoch count");
    if (spec.batch_size < 1) throw ContractError("train_prior: batch size must be positive");
    RngStream root(seed);
    RngStream init_rng = root.split("prior_init");
    PriorNetwork net = PriorNetwork::random_init(arch, init_rng);
    if (spec.epochs == 0) return net;

    net.set_requires_grad(true);
    AdamWOptions<float> opts;
    opts.learning_rate = spec.learning_rate;
    opts.weight_decay = spec.weight_decay;
    AdamW opt(opts);
    opt.add_params(net.parameters());

    std::vector<int64_t> indices(size_t(train.count()));
    std::iota(indices.begin(), indices.end(), 0);
    for (int epoch = 0; epoch < spec.epochs; ++epoch) {
        RngStream shuffle_rng = root.split("prior_shuffle").split(uint64_t(epoch));
        RngStream aug_rng = root.split("prior_aug").split(uint64_t(epoch));
        for (size_t i = indices.size(); i > 1; --i) {
            size_t j = size_t(shuffle_rng.uniform_int(int64_t(i)));
            std::swap(indices[i - 1], indices[j]);
        }
        for (size_t start = 0; start < indices.size(); start += size_t(spec.batch_size)) {
            size_t stop = std::min(indices.size(), start + size_t(spec.batch_size));
            std::vector<int64_t> batch(indices.begin() + int64_t(start),
                                       indices.begin() + int64_t(stop));
            Tensor x = make_batch(train, batch, spec.augment, aug_rng);
            Tensor logits = net.forward(x, true);
            Tensor loss = softmax_cross_entropy(logits, batch_labels(train, batch));
            if (!std::isfinite(double(loss.item())))
                throw TrainingError("train_prior: loss diverged");
            backward(loss);
            opt.step();
            opt.zero_grad();
        }
    }
    net.set_requires_grad(false);
    return net;
}

EvalResult evaluate(PriorNetwork& net, const Dataset& ds, int batch_size) {
    if (batch_size < 1) throw ContractError("evaluate: batch size must be positive");
    NoGradGuard guard;
    RngStream unused(0);
    EvalResult res;
    int64_t correct = 0;
    double loss_sum = 0.0;
    for (int64_t start = 0; start < ds.count(); start += batch_size) {
        int64_t stop = std::min(ds.count(), start + batch_size);
        std::vector<int64_t> batch(size_t(stop - start));
        std::iota(batch.begin(), batch.end(), start);
        Tensor x = make_batch(ds, batch, false, unused);
        Tensor logits = net.forward(x, false);
        std::vector<int> labels = batch_labels(ds, batch);
        loss_sum += double(softmax_cross_entropy(logits, labels).item()) * double(batch.size());
        int k = logits.dim(1);
        for (size_t i = 0; i < batch.size(); ++i) {
            const float* row = logits.data().data() + int64_t(i) * k;
            int best = int(std::max_element(row, row + k) - row);
            if (best == labels[i]) ++correct;
        }
    }
    res.accuracy = ds.count() > 0 ? double(correct) / double(ds.count()) : 0.0;
    res.ce_loss = ds.count() > 0 ? loss_sum / double(ds.count()) : 0.0;
    return res;
}

// ---------------------------------------------------------------------------
// BN folding

std::pair<Tensor, Tensor> fold_batchnorm(const Tensor& kernel, const Tensor& bias,
                                         const Tensor& scale, const Tensor& shift,
                                         const std::vector<float>& mean,
                                         const std::vector<float>& var, float eps) {
    int c = kernel.dim(0);
    if (bias.numel() != c || scale.numel() != c || shift.numel() != c ||
        int(mean.size()) != c || int(var.size()) != c)
        throw ShapeError("fold_batchnorm: per-channel extents disagree");
    int64_t slice = kernel.numel() / c;
    std::vector<float> w(kernel.data());
    std::vector<float> b(size_t(c), 0.0f);
    for (int i = 0; i < c; ++i) {
        double denom = double(var[size_t(i)]) + double(eps);
        if (denom <= 0.0)
            throw NumericError("fold_batchnorm: variance plus epsilon must be positive");
        double f = double(scale.data()[size_t(i)]) / std::sqrt(denom);
        float* row = w.data() + int64_t(i) * slice;
        for (int64_t t = 0; t < slice; ++t) row[t] = float(double(row[t]) * f);
        b[size_t(i)] = float(double(shift.data()[size_t(i)]) +
                             (double(bias.data()[size_t(i)]) - double(mean[size_t(i)])) * f);
    }
    return {Tensor::from_data(kernel.shape(), std::move(w)), Tensor::from_data({c}, std::move(b))};
}

void fold_batchnorm_inplace(ConvBN& cb) {
    if (!cb.has_bn) return;
    auto [w, b] = fold_batchnorm(cb.kernel, cb.bias, cb.bn_scale, cb.bn_shift, cb.bn_mean,
                                 cb.bn_var, cb.bn_eps);
    cb.kernel = w;
    cb.bias = b;
    cb.has_bn = false;
    cb.bn_scale = Tensor();
    cb.bn_shift = Tensor();
    cb.bn_mean.clear();
    cb.bn_var.clear();
}

void fold_network(PriorNetwork& net) {
    if (net.folded) return;
    fold_batchnorm_inplace(net.stem);
    for (auto& stage : net.layers)
        for (auto& block : stage) {
            fold_batchnorm_inplace(block.conv1);
            fold_batchnorm_inplace(block.conv2);
            if (block.has_projection) fold_batchnorm_inplace(block.projection);
        }
    net.folded = true;
}

// ---------------------------------------------------------------------------
// Total variation and permutations

double total_variation(const Tensor& w) {
    if (w.ndim() < 2) throw ShapeError("total_variation: needs [C_out, C_in, ...]");
    int c_out = w.dim(0), c_in = w.dim(1);
    int64_t rest = w.numel() / (int64_t(c_out) * c_in);
    const float* d = w.data().data();
    auto at = [&](int o, int i, int64_t r) { return double(d[(int64_t(o) * c_in + i) * rest + r]); };
    double tv = 0.0;
    for (int o = 0; o < c_out; ++o)
        for (int i = 0; i + 1 < c_in; ++i)
            for (int64_t r = 0; r < rest; ++r) tv += std::abs(at(o, i + 1, r) - at(o, i, r));
    for (int o = 0; o + 1 < c_out; ++o)
        for (int i = 0; i < c_in; ++i)
            for (int64_t r = 0; r < rest; ++r) tv += std::abs(at(o + 1, i, r) - at(o, i, r));
    return tv;
}

bool is_permutation(const std::vector<int>& order) {
    std::vector<bool> seen(order.size(), false);
    for (int v : order) {
        if (v < 0 || v >= int(order.size()) || seen[size_t(v)]) return false;
        seen[size_t(v)] = true;
    }
    return true;
}

std::vector<int> invert_permutation(const std::vector<int>& order) {
    if (!is_permutation(order)) throw ContractError("invert_permutation: not a permutation");
    std::vector<int> inv(order.size());
    for (size_t i = 0; i < order.size(); ++i) inv[size_t(order[i])] = int(i);
    return inv;
}

double ordering_cost(const Tensor& features, const std::vector<int>& order) {
    if (features.ndim() != 2) throw ShapeError("ordering_cost: features must be [C, F]");
    if (int(order.size()) != features.dim(0) || !is_permutation(order))
        throw ContractError("ordering_cost: order must permute the feature rows");
    return path_cost(pairwise_l1(features), order);
}

std::vector<int> find_permutation(const Tensor& features) {
    if (features.ndim() != 2) throw ShapeError("find_permutation: features must be [C, F]");
    int c = features.dim(0);
    std::vector<int> identity(size_t(c), 0);
    std::iota(identity.begin(), identity.end(), 0);
    if (c <= 1) return identity;
    auto dist = pairwise_l1(features);
    std::vector<int> best;
    if (c <= 8) {
        best = exhaustive_path(dist, c);
    } else {
        double best_cost = std::numeric_limits<double>::infinity();
        for (int start = 0; start < c; ++start) {
            std::vector<int> cand = greedy_path(dist, c, start);
            two_opt(dist, cand);
            double cost = path_cost(dist, cand);
            if (cost < best_cost) {
                best_cost = cost;
                best = cand;
            }
        }
    }
    if (path_cost(dist, best) > path_cost(dist, identity)) return identity;
    return best;
}

Tensor block_channel_features(const ResBlock& block) {
    int c = block.conv1.kernel.dim(0);
    return gather_features({{&block.conv1.kernel, 0}, {&block.conv2.kernel, 1}}, c);
}

void apply_block_permutation(ResBlock& block, const std::vector<int>& order) {
    if (!is_permutation(order)) throw ContractError("apply_block_permutation: not a permutation");
    if (int(order.size()) != block.conv1.kernel.dim(0))
        throw ShapeError("apply_block_permutation: length does not match intermediate width");
    reorder_out_channels(block.conv1, order);
    reorder_axis(block.conv2.kernel, 1, order);
}

Tensor stage_channel_features(const PriorNetwork& net, int stage) {
    if (stage < 0 || stage >= int(net.layers.size()))
        throw ContractError("stage_channel_features: stage out of range");
    const auto& blocks = net.layers[size_t(stage)];
    int c = blocks.front().conv2.kernel.dim(0);
    std::vector<FeatureSpec> specs;
    if (stage == 0) specs.push_back({&net.stem.kernel, 0});
    for (size_t j = 0; j < blocks.size(); ++j) {
        specs.push_back({&blocks[j].conv2.kernel, 0});
        if (j > 0 || stage == 0) specs.push_back({&blocks[j].conv1.kernel, 1});
    }
    if (stage > 0) specs.push_back({&blocks.front().projection.kernel, 0});
    if (stage + 1 < int(net.layers.size())) {
        const ResBlock& next = net.layers[size_t(stage) + 1].front();
        specs.push_back({&next.conv1.kernel, 1});
        if (next.has_projection) specs.push_back({&next.projection.kernel, 1});
    } else {
        specs.push_back({&net.fc_weight, 1});
    }
    return gather_features(specs, c);
}

void apply_stage_permutation(PriorNetwork& net, int stage, const std::vector<int>& order) {
    if (stage < 0 || stage >= int(net.layers.size()))
        throw ContractError("apply_stage_permutation: stage out of range");
    auto& blocks = net.layers[size_t(stage)];
    int c = blocks.front().conv2.kernel.dim(0);
    if (!is_permutation(order) || int(order.size()) != c)
        throw ContractError("apply_stage_permutation: order must permute the stream channels");
    for (size_t j = 0; j < blocks.size(); ++j) {
        // identity shortcuts are what carry a stream channel through the
        // stage; a mid-stage projection breaks that correspondence
        if (j > 0 && blocks[j].has_projection)
            throw ContractError("apply_stage_permutation: mid-stage projection blocks stream propagation");
        if (blocks[j].conv2.kernel.dim(0) != c)
            throw ContractError("apply_stage_permutation: stream width changes inside the stage");
    }
    if (stage == 0) {
        if (blocks.front().has_projection || net.stem.kernel.dim(0) != c)
            throw ContractError("apply_stage_permutation: stem stream does not reach the stage");
        reorder_out_channels(net.stem, order);
    }
    for (size_t j = 0; j < blocks.size(); ++j) {
        reorder_out_channels(blocks[j].conv2, order);
        if (j > 0 || stage == 0) reorder_axis(blocks[j].conv1.kernel, 1, order);
    }
    if (stage > 0) reorder_out_channels(blocks.front().projection, order);
    if (stage + 1 < int(net.layers.size())) {
        ResBlock& next = net.layers[size_t(stage) + 1].front();
        reorder_axis(next.conv1.kernel, 1, order);
        if (next.has_projection) reorder_axis(next.projection.kernel, 1, order);
    } else {
        reorder_axis(net.fc_weight, 1, order);
    }
}

std::vector<SmoothReport> smooth_network(PriorNetwork& net, SmoothScope scope) {
    if (!net.folded) fold_network(net);
    std::vector<SmoothReport> reports;
    if (scope == SmoothScope::kStageWide) {
        for (int s = 0; s < int(net.layers.size()); ++s) {
            Tensor features = stage_channel_features(net, s);
            double before = ordering_cost(features, [&] {
                std::vector<int> id(size_t(features.dim(0)));
                std::iota(id.begin(), id.end(), 0);
                return id;
            }());
            std::vector<int> order = find_permutation(features);
            apply_stage_permutation(net, s, order);
            reports.push_back({"stage" + std::to_string(s), before, ordering_cost(features, order)});
        }
    }
    for (size_t s = 0; s < net.layers.size(); ++s)
        for (int j = 0; j < int(net.layers[s].size()); ++j) {
            ResBlock& block = net.layers[s][size_t(j)];
            double before = block_tv(block);
            std::vector<int> order = find_permutation(block_channel_features(block));
            apply_block_permutation(block, order);
            reports.push_back({block_prefix(s, j), before, block_tv(block)});
        }
    return reports;
}

}  // namespace metamorph
