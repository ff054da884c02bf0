#include "metamorph/morphnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "metamorph/errors.hpp"

namespace metamorph {

std::vector<BlockId> metamorphic_candidates(const ArchSpec& arch, bool include_last) {
    std::vector<BlockId> out;
    int stages = int(arch.widths.size());
    for (int s = 0; s < stages; ++s)
        for (int j = 1; j < arch.blocks_per_layer; ++j) {
            bool is_network_last = s == stages - 1 && j == arch.blocks_per_layer - 1;
            if (is_network_last && !include_last) continue;
            out.push_back({s, j});
        }
    return out;
}

double gamma_from_width(int width, int reference) {
    if (reference < 1 || width < 1 || width > reference)
        throw ContractError("gamma_from_width: need 1 <= width <= reference");
    return 1.0 - double(width) / double(reference);
}

int width_from_gamma(int reference, double gamma) {
    if (reference < 1) throw ContractError("width_from_gamma: reference must be positive");
    if (!(gamma >= 0.0 && gamma < 1.0))
        throw ContractError("width_from_gamma: gamma must lie in [0, 1)");
    long long c = std::llround((1.0 - gamma) * double(reference));
    return int(std::max(1LL, c));
}

bool NetworkConfig::uncompressed() const {
    for (const auto& b : blocks)
        if (b.width != b.reference) return false;
    return true;
}

void NetworkConfig::validate() const {
    for (const auto& b : blocks) {
        if (b.reference < 1 || b.width < 1 || b.width > b.reference)
            throw ContractError("config: block " + b.block.str() + " violates 1 <= c <= C");
    }
}

NetworkConfig instantiate_config(const std::vector<BlockId>& blocks,
                                 const std::vector<int>& references, double gamma) {
    if (blocks.size() != references.size())
        throw ContractError("instantiate_config: one reference width per block required");
    NetworkConfig cfg;
    for (size_t i = 0; i < blocks.size(); ++i)
        cfg.blocks.push_back({blocks[i], references[i], width_from_gamma(references[i], gamma)});
    cfg.validate();
    return cfg;
}

ConfigurationPool ConfigurationPool::from_reference(int reference) {
    if (reference < 1) throw ContractError("pool: reference width must be positive");
    ConfigurationPool pool;
    pool.reference = reference;
    for (int w = (reference + 1) / 2; w <= reference; ++w) pool.widths.push_back(w);
    return pool;
}

bool ConfigurationPool::contains(int width) const {
    return std::find(widths.begin(), widths.end(), width) != widths.end();
}

Tensor metamorphic_block_forward(const Tensor& x, const MetaBlockWeights& w,
                                 const Tensor& alpha) {
    if (x.ndim() != 4) throw ShapeError("metamorphic block: input must be [B,C,H,W]");
    if (w.conv1_kernel.dim(1) != x.dim(1))
        throw ContractError("metamorphic block: input width does not match conv1");
    if (w.conv2_kernel.dim(1) != w.conv1_kernel.dim(0))
        throw ContractError("metamorphic block: conv1/conv2 intermediate widths disagree");
    if (w.conv2_kernel.dim(0) != x.dim(1))
        throw ContractError("metamorphic block: output width must match the stream");
    int k = w.conv1_kernel.dim(2);
    Tensor h = relu(conv2d(x, w.conv1_kernel, w.conv1_bias, 1, k / 2));
    h = conv2d(h, w.conv2_kernel, w.conv2_bias, 1, k / 2);
    return add(x, scale_by(h, alpha));
}

Tensor morph_forward(PriorNetwork& base, const std::vector<BlockId>& meta_blocks,
                     const std::vector<Tensor>& alphas,
                     const std::vector<MetaBlockWeights>& generated, const Tensor& x) {
    if (!base.folded) throw ContractError("morph_forward: base network must be folded first");
    if (meta_blocks.size() != generated.size() || meta_blocks.size() != alphas.size())
        throw ContractError("morph_forward: need one weight set and one alpha per block");
    for (const auto& id : meta_blocks) {
        if (id.stage < 0 || id.stage >= int(base.layers.size()) || id.index < 1 ||
            id.index >= int(base.layers[size_t(id.stage)].size()))
            throw ContractError("morph_forward: " + id.str() +
                                " is not a replaceable block (projection blocks stay fixed)");
    }
    Tensor h = relu(base.stem.forward(x, false));
    size_t next = 0;
    for (int s = 0; s < int(base.layers.size()); ++s)
        for (int j = 0; j < int(base.layers[size_t(s)].size()); ++j) {
            if (next < meta_blocks.size() && meta_blocks[next] == BlockId{s, j}) {
                h = metamorphic_block_forward(h, generated[next], alphas[next]);
                ++next;
            } else {
                h = base.layers[size_t(s)][size_t(j)].forward(h, false);
            }
        }
    if (next != meta_blocks.size())
        throw ContractError("morph_forward: block list does not follow network order");
    h = global_avg_pool(h);
    return linear(h, base.fc_weight, base.fc_bias);
}

Tensor MorphModel::forward(const Tensor& x) {
    return morph_forward(base, meta_blocks, alphas, weights, x);
}

int64_t MorphModel::param_count() const {
    int64_t n = base.param_count();
    for (const auto& id : meta_blocks) {
        const ResBlock& b = base.layers[size_t(id.stage)][size_t(id.index)];
        n -= b.conv1.kernel.numel() + b.conv1.bias.numel();
        n -= b.conv2.kernel.numel() + b.conv2.bias.numel();
    }
    for (const auto& w : weights) n += w.param_entries();
    n += int64_t(alphas.size());
    return n;
}

Checkpoint to_checkpoint(const MorphModel& model) {
    Checkpoint ckpt = to_checkpoint(model.base, "morphed");
    std::string ids;
    for (size_t i = 0; i < model.meta_blocks.size(); ++i) {
        const std::string prefix = "meta" + std::to_string(i);
        const auto& w = model.weights[i];
        ckpt.add(prefix + ".conv1.kernel", w.conv1_kernel.shape(), w.conv1_kernel.data());
        ckpt.add(prefix + ".conv1.bias", w.conv1_bias.shape(), w.conv1_bias.data());
        ckpt.add(prefix + ".conv2.kernel", w.conv2_kernel.shape(), w.conv2_kernel.data());
        ckpt.add(prefix + ".conv2.bias", w.conv2_bias.shape(), w.conv2_bias.data());
        ckpt.add(prefix + ".alpha", {1}, {model.alphas[i].item()});
        const auto& bc = model.config.blocks[i];
        ckpt.meta[prefix + ".width"] = std::to_string(bc.width);
        ckpt.meta[prefix + ".reference"] = std::to_string(bc.reference);
        if (i) ids += ";";
        ids += std::to_string(model.meta_blocks[i].stage) + ":" +
               std::to_string(model.meta_blocks[i].index);
    }
    ckpt.meta["meta_blocks"] = ids;
    return ckpt;
}

MorphModel morph_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.meta_at("model_kind") != "morphed")
        throw FormatError("checkpoint does not hold a sampled network");
    MorphModel model;
    model.base = prior_from_checkpoint(ckpt);
    std::string ids = ckpt.meta_at("meta_blocks");
    size_t pos = 0;
    while (pos < ids.size()) {
        size_t semi = ids.find(';', pos);
        if (semi == std::string::npos) semi = ids.size();
        std::string token = ids.substr(pos, semi - pos);
        size_t colon = token.find(':');
        if (colon == std::string::npos) throw FormatError("malformed meta_blocks entry");
        model.meta_blocks.push_back(
            {std::stoi(token.substr(0, colon)), std::stoi(token.substr(colon + 1))});
        pos = semi + 1;
    }
    for (size_t i = 0; i < model.meta_blocks.size(); ++i) {
        const std::string prefix = "meta" + std::to_string(i);
        MetaBlockWeights w;
        w.conv1_kernel = ckpt.get(prefix + ".conv1.kernel");
        w.conv1_bias = ckpt.get(prefix + ".conv1.bias");
        w.conv2_kernel = ckpt.get(prefix + ".conv2.kernel");
        w.conv2_bias = ckpt.get(prefix + ".conv2.bias");
        model.weights.push_back(std::move(w));
        model.alphas.push_back(ckpt.get(prefix + ".alpha"));
        BlockConfig bc;
        bc.block = model.meta_blocks[i];
        bc.width = std::stoi(ckpt.meta_at(prefix + ".width"));
        bc.reference = std::stoi(ckpt.meta_at(prefix + ".reference"));
        model.config.blocks.push_back(bc);
    }
    model.config.validate();
    return model;
}


EvalResult evaluate(MorphModel& model, const Dataset& ds, int batch_size) {
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
        Tensor logits = model.forward(x);
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

}  // namespace metamorph

