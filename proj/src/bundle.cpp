#include "metamorph/bundle.hpp"

#include <algorithm>
#include <sstream>
#include <string>

#include "metamorph/errors.hpp"

namespace metamorph {

namespace {

int network_normalizer(const ArchSpec& arch) {
    int n = std::max(arch.in_channels, arch.num_classes);
    for (int w : arch.widths) n = std::max(n, w);
    return n;
}

std::string block_prefix(size_t i) { return "block" + std::to_string(i); }

void store_inr(Checkpoint& ckpt, const std::string& prefix, const INRModel& model) {
    const auto& ws = model.weights();
    const auto& bs = model.biases();
    for (size_t j = 0; j < ws.size(); ++j) {
        ckpt.add(prefix + ".w" + std::to_string(j), ws[j]);
        ckpt.add(prefix + ".b" + std::to_string(j), bs[j]);
    }
}

void load_inr(const Checkpoint& ckpt, const std::string& prefix, INRModel& model) {
    auto& ws = model.weights();
    auto& bs = model.biases();
    for (size_t j = 0; j < ws.size(); ++j) {
        Tensor w = ckpt.get(prefix + ".w" + std::to_string(j));
        Tensor b = ckpt.get(prefix + ".b" + std::to_string(j));
        if (w.shape() != ws[j].shape() || b.shape() != bs[j].shape())
            throw FormatError("bundle checkpoint: INR tensor shape mismatch at " + prefix);
        ws[j] = std::move(w);
        bs[j] = std::move(b);
    }
}

INRConfig config_from_meta(const Checkpoint& ckpt, const std::string& key) {
    INRConfig cfg;
    cfg.depth = std::stoi(ckpt.meta_at(key + "_depth"));
    cfg.width = std::stoi(ckpt.meta_at(key + "_width"));
    cfg.input_dim = std::stoi(ckpt.meta_at(key + "_input"));
    cfg.output_dim = std::stoi(ckpt.meta_at(key + "_output"));
    cfg.residual = ckpt.meta_at(key + "_residual") == "1";
    return cfg;
}

void config_to_meta(Checkpoint& ckpt, const std::string& key, const INRConfig& cfg) {
    ckpt.meta[key + "_depth"] = std::to_string(cfg.depth);
    ckpt.meta[key + "_width"] = std::to_string(cfg.width);
    ckpt.meta[key + "_input"] = std::to_string(cfg.input_dim);
    ckpt.meta[key + "_output"] = std::to_string(cfg.output_dim);
    ckpt.meta[key + "_residual"] = cfg.residual ? "1" : "0";
}

}  // namespace

std::pair<LayerCoordInfo, LayerCoordInfo> block_layer_infos(const ArchSpec& arch, BlockId id) {
    if (id.stage < 0 || id.stage >= static_cast<int>(arch.widths.size()) || id.index < 0 ||
        id.index >= arch.blocks_per_layer)
        throw ContractError("block_layer_infos: block id outside the architecture");

    int idx = 1;  // stem
    int conv1_idx = -1, conv2_idx = -1;
    for (size_t s = 0; s < arch.widths.size(); ++s) {
        for (int j = 0; j < arch.blocks_per_layer; ++j) {
            int c1 = ++idx;
            int c2 = ++idx;
            if (s > 0 && j == 0) ++idx;  // projection
            if (static_cast<int>(s) == id.stage && j == id.index) {
                conv1_idx = c1;
                conv2_idx = c2;
            }
        }
    }
    int total = ++idx;  // classifier
    int normalizer = network_normalizer(arch);
    int width = arch.widths[static_cast<size_t>(id.stage)];

    LayerCoordInfo conv1{id.str() + ".conv1", conv1_idx, total, width, width, normalizer, 3};
    LayerCoordInfo conv2{id.str() + ".conv2", conv2_idx, total, width, width, normalizer, 3};
    return {conv1, conv2};
}

std::vector<BlockId> INRBundle::block_ids() const {
    std::vector<BlockId> ids;
    ids.reserve(blocks.size());
    for (const auto& b : blocks) ids.push_back(b.block);
    return ids;
}

std::vector<int> INRBundle::references() const {
    std::vector<int> refs;
    refs.reserve(blocks.size());
    for (const auto& b : blocks) refs.push_back(b.reference);
    return refs;
}

std::vector<Tensor> INRBundle::block_parameters(size_t i) const {
    if (i >= blocks.size()) throw ContractError("INRBundle: block index out of range");
    const BlockINR& b = blocks[i];
    std::vector<Tensor> params;
    auto take = [&](const INRModel& m) {
        for (const Tensor& t : m.parameters()) params.push_back(t);
    };
    take(b.conv1.kernel_inr);
    if (disentangled) take(b.conv1.bias_inr);
    take(b.conv2.kernel_inr);
    if (disentangled) take(b.conv2.bias_inr);
    return params;
}

std::vector<Tensor> INRBundle::parameters() const {
    std::vector<Tensor> params;
    for (size_t i = 0; i < blocks.size(); ++i) {
        auto p = block_parameters(i);
        params.insert(params.end(), p.begin(), p.end());
    }
    return params;
}

BlockINR make_block_inr(const ArchSpec& arch, BlockId id, const INRConfig& kernel_cfg,
                        const INRConfig& bias_cfg, bool disentangled, RngStream& rng,
                        const BlockINR* predecessor) {
    auto [info1, info2] = block_layer_infos(arch, id);

    BlockINR entry;
    entry.block = id;
    entry.reference = arch.widths[static_cast<size_t>(id.stage)];
    entry.conv1.info = info1;
    entry.conv2.info = info2;
    entry.conv1.disentangled = disentangled;
    entry.conv2.disentangled = disentangled;

    auto k1 = rng.split("conv1_kernel");
    auto k2 = rng.split("conv2_kernel");
    entry.conv1.kernel_inr = INRModel(kernel_cfg, k1);
    entry.conv2.kernel_inr = INRModel(kernel_cfg, k2);
    if (disentangled) {
        auto b1 = rng.split("conv1_bias");
        auto b2 = rng.split("conv2_bias");
        entry.conv1.bias_inr = INRModel(bias_cfg, b1);
        entry.conv2.bias_inr = INRModel(bias_cfg, b2);
    }

    if (predecessor != nullptr) {
        entry.conv1.kernel_inr.copy_parameters_from(predecessor->conv1.kernel_inr);
        entry.conv2.kernel_inr.copy_parameters_from(predecessor->conv2.kernel_inr);
        if (disentangled) {
            entry.conv1.bias_inr.copy_parameters_from(predecessor->conv1.bias_inr);
            entry.conv2.bias_inr.copy_parameters_from(predecessor->conv2.bias_inr);
        }
    }
    return entry;
}

MetaBlockWeights generate_block_weights(const BlockINR& entry, int width,
                                        const PerturbationSpec& perturbation, RngStream& rng,
                                        const FourierSpec& fourier) {
    if (width < 1 || width > entry.reference)
        throw ContractError("generate_block_weights: width outside [1, reference]");
    GeneratedLayer g1 =
        generate_layer_weights(entry.conv1, width, entry.conv1.info.in_ref, perturbation, rng,
                               fourier);
    GeneratedLayer g2 = generate_layer_weights(entry.conv2, entry.conv2.info.out_ref, width,
                                               perturbation, rng, fourier);
    return {g1.kernel, g1.bias, g2.kernel, g2.bias};
}

std::vector<Tensor> prior_block_tensors(const PriorNetwork& prior, BlockId id) {
    if (!prior.folded) throw ContractError("prior_block_tensors: prior must be folded");
    if (id.stage < 0 || id.stage >= static_cast<int>(prior.layers.size()))
        throw ContractError("prior_block_tensors: stage out of range");
    const auto& stage = prior.layers[static_cast<size_t>(id.stage)];
    if (id.index < 0 || id.index >= static_cast<int>(stage.size()))
        throw ContractError("prior_block_tensors: block index out of range");
    const ResBlock& b = stage[static_cast<size_t>(id.index)];
    return {b.conv1.kernel, b.conv1.bias, b.conv2.kernel, b.conv2.bias};
}

std::vector<Tensor> generated_tensors(const MetaBlockWeights& w) {
    return {w.conv1_kernel, w.conv1_bias, w.conv2_kernel, w.conv2_bias};
}

Checkpoint bundle_to_checkpoint(const INRBundle& bundle, const std::vector<Tensor>& alphas) {
    if (alphas.size() != bundle.blocks.size())
        throw ContractError("bundle_to_checkpoint: one alpha per block required");

    Checkpoint ckpt;
    ckpt.meta["model_kind"] = "inr_bundle";
    std::ostringstream widths;
    for (size_t i = 0; i < bundle.arch.widths.size(); ++i) {
        if (i) widths << ",";
        widths << bundle.arch.widths[i];
    }
    ckpt.meta["widths"] = widths.str();
    ckpt.meta["blocks_per_layer"] = std::to_string(bundle.arch.blocks_per_layer);
    ckpt.meta["num_classes"] = std::to_string(bundle.arch.num_classes);
    ckpt.meta["in_channels"] = std::to_string(bundle.arch.in_channels);
    config_to_meta(ckpt, "kernel_inr", bundle.kernel_cfg);
    config_to_meta(ckpt, "bias_inr", bundle.bias_cfg);
    ckpt.meta["fourier_frequencies"] = std::to_string(bundle.fourier.num_frequencies);
    ckpt.meta["disentangled"] = bundle.disentangled ? "1" : "0";

    std::ostringstream ids;
    for (size_t i = 0; i < bundle.blocks.size(); ++i) {
        const BlockINR& b = bundle.blocks[i];
        if (i) ids << ";";
        ids << b.block.stage << ":" << b.block.index << ":" << b.reference;
    }
    ckpt.meta["blocks"] = ids.str();

    for (size_t i = 0; i < bundle.blocks.size(); ++i) {
        const BlockINR& b = bundle.blocks[i];
        store_inr(ckpt, block_prefix(i) + ".conv1.kernel_inr", b.conv1.kernel_inr);
        store_inr(ckpt, block_prefix(i) + ".conv2.kernel_inr", b.conv2.kernel_inr);
        if (bundle.disentangled) {
            store_inr(ckpt, block_prefix(i) + ".conv1.bias_inr", b.conv1.bias_inr);
            store_inr(ckpt, block_prefix(i) + ".conv2.bias_inr", b.conv2.bias_inr);
        }
    }

    std::vector<float> alpha_values;
    alpha_values.reserve(alphas.size());
    for (const Tensor& a : alphas) {
        if (a.numel() != 1) throw ContractError("bundle_to_checkpoint: alpha must be scalar");
        alpha_values.push_back(a.data()[0]);
    }
    ckpt.add("alphas", Shape{static_cast<int>(alpha_values.size())}, alpha_values);
    return ckpt;
}

void bundle_from_checkpoint(const Checkpoint& ckpt, INRBundle& bundle,
                            std::vector<Tensor>& alphas) {
    if (ckpt.meta_at("model_kind") != "inr_bundle")
        throw FormatError("bundle_from_checkpoint: not an INR bundle checkpoint");

    INRBundle out;
    out.arch.widths.clear();
    std::istringstream widths(ckpt.meta_at("widths"));
    for (std::string tok; std::getline(widths, tok, ',');) out.arch.widths.push_back(std::stoi(tok));
    out.arch.blocks_per_layer = std::stoi(ckpt.meta_at("blocks_per_layer"));
    out.arch.num_classes = std::stoi(ckpt.meta_at("num_classes"));
    out.arch.in_channels = std::stoi(ckpt.meta_at("in_channels"));
    out.kernel_cfg = config_from_meta(ckpt, "kernel_inr");
    out.bias_cfg = config_from_meta(ckpt, "bias_inr");
    out.fourier.num_frequencies = std::stoi(ckpt.meta_at("fourier_frequencies"));
    out.disentangled = ckpt.meta_at("disentangled") == "1";

    std::istringstream ids(ckpt.meta_at("blocks"));
    RngStream scratch(0);
    size_t i = 0;
    for (std::string tok; std::getline(ids, tok, ';'); ++i) {
        std::istringstream fields(tok);
        std::string stage, index, ref;
        if (!std::getline(fields, stage, ':') || !std::getline(fields, index, ':') ||
            !std::getline(fields, ref, ':'))
            throw FormatError("bundle_from_checkpoint: malformed block list");
        BlockId id{std::stoi(stage), std::stoi(index)};
        BlockINR entry = make_block_inr(out.arch, id, out.kernel_cfg, out.bias_cfg,
                                        out.disentangled, scratch);
        if (entry.reference != std::stoi(ref))
            throw FormatError("bundle_from_checkpoint: block reference disagrees with widths");
        load_inr(ckpt, block_prefix(i) + ".conv1.kernel_inr", entry.conv1.kernel_inr);
        load_inr(ckpt, block_prefix(i) + ".conv2.kernel_inr", entry.conv2.kernel_inr);
        if (out.disentangled) {
            load_inr(ckpt, block_prefix(i) + ".conv1.bias_inr", entry.conv1.bias_inr);
            load_inr(ckpt, block_prefix(i) + ".conv2.bias_inr", entry.conv2.bias_inr);
        }
        out.blocks.push_back(std::move(entry));
    }

    Tensor packed = ckpt.get("alphas");
    if (packed.numel() != static_cast<int64_t>(out.blocks.size()))
        throw FormatError("bundle_from_checkpoint: alpha count disagrees with block list");
    std::vector<Tensor> loaded;
    loaded.reserve(out.blocks.size());
    for (size_t a = 0; a < out.blocks.size(); ++a)
        loaded.push_back(Tensor::scalar(packed.data()[a]));

    bundle = std::move(out);
    alphas = std::move(loaded);
}

}  // namespace metamorph
