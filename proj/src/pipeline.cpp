#include "metamorph/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "metamorph/checkpoint.hpp"
#include "metamorph/errors.hpp"
#include "metamorph/io.hpp"

namespace metamorph::pipeline {

namespace {

namespace fs = std::filesystem;

std::string format_double(double v) {
    std::ostringstream oss;
    oss << std::setprecision(17) << v;
    return oss.str();
}

void embed_data_meta(Checkpoint& ckpt, const SynthSpec& synth, uint64_t data_seed) {
    ckpt.meta["data_seed"] = std::to_string(data_seed);
    ckpt.meta["data_image_size"] = std::to_string(synth.image_size);
    ckpt.meta["data_num_classes"] = std::to_string(synth.num_classes);
    ckpt.meta["data_train_count"] = std::to_string(synth.train_count);
    ckpt.meta["data_test_count"] = std::to_string(synth.test_count);
    ckpt.meta["data_noise_amplitude"] = format_double(synth.noise_amplitude);
    ckpt.meta["data_brightness_low"] = format_double(synth.brightness_low);
    ckpt.meta["data_brightness_high"] = format_double(synth.brightness_high);
    ckpt.meta["data_blob_sigma"] = format_double(synth.blob_sigma);
    ckpt.meta["data_checker_cell"] = std::to_string(synth.checker_cell);
}

SynthSpec synth_from_meta(const std::map<std::string, std::string>& meta, uint64_t* data_seed) {
    SynthSpec s;
    auto get = [&](const char* key, auto parse, auto& slot) {
        auto it = meta.find(key);
        if (it != meta.end()) slot = parse(it->second);
    };
    auto to_i = [](const std::string& v) { return std::stoi(v); };
    auto to_d = [](const std::string& v) { return std::stod(v); };
    get("data_image_size", to_i, s.image_size);
    get("data_num_classes", to_i, s.num_classes);
    get("data_train_count", to_i, s.train_count);
    get("data_test_count", to_i, s.test_count);
    get("data_noise_amplitude", to_d, s.noise_amplitude);
    get("data_brightness_low", to_d, s.brightness_low);
    get("data_brightness_high", to_d, s.brightness_high);
    get("data_blob_sigma", to_d, s.blob_sigma);
    get("data_checker_cell", to_i, s.checker_cell);
    if (data_seed != nullptr) {
        auto it = meta.find("data_seed");
        if (it != meta.end()) *data_seed = std::stoull(it->second);
    }
    return s;
}

void set_synth(KvConfig& m, const SynthSpec& synth, uint64_t data_seed) {
    m.set_int("data_seed", int64_t(data_seed));
    m.set_int("image_size", synth.image_size);
    m.set_int("num_classes", synth.num_classes);
    m.set_int("train_count", synth.train_count);
    m.set_int("test_count", synth.test_count);
    m.set_double("noise_amplitude", synth.noise_amplitude);
    m.set_double("brightness_low", synth.brightness_low);
    m.set_double("brightness_high", synth.brightness_high);
    m.set_double("blob_sigma", synth.blob_sigma);
    m.set_int("checker_cell", synth.checker_cell);
}

void set_plan(KvConfig& m, const StagePlan& plan) {
    m.set_int("num_blocks", plan.num_blocks);
    m.set_int("epochs_per_stage", plan.epochs_per_stage);
    m.set_int("accum", plan.accum);
    m.set_int("warmup_epochs", plan.warmup_epochs);
    m.set_double("peak_lr", plan.peak_lr);
    m.set_double("shared_lr", plan.shared_lr);
    m.set_int("batch_size", plan.batch_size);
    m.set_bool("per_block_gamma", plan.per_block_gamma);
    m.set_bool("strict_shared", plan.strict_shared);
    m.set_bool("include_last_block", plan.include_last_block);
    m.set_bool("augment", plan.augment);
    m.set_bool("incremental", plan.ablation.incremental);
    m.set_bool("alpha_scaling", plan.ablation.alpha_scaling);
    m.set_bool("grad_accum", plan.ablation.grad_accum);
    m.set_bool("pre_init", plan.ablation.pre_init);
    m.set_bool("disentangle", plan.ablation.disentangle);
    m.set_double("loss_task", plan.loss.task);
    m.set_double("loss_recon", plan.loss.recon);
    m.set_double("loss_reg", plan.loss.reg);
    m.set_bool("perturb_enabled", plan.perturbation.enabled);
    m.set_double("perturb_low", plan.perturbation.low);
    m.set_double("perturb_high", plan.perturbation.high);
    m.set("perturb_mode",
          plan.perturbation.mode == PerturbMode::kPreNormalization ? "pre" : "post");
    m.set_int("inr_depth", plan.kernel_inr.depth);
    m.set_int("inr_width", plan.kernel_inr.width);
    m.set_int("inr_output", plan.kernel_inr.output_dim);
    m.set_int("fourier_frequencies", plan.fourier.num_frequencies);
    m.set_int("seed", int64_t(plan.seed));
}

uint64_t data_seed_from_config(const KvConfig& cfg) {
    return uint64_t(cfg.get_int("data_seed", 0));
}

double report_gamma(const Checkpoint& ckpt, const MorphModel& model) {
    auto it = ckpt.meta.find("sample_gamma");
    if (it != ckpt.meta.end()) return std::stod(it->second);
    if (model.config.blocks.empty()) return 0.0;
    const BlockConfig* widest = &model.config.blocks[0];
    for (const BlockConfig& b : model.config.blocks)
        if (b.reference > widest->reference) widest = &b;
    return widest->gamma();
}

void write_report(std::ostream& out, const std::string& report, double gamma, EvalResult r,
                  int64_t params, uint64_t seed) {
    if (report == "csv") {
        out << "gamma,accuracy,ce_loss,param_count,seed\n";
        out << std::setprecision(10) << gamma << "," << r.accuracy << "," << r.ce_loss << ","
            << params << "," << seed << "\n";
    } else if (report == "json") {
        nlohmann::json j{{"gamma", gamma},
                         {"accuracy", r.accuracy},
                         {"ce_loss", r.ce_loss},
                         {"param_count", params},
                         {"seed", seed}};
        out << j.dump() << "\n";
    } else {
        throw ContractError("eval: report must be csv or json");
    }
}

}  // namespace

ArchSpec arch_from_config(const KvConfig& cfg) {
    ArchSpec arch;
    arch.widths = cfg.get_int_list("widths", arch.widths);
    arch.blocks_per_layer = int(cfg.get_int("blocks_per_layer", arch.blocks_per_layer));
    arch.num_classes = int(cfg.get_int("num_classes", arch.num_classes));
    arch.in_channels = int(cfg.get_int("in_channels", arch.in_channels));
    return arch;
}

SynthSpec synth_from_config(const KvConfig& cfg) {
    SynthSpec s;
    s.image_size = int(cfg.get_int("image_size", s.image_size));
    s.num_classes = int(cfg.get_int("num_classes", s.num_classes));
    s.train_count = int(cfg.get_int("train_count", s.train_count));
    s.test_count = int(cfg.get_int("test_count", s.test_count));
    s.noise_amplitude = cfg.get_double("noise_amplitude", s.noise_amplitude);
    s.brightness_low = cfg.get_double("brightness_low", s.brightness_low);
    s.brightness_high = cfg.get_double("brightness_high", s.brightness_high);
    s.blob_sigma = cfg.get_double("blob_sigma", s.blob_sigma);
    s.checker_cell = int(cfg.get_int("checker_cell", s.checker_cell));
    return s;
}

PriorTrainSpec prior_train_from_config(const KvConfig& cfg) {
    PriorTrainSpec s;
    s.epochs = int(cfg.get_int("epochs", s.epochs));
    s.batch_size = int(cfg.get_int("batch_size", s.batch_size));
    s.learning_rate = float(cfg.get_double("lr", double(s.learning_rate)));
    s.weight_decay = float(cfg.get_double("weight_decay", double(s.weight_decay)));
    s.augment = cfg.get_bool("augment", s.augment);
    return s;
}

StagePlan stage_plan_from_config(const KvConfig& cfg, uint64_t seed) {
    StagePlan p;
    p.num_blocks = int(cfg.get_int("num_blocks", p.num_blocks));
    p.epochs_per_stage = int(cfg.get_int("epochs_per_stage", p.epochs_per_stage));
    p.accum = int(cfg.get_int("accum", p.accum));
    p.warmup_epochs = int(cfg.get_int("warmup_epochs", p.warmup_epochs));
    p.peak_lr = cfg.get_double("peak_lr", p.peak_lr);
    p.shared_lr = cfg.get_double("shared_lr", p.shared_lr);
    p.batch_size = int(cfg.get_int("batch_size", p.batch_size));
    p.per_block_gamma = cfg.get_bool("per_block_gamma", p.per_block_gamma);
    p.strict_shared = cfg.get_bool("strict_shared", p.strict_shared);
    p.include_last_block = cfg.get_bool("include_last_block", p.include_last_block);
    p.augment = cfg.get_bool("augment", p.augment);
    p.ablation.incremental = cfg.get_bool("incremental", p.ablation.incremental);
    p.ablation.alpha_scaling = cfg.get_bool("alpha_scaling", p.ablation.alpha_scaling);
    p.ablation.grad_accum = cfg.get_bool("grad_accum", p.ablation.grad_accum);
    p.ablation.pre_init = cfg.get_bool("pre_init", p.ablation.pre_init);
    p.ablation.disentangle = cfg.get_bool("disentangle", p.ablation.disentangle);
    p.loss.task = cfg.get_double("loss_task", p.loss.task);
    p.loss.recon = cfg.get_double("loss_recon", p.loss.recon);
    p.loss.reg = cfg.get_double("loss_reg", p.loss.reg);
    p.perturbation.enabled = cfg.get_bool("perturb_enabled", p.perturbation.enabled);
    p.perturbation.low = float(cfg.get_double("perturb_low", double(p.perturbation.low)));
    p.perturbation.high = float(cfg.get_double("perturb_high", double(p.perturbation.high)));
    std::string mode = cfg.get_str("perturb_mode", "pre");
    if (mode == "pre")
        p.perturbation.mode = PerturbMode::kPreNormalization;
    else if (mode == "post")
        p.perturbation.mode = PerturbMode::kPostNormalization;
    else
        throw FormatError("stage plan: perturb_mode must be 'pre' or 'post'");
    p.kernel_inr.depth = int(cfg.get_int("inr_depth", p.kernel_inr.depth));
    p.kernel_inr.width = int(cfg.get_int("inr_width", p.kernel_inr.width));
    p.kernel_inr.output_dim = int(cfg.get_int("inr_output", p.kernel_inr.output_dim));
    p.bias_inr.depth = p.kernel_inr.depth;
    p.bias_inr.width = p.kernel_inr.width;
    p.bias_inr.output_dim = 1;
    p.fourier.num_frequencies = int(cfg.get_int("fourier_frequencies", p.fourier.num_frequencies));
    p.kernel_inr.input_dim = p.fourier.embedding_length();
    p.bias_inr.input_dim = p.fourier.embedding_length();
    p.seed = seed;
    return p;
}

std::vector<double> parse_gammas(const std::string& spec) {
    std::vector<std::string> parts;
    std::istringstream iss(spec);
    for (std::string tok; std::getline(iss, tok, ':');) parts.push_back(tok);
    auto to_d = [&](const std::string& s) {
        try {
            size_t pos = 0;
            double v = std::stod(s, &pos);
            if (pos != s.size()) throw FormatError("");
            return v;
        } catch (const std::exception&) {
            throw FormatError("gammas: cannot parse '" + s + "' in '" + spec + "'");
        }
    };
    if (parts.size() == 1) return {to_d(parts[0])};
    if (parts.size() != 3)
        throw FormatError("gammas: expected a single value or start:stop:step, got '" + spec +
                          "'");
    double start = to_d(parts[0]), stop = to_d(parts[1]), step = to_d(parts[2]);
    if (step <= 0) throw FormatError("gammas: step must be positive");
    if (stop < start) throw FormatError("gammas: stop must not precede start");
    std::vector<double> out;
    for (int i = 0;; ++i) {
        double g = start + double(i) * step;
        if (g > stop + 1e-9) break;
        out.push_back(g);
    }
    return out;
}

KvConfig prior_manifest(const KvConfig& cfg, uint64_t seed, const std::string& out_path) {
    KvConfig m;
    m.set("command", "train-prior");
    ArchSpec arch = arch_from_config(cfg);
    m.set_int_list("widths", arch.widths);
    m.set_int("blocks_per_layer", arch.blocks_per_layer);
    m.set_int("in_channels", arch.in_channels);
    set_synth(m, synth_from_config(cfg), data_seed_from_config(cfg));
    PriorTrainSpec t = prior_train_from_config(cfg);
    m.set_int("epochs", t.epochs);
    m.set_int("batch_size", t.batch_size);
    m.set_double("lr", double(t.learning_rate));
    m.set_double("weight_decay", double(t.weight_decay));
    m.set_bool("augment", t.augment);
    m.set_int("seed", int64_t(seed));
    m.set("out", out_path);
    return m;
}

KvConfig train_inr_manifest(const KvConfig& cfg, const StagePlan& plan,
                            const std::string& prior_path, const std::string& prior_hash,
                            const std::string& out_dir) {
    KvConfig m;
    m.set("command", "train-inr");
    m.set("prior", prior_path);
    m.set("prior_sha1", prior_hash);
    m.set("out", out_dir);
    set_plan(m, plan);
    set_synth(m, synth_from_config(cfg), data_seed_from_config(cfg));
    return m;
}

KvConfig sample_manifest(const std::string& inr_dir, const std::string& bundle_hash, double gamma,
                         const SamplerSpec& spec, const std::string& out_path) {
    KvConfig m;
    m.set("command", "sample");
    m.set("inr", inr_dir);
    m.set("bundle_sha1", bundle_hash);
    m.set_double("gamma", gamma);
    m.set_int("K", spec.K);
    m.set_int("seed", int64_t(spec.seed));
    m.set_bool("perturb_enabled", spec.perturbation.enabled);
    m.set_double("perturb_low", double(spec.perturbation.low));
    m.set_double("perturb_high", double(spec.perturbation.high));
    m.set("perturb_mode",
          spec.perturbation.mode == PerturbMode::kPreNormalization ? "pre" : "post");
    m.set("out", out_path);
    return m;
}

std::string file_sha1(const std::string& path) {
    std::vector<uint8_t> bytes = io::read_file(path);
    return io::sha1_hex(bytes.data(), bytes.size());
}

void cmd_train_prior(const std::string& config_path, uint64_t seed, const std::string& out_path,
                     std::ostream& log) {
    KvConfig cfg = KvConfig::load(config_path);
    ArchSpec arch = arch_from_config(cfg);
    SynthSpec synth = synth_from_config(cfg);
    PriorTrainSpec tspec = prior_train_from_config(cfg);
    uint64_t data_seed = data_seed_from_config(cfg);

    Dataset train = make_synth_shapes(data_seed, Split::kTrain, synth);
    PriorNetwork net = train_prior(train, arch, tspec, seed);

    Dataset test = make_synth_shapes(data_seed, Split::kTest, synth);
    EvalResult r = evaluate(net, test);

    KvConfig manifest = prior_manifest(cfg, seed, out_path);
    Checkpoint ckpt = to_checkpoint(net, "prior");
    ckpt.meta["manifest_hash"] = manifest.content_hash();
    embed_data_meta(ckpt, synth, data_seed);
    save_checkpoint(ckpt, out_path);
    manifest.save(out_path + ".manifest");

    log << "train-prior: " << tspec.epochs << " epochs, test accuracy " << std::setprecision(4)
        << r.accuracy << ", ce " << r.ce_loss << ", wrote " << out_path << "\n";
}

void cmd_smooth(const std::string& in_path, const std::string& out_path, SmoothScope scope,
                std::ostream& log) {
    Checkpoint in = load_checkpoint(in_path);
    PriorNetwork net = prior_from_checkpoint(in);
    std::vector<SmoothReport> reports = smooth_network(net, scope);
    for (const SmoothReport& r : reports)
        log << "smooth: " << r.name << " tv " << std::setprecision(8) << r.tv_before << " -> "
            << r.tv_after << "\n";

    KvConfig manifest;
    manifest.set("command", "smooth");
    manifest.set("in", in_path);
    manifest.set("in_sha1", file_sha1(in_path));
    manifest.set("scope", scope == SmoothScope::kStageWide ? "stage-wide" : "intra-block");
    manifest.set("out", out_path);

    Checkpoint out = to_checkpoint(net, "prior");
    for (const auto& [key, value] : in.meta)
        if (out.meta.find(key) == out.meta.end()) out.meta[key] = value;
    out.meta["manifest_hash"] = manifest.content_hash();
    out.meta["smoothed"] = scope == SmoothScope::kStageWide ? "stage-wide" : "intra-block";
    save_checkpoint(out, out_path);
    manifest.save(out_path + ".manifest");
    log << "smooth: wrote " << out_path << "\n";
}

void cmd_train_inr(const std::string& prior_path, const std::string& config_path,
                   const AblationFlags& cli_flags, const std::string& out_dir, std::ostream& log) {
    KvConfig cfg = KvConfig::load(config_path);
    Checkpoint pckpt = load_checkpoint(prior_path);
    PriorNetwork prior = prior_from_checkpoint(pckpt);
    if (!prior.folded)
        throw ContractError("train-inr: prior is not folded; run `smooth` on it first");

    uint64_t seed = uint64_t(cfg.get_int("seed", 0));
    StagePlan plan = stage_plan_from_config(cfg, seed);
    plan.ablation.incremental = plan.ablation.incremental && cli_flags.incremental;
    plan.ablation.alpha_scaling = plan.ablation.alpha_scaling && cli_flags.alpha_scaling;
    plan.ablation.grad_accum = plan.ablation.grad_accum && cli_flags.grad_accum;
    plan.ablation.pre_init = plan.ablation.pre_init && cli_flags.pre_init;
    plan.ablation.disentangle = plan.ablation.disentangle && cli_flags.disentangle;

    uint64_t data_seed = data_seed_from_config(cfg);
    SynthSpec synth = synth_from_config(cfg);
    if (!cfg.has("data_seed") && pckpt.meta.count("data_seed")) {
        synth = synth_from_meta(pckpt.meta, &data_seed);
    }
    Dataset train = make_synth_shapes(data_seed, Split::kTrain, synth);

    fs::create_directories(out_dir);
    KvConfig manifest = train_inr_manifest(cfg, plan, prior_path, file_sha1(prior_path), out_dir);
    manifest.set_int("data_seed", int64_t(data_seed));

    std::ofstream metrics(out_dir + "/metrics.csv");
    metrics << "stage,epoch,lr,task,recon,reg,total,train_accuracy\n";
    auto on_epoch = [&](const EpochMetrics& m) {
        metrics << m.stage << "," << m.epoch << "," << std::setprecision(10) << m.lr << ","
                << m.task << "," << m.recon << "," << m.reg << "," << m.total << ","
                << m.train_accuracy << "\n";
        metrics.flush();
        log << "train-inr: stage " << m.stage << " epoch " << m.epoch << " total "
            << std::setprecision(6) << m.total << " acc " << m.train_accuracy << "\n";
    };

    TrainResult res = train_all(prior, train, plan, on_epoch, out_dir);

    Checkpoint bundle = bundle_to_checkpoint(res.bundle, res.alphas);
    bundle.meta["manifest_hash"] = manifest.content_hash();
    embed_data_meta(bundle, synth, data_seed);
    save_checkpoint(bundle, out_dir + "/bundle.nmck");

    Checkpoint network = to_checkpoint(res.network, "prior");
    network.meta["manifest_hash"] = manifest.content_hash();
    embed_data_meta(network, synth, data_seed);
    save_checkpoint(network, out_dir + "/network.nmck");

    manifest.save(out_dir + "/manifest.txt");
    log << "train-inr: " << res.bundle.blocks.size() << " blocks, " << res.history.size()
        << " epochs, wrote " << out_dir << "\n";
}

void cmd_sample(const std::string& inr_dir, double gamma, int K, uint64_t seed,
                const std::string& out_path, std::ostream& log) {
    const std::string bundle_path = inr_dir + "/bundle.nmck";
    Checkpoint bckpt = load_checkpoint(bundle_path);
    INRBundle bundle;
    std::vector<Tensor> alphas;
    bundle_from_checkpoint(bckpt, bundle, alphas);
    Checkpoint nckpt = load_checkpoint(inr_dir + "/network.nmck");
    PriorNetwork base = prior_from_checkpoint(nckpt);

    SamplerSpec spec;
    spec.K = K;
    spec.seed = seed;

    std::string warning;
    MorphModel model = sample_model(base, bundle, alphas, gamma, spec, &warning);
    if (!warning.empty()) log << "sample: warning: " << warning << "\n";

    KvConfig manifest = sample_manifest(inr_dir, file_sha1(bundle_path), gamma, spec, out_path);
    Checkpoint out = to_checkpoint(model);
    out.meta["manifest_hash"] = manifest.content_hash();
    out.meta["sample_gamma"] = format_double(gamma);
    for (const auto& [key, value] : nckpt.meta)
        if (key.rfind("data_", 0) == 0 && out.meta.find(key) == out.meta.end())
            out.meta[key] = value;
    save_checkpoint(out, out_path);
    manifest.save(out_path + ".manifest");
    log << "sample: gamma " << gamma << " K " << spec.K << " params " << model.param_count()
        << ", wrote " << out_path << "\n";
}

void cmd_eval(const std::string& model_path, const std::string& split, const std::string& report,
              uint64_t seed, bool seed_given, std::ostream& out) {
    if (split != "test" && split != "train")
        throw ContractError("eval: split must be 'test' or 'train'");
    Checkpoint ckpt = load_checkpoint(model_path);

    uint64_t data_seed = seed;
    SynthSpec synth = synth_from_meta(ckpt.meta, seed_given ? nullptr : &data_seed);
    Dataset ds = make_synth_shapes(data_seed, split == "test" ? Split::kTest : Split::kTrain,
                                   synth);

    double gamma = 0.0;
    EvalResult r;
    int64_t params = 0;
    const std::string kind = ckpt.meta_at("model_kind");
    if (kind == "morphed") {
        MorphModel model = morph_from_checkpoint(ckpt);
        r = evaluate(model, ds);
        params = model.param_count();
        gamma = report_gamma(ckpt, model);
    } else {
        PriorNetwork net = prior_from_checkpoint(ckpt);
        r = evaluate(net, ds);
        params = net.param_count();
    }
    write_report(out, report, gamma, r, params, data_seed);
}

void cmd_sweep(const std::string& inr_dir, const std::string& gammas, const std::string& report,
               int K, uint64_t seed, std::ostream& out) {
    if (report != "csv") throw ContractError("sweep: report must be csv");
    std::vector<double> grid = parse_gammas(gammas);

    Checkpoint bckpt = load_checkpoint(inr_dir + "/bundle.nmck");
    INRBundle bundle;
    std::vector<Tensor> alphas;
    bundle_from_checkpoint(bckpt, bundle, alphas);
    Checkpoint nckpt = load_checkpoint(inr_dir + "/network.nmck");
    PriorNetwork base = prior_from_checkpoint(nckpt);

    uint64_t data_seed = seed;
    SynthSpec synth = synth_from_meta(nckpt.meta, &data_seed);
    Dataset test = make_synth_shapes(data_seed, Split::kTest, synth);

    SamplerSpec spec;
    spec.K = K;
    spec.seed = seed;

    out << "gamma,accuracy,ce_loss,param_count,seed\n";
    for (double g : grid) {
        MorphModel model = sample_model(base, bundle, alphas, g, spec);
        EvalResult r = evaluate(model, test);
        out << std::setprecision(10) << g << "," << r.accuracy << "," << r.ce_loss << ","
            << model.param_count() << "," << seed << "\n";
    }
}

}  // namespace metamorph::pipeline
