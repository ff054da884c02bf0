#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "doctest.h"
#include "metamorph/checkpoint.hpp"
#include "metamorph/errors.hpp"
#include "metamorph/io.hpp"
#include "metamorph/pipeline.hpp"

using namespace metamorph;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    fs::path dir = fs::path("pipeline_scratch") / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream iss(line);
    for (std::string tok; std::getline(iss, tok, ',');) out.push_back(tok);
    return out;
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream iss(text);
    for (std::string l; std::getline(iss, l);)
        if (!l.empty()) out.push_back(l);
    return out;
}

std::string prior_config_text() {
    return "widths = 4,6\n"
           "blocks_per_layer = 2\n"
           "num_classes = 4\n"
           "in_channels = 1\n"
           "train_count = 96\n"
           "test_count = 48\n"
           "epochs = 2\n"
           "batch_size = 32\n"
           "lr = 0.003\n"
           "augment = false\n"
           "data_seed = 9\n";
}

std::string inr_config_text() {
    return "# data_* keys intentionally absent: picked up from the prior checkpoint\n"
           "widths = 4,6\n"
           "blocks_per_layer = 2\n"
           "num_classes = 4\n"
           "in_channels = 1\n"
           "num_blocks = 1\n"
           "epochs_per_stage = 1\n"
           "accum = 2\n"
           "warmup_epochs = 0\n"
           "peak_lr = 0.001\n"
           "batch_size = 32\n"
           "augment = false\n"
           "inr_depth = 3\n"
           "inr_width = 24\n"
           "fourier_frequencies = 4\n"
           "perturb_enabled = false\n"
           "seed = 11\n";
}

}  // namespace

TEST_CASE("config parsing covers the whole plan surface") {
    KvConfig cfg = KvConfig::parse(
        "widths = 3,5,7\n"
        "blocks_per_layer = 2\n"
        "num_classes = 6\n"
        "in_channels = 2\n"
        "num_blocks = 4\n"
        "epochs_per_stage = 9\n"
        "accum = 3\n"
        "warmup_epochs = 5\n"
        "peak_lr = 0.002\n"
        "shared_lr = 0.0005\n"
        "batch_size = 64\n"
        "per_block_gamma = true\n"
        "strict_shared = true\n"
        "include_last_block = true\n"
        "augment = false\n"
        "alpha_scaling = false\n"
        "loss_task = 50\n"
        "loss_reg = 0.01\n"
        "perturb_enabled = true\n"
        "perturb_low = -0.25\n"
        "perturb_high = 0.25\n"
        "perturb_mode = post\n"
        "inr_depth = 4\n"
        "inr_width = 32\n"
        "inr_output = 9\n"
        "fourier_frequencies = 6\n");

    ArchSpec arch = pipeline::arch_from_config(cfg);
    CHECK(arch.widths == std::vector<int>{3, 5, 7});
    CHECK(arch.blocks_per_layer == 2);
    CHECK(arch.num_classes == 6);
    CHECK(arch.in_channels == 2);

    StagePlan plan = pipeline::stage_plan_from_config(cfg, 77);
    CHECK(plan.num_blocks == 4);
    CHECK(plan.epochs_per_stage == 9);
    CHECK(plan.accum == 3);
    CHECK(plan.warmup_epochs == 5);
    CHECK(plan.peak_lr == doctest::Approx(0.002));
    CHECK(plan.shared_lr == doctest::Approx(0.0005));
    CHECK(plan.batch_size == 64);
    CHECK(plan.per_block_gamma);
    CHECK(plan.strict_shared);
    CHECK(plan.include_last_block);
    CHECK_FALSE(plan.augment);
    CHECK_FALSE(plan.ablation.alpha_scaling);
    CHECK(plan.ablation.incremental);  // untouched keys keep their defaults
    CHECK(plan.loss.task == doctest::Approx(50.0));
    CHECK(plan.loss.recon == doctest::Approx(1.0));
    CHECK(plan.loss.reg == doctest::Approx(0.01));
    CHECK(plan.perturbation.enabled);
    CHECK(plan.perturbation.low == doctest::Approx(-0.25f));
    CHECK(plan.perturbation.mode == PerturbMode::kPostNormalization);
    CHECK(plan.kernel_inr.depth == 4);
    CHECK(plan.kernel_inr.width == 32);
    CHECK(plan.kernel_inr.output_dim == 9);
    CHECK(plan.bias_inr.depth == 4);
    CHECK(plan.bias_inr.width == 32);
    CHECK(plan.bias_inr.output_dim == 1);
    CHECK(plan.fourier.num_frequencies == 6);
    CHECK(plan.kernel_inr.input_dim == plan.fourier.embedding_length());
    CHECK(plan.bias_inr.input_dim == plan.fourier.embedding_length());
    CHECK(plan.seed == 77);

    KvConfig bad = KvConfig::parse("perturb_mode = sideways\n");
    CHECK_THROWS_AS(pipeline::stage_plan_from_config(bad, 0), FormatError);
}

TEST_CASE("gamma grids parse inclusively and reject malformed specs") {
    CHECK(pipeline::parse_gammas("0.25") == std::vector<double>{0.25});

    std::vector<double> g = pipeline::parse_gammas("0:0.5:0.25");
    REQUIRE(g.size() == 3);
    CHECK(g[0] == doctest::Approx(0.0));
    CHECK(g[1] == doctest::Approx(0.25));
    CHECK(g[2] == doctest::Approx(0.5));

    std::vector<double> fine = pipeline::parse_gammas("0:0.95:0.05");
    REQUIRE(fine.size() == 20);
    CHECK(fine.back() == doctest::Approx(0.95));

    CHECK_THROWS_AS(pipeline::parse_gammas("abc"), FormatError);
    CHECK_THROWS_AS(pipeline::parse_gammas("0:1"), FormatError);
    CHECK_THROWS_AS(pipeline::parse_gammas("0:0.5:0"), FormatError);
    CHECK_THROWS_AS(pipeline::parse_gammas("0.5:0.2:0.1"), FormatError);
    CHECK_THROWS_AS(pipeline::parse_gammas("0:0.5:0.25:9"), FormatError);
}

TEST_CASE("ablation switches change exactly one manifest key") {
    KvConfig cfg = KvConfig::parse(inr_config_text());
    StagePlan base = pipeline::stage_plan_from_config(cfg, 11);

    auto manifest_for = [&](const AblationFlags& flags) {
        StagePlan plan = base;
        plan.ablation.incremental &= flags.incremental;
        plan.ablation.alpha_scaling &= flags.alpha_scaling;
        plan.ablation.grad_accum &= flags.grad_accum;
        plan.ablation.pre_init &= flags.pre_init;
        plan.ablation.disentangle &= flags.disentangle;
        return pipeline::train_inr_manifest(cfg, plan, "prior.nmck", "deadbeef", "out");
    };

    KvConfig full = manifest_for(AblationFlags{});
    struct Case {
        AblationFlags flags;
        std::string key;
    };
    AblationFlags no_incremental;
    no_incremental.incremental = false;
    AblationFlags no_alpha;
    no_alpha.alpha_scaling = false;
    AblationFlags no_accum;
    no_accum.grad_accum = false;
    AblationFlags no_init;
    no_init.pre_init = false;
    AblationFlags no_disentangle;
    no_disentangle.disentangle = false;
    for (const Case& c : {Case{no_incremental, "incremental"}, Case{no_alpha, "alpha_scaling"},
                          Case{no_accum, "grad_accum"}, Case{no_init, "pre_init"},
                          Case{no_disentangle, "disentangle"}}) {
        KvConfig ablated = manifest_for(c.flags);
        std::vector<std::string> changed;
        for (const auto& [key, value] : full.values())
            if (ablated.values().at(key) != value) changed.push_back(key);
        REQUIRE(changed.size() == 1);
        CHECK(changed[0] == c.key);
        CHECK(ablated.content_hash() != full.content_hash());
    }

    // all five at once: the baseline recipe, every switch recorded
    AblationFlags baseline;
    baseline.incremental = false;
    baseline.alpha_scaling = false;
    baseline.grad_accum = false;
    baseline.pre_init = false;
    baseline.disentangle = false;
    KvConfig all_off = manifest_for(baseline);
    for (const char* key :
         {"incremental", "alpha_scaling", "grad_accum", "pre_init", "disentangle"})
        CHECK(all_off.values().at(key) == "false");
}

TEST_CASE("pipeline end to end: artifacts, propagation, reproducibility") {
    fs::path dir = scratch("e2e");
    fs::path prior_cfg = dir / "prior.cfg";
    fs::path inr_cfg = dir / "inr.cfg";
    write_text(prior_cfg, prior_config_text());
    write_text(inr_cfg, inr_config_text());

    std::ostringstream log;
    fs::path prior_path = dir / "prior.nmck";
    pipeline::cmd_train_prior(prior_cfg.string(), 3, prior_path.string(), log);
    REQUIRE(fs::exists(prior_path));
    REQUIRE(fs::exists(prior_path.string() + ".manifest"));

    Checkpoint praw = load_checkpoint(prior_path.string());
    CHECK(praw.meta.at("data_seed") == "9");
    KvConfig pman = pipeline::prior_manifest(KvConfig::load(prior_cfg.string()), 3,
                                             prior_path.string());
    CHECK(praw.meta.at("manifest_hash") == pman.content_hash());

    SUBCASE("train-inr refuses an unfolded prior") {
        CHECK_THROWS_AS(pipeline::cmd_train_inr(prior_path.string(), inr_cfg.string(),
                                                AblationFlags{}, (dir / "bad").string(), log),
                        ContractError);
    }

    fs::path smooth_path = dir / "smooth.nmck";
    pipeline::cmd_smooth(prior_path.string(), smooth_path.string(), SmoothScope::kIntraBlock, log);
    Checkpoint sraw = load_checkpoint(smooth_path.string());
    CHECK(sraw.meta.at("data_seed") == "9");  // survives the rewrite
    CHECK(sraw.meta.at("smoothed") == "intra-block");
    CHECK(prior_from_checkpoint(sraw).folded);
    CHECK(log.str().find("tv") != std::string::npos);

    fs::path inr_dir = dir / "inr";
    pipeline::cmd_train_inr(smooth_path.string(), inr_cfg.string(), AblationFlags{},
                            inr_dir.string(), log);
    REQUIRE(fs::exists(inr_dir / "bundle.nmck"));
    REQUIRE(fs::exists(inr_dir / "network.nmck"));
    REQUIRE(fs::exists(inr_dir / "manifest.txt"));

    std::ifstream metrics(inr_dir / "metrics.csv");
    std::string header, row, extra;
    REQUIRE(std::getline(metrics, header));
    CHECK(header == "stage,epoch,lr,task,recon,reg,total,train_accuracy");
    REQUIRE(std::getline(metrics, row));        // 1 block x 1 epoch
    CHECK_FALSE(std::getline(metrics, extra));

    KvConfig manifest = KvConfig::load((inr_dir / "manifest.txt").string());
    CHECK(manifest.get_int("data_seed", -1) == 9);  // inherited from the prior
    CHECK(manifest.get_str("command", "") == "train-inr");
    Checkpoint braw = load_checkpoint((inr_dir / "bundle.nmck").string());
    CHECK(braw.meta.at("manifest_hash") == manifest.content_hash());
    CHECK(braw.meta.at("data_seed") == "9");

    fs::path g0 = dir / "g0.nmck";
    pipeline::cmd_sample(inr_dir.string(), 0.0, 1, 5, g0.string(), log);
    std::vector<uint8_t> first = io::read_file(g0.string());
    pipeline::cmd_sample(inr_dir.string(), 0.0, 1, 5, g0.string(), log);
    CHECK(io::read_file(g0.string()) == first);  // same seed, same bytes

    Checkpoint graw = load_checkpoint(g0.string());
    SamplerSpec gspec;
    gspec.K = 1;
    gspec.seed = 5;
    KvConfig gman = pipeline::sample_manifest(
        inr_dir.string(), pipeline::file_sha1((inr_dir / "bundle.nmck").string()), 0.0, gspec,
        g0.string());
    CHECK(graw.meta.at("manifest_hash") == gman.content_hash());

    std::ostringstream warn;
    pipeline::cmd_sample(inr_dir.string(), 0.75, 1, 5, (dir / "g75.nmck").string(), warn);
    CHECK(warn.str().find("outside the training pool") != std::string::npos);

    std::ostringstream csv;
    pipeline::cmd_eval(g0.string(), "test", "csv", 0, false, csv);
    auto rows = lines_of(csv.str());
    REQUIRE(rows.size() == 2);
    CHECK(rows[0] == "gamma,accuracy,ce_loss,param_count,seed");
    auto fields = split_csv(rows[1]);
    REQUIRE(fields.size() == 5);
    CHECK(std::stod(fields[0]) == doctest::Approx(0.0));
    CHECK(fields[4] == "9");  // embedded dataset seed wins when --seed absent

    MorphModel model = morph_from_checkpoint(graw);
    SynthSpec synth;
    synth.train_count = 96;
    synth.test_count = 48;
    Dataset test = make_synth_shapes(9, Split::kTest, synth);
    EvalResult expected = evaluate(model, test);
    CHECK(std::stod(fields[1]) == doctest::Approx(expected.accuracy).epsilon(1e-9));
    CHECK(std::stod(fields[2]) == doctest::Approx(expected.ce_loss).epsilon(1e-6));
    CHECK(std::stoll(fields[3]) == model.param_count());

    std::ostringstream jreport;
    pipeline::cmd_eval(g0.string(), "test", "json", 0, false, jreport);
    nlohmann::json j = nlohmann::json::parse(jreport.str());
    CHECK(j.at("accuracy").get<double>() == doctest::Approx(expected.accuracy).epsilon(1e-9));
    CHECK(j.at("param_count").get<int64_t>() == model.param_count());
    CHECK(j.at("seed").get<uint64_t>() == 9);

    std::ostringstream seeded;
    pipeline::cmd_eval(g0.string(), "test", "csv", 123, true, seeded);
    CHECK(split_csv(lines_of(seeded.str())[1])[4] == "123");

    std::ostringstream sweep;
    pipeline::cmd_sweep(inr_dir.string(), "0:0.5:0.25", "csv", 1, 5, sweep);
    auto srows = lines_of(sweep.str());
    REQUIRE(srows.size() == 4);
    CHECK(srows[0] == "gamma,accuracy,ce_loss,param_count,seed");
    int64_t prev = std::numeric_limits<int64_t>::max();
    std::vector<double> gs;
    for (size_t i = 1; i < srows.size(); ++i) {
        auto f = split_csv(srows[i]);
        REQUIRE(f.size() == 5);
        gs.push_back(std::stod(f[0]));
        int64_t params = std::stoll(f[3]);
        CHECK(params <= prev);  // compression never adds parameters
        prev = params;
        CHECK(f[4] == "5");
    }
    CHECK(gs == std::vector<double>{0.0, 0.25, 0.5});

    CHECK_THROWS_AS(pipeline::cmd_sweep(inr_dir.string(), "0", "json", 1, 5, sweep),
                    ContractError);
    CHECK_THROWS_AS(pipeline::cmd_eval(g0.string(), "validation", "csv", 0, false, csv),
                    ContractError);
}
