#include <cstdint>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "metamorph/pipeline.hpp"

using namespace metamorph;

int main(int argc, char** argv) {
    CLI::App app{"metamorph: continuous weight manifolds for residual networks"};
    app.require_subcommand(1);

    std::string config, out, prior, in, inr, model;
    std::string scope = "intra-block";
    std::string split = "test";
    std::string report = "csv";
    std::string gammas;
    double gamma = 0.0;
    int K = 16;
    uint64_t seed = 0;

    auto* train_prior_cmd = app.add_subcommand("train-prior", "train the high-accuracy prior");
    train_prior_cmd->add_option("--config", config, "flat key = value config file")->required();
    train_prior_cmd->add_option("--seed", seed, "root seed");
    train_prior_cmd->add_option("--out", out, "output checkpoint path")->required();

    auto* smooth_cmd = app.add_subcommand("smooth", "fold normalization and align permutations");
    smooth_cmd->add_option("--in", in, "input prior checkpoint")->required();
    smooth_cmd->add_option("--out", out, "output checkpoint path")->required();
    smooth_cmd->add_option("--scope", scope, "intra-block or stage-wide")
        ->check(CLI::IsMember({"intra-block", "stage-wide"}));

    auto* train_inr_cmd = app.add_subcommand("train-inr", "fit the weight-manifold hypernetworks");
    train_inr_cmd->add_option("--prior", prior, "smoothed prior checkpoint")->required();
    train_inr_cmd->add_option("--config", config, "flat key = value config file")->required();
    train_inr_cmd->add_option("--out", out, "output directory")->required();
    bool no_incremental = false, no_alpha = false, no_accum = false;
    bool no_init = false, no_disentangle = false;
    train_inr_cmd->add_flag("--no-incremental", no_incremental,
                            "train all blocks in a single stage");
    train_inr_cmd->add_flag("--no-alpha", no_alpha, "freeze residual scales at 1");
    train_inr_cmd->add_flag("--no-accum", no_accum, "one sampled width per optimizer step");
    train_inr_cmd->add_flag("--no-init", no_init, "skip predecessor pre-initialization");
    train_inr_cmd->add_flag("--no-disentangle", no_disentangle,
                            "single head for kernels and biases");

    auto* sample_cmd = app.add_subcommand("sample", "materialize weights at a compression ratio");
    sample_cmd->add_option("--inr", inr, "train-inr output directory")->required();
    sample_cmd->add_option("--gamma", gamma, "compression ratio in [0,1)")->required();
    sample_cmd->add_option("--K", K, "ensemble size for weight averaging");
    sample_cmd->add_option("--seed", seed, "sampling seed");
    sample_cmd->add_option("--out", out, "output checkpoint path")->required();

    auto* eval_cmd = app.add_subcommand("eval", "measure accuracy of a saved model");
    eval_cmd->add_option("--model", model, "checkpoint to evaluate")->required();
    eval_cmd->add_option("--split", split, "test or train")
        ->check(CLI::IsMember({"test", "train"}));
    eval_cmd->add_option("--report", report, "csv or json")
        ->check(CLI::IsMember({"csv", "json"}));
    auto* eval_seed = eval_cmd->add_option("--seed", seed, "dataset seed override");

    auto* sweep_cmd = app.add_subcommand("sweep", "sample and evaluate a gamma grid");
    sweep_cmd->add_option("--inr", inr, "train-inr output directory")->required();
    sweep_cmd->add_option("--gammas", gammas, "value or start:stop:step")->required();
    sweep_cmd->add_option("--report", report, "csv");
    sweep_cmd->add_option("--K", K, "ensemble size for weight averaging");
    sweep_cmd->add_option("--seed", seed, "sampling seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_prior_cmd->parsed()) {
            pipeline::cmd_train_prior(config, seed, out, std::cerr);
        } else if (smooth_cmd->parsed()) {
            SmoothScope s = scope == "stage-wide" ? SmoothScope::kStageWide
                                                  : SmoothScope::kIntraBlock;
            pipeline::cmd_smooth(in, out, s, std::cerr);
        } else if (train_inr_cmd->parsed()) {
            AblationFlags flags;
            flags.incremental = !no_incremental;
            flags.alpha_scaling = !no_alpha;
            flags.grad_accum = !no_accum;
            flags.pre_init = !no_init;
            flags.disentangle = !no_disentangle;
            pipeline::cmd_train_inr(prior, config, flags, out, std::cerr);
        } else if (sample_cmd->parsed()) {
            pipeline::cmd_sample(inr, gamma, K, seed, out, std::cerr);
        } else if (eval_cmd->parsed()) {
            pipeline::cmd_eval(model, split, report, seed, eval_seed->count() > 0, std::cout);
        } else if (sweep_cmd->parsed()) {
            pipeline::cmd_sweep(inr, gammas, report, K, seed, std::cout);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
