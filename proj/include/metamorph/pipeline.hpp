#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "metamorph/config.hpp"
#include "metamorph/sampler.hpp"
#include "metamorph/trainer.hpp"

// Command implementations behind the CLI (and the Python bindings): config
// parsing, run manifests, and the train/smooth/sample/eval/sweep flows.
// Every training or sampling artifact embeds the content hash of the
// manifest that produced it.

namespace metamorph::pipeline {

ArchSpec arch_from_config(const KvConfig& cfg);
SynthSpec synth_from_config(const KvConfig& cfg);
PriorTrainSpec prior_train_from_config(const KvConfig& cfg);
StagePlan stage_plan_from_config(const KvConfig& cfg, uint64_t seed);

// "start:stop:step" (stop inclusive up to rounding) or a single value.
std::vector<double> parse_gammas(const std::string& spec);

KvConfig prior_manifest(const KvConfig& cfg, uint64_t seed, const std::string& out_path);
KvConfig train_inr_manifest(const KvConfig& cfg, const StagePlan& plan,
                            const std::string& prior_path, const std::string& prior_hash,
                            const std::string& out_dir);
KvConfig sample_manifest(const std::string& inr_dir, const std::string& bundle_hash, double gamma,
                         const SamplerSpec& spec, const std::string& out_path);

std::string file_sha1(const std::string& path);

void cmd_train_prior(const std::string& config_path, uint64_t seed, const std::string& out_path,
                     std::ostream& log);
void cmd_smooth(const std::string& in_path, const std::string& out_path, SmoothScope scope,
                std::ostream& log);
void cmd_train_inr(const std::string& prior_path, const std::string& config_path,
                   const AblationFlags& cli_flags, const std::string& out_dir, std::ostream& log);
void cmd_sample(const std::string& inr_dir, double gamma, int K, uint64_t seed,
                const std::string& out_path, std::ostream& log);
void cmd_eval(const std::string& model_path, const std::string& split, const std::string& report,
              uint64_t seed, bool seed_given, std::ostream& out);
void cmd_sweep(const std::string& inr_dir, const std::string& gammas, const std::string& report,
               int K, uint64_t seed, std::ostream& out);

}  // namespace metamorph::pipeline
