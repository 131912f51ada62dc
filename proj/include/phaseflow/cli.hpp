#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "phaseflow/core.hpp"
#include "phaseflow/data.hpp"
#include "phaseflow/eval.hpp"

namespace phaseflow::cli {

enum ExitCode : int { kSuccess = 0, kUsage = 2, kData = 3, kNumeric = 4 };

/// Entry point of the `phaseflow` tool: synth, train, infer, eval, ablate.
int run_cli(int argc, const char* const* argv);

/// Holds <dir>/.phaseflow.lock for its lifetime. Throws UsageError when
/// another invocation holds it.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path path_;
};

// ---------------------------------------------------------------------------
// Ablation

/// lstm (no statistics), gabor, csl, hmm, ssm (all three), acausal-ssm.
const std::vector<std::string>& default_arms();
ExperimentConfig arm_config(const ExperimentConfig& base, const std::string& arm, std::uint64_t seed);

struct ArmRun {
  std::string arm;
  std::uint64_t seed = 0;
  std::size_t best_epoch = 0;
  std::optional<double> validation_accuracy;
  eval::DatasetReport test;
  std::optional<double> ambiguity_accuracy;  // frames of ambiguity-group phases
};

struct AblationResult {
  std::vector<std::string> arms;
  std::vector<std::uint64_t> seeds;
  std::vector<PhaseId> ambiguity_phases;
  std::vector<ArmRun> runs;  // arm-major, seeds in the given order

  const ArmRun& run(const std::string& arm, std::uint64_t seed) const;
};

/// Trains every arm for every seed on the train split (model selection on the
/// validation split) and scores the test split. Per-run training logs go to
/// `log_dir` when given.
AblationResult run_ablation(const data::Dataset& dataset, const data::Splits& splits, const ExperimentConfig& base,
                            const std::vector<std::uint64_t>& seeds, const std::vector<std::string>& arms,
                            const std::vector<PhaseId>& ambiguity_phases,
                            const std::optional<std::filesystem::path>& log_dir = {});

/// One row per (arm, seed) plus one "mean" row per arm.
std::string ablation_csv(const AblationResult& result);
std::string ablation_json(const AblationResult& result);

std::vector<std::uint64_t> parse_seeds(const std::string& text);

}  // namespace phaseflow::cli
