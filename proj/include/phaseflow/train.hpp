#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "phaseflow/core.hpp"
#include "phaseflow/model.hpp"
#include "phaseflow/nn.hpp"

namespace phaseflow::train {

/// Frames [start, start + length) of video `video`.
struct WindowRef {
  std::size_t video = 0;
  std::size_t start = 0;
  std::size_t length = 0;
};

/// One optimizer step: aligned windows from distinct videos of one group.
/// `group_start` marks the first step of a group, where per-video state is
/// reset.
struct WindowBatch {
  std::size_t group = 0;
  bool group_start = false;
  std::vector<WindowRef> windows;
};

/// Shuffles the videos, chunks them into groups of `batch_size` and walks
/// each group in lockstep windows of `seq_len` frames. A video's windows stay
/// in temporal order. Warns when fewer videos than the batch size exist.
std::vector<WindowBatch> batch_scheduler(const std::vector<std::size_t>& lengths, std::size_t batch_size,
                                         std::size_t seq_len, std::mt19937_64& rng);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0;  // mean per frame
  std::optional<double> validation_accuracy;
  double wall_seconds = 0;
  std::uint64_t steps = 0;
};

/// One JSON object on a single line.
std::string epoch_log_json(const EpochLog& log);

struct TrainRun {
  ExperimentConfig config;
  model::SsmLstm model;
  nn::Adam<float> optimizer;
  std::size_t epoch = 0;
  /// Previous-epoch probabilities per training video; empty before the first refresh.
  std::vector<Matrix<float>> previous;
  std::mt19937_64 batching_rng;
  std::vector<EpochLog> log;

  TrainRun(model::SsmLstm initial);
};

/// Fresh run for the training videos: transition matrices estimated from
/// their labels, parameters from the "init" stream.
TrainRun make_run(const ExperimentConfig& config, const PhaseTaxonomy& taxonomy,
                  const std::vector<FeatureSequence>& train_videos);

/// One pass over the training videos (one Adam step per window batch), then
/// the previous-epoch cache refresh. Returns the mean per-frame loss.
/// Throws NumericError naming the video and window on a non-finite loss.
double train_epoch(TrainRun& run, const std::vector<FeatureSequence>& videos);

/// Probabilities for each video from a full no-gradient pass.
std::vector<Matrix<float>> predict_all(const model::SsmLstm& model, const std::vector<FeatureSequence>& videos);

/// Pooled frame accuracy; nullopt for an empty set.
std::optional<double> frame_accuracy(const model::SsmLstm& model, const std::vector<FeatureSequence>& videos);

/// Training-mode forward over consecutive windows without parameter updates.
Matrix<float> forward_windows(const model::SsmLstm& model, const FeatureSequence& video);

struct FitHooks {
  /// Called after every epoch with the current model and whether it is the best so far.
  std::function<void(const EpochLog&, const model::SsmLstm&, bool best)> on_epoch;
};

struct FitResult {
  model::SsmLstm best;
  std::size_t best_epoch = 0;  // 0: the initialization
  std::vector<EpochLog> curve;
};

/// Runs config.epochs epochs and keeps the parameters of the epoch with the
/// highest validation accuracy (the last epoch when there is no validation set).
FitResult fit(const ExperimentConfig& config, const PhaseTaxonomy& taxonomy,
              const std::vector<FeatureSequence>& train_videos,
              const std::vector<FeatureSequence>& validation_videos, const FitHooks& hooks = {});

}  // namespace phaseflow::train
