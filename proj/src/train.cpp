#include "phaseflow/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "phaseflow/error.hpp"
#include "phaseflow/parallel.hpp"

namespace phaseflow::train {

std::vector<WindowBatch> batch_scheduler(const std::vector<std::size_t>& lengths, std::size_t batch_size,
                                         std::size_t seq_len, std::mt19937_64& rng) {
  if (batch_size == 0 || seq_len == 0) throw UsageError("batch_scheduler: batch size and window must be >= 1");
  if (!lengths.empty() && lengths.size() < batch_size)
    spdlog::warn("only {} training video(s) for batch size {}; effective batch size is {}", lengths.size(),
                 batch_size, lengths.size());
  std::vector<std::size_t> order(lengths.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<WindowBatch> out;
  for (std::size_t g = 0; g * batch_size < order.size(); ++g) {
    const std::size_t begin = g * batch_size;
    const std::size_t end = std::min(order.size(), begin + batch_size);
    std::size_t longest = 0;
    for (std::size_t i = begin; i < end; ++i) longest = std::max(longest, lengths[order[i]]);
    for (std::size_t start = 0; start < longest; start += seq_len) {
      WindowBatch batch;
      batch.group = g;
      batch.group_start = start == 0;
      for (std::size_t i = begin; i < end; ++i) {
        const std::size_t len = lengths[order[i]];
        if (start < len) batch.windows.push_back({order[i], start, std::min(seq_len, len - start)});
      }
      out.push_back(std::move(batch));
    }
  }
  return out;
}

std::string epoch_log_json(const EpochLog& log) {
  nlohmann::ordered_json j;
  j["epoch"] = log.epoch;
  j["train_loss"] = log.train_loss;
  j["validation_accuracy"] = log.validation_accuracy ? nlohmann::ordered_json(*log.validation_accuracy)
                                                     : nlohmann::ordered_json(nullptr);
  j["steps"] = log.steps;
  j["wall_seconds"] = log.wall_seconds;
  return j.dump();
}

TrainRun::TrainRun(model::SsmLstm initial)
    : config(initial.config()),
      model(std::move(initial)),
      optimizer(model.params()),
      batching_rng(make_rng(config.seed, "batching")) {}

TrainRun make_run(const ExperimentConfig& config, const PhaseTaxonomy& taxonomy,
                  const std::vector<FeatureSequence>& train_videos) {
  config.validate();
  if (train_videos.empty()) throw ValidationError("no training videos");
  std::vector<std::vector<PhaseId>> labels;
  for (const auto& v : train_videos) {
    validate_sequence(v, taxonomy);
    if (!v.has_labels()) throw ValidationError("training video '" + v.video_id + "' has no labels");
    if (v.dim() != config.embed_dim)
      throw ValidationError("training video '" + v.video_id + "' has embedding dimension " +
                            std::to_string(v.dim()) + ", config expects " + std::to_string(config.embed_dim));
    labels.push_back(v.labels);
  }
  auto transition = std::make_shared<const ssm::TransitionMatrix>(
      ssm::TransitionMatrix::estimate(labels, taxonomy.size(), config.transition_smoothing));
  std::shared_ptr<const ssm::TransitionMatrix> reverse;
  if (config.acausal)
    reverse = std::make_shared<const ssm::TransitionMatrix>(
        ssm::TransitionMatrix::estimate_reversed(labels, taxonomy.size(), config.transition_smoothing));
  return TrainRun(model::SsmLstm::initialize(config, taxonomy, transition, reverse));
}

namespace {

/// Reverse-time statistics from a causal pass with the future inputs zeroed.
Matrix<double> acausal_inputs(const model::SsmLstm& model, const FeatureSequence& video) {
  model::InferenceSession first(model);
  for (std::size_t t = 0; t < video.length(); ++t) first.step(video.features.row(t));
  return ssm::acausal_feature_stream(first.finish(), model.acausal_context());
}

struct VideoState {
  nn::LstmState<float> lstm;
  std::optional<ssm::SsmState> ssm;
  Matrix<double> future;
};

/// Forward over one window batch, recording the tape. Advances each video's
/// SSM state; the LSTM state is advanced by the caller. Optionally collects
/// the first column's probabilities.
void forward_batch(const model::SsmLstm& model, const std::vector<const FeatureSequence*>& videos,
                   const std::vector<WindowRef>& windows, std::vector<VideoState*>& states,
                   nn::WindowTape<float>& tape, Matrix<float>* first_column = nullptr) {
  const std::size_t B = windows.size();
  std::size_t longest = 0;
  for (const auto& w : windows) longest = std::max(longest, w.length);
  std::vector<std::vector<float>> buffers(B, std::vector<float>(model.input_dim()));
  std::vector<std::span<const float>> inputs(B);
  std::vector<double> wide(model.num_phases());
  for (std::size_t k = 0; k < longest; ++k) {
    for (std::size_t b = 0; b < B; ++b) {
      if (k >= windows[b].length) {
        inputs[b] = {};
        continue;
      }
      const std::size_t t = windows[b].start + k;
      std::span<const double> future;
      if (model.acausal()) future = states[b]->future.row(t);
      model.assemble_input(videos[b]->features.row(t), states[b]->ssm->statistic(), future, buffers[b]);
      inputs[b] = buffers[b];
    }
    const Matrix<float>& probs = tape.step(inputs);
    if (first_column) first_column->append_row(probs.row(0));
    for (std::size_t b = 0; b < B; ++b) {
      if (k >= windows[b].length) continue;
      std::copy(probs.row(b).begin(), probs.row(b).end(), wide.begin());
      states[b]->ssm->update(wide);
    }
  }
}

}  // namespace

double train_epoch(TrainRun& run, const std::vector<FeatureSequence>& videos) {
  if (videos.empty()) throw ValidationError("train_epoch: empty dataset");
  if (!run.previous.empty() && run.previous.size() != videos.size())
    throw ValidationError("train_epoch: previous-epoch cache does not match the dataset");
  const ExperimentConfig& cfg = run.config;
  model::SsmLstm& model = run.model;

  std::vector<std::size_t> lengths;
  for (const auto& v : videos) lengths.push_back(v.length());
  const auto schedule = batch_scheduler(lengths, cfg.batch_size, cfg.seq_len_bptt, run.batching_rng);

  std::vector<VideoState> state(videos.size());
  auto grads = nn::ModelParams<float>::zeros(model.params().input_dim, model.params().hidden_dim,
                                             model.params().num_phases);
  double total_loss = 0;
  std::size_t total_frames = 0;

  for (const auto& batch : schedule) {
    if (batch.group_start) {
      for (const auto& w : batch.windows) {
        VideoState& s = state[w.video];
        s.lstm = nn::LstmState<float>::zeros(cfg.hidden_dim);
        s.ssm.emplace(model.causal_context());
      }
      if (model.acausal())
        parallel_for(batch.windows.size(), [&](std::size_t b) {
          const std::size_t v = batch.windows[b].video;
          state[v].future = acausal_inputs(model, videos[v]);
        });
    }
    std::vector<const FeatureSequence*> vids;
    std::vector<VideoState*> states;
    std::vector<nn::LstmState<float>> initial;
    std::vector<std::vector<nn::FrameTarget>> targets;
    std::size_t frames = 0;
    for (const auto& w : batch.windows) {
      vids.push_back(&videos[w.video]);
      states.push_back(&state[w.video]);
      initial.push_back(state[w.video].lstm);
      std::vector<nn::FrameTarget> tgt;
      for (std::size_t t = w.start; t < w.start + w.length; ++t) {
        nn::FrameTarget ft;
        ft.label = videos[w.video].labels[t];
        if (!run.previous.empty()) ft.previous = run.previous[w.video].row(t);
        tgt.push_back(ft);
      }
      targets.push_back(std::move(tgt));
      frames += w.length;
    }

    nn::WindowTape<float> tape(model.params(), std::move(initial));
    forward_batch(model, vids, batch.windows, states, tape);

    grads.set_zero();
    const double loss = tape.backward(targets, static_cast<float>(cfg.proximal_weight),
                                      1.0f / static_cast<float>(frames), grads);
    if (!std::isfinite(loss)) {
      const auto& w = batch.windows.front();
      throw NumericError("non-finite training loss in the window batch starting at frame " +
                         std::to_string(w.start) + " of video '" + videos[w.video].video_id + "'");
    }
    nn::clip_global_norm(grads, cfg.grad_clip_norm);
    run.optimizer.update(model.params(), grads, cfg.learning_rate);
    for (std::size_t b = 0; b < batch.windows.size(); ++b) states[b]->lstm = tape.final_state(b);
    total_loss += loss;
    total_frames += frames;
  }

  run.previous = predict_all(model, videos);
  ++run.epoch;
  return total_loss / static_cast<double>(total_frames);
}

std::vector<Matrix<float>> predict_all(const model::SsmLstm& model, const std::vector<FeatureSequence>& videos) {
  std::vector<Matrix<float>> out(videos.size());
  parallel_for(videos.size(), [&](std::size_t i) { out[i] = model::infer(model, videos[i]).stream.probs.cast<float>(); });
  return out;
}

std::optional<double> frame_accuracy(const model::SsmLstm& model, const std::vector<FeatureSequence>& videos) {
  if (videos.empty()) return std::nullopt;
  std::vector<std::size_t> correct(videos.size(), 0);
  parallel_for(videos.size(), [&](std::size_t i) {
    const auto r = model::infer(model, videos[i]);
    for (std::size_t t = 0; t < r.labels.size(); ++t) correct[i] += r.labels[t] == videos[i].labels.at(t);
  });
  std::size_t c = 0, n = 0;
  for (std::size_t i = 0; i < videos.size(); ++i) {
    c += correct[i];
    n += videos[i].length();
  }
  return static_cast<double>(c) / static_cast<double>(n);
}

Matrix<float> forward_windows(const model::SsmLstm& model, const FeatureSequence& video) {
  validate_sequence(video, model.taxonomy());
  VideoState s;
  s.lstm = nn::LstmState<float>::zeros(model.config().hidden_dim);
  s.ssm.emplace(model.causal_context());
  if (model.acausal()) s.future = acausal_inputs(model, video);
  Matrix<float> out(0, model.num_phases());
  const std::size_t L = model.config().seq_len_bptt;
  std::vector<const FeatureSequence*> vids{&video};
  std::vector<VideoState*> states{&s};
  for (std::size_t start = 0; start < video.length(); start += L) {
    std::vector<WindowRef> windows{{0, start, std::min(L, video.length() - start)}};
    nn::WindowTape<float> tape(model.params(), {s.lstm});
    forward_batch(model, vids, windows, states, tape, &out);
    s.lstm = tape.final_state(0);
  }
  return out;
}

FitResult fit(const ExperimentConfig& config, const PhaseTaxonomy& taxonomy,
              const std::vector<FeatureSequence>& train_videos,
              const std::vector<FeatureSequence>& validation_videos, const FitHooks& hooks) {
  for (const auto& v : train_videos)
    for (const auto& w : validation_videos)
      if (v.video_id == w.video_id)
        throw ValidationError("video '" + v.video_id + "' is in both the training and validation sets");
  for (const auto& v : validation_videos) validate_sequence(v, taxonomy);

  TrainRun run = make_run(config, taxonomy, train_videos);
  FitResult result{run.model, 0, {}};
  std::optional<double> best_accuracy;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochLog log;
    log.train_loss = train_epoch(run, train_videos);
    log.epoch = run.epoch;
    log.steps = run.optimizer.steps();
    log.validation_accuracy = frame_accuracy(run.model, validation_videos);
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool best = !log.validation_accuracy || !best_accuracy || *log.validation_accuracy > *best_accuracy;
    if (best) {
      best_accuracy = log.validation_accuracy;
      result.best = run.model;
      result.best_epoch = run.epoch;
    }
    spdlog::info("epoch {}: loss {:.4f}, validation accuracy {}", log.epoch, log.train_loss,
                 log.validation_accuracy ? std::to_string(*log.validation_accuracy) : std::string("n/a"));
    run.log.push_back(log);
    result.curve.push_back(log);
    if (hooks.on_epoch) hooks.on_epoch(log, run.model, best);
  }
  return result;
}

}  // namespace phaseflow::train
