#pragma once

#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "phaseflow/core.hpp"
#include "phaseflow/matrix.hpp"
#include "phaseflow/nn.hpp"
#include "phaseflow/ssm.hpp"

namespace phaseflow::model {

/// The temporal model: an LSTM over c_t = [v_t | s_t | a_t], where s_t is the
/// causal statistic of the model's own past outputs and a_t, present only in
/// acausal mode, the statistic of the future frames (reverse-time aggregators).
/// With no SSM features enabled this is the plain LSTM baseline.
class SsmLstm {
 public:
  SsmLstm() = default;

  /// `transition` is required when the hmm feature is on; `reverse_transition`
  /// additionally in acausal mode. Both are rounded to 32-bit rows and kept
  /// (for post-hoc smoothing) even when the feature is off.
  SsmLstm(ExperimentConfig config, PhaseTaxonomy taxonomy, nn::ModelParams<float> params,
          std::shared_ptr<const ssm::TransitionMatrix> transition = nullptr,
          std::shared_ptr<const ssm::TransitionMatrix> reverse_transition = nullptr);

  /// Fresh parameters drawn from the "init" stream of config.seed.
  static SsmLstm initialize(const ExperimentConfig& config, const PhaseTaxonomy& taxonomy,
                            std::shared_ptr<const ssm::TransitionMatrix> transition = nullptr,
                            std::shared_ptr<const ssm::TransitionMatrix> reverse_transition = nullptr);

  const ExperimentConfig& config() const noexcept { return config_; }
  const PhaseTaxonomy& taxonomy() const noexcept { return taxonomy_; }
  const nn::ModelParams<float>& params() const noexcept { return params_; }
  nn::ModelParams<float>& params() noexcept { return params_; }
  const ssm::SsmContext& causal_context() const noexcept { return causal_; }
  const ssm::SsmContext& acausal_context() const noexcept { return acausal_; }
  const std::shared_ptr<const ssm::TransitionMatrix>& transition() const noexcept { return transition_; }
  const std::shared_ptr<const ssm::TransitionMatrix>& reverse_transition() const noexcept {
    return reverse_transition_;
  }

  std::size_t num_phases() const noexcept { return taxonomy_.size(); }
  std::size_t embed_dim() const noexcept { return config_.embed_dim; }
  std::size_t statistic_dim() const noexcept { return causal_.dim(); }
  std::size_t acausal_dim() const noexcept { return config_.acausal ? acausal_.dim() : 0; }
  std::size_t input_dim() const noexcept { return embed_dim() + statistic_dim() + acausal_dim(); }
  bool acausal() const noexcept { return config_.acausal; }

  /// Writes [v | s | a] into `out` (32-bit). An empty `future` means zeros.
  void assemble_input(std::span<const float> v, std::span<const double> statistic,
                      std::span<const double> future, std::span<float> out) const;

 private:
  ExperimentConfig config_;
  PhaseTaxonomy taxonomy_;
  nn::ModelParams<float> params_;
  std::shared_ptr<const ssm::TransitionMatrix> transition_;
  std::shared_ptr<const ssm::TransitionMatrix> reverse_transition_;
  ssm::SsmContext causal_;
  ssm::SsmContext acausal_;
};

/// Streaming state for one video. Single owner; the model must outlive it.
class InferenceSession {
 public:
  explicit InferenceSession(const SsmLstm& model);

  std::size_t frame() const noexcept { return stream_.length(); }
  const ssm::LikelihoodStream& stream() const noexcept { return stream_; }
  const nn::LstmState<float>& lstm_state() const noexcept { return lstm_; }
  const ssm::SsmState& ssm_state() const noexcept { return ssm_; }
  /// The augmented input c_t used by the most recent step.
  std::span<const float> last_input() const noexcept { return input_; }

  /// One step of the recurrence: c = [v | s_t | future], L = lstm(c, L),
  /// m = softmax(head(L)), then the statistic absorbs m. Returns m.
  std::span<const float> step(std::span<const float> v, std::span<const double> future = {});

  /// Marks the emitted stream complete and returns it.
  ssm::LikelihoodStream finish();

 private:
  const SsmLstm* model_;
  nn::LstmState<float> lstm_;
  ssm::SsmState ssm_;
  ssm::LikelihoodStream stream_;
  std::vector<float> input_;
  std::vector<float> probs_;
  std::vector<double> probs_wide_;
};

struct InferenceResult {
  ssm::LikelihoodStream stream;
  std::vector<PhaseId> labels;
};

/// Per-frame argmax, ties to the lowest id.
std::vector<PhaseId> argmax_labels(const Matrix<double>& probs);

/// Causal left-to-right inference. Throws UsageError for an acausal model.
InferenceResult infer_video(const SsmLstm& model, const FeatureSequence& seq);

/// Two passes: a causal pass with the future inputs zeroed produces the full
/// stream; its reverse-time statistics then feed a second pass.
InferenceResult infer_video_acausal(const SsmLstm& model, const FeatureSequence& seq);

/// infer_video or infer_video_acausal depending on the model.
InferenceResult infer(const SsmLstm& model, const FeatureSequence& seq);

/// Forward-filtered posterior argmax of the likelihood stream under A.
std::vector<PhaseId> hmm_smooth_posthoc(const ssm::LikelihoodStream& stream,
                                        const ssm::TransitionMatrix& transition);

/// `frame_idx,predicted_id,prob_0,...,prob_{N-1}`.
void write_predictions(std::ostream& os, const InferenceResult& result);

struct PredictionTable {
  std::vector<PhaseId> labels;
  Matrix<double> probs;
};

/// Throws ValidationError naming the offending row.
PredictionTable read_predictions(std::istream& is);

// ---------------------------------------------------------------------------
// Checkpoints: "PHCK", u32 version, config echo, taxonomy, then named blocks of
// little-endian 32-bit reals.

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(std::ostream& os, const SsmLstm& model);
void save_checkpoint(const std::string& path, const SsmLstm& model);
/// Throws FormatError on a malformed file.
SsmLstm load_checkpoint(std::istream& is);
SsmLstm load_checkpoint(const std::string& path);

}  // namespace phaseflow::model
