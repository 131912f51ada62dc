#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "phaseflow/core.hpp"
#include "phaseflow/matrix.hpp"

namespace phaseflow::nn {

/// Recurrent state L_t: hidden and cell vectors.
template <typename T>
struct LstmState {
  std::vector<T> h;
  std::vector<T> c;

  static LstmState zeros(std::size_t hidden_dim) {
    return {std::vector<T>(hidden_dim, T{0}), std::vector<T>(hidden_dim, T{0})};
  }
  bool operator==(const LstmState&) const = default;
};

template <typename T>
struct ParamBlock {
  std::string_view name;
  std::span<T> values;
};

/// LSTM (input -> hidden) followed by an affine phase head (hidden -> logits).
///
/// The LSTM weight is stored input-major: row k holds the fan-out of input unit
/// k (first the `input_dim` feature inputs, then the `hidden_dim` recurrent
/// inputs) into the 4H gate pre-activations, laid out i | f | g | o.
template <typename T>
struct ModelParams {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t num_phases = 0;
  Matrix<T> lstm_weight;      // (input_dim + hidden_dim) x 4H
  std::vector<T> lstm_bias;   // 4H
  Matrix<T> head_weight;      // H x N
  std::vector<T> head_bias;   // N

  static ModelParams zeros(std::size_t input_dim, std::size_t hidden_dim, std::size_t num_phases);

  /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases except the
  /// forget gate, which starts at 1.
  static ModelParams initialize(std::size_t input_dim, std::size_t hidden_dim,
                                std::size_t num_phases, std::mt19937_64& rng);

  std::vector<ParamBlock<T>> blocks();
  std::vector<ParamBlock<const T>> blocks() const;

  void set_zero();
  bool all_finite() const;

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.input_dim = input_dim;
    out.hidden_dim = hidden_dim;
    out.num_phases = num_phases;
    out.lstm_weight = lstm_weight.template cast<U>();
    out.lstm_bias.assign(lstm_bias.begin(), lstm_bias.end());
    out.head_weight = head_weight.template cast<U>();
    out.head_bias.assign(head_bias.begin(), head_bias.end());
    return out;
  }

  bool operator==(const ModelParams&) const = default;
};

/// One LSTM update with sigmoid input/forget/output gates and tanh candidate.
/// Throws ValidationError when x has the wrong dimension.
template <typename T>
LstmState<T> lstm_step(const ModelParams<T>& params, const LstmState<T>& state,
                       std::span<const T> x);

/// Phase logits from a hidden vector.
template <typename T>
std::vector<T> head_forward(const ModelParams<T>& params, std::span<const T> h);

/// -log m[y], with m[y] floored at 1e-12.
double cross_entropy_loss(const ProbVector& m, PhaseId y);

inline constexpr double kProbabilityFloor = 1e-12;

/// Supervision for one frame of a training window.
struct FrameTarget {
  PhaseId label = 0;
  /// Previous-epoch probabilities for the proximal term; empty means no term.
  std::span<const float> previous;
};

/// Forward tape over one truncated-BPTT window for a batch of independent
/// sequences ("columns"). Each column starts from its own carried state; the
/// recorded inputs are constants, so no gradient reaches them.
template <typename T>
class WindowTape {
 public:
  WindowTape(const ModelParams<T>& params, std::vector<LstmState<T>> initial);

  std::size_t columns() const noexcept { return initial_.size(); }
  std::size_t steps() const noexcept { return steps_.size(); }
  /// Number of steps column `col` took part in.
  std::size_t length(std::size_t col) const noexcept { return lengths_[col]; }

  /// Advances every column by one frame. An empty input span marks the column
  /// finished; it must stay finished for the rest of the window. Returns the
  /// softmax probabilities, one row per column (rows of finished columns are
  /// left zero).
  const Matrix<T>& step(std::span<const std::span<const T>> inputs);

  /// State after the column's last active step.
  LstmState<T> final_state(std::size_t col) const;

  /// Sum over active frames of cross-entropy + weight * ||m - m_prev||^2.
  /// `targets[col]` must hold length(col) entries.
  double loss(std::span<const std::vector<FrameTarget>> targets, T proximal_weight) const;

  /// Accumulates scale * d(loss)/d(params) into `grads`; returns the loss.
  double backward(std::span<const std::vector<FrameTarget>> targets, T proximal_weight, T scale,
                  ModelParams<T>& grads) const;

 private:
  struct Step {
    Matrix<T> x;       // columns x input_dim
    Matrix<T> gates;   // columns x 4H, activated
    Matrix<T> c;       // columns x H
    Matrix<T> tanh_c;  // columns x H
    Matrix<T> h;       // columns x H
    Matrix<T> probs;   // columns x N
    std::vector<std::uint8_t> active;
  };

  const ModelParams<T>& params_;
  std::vector<LstmState<T>> initial_;
  std::vector<Step> steps_;
  std::vector<std::size_t> lengths_;
};

/// Rescales `grads` in place so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_global_norm(ModelParams<T>& grads, double max_norm);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First and second moment buffers, shaped like the parameters.
template <typename T>
struct AdamMoments {
  ModelParams<T> first;
  ModelParams<T> second;

  static AdamMoments like(const ModelParams<T>& params);
};

/// One bias-corrected Adam step; `step` counts from 1. Throws NumericError
/// naming the block if any gradient is non-finite (parameters untouched).
template <typename T>
void adam_update(ModelParams<T>& params, const ModelParams<T>& grads, AdamMoments<T>& moments,
                 double lr, std::uint64_t step, const AdamOptions& options = {});

/// Stateful wrapper tracking the step counter.
template <typename T>
class Adam {
 public:
  explicit Adam(const ModelParams<T>& like, AdamOptions options = {})
      : moments_(AdamMoments<T>::like(like)), options_(options) {}

  void update(ModelParams<T>& params, const ModelParams<T>& grads, double lr) {
    adam_update(params, grads, moments_, lr, step_ + 1, options_);
    ++step_;
  }
  std::uint64_t steps() const noexcept { return step_; }

 private:
  AdamMoments<T> moments_;
  AdamOptions options_;
  std::uint64_t step_ = 0;
};

struct BlockCheck {
  std::string name;
  double relative_error = 0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double analytic_norm = 0;
};

/// Compares WindowTape::backward against central finite differences of
/// WindowTape::loss, perturbing every parameter. Inputs are held fixed.
std::vector<BlockCheck> gradient_check(const ModelParams<double>& params,
                                       const std::vector<LstmState<double>>& initial,
                                       const std::vector<Matrix<double>>& inputs,
                                       const std::vector<std::vector<FrameTarget>>& targets,
                                       double proximal_weight, double step = 1e-5);

}  // namespace phaseflow::nn
