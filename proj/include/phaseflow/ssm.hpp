#pragma once

#include <cstdint>
#include <algorithm>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "phaseflow/core.hpp"
#include "phaseflow/matrix.hpp"

// Sufficient-statistic aggregators. Each consumes the per-frame likelihood
// stream m_0, m_1, ... and maintains a fixed-size summary of everything seen.
namespace phaseflow::ssm {

/// Per-frame phase probabilities emitted by the model head, one row per frame.
/// `complete` is set only once the whole video has been processed.
struct LikelihoodStream {
  Matrix<double> probs;
  bool complete = false;

  std::size_t length() const noexcept { return probs.rows(); }
};

// ---------------------------------------------------------------------------
// Cumulative sum likelihood

/// Counts, per phase, how many frames crossed each threshold level, plus how
/// many frames had that phase as the argmax (ties to the lowest id). The
/// feature is log(count + 1), phase-major: [n * (L + 1) + l], argmax last.
class CslAccumulator {
 public:
  CslAccumulator(std::size_t num_phases, std::vector<double> levels);

  std::size_t dim() const noexcept { return counts_.size(); }
  std::size_t frames() const noexcept { return frames_; }
  const std::vector<double>& levels() const noexcept { return levels_; }
  std::span<const std::uint64_t> counts() const noexcept { return counts_; }

  void update(std::span<const double> m);
  void feature(std::span<double> out) const;

 private:
  std::size_t num_phases_;
  std::vector<double> levels_;
  std::vector<std::uint64_t> counts_;
  std::size_t frames_ = 0;
};

// ---------------------------------------------------------------------------
// Gabor filter bank

struct GaborOptions {
  std::size_t num_scales = 10;
  double sigma_min = 10.0;
  double sigma_max = 30.0;
  double wavelength_factor = 4.0;  // omega = 2 pi / (factor * sigma)
  double support_sigmas = 3.0;     // taps span floor(support_sigmas * sigma) frames

  bool operator==(const GaborOptions&) const = default;
};

enum class KernelSupport { kCausal, kSymmetric };

/// Complex Gabor kernel k(u) = g(u) (cos(omega u) + i sin(omega u)) sampled at
/// integer offsets u in [u_min, u_max], with sum |k(u)| = 1.
struct GaborKernel {
  double sigma = 0;
  double omega = 0;
  int u_min = 0;
  int u_max = 0;
  std::vector<double> re;  // re[i] is k(u_min + i)
  std::vector<double> im;

  std::size_t taps() const noexcept { return re.size(); }
};

class GaborBank {
 public:
  explicit GaborBank(GaborOptions options = {}, KernelSupport support = KernelSupport::kCausal);

  const GaborOptions& options() const noexcept { return options_; }
  KernelSupport support() const noexcept { return support_; }
  std::size_t num_scales() const noexcept { return kernels_.size(); }
  const GaborKernel& kernel(std::size_t scale) const { return kernels_.at(scale); }
  /// Longest past reach of any kernel, in frames (current frame included).
  std::size_t history() const noexcept { return history_; }

 private:
  GaborOptions options_;
  KernelSupport support_;
  std::vector<GaborKernel> kernels_;
  std::size_t history_ = 0;
};

/// Streaming causal filtering of every likelihood channel with every scale.
/// Keeps only the last `bank.history()` frames in a ring buffer. The feature
/// is the response magnitude, channel-major: [n * scales + s].
class GaborFilter {
 public:
  GaborFilter(std::shared_ptr<const GaborBank> bank, std::size_t channels);

  std::size_t dim() const noexcept { return channels_ * bank_->num_scales(); }
  void update(std::span<const double> m);
  void feature(std::span<double> out) const { std::copy(feature_.begin(), feature_.end(), out.begin()); }

 private:
  std::shared_ptr<const GaborBank> bank_;
  std::size_t channels_;
  std::vector<double> ring_;  // capacity x channels
  std::size_t capacity_;
  std::size_t head_ = 0;      // slot of the newest frame
  std::size_t filled_ = 0;
  std::vector<double> feature_;
};

/// Whole-signal filtering with zero padding outside [0, T); works for both
/// kernel supports. Same layout as GaborFilter.
Matrix<double> gabor_filter_batch(const Matrix<double>& signal, const GaborBank& bank);

// ---------------------------------------------------------------------------
// HMM filtering

/// Row-stochastic phase transition matrix.
class TransitionMatrix {
 public:
  /// A[i][j] = (#i->j successive-frame transitions + smoothing) / row total.
  static TransitionMatrix estimate(std::span<const std::vector<PhaseId>> sequences,
                                   std::size_t num_phases, double smoothing);
  /// Same estimator on time-reversed sequences.
  static TransitionMatrix estimate_reversed(std::span<const std::vector<PhaseId>> sequences,
                                            std::size_t num_phases, double smoothing);
  /// Validates non-negative entries and rows summing to 1 within 1e-9.
  static TransitionMatrix from_rows(Matrix<double> a);
  /// Rows rounded to 32-bit reals and renormalized, as stored in checkpoints.
  static TransitionMatrix from_float_rows(const Matrix<float>& a);
  static TransitionMatrix identity(std::size_t n);
  static TransitionMatrix uniform(std::size_t n);

  std::size_t size() const noexcept { return a_.rows(); }
  double operator()(std::size_t i, std::size_t j) const { return a_(i, j); }
  const Matrix<double>& matrix() const noexcept { return a_; }
  std::size_t video_count() const noexcept { return video_count_; }
  double smoothing() const noexcept { return smoothing_; }

  /// N x N table with phase names as the header row.
  void write_csv(std::ostream& os, const PhaseTaxonomy& taxonomy) const;

 private:
  Matrix<double> a_;
  std::size_t video_count_ = 0;
  double smoothing_ = 0;
};

/// Forward filter alpha' ∝ (A^T alpha) ⊙ m, starting from a uniform belief.
class HmmFilter {
 public:
  explicit HmmFilter(std::shared_ptr<const TransitionMatrix> transition);

  std::size_t dim() const noexcept { return belief_.size(); }
  /// Returns the posterior. If the normalizer underflows the recursion
  /// restarts from the uniform prior and underflows() increments.
  std::span<const double> update(std::span<const double> m);
  std::span<const double> belief() const noexcept { return belief_; }
  std::size_t underflows() const noexcept { return underflows_; }

 private:
  std::shared_ptr<const TransitionMatrix> transition_;
  std::vector<double> belief_;
  std::vector<double> scratch_;
  std::size_t underflows_ = 0;
};

// ---------------------------------------------------------------------------
// Combined statistic

struct SsmOptions {
  FeatureSet features;
  std::vector<double> csl_levels{0.25, 0.5, 0.75};
  GaborOptions gabor;

  static SsmOptions from_config(const ExperimentConfig& config);
  bool operator==(const SsmOptions&) const = default;
};

/// Sub-feature widths in concatenation order csl | gabor | hmm.
struct SsmLayout {
  std::size_t csl = 0;
  std::size_t gabor = 0;
  std::size_t hmm = 0;

  std::size_t total() const noexcept { return csl + gabor + hmm; }
  static SsmLayout of(std::size_t num_phases, const SsmOptions& options);
};

/// Writes csl | gabor | hmm into `out`. Throws ValidationError if any part's
/// width differs from the layout fixed for the run.
void ssm_concat(std::span<const double> csl, std::span<const double> gabor,
                std::span<const double> hmm, const SsmLayout& layout, std::span<double> out);

/// Immutable pieces shared by every SsmState of a run.
struct SsmContext {
  std::size_t num_phases = 0;
  SsmOptions options;
  std::shared_ptr<const GaborBank> gabor_bank;            // null when gabor is off
  std::shared_ptr<const TransitionMatrix> transition;     // null when hmm is off

  static SsmContext make(std::size_t num_phases, const SsmOptions& options,
                         std::shared_ptr<const TransitionMatrix> transition);
  SsmLayout layout() const { return SsmLayout::of(num_phases, options); }
  std::size_t dim() const { return layout().total(); }
};

/// Running statistic s_t for one video. s_0 is the zero vector; each update
/// with m_t produces s_{t+1}, a function of m_0..m_t only.
class SsmState {
 public:
  explicit SsmState(const SsmContext& context);

  std::size_t dim() const noexcept { return statistic_.size(); }
  std::size_t frame() const noexcept { return frame_; }
  std::span<const double> statistic() const noexcept { return statistic_; }
  void update(std::span<const double> m);

  const CslAccumulator* csl() const noexcept { return csl_ ? &*csl_ : nullptr; }
  const HmmFilter* hmm() const noexcept { return hmm_ ? &*hmm_ : nullptr; }

 private:
  SsmLayout layout_;
  std::size_t num_phases_;
  std::optional<CslAccumulator> csl_;
  std::optional<GaborFilter> gabor_;
  std::optional<HmmFilter> hmm_;
  std::vector<double> statistic_;
  std::vector<double> csl_buf_, gabor_buf_;
  std::size_t frame_ = 0;
};

/// Row t is the statistic available when processing frame t (built from
/// rows 0..t-1 of `stream`). Row 0 is zero.
Matrix<double> causal_feature_stream(const Matrix<double>& stream, const SsmContext& context);

/// Row t summarizes the future frames t+1..T-1: the causal aggregator run on
/// the time-reversed stream, re-reversed. Throws UsageError if the stream is
/// not complete (online mode).
Matrix<double> acausal_feature_stream(const LikelihoodStream& stream, const SsmContext& context);

}  // namespace phaseflow::ssm
