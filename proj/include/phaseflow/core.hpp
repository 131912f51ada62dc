#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "phaseflow/matrix.hpp"

namespace phaseflow {

/// Phase ids are 0-based everywhere, including every file format.
using PhaseId = std::uint32_t;

/// Ordered set of phase names; id i names the i-th entry.
class PhaseTaxonomy {
 public:
  PhaseTaxonomy() = default;
  explicit PhaseTaxonomy(std::vector<std::string> names);

  std::size_t size() const noexcept { return names_.size(); }
  const std::string& name(PhaseId id) const { return names_.at(id); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  bool contains(PhaseId id) const noexcept { return id < names_.size(); }

  /// The 13 MGH100 phases, in workflow order.
  static PhaseTaxonomy mgh100();
  /// The 7 Cholec80 phases.
  static PhaseTaxonomy cholec80();

  bool operator==(const PhaseTaxonomy&) const = default;

 private:
  std::vector<std::string> names_;
};

/// One video: T frames of D-dimensional embeddings, optional ground truth.
struct FeatureSequence {
  std::string video_id;
  double fps = 1.0;
  Matrix<float> features;       // T x D
  std::vector<PhaseId> labels;  // empty, or length T

  std::size_t length() const noexcept { return features.rows(); }
  std::size_t dim() const noexcept { return features.cols(); }
  bool has_labels() const noexcept { return !labels.empty(); }

  bool operator==(const FeatureSequence&) const = default;
};

/// Checks every FeatureSequence invariant against the taxonomy and returns the
/// sequence unchanged. Throws ValidationError naming the first bad frame.
const FeatureSequence& validate_sequence(const FeatureSequence& seq, const PhaseTaxonomy& tax);

/// A point on the probability simplex.
class ProbVector {
 public:
  static constexpr double kTolerance = 1e-6;

  /// Validates entries in [0,1] summing to 1 within kTolerance.
  explicit ProbVector(std::vector<double> p);

  template <typename T>
  static ProbVector softmax(std::span<const T> logits);

  std::size_t size() const noexcept { return p_.size(); }
  double operator[](std::size_t i) const { return p_[i]; }
  std::span<const double> values() const noexcept { return p_; }

  /// Highest-probability entry; ties go to the lowest id.
  PhaseId argmax() const noexcept;

 private:
  struct Unchecked {};
  ProbVector(std::vector<double> p, Unchecked) : p_(std::move(p)) {}
  std::vector<double> p_;
};

/// Numerically stable softmax in the caller's precision.
template <typename T>
void softmax_into(std::span<const T> logits, std::span<T> out);

/// Lowest index among the maxima.
template <typename T>
std::size_t argmax_lowest(std::span<const T> values) noexcept {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

/// Which sufficient-statistic aggregators feed the temporal model.
struct FeatureSet {
  bool csl = false;
  bool gabor = false;
  bool hmm = false;

  bool empty() const noexcept { return !csl && !gabor && !hmm; }
  static FeatureSet all() { return {true, true, true}; }
  /// Accepts "csl,gabor,hmm" in any order and subset, "all", or "none".
  static FeatureSet parse(std::string_view text);
  /// Canonical ordering csl,gabor,hmm; "none" when empty.
  std::string to_string() const;

  bool operator==(const FeatureSet&) const = default;
};

struct ExperimentConfig {
  std::size_t hidden_dim = 64;
  std::size_t seq_len_bptt = 8;
  std::size_t batch_size = 32;
  double learning_rate = 0.0025;
  std::size_t epochs = 20;
  std::size_t embed_dim = 128;
  FeatureSet features;
  bool acausal = false;
  double proximal_weight = 0.1;
  std::uint64_t seed = 1;

  std::vector<double> csl_levels{0.25, 0.5, 0.75};
  std::size_t gabor_scales = 10;
  double gabor_sigma_min = 10.0;
  double gabor_sigma_max = 30.0;
  double gabor_wavelength_factor = 4.0;  // carrier wavelength = factor * sigma
  double transition_smoothing = 1e-3;
  double grad_clip_norm = 5.0;

  /// Throws UsageError on non-positive sizes or rates.
  void validate() const;

  bool operator==(const ExperimentConfig&) const = default;
};

/// Flat `key = value` text, one entry per line, `#` comments.
ExperimentConfig parse_config(std::string_view text);
std::string format_config(const ExperimentConfig& config);

/// Shortest decimal text that parses back to the same double.
std::string format_real(double value);

/// Independent generator for a named purpose ("generator", "init", "batching")
/// derived from one experiment seed.
std::mt19937_64 make_rng(std::uint64_t seed, std::string_view stream);

}  // namespace phaseflow
