#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "phaseflow/core.hpp"
#include "phaseflow/matrix.hpp"

namespace phaseflow::eval {

/// Maximal constant run [start, end], end inclusive.
struct Segment {
  PhaseId phase = 0;
  std::size_t start = 0;
  std::size_t end = 0;

  std::size_t length() const noexcept { return end - start + 1; }
  bool operator==(const Segment&) const = default;
};

std::vector<Segment> extract_segments(std::span<const PhaseId> labels);

using Confusion = Matrix<std::uint64_t>;  // rows: ground truth, cols: prediction

struct PhaseScores {
  std::uint64_t support = 0;    // ground-truth frames
  std::uint64_t predicted = 0;  // predicted frames
  std::uint64_t true_positives = 0;
  double precision = 0;  // 0 when nothing was predicted
  double recall = 0;     // 0 when absent from the ground truth
  double f1 = 0;
  bool present() const noexcept { return support > 0 || predicted > 0; }
};

/// Accuracy plus phase-averaged scores. Averages run over phases present in
/// the ground truth or the prediction; f1 is the harmonic mean of the
/// averaged precision and recall.
struct FrameMetrics {
  std::uint64_t frames = 0;
  double accuracy = 0;
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  double mean_phase_f1 = 0;
  std::vector<PhaseScores> per_phase;
  Confusion confusion;
};

Confusion confusion_matrix(std::span<const PhaseId> gt, std::span<const PhaseId> pred, std::size_t num_phases);
FrameMetrics metrics_from_confusion(const Confusion& confusion);
/// Throws ValidationError on a length mismatch or out-of-range label.
FrameMetrics frame_metrics(std::span<const PhaseId> gt, std::span<const PhaseId> pred, std::size_t num_phases);

/// Frame accuracy restricted to ground-truth frames of the given phases.
std::optional<double> subset_accuracy(const Confusion& confusion, std::span<const PhaseId> phases);

// Duration buckets 1-3, 4-10, 11-30, 31-60, >60 seconds (frames at 1 fps).
inline constexpr std::size_t kNumBuckets = 5;
inline constexpr std::array<const char*, kNumBuckets> kBucketNames = {"1-3s", "4-10s", "11-30s", "31-60s",
                                                                      ">60s"};
std::size_t bucket_of(std::size_t segment_length) noexcept;

struct BucketStats {
  std::array<std::uint64_t, kNumBuckets> frames{};
  std::array<std::uint64_t, kNumBuckets> correct{};

  /// Absent (nullopt) when no frame fell in the bucket.
  std::optional<double> accuracy(std::size_t bucket) const;
  BucketStats& operator+=(const BucketStats& other);
};

/// Each frame takes the bucket of its ground-truth segment's length.
BucketStats bucket_accuracy(std::span<const PhaseId> gt, std::span<const PhaseId> pred);

struct TransitionStats {
  std::uint64_t gt_transitions = 0;
  std::uint64_t pred_transitions = 0;
  std::uint64_t matched = 0;

  std::optional<double> gt_rate() const;    // matched / gt transitions
  std::optional<double> pred_rate() const;  // matched / predicted transitions
  TransitionStats& operator+=(const TransitionStats& other);
};

/// A ground-truth transition into p at t matches an unused predicted
/// transition into p at t' with |t - t'| <= window; closest pairs first,
/// ties broken by earlier gt time, then earlier predicted time.
TransitionStats transition_accuracy(std::span<const PhaseId> gt, std::span<const PhaseId> pred,
                                    std::size_t window = 10);

struct MidpointStats {
  std::uint64_t segments = 0;
  std::uint64_t correct = 0;

  std::optional<double> rate() const;
  MidpointStats& operator+=(const MidpointStats& other);
};

/// A segment counts as correct when the prediction at floor((start+end)/2)
/// equals its phase.
MidpointStats midpoint_accuracy(std::span<const PhaseId> gt, std::span<const PhaseId> pred);

/// Accuracy against ground-truth segment length in log2 bins: bin k holds
/// segments of length [2^k, 2^(k+1)).
struct LengthCurve {
  std::vector<std::uint64_t> segments;
  std::vector<std::uint64_t> frames;
  std::vector<std::uint64_t> correct;

  LengthCurve& operator+=(const LengthCurve& other);
};

LengthCurve length_curve(std::span<const PhaseId> gt, std::span<const PhaseId> pred);

struct VideoReport {
  std::string video_id;
  FrameMetrics frame;
  BucketStats buckets;
  TransitionStats transitions;
  MidpointStats midpoints;
  LengthCurve curve;
};

VideoReport evaluate_video(std::string video_id, std::span<const PhaseId> gt, std::span<const PhaseId> pred,
                           std::size_t num_phases, std::size_t transition_window = 10);

/// Pooled over videos: micro accuracy, macro scores from the pooled
/// confusion, summed bucket / transition / midpoint counts. Videos are kept
/// sorted by id so the result does not depend on input order.
struct DatasetReport {
  PhaseTaxonomy taxonomy;
  std::vector<VideoReport> videos;
  FrameMetrics frame;
  BucketStats buckets;
  TransitionStats transitions;
  MidpointStats midpoints;
  LengthCurve curve;

  bool empty() const noexcept { return videos.empty(); }
};

DatasetReport aggregate(const PhaseTaxonomy& taxonomy, std::vector<VideoReport> videos);

/// Mean accuracy over the populated buckets up to and including 11-30s.
std::optional<double> short_bucket_accuracy(const BucketStats& buckets);

struct Timeline {
  std::string video_id;
  std::vector<PhaseId> gt;
  std::vector<PhaseId> pred;
  std::vector<double> confidence;  // max probability per frame
};

std::string metrics_json(const DatasetReport& report);
std::string confusion_csv(const DatasetReport& report);
std::string curve_csv(const DatasetReport& report);
/// Ground-truth row plus a prediction row whose opacity is the run's mean
/// confidence. One rect per gt segment and per predicted run.
std::string timeline_svg(const Timeline& timeline, const PhaseTaxonomy& taxonomy);

/// Writes metrics.json, confusion.csv, length_curve.csv and
/// timelines/<video>.svg. Throws UsageError if `dir` is not writable.
void render_report(const std::filesystem::path& dir, const DatasetReport& report,
                   const std::vector<Timeline>& timelines);

}  // namespace phaseflow::eval
