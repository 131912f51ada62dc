#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "phaseflow/core.hpp"
#include "phaseflow/matrix.hpp"

namespace phaseflow::data {

/// Log-normal segment duration in seconds (frames at 1 fps).
struct DurationModel {
  double median = 10.0;
  double log_sigma = 0.3;

  bool operator==(const DurationModel&) const = default;
};

/// Blocks of phases whose relative order is randomized. The listed order is
/// canonical and kept with `canonical_probability`; otherwise a uniformly
/// chosen non-canonical permutation of the blocks is used.
struct InterchangeableGroup {
  std::vector<std::vector<PhaseId>> blocks;
  double canonical_probability = 0.5;

  bool operator==(const InterchangeableGroup&) const = default;
};

/// An extra segment of a repeatable phase placed right before `before`.
struct Insertion {
  PhaseId phase = 0;
  PhaseId before = 0;
  double probability = 1.0;
  DurationModel duration;

  bool operator==(const Insertion&) const = default;
};

/// A phase outside the main order, inserted with `probability` at a uniformly
/// chosen boundary between two segments.
struct OptionalPhase {
  PhaseId phase = 0;
  double probability = 0.0;

  bool operator==(const OptionalPhase&) const = default;
};

struct WorkflowGrammar {
  PhaseTaxonomy taxonomy;
  std::vector<std::pair<PhaseId, PhaseId>> precedence;  // (a, b): a precedes b
  std::vector<InterchangeableGroup> interchangeable;
  std::vector<PhaseId> repeatable;
  std::vector<Insertion> insertions;
  std::vector<OptionalPhase> optional;
  std::vector<DurationModel> durations;  // one per phase

  std::size_t embed_dim = 128;
  double noise_sigma = 0.5;
  double mean_scale = 0.15;  // per-dimension std of the phase means
  std::uint64_t emission_seed = 0;
  std::vector<std::vector<PhaseId>> ambiguity_groups;
  Matrix<float> means;  // N x D; drawn by finalize() unless given
  bool explicit_means = false;  // means came from the grammar file and are serialized

  /// Validates the grammar (acyclic precedence, positive durations, ids in
  /// range), draws missing means and copies each ambiguity group's first mean
  /// onto the other members. Throws ValidationError.
  void finalize();

  /// Main order: topological sort of the non-optional phases, lowest id first.
  std::vector<PhaseId> base_order() const;

  bool operator==(const WorkflowGrammar&) const = default;
};

/// The 13-phase cholecystectomy grammar with ambiguous clip/divide phases.
WorkflowGrammar default_grammar_mgh_like();

/// Resolves "mgh-like" or a JSON grammar file.
WorkflowGrammar load_grammar(const std::string& preset_or_path);

std::string grammar_to_json(const WorkflowGrammar& grammar);
WorkflowGrammar grammar_from_json(const std::string& text);

/// Phase order and durations of one video, before emissions.
struct Workflow {
  std::vector<PhaseId> phases;
  std::vector<std::size_t> durations;
};

Workflow sample_workflow(const WorkflowGrammar& grammar, std::mt19937_64& rng);

/// v_t = mean(phase) + N(0, noise_sigma^2) per dimension, labels attached.
FeatureSequence generate_video(const WorkflowGrammar& grammar, std::mt19937_64& rng,
                               std::string video_id = "video");

/// Videos "video_000".. each from its own generator stream of `seed`.
std::vector<FeatureSequence> generate_dataset(const WorkflowGrammar& grammar, std::size_t count,
                                              std::uint64_t seed);

// ---------------------------------------------------------------------------
// Files

inline constexpr std::uint32_t kFeaturesVersion = 1;

void write_features(std::ostream& os, const Matrix<float>& features);
/// Throws FormatError with a distinct kind for bad magic, bad version,
/// truncated payload and a header inconsistent with the payload size.
Matrix<float> read_features(std::istream& is);

void write_labels(std::ostream& os, const std::vector<PhaseId>& labels);
std::vector<PhaseId> read_labels(std::istream& is);

struct VideoMeta {
  std::string video_id;
  double fps = 1.0;
  PhaseTaxonomy taxonomy;
  std::optional<std::uint64_t> generator_seed;
};

std::string meta_to_json(const VideoMeta& meta);
VideoMeta meta_from_json(const std::string& text);

struct Dataset {
  PhaseTaxonomy taxonomy;
  std::vector<FeatureSequence> videos;  // sorted by video id

  const FeatureSequence& find(const std::string& video_id) const;
};

/// One subdirectory per video with features.bin, labels.csv and meta.json.
void write_video(const std::filesystem::path& dir, const FeatureSequence& seq,
                 const PhaseTaxonomy& taxonomy, std::optional<std::uint64_t> generator_seed = {});
FeatureSequence read_video(const std::filesystem::path& dir, PhaseTaxonomy* taxonomy = nullptr);

void write_dataset(const std::filesystem::path& dir, const std::vector<FeatureSequence>& videos,
                   const PhaseTaxonomy& taxonomy, std::optional<std::uint64_t> generator_seed = {});
/// Every subdirectory holding a features.bin; all must share one taxonomy.
Dataset read_dataset(const std::filesystem::path& dir);

struct Splits {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;

  bool operator==(const Splits&) const = default;
};

/// First 60% train, next 20% validation, rest test, in the given order.
Splits default_splits(const std::vector<std::string>& video_ids);

struct Manifest {
  int schema_version = 1;
  std::optional<std::uint64_t> seed;
  std::optional<WorkflowGrammar> grammar;
  Splits splits;
};

void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);
/// The dataset's manifest.json if present, otherwise default splits.
Splits dataset_splits(const std::filesystem::path& dir, const Dataset& dataset);

/// Selects the listed videos; throws ValidationError for an unknown id.
std::vector<FeatureSequence> select(const Dataset& dataset, const std::vector<std::string>& ids);

struct ImportOptions {
  std::string video_id = "video";
  double fps = 1.0;
  bool header = false;        // skip the first line
  bool label_column = false;  // last column holds phase ids
};

/// Rows are frames. Keeps every round(fps)-th frame so the result is at 1 fps.
/// Throws ValidationError naming the row for ragged or non-numeric input.
FeatureSequence import_external_features(std::istream& csv, const ImportOptions& options,
                                         const PhaseTaxonomy& taxonomy);

}  // namespace phaseflow::data
