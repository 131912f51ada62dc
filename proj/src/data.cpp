#include "phaseflow/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <queue>
#include <sstream>

#include <json.hpp>

#include "binary_io.hpp"
#include "phaseflow/error.hpp"

namespace phaseflow::data {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Grammar

namespace {

void check_id(PhaseId id, std::size_t n, const char* what) {
  if (id >= n) throw ValidationError(std::string("grammar: ") + what + " refers to unknown phase " + std::to_string(id));
}

void check_duration(const DurationModel& d, const std::string& what) {
  if (!(d.median > 0) || !std::isfinite(d.median))
    throw ValidationError("grammar: duration median of " + what + " must be positive");
  if (!(d.log_sigma >= 0) || !std::isfinite(d.log_sigma))
    throw ValidationError("grammar: duration spread of " + what + " must be non-negative");
}

bool is_optional(const WorkflowGrammar& g, PhaseId p) {
  return std::any_of(g.optional.begin(), g.optional.end(), [&](const auto& o) { return o.phase == p; });
}

}  // namespace

std::vector<PhaseId> WorkflowGrammar::base_order() const {
  const std::size_t n = taxonomy.size();
  std::vector<std::vector<PhaseId>> succ(n);
  std::vector<std::size_t> indegree(n, 0);
  for (auto [a, b] : precedence) {
    succ[a].push_back(b);
    ++indegree[b];
  }
  std::priority_queue<PhaseId, std::vector<PhaseId>, std::greater<>> ready;
  for (PhaseId p = 0; p < n; ++p)
    if (indegree[p] == 0) ready.push(p);
  std::vector<PhaseId> order;
  while (!ready.empty()) {
    const PhaseId p = ready.top();
    ready.pop();
    order.push_back(p);
    for (PhaseId q : succ[p])
      if (--indegree[q] == 0) ready.push(q);
  }
  if (order.size() != n) throw ValidationError("grammar: precedence constraints contain a cycle");
  std::erase_if(order, [&](PhaseId p) { return is_optional(*this, p); });
  return order;
}

void WorkflowGrammar::finalize() {
  const std::size_t n = taxonomy.size();
  if (n < 2) throw ValidationError("grammar: need at least 2 phases");
  if (durations.size() != n)
    throw ValidationError("grammar: expected " + std::to_string(n) + " durations, got " +
                          std::to_string(durations.size()));
  for (std::size_t p = 0; p < n; ++p) check_duration(durations[p], taxonomy.name(static_cast<PhaseId>(p)));
  for (auto [a, b] : precedence) {
    check_id(a, n, "precedence");
    check_id(b, n, "precedence");
    if (a == b) throw ValidationError("grammar: a phase cannot precede itself");
  }
  std::vector<int> in_block(n, 0);
  for (const auto& g : interchangeable) {
    if (g.blocks.size() < 2) throw ValidationError("grammar: interchangeable group needs at least 2 blocks");
    if (!(g.canonical_probability >= 0 && g.canonical_probability <= 1))
      throw ValidationError("grammar: canonical_probability must lie in [0, 1]");
    for (const auto& block : g.blocks) {
      if (block.empty()) throw ValidationError("grammar: empty interchangeable block");
      for (PhaseId p : block) {
        check_id(p, n, "interchangeable group");
        if (in_block[p]++) throw ValidationError("grammar: phase " + std::to_string(p) + " is in two interchangeable blocks");
      }
    }
  }
  for (PhaseId p : repeatable) check_id(p, n, "repeatable");
  for (const auto& ins : insertions) {
    check_id(ins.phase, n, "insertion");
    check_id(ins.before, n, "insertion");
    if (std::find(repeatable.begin(), repeatable.end(), ins.phase) == repeatable.end())
      throw ValidationError("grammar: inserted phase " + std::to_string(ins.phase) + " is not repeatable");
    if (!(ins.probability >= 0 && ins.probability <= 1))
      throw ValidationError("grammar: insertion probability must lie in [0, 1]");
    check_duration(ins.duration, "insertion");
  }
  for (const auto& o : optional) {
    check_id(o.phase, n, "optional phase");
    if (!(o.probability >= 0 && o.probability <= 1))
      throw ValidationError("grammar: optional-phase probability must lie in [0, 1]");
  }
  std::vector<int> in_group(n, 0);
  for (const auto& group : ambiguity_groups) {
    if (group.size() < 2) throw ValidationError("grammar: ambiguity group needs at least 2 phases");
    for (PhaseId p : group) {
      check_id(p, n, "ambiguity group");
      if (in_group[p]++) throw ValidationError("grammar: phase " + std::to_string(p) + " is in two ambiguity groups");
    }
  }
  if (embed_dim == 0) throw ValidationError("grammar: embed_dim must be positive");
  if (!(noise_sigma >= 0) || !(mean_scale >= 0)) throw ValidationError("grammar: noise and scale must be non-negative");
  base_order();  // cycle check

  if (explicit_means) {
    if (means.rows() != n || means.cols() != embed_dim)
      throw ValidationError("grammar: means must be N x embed_dim");
  } else {
    auto rng = make_rng(emission_seed, "emission");
    std::normal_distribution<double> normal(0.0, mean_scale);
    means = Matrix<float>(n, embed_dim);
    for (float& v : means.flat()) v = static_cast<float>(normal(rng));
  }
  for (const auto& group : ambiguity_groups)
    for (std::size_t k = 1; k < group.size(); ++k)
      std::copy(means.row(group[0]).begin(), means.row(group[0]).end(), means.row(group[k]).begin());
}

WorkflowGrammar default_grammar_mgh_like() {
  WorkflowGrammar g;
  g.taxonomy = PhaseTaxonomy::mgh100();
  // 0 port, 1 fundus, 2 release, 3 calot, 4 cp1, 5 clip A, 6 divide A, 7 clip D, 8 divide D,
  // 9 cp2, 10 remove GB, 11 bagging, 12 other
  g.precedence = {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {5, 6}, {4, 7},
                  {7, 8}, {6, 9}, {8, 9}, {9, 10}, {10, 11}};
  g.interchangeable = {{{{5, 6}, {7, 8}}, 0.8}};
  g.repeatable = {3};
  // Dissection resumes before each clip block, so the local context of the
  // two blocks is the same.
  g.insertions = {{3, 5, 1.0, {30.0, 0.4}}, {3, 7, 1.0, {30.0, 0.4}}};
  g.optional = {{12, 0.3}};
  g.durations = {{20, 0.4}, {25, 0.4}, {60, 0.4}, {180, 0.35}, {3, 0.3}, {8, 0.3}, {8, 0.3},
                 {8, 0.3},  {8, 0.3},  {3, 0.3},  {180, 0.35}, {30, 0.4}, {10, 0.5}};
  g.embed_dim = 128;
  g.noise_sigma = 0.5;
  g.mean_scale = 0.15;
  g.emission_seed = 0;
  g.ambiguity_groups = {{5, 7}, {6, 8}};
  g.finalize();
  return g;
}

namespace {

json duration_json(const DurationModel& d) { return {{"median", d.median}, {"log_sigma", d.log_sigma}}; }

DurationModel duration_from(const json& j) {
  return {j.at("median").get<double>(), j.at("log_sigma").get<double>()};
}

}  // namespace

std::string grammar_to_json(const WorkflowGrammar& g) {
  json j;
  j["phases"] = g.taxonomy.names();
  j["precedence"] = json::array();
  for (auto [a, b] : g.precedence) j["precedence"].push_back({a, b});
  j["interchangeable"] = json::array();
  for (const auto& ig : g.interchangeable)
    j["interchangeable"].push_back({{"blocks", ig.blocks}, {"canonical_probability", ig.canonical_probability}});
  j["repeatable"] = g.repeatable;
  j["insertions"] = json::array();
  for (const auto& ins : g.insertions)
    j["insertions"].push_back({{"phase", ins.phase},
                               {"before", ins.before},
                               {"probability", ins.probability},
                               {"duration", duration_json(ins.duration)}});
  j["optional"] = json::array();
  for (const auto& o : g.optional) j["optional"].push_back({{"phase", o.phase}, {"probability", o.probability}});
  j["durations"] = json::array();
  for (const auto& d : g.durations) j["durations"].push_back(duration_json(d));
  j["embed_dim"] = g.embed_dim;
  j["noise_sigma"] = g.noise_sigma;
  j["mean_scale"] = g.mean_scale;
  j["emission_seed"] = g.emission_seed;
  j["ambiguity_groups"] = g.ambiguity_groups;
  if (g.explicit_means) {
    j["means"] = json::array();
    for (std::size_t r = 0; r < g.means.rows(); ++r)
      j["means"].push_back(std::vector<float>(g.means.row(r).begin(), g.means.row(r).end()));
  }
  return j.dump(2);
}

WorkflowGrammar grammar_from_json(const std::string& text) {
  WorkflowGrammar g;
  try {
    const json j = json::parse(text);
    g.taxonomy = PhaseTaxonomy(j.at("phases").get<std::vector<std::string>>());
    for (const auto& p : j.value("precedence", json::array()))
      g.precedence.emplace_back(p.at(0).get<PhaseId>(), p.at(1).get<PhaseId>());
    for (const auto& ig : j.value("interchangeable", json::array()))
      g.interchangeable.push_back({ig.at("blocks").get<std::vector<std::vector<PhaseId>>>(),
                                   ig.value("canonical_probability", 0.5)});
    g.repeatable = j.value("repeatable", std::vector<PhaseId>{});
    for (const auto& ins : j.value("insertions", json::array()))
      g.insertions.push_back({ins.at("phase").get<PhaseId>(), ins.at("before").get<PhaseId>(),
                              ins.value("probability", 1.0), duration_from(ins.at("duration"))});
    for (const auto& o : j.value("optional", json::array()))
      g.optional.push_back({o.at("phase").get<PhaseId>(), o.at("probability").get<double>()});
    for (const auto& d : j.at("durations")) g.durations.push_back(duration_from(d));
    g.embed_dim = j.value("embed_dim", std::size_t{128});
    g.noise_sigma = j.value("noise_sigma", 0.5);
    g.mean_scale = j.value("mean_scale", 0.15);
    g.emission_seed = j.value("emission_seed", std::uint64_t{0});
    g.ambiguity_groups = j.value("ambiguity_groups", std::vector<std::vector<PhaseId>>{});
    if (j.contains("means")) {
      g.explicit_means = true;
      const auto rows = j.at("means").get<std::vector<std::vector<float>>>();
      g.means = Matrix<float>(rows.size(), rows.empty() ? 0 : rows[0].size());
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != g.means.cols()) throw ValidationError("grammar: ragged means");
        std::copy(rows[r].begin(), rows[r].end(), g.means.row(r).begin());
      }
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("grammar JSON: ") + e.what());
  }
  g.finalize();
  return g;
}

WorkflowGrammar load_grammar(const std::string& preset_or_path) {
  if (preset_or_path == "mgh-like" || preset_or_path == "default") return default_grammar_mgh_like();
  std::ifstream is(preset_or_path);
  if (!is) throw UsageError("unknown grammar preset or unreadable file: " + preset_or_path);
  std::stringstream ss;
  ss << is.rdbuf();
  return grammar_from_json(ss.str());
}

// ---------------------------------------------------------------------------
// Generation

namespace {

std::size_t sample_duration(const DurationModel& d, std::mt19937_64& rng) {
  std::lognormal_distribution<double> dist(std::log(d.median), d.log_sigma);
  return static_cast<std::size_t>(std::max<long long>(1, std::llround(dist(rng))));
}

}  // namespace

Workflow sample_workflow(const WorkflowGrammar& grammar, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<PhaseId> order = grammar.base_order();

  for (const auto& group : grammar.interchangeable) {
    std::vector<std::size_t> perm(group.blocks.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    if (unit(rng) >= group.canonical_probability) {
      std::vector<std::vector<std::size_t>> others;
      auto p = perm;
      while (std::next_permutation(p.begin(), p.end())) others.push_back(p);
      std::uniform_int_distribution<std::size_t> pick(0, others.size() - 1);
      perm = others[pick(rng)];
    }
    std::vector<std::size_t> slots;
    for (std::size_t i = 0; i < order.size(); ++i)
      for (const auto& block : group.blocks)
        if (std::find(block.begin(), block.end(), order[i]) != block.end()) slots.push_back(i);
    std::vector<PhaseId> filled;
    for (std::size_t b : perm) filled.insert(filled.end(), group.blocks[b].begin(), group.blocks[b].end());
    for (std::size_t k = 0; k < slots.size(); ++k) order[slots[k]] = filled[k];
  }

  Workflow w;
  for (PhaseId p : order) {
    w.phases.push_back(p);
    w.durations.push_back(sample_duration(grammar.durations[p], rng));
  }

  for (const auto& ins : grammar.insertions) {
    const bool take = unit(rng) < ins.probability;
    const std::size_t len = sample_duration(ins.duration, rng);
    if (!take) continue;
    auto it = std::find(w.phases.begin(), w.phases.end(), ins.before);
    if (it == w.phases.end()) continue;
    const auto pos = static_cast<std::size_t>(it - w.phases.begin());
    w.phases.insert(w.phases.begin() + pos, ins.phase);
    w.durations.insert(w.durations.begin() + pos, len);
  }

  for (const auto& o : grammar.optional) {
    const bool take = unit(rng) < o.probability;
    const std::size_t len = sample_duration(grammar.durations[o.phase], rng);
    if (!take || w.phases.size() < 2) continue;
    std::uniform_int_distribution<std::size_t> boundary(1, w.phases.size() - 1);
    const std::size_t pos = boundary(rng);
    w.phases.insert(w.phases.begin() + pos, o.phase);
    w.durations.insert(w.durations.begin() + pos, len);
  }

  Workflow merged;
  for (std::size_t i = 0; i < w.phases.size(); ++i) {
    if (!merged.phases.empty() && merged.phases.back() == w.phases[i]) merged.durations.back() += w.durations[i];
    else {
      merged.phases.push_back(w.phases[i]);
      merged.durations.push_back(w.durations[i]);
    }
  }
  return merged;
}

FeatureSequence generate_video(const WorkflowGrammar& grammar, std::mt19937_64& rng,
                               std::string video_id) {
  if (grammar.means.rows() != grammar.taxonomy.size() || grammar.means.cols() != grammar.embed_dim)
    throw UsageError("generate_video: grammar is not finalized");
  const Workflow w = sample_workflow(grammar, rng);
  FeatureSequence seq;
  seq.video_id = std::move(video_id);
  seq.fps = 1.0;
  for (std::size_t i = 0; i < w.phases.size(); ++i) seq.labels.insert(seq.labels.end(), w.durations[i], w.phases[i]);
  seq.features = Matrix<float>(seq.labels.size(), grammar.embed_dim);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t t = 0; t < seq.labels.size(); ++t) {
    auto mean = grammar.means.row(seq.labels[t]);
    auto row = seq.features.row(t);
    for (std::size_t d = 0; d < grammar.embed_dim; ++d)
      row[d] = static_cast<float>(mean[d] + grammar.noise_sigma * noise(rng));
  }
  return seq;
}

std::vector<FeatureSequence> generate_dataset(const WorkflowGrammar& grammar, std::size_t count,
                                              std::uint64_t seed) {
  std::vector<FeatureSequence> out;
  for (std::size_t i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "video_%03zu", i);
    auto rng = make_rng(seed, "generator:" + std::to_string(i));
    out.push_back(generate_video(grammar, rng, id));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files

namespace {

constexpr char kFeaturesMagic[4] = {'P', 'H', 'F', 'T'};

std::string slurp(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::ofstream open_out(const std::filesystem::path& path, bool binary = false) {
  std::ofstream os(path, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
  if (!os) throw UsageError("cannot write " + path.string());
  return os;
}

}  // namespace

void write_features(std::ostream& os, const Matrix<float>& features) {
  os.write(kFeaturesMagic, 4);
  detail::write_u32(os, kFeaturesVersion);
  detail::write_u32(os, static_cast<std::uint32_t>(features.rows()));
  detail::write_u32(os, static_cast<std::uint32_t>(features.cols()));
  detail::write_f32(os, features.flat());
}

Matrix<float> read_features(std::istream& is) {
  char magic[4];
  detail::read_exact(is, magic, 4, "features header");
  if (!std::equal(magic, magic + 4, kFeaturesMagic))
    throw FormatError(FormatErrorKind::kBadMagic, "features.bin: bad magic");
  const auto version = detail::read_u32(is, "features header");
  if (version != kFeaturesVersion)
    throw FormatError(FormatErrorKind::kBadVersion, "features.bin: unsupported version " + std::to_string(version));
  const std::uint64_t t = detail::read_u32(is, "features header");
  const std::uint64_t d = detail::read_u32(is, "features header");
  const std::uint64_t expected = t * d * 4;

  std::string payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (payload.size() < expected)
    throw FormatError(FormatErrorKind::kTruncated,
                      "features.bin: truncated payload (" + std::to_string(payload.size()) + " of " +
                          std::to_string(expected) + " bytes)");
  if (payload.size() > expected)
    throw FormatError(FormatErrorKind::kInconsistentHeader,
                      "features.bin: header T=" + std::to_string(t) + " D=" + std::to_string(d) +
                          " inconsistent with " + std::to_string(payload.size()) + " payload bytes");
  Matrix<float> m(t, d);
  std::istringstream ps(payload);
  detail::read_f32(ps, m.flat(), "features payload");
  return m;
}

void write_labels(std::ostream& os, const std::vector<PhaseId>& labels) {
  os << "frame_idx,label_id\n";
  for (std::size_t t = 0; t < labels.size(); ++t) os << t << ',' << labels[t] << '\n';
}

std::vector<PhaseId> read_labels(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "frame_idx,label_id")
    throw ValidationError("labels.csv: expected header frame_idx,label_id");
  std::vector<PhaseId> labels;
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    const auto comma = line.find(',');
    std::uint64_t idx = 0, label = 0;
    bool ok = comma != std::string::npos;
    if (ok) {
      auto r1 = std::from_chars(line.data(), line.data() + comma, idx);
      auto r2 = std::from_chars(line.data() + comma + 1, line.data() + line.size(), label);
      ok = r1.ec == std::errc() && r1.ptr == line.data() + comma && r2.ec == std::errc() &&
           r2.ptr == line.data() + line.size();
    }
    if (!ok) throw ValidationError("labels.csv: malformed row " + std::to_string(row));
    if (idx != labels.size())
      throw ValidationError("labels.csv: frame index out of sequence at row " + std::to_string(row));
    if (label > 0xFFFFFFFFull) throw ValidationError("labels.csv: label out of range at row " + std::to_string(row));
    labels.push_back(static_cast<PhaseId>(label));
  }
  return labels;
}

std::string meta_to_json(const VideoMeta& meta) {
  json j;
  j["video_id"] = meta.video_id;
  j["fps"] = meta.fps;
  j["taxonomy"] = json::array();
  for (std::size_t i = 0; i < meta.taxonomy.size(); ++i)
    j["taxonomy"].push_back({{"id", i}, {"name", meta.taxonomy.name(static_cast<PhaseId>(i))}});
  if (meta.generator_seed) j["generator_seed"] = *meta.generator_seed;
  return j.dump(2) + "\n";
}

VideoMeta meta_from_json(const std::string& text) {
  VideoMeta meta;
  try {
    const json j = json::parse(text);
    meta.video_id = j.at("video_id").get<std::string>();
    meta.fps = j.at("fps").get<double>();
    std::vector<std::string> names;
    for (const auto& entry : j.at("taxonomy")) {
      if (entry.at("id").get<std::size_t>() != names.size())
        throw ValidationError("meta.json: taxonomy ids must be 0..N-1 in order");
      names.push_back(entry.at("name").get<std::string>());
    }
    meta.taxonomy = PhaseTaxonomy(std::move(names));
    if (j.contains("generator_seed")) meta.generator_seed = j.at("generator_seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("meta.json: ") + e.what());
  }
  return meta;
}

const FeatureSequence& Dataset::find(const std::string& video_id) const {
  for (const auto& v : videos)
    if (v.video_id == video_id) return v;
  throw ValidationError("unknown video id '" + video_id + "'");
}

void write_video(const std::filesystem::path& dir, const FeatureSequence& seq,
                 const PhaseTaxonomy& taxonomy, std::optional<std::uint64_t> generator_seed) {
  validate_sequence(seq, taxonomy);
  std::filesystem::create_directories(dir);
  {
    auto os = open_out(dir / "features.bin", true);
    write_features(os, seq.features);
  }
  if (seq.has_labels()) {
    auto os = open_out(dir / "labels.csv");
    write_labels(os, seq.labels);
  }
  auto os = open_out(dir / "meta.json");
  os << meta_to_json({seq.video_id, seq.fps, taxonomy, generator_seed});
}

FeatureSequence read_video(const std::filesystem::path& dir, PhaseTaxonomy* taxonomy) {
  const VideoMeta meta = meta_from_json(slurp(dir / "meta.json"));
  FeatureSequence seq;
  seq.video_id = meta.video_id;
  seq.fps = meta.fps;
  {
    std::ifstream is(dir / "features.bin", std::ios::binary);
    if (!is) throw ValidationError("cannot open " + (dir / "features.bin").string());
    try {
      seq.features = read_features(is);
    } catch (const FormatError& e) {
      throw FormatError(e.kind(), (dir / "features.bin").string() + ": " + e.what());
    }
  }
  if (std::filesystem::exists(dir / "labels.csv")) {
    std::ifstream is(dir / "labels.csv");
    seq.labels = read_labels(is);
  }
  validate_sequence(seq, meta.taxonomy);
  if (taxonomy) *taxonomy = meta.taxonomy;
  return seq;
}

void write_dataset(const std::filesystem::path& dir, const std::vector<FeatureSequence>& videos,
                   const PhaseTaxonomy& taxonomy, std::optional<std::uint64_t> generator_seed) {
  std::filesystem::create_directories(dir);
  for (const auto& v : videos) write_video(dir / v.video_id, v, taxonomy, generator_seed);
}

Dataset read_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ValidationError("dataset directory not found: " + dir.string());
  std::vector<std::filesystem::path> subdirs;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_directory() && std::filesystem::exists(entry.path() / "features.bin"))
      subdirs.push_back(entry.path());
  std::sort(subdirs.begin(), subdirs.end());
  Dataset ds;
  for (const auto& sub : subdirs) {
    PhaseTaxonomy tax;
    ds.videos.push_back(read_video(sub, &tax));
    if (ds.videos.size() == 1) ds.taxonomy = tax;
    else if (!(tax == ds.taxonomy))
      throw ValidationError("video '" + ds.videos.back().video_id + "' uses a different taxonomy");
  }
  std::sort(ds.videos.begin(), ds.videos.end(),
            [](const auto& a, const auto& b) { return a.video_id < b.video_id; });
  for (std::size_t i = 1; i < ds.videos.size(); ++i)
    if (ds.videos[i].video_id == ds.videos[i - 1].video_id)
      throw ValidationError("duplicate video id '" + ds.videos[i].video_id + "'");
  return ds;
}

Splits default_splits(const std::vector<std::string>& ids) {
  const std::size_t n = ids.size();
  const std::size_t n_train = n * 6 / 10;
  const std::size_t n_val = n * 2 / 10;
  Splits s;
  s.train.assign(ids.begin(), ids.begin() + n_train);
  s.validation.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
  s.test.assign(ids.begin() + n_train + n_val, ids.end());
  return s;
}

void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  json j;
  j["schema_version"] = m.schema_version;
  if (m.seed) j["seed"] = *m.seed;
  j["splits"] = {{"train", m.splits.train}, {"validation", m.splits.validation}, {"test", m.splits.test}};
  if (m.grammar) j["grammar"] = json::parse(grammar_to_json(*m.grammar));
  auto os = open_out(path);
  os << j.dump(2) << '\n';
}

Manifest read_manifest(const std::filesystem::path& path) {
  Manifest m;
  try {
    const json j = json::parse(slurp(path));
    m.schema_version = j.value("schema_version", 1);
    if (j.contains("seed")) m.seed = j.at("seed").get<std::uint64_t>();
    const auto& s = j.at("splits");
    m.splits.train = s.value("train", std::vector<std::string>{});
    m.splits.validation = s.value("validation", std::vector<std::string>{});
    m.splits.test = s.value("test", std::vector<std::string>{});
    if (j.contains("grammar")) m.grammar = grammar_from_json(j.at("grammar").dump());
  } catch (const json::exception& e) {
    throw ValidationError(std::string("manifest.json: ") + e.what());
  }
  return m;
}

Splits dataset_splits(const std::filesystem::path& dir, const Dataset& dataset) {
  if (std::filesystem::exists(dir / "manifest.json")) return read_manifest(dir / "manifest.json").splits;
  std::vector<std::string> ids;
  for (const auto& v : dataset.videos) ids.push_back(v.video_id);
  return default_splits(ids);
}

std::vector<FeatureSequence> select(const Dataset& dataset, const std::vector<std::string>& ids) {
  std::vector<FeatureSequence> out;
  for (const auto& id : ids) out.push_back(dataset.find(id));
  return out;
}

FeatureSequence import_external_features(std::istream& csv, const ImportOptions& options,
                                         const PhaseTaxonomy& taxonomy) {
  if (!(options.fps > 0) || !std::isfinite(options.fps)) throw UsageError("import: fps must be positive");
  const std::size_t stride = static_cast<std::size_t>(std::max<long long>(1, std::llround(options.fps)));
  FeatureSequence seq;
  seq.video_id = options.video_id;
  seq.fps = options.fps / static_cast<double>(stride);
  std::string line;
  std::size_t row = 0, frame = 0, width = 0;
  std::vector<float> values;
  while (std::getline(csv, line)) {
    ++row;
    if (row == 1 && options.header) continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    values.clear();
    std::string_view rest = line;
    while (true) {
      auto comma = rest.find(',');
      std::string_view cell = rest.substr(0, comma);
      while (!cell.empty() && cell.front() == ' ') cell.remove_prefix(1);
      while (!cell.empty() && cell.back() == ' ') cell.remove_suffix(1);
      float v = 0;
      auto r = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || r.ec != std::errc() || r.ptr != cell.data() + cell.size())
        throw ValidationError("import: non-numeric cell at row " + std::to_string(row));
      values.push_back(v);
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (width == 0) width = values.size();
    if (values.size() != width)
      throw ValidationError("import: ragged row " + std::to_string(row) + " (" + std::to_string(values.size()) +
                            " cells, expected " + std::to_string(width) + ")");
    if (frame++ % stride != 0) continue;
    if (options.label_column) {
      const float label = values.back();
      if (label < 0 || label != std::floor(label))
        throw ValidationError("import: label column is not a phase id at row " + std::to_string(row));
      seq.labels.push_back(static_cast<PhaseId>(label));
      values.pop_back();
    }
    seq.features.append_row(std::span<const float>(values));
  }
  if (options.label_column && width < 2) throw ValidationError("import: no feature columns");
  validate_sequence(seq, taxonomy);
  return seq;
}

}  // namespace phaseflow::data
