#include "phaseflow/eval.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "phaseflow/error.hpp"

namespace phaseflow::eval {

using json = nlohmann::ordered_json;

namespace {

void check_pair(std::span<const PhaseId> gt, std::span<const PhaseId> pred) {
  if (gt.size() != pred.size())
    throw ValidationError("ground truth has " + std::to_string(gt.size()) + " frames, prediction " +
                          std::to_string(pred.size()));
}

std::optional<double> ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

double harmonic(double a, double b) { return a + b > 0 ? 2 * a * b / (a + b) : 0.0; }

}  // namespace

std::vector<Segment> extract_segments(std::span<const PhaseId> labels) {
  std::vector<Segment> out;
  for (std::size_t t = 0; t < labels.size(); ++t) {
    if (out.empty() || out.back().phase != labels[t]) out.push_back({labels[t], t, t});
    else out.back().end = t;
  }
  return out;
}

Confusion confusion_matrix(std::span<const PhaseId> gt, std::span<const PhaseId> pred, std::size_t n) {
  check_pair(gt, pred);
  Confusion c(n, n, 0);
  for (std::size_t t = 0; t < gt.size(); ++t) {
    if (gt[t] >= n || pred[t] >= n)
      throw ValidationError("label out of range at frame " + std::to_string(t));
    ++c(gt[t], pred[t]);
  }
  return c;
}

FrameMetrics metrics_from_confusion(const Confusion& c) {
  const std::size_t n = c.rows();
  FrameMetrics m;
  m.confusion = c;
  m.per_phase.resize(n);
  std::uint64_t trace = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = m.per_phase[i];
    for (std::size_t j = 0; j < n; ++j) {
      s.support += c(i, j);
      s.predicted += c(j, i);
      m.frames += c(i, j);
    }
    s.true_positives = c(i, i);
    trace += c(i, i);
    s.precision = ratio(s.true_positives, s.predicted).value_or(0.0);
    s.recall = ratio(s.true_positives, s.support).value_or(0.0);
    s.f1 = harmonic(s.precision, s.recall);
  }
  m.accuracy = ratio(trace, m.frames).value_or(0.0);
  std::size_t present = 0;
  for (const auto& s : m.per_phase) {
    if (!s.present()) continue;
    ++present;
    m.precision += s.precision;
    m.recall += s.recall;
    m.mean_phase_f1 += s.f1;
  }
  if (present > 0) {
    m.precision /= static_cast<double>(present);
    m.recall /= static_cast<double>(present);
    m.mean_phase_f1 /= static_cast<double>(present);
  }
  m.f1 = harmonic(m.precision, m.recall);
  return m;
}

FrameMetrics frame_metrics(std::span<const PhaseId> gt, std::span<const PhaseId> pred, std::size_t n) {
  return metrics_from_confusion(confusion_matrix(gt, pred, n));
}

std::optional<double> subset_accuracy(const Confusion& c, std::span<const PhaseId> phases) {
  std::uint64_t total = 0, correct = 0;
  for (PhaseId p : phases) {
    if (p >= c.rows()) continue;
    for (std::size_t j = 0; j < c.cols(); ++j) total += c(p, j);
    correct += c(p, p);
  }
  return ratio(correct, total);
}

std::size_t bucket_of(std::size_t len) noexcept {
  if (len <= 3) return 0;
  if (len <= 10) return 1;
  if (len <= 30) return 2;
  if (len <= 60) return 3;
  return 4;
}

std::optional<double> BucketStats::accuracy(std::size_t b) const { return ratio(correct.at(b), frames.at(b)); }

BucketStats& BucketStats::operator+=(const BucketStats& o) {
  for (std::size_t b = 0; b < kNumBuckets; ++b) {
    frames[b] += o.frames[b];
    correct[b] += o.correct[b];
  }
  return *this;
}

BucketStats bucket_accuracy(std::span<const PhaseId> gt, std::span<const PhaseId> pred) {
  check_pair(gt, pred);
  BucketStats s;
  for (const auto& seg : extract_segments(gt)) {
    const std::size_t b = bucket_of(seg.length());
    s.frames[b] += seg.length();
    for (std::size_t t = seg.start; t <= seg.end; ++t) s.correct[b] += pred[t] == gt[t];
  }
  return s;
}

std::optional<double> TransitionStats::gt_rate() const { return ratio(matched, gt_transitions); }
std::optional<double> TransitionStats::pred_rate() const { return ratio(matched, pred_transitions); }

TransitionStats& TransitionStats::operator+=(const TransitionStats& o) {
  gt_transitions += o.gt_transitions;
  pred_transitions += o.pred_transitions;
  matched += o.matched;
  return *this;
}

TransitionStats transition_accuracy(std::span<const PhaseId> gt, std::span<const PhaseId> pred,
                                    std::size_t window) {
  check_pair(gt, pred);
  auto transitions = [](std::span<const PhaseId> labels) {
    std::vector<std::size_t> at;
    for (std::size_t t = 1; t < labels.size(); ++t)
      if (labels[t] != labels[t - 1]) at.push_back(t);
    return at;
  };
  const auto g = transitions(gt);
  const auto p = transitions(pred);
  std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> candidates;  // distance, gt time, pred time
  std::size_t lo = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    while (lo < p.size() && p[lo] + window < g[i]) ++lo;
    for (std::size_t j = lo; j < p.size() && p[j] <= g[i] + window; ++j)
      if (pred[p[j]] == gt[g[i]]) candidates.emplace_back(g[i] > p[j] ? g[i] - p[j] : p[j] - g[i], i, j);
  }
  std::sort(candidates.begin(), candidates.end());
  std::vector<char> used_g(g.size(), 0), used_p(p.size(), 0);
  TransitionStats s;
  s.gt_transitions = g.size();
  s.pred_transitions = p.size();
  for (auto [d, i, j] : candidates) {
    if (used_g[i] || used_p[j]) continue;
    used_g[i] = used_p[j] = 1;
    ++s.matched;
  }
  return s;
}

std::optional<double> MidpointStats::rate() const { return ratio(correct, segments); }

MidpointStats& MidpointStats::operator+=(const MidpointStats& o) {
  segments += o.segments;
  correct += o.correct;
  return *this;
}

MidpointStats midpoint_accuracy(std::span<const PhaseId> gt, std::span<const PhaseId> pred) {
  check_pair(gt, pred);
  MidpointStats s;
  for (const auto& seg : extract_segments(gt)) {
    ++s.segments;
    s.correct += pred[(seg.start + seg.end) / 2] == seg.phase;
  }
  return s;
}

LengthCurve& LengthCurve::operator+=(const LengthCurve& o) {
  const std::size_t n = std::max(segments.size(), o.segments.size());
  segments.resize(n, 0);
  frames.resize(n, 0);
  correct.resize(n, 0);
  for (std::size_t k = 0; k < o.segments.size(); ++k) {
    segments[k] += o.segments[k];
    frames[k] += o.frames[k];
    correct[k] += o.correct[k];
  }
  return *this;
}

LengthCurve length_curve(std::span<const PhaseId> gt, std::span<const PhaseId> pred) {
  check_pair(gt, pred);
  LengthCurve c;
  for (const auto& seg : extract_segments(gt)) {
    const std::size_t k = static_cast<std::size_t>(std::bit_width(seg.length())) - 1;
    if (c.segments.size() <= k) {
      c.segments.resize(k + 1, 0);
      c.frames.resize(k + 1, 0);
      c.correct.resize(k + 1, 0);
    }
    ++c.segments[k];
    c.frames[k] += seg.length();
    for (std::size_t t = seg.start; t <= seg.end; ++t) c.correct[k] += pred[t] == gt[t];
  }
  return c;
}

VideoReport evaluate_video(std::string video_id, std::span<const PhaseId> gt, std::span<const PhaseId> pred,
                           std::size_t num_phases, std::size_t window) {
  VideoReport r;
  r.video_id = std::move(video_id);
  r.frame = frame_metrics(gt, pred, num_phases);
  r.buckets = bucket_accuracy(gt, pred);
  r.transitions = transition_accuracy(gt, pred, window);
  r.midpoints = midpoint_accuracy(gt, pred);
  r.curve = length_curve(gt, pred);
  return r;
}

DatasetReport aggregate(const PhaseTaxonomy& taxonomy, std::vector<VideoReport> videos) {
  std::sort(videos.begin(), videos.end(), [](const auto& a, const auto& b) { return a.video_id < b.video_id; });
  DatasetReport d;
  d.taxonomy = taxonomy;
  Confusion pooled(taxonomy.size(), taxonomy.size(), 0);
  for (const auto& v : videos) {
    if (v.frame.confusion.rows() != taxonomy.size())
      throw ValidationError("video '" + v.video_id + "' was scored with a different taxonomy");
    for (std::size_t i = 0; i < pooled.size(); ++i) pooled.flat()[i] += v.frame.confusion.flat()[i];
    d.buckets += v.buckets;
    d.transitions += v.transitions;
    d.midpoints += v.midpoints;
    d.curve += v.curve;
  }
  d.frame = metrics_from_confusion(pooled);
  d.videos = std::move(videos);
  return d;
}

std::optional<double> short_bucket_accuracy(const BucketStats& buckets) {
  double sum = 0;
  int count = 0;
  for (std::size_t b = 0; b <= 2; ++b)
    if (auto a = buckets.accuracy(b)) {
      sum += *a;
      ++count;
    }
  if (count == 0) return std::nullopt;
  return sum / count;
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

json opt(std::optional<double> v) { return v ? json(*v) : json(nullptr); }

json frame_json(const FrameMetrics& m, const PhaseTaxonomy& tax, bool empty) {
  json j;
  j["frames"] = m.frames;
  j["accuracy"] = empty ? json(nullptr) : json(m.accuracy);
  j["precision"] = empty ? json(nullptr) : json(m.precision);
  j["recall"] = empty ? json(nullptr) : json(m.recall);
  j["f1"] = empty ? json(nullptr) : json(m.f1);
  j["mean_phase_f1"] = empty ? json(nullptr) : json(m.mean_phase_f1);
  j["per_phase"] = json::array();
  for (std::size_t i = 0; i < m.per_phase.size(); ++i) {
    const auto& s = m.per_phase[i];
    json p;
    p["id"] = i;
    p["name"] = tax.name(static_cast<PhaseId>(i));
    p["support"] = s.support;
    p["predicted"] = s.predicted;
    p["precision"] = s.present() ? json(s.precision) : json(nullptr);
    p["recall"] = s.present() ? json(s.recall) : json(nullptr);
    p["f1"] = s.present() ? json(s.f1) : json(nullptr);
    j["per_phase"].push_back(p);
  }
  return j;
}

json stats_json(const BucketStats& b, const TransitionStats& t, const MidpointStats& m) {
  json j;
  j["buckets"] = json::array();
  for (std::size_t k = 0; k < kNumBuckets; ++k)
    j["buckets"].push_back({{"bucket", kBucketNames[k]}, {"frames", b.frames[k]}, {"accuracy", opt(b.accuracy(k))}});
  j["short_bucket_accuracy"] = opt(short_bucket_accuracy(b));
  j["transitions"] = {{"gt_transitions", t.gt_transitions},
                      {"pred_transitions", t.pred_transitions},
                      {"matched", t.matched},
                      {"accuracy", opt(t.gt_rate())},
                      {"pred_anchored_accuracy", opt(t.pred_rate())}};
  j["midpoints"] = {{"segments", m.segments}, {"correct", m.correct}, {"accuracy", opt(m.rate())}};
  return j;
}

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
                          "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31", "#843c39"};

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw UsageError("cannot write " + path.string());
  os << text;
  if (!os) throw UsageError("failed writing " + path.string());
}

}  // namespace

std::string metrics_json(const DatasetReport& r) {
  json j;
  j["schema_version"] = 1;
  j["taxonomy"] = r.taxonomy.names();
  j["videos_evaluated"] = r.videos.size();
  json d = frame_json(r.frame, r.taxonomy, r.empty());
  const json stats = stats_json(r.buckets, r.transitions, r.midpoints);
  for (auto& [k, v] : stats.items()) d[k] = v;
  j["dataset"] = d;
  j["videos"] = json::array();
  for (const auto& v : r.videos) {
    json e;
    e["video_id"] = v.video_id;
    e["frames"] = v.frame.frames;
    e["accuracy"] = v.frame.accuracy;
    e["precision"] = v.frame.precision;
    e["recall"] = v.frame.recall;
    e["f1"] = v.frame.f1;
    const json stats = stats_json(v.buckets, v.transitions, v.midpoints);
    for (auto& [k, val] : stats.items()) e[k] = val;
    j["videos"].push_back(e);
  }
  return j.dump(2) + "\n";
}

std::string confusion_csv(const DatasetReport& r) {
  std::ostringstream os;
  os << "gt\\pred";
  for (const auto& name : r.taxonomy.names()) os << ',' << name;
  os << '\n';
  for (std::size_t i = 0; i < r.taxonomy.size(); ++i) {
    os << r.taxonomy.name(static_cast<PhaseId>(i));
    for (std::size_t j = 0; j < r.taxonomy.size(); ++j) os << ',' << r.frame.confusion(i, j);
    os << '\n';
  }
  return os.str();
}

std::string curve_csv(const DatasetReport& r) {
  std::ostringstream os;
  os << "min_length,max_length,segments,frames,accuracy\n";
  for (std::size_t k = 0; k < r.curve.segments.size(); ++k) {
    os << (std::size_t{1} << k) << ',' << ((std::size_t{2} << k) - 1) << ',' << r.curve.segments[k] << ','
       << r.curve.frames[k] << ',';
    if (auto a = ratio(r.curve.correct[k], r.curve.frames[k])) os << format_real(*a);
    os << '\n';
  }
  return os.str();
}

std::string timeline_svg(const Timeline& tl, const PhaseTaxonomy& tax) {
  if (tl.gt.size() != tl.pred.size() || tl.confidence.size() != tl.pred.size())
    throw ValidationError("timeline: ground truth, prediction and confidence lengths differ");
  const double width = 1000.0, row_h = 24.0, label_w = 60.0;
  const double scale = tl.gt.empty() ? 1.0 : width / static_cast<double>(tl.gt.size());
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << format_real(label_w + width) << "\" height=\""
     << format_real(3 * row_h) << "\">\n";
  os << "<title>" << xml_escape(tl.video_id) << "</title>\n";
  os << "<text x=\"2\" y=\"16\" font-size=\"12\">truth</text>\n";
  os << "<text x=\"2\" y=\"" << format_real(row_h + 16) << "\" font-size=\"12\">model</text>\n";
  auto rect = [&](const Segment& s, double y, double opacity) {
    os << "<rect x=\"" << format_real(label_w + s.start * scale) << "\" y=\"" << format_real(y) << "\" width=\""
       << format_real(s.length() * scale) << "\" height=\"" << format_real(row_h - 4) << "\" fill=\""
       << kPalette[s.phase % std::size(kPalette)] << "\" fill-opacity=\"" << format_real(opacity) << "\"><title>"
       << xml_escape(tax.contains(s.phase) ? tax.name(s.phase) : std::to_string(s.phase)) << " ["
       << s.start << "-" << s.end << "]</title></rect>\n";
  };
  for (const auto& s : extract_segments(tl.gt)) rect(s, 2, 1.0);
  for (const auto& s : extract_segments(tl.pred)) {
    double sum = 0;
    for (std::size_t t = s.start; t <= s.end; ++t) sum += tl.confidence[t];
    rect(s, row_h + 2, sum / static_cast<double>(s.length()));
  }
  os << "</svg>\n";
  return os.str();
}

void render_report(const std::filesystem::path& dir, const DatasetReport& report,
                   const std::vector<Timeline>& timelines) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw UsageError("cannot create output directory " + dir.string());
  write_file(dir / "metrics.json", metrics_json(report));
  write_file(dir / "confusion.csv", confusion_csv(report));
  write_file(dir / "length_curve.csv", curve_csv(report));
  if (timelines.empty()) return;
  std::filesystem::create_directories(dir / "timelines", ec);
  if (ec) throw UsageError("cannot create " + (dir / "timelines").string());
  for (const auto& tl : timelines) write_file(dir / "timelines" / (tl.video_id + ".svg"), timeline_svg(tl, report.taxonomy));
}

}  // namespace phaseflow::eval
