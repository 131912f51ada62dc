#include "phaseflow/core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>
#include <sstream>

#include "phaseflow/error.hpp"

namespace phaseflow {

PhaseTaxonomy::PhaseTaxonomy(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.size() < 2) throw ValidationError("taxonomy needs at least 2 phases");
  std::set<std::string> seen;
  for (const auto& n : names_) {
    if (n.empty()) throw ValidationError("taxonomy phase names must be non-empty");
    if (!seen.insert(n).second) throw ValidationError("duplicate phase name '" + n + "'");
  }
}

PhaseTaxonomy PhaseTaxonomy::mgh100() {
  return PhaseTaxonomy({"Port placement", "Fundus retraction", "Release GB peritoneum",
                        "Dissection of Calot's triangle", "Checkpoint 1", "Clip Cystic Artery",
                        "Divide Cystic Artery", "Clip Cystic Duct", "Divide Cystic Duct",
                        "Checkpoint 2", "Remove GB from liver bed", "Bagging", "Other step"});
}

PhaseTaxonomy PhaseTaxonomy::cholec80() {
  return PhaseTaxonomy({"Preparation", "Calot Triangle Dissection", "Clipping and Cutting",
                        "Gallbladder Dissection", "Gallbladder Packaging",
                        "Cleaning and Coagulation", "Gallbladder Retraction"});
}

const FeatureSequence& validate_sequence(const FeatureSequence& seq, const PhaseTaxonomy& tax) {
  const std::string where = "video '" + seq.video_id + "': ";
  if (seq.length() == 0) throw ValidationError(where + "sequence has no frames");
  if (seq.dim() == 0) throw ValidationError(where + "feature dimension is 0");
  if (!(seq.fps > 0.0) || !std::isfinite(seq.fps)) throw ValidationError(where + "fps must be positive");
  if (seq.features.size() != seq.length() * seq.dim())
    throw ValidationError(where + "dimension mismatch in feature payload");
  if (seq.has_labels() && seq.labels.size() != seq.length())
    throw ValidationError(where + "dimension mismatch: " + std::to_string(seq.labels.size()) +
                          " labels for " + std::to_string(seq.length()) + " frames");
  for (std::size_t t = 0; t < seq.length(); ++t) {
    for (float v : seq.features.row(t))
      if (!std::isfinite(v))
        throw ValidationError(where + "non-finite feature value at frame " + std::to_string(t));
    if (seq.has_labels() && !tax.contains(seq.labels[t]))
      throw ValidationError(where + "label out of range at frame " + std::to_string(t) + " (" +
                            std::to_string(seq.labels[t]) + " >= " + std::to_string(tax.size()) + ")");
  }
  return seq;
}

ProbVector::ProbVector(std::vector<double> p) : p_(std::move(p)) {
  if (p_.empty()) throw ValidationError("empty probability vector");
  double sum = 0.0;
  for (double v : p_) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("probability entry outside [0,1]");
    sum += v;
  }
  if (std::abs(sum - 1.0) > kTolerance) throw ValidationError("probabilities do not sum to 1");
}

template <typename T>
void softmax_into(std::span<const T> logits, std::span<T> out) {
  T hi = logits[0];
  for (T v : logits) hi = std::max(hi, v);
  T sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - hi);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
}

template void softmax_into<float>(std::span<const float>, std::span<float>);
template void softmax_into<double>(std::span<const double>, std::span<double>);

template <typename T>
ProbVector ProbVector::softmax(std::span<const T> logits) {
  if (logits.empty()) throw ValidationError("softmax of empty logits");
  std::vector<double> p(logits.size());
  std::vector<double> in(logits.begin(), logits.end());
  for (double v : in)
    if (!std::isfinite(v)) throw NumericError("softmax of non-finite logit");
  softmax_into<double>(in, p);
  return ProbVector(std::move(p), Unchecked{});
}

template ProbVector ProbVector::softmax<float>(std::span<const float>);
template ProbVector ProbVector::softmax<double>(std::span<const double>);

PhaseId ProbVector::argmax() const noexcept {
  return static_cast<PhaseId>(argmax_lowest<double>(p_));
}

FeatureSet FeatureSet::parse(std::string_view text) {
  FeatureSet fs;
  if (text == "none" || text.empty()) return fs;
  if (text == "all") return all();
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto comma = text.find(',', pos);
    if (comma == std::string_view::npos) comma = text.size();
    auto item = text.substr(pos, comma - pos);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    if (item == "csl") fs.csl = true;
    else if (item == "gabor") fs.gabor = true;
    else if (item == "hmm") fs.hmm = true;
    else throw UsageError("unknown feature '" + std::string(item) + "' (expected csl, gabor, hmm)");
    pos = comma + 1;
  }
  return fs;
}

std::string FeatureSet::to_string() const {
  std::string out;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += ',';
    out += name;
  };
  add(csl, "csl");
  add(gabor, "gabor");
  add(hmm, "hmm");
  return out.empty() ? "none" : out;
}

void ExperimentConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw UsageError(std::string("config: ") + what);
  };
  require(hidden_dim > 0, "hidden_dim must be positive");
  require(seq_len_bptt > 0, "seq_len_bptt must be positive");
  require(batch_size > 0, "batch_size must be positive");
  require(learning_rate > 0 && std::isfinite(learning_rate), "learning_rate must be positive");
  require(embed_dim > 0, "embed_dim must be positive");
  require(proximal_weight >= 0 && std::isfinite(proximal_weight), "proximal_weight must be >= 0");
  require(gabor_scales > 0, "gabor_scales must be positive");
  require(gabor_sigma_min > 0 && gabor_sigma_max >= gabor_sigma_min, "gabor sigma range invalid");
  require(gabor_wavelength_factor > 0, "gabor_wavelength_factor must be positive");
  require(transition_smoothing > 0, "transition_smoothing must be positive");
  require(grad_clip_norm > 0, "grad_clip_norm must be positive");
  for (double l : csl_levels) require(l > 0 && l <= 1, "csl_levels must lie in (0,1]");
  require(std::is_sorted(csl_levels.begin(), csl_levels.end()), "csl_levels must be ascending");
  require(!acausal || !features.empty(), "acausal mode needs at least one feature");
}

std::string format_real(double value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, end);
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

double parse_real(std::string_view key, std::string_view v) {
  double out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw UsageError("config: '" + std::string(key) + "' expects a number, got '" + std::string(v) + "'");
  return out;
}

std::uint64_t parse_uint(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw UsageError("config: '" + std::string(key) + "' expects a non-negative integer, got '" +
                     std::string(v) + "'");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw UsageError("config: '" + std::string(key) + "' expects true/false");
}

}  // namespace

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig c;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    auto line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw UsageError("config line " + std::to_string(line_no) + ": expected key = value");
    auto key = trim(line.substr(0, eq));
    auto val = trim(line.substr(eq + 1));
    if (key == "hidden_dim") c.hidden_dim = parse_uint(key, val);
    else if (key == "seq_len_bptt") c.seq_len_bptt = parse_uint(key, val);
    else if (key == "batch_size") c.batch_size = parse_uint(key, val);
    else if (key == "learning_rate") c.learning_rate = parse_real(key, val);
    else if (key == "epochs") c.epochs = parse_uint(key, val);
    else if (key == "embed_dim") c.embed_dim = parse_uint(key, val);
    else if (key == "features") c.features = FeatureSet::parse(val);
    else if (key == "acausal") c.acausal = parse_bool(key, val);
    else if (key == "proximal_weight") c.proximal_weight = parse_real(key, val);
    else if (key == "seed") c.seed = parse_uint(key, val);
    else if (key == "csl_levels") {
      c.csl_levels.clear();
      std::size_t p = 0;
      while (p <= val.size()) {
        auto comma = val.find(',', p);
        if (comma == std::string_view::npos) comma = val.size();
        auto item = trim(val.substr(p, comma - p));
        if (!item.empty()) c.csl_levels.push_back(parse_real(key, item));
        p = comma + 1;
      }
    } else if (key == "gabor_scales") c.gabor_scales = parse_uint(key, val);
    else if (key == "gabor_sigma_min") c.gabor_sigma_min = parse_real(key, val);
    else if (key == "gabor_sigma_max") c.gabor_sigma_max = parse_real(key, val);
    else if (key == "gabor_wavelength_factor") c.gabor_wavelength_factor = parse_real(key, val);
    else if (key == "transition_smoothing") c.transition_smoothing = parse_real(key, val);
    else if (key == "grad_clip_norm") c.grad_clip_norm = parse_real(key, val);
    else throw UsageError("config line " + std::to_string(line_no) + ": unknown key '" + std::string(key) + "'");
  }
  c.validate();
  return c;
}

std::string format_config(const ExperimentConfig& c) {
  std::ostringstream os;
  os << "hidden_dim = " << c.hidden_dim << '\n'
     << "seq_len_bptt = " << c.seq_len_bptt << '\n'
     << "batch_size = " << c.batch_size << '\n'
     << "learning_rate = " << format_real(c.learning_rate) << '\n'
     << "epochs = " << c.epochs << '\n'
     << "embed_dim = " << c.embed_dim << '\n'
     << "features = " << c.features.to_string() << '\n'
     << "acausal = " << (c.acausal ? "true" : "false") << '\n'
     << "proximal_weight = " << format_real(c.proximal_weight) << '\n'
     << "seed = " << c.seed << '\n'
     << "csl_levels = ";
  for (std::size_t i = 0; i < c.csl_levels.size(); ++i)
    os << (i ? "," : "") << format_real(c.csl_levels[i]);
  os << '\n'
     << "gabor_scales = " << c.gabor_scales << '\n'
     << "gabor_sigma_min = " << format_real(c.gabor_sigma_min) << '\n'
     << "gabor_sigma_max = " << format_real(c.gabor_sigma_max) << '\n'
     << "gabor_wavelength_factor = " << format_real(c.gabor_wavelength_factor) << '\n'
     << "transition_smoothing = " << format_real(c.transition_smoothing) << '\n'
     << "grad_clip_norm = " << format_real(c.grad_clip_norm) << '\n';
  return os.str();
}

std::mt19937_64 make_rng(std::uint64_t seed, std::string_view stream) {
  // FNV-1a over the stream name keeps sub-streams stable across builds.
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : stream) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace phaseflow
