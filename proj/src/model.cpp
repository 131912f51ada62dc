#include "phaseflow/model.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "binary_io.hpp"
#include "phaseflow/error.hpp"

namespace phaseflow::model {

namespace {

std::shared_ptr<const ssm::TransitionMatrix> rounded(
    const std::shared_ptr<const ssm::TransitionMatrix>& t) {
  if (!t) return nullptr;
  return std::make_shared<const ssm::TransitionMatrix>(
      ssm::TransitionMatrix::from_float_rows(t->matrix().cast<float>()));
}

std::string format_float(float v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

SsmLstm::SsmLstm(ExperimentConfig config, PhaseTaxonomy taxonomy, nn::ModelParams<float> params,
                 std::shared_ptr<const ssm::TransitionMatrix> transition,
                 std::shared_ptr<const ssm::TransitionMatrix> reverse_transition)
    : config_(std::move(config)), taxonomy_(std::move(taxonomy)), params_(std::move(params)) {
  config_.validate();
  const std::size_t n = taxonomy_.size();
  transition_ = rounded(transition);
  reverse_transition_ = rounded(reverse_transition);
  if (config_.features.hmm && !transition_) throw UsageError("the hmm feature needs a transition matrix");
  if (config_.features.hmm && config_.acausal && !reverse_transition_)
    throw UsageError("acausal hmm feature needs a reverse transition matrix");
  const auto options = ssm::SsmOptions::from_config(config_);
  causal_ = ssm::SsmContext::make(n, options, transition_);
  acausal_ = ssm::SsmContext::make(n, options, config_.acausal ? reverse_transition_ : transition_);
  if (params_.input_dim != input_dim() || params_.hidden_dim != config_.hidden_dim ||
      params_.num_phases != n)
    throw ValidationError("model parameters do not match the configuration (input " +
                          std::to_string(params_.input_dim) + " vs " + std::to_string(input_dim()) +
                          ")");
}

SsmLstm SsmLstm::initialize(const ExperimentConfig& config, const PhaseTaxonomy& taxonomy,
                            std::shared_ptr<const ssm::TransitionMatrix> transition,
                            std::shared_ptr<const ssm::TransitionMatrix> reverse_transition) {
  const auto options = ssm::SsmOptions::from_config(config);
  const std::size_t s = ssm::SsmLayout::of(taxonomy.size(), options).total();
  const std::size_t in = config.embed_dim + s + (config.acausal ? s : 0);
  auto rng = make_rng(config.seed, "init");
  auto params = nn::ModelParams<float>::initialize(in, config.hidden_dim, taxonomy.size(), rng);
  return SsmLstm(config, taxonomy, std::move(params), std::move(transition),
                 std::move(reverse_transition));
}

void SsmLstm::assemble_input(std::span<const float> v, std::span<const double> statistic,
                             std::span<const double> future, std::span<float> out) const {
  if (v.size() != embed_dim())
    throw ValidationError("embedding has dimension " + std::to_string(v.size()) + ", expected " +
                          std::to_string(embed_dim()));
  if (statistic.size() != statistic_dim()) throw ValidationError("statistic dimension mismatch");
  if (!future.empty() && future.size() != acausal_dim())
    throw ValidationError("acausal statistic dimension mismatch");
  if (out.size() != input_dim()) throw ValidationError("input buffer dimension mismatch");
  auto it = std::copy(v.begin(), v.end(), out.begin());
  for (double x : statistic) *it++ = static_cast<float>(x);
  if (future.empty()) std::fill(it, out.end(), 0.0f);
  else
    for (double x : future) *it++ = static_cast<float>(x);
}

InferenceSession::InferenceSession(const SsmLstm& model)
    : model_(&model),
      lstm_(nn::LstmState<float>::zeros(model.config().hidden_dim)),
      ssm_(model.causal_context()),
      input_(model.input_dim(), 0.0f),
      probs_(model.num_phases()),
      probs_wide_(model.num_phases()) {
  stream_.probs = Matrix<double>(0, model.num_phases());
}

std::span<const float> InferenceSession::step(std::span<const float> v,
                                              std::span<const double> future) {
  if (stream_.complete) throw UsageError("InferenceSession: stream already finished");
  model_->assemble_input(v, ssm_.statistic(), future, input_);
  lstm_ = nn::lstm_step<float>(model_->params(), lstm_, input_);
  const auto logits = nn::head_forward<float>(model_->params(), lstm_.h);
  softmax_into<float>(logits, probs_);
  for (float p : probs_)
    if (!std::isfinite(p)) throw NumericError("non-finite phase probability at frame " + std::to_string(frame()));
  std::copy(probs_.begin(), probs_.end(), probs_wide_.begin());
  ssm_.update(probs_wide_);
  stream_.probs.append_row(std::span<const double>(probs_wide_));
  return probs_;
}

ssm::LikelihoodStream InferenceSession::finish() {
  stream_.complete = true;
  return stream_;
}

std::vector<PhaseId> argmax_labels(const Matrix<double>& probs) {
  std::vector<PhaseId> labels(probs.rows());
  for (std::size_t t = 0; t < probs.rows(); ++t)
    labels[t] = static_cast<PhaseId>(argmax_lowest<double>(probs.row(t)));
  return labels;
}

InferenceResult infer_video(const SsmLstm& model, const FeatureSequence& seq) {
  if (model.acausal()) throw UsageError("infer_video: model is acausal; use offline inference");
  validate_sequence(seq, model.taxonomy());
  InferenceSession session(model);
  for (std::size_t t = 0; t < seq.length(); ++t) session.step(seq.features.row(t));
  InferenceResult r;
  r.stream = session.finish();
  r.labels = argmax_labels(r.stream.probs);
  return r;
}

InferenceResult infer_video_acausal(const SsmLstm& model, const FeatureSequence& seq) {
  if (!model.acausal()) throw UsageError("infer_video_acausal: model was trained without acausal features");
  validate_sequence(seq, model.taxonomy());
  InferenceSession first(model);
  for (std::size_t t = 0; t < seq.length(); ++t) first.step(seq.features.row(t));
  const Matrix<double> future = ssm::acausal_feature_stream(first.finish(), model.acausal_context());

  InferenceSession second(model);
  for (std::size_t t = 0; t < seq.length(); ++t) second.step(seq.features.row(t), future.row(t));
  InferenceResult r;
  r.stream = second.finish();
  r.labels = argmax_labels(r.stream.probs);
  return r;
}

InferenceResult infer(const SsmLstm& model, const FeatureSequence& seq) {
  return model.acausal() ? infer_video_acausal(model, seq) : infer_video(model, seq);
}

std::vector<PhaseId> hmm_smooth_posthoc(const ssm::LikelihoodStream& stream,
                                        const ssm::TransitionMatrix& transition) {
  if (stream.probs.cols() != transition.size())
    throw ValidationError("hmm_smooth_posthoc: stream and transition matrix disagree on N");
  ssm::HmmFilter filter(std::make_shared<const ssm::TransitionMatrix>(transition));
  std::vector<PhaseId> out(stream.length());
  for (std::size_t t = 0; t < stream.length(); ++t)
    out[t] = static_cast<PhaseId>(argmax_lowest<double>(filter.update(stream.probs.row(t))));
  return out;
}

void write_predictions(std::ostream& os, const InferenceResult& result) {
  const std::size_t n = result.stream.probs.cols();
  os << "frame_idx,predicted_id";
  for (std::size_t i = 0; i < n; ++i) os << ",prob_" << i;
  os << '\n';
  for (std::size_t t = 0; t < result.labels.size(); ++t) {
    os << t << ',' << result.labels[t];
    for (double p : result.stream.probs.row(t)) os << ',' << format_float(static_cast<float>(p));
    os << '\n';
  }
}

PredictionTable read_predictions(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ValidationError("prediction file is empty");
  if (line.rfind("frame_idx,predicted_id", 0) != 0)
    throw ValidationError("prediction file: unexpected header");
  const std::size_t n = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) - 1;
  PredictionTable table;
  table.probs = Matrix<double>(0, n);
  std::vector<double> row(n);
  std::size_t row_no = 1;
  while (std::getline(is, line)) {
    ++row_no;
    if (line.empty()) continue;
    std::vector<std::string_view> cells;
    std::string_view rest = line;
    while (true) {
      auto comma = rest.find(',');
      cells.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (cells.size() != n + 2)
      throw ValidationError("prediction file: row " + std::to_string(row_no) + " has " +
                            std::to_string(cells.size()) + " cells");
    auto parse_u = [&](std::string_view c) {
      std::uint64_t v = 0;
      auto r = std::from_chars(c.data(), c.data() + c.size(), v);
      if (r.ec != std::errc() || r.ptr != c.data() + c.size())
        throw ValidationError("prediction file: non-numeric cell in row " + std::to_string(row_no));
      return v;
    };
    if (parse_u(cells[0]) != table.labels.size())
      throw ValidationError("prediction file: frame index out of sequence in row " + std::to_string(row_no));
    const auto label = parse_u(cells[1]);
    if (label >= n) throw ValidationError("prediction file: label out of range in row " + std::to_string(row_no));
    for (std::size_t i = 0; i < n; ++i) {
      auto c = cells[i + 2];
      auto r = std::from_chars(c.data(), c.data() + c.size(), row[i]);
      if (r.ec != std::errc() || r.ptr != c.data() + c.size())
        throw ValidationError("prediction file: non-numeric cell in row " + std::to_string(row_no));
    }
    table.labels.push_back(static_cast<PhaseId>(label));
    table.probs.append_row(std::span<const double>(row));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[4] = {'P', 'H', 'C', 'K'};

void write_block(std::ostream& os, const std::string& name, std::size_t rows, std::size_t cols,
                 std::span<const float> values) {
  detail::write_string(os, name);
  detail::write_u32(os, static_cast<std::uint32_t>(rows));
  detail::write_u32(os, static_cast<std::uint32_t>(cols));
  detail::write_f32(os, values);
}

}  // namespace

void save_checkpoint(std::ostream& os, const SsmLstm& model) {
  os.write(kCheckpointMagic, 4);
  detail::write_u32(os, kCheckpointVersion);
  detail::write_string(os, format_config(model.config()));
  detail::write_u32(os, static_cast<std::uint32_t>(model.taxonomy().size()));
  for (const auto& name : model.taxonomy().names()) detail::write_string(os, name);

  const auto& p = model.params();
  std::uint32_t count = 4 + (model.transition() ? 1 : 0) + (model.reverse_transition() ? 1 : 0);
  detail::write_u32(os, count);
  detail::write_u32(os, static_cast<std::uint32_t>(p.input_dim));
  write_block(os, "lstm.weight", p.lstm_weight.rows(), p.lstm_weight.cols(), p.lstm_weight.flat());
  write_block(os, "lstm.bias", 1, p.lstm_bias.size(), p.lstm_bias);
  write_block(os, "head.weight", p.head_weight.rows(), p.head_weight.cols(), p.head_weight.flat());
  write_block(os, "head.bias", 1, p.head_bias.size(), p.head_bias);
  auto write_transition = [&](const char* name, const ssm::TransitionMatrix& t) {
    const Matrix<float> f = t.matrix().cast<float>();
    write_block(os, name, f.rows(), f.cols(), f.flat());
  };
  if (model.transition()) write_transition("hmm.transition", *model.transition());
  if (model.reverse_transition()) write_transition("hmm.reverse_transition", *model.reverse_transition());
  if (!os) throw UsageError("failed writing checkpoint");
}

void save_checkpoint(const std::string& path, const SsmLstm& model) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw UsageError("cannot write checkpoint " + path);
  save_checkpoint(os, model);
}

SsmLstm load_checkpoint(std::istream& is) {
  char magic[4];
  detail::read_exact(is, magic, 4, "checkpoint magic");
  if (!std::equal(magic, magic + 4, kCheckpointMagic))
    throw FormatError(FormatErrorKind::kBadMagic, "not a checkpoint (bad magic)");
  const auto version = detail::read_u32(is, "checkpoint version");
  if (version != kCheckpointVersion)
    throw FormatError(FormatErrorKind::kBadVersion, "unsupported checkpoint version " + std::to_string(version));
  ExperimentConfig config;
  try {
    config = parse_config(detail::read_string(is, "config echo"));
  } catch (const UsageError& e) {
    throw FormatError(FormatErrorKind::kInconsistentHeader, std::string("checkpoint config: ") + e.what());
  }
  const auto ntax = detail::read_u32(is, "taxonomy size");
  if (ntax > 4096) throw FormatError(FormatErrorKind::kInconsistentHeader, "implausible taxonomy size");
  std::vector<std::string> names;
  for (std::uint32_t i = 0; i < ntax; ++i) names.push_back(detail::read_string(is, "phase name"));
  PhaseTaxonomy taxonomy(std::move(names));

  const auto count = detail::read_u32(is, "block count");
  const auto input_dim = detail::read_u32(is, "input dimension");
  auto params = nn::ModelParams<float>::zeros(input_dim, config.hidden_dim, taxonomy.size());
  std::shared_ptr<const ssm::TransitionMatrix> transition, reverse;
  for (std::uint32_t b = 0; b < count; ++b) {
    const std::string name = detail::read_string(is, "block name", 256);
    const auto rows = detail::read_u32(is, "block rows");
    const auto cols = detail::read_u32(is, "block cols");
    auto expect = [&](std::size_t r, std::size_t c) {
      if (rows != r || cols != c)
        throw FormatError(FormatErrorKind::kInconsistentHeader,
                          "checkpoint block " + name + " has shape " + std::to_string(rows) + "x" +
                              std::to_string(cols));
    };
    if (name == "lstm.weight") {
      expect(params.lstm_weight.rows(), params.lstm_weight.cols());
      detail::read_f32(is, params.lstm_weight.flat(), "lstm.weight");
    } else if (name == "lstm.bias") {
      expect(1, params.lstm_bias.size());
      detail::read_f32(is, params.lstm_bias, "lstm.bias");
    } else if (name == "head.weight") {
      expect(params.head_weight.rows(), params.head_weight.cols());
      detail::read_f32(is, params.head_weight.flat(), "head.weight");
    } else if (name == "head.bias") {
      expect(1, params.head_bias.size());
      detail::read_f32(is, params.head_bias, "head.bias");
    } else if (name == "hmm.transition" || name == "hmm.reverse_transition") {
      expect(taxonomy.size(), taxonomy.size());
      Matrix<float> a(rows, cols);
      detail::read_f32(is, a.flat(), name.c_str());
      auto t = std::make_shared<const ssm::TransitionMatrix>(ssm::TransitionMatrix::from_float_rows(a));
      (name == "hmm.transition" ? transition : reverse) = std::move(t);
    } else {
      throw FormatError(FormatErrorKind::kInconsistentHeader, "unknown checkpoint block " + name);
    }
  }
  if (!params.all_finite()) throw ValidationError("checkpoint holds non-finite parameters");
  return SsmLstm(std::move(config), std::move(taxonomy), std::move(params), std::move(transition),
                 std::move(reverse));
}

SsmLstm load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open checkpoint " + path);
  return load_checkpoint(is);
}

}  // namespace phaseflow::model
