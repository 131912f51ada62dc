#include "phaseflow/ssm.hpp"

#include <cmath>
#include <numbers>
#include <ostream>

#include "phaseflow/error.hpp"

namespace phaseflow::ssm {

// ---------------------------------------------------------------------------
// CSL

CslAccumulator::CslAccumulator(std::size_t num_phases, std::vector<double> levels)
    : num_phases_(num_phases),
      levels_(std::move(levels)),
      counts_(num_phases * (levels_.size() + 1), 0) {}

void CslAccumulator::update(std::span<const double> m) {
  if (m.size() != num_phases_) throw ValidationError("csl_update: likelihood has wrong dimension");
  const std::size_t width = levels_.size() + 1;
  for (std::size_t n = 0; n < num_phases_; ++n)
    for (std::size_t l = 0; l < levels_.size(); ++l)
      if (m[n] >= levels_[l]) ++counts_[n * width + l];
  ++counts_[argmax_lowest(m) * width + levels_.size()];
  ++frames_;
}

void CslAccumulator::feature(std::span<double> out) const {
  for (std::size_t i = 0; i < counts_.size(); ++i)
    out[i] = std::log(static_cast<double>(counts_[i]) + 1.0);
}

// ---------------------------------------------------------------------------
// Gabor

GaborBank::GaborBank(GaborOptions options, KernelSupport support)
    : options_(options), support_(support) {
  if (options_.num_scales == 0) throw UsageError("GaborBank: need at least one scale");
  if (!(options_.sigma_min > 0) || options_.sigma_max < options_.sigma_min)
    throw UsageError("GaborBank: invalid sigma range");
  for (std::size_t s = 0; s < options_.num_scales; ++s) {
    GaborKernel k;
    k.sigma = options_.num_scales == 1
                  ? options_.sigma_min
                  : options_.sigma_min + (options_.sigma_max - options_.sigma_min) *
                                             static_cast<double>(s) /
                                             static_cast<double>(options_.num_scales - 1);
    k.omega = 2.0 * std::numbers::pi / (options_.wavelength_factor * k.sigma);
    const int reach = static_cast<int>(std::floor(options_.support_sigmas * k.sigma));
    k.u_min = -reach;
    k.u_max = support == KernelSupport::kCausal ? 0 : reach;
    double norm = 0;
    for (int u = k.u_min; u <= k.u_max; ++u)
      norm += std::exp(-static_cast<double>(u) * u / (2.0 * k.sigma * k.sigma));
    for (int u = k.u_min; u <= k.u_max; ++u) {
      const double g = std::exp(-static_cast<double>(u) * u / (2.0 * k.sigma * k.sigma)) / norm;
      k.re.push_back(g * std::cos(k.omega * u));
      k.im.push_back(g * std::sin(k.omega * u));
    }
    history_ = std::max(history_, static_cast<std::size_t>(reach) + 1);
    kernels_.push_back(std::move(k));
  }
}

GaborFilter::GaborFilter(std::shared_ptr<const GaborBank> bank, std::size_t channels)
    : bank_(std::move(bank)), channels_(channels) {
  if (!bank_) throw UsageError("GaborFilter: no bank");
  if (bank_->support() != KernelSupport::kCausal)
    throw UsageError("GaborFilter: streaming filtering needs causal kernels");
  capacity_ = bank_->history();
  ring_.assign(capacity_ * channels_, 0.0);
  feature_.assign(channels_ * bank_->num_scales(), 0.0);
}

void GaborFilter::update(std::span<const double> m) {
  if (m.size() != channels_) throw ValidationError("gabor_update: likelihood has wrong dimension");
  head_ = filled_ == 0 ? 0 : (head_ + 1) % capacity_;
  std::copy(m.begin(), m.end(), ring_.begin() + head_ * channels_);
  filled_ = std::min(filled_ + 1, capacity_);

  const std::size_t scales = bank_->num_scales();
  std::vector<double> re(channels_), im(channels_);
  for (std::size_t s = 0; s < scales; ++s) {
    const GaborKernel& k = bank_->kernel(s);
    std::fill(re.begin(), re.end(), 0.0);
    std::fill(im.begin(), im.end(), 0.0);
    const std::size_t lags = std::min(k.taps(), filled_);
    for (std::size_t lag = 0; lag < lags; ++lag) {
      const std::size_t tap = static_cast<std::size_t>(-k.u_min) - lag;  // u = -lag
      const double* x = ring_.data() + ((head_ + capacity_ - lag) % capacity_) * channels_;
      const double kr = k.re[tap], ki = k.im[tap];
      for (std::size_t n = 0; n < channels_; ++n) {
        re[n] += kr * x[n];
        im[n] += ki * x[n];
      }
    }
    for (std::size_t n = 0; n < channels_; ++n)
      feature_[n * scales + s] = std::sqrt(re[n] * re[n] + im[n] * im[n]);
  }
}

Matrix<double> gabor_filter_batch(const Matrix<double>& signal, const GaborBank& bank) {
  const std::size_t T = signal.rows(), C = signal.cols(), S = bank.num_scales();
  Matrix<double> out(T, C * S);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      const GaborKernel& k = bank.kernel(s);
      for (std::size_t n = 0; n < C; ++n) {
        double re = 0, im = 0;
        for (int u = k.u_min; u <= k.u_max; ++u) {
          const long idx = static_cast<long>(t) + u;
          if (idx < 0 || idx >= static_cast<long>(T)) continue;
          re += k.re[u - k.u_min] * signal(idx, n);
          im += k.im[u - k.u_min] * signal(idx, n);
        }
        out(t, n * S + s) = std::sqrt(re * re + im * im);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// HMM

namespace {

constexpr double kRowTolerance = 1e-9;

TransitionMatrix estimate_impl(std::span<const std::vector<PhaseId>> sequences, std::size_t n,
                               double smoothing, bool reversed) {
  if (sequences.empty()) throw ValidationError("estimate_transition_matrix: no label sequences");
  if (!(smoothing > 0)) throw UsageError("estimate_transition_matrix: smoothing must be positive");
  if (n < 2) throw ValidationError("estimate_transition_matrix: need at least 2 phases");
  Matrix<double> counts(n, n, 0.0);
  for (const auto& seq : sequences) {
    for (std::size_t t = 0; t < seq.size(); ++t)
      if (seq[t] >= n)
        throw ValidationError("estimate_transition_matrix: label out of range at frame " +
                              std::to_string(t));
    for (std::size_t t = 1; t < seq.size(); ++t) {
      if (reversed) counts(seq[t], seq[t - 1]) += 1.0;
      else counts(seq[t - 1], seq[t]) += 1.0;
    }
  }
  Matrix<double> a(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0;
    for (std::size_t j = 0; j < n; ++j) total += counts(i, j) + smoothing;
    for (std::size_t j = 0; j < n; ++j) a(i, j) = (counts(i, j) + smoothing) / total;
  }
  return TransitionMatrix::from_rows(std::move(a));
}

}  // namespace

TransitionMatrix TransitionMatrix::estimate(std::span<const std::vector<PhaseId>> sequences,
                                            std::size_t num_phases, double smoothing) {
  TransitionMatrix tm = estimate_impl(sequences, num_phases, smoothing, false);
  tm.video_count_ = sequences.size();
  tm.smoothing_ = smoothing;
  return tm;
}

TransitionMatrix TransitionMatrix::estimate_reversed(std::span<const std::vector<PhaseId>> sequences,
                                                     std::size_t num_phases, double smoothing) {
  TransitionMatrix tm = estimate_impl(sequences, num_phases, smoothing, true);
  tm.video_count_ = sequences.size();
  tm.smoothing_ = smoothing;
  return tm;
}

TransitionMatrix TransitionMatrix::from_rows(Matrix<double> a) {
  if (a.rows() != a.cols() || a.rows() < 2)
    throw ValidationError("transition matrix must be square with N >= 2");
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double sum = 0;
    for (double v : a.row(i)) {
      if (!(v >= 0) || !std::isfinite(v)) throw ValidationError("transition matrix entries must be >= 0");
      sum += v;
    }
    if (std::abs(sum - 1.0) > kRowTolerance)
      throw ValidationError("transition matrix row " + std::to_string(i) + " does not sum to 1");
  }
  TransitionMatrix tm;
  tm.a_ = std::move(a);
  return tm;
}

TransitionMatrix TransitionMatrix::from_float_rows(const Matrix<float>& a) {
  Matrix<double> d = a.cast<double>();
  for (std::size_t i = 0; i < d.rows(); ++i) {
    double sum = 0;
    for (double v : d.row(i)) sum += v;
    if (!(sum > 0)) throw ValidationError("transition matrix row " + std::to_string(i) + " is empty");
    for (double& v : d.row(i)) v /= sum;
  }
  return from_rows(std::move(d));
}

TransitionMatrix TransitionMatrix::identity(std::size_t n) {
  Matrix<double> a(n, n, 0.0);
  for (std::size_t i = 0; i < n; ++i) a(i, i) = 1.0;
  return from_rows(std::move(a));
}

TransitionMatrix TransitionMatrix::uniform(std::size_t n) {
  return from_rows(Matrix<double>(n, n, 1.0 / static_cast<double>(n)));
}

void TransitionMatrix::write_csv(std::ostream& os, const PhaseTaxonomy& taxonomy) const {
  if (taxonomy.size() != size()) throw ValidationError("transition matrix / taxonomy size mismatch");
  auto quoted = [](const std::string& s) {
    if (s.find_first_of(",\"") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  for (std::size_t j = 0; j < size(); ++j) os << (j ? "," : "") << quoted(taxonomy.name(j));
  os << '\n';
  for (std::size_t i = 0; i < size(); ++i) {
    for (std::size_t j = 0; j < size(); ++j) os << (j ? "," : "") << format_real(a_(i, j));
    os << '\n';
  }
}

HmmFilter::HmmFilter(std::shared_ptr<const TransitionMatrix> transition)
    : transition_(std::move(transition)) {
  if (!transition_) throw UsageError("HmmFilter: no transition matrix");
  const std::size_t n = transition_->size();
  belief_.assign(n, 1.0 / static_cast<double>(n));
  scratch_.assign(n, 0.0);
}

std::span<const double> HmmFilter::update(std::span<const double> m) {
  const std::size_t n = belief_.size();
  if (m.size() != n) throw ValidationError("hmm_filter_update: likelihood has wrong dimension");
  const Matrix<double>& a = transition_->matrix();

  auto propagate = [&](std::span<const double> prior) {
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      double pred = 0;
      for (std::size_t i = 0; i < n; ++i) pred += a(i, j) * prior[i];
      scratch_[j] = pred * m[j];
      z += scratch_[j];
    }
    return z;
  };

  double z = propagate(belief_);
  if (!(z > std::numeric_limits<double>::min()) || !std::isfinite(z)) {
    ++underflows_;
    std::vector<double> uniform(n, 1.0 / static_cast<double>(n));
    z = propagate(uniform);
    if (!(z > std::numeric_limits<double>::min()) || !std::isfinite(z)) {
      belief_ = uniform;
      return belief_;
    }
  }
  for (std::size_t j = 0; j < n; ++j) belief_[j] = scratch_[j] / z;
  return belief_;
}

// ---------------------------------------------------------------------------
// Combined statistic

SsmOptions SsmOptions::from_config(const ExperimentConfig& config) {
  SsmOptions o;
  o.features = config.features;
  o.csl_levels = config.csl_levels;
  o.gabor.num_scales = config.gabor_scales;
  o.gabor.sigma_min = config.gabor_sigma_min;
  o.gabor.sigma_max = config.gabor_sigma_max;
  o.gabor.wavelength_factor = config.gabor_wavelength_factor;
  return o;
}

SsmLayout SsmLayout::of(std::size_t num_phases, const SsmOptions& options) {
  SsmLayout l;
  if (options.features.csl) l.csl = num_phases * (options.csl_levels.size() + 1);
  if (options.features.gabor) l.gabor = num_phases * options.gabor.num_scales;
  if (options.features.hmm) l.hmm = num_phases;
  return l;
}

void ssm_concat(std::span<const double> csl, std::span<const double> gabor,
                std::span<const double> hmm, const SsmLayout& layout, std::span<double> out) {
  if (csl.size() != layout.csl || gabor.size() != layout.gabor || hmm.size() != layout.hmm)
    throw ValidationError("ssm_concat: sub-feature dimension drifted from the run layout");
  if (out.size() != layout.total()) throw ValidationError("ssm_concat: output has wrong dimension");
  auto it = std::copy(csl.begin(), csl.end(), out.begin());
  it = std::copy(gabor.begin(), gabor.end(), it);
  std::copy(hmm.begin(), hmm.end(), it);
}

SsmContext SsmContext::make(std::size_t num_phases, const SsmOptions& options,
                            std::shared_ptr<const TransitionMatrix> transition) {
  SsmContext ctx;
  ctx.num_phases = num_phases;
  ctx.options = options;
  if (options.features.gabor) ctx.gabor_bank = std::make_shared<const GaborBank>(options.gabor);
  if (options.features.hmm) {
    if (!transition) throw UsageError("hmm feature enabled without a transition matrix");
    if (transition->size() != num_phases)
      throw ValidationError("transition matrix size does not match the taxonomy");
    ctx.transition = std::move(transition);
  }
  return ctx;
}

SsmState::SsmState(const SsmContext& context)
    : layout_(context.layout()), num_phases_(context.num_phases) {
  if (context.options.features.csl) csl_.emplace(num_phases_, context.options.csl_levels);
  if (context.options.features.gabor) gabor_.emplace(context.gabor_bank, num_phases_);
  if (context.options.features.hmm) hmm_.emplace(context.transition);
  statistic_.assign(layout_.total(), 0.0);
  csl_buf_.assign(layout_.csl, 0.0);
  gabor_buf_.assign(layout_.gabor, 0.0);
}

void SsmState::update(std::span<const double> m) {
  if (m.size() != num_phases_) throw ValidationError("SsmState::update: likelihood has wrong dimension");
  std::span<const double> hmm_part;
  if (csl_) {
    csl_->update(m);
    csl_->feature(csl_buf_);
  }
  if (gabor_) {
    gabor_->update(m);
    gabor_->feature(gabor_buf_);
  }
  if (hmm_) hmm_part = hmm_->update(m);
  ssm_concat(csl_buf_, gabor_buf_, hmm_part, layout_, statistic_);
  ++frame_;
}

Matrix<double> causal_feature_stream(const Matrix<double>& stream, const SsmContext& context) {
  SsmState state(context);
  Matrix<double> out(stream.rows(), state.dim());
  for (std::size_t t = 0; t < stream.rows(); ++t) {
    std::copy(state.statistic().begin(), state.statistic().end(), out.row(t).begin());
    state.update(stream.row(t));
  }
  return out;
}

Matrix<double> acausal_feature_stream(const LikelihoodStream& stream, const SsmContext& context) {
  if (!stream.complete)
    throw UsageError("acausal aggregation needs the complete stream (offline mode only)");
  const std::size_t T = stream.length();
  Matrix<double> reversed(T, stream.probs.cols());
  for (std::size_t t = 0; t < T; ++t) {
    auto src = stream.probs.row(T - 1 - t);
    std::copy(src.begin(), src.end(), reversed.row(t).begin());
  }
  Matrix<double> rev_features = causal_feature_stream(reversed, context);
  Matrix<double> out(T, rev_features.cols());
  for (std::size_t t = 0; t < T; ++t) {
    auto src = rev_features.row(T - 1 - t);
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  return out;
}

}  // namespace phaseflow::ssm
