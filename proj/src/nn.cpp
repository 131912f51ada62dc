#include "phaseflow/nn.hpp"

#include <cmath>

#include "phaseflow/error.hpp"

namespace phaseflow::nn {

namespace {

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

// out[c][r] += sum_{k < count} in[c][k] * w(k0 + k, r), accumulated in ascending k.
// Every output element sees the same operation sequence whatever `ncols` is,
// so a batched forward reproduces the single-sequence forward bit for bit.
template <typename T>
void accumulate_fanout(const Matrix<T>& w, std::size_t k0, std::size_t count,
                       const T* const* in, T* const* out, std::size_t ncols) {
  const std::size_t width = w.cols();
  std::size_t c = 0;
  for (; c + 4 <= ncols; c += 4) {
    T* __restrict__ o0 = out[c];
    T* __restrict__ o1 = out[c + 1];
    T* __restrict__ o2 = out[c + 2];
    T* __restrict__ o3 = out[c + 3];
    for (std::size_t k = 0; k < count; ++k) {
      const T* __restrict__ wr = w.data() + (k0 + k) * width;
      const T a0 = in[c][k], a1 = in[c + 1][k], a2 = in[c + 2][k], a3 = in[c + 3][k];
      for (std::size_t r = 0; r < width; ++r) {
        const T wv = wr[r];
        o0[r] += a0 * wv;
        o1[r] += a1 * wv;
        o2[r] += a2 * wv;
        o3[r] += a3 * wv;
      }
    }
  }
  for (; c < ncols; ++c) {
    T* __restrict__ o = out[c];
    for (std::size_t k = 0; k < count; ++k) {
      const T* __restrict__ wr = w.data() + (k0 + k) * width;
      const T a = in[c][k];
      for (std::size_t r = 0; r < width; ++r) o[r] += a * wr[r];
    }
  }
}

// grad(k0 + k, r) += in[c][k] * delta[c][r], columns applied in order.
template <typename T>
void accumulate_outer(Matrix<T>& grad, std::size_t k0, std::size_t count, const T* const* in,
                      const T* const* delta, std::size_t ncols) {
  const std::size_t width = grad.cols();
  std::size_t c = 0;
  for (; c + 4 <= ncols; c += 4) {
    const T* __restrict__ d0 = delta[c];
    const T* __restrict__ d1 = delta[c + 1];
    const T* __restrict__ d2 = delta[c + 2];
    const T* __restrict__ d3 = delta[c + 3];
    for (std::size_t k = 0; k < count; ++k) {
      T* __restrict__ g = grad.data() + (k0 + k) * width;
      const T a0 = in[c][k], a1 = in[c + 1][k], a2 = in[c + 2][k], a3 = in[c + 3][k];
      for (std::size_t r = 0; r < width; ++r) {
        T acc = g[r];
        acc += a0 * d0[r];
        acc += a1 * d1[r];
        acc += a2 * d2[r];
        acc += a3 * d3[r];
        g[r] = acc;
      }
    }
  }
  for (; c < ncols; ++c) {
    const T* __restrict__ d = delta[c];
    for (std::size_t k = 0; k < count; ++k) {
      T* __restrict__ g = grad.data() + (k0 + k) * width;
      const T a = in[c][k];
      for (std::size_t r = 0; r < width; ++r) g[r] += a * d[r];
    }
  }
}

// Dot product with a fixed eight-lane partial-sum layout.
template <typename T>
T dot(const T* __restrict__ a, const T* __restrict__ b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  for (std::size_t l = 0; i < n; ++i, ++l) acc[l] += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

// Shared forward for one step over `ncols` columns. Writes activated gates
// (i, f, g, o), the new cell, tanh(cell) and hidden vectors.
template <typename T>
void lstm_forward(const ModelParams<T>& p, const T* const* x, const T* const* h_prev,
                  const T* const* c_prev, T* const* gates, T* const* c_out, T* const* tanh_c_out,
                  T* const* h_out, std::size_t ncols) {
  const std::size_t H = p.hidden_dim;
  for (std::size_t c = 0; c < ncols; ++c) std::copy(p.lstm_bias.begin(), p.lstm_bias.end(), gates[c]);
  accumulate_fanout(p.lstm_weight, 0, p.input_dim, x, gates, ncols);
  accumulate_fanout(p.lstm_weight, p.input_dim, H, h_prev, gates, ncols);
  for (std::size_t c = 0; c < ncols; ++c) {
    T* z = gates[c];
    for (std::size_t j = 0; j < H; ++j) {
      const T i = sigmoid(z[j]);
      const T f = sigmoid(z[H + j]);
      const T g = std::tanh(z[2 * H + j]);
      const T o = sigmoid(z[3 * H + j]);
      z[j] = i;
      z[H + j] = f;
      z[2 * H + j] = g;
      z[3 * H + j] = o;
      const T cell = f * c_prev[c][j] + i * g;
      const T tc = std::tanh(cell);
      c_out[c][j] = cell;
      tanh_c_out[c][j] = tc;
      h_out[c][j] = o * tc;
    }
  }
}

template <typename T>
void head_logits(const ModelParams<T>& p, const T* const* h, T* const* logits, std::size_t ncols) {
  for (std::size_t c = 0; c < ncols; ++c) std::copy(p.head_bias.begin(), p.head_bias.end(), logits[c]);
  accumulate_fanout(p.head_weight, 0, p.hidden_dim, h, logits, ncols);
}

}  // namespace

template <typename T>
ModelParams<T> ModelParams<T>::zeros(std::size_t input_dim, std::size_t hidden_dim,
                                     std::size_t num_phases) {
  ModelParams p;
  p.input_dim = input_dim;
  p.hidden_dim = hidden_dim;
  p.num_phases = num_phases;
  p.lstm_weight = Matrix<T>(input_dim + hidden_dim, 4 * hidden_dim);
  p.lstm_bias.assign(4 * hidden_dim, T{0});
  p.head_weight = Matrix<T>(hidden_dim, num_phases);
  p.head_bias.assign(num_phases, T{0});
  return p;
}

template <typename T>
ModelParams<T> ModelParams<T>::initialize(std::size_t input_dim, std::size_t hidden_dim,
                                          std::size_t num_phases, std::mt19937_64& rng) {
  ModelParams p = zeros(input_dim, hidden_dim, num_phases);
  const double lstm_bound = 1.0 / std::sqrt(static_cast<double>(input_dim + hidden_dim));
  std::uniform_real_distribution<double> lstm_dist(-lstm_bound, lstm_bound);
  for (auto& w : p.lstm_weight.flat()) w = static_cast<T>(lstm_dist(rng));
  const double head_bound = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  std::uniform_real_distribution<double> head_dist(-head_bound, head_bound);
  for (auto& w : p.head_weight.flat()) w = static_cast<T>(head_dist(rng));
  for (std::size_t j = 0; j < hidden_dim; ++j) p.lstm_bias[hidden_dim + j] = T{1};
  return p;
}

template <typename T>
std::vector<ParamBlock<T>> ModelParams<T>::blocks() {
  return {{"lstm.weight", lstm_weight.flat()},
          {"lstm.bias", std::span<T>(lstm_bias)},
          {"head.weight", head_weight.flat()},
          {"head.bias", std::span<T>(head_bias)}};
}

template <typename T>
std::vector<ParamBlock<const T>> ModelParams<T>::blocks() const {
  return {{"lstm.weight", lstm_weight.flat()},
          {"lstm.bias", std::span<const T>(lstm_bias)},
          {"head.weight", head_weight.flat()},
          {"head.bias", std::span<const T>(head_bias)}};
}

template <typename T>
void ModelParams<T>::set_zero() {
  for (auto& b : blocks()) std::fill(b.values.begin(), b.values.end(), T{0});
}

template <typename T>
bool ModelParams<T>::all_finite() const {
  for (const auto& b : blocks())
    for (T v : b.values)
      if (!std::isfinite(v)) return false;
  return true;
}

template <typename T>
LstmState<T> lstm_step(const ModelParams<T>& params, const LstmState<T>& state,
                       std::span<const T> x) {
  if (x.size() != params.input_dim)
    throw ValidationError("lstm_step: input has dimension " + std::to_string(x.size()) +
                          ", expected " + std::to_string(params.input_dim));
  if (state.h.size() != params.hidden_dim || state.c.size() != params.hidden_dim)
    throw ValidationError("lstm_step: state dimension does not match hidden_dim");
  const std::size_t H = params.hidden_dim;
  std::vector<T> gates(4 * H), tanh_c(H);
  LstmState<T> out = LstmState<T>::zeros(H);
  const T* xp = x.data();
  const T* hp = state.h.data();
  const T* cp = state.c.data();
  T* gp = gates.data();
  T* co = out.c.data();
  T* tco = tanh_c.data();
  T* ho = out.h.data();
  lstm_forward(params, &xp, &hp, &cp, &gp, &co, &tco, &ho, 1);
  return out;
}

template <typename T>
std::vector<T> head_forward(const ModelParams<T>& params, std::span<const T> h) {
  if (h.size() != params.hidden_dim) throw ValidationError("head_forward: hidden dimension mismatch");
  std::vector<T> logits(params.num_phases);
  const T* hp = h.data();
  T* lp = logits.data();
  head_logits(params, &hp, &lp, 1);
  return logits;
}

double cross_entropy_loss(const ProbVector& m, PhaseId y) {
  if (y >= m.size())
    throw ValidationError("cross_entropy_loss: label " + std::to_string(y) + " out of range");
  return -std::log(std::max(m[y], kProbabilityFloor));
}

template <typename T>
WindowTape<T>::WindowTape(const ModelParams<T>& params, std::vector<LstmState<T>> initial)
    : params_(params), initial_(std::move(initial)), lengths_(initial_.size(), 0) {
  for (const auto& s : initial_)
    if (s.h.size() != params.hidden_dim || s.c.size() != params.hidden_dim)
      throw ValidationError("WindowTape: initial state dimension mismatch");
}

template <typename T>
const Matrix<T>& WindowTape<T>::step(std::span<const std::span<const T>> inputs) {
  const std::size_t B = columns();
  const std::size_t H = params_.hidden_dim;
  const std::size_t N = params_.num_phases;
  if (inputs.size() != B) throw ValidationError("WindowTape::step: one input per column required");

  Step s;
  s.x = Matrix<T>(B, params_.input_dim);
  s.gates = Matrix<T>(B, 4 * H);
  s.c = Matrix<T>(B, H);
  s.tanh_c = Matrix<T>(B, H);
  s.h = Matrix<T>(B, H);
  s.probs = Matrix<T>(B, N);
  s.active.assign(B, 0);

  std::vector<const T*> x, hp, cp;
  std::vector<T*> g, co, tco, ho;
  std::vector<std::size_t> cols;
  for (std::size_t b = 0; b < B; ++b) {
    if (inputs[b].empty()) continue;
    if (lengths_[b] != steps_.size())
      throw ValidationError("WindowTape::step: a finished column cannot resume");
    if (inputs[b].size() != params_.input_dim)
      throw ValidationError("WindowTape::step: input dimension mismatch");
    std::copy(inputs[b].begin(), inputs[b].end(), s.x.row(b).begin());
    s.active[b] = 1;
    cols.push_back(b);
    x.push_back(s.x.row(b).data());
    if (steps_.empty()) {
      hp.push_back(initial_[b].h.data());
      cp.push_back(initial_[b].c.data());
    } else {
      hp.push_back(steps_.back().h.row(b).data());
      cp.push_back(steps_.back().c.row(b).data());
    }
    g.push_back(s.gates.row(b).data());
    co.push_back(s.c.row(b).data());
    tco.push_back(s.tanh_c.row(b).data());
    ho.push_back(s.h.row(b).data());
  }
  lstm_forward(params_, x.data(), hp.data(), cp.data(), g.data(), co.data(), tco.data(), ho.data(),
               cols.size());

  std::vector<const T*> hin(ho.begin(), ho.end());
  std::vector<T*> logits;
  for (std::size_t b : cols) logits.push_back(s.probs.row(b).data());
  head_logits(params_, hin.data(), logits.data(), cols.size());
  for (std::size_t b : cols) {
    auto row = s.probs.row(b);
    std::vector<T> tmp(row.begin(), row.end());
    softmax_into<T>(tmp, row);
    ++lengths_[b];
  }
  steps_.push_back(std::move(s));
  return steps_.back().probs;
}

template <typename T>
LstmState<T> WindowTape<T>::final_state(std::size_t col) const {
  const std::size_t len = lengths_.at(col);
  if (len == 0) return initial_[col];
  const Step& s = steps_[len - 1];
  auto h = s.h.row(col);
  auto c = s.c.row(col);
  return {std::vector<T>(h.begin(), h.end()), std::vector<T>(c.begin(), c.end())};
}

namespace {

template <typename T>
double frame_loss(std::span<const T> probs, const FrameTarget& target, T proximal_weight) {
  if (target.label >= probs.size()) throw ValidationError("frame target label out of range");
  double loss = -std::log(std::max(static_cast<double>(probs[target.label]), kProbabilityFloor));
  if (!target.previous.empty() && proximal_weight != T{0}) {
    double sq = 0;
    for (std::size_t n = 0; n < probs.size(); ++n) {
      const double d = static_cast<double>(probs[n]) - static_cast<double>(target.previous[n]);
      sq += d * d;
    }
    loss += static_cast<double>(proximal_weight) * sq;
  }
  return loss;
}

}  // namespace

template <typename T>
double WindowTape<T>::loss(std::span<const std::vector<FrameTarget>> targets, T proximal_weight) const {
  if (targets.size() != columns()) throw ValidationError("WindowTape::loss: one target list per column");
  double total = 0;
  for (std::size_t b = 0; b < columns(); ++b) {
    if (targets[b].size() < lengths_[b]) throw ValidationError("WindowTape::loss: missing targets");
    for (std::size_t t = 0; t < lengths_[b]; ++t)
      total += frame_loss<T>(steps_[t].probs.row(b), targets[b][t], proximal_weight);
  }
  return total;
}

template <typename T>
double WindowTape<T>::backward(std::span<const std::vector<FrameTarget>> targets, T proximal_weight,
                               T scale, ModelParams<T>& grads) const {
  const double total = loss(targets, proximal_weight);
  const std::size_t B = columns();
  const std::size_t H = params_.hidden_dim;
  const std::size_t N = params_.num_phases;
  const std::size_t in_dim = params_.input_dim;

  Matrix<T> dh_next(B, H), dc_next(B, H);
  Matrix<T> dz(B, 4 * H), dlogits(B, N);
  std::vector<T> dh(H);

  for (std::size_t t = steps_.size(); t-- > 0;) {
    const Step& s = steps_[t];
    std::vector<std::size_t> cols;
    for (std::size_t b = 0; b < B; ++b)
      if (s.active[b]) cols.push_back(b);

    for (std::size_t b : cols) {
      const FrameTarget& tgt = targets[b][t];
      auto p = s.probs.row(b);
      auto dl = dlogits.row(b);
      for (std::size_t n = 0; n < N; ++n) dl[n] = p[n];
      if (static_cast<double>(p[tgt.label]) >= kProbabilityFloor) dl[tgt.label] -= T{1};
      else for (auto& v : dl) v = T{0};  // clamped: loss is locally constant
      if (!tgt.previous.empty() && proximal_weight != T{0}) {
        // d/dlogits of w*||p - prev||^2 through the softmax Jacobian.
        T gp = 0;
        std::vector<T> gvec(N);
        for (std::size_t n = 0; n < N; ++n) {
          gvec[n] = T{2} * proximal_weight * (p[n] - static_cast<T>(tgt.previous[n]));
          gp += gvec[n] * p[n];
        }
        for (std::size_t n = 0; n < N; ++n) dl[n] += p[n] * (gvec[n] - gp);
      }
      for (auto& v : dl) v *= scale;
    }

    // Head parameters.
    {
      std::vector<const T*> hin, dls;
      for (std::size_t b : cols) {
        hin.push_back(s.h.row(b).data());
        dls.push_back(dlogits.row(b).data());
        auto dl = dlogits.row(b);
        for (std::size_t n = 0; n < N; ++n) grads.head_bias[n] += dl[n];
      }
      accumulate_outer(grads.head_weight, 0, H, hin.data(), dls.data(), cols.size());
    }

    for (std::size_t b : cols) {
      auto dl = dlogits.row(b);
      for (std::size_t j = 0; j < H; ++j)
        dh[j] = dot(params_.head_weight.row(j).data(), dl.data(), N) + dh_next(b, j);
      auto gates = s.gates.row(b);
      auto c_prev = t == 0 ? std::span<const T>(initial_[b].c) : steps_[t - 1].c.row(b);
      auto z = dz.row(b);
      for (std::size_t j = 0; j < H; ++j) {
        const T i = gates[j], f = gates[H + j], g = gates[2 * H + j], o = gates[3 * H + j];
        const T tc = s.tanh_c(b, j);
        const T d_o = dh[j] * tc;
        const T dc = dh[j] * o * (T{1} - tc * tc) + dc_next(b, j);
        z[j] = dc * g * i * (T{1} - i);
        z[H + j] = dc * c_prev[j] * f * (T{1} - f);
        z[2 * H + j] = dc * i * (T{1} - g * g);
        z[3 * H + j] = d_o * o * (T{1} - o);
        dc_next(b, j) = dc * f;
      }
      for (std::size_t r = 0; r < 4 * H; ++r) grads.lstm_bias[r] += z[r];
    }

    std::vector<const T*> xs, hs, dzs;
    for (std::size_t b : cols) {
      xs.push_back(s.x.row(b).data());
      hs.push_back(t == 0 ? initial_[b].h.data() : steps_[t - 1].h.row(b).data());
      dzs.push_back(dz.row(b).data());
    }
    accumulate_outer(grads.lstm_weight, 0, in_dim, xs.data(), dzs.data(), cols.size());
    accumulate_outer(grads.lstm_weight, in_dim, H, hs.data(), dzs.data(), cols.size());

    for (std::size_t b : cols) {
      auto z = dz.row(b);
      for (std::size_t j = 0; j < H; ++j)
        dh_next(b, j) = dot(params_.lstm_weight.row(in_dim + j).data(), z.data(), 4 * H);
    }
  }
  return total;
}

template <typename T>
double clip_global_norm(ModelParams<T>& grads, double max_norm) {
  double sq = 0;
  for (const auto& b : std::as_const(grads).blocks())
    for (T v : b.values) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& b : grads.blocks())
      for (auto& v : b.values) v *= factor;
  }
  return norm;
}

template <typename T>
AdamMoments<T> AdamMoments<T>::like(const ModelParams<T>& params) {
  return {ModelParams<T>::zeros(params.input_dim, params.hidden_dim, params.num_phases),
          ModelParams<T>::zeros(params.input_dim, params.hidden_dim, params.num_phases)};
}

template <typename T>
void adam_update(ModelParams<T>& params, const ModelParams<T>& grads, AdamMoments<T>& moments,
                 double lr, std::uint64_t step, const AdamOptions& options) {
  if (step < 1) throw UsageError("adam_update: step counts from 1");
  for (const auto& b : grads.blocks())
    for (T v : b.values)
      if (!std::isfinite(v))
        throw NumericError("adam_update: non-finite gradient in block '" + std::string(b.name) + "'");

  const T b1 = static_cast<T>(options.beta1);
  const T b2 = static_cast<T>(options.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(options.beta1, static_cast<double>(step)));
  const T c2 = static_cast<T>(1.0 - std::pow(options.beta2, static_cast<double>(step)));
  const T rate = static_cast<T>(lr);
  const T eps = static_cast<T>(options.epsilon);

  auto pb = params.blocks();
  auto gb = grads.blocks();
  auto mb = moments.first.blocks();
  auto vb = moments.second.blocks();
  for (std::size_t k = 0; k < pb.size(); ++k) {
    auto p = pb[k].values;
    auto g = gb[k].values;
    auto m = mb[k].values;
    auto v = vb[k].values;
    if (p.size() != g.size() || p.size() != m.size())
      throw ValidationError("adam_update: shape mismatch in block '" + std::string(pb[k].name) + "'");
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (T{1} - b1) * g[i];
      v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
      const T m_hat = m[i] / c1;
      const T v_hat = v[i] / c2;
      p[i] -= rate * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

std::vector<BlockCheck> gradient_check(const ModelParams<double>& params,
                                       const std::vector<LstmState<double>>& initial,
                                       const std::vector<Matrix<double>>& inputs,
                                       const std::vector<std::vector<FrameTarget>>& targets,
                                       double proximal_weight, double step) {
  if (inputs.size() != initial.size() || targets.size() != initial.size())
    throw ValidationError("gradient_check: one input matrix and target list per column");
  std::size_t max_len = 0;
  for (const auto& m : inputs) max_len = std::max(max_len, m.rows());

  auto run = [&](const ModelParams<double>& p) {
    WindowTape<double> tape(p, initial);
    std::vector<std::span<const double>> row(initial.size());
    for (std::size_t t = 0; t < max_len; ++t) {
      for (std::size_t b = 0; b < inputs.size(); ++b)
        row[b] = t < inputs[b].rows() ? inputs[b].row(t) : std::span<const double>{};
      tape.step(row);
    }
    return tape;
  };

  ModelParams<double> analytic = ModelParams<double>::zeros(params.input_dim, params.hidden_dim, params.num_phases);
  run(params).backward(targets, proximal_weight, 1.0, analytic);

  ModelParams<double> probe = params;
  std::vector<BlockCheck> out;
  auto probe_blocks = probe.blocks();
  auto analytic_blocks = std::as_const(analytic).blocks();
  for (std::size_t k = 0; k < probe_blocks.size(); ++k) {
    auto values = probe_blocks[k].values;
    double diff_sq = 0, a_sq = 0, n_sq = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = run(probe).loss(targets, proximal_weight);
      values[i] = saved - step;
      const double down = run(probe).loss(targets, proximal_weight);
      values[i] = saved;
      const double numeric = (up - down) / (2 * step);
      const double a = analytic_blocks[k].values[i];
      diff_sq += (a - numeric) * (a - numeric);
      a_sq += a * a;
      n_sq += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(a_sq), std::sqrt(n_sq), 1e-12});
    out.push_back({std::string(probe_blocks[k].name), std::sqrt(diff_sq) / denom, std::sqrt(a_sq)});
  }
  return out;
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template class WindowTape<float>;
template class WindowTape<double>;
template LstmState<float> lstm_step(const ModelParams<float>&, const LstmState<float>&, std::span<const float>);
template LstmState<double> lstm_step(const ModelParams<double>&, const LstmState<double>&, std::span<const double>);
template std::vector<float> head_forward(const ModelParams<float>&, std::span<const float>);
template std::vector<double> head_forward(const ModelParams<double>&, std::span<const double>);
template double clip_global_norm(ModelParams<float>&, double);
template double clip_global_norm(ModelParams<double>&, double);
template struct AdamMoments<float>;
template struct AdamMoments<double>;
template void adam_update(ModelParams<float>&, const ModelParams<float>&, AdamMoments<float>&, double,
                          std::uint64_t, const AdamOptions&);
template void adam_update(ModelParams<double>&, const ModelParams<double>&, AdamMoments<double>&, double,
                          std::uint64_t, const AdamOptions&);

}  // namespace phaseflow::nn
