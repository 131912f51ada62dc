#pragma once

// Naive reference implementations used as test oracles. They share no code
// with the library beyond plain data types.

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <vector>

#include "phaseflow/matrix.hpp"
#include "phaseflow/nn.hpp"

namespace oracle {

using phaseflow::Matrix;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct LstmOut {
  std::vector<double> h, c;
};

/// The four gate equations written out one by one.
inline LstmOut lstm_step(const phaseflow::nn::ModelParams<double>& p, const std::vector<double>& h,
                         const std::vector<double>& c, const std::vector<double>& x) {
  const std::size_t H = p.hidden_dim, D = p.input_dim;
  auto pre = [&](std::size_t gate, std::size_t j) {
    double z = p.lstm_bias[gate * H + j];
    for (std::size_t k = 0; k < D; ++k) z += x[k] * p.lstm_weight(k, gate * H + j);
    for (std::size_t k = 0; k < H; ++k) z += h[k] * p.lstm_weight(D + k, gate * H + j);
    return z;
  };
  LstmOut out{std::vector<double>(H), std::vector<double>(H)};
  for (std::size_t j = 0; j < H; ++j) {
    const double in_gate = sigmoid(pre(0, j));
    const double forget_gate = sigmoid(pre(1, j));
    const double candidate = std::tanh(pre(2, j));
    const double out_gate = sigmoid(pre(3, j));
    out.c[j] = forget_gate * c[j] + in_gate * candidate;
    out.h[j] = out_gate * std::tanh(out.c[j]);
  }
  return out;
}

inline std::vector<double> head(const phaseflow::nn::ModelParams<double>& p, const std::vector<double>& h) {
  std::vector<double> logits(p.num_phases);
  for (std::size_t n = 0; n < p.num_phases; ++n) {
    logits[n] = p.head_bias[n];
    for (std::size_t k = 0; k < p.hidden_dim; ++k) logits[n] += h[k] * p.head_weight(k, n);
  }
  return logits;
}

inline std::vector<double> softmax(const std::vector<double>& z) {
  double hi = z[0];
  for (double v : z) hi = std::max(hi, v);
  double s = 0;
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) s += out[i] = std::exp(z[i] - hi);
  for (double& v : out) v /= s;
  return out;
}

/// Filtering posterior at every frame by summing over all state paths.
/// The chain starts from a uniform state one step before frame 0.
inline std::vector<std::vector<double>> hmm_enumerate(const std::vector<std::vector<double>>& A,
                                                      const std::vector<std::vector<double>>& m) {
  const std::size_t N = A.size(), T = m.size();
  std::vector<std::vector<double>> out;
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> post(N, 0.0);
    std::size_t paths = 1;
    for (std::size_t k = 0; k <= t + 1; ++k) paths *= N;
    for (std::size_t code = 0; code < paths; ++code) {
      std::size_t rest = code;
      std::vector<std::size_t> x(t + 2);
      for (auto& s : x) {
        s = rest % N;
        rest /= N;
      }
      double w = 1.0 / static_cast<double>(N);
      for (std::size_t k = 0; k <= t; ++k) w *= A[x[k]][x[k + 1]] * m[k][x[k + 1]];
      post[x[t + 1]] += w;
    }
    double z = 0;
    for (double v : post) z += v;
    for (double& v : post) v /= z;
    out.push_back(post);
  }
  return out;
}

/// log(count + 1) over the prefix m_0..m_{t-1}, counted from scratch.
inline std::vector<double> csl_recount(const std::vector<std::vector<double>>& m, std::size_t t,
                                       const std::vector<double>& levels, std::size_t N) {
  const std::size_t L = levels.size();
  std::vector<double> out(N * (L + 1), 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t l = 0; l <= L; ++l) {
      std::uint64_t count = 0;
      for (std::size_t k = 0; k < t; ++k) {
        if (l < L) {
          count += m[k][n] >= levels[l];
        } else {
          std::size_t best = 0;
          for (std::size_t j = 1; j < N; ++j)
            if (m[k][j] > m[k][best]) best = j;
          count += best == n;
        }
      }
      out[n * (L + 1) + l] = std::log(static_cast<double>(count) + 1.0);
    }
  }
  return out;
}

/// |sum_u g(u) e^{i w u} x(t + u)| over the causal support u in [-floor(3 sigma), 0].
inline double gabor_direct(const std::vector<double>& x, std::size_t t, double sigma) {
  const double omega = 2.0 * std::numbers::pi / (4.0 * sigma);
  const int reach = static_cast<int>(std::floor(3.0 * sigma));
  double z = 0;
  for (int u = -reach; u <= 0; ++u) z += std::exp(-(u * u) / (2.0 * sigma * sigma));
  double re = 0, im = 0;
  for (int u = -reach; u <= 0; ++u) {
    const long idx = static_cast<long>(t) + u;
    if (idx < 0) continue;
    const double g = std::exp(-(u * u) / (2.0 * sigma * sigma)) / z;
    re += g * std::cos(omega * u) * x[idx];
    im += g * std::sin(omega * u) * x[idx];
  }
  return std::hypot(re, im);
}

struct NaiveMetrics {
  double accuracy = 0;
  std::vector<std::vector<std::uint64_t>> confusion;
  std::vector<double> precision, recall;
  double macro_precision = 0, macro_recall = 0;
};

inline NaiveMetrics frame_metrics(const std::vector<std::uint32_t>& gt, const std::vector<std::uint32_t>& pred,
                                  std::size_t N) {
  NaiveMetrics m;
  m.confusion.assign(N, std::vector<std::uint64_t>(N, 0));
  std::uint64_t hits = 0;
  for (std::size_t t = 0; t < gt.size(); ++t) {
    ++m.confusion[gt[t]][pred[t]];
    hits += gt[t] == pred[t];
  }
  m.accuracy = gt.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(gt.size());
  std::size_t present = 0;
  for (std::size_t n = 0; n < N; ++n) {
    std::uint64_t tp = 0, in_gt = 0, in_pred = 0;
    for (std::size_t t = 0; t < gt.size(); ++t) {
      tp += gt[t] == n && pred[t] == n;
      in_gt += gt[t] == n;
      in_pred += pred[t] == n;
    }
    const double p = in_pred ? static_cast<double>(tp) / static_cast<double>(in_pred) : 0.0;
    const double r = in_gt ? static_cast<double>(tp) / static_cast<double>(in_gt) : 0.0;
    m.precision.push_back(p);
    m.recall.push_back(r);
    if (in_gt || in_pred) {
      ++present;
      m.macro_precision += p;
      m.macro_recall += r;
    }
  }
  if (present) {
    m.macro_precision /= static_cast<double>(present);
    m.macro_recall /= static_cast<double>(present);
  }
  return m;
}

/// Length of the maximal run of gt[t]'s label containing t.
inline std::size_t run_length(const std::vector<std::uint32_t>& gt, std::size_t t) {
  std::size_t a = t, b = t;
  while (a > 0 && gt[a - 1] == gt[t]) --a;
  while (b + 1 < gt.size() && gt[b + 1] == gt[t]) ++b;
  return b - a + 1;
}

inline int bucket(std::size_t len) {
  const std::size_t bounds[] = {3, 10, 30, 60};
  for (int b = 0; b < 4; ++b)
    if (len <= bounds[b]) return b;
  return 4;
}

/// Counts (frames, correct) per bucket.
inline std::vector<std::pair<std::uint64_t, std::uint64_t>> buckets(const std::vector<std::uint32_t>& gt,
                                                                    const std::vector<std::uint32_t>& pred) {
  std::vector<std::pair<std::uint64_t, std::uint64_t>> out(5);
  for (std::size_t t = 0; t < gt.size(); ++t) {
    auto& b = out[bucket(run_length(gt, t))];
    ++b.first;
    b.second += gt[t] == pred[t];
  }
  return out;
}

/// Greedy matching by repeatedly taking the globally closest unmatched pair.
inline std::uint64_t transitions_matched(const std::vector<std::uint32_t>& gt, const std::vector<std::uint32_t>& pred,
                                         std::size_t window) {
  std::vector<std::size_t> g, p;
  for (std::size_t t = 1; t < gt.size(); ++t) {
    if (gt[t] != gt[t - 1]) g.push_back(t);
    if (pred[t] != pred[t - 1]) p.push_back(t);
  }
  std::vector<bool> ug(g.size(), false), up(p.size(), false);
  std::uint64_t matched = 0;
  while (true) {
    std::optional<std::tuple<std::size_t, std::size_t, std::size_t>> best;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (ug[i]) continue;
      for (std::size_t j = 0; j < p.size(); ++j) {
        if (up[j] || pred[p[j]] != gt[g[i]]) continue;
        const std::size_t d = g[i] > p[j] ? g[i] - p[j] : p[j] - g[i];
        if (d > window) continue;
        const auto cand = std::make_tuple(d, i, j);
        if (!best || cand < *best) best = cand;
      }
    }
    if (!best) break;
    ug[std::get<1>(*best)] = true;
    up[std::get<2>(*best)] = true;
    ++matched;
  }
  return matched;
}

inline std::pair<std::uint64_t, std::uint64_t> midpoints(const std::vector<std::uint32_t>& gt,
                                                         const std::vector<std::uint32_t>& pred) {
  std::uint64_t segs = 0, ok = 0;
  std::size_t start = 0;
  for (std::size_t t = 1; t <= gt.size(); ++t) {
    if (t == gt.size() || gt[t] != gt[start]) {
      ++segs;
      ok += pred[(start + t - 1) / 2] == gt[start];
      start = t;
    }
  }
  return {segs, ok};
}

}  // namespace oracle
