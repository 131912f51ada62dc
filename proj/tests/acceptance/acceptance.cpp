// One PASS/FAIL line per acceptance criterion. Exit status is non-zero if any fails.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "oracles.hpp"
#include "phaseflow/cli.hpp"
#include "phaseflow/data.hpp"
#include "phaseflow/eval.hpp"
#include "phaseflow/model.hpp"
#include "phaseflow/nn.hpp"
#include "phaseflow/ssm.hpp"
#include "phaseflow/train.hpp"

using namespace phaseflow;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os.setf(std::ios::scientific);
  os.precision(2);
  os << v;
  return os.str();
}

std::vector<std::vector<double>> random_simplex(std::size_t T, std::size_t N, std::mt19937_64& rng, double spread) {
  std::normal_distribution<double> n(0, spread);
  std::vector<std::vector<double>> m(T, std::vector<double>(N));
  for (auto& row : m) {
    double s = 0;
    for (auto& v : row) s += v = std::exp(n(rng));
    for (auto& v : row) v /= s;
  }
  return m;
}

// ---------------------------------------------------------------------------

Outcome readme_statement(const fs::path& root) {
  const std::string text = slurp(root / "README.md");
  std::string lower = text;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  const bool ok = lower.find("not reproducible") != std::string::npos && text.find("90.0") != std::string::npos &&
                  text.find("85.6") != std::string::npos && text.find("Cholec80") != std::string::npos &&
                  text.find("MGH100") != std::string::npos;
  return {ok, ok ? "README states the non-reproducibility of paper-scale numbers" : "statement missing from README.md"};
}

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  double worst = 0;
  std::size_t instances = 0;
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(-0.6, 0.6);
  for (std::size_t H : {2, 3, 4})
    for (std::size_t N : {2, 3})
      for (std::size_t T : {1, 3, 5, 8}) {
        const std::size_t D = 2 + (T + H) % 3;  // embedding plus frozen statistic inputs
        auto p = nn::ModelParams<double>::zeros(D, H, N);
        for (auto& b : p.blocks())
          for (auto& v : b.values) v = u(rng);
        std::vector<nn::LstmState<double>> init;
        std::vector<Matrix<double>> inputs;
        std::vector<Matrix<float>> prev;
        std::vector<std::vector<nn::FrameTarget>> targets;
        for (std::size_t b = 0; b < 2; ++b) {
          auto s = nn::LstmState<double>::zeros(H);
          for (auto& v : s.h) v = u(rng);
          for (auto& v : s.c) v = u(rng);
          init.push_back(s);
          const std::size_t len = b == 0 ? T : (T + 1) / 2;
          Matrix<double> x(len, D);
          for (auto& v : x.flat()) v = 2 * u(rng);
          inputs.push_back(x);
          Matrix<float> m(len, N);
          for (std::size_t t = 0; t < len; ++t) {
            const auto row = random_simplex(1, N, rng, 1.0)[0];
            for (std::size_t n = 0; n < N; ++n) m(t, n) = static_cast<float>(row[n]);
          }
          prev.push_back(m);
        }
        std::uniform_int_distribution<PhaseId> lab(0, static_cast<PhaseId>(N - 1));
        for (std::size_t b = 0; b < 2; ++b) {
          std::vector<nn::FrameTarget> tg;
          for (std::size_t t = 0; t < inputs[b].rows(); ++t) tg.push_back({lab(rng), prev[b].row(t)});
          targets.push_back(tg);
        }
        for (const auto& c : nn::gradient_check(p, init, inputs, targets, 0.25))
          worst = std::max(worst, c.relative_error);
        ++instances;
      }
  const double secs = seconds_since(t0);
  return {instances >= 20 && worst < 1e-4 && secs < 60,
          std::to_string(instances) + " instances, max relative error " + sci(worst) + ", " +
              fixed(secs, 2) + " s"};
}

Outcome hmm_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(0.02, 1.0);
  double worst = 0;
  std::size_t instances = 0;
  for (std::size_t N = 2; N <= 4; ++N)
    for (std::size_t T = 1; T <= 6; ++T)
      for (int rep = 0; rep < 4; ++rep) {
        Matrix<double> a(N, N);
        std::vector<std::vector<double>> av(N, std::vector<double>(N));
        for (std::size_t i = 0; i < N; ++i) {
          double s = 0;
          for (auto& v : a.row(i)) s += v = u(rng);
          for (std::size_t j = 0; j < N; ++j) av[i][j] = a(i, j) /= s;
        }
        const auto m = random_simplex(T, N, rng, 1.5);
        const auto expected = oracle::hmm_enumerate(av, m);
        ssm::HmmFilter f(std::make_shared<const ssm::TransitionMatrix>(ssm::TransitionMatrix::from_rows(a)));
        for (std::size_t t = 0; t < T; ++t) {
          const auto p = f.update(m[t]);
          for (std::size_t n = 0; n < N; ++n) worst = std::max(worst, std::abs(p[n] - expected[t][n]));
        }
        ++instances;
      }
  const double secs = seconds_since(t0);
  return {instances >= 50 && worst <= 1e-9 && secs < 10,
          std::to_string(instances) + " instances, max deviation " + sci(worst) + ", " + fixed(secs, 2) +
              " s"};
}

Outcome csl_oracle() {
  std::mt19937_64 rng(5);
  const std::vector<double> levels{0.25, 0.5, 0.75};
  std::size_t mismatches = 0, decreases = 0;
  for (int s = 0; s < 100; ++s) {
    const std::size_t N = 2 + s % 5, T = 20 + s;
    const auto m = random_simplex(T, N, rng, 2.0);
    ssm::CslAccumulator acc(N, levels);
    std::vector<std::uint64_t> prev(acc.dim(), 0);
    std::vector<double> f(acc.dim());
    for (std::size_t t = 0; t < T; ++t) {
      acc.update(m[t]);
      acc.feature(f);
      mismatches += f != oracle::csl_recount(m, t + 1, levels, N);
      for (std::size_t i = 0; i < acc.dim(); ++i) decreases += acc.counts()[i] < prev[i];
      prev.assign(acc.counts().begin(), acc.counts().end());
    }
  }
  return {mismatches == 0 && decreases == 0,
          "100 streams, " + std::to_string(mismatches) + " mismatching frames, " + std::to_string(decreases) +
              " counter decreases"};
}

Outcome gabor_oracle() {
  std::mt19937_64 rng(6);
  auto bank = std::make_shared<const ssm::GaborBank>();
  double worst = 0;
  for (int s = 0; s < 5; ++s) {
    const std::size_t N = 3;
    const auto m = random_simplex(200, N, rng, 2.0);
    Matrix<double> signal;
    for (const auto& r : m) signal.append_row(r);
    const auto batch = ssm::gabor_filter_batch(signal, *bank);
    ssm::GaborFilter filter(bank, N);
    std::vector<double> f(filter.dim());
    for (std::size_t t = 0; t < 200; ++t) {
      filter.update(m[t]);
      filter.feature(f);
      for (std::size_t n = 0; n < N; ++n) {
        std::vector<double> channel(200);
        for (std::size_t k = 0; k < 200; ++k) channel[k] = m[k][n];
        for (std::size_t sc = 0; sc < bank->num_scales(); ++sc) {
          const double v = f[n * bank->num_scales() + sc];
          worst = std::max(worst, std::abs(v - batch(t, n * bank->num_scales() + sc)));
          worst = std::max(worst, std::abs(v - oracle::gabor_direct(channel, t, bank->kernel(sc).sigma)));
        }
      }
    }
  }
  return {bank->num_scales() == 10 && worst < 1e-6,
          "5 streams x 200 frames x 10 scales, max deviation " + sci(worst)};
}

Outcome metric_oracle() {
  std::mt19937_64 rng(8);
  const std::size_t N = 5;
  std::size_t failures = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<std::size_t> len(1, 70), nseg(1, 15);
    std::uniform_int_distribution<PhaseId> phase(0, N - 1);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<PhaseId> gt;
    const std::size_t segs = nseg(rng);
    for (std::size_t s = 0; s < segs; ++s) gt.insert(gt.end(), len(rng), phase(rng));
    std::vector<PhaseId> pred = gt;
    const std::size_t shift = std::uniform_int_distribution<std::size_t>(0, 15)(rng);
    for (std::size_t t = pred.size(); t-- > shift;) pred[t] = pred[t - shift];
    for (auto& p : pred)
      if (u(rng) < 0.1) p = phase(rng);

    const auto m = eval::frame_metrics(gt, pred, N);
    const auto naive = oracle::frame_metrics(gt, pred, N);
    bool ok = m.accuracy == naive.accuracy && m.precision == naive.macro_precision && m.recall == naive.macro_recall;
    std::uint64_t trace = 0;
    for (std::size_t i = 0; i < N; ++i) {
      ok &= m.per_phase[i].precision == naive.precision[i] && m.per_phase[i].recall == naive.recall[i];
      for (std::size_t j = 0; j < N; ++j) ok &= m.confusion(i, j) == naive.confusion[i][j];
      trace += m.confusion(i, i);
    }
    ok &= m.accuracy == static_cast<double>(trace) / static_cast<double>(gt.size());
    const auto b = eval::bucket_accuracy(gt, pred);
    const auto nb = oracle::buckets(gt, pred);
    for (std::size_t k = 0; k < eval::kNumBuckets; ++k) ok &= b.frames[k] == nb[k].first && b.correct[k] == nb[k].second;
    ok &= eval::transition_accuracy(gt, pred).matched == oracle::transitions_matched(gt, pred, 10);
    const auto mp = eval::midpoint_accuracy(gt, pred);
    const auto nm = oracle::midpoints(gt, pred);
    ok &= mp.segments == nm.first && mp.correct == nm.second;
    failures += !ok;
  }
  return {failures == 0, "100 label pairs, " + std::to_string(failures) + " disagreements"};
}

Outcome causality(const data::WorkflowGrammar& grammar) {
  auto videos = data::generate_dataset(grammar, 12, 31);
  std::vector<FeatureSequence> train_set(videos.begin(), videos.begin() + 7);
  ExperimentConfig c;
  c.features = FeatureSet::all();
  c.hidden_dim = 16;
  c.epochs = 1;
  const auto fitted = train::fit(c, grammar.taxonomy, train_set, {});
  std::mt19937_64 rng(3);
  std::size_t probes = 0, violations = 0;
  for (std::size_t v = 7; v < 12; ++v) {
    const auto& video = videos[v];
    const auto base = model::infer_video(fitted.best, video);
    std::uniform_int_distribution<std::size_t> cut(0, video.length() - 2);
    std::normal_distribution<float> noise(0, 3);
    for (int k = 0; k < 5; ++k) {
      const std::size_t t = cut(rng);
      FeatureSequence corrupted = video;
      for (std::size_t s = t + 1; s < video.length(); ++s)
        for (auto& x : corrupted.features.row(s)) x = noise(rng);
      const auto other = model::infer_video(fitted.best, corrupted);
      for (std::size_t s = 0; s <= t; ++s)
        for (std::size_t n = 0; n < grammar.taxonomy.size(); ++n)
          violations += other.stream.probs(s, n) != base.stream.probs(s, n);
      ++probes;
    }
  }
  return {violations == 0 && probes == 25,
          std::to_string(probes) + " cut points on 5 videos, " + std::to_string(violations) + " changed outputs"};
}

Outcome baseline_identity(const data::WorkflowGrammar& grammar) {
  auto videos = data::generate_dataset(grammar, 6, 41);
  std::vector<FeatureSequence> train_set(videos.begin(), videos.begin() + 4);
  ExperimentConfig c;
  c.features = {};
  c.hidden_dim = 16;
  c.epochs = 2;
  std::size_t diffs = 0, frames = 0;
  const auto fitted = train::fit(c, grammar.taxonomy, train_set, {});
  const auto& m = fitted.best;
  for (const auto& v : videos) {
    const auto out = model::infer_video(m, v);
    auto state = nn::LstmState<float>::zeros(c.hidden_dim);
    std::vector<float> probs(grammar.taxonomy.size());
    for (std::size_t t = 0; t < v.length(); ++t) {
      state = nn::lstm_step<float>(m.params(), state, v.features.row(t));
      softmax_into<float>(nn::head_forward<float>(m.params(), state.h), probs);
      for (std::size_t n = 0; n < probs.size(); ++n) diffs += out.stream.probs(t, n) != static_cast<double>(probs[n]);
      ++frames;
    }
  }
  const bool plain = fitted.best.input_dim() == grammar.embed_dim && fitted.best.statistic_dim() == 0;
  return {diffs == 0 && plain, std::to_string(frames) + " frames compared, " + std::to_string(diffs) + " differing"};
}

struct Headline {
  Outcome ablation;
  Outcome acausal;
};

Headline headline(const data::WorkflowGrammar& base_grammar) {
  data::WorkflowGrammar grammar = base_grammar;
  grammar.emission_seed = 1;
  grammar.finalize();
  data::Dataset ds;
  ds.taxonomy = grammar.taxonomy;
  ds.videos = data::generate_dataset(grammar, 100, 1);
  std::vector<std::string> ids;
  double frames = 0;
  for (const auto& v : ds.videos) {
    ids.push_back(v.video_id);
    frames += static_cast<double>(v.length());
  }
  const auto splits = data::default_splits(ids);
  std::vector<PhaseId> ambiguity;
  for (const auto& g : grammar.ambiguity_groups) ambiguity.insert(ambiguity.end(), g.begin(), g.end());
  std::sort(ambiguity.begin(), ambiguity.end());
  ExperimentConfig cfg;
  cfg.epochs = 20;
  const std::vector<std::uint64_t> seeds{1, 2, 3};

  const auto t0 = Clock::now();
  const auto main = cli::run_ablation(ds, splits, cfg, seeds, {"lstm", "ssm"}, ambiguity);
  const double secs = seconds_since(t0);
  std::cout << cli::ablation_csv(main) << std::flush;

  double amb_gain = 0, tr_lstm = 0, tr_ssm = 0;
  bool short_every_seed = true;
  std::string per_seed;
  for (auto seed : seeds) {
    const auto& l = main.run("lstm", seed);
    const auto& s = main.run("ssm", seed);
    amb_gain += (s.ambiguity_accuracy.value_or(0) - l.ambiguity_accuracy.value_or(0)) / 3.0;
    const double sl = eval::short_bucket_accuracy(l.test.buckets).value_or(0);
    const double ss = eval::short_bucket_accuracy(s.test.buckets).value_or(0);
    short_every_seed &= ss > sl;
    per_seed += " seed" + std::to_string(seed) + " short " + fixed(sl, 3) + "->" + fixed(ss, 3) + ";";
    tr_lstm += l.test.transitions.gt_rate().value_or(0) / 3.0;
    tr_ssm += s.test.transitions.gt_rate().value_or(0) / 3.0;
  }
  Headline h;
  h.ablation.pass = amb_gain >= 0.10 && short_every_seed && tr_ssm > tr_lstm && secs < 900;
  h.ablation.detail = "mean length " + fixed(frames / 100.0, 0) + " frames; ambiguity gain " +
                      fixed(100 * amb_gain, 1) + " pp;" + per_seed + " transition " + fixed(tr_lstm, 3) + "->" +
                      fixed(tr_ssm, 3) + "; " + fixed(secs, 0) + " s";

  const auto acausal = cli::run_ablation(ds, splits, cfg, seeds, {"acausal-ssm"}, ambiguity);
  std::cout << cli::ablation_csv(acausal) << std::flush;
  double causal_mean = 0, acausal_mean = 0;
  for (auto seed : seeds) {
    causal_mean += main.run("ssm", seed).test.frame.accuracy / 3.0;
    acausal_mean += acausal.run("acausal-ssm", seed).test.frame.accuracy / 3.0;
  }
  h.acausal.pass = acausal_mean >= causal_mean - 0.005;
  h.acausal.detail = "causal " + fixed(causal_mean) + ", acausal " + fixed(acausal_mean);
  return h;
}

int run_cli_args(std::vector<std::string> args) {
  args.insert(args.begin(), "phaseflow");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run_cli(static_cast<int>(argv.size()), argv.data());
}

Outcome ablate_determinism() {
  const fs::path dir = fs::temp_directory_path() / "phaseflow_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "cfg.txt") << "hidden_dim = 8\nepochs = 2\nbatch_size = 4\n";
  if (run_cli_args({"synth", "--videos", "10", "--seed", "2", "--out", (dir / "ds").string()}) != 0)
    return {false, "synth failed"};
  std::vector<std::string> outputs;
  for (const char* threads : {"1", "4", "1"}) {
    setenv("PHASEFLOW_THREADS", threads, 1);
    const fs::path out = dir / (std::string("ab_") + threads + "_" + std::to_string(outputs.size()));
    const int rc = run_cli_args({"ablate", "--data", (dir / "ds").string(), "--config", (dir / "cfg.txt").string(),
                                 "--seeds", "1,2", "--arms", "lstm,ssm,acausal-ssm", "--out", out.string()});
    if (rc != 0) return {false, "ablate exited with " + std::to_string(rc)};
    outputs.push_back(slurp(out / "ablation.json") + slurp(out / "ablation.csv"));
  }
  unsetenv("PHASEFLOW_THREADS");
  fs::remove_all(dir);
  const bool same = outputs[0] == outputs[1] && outputs[1] == outputs[2];
  return {same, same ? "ablation.json and ablation.csv identical for 1, 4 and 1 threads" : "outputs differ"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string root = ".";
  bool skip_headline = false;
  app.add_option("--root", root, "Repository root");
  app.add_flag("--skip-headline", skip_headline, "Skip the long synthetic ablation");
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::warn);

  const auto grammar = data::default_grammar_mgh_like();
  int failures = 0;
  auto report = [&](const std::string& name, const Outcome& o) {
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
    failures += !o.pass;
  };
  report("non-reproducibility statement", readme_statement(root));
  report("gradient fidelity", gradient_fidelity());
  report("hmm oracle", hmm_oracle());
  report("csl oracle", csl_oracle());
  report("gabor oracle", gabor_oracle());
  report("metric oracle", metric_oracle());
  report("causality", causality(grammar));
  report("baseline degeneracy", baseline_identity(grammar));
  report("ablate determinism", ablate_determinism());
  if (!skip_headline) {
    const auto h = headline(grammar);
    report("headline synthetic ablation", h.ablation);
    report("acausal direction", h.acausal);
  }
  return failures == 0 ? 0 : 1;
}
