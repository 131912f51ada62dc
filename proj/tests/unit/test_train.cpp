#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <map>
#include <random>
#include <set>
#include <vector>

#include "phaseflow/error.hpp"
#include "phaseflow/parallel.hpp"
#include "phaseflow/train.hpp"

using namespace phaseflow;
using namespace phaseflow::train;

namespace {

const PhaseTaxonomy kTax({"a", "b", "c"});

/// Three phases in order, features one-hot plus noise.
std::vector<FeatureSequence> separable(std::size_t count, std::uint64_t seed, double noise = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0, static_cast<float>(noise));
  std::uniform_int_distribution<std::size_t> dur(5, 20);
  std::vector<FeatureSequence> out;
  for (std::size_t i = 0; i < count; ++i) {
    FeatureSequence s;
    s.video_id = "s" + std::to_string(seed) + "_" + std::to_string(i);
    s.features = Matrix<float>(0, 4);
    for (PhaseId p = 0; p < 3; ++p) {
      const std::size_t d = dur(rng);
      for (std::size_t k = 0; k < d; ++k) {
        std::vector<float> v(4);
        for (auto& x : v) x = n(rng);
        v[p] += 1.0f;
        s.features.append_row(v);
        s.labels.push_back(p);
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

ExperimentConfig small_config(const std::string& features = "csl,hmm", bool acausal = false) {
  ExperimentConfig c;
  c.hidden_dim = 8;
  c.embed_dim = 4;
  c.batch_size = 4;
  c.learning_rate = 0.01;
  c.epochs = 3;
  c.features = FeatureSet::parse(features);
  c.acausal = acausal;
  c.gabor_scales = 2;
  return c;
}

}  // namespace

TEST_CASE("scheduler covers every window once, in order, distinct videos per step") {
  std::mt19937_64 rng(1);
  std::vector<std::size_t> lengths;
  std::uniform_int_distribution<std::size_t> len(1, 100);
  for (int i = 0; i < 64; ++i) lengths.push_back(len(rng));
  const auto schedule = batch_scheduler(lengths, 32, 8, rng);

  std::map<std::size_t, std::size_t> next_start;
  std::set<std::size_t> groups_seen;
  for (const auto& b : schedule) {
    std::set<std::size_t> vids;
    for (const auto& w : b.windows) {
      CHECK(vids.insert(w.video).second);
      CHECK(w.start == next_start[w.video]);
      CHECK(w.length == std::min<std::size_t>(8, lengths[w.video] - w.start));
      CHECK(w.start == b.windows.front().start);
      next_start[w.video] = w.start + w.length;
    }
    CHECK(b.group_start == (b.windows.front().start == 0));
    if (b.group_start) {
      CHECK(groups_seen.insert(b.group).second);
      CHECK(b.windows.size() == 32);
    }
  }
  CHECK(groups_seen.size() == 2);
  for (std::size_t v = 0; v < 64; ++v) CHECK(next_start[v] == lengths[v]);

  std::vector<std::size_t> one{13};
  const auto single = batch_scheduler(one, 32, 8, rng);
  REQUIRE(single.size() == 2);
  CHECK(single[1].windows[0].length == 5);
  CHECK_THROWS_AS(batch_scheduler(one, 0, 8, rng), UsageError);
}

TEST_CASE("zero epochs keeps the initialization") {
  auto c = small_config();
  c.epochs = 0;
  const auto videos = separable(4, 1);
  const auto r = fit(c, kTax, videos, {});
  CHECK(r.best_epoch == 0);
  CHECK(r.curve.empty());
  CHECK(r.best.params() == make_run(c, kTax, videos).model.params());
}

TEST_CASE("one window gives one optimizer step") {
  auto c = small_config();
  c.proximal_weight = 0;
  c.batch_size = 1;
  FeatureSequence v = separable(1, 2).front();
  v.features = Matrix<float>(0, 4);
  v.labels.clear();
  for (std::size_t t = 0; t < 8; ++t) {
    v.features.append_row(std::vector<float>{1, 0, 0, 0});
    v.labels.push_back(0);
  }
  auto run = make_run(c, kTax, {v});
  const auto before = run.model.params();
  train_epoch(run, {v});
  CHECK(run.optimizer.steps() == 1);
  CHECK(run.epoch == 1);
  CHECK_FALSE(run.model.params() == before);
  REQUIRE(run.previous.size() == 1);
  CHECK(run.previous[0].rows() == 8);
}

TEST_CASE("window loss by hand") {
  auto params = nn::ModelParams<float>::zeros(1, 1, 2);
  params.head_bias = {0.0f, std::log(3.0f)};
  nn::WindowTape<float> tape(params, {nn::LstmState<float>::zeros(1)});
  const std::vector<float> x{1.0f};
  tape.step(std::vector<std::span<const float>>{x});
  tape.step(std::vector<std::span<const float>>{x});
  const std::vector<float> prev{0.5f, 0.5f};
  const std::vector<std::vector<nn::FrameTarget>> targets{{{0, prev}, {1, {}}}};
  // m = (.25, .75) each frame: -log .25 + 2 (.25^2 * 2) - log .75.
  const double expected = -std::log(0.25) + 2.0 * (0.0625 + 0.0625) - std::log(0.75);
  CHECK(tape.loss(targets, 2.0f) == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("proximal term vanishes at the previous prediction") {
  auto rng = make_rng(4, "init");
  const auto params = nn::ModelParams<float>::initialize(2, 3, 3, rng);
  std::vector<std::vector<float>> xs{{0.5f, -1.f}, {1.f, 0.2f}, {-0.3f, 0.4f}};
  auto run = [&] {
    nn::WindowTape<float> tape(params, {nn::LstmState<float>::zeros(3)});
    Matrix<float> probs(0, 3);
    for (const auto& x : xs) probs.append_row(tape.step(std::vector<std::span<const float>>{x}).row(0));
    return std::make_pair(std::move(tape), probs);
  };
  auto [tape, probs] = run();
  std::vector<nn::FrameTarget> with, without;
  for (std::size_t t = 0; t < 3; ++t) {
    with.push_back({static_cast<PhaseId>(t), probs.row(t)});
    without.push_back({static_cast<PhaseId>(t), {}});
  }
  const std::vector<std::vector<nn::FrameTarget>> a{with}, b{without};
  CHECK(tape.loss(a, 0.7f) == tape.loss(b, 0.7f));
  auto ga = nn::ModelParams<float>::zeros(2, 3, 3), gb = ga;
  tape.backward(a, 0.7f, 1.0f, ga);
  tape.backward(b, 0.7f, 1.0f, gb);
  CHECK(ga == gb);
}

TEST_CASE("training forward equals inference bit for bit") {
  const auto videos = separable(3, 5);
  for (const bool acausal : {false, true}) {
    auto c = small_config("all", acausal);
    auto run = make_run(c, kTax, videos);
    train_epoch(run, videos);
    for (const auto& v : videos) {
      const auto windows = forward_windows(run.model, v);
      const auto whole = model::infer(run.model, v).stream.probs.cast<float>();
      CHECK(windows == whole);
    }
  }
}

TEST_CASE("reverse transition only in acausal mode") {
  const auto videos = separable(2, 6);
  CHECK(make_run(small_config(), kTax, videos).model.reverse_transition() == nullptr);
  CHECK(make_run(small_config("csl", true), kTax, videos).model.reverse_transition() != nullptr);
  CHECK(make_run(small_config("none"), kTax, videos).model.transition() != nullptr);
}

TEST_CASE("fit is deterministic across thread counts") {
  const auto train_set = separable(6, 7);
  const auto val = separable(2, 8);
  const auto c = small_config("all", true);
  setenv("PHASEFLOW_THREADS", "1", 1);
  const auto a = fit(c, kTax, train_set, val);
  setenv("PHASEFLOW_THREADS", "4", 1);
  const auto b = fit(c, kTax, train_set, val);
  unsetenv("PHASEFLOW_THREADS");
  CHECK(a.best.params() == b.best.params());
  CHECK(a.best_epoch == b.best_epoch);
  REQUIRE(a.curve.size() == b.curve.size());
  for (std::size_t e = 0; e < a.curve.size(); ++e) {
    CHECK(a.curve[e].train_loss == b.curve[e].train_loss);
    CHECK(a.curve[e].validation_accuracy == b.curve[e].validation_accuracy);
  }
}

TEST_CASE("separable data is learned") {
  auto c = small_config();
  c.epochs = 15;
  const auto train_set = separable(16, 9);
  const auto val = separable(4, 10);
  const auto r = fit(c, kTax, train_set, val);
  CHECK(r.curve.front().train_loss > r.curve.back().train_loss);
  REQUIRE(frame_accuracy(r.best, val).has_value());
  CHECK(*frame_accuracy(r.best, val) > 0.95);
  std::size_t best = 0;
  for (std::size_t e = 0; e < r.curve.size(); ++e)
    if (*r.curve[e].validation_accuracy > *r.curve[best].validation_accuracy) best = e;
  CHECK(r.best_epoch == best + 1);
}

TEST_CASE("fit rejects overlapping splits and bad inputs") {
  const auto videos = separable(3, 11);
  CHECK_THROWS_AS(fit(small_config(), kTax, videos, {videos[0]}), ValidationError);
  auto c = small_config();
  c.embed_dim = 5;
  CHECK_THROWS_AS(make_run(c, kTax, videos), ValidationError);
  auto unlabeled = videos;
  unlabeled[1].labels.clear();
  CHECK_THROWS_AS(make_run(small_config(), kTax, unlabeled), ValidationError);
}

TEST_CASE("epoch log line") {
  EpochLog log{3, 0.5, std::nullopt, 1.25, 40};
  const auto line = epoch_log_json(log);
  CHECK(line.find('\n') == std::string::npos);
  CHECK(line.find("\"validation_accuracy\":null") != std::string::npos);
  CHECK(line.find("\"epoch\":3") != std::string::npos);
}
