#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "phaseflow/core.hpp"
#include "phaseflow/error.hpp"

using namespace phaseflow;

namespace {

FeatureSequence small_sequence(std::size_t T, std::size_t D) {
  FeatureSequence s;
  s.video_id = "v";
  s.features = Matrix<float>(T, D, 0.5f);
  s.labels.assign(T, 0);
  return s;
}

bool message_contains(const std::exception& e, const std::string& needle) {
  return std::string(e.what()).find(needle) != std::string::npos;
}

}  // namespace

TEST_CASE("taxonomy presets") {
  CHECK(PhaseTaxonomy::mgh100().size() == 13);
  CHECK(PhaseTaxonomy::cholec80().size() == 7);
  CHECK(PhaseTaxonomy::mgh100().name(5) == "Clip Cystic Artery");
  CHECK_THROWS_AS(PhaseTaxonomy({"a", "b", "a"}), ValidationError);
  CHECK_THROWS_AS(PhaseTaxonomy({"a"}), ValidationError);
  CHECK_THROWS_AS(PhaseTaxonomy({"a", ""}), ValidationError);
}

TEST_CASE("validate_sequence") {
  const PhaseTaxonomy tax({"a", "b", "c"});
  auto s = small_sequence(5, 3);
  CHECK_NOTHROW(validate_sequence(s, tax));

  SUBCASE("label out of range names the frame") {
    s.labels[3] = 7;
    try {
      validate_sequence(s, tax);
      FAIL("expected throw");
    } catch (const ValidationError& e) {
      CHECK(message_contains(e, "frame 3"));
    }
  }
  SUBCASE("non-finite feature names the frame") {
    s.features(2, 1) = std::numeric_limits<float>::quiet_NaN();
    try {
      validate_sequence(s, tax);
      FAIL("expected throw");
    } catch (const ValidationError& e) {
      CHECK(message_contains(e, "frame 2"));
    }
  }
  SUBCASE("label count mismatch") {
    s.labels.pop_back();
    CHECK_THROWS_AS(validate_sequence(s, tax), ValidationError);
  }
  SUBCASE("empty") {
    CHECK_THROWS_AS(validate_sequence(small_sequence(0, 3), tax), ValidationError);
  }
  SUBCASE("bad fps") {
    s.fps = 0;
    CHECK_THROWS_AS(validate_sequence(s, tax), ValidationError);
  }
  SUBCASE("unlabelled is fine") {
    s.labels.clear();
    CHECK_NOTHROW(validate_sequence(s, tax));
  }
}

TEST_CASE("ProbVector") {
  CHECK_NOTHROW(ProbVector({0.25, 0.75}));
  CHECK_THROWS_AS(ProbVector({0.5, 0.6}), ValidationError);
  CHECK_THROWS_AS(ProbVector({-0.1, 1.1}), ValidationError);
  CHECK_THROWS_AS(ProbVector({}), ValidationError);
  CHECK_NOTHROW(ProbVector({0.5, 0.5 + 5e-7}));

  CHECK(ProbVector({0.4, 0.3, 0.3}).argmax() == 0);
  CHECK(ProbVector({0.3, 0.4, 0.3}).argmax() == 1);
  CHECK(ProbVector({0.2, 0.4, 0.4}).argmax() == 1);
  CHECK(ProbVector({1.0 / 3, 1.0 / 3, 1.0 / 3}).argmax() == 0);
}

TEST_CASE("softmax") {
  const std::vector<double> z{1.0, 2.0, 3.0};
  const auto p = ProbVector::softmax<double>(z);
  const double s = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(std::exp(z[i]) / s).epsilon(1e-14));

  const std::vector<double> big{1000.0, 1000.0};
  const auto q = ProbVector::softmax<double>(big);
  CHECK(q[0] == doctest::Approx(0.5));

  const std::vector<float> zf{0.f, std::log(3.f)};
  std::vector<float> out(2);
  softmax_into<float>(zf, out);
  CHECK(out[1] == doctest::Approx(0.75f));

  const std::vector<double> bad{1.0, std::numeric_limits<double>::infinity()};
  CHECK_THROWS_AS(ProbVector::softmax<double>(bad), NumericError);
}

TEST_CASE("argmax ties") {
  const std::vector<float> v{0.1f, 0.7f, 0.7f};
  CHECK(argmax_lowest<float>(v) == 1);
}

TEST_CASE("FeatureSet") {
  CHECK(FeatureSet::parse("hmm,csl") == FeatureSet{true, false, true});
  CHECK(FeatureSet::parse("all") == FeatureSet::all());
  CHECK(FeatureSet::parse("none").empty());
  CHECK(FeatureSet::parse("gabor,hmm,csl").to_string() == "csl,gabor,hmm");
  CHECK(FeatureSet{}.to_string() == "none");
  CHECK_THROWS_AS(FeatureSet::parse("csl,fourier"), UsageError);
}

TEST_CASE("config round trip") {
  ExperimentConfig c;
  c.hidden_dim = 17;
  c.learning_rate = 0.0123;
  c.features = FeatureSet::parse("csl,hmm");
  c.acausal = true;
  c.proximal_weight = 0.3;
  c.seed = 99;
  c.csl_levels = {0.1, 0.9};
  const auto back = parse_config(format_config(c));
  CHECK(back == c);

  const auto d = parse_config("# comment\nepochs = 3\n\nfeatures = all\n");
  CHECK(d.epochs == 3);
  CHECK(d.features == FeatureSet::all());
  CHECK(d.hidden_dim == ExperimentConfig{}.hidden_dim);

  CHECK_THROWS_AS(parse_config("epoch = 3\n"), UsageError);
  CHECK_THROWS_AS(parse_config("epochs = three\n"), UsageError);
  CHECK_THROWS_AS(parse_config("just a line\n"), UsageError);
}

TEST_CASE("format_real round trips") {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456.789, 0.0}) CHECK(std::stod(format_real(v)) == v);
}

TEST_CASE("make_rng streams") {
  auto a = make_rng(1, "init");
  auto b = make_rng(1, "init");
  auto c = make_rng(1, "batching");
  auto d = make_rng(2, "init");
  const auto x = a();
  CHECK(x == b());
  CHECK(x != c());
  CHECK(x != d());
}
