#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "phaseflow/cli.hpp"
#include "phaseflow/data.hpp"
#include "phaseflow/error.hpp"
#include "phaseflow/model.hpp"

using namespace phaseflow;
namespace fs = std::filesystem;

namespace {

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "phaseflow");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run_cli(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct Workspace {
  fs::path root = fs::temp_directory_path() / "phaseflow_test_cli";
  Workspace() {
    fs::remove_all(root);
    fs::create_directories(root);
    std::ofstream(root / "tiny.cfg") << "hidden_dim = 4\nepochs = 1\nbatch_size = 4\ngabor_scales = 2\n";
  }
  ~Workspace() { fs::remove_all(root); }
  std::string operator/(const std::string& s) const { return (root / s).string(); }
};

}  // namespace

TEST_CASE("synth, train, infer, eval pipeline") {
  Workspace ws;
  REQUIRE(run({"synth", "--videos", "10", "--seed", "3", "--out", ws / "ds"}) == 0);
  const auto ds = data::read_dataset(ws / "ds");
  CHECK(ds.videos.size() == 10);
  const auto manifest = data::read_manifest(fs::path(ws / "ds") / "manifest.json");
  CHECK(manifest.splits.train.size() == 6);
  CHECK(manifest.grammar->emission_seed == 3);

  REQUIRE(run({"train", "--data", ws / "ds", "--config", ws / "tiny.cfg", "--out", ws / "ck", "--features",
               "csl,hmm"}) == 0);
  for (const char* f : {"config.txt", "train_log.jsonl", "epoch_001.phck", "best.phck", "transition.csv"})
    CHECK(fs::exists(fs::path(ws / "ck") / f));
  const auto m = model::load_checkpoint(ws / "ck/best.phck");
  CHECK(m.config().features == FeatureSet::parse("csl,hmm"));
  CHECK(m.config().hidden_dim == 4);

  REQUIRE(run({"infer", "--ckpt", ws / "ck/best.phck", "--data", ws / "ds", "--out", ws / "pred", "--split",
               "test"}) == 0);
  CHECK(fs::exists(fs::path(ws / "pred") / "video_008.csv"));
  CHECK_FALSE(fs::exists(fs::path(ws / "pred") / "video_000.csv"));
  CHECK(run({"infer", "--ckpt", ws / "ck/best.phck", "--data", ws / "ds", "--out", ws / "pred2", "--hmm-smooth"}) ==
        0);
  CHECK(run({"infer", "--ckpt", ws / "ck/best.phck", "--data", ws / "ds", "--out", ws / "pred3", "--acausal"}) ==
        2);

  REQUIRE(run({"eval", "--pred", ws / "pred", "--data", ws / "ds", "--out", ws / "report"}) == 0);
  const auto j = nlohmann::json::parse(slurp(fs::path(ws / "report") / "metrics.json"));
  CHECK(j["videos_evaluated"] == 2);
  CHECK(fs::exists(fs::path(ws / "report") / "timelines" / "video_009.svg"));
  CHECK(fs::exists(fs::path(ws / "report") / "confusion.csv"));
  CHECK_FALSE(fs::exists(fs::path(ws / "report") / ".phaseflow.lock"));
}

TEST_CASE("acausal train and infer") {
  Workspace ws;
  REQUIRE(run({"synth", "--videos", "5", "--seed", "4", "--out", ws / "ds"}) == 0);
  REQUIRE(run({"train", "--data", ws / "ds", "--config", ws / "tiny.cfg", "--out", ws / "ck", "--features", "csl",
               "--acausal"}) == 0);
  CHECK(run({"infer", "--ckpt", ws / "ck/best.phck", "--data", ws / "ds", "--out", ws / "pred"}) == 2);
  CHECK(run({"infer", "--ckpt", ws / "ck/best.phck", "--data", ws / "ds", "--out", ws / "pred", "--acausal"}) == 0);
}

TEST_CASE("exit codes") {
  Workspace ws;
  CHECK(run({"synth", "--bogus"}) == 2);
  CHECK(run({}) == 2);
  CHECK(run({"train", "--data", ws / "missing", "--out", ws / "ck"}) == 3);
  std::ofstream(ws / "bad.cfg") << "hiden_dim = 4\n";
  CHECK(run({"train", "--data", ws / "missing", "--config", ws / "bad.cfg", "--out", ws / "ck2"}) == 2);
  CHECK(run({"ablate", "--data", ws / "missing", "--seeds", "1,x", "--out", ws / "ab"}) == 2);
  CHECK(run({"ablate", "--data", ws / "missing", "--arms", "lstm,nope", "--out", ws / "ab"}) == 2);

  fs::create_directories(ws / "locked");
  std::ofstream(ws / "locked/.phaseflow.lock") << "";
  CHECK(run({"synth", "--videos", "2", "--out", ws / "locked"}) == 2);

  REQUIRE(run({"synth", "--videos", "2", "--out", ws / "ds"}) == 0);
  std::ofstream(ws / "ds/video_001/labels.csv", std::ios::app) << "garbage\n";
  CHECK(run({"train", "--data", ws / "ds", "--config", ws / "tiny.cfg", "--out", ws / "ck3"}) == 3);
}

TEST_CASE("synth is reproducible") {
  Workspace ws;
  REQUIRE(run({"synth", "--videos", "3", "--seed", "9", "--out", ws / "a"}) == 0);
  REQUIRE(run({"synth", "--videos", "3", "--seed", "9", "--out", ws / "b"}) == 0);
  for (const char* f : {"manifest.json", "video_002/features.bin", "video_002/labels.csv", "video_000/meta.json"})
    CHECK(slurp(fs::path(ws / "a") / f) == slurp(fs::path(ws / "b") / f));
  REQUIRE(run({"synth", "--videos", "3", "--seed", "9", "--out", ws / "a"}) == 0);
  CHECK(slurp(fs::path(ws / "a") / "video_001/features.bin") == slurp(fs::path(ws / "b") / "video_001/features.bin"));
}

TEST_CASE("ablation outputs") {
  Workspace ws;
  REQUIRE(run({"synth", "--videos", "10", "--seed", "5", "--out", ws / "ds"}) == 0);
  REQUIRE(run({"ablate", "--data", ws / "ds", "--config", ws / "tiny.cfg", "--seeds", "1,2", "--arms", "lstm,csl",
               "--out", ws / "ab"}) == 0);
  const auto csv = slurp(fs::path(ws / "ab") / "ablation.csv");
  std::istringstream lines(csv);
  std::string header;
  std::getline(lines, header);
  CHECK(header.find("ambiguity_accuracy") != std::string::npos);
  std::size_t rows = 0;
  for (std::string l; std::getline(lines, l);) ++rows;
  CHECK(rows == 2 * 2 + 2);
  const auto j = nlohmann::json::parse(slurp(fs::path(ws / "ab") / "ablation.json"));
  CHECK(j["arms"].size() == 2);
  CHECK(fs::exists(fs::path(ws / "ab") / "runs" / "csl_seed2" / "train_log.jsonl"));

  CHECK(cli::parse_seeds("3, 4").size() == 2);
  CHECK_THROWS_AS(cli::parse_seeds(""), UsageError);
}

TEST_CASE("arm configs") {
  ExperimentConfig base;
  base.features = FeatureSet::all();
  CHECK(cli::arm_config(base, "lstm", 2).features.empty());
  CHECK(cli::arm_config(base, "lstm", 2).seed == 2);
  CHECK(cli::arm_config(base, "gabor", 1).features == FeatureSet{false, true, false});
  CHECK(cli::arm_config(base, "ssm", 1).features == FeatureSet::all());
  const auto ac = cli::arm_config(base, "acausal-ssm", 1);
  CHECK(ac.acausal);
  CHECK(ac.features == FeatureSet::all());
  CHECK_THROWS_AS(cli::arm_config(base, "unknown", 1), UsageError);
}
