#include "phaseflow/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "phaseflow/error.hpp"
#include "phaseflow/model.hpp"
#include "phaseflow/parallel.hpp"
#include "phaseflow/train.hpp"

namespace phaseflow::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

OutputLock::OutputLock(const fs::path& dir) : path_(dir / ".phaseflow.lock") {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw UsageError("cannot create output directory " + dir.string());
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST)
      throw UsageError("output directory " + dir.string() + " is locked by another phaseflow run (remove " +
                       path_.string() + " if that run is gone)");
    throw UsageError("cannot create lock file " + path_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

OutputLock::~OutputLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw UsageError("cannot write " + path.string());
  os << text;
}

ExperimentConfig load_config(const std::string& path) {
  ExperimentConfig config = path.empty() ? ExperimentConfig{} : parse_config(read_text(path));
  config.validate();
  return config;
}

std::vector<PhaseId> ambiguity_phases_of(const fs::path& data_dir) {
  std::vector<PhaseId> out;
  if (!fs::exists(data_dir / "manifest.json")) return out;
  const auto manifest = data::read_manifest(data_dir / "manifest.json");
  if (!manifest.grammar) return out;
  for (const auto& group : manifest.grammar->ambiguity_groups) out.insert(out.end(), group.begin(), group.end());
  std::sort(out.begin(), out.end());
  return out;
}

std::string fmt(std::optional<double> v) { return v ? format_real(*v) : std::string(); }

// ---------------------------------------------------------------------------
// Commands

int cmd_synth(const std::string& grammar_spec, std::size_t videos, std::uint64_t seed, const fs::path& out) {
  OutputLock lock(out);
  data::WorkflowGrammar grammar = data::load_grammar(grammar_spec);
  if (!grammar.explicit_means) {
    grammar.emission_seed = seed;
    grammar.finalize();
  }
  const auto seqs = data::generate_dataset(grammar, videos, seed);
  data::write_dataset(out, seqs, grammar.taxonomy, seed);
  std::vector<std::string> ids;
  for (const auto& s : seqs) ids.push_back(s.video_id);
  data::Manifest manifest;
  manifest.seed = seed;
  manifest.grammar = grammar;
  manifest.splits = data::default_splits(ids);
  data::write_manifest(out / "manifest.json", manifest);
  spdlog::info("wrote {} videos to {}", seqs.size(), out.string());
  return kSuccess;
}

int cmd_train(const fs::path& data_dir, const std::string& config_path, const fs::path& out,
              const std::optional<std::string>& features, bool acausal) {
  ExperimentConfig config = load_config(config_path);
  if (features) config.features = FeatureSet::parse(*features);
  if (acausal) config.acausal = true;
  config.validate();
  OutputLock lock(out);
  const auto dataset = data::read_dataset(data_dir);
  const auto splits = data::dataset_splits(data_dir, dataset);
  const auto train_set = data::select(dataset, splits.train);
  const auto val_set = data::select(dataset, splits.validation);
  write_text(out / "config.txt", format_config(config));

  std::ofstream log(out / "train_log.jsonl", std::ios::trunc);
  if (!log) throw UsageError("cannot write " + (out / "train_log.jsonl").string());
  train::FitHooks hooks;
  hooks.on_epoch = [&](const train::EpochLog& entry, const model::SsmLstm& m, bool best) {
    log << train::epoch_log_json(entry) << '\n' << std::flush;
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03zu.phck", entry.epoch);
    model::save_checkpoint((out / name).string(), m);
    if (best) model::save_checkpoint((out / "best.phck").string(), m);
  };
  const auto result = train::fit(config, dataset.taxonomy, train_set, val_set, hooks);
  if (config.epochs == 0) model::save_checkpoint((out / "best.phck").string(), result.best);
  if (result.best.transition()) {
    std::ofstream os(out / "transition.csv", std::ios::trunc);
    result.best.transition()->write_csv(os, dataset.taxonomy);
  }
  spdlog::info("best epoch {}", result.best_epoch);
  return kSuccess;
}

std::vector<std::string> split_ids(const data::Dataset& dataset, const data::Splits& splits, const std::string& split) {
  if (split == "train") return splits.train;
  if (split == "validation") return splits.validation;
  if (split == "test") return splits.test;
  if (split == "all") {
    std::vector<std::string> ids;
    for (const auto& v : dataset.videos) ids.push_back(v.video_id);
    return ids;
  }
  throw UsageError("unknown split '" + split + "' (train, validation, test, all)");
}

int cmd_infer(const fs::path& ckpt, const fs::path& data_dir, const fs::path& out, bool acausal, bool hmm_smooth,
              const std::string& split) {
  const auto model = model::load_checkpoint(ckpt.string());
  if (acausal && !model.acausal()) throw UsageError("--acausal given but the checkpoint was trained causally");
  if (!acausal && model.acausal()) throw UsageError("the checkpoint needs acausal features; pass --acausal");
  if (hmm_smooth && !model.transition()) throw UsageError("the checkpoint holds no transition matrix");
  OutputLock lock(out);
  const auto dataset = data::read_dataset(data_dir);
  if (!(dataset.taxonomy == model.taxonomy())) throw ValidationError("dataset taxonomy differs from the checkpoint's");
  const auto videos = data::select(dataset, split_ids(dataset, data::dataset_splits(data_dir, dataset), split));
  write_text(out / "config.txt", format_config(model.config()));

  std::vector<std::string> texts(videos.size());
  parallel_for(videos.size(), [&](std::size_t i) {
    auto r = model::infer(model, videos[i]);
    if (hmm_smooth) r.labels = model::hmm_smooth_posthoc(r.stream, *model.transition());
    std::ostringstream os;
    model::write_predictions(os, r);
    texts[i] = os.str();
  });
  for (std::size_t i = 0; i < videos.size(); ++i) write_text(out / (videos[i].video_id + ".csv"), texts[i]);
  spdlog::info("wrote predictions for {} videos", videos.size());
  return kSuccess;
}

int cmd_eval(const fs::path& pred_dir, const fs::path& data_dir, const fs::path& out) {
  OutputLock lock(out);
  const auto dataset = data::read_dataset(data_dir);
  std::vector<fs::path> files;
  if (!fs::is_directory(pred_dir)) throw ValidationError("prediction directory not found: " + pred_dir.string());
  for (const auto& e : fs::directory_iterator(pred_dir))
    if (e.is_regular_file() && e.path().extension() == ".csv" && e.path().stem() != "config") files.push_back(e.path());
  std::sort(files.begin(), files.end());

  std::vector<eval::VideoReport> reports;
  std::vector<eval::Timeline> timelines;
  for (const auto& f : files) {
    const std::string id = f.stem().string();
    const auto& video = dataset.find(id);
    if (!video.has_labels()) throw ValidationError("video '" + id + "' has no ground truth");
    std::ifstream is(f);
    const auto table = model::read_predictions(is);
    if (table.probs.cols() != dataset.taxonomy.size())
      throw ValidationError(f.string() + ": expected " + std::to_string(dataset.taxonomy.size()) + " phases");
    if (table.labels.size() != video.length())
      throw ValidationError(f.string() + ": " + std::to_string(table.labels.size()) + " predictions for " +
                            std::to_string(video.length()) + " frames");
    reports.push_back(eval::evaluate_video(id, video.labels, table.labels, dataset.taxonomy.size()));
    eval::Timeline tl{id, video.labels, table.labels, {}};
    for (std::size_t t = 0; t < table.probs.rows(); ++t) {
      auto row = table.probs.row(t);
      tl.confidence.push_back(*std::max_element(row.begin(), row.end()));
    }
    timelines.push_back(std::move(tl));
  }
  const auto report = eval::aggregate(dataset.taxonomy, std::move(reports));
  eval::render_report(out, report, timelines);
  spdlog::info("evaluated {} videos", report.videos.size());
  return kSuccess;
}

int cmd_ablate(const fs::path& data_dir, const std::string& config_path, const std::string& seeds_text,
               const fs::path& out, const std::string& arms_text) {
  const ExperimentConfig base = load_config(config_path);
  const auto seeds = parse_seeds(seeds_text);
  std::vector<std::string> arms;
  if (arms_text.empty()) arms = default_arms();
  else {
    std::stringstream ss(arms_text);
    for (std::string a; std::getline(ss, a, ',');) arms.push_back(a);
  }
  for (const auto& a : arms) arm_config(base, a, 1);
  OutputLock lock(out);
  const auto dataset = data::read_dataset(data_dir);
  const auto splits = data::dataset_splits(data_dir, dataset);
  write_text(out / "config.txt", format_config(base));
  const auto result =
      run_ablation(dataset, splits, base, seeds, arms, ambiguity_phases_of(data_dir), out / "runs");
  write_text(out / "ablation.csv", ablation_csv(result));
  write_text(out / "ablation.json", ablation_json(result));
  return kSuccess;
}

}  // namespace

// ---------------------------------------------------------------------------
// Ablation

const std::vector<std::string>& default_arms() {
  static const std::vector<std::string> arms = {"lstm", "gabor", "csl", "hmm", "ssm", "acausal-ssm"};
  return arms;
}

ExperimentConfig arm_config(const ExperimentConfig& base, const std::string& arm, std::uint64_t seed) {
  ExperimentConfig c = base;
  c.seed = seed;
  c.acausal = false;
  if (arm == "lstm") c.features = {};
  else if (arm == "gabor") c.features = {false, true, false};
  else if (arm == "csl") c.features = {true, false, false};
  else if (arm == "hmm") c.features = {false, false, true};
  else if (arm == "ssm") c.features = FeatureSet::all();
  else if (arm == "acausal-ssm") {
    c.features = FeatureSet::all();
    c.acausal = true;
  } else
    throw UsageError("unknown ablation arm '" + arm + "' (lstm, gabor, csl, hmm, ssm, acausal-ssm)");
  return c;
}

const ArmRun& AblationResult::run(const std::string& arm, std::uint64_t seed) const {
  for (const auto& r : runs)
    if (r.arm == arm && r.seed == seed) return r;
  throw UsageError("no ablation run for arm " + arm + " seed " + std::to_string(seed));
}

AblationResult run_ablation(const data::Dataset& dataset, const data::Splits& splits, const ExperimentConfig& base,
                            const std::vector<std::uint64_t>& seeds, const std::vector<std::string>& arms,
                            const std::vector<PhaseId>& ambiguity_phases, const std::optional<fs::path>& log_dir) {
  const auto train_set = data::select(dataset, splits.train);
  const auto val_set = data::select(dataset, splits.validation);
  const auto test_set = data::select(dataset, splits.test);
  if (test_set.empty()) throw ValidationError("the test split is empty");
  AblationResult result{arms, seeds, ambiguity_phases, {}};
  for (const auto& arm : arms) {
    for (std::uint64_t seed : seeds) {
      const ExperimentConfig config = arm_config(base, arm, seed);
      spdlog::info("ablation arm {} seed {}", arm, seed);
      std::ofstream log;
      train::FitHooks hooks;
      if (log_dir) {
        const fs::path dir = *log_dir / (arm + "_seed" + std::to_string(seed));
        fs::create_directories(dir);
        log.open(dir / "train_log.jsonl", std::ios::trunc);
        hooks.on_epoch = [&](const train::EpochLog& e, const model::SsmLstm&, bool) {
          log << train::epoch_log_json(e) << '\n';
        };
      }
      const auto fitted = train::fit(config, dataset.taxonomy, train_set, val_set, hooks);
      std::vector<eval::VideoReport> reports(test_set.size());
      parallel_for(test_set.size(), [&](std::size_t i) {
        const auto r = model::infer(fitted.best, test_set[i]);
        reports[i] = eval::evaluate_video(test_set[i].video_id, test_set[i].labels, r.labels, dataset.taxonomy.size());
      });
      ArmRun run;
      run.arm = arm;
      run.seed = seed;
      run.best_epoch = fitted.best_epoch;
      if (fitted.best_epoch > 0) run.validation_accuracy = fitted.curve[fitted.best_epoch - 1].validation_accuracy;
      run.test = eval::aggregate(dataset.taxonomy, std::move(reports));
      if (!ambiguity_phases.empty())
        run.ambiguity_accuracy = eval::subset_accuracy(run.test.frame.confusion, ambiguity_phases);
      result.runs.push_back(std::move(run));
    }
  }
  return result;
}

namespace {

struct Row {
  std::vector<std::optional<double>> values;
};

const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names = {
      "accuracy",    "precision",   "recall",         "f1",         "bucket_1_3",
      "bucket_4_10", "bucket_11_30", "bucket_31_60",  "bucket_gt_60", "short_bucket_mean",
      "transition",  "transition_pred_anchored", "midpoint", "ambiguity_accuracy"};
  return names;
}

Row metrics_row(const ArmRun& r) {
  const auto& t = r.test;
  Row row;
  row.values = {t.frame.accuracy, t.frame.precision, t.frame.recall, t.frame.f1};
  for (std::size_t b = 0; b < eval::kNumBuckets; ++b) row.values.push_back(t.buckets.accuracy(b));
  row.values.push_back(eval::short_bucket_accuracy(t.buckets));
  row.values.push_back(t.transitions.gt_rate());
  row.values.push_back(t.transitions.pred_rate());
  row.values.push_back(t.midpoints.rate());
  row.values.push_back(r.ambiguity_accuracy);
  return row;
}

Row mean_row(const AblationResult& result, const std::string& arm) {
  Row mean;
  mean.values.assign(metric_names().size(), std::nullopt);
  std::vector<double> sum(metric_names().size(), 0.0);
  std::vector<int> count(metric_names().size(), 0);
  for (std::uint64_t seed : result.seeds) {
    const Row r = metrics_row(result.run(arm, seed));
    for (std::size_t k = 0; k < r.values.size(); ++k)
      if (r.values[k]) {
        sum[k] += *r.values[k];
        ++count[k];
      }
  }
  for (std::size_t k = 0; k < sum.size(); ++k)
    if (count[k]) mean.values[k] = sum[k] / count[k];
  return mean;
}

}  // namespace

std::string ablation_csv(const AblationResult& result) {
  std::ostringstream os;
  os << "arm,seed,best_epoch,validation_accuracy";
  for (const auto& n : metric_names()) os << ',' << n;
  os << '\n';
  for (const auto& arm : result.arms) {
    for (std::uint64_t seed : result.seeds) {
      const auto& r = result.run(arm, seed);
      os << arm << ',' << seed << ',' << r.best_epoch << ',' << fmt(r.validation_accuracy);
      for (const auto& v : metrics_row(r).values) os << ',' << fmt(v);
      os << '\n';
    }
    os << arm << ",mean,,";
    for (const auto& v : mean_row(result, arm).values) os << ',' << fmt(v);
    os << '\n';
  }
  return os.str();
}

std::string ablation_json(const AblationResult& result) {
  auto to_json = [](const Row& row) {
    json j;
    for (std::size_t k = 0; k < row.values.size(); ++k)
      j[metric_names()[k]] = row.values[k] ? json(*row.values[k]) : json(nullptr);
    return j;
  };
  json j;
  j["schema_version"] = 1;
  j["seeds"] = result.seeds;
  j["ambiguity_phases"] = result.ambiguity_phases;
  j["arms"] = json::array();
  for (const auto& arm : result.arms) {
    json a;
    a["arm"] = arm;
    a["mean"] = to_json(mean_row(result, arm));
    a["runs"] = json::array();
    for (std::uint64_t seed : result.seeds) {
      const auto& r = result.run(arm, seed);
      json e = to_json(metrics_row(r));
      e["seed"] = seed;
      e["best_epoch"] = r.best_epoch;
      e["validation_accuracy"] = r.validation_accuracy ? json(*r.validation_accuracy) : json(nullptr);
      e["test_frames"] = r.test.frame.frames;
      a["runs"].push_back(e);
    }
    j["arms"].push_back(a);
  }
  return j.dump(2) + "\n";
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    std::size_t used = 0;
    try {
      seeds.push_back(std::stoull(item, &used));
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw UsageError("--seeds expects a comma-separated list of integers");
  }
  if (seeds.empty()) throw UsageError("--seeds is empty");
  return seeds;
}

// ---------------------------------------------------------------------------

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Surgical phase recognition with sufficient-statistic features", "phaseflow"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  std::string grammar = "mgh-like", out, data_dir, config_path, pred_dir, ckpt, seeds = "1,2,3", arms, split = "all";
  std::size_t videos = 100;
  std::uint64_t seed = 1;
  std::string features;
  bool acausal = false, hmm_smooth = false;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--grammar", grammar, "Preset (mgh-like) or grammar JSON file");
  synth->add_option("--videos", videos, "Number of videos")->check(CLI::PositiveNumber);
  synth->add_option("--seed", seed, "Generator seed");
  synth->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--data", data_dir, "Dataset directory")->required();
  train->add_option("--config", config_path, "Config file (key = value)");
  train->add_option("--out", out, "Checkpoint directory")->required();
  auto* features_opt = train->add_option("--features", features, "Subset of csl,gabor,hmm, 'all' or 'none'");
  train->add_flag("--acausal", acausal, "Add reverse-time statistics (offline)");

  auto* infer = app.add_subcommand("infer", "Predict phases");
  infer->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  infer->add_option("--data", data_dir, "Dataset directory")->required();
  infer->add_option("--out", out, "Prediction directory")->required();
  infer->add_flag("--acausal", acausal, "Two-pass offline inference");
  infer->add_flag("--hmm-smooth", hmm_smooth, "Post-hoc HMM filtering of the predictions");
  infer->add_option("--split", split, "train, validation, test or all");

  auto* evaluate = app.add_subcommand("eval", "Score predictions");
  evaluate->add_option("--pred", pred_dir, "Prediction directory")->required();
  evaluate->add_option("--data", data_dir, "Dataset directory")->required();
  evaluate->add_option("--out", out, "Report directory")->required();

  auto* ablate = app.add_subcommand("ablate", "Compare feature subsets across seeds");
  ablate->add_option("--data", data_dir, "Dataset directory")->required();
  ablate->add_option("--config", config_path, "Config file (key = value)");
  ablate->add_option("--seeds", seeds, "Comma-separated seeds");
  ablate->add_option("--out", out, "Output directory")->required();
  ablate->add_option("--arms", arms, "Comma-separated arms (default: all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kSuccess : kUsage;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (*synth) return cmd_synth(grammar, videos, seed, out);
    if (*train)
      return cmd_train(data_dir, config_path, out, features_opt->count() ? std::optional(features) : std::nullopt,
                       acausal);
    if (*infer) return cmd_infer(ckpt, data_dir, out, acausal, hmm_smooth, split);
    if (*evaluate) return cmd_eval(pred_dir, data_dir, out);
    if (*ablate) return cmd_ablate(data_dir, config_path, seeds, out, arms);
  } catch (const UsageError& e) {
    spdlog::error("{}", e.what());
    return kUsage;
  } catch (const ValidationError& e) {
    spdlog::error("{}", e.what());
    return kData;
  } catch (const NumericError& e) {
    spdlog::error("{}", e.what());
    return kNumeric;
  } catch (const std::filesystem::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return kUsage;
  }
  return kUsage;
}

}  // namespace phaseflow::cli
