#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vegcast/report.hpp"
#include "vegcast/vegcast.hpp"

namespace vegcast::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kDiverged = 3 };

/// Invalid invocation: bad flag combination, refusal to overwrite, mixed inputs.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kRunFormat = "vegcast-run";

/// Fully resolved settings for one command. Built from a JSON config with
/// command-line overrides already patched in.
struct RunConfig {
  std::string command;
  std::string dataset;
  std::string out;
  std::string checkpoint;
  std::string split = "ood-t";
  std::uint64_t seed = 0;  // evaluation shuffle seed
  DatasetConfig generator;
  ModelConfig model = ModelConfig::defaults("convlstm-meteo");
  TrainConfig train = TrainConfig::defaults("convlstm-meteo");
  std::vector<std::string> baselines;
  bool shuffle = false;
  int batch_size = 8;
  std::vector<std::string> inputs;
  bool allow_mixed = false;
  bool force = false;
  bool resume = false;
};

namespace detail {

inline nlohmann::json patched(nlohmann::json base, const nlohmann::json& j, const char* key) {
  if (j.contains(key)) {
    if (!j.at(key).is_object()) throw UsageError(std::string("config: '") + key + "' must be an object");
    base.merge_patch(j.at(key));
  }
  return base;
}

}  // namespace detail

/// Config layout:
///   {"seed", "dataset", "out", "checkpoint", "force", "resume",
///    "generator": DatasetConfig, "model": ModelConfig, "train": TrainConfig,
///    "evaluate": {"split", "baselines", "shuffle", "batch_size"},
///    "report": {"inputs", "allow_mixed"}}
/// Sections are patches over the defaults; a top-level seed replaces the
/// generator, model, training and shuffle seeds.
inline RunConfig run_config_from_json(const std::string& command, const nlohmann::json& j) {
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  RunConfig c;
  c.command = command;
  try {
    const nlohmann::json m = j.value("model", nlohmann::json::object());
    const std::string family = m.is_object() ? m.value("family", std::string("convlstm-meteo")) : "convlstm-meteo";
    c.model = detail::patched(ModelConfig::defaults(family), j, "model").get<ModelConfig>();
    c.train = detail::patched(TrainConfig::defaults(family), j, "train").get<TrainConfig>();
    c.generator = detail::patched(DatasetConfig{}, j, "generator").get<DatasetConfig>();
    c.dataset = j.value("dataset", c.dataset);
    c.out = j.value("out", c.out);
    c.checkpoint = j.value("checkpoint", c.checkpoint);
    c.force = j.value("force", c.force);
    c.resume = j.value("resume", c.resume);
    const auto ev = j.value("evaluate", nlohmann::json::object());
    c.split = ev.value("split", c.split);
    c.baselines = ev.value("baselines", c.baselines);
    c.shuffle = ev.value("shuffle", c.shuffle);
    c.batch_size = ev.value("batch_size", c.batch_size);
    const auto rep = j.value("report", nlohmann::json::object());
    c.inputs = rep.value("inputs", c.inputs);
    c.allow_mixed = rep.value("allow_mixed", c.allow_mixed);
    if (j.contains("seed")) {
      const std::uint64_t s = j.at("seed");
      c.seed = s;
      c.generator.world.seed = s;
      c.model.seed = s;
      c.train.seed = s;
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  } catch (const ContractError& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  for (const auto& b : c.baselines)
    if (std::find(eval::baseline_names().begin(), eval::baseline_names().end(), b) == eval::baseline_names().end())
      throw UsageError("unknown baseline '" + b + "'");
  try {
    c.model.validate();
    c.train.validate();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  if (c.batch_size <= 0) throw UsageError("evaluate.batch_size must be positive");
  return c;
}

inline nlohmann::json run_config_json(const RunConfig& c) {
  return {{"command", c.command},
          {"dataset", c.dataset},
          {"out", c.out},
          {"checkpoint", c.checkpoint},
          {"seed", c.seed},
          {"generator", c.generator},
          {"model", c.model},
          {"train", c.train},
          {"evaluate", {{"split", c.split}, {"baselines", c.baselines}, {"shuffle", c.shuffle}, {"batch_size", c.batch_size}}},
          {"report", {{"inputs", c.inputs}, {"allow_mixed", c.allow_mixed}}}};
}

// ---------------------------------------------------------------- shared helpers

namespace detail {

inline void prepare_out(const std::filesystem::path& out, bool force) {
  namespace fs = std::filesystem;
  if (out.empty()) throw UsageError("--out is required");
  if (fs::exists(out) && !fs::is_directory(out)) throw UsageError("'" + out.string() + "' exists and is not a directory");
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!force) throw UsageError("output directory '" + out.string() + "' is not empty (use --force to overwrite)");
    fs::remove_all(out);
  }
  fs::create_directories(out);
}

inline void write_run(const std::filesystem::path& out, const RunConfig& c, const std::string& hash,
                      const nlohmann::json& status) {
  io::write_json(out / "run.json",
                 {{"format", kRunFormat}, {"config_hash", hash}, {"config", run_config_json(c)}, {"status", status}});
}

inline Dataset open_dataset(const std::string& dir) {
  if (dir.empty()) throw UsageError("--data is required");
  if (!std::filesystem::exists(dir)) throw FormatError("dataset directory '" + dir + "' does not exist");
  return Dataset(dir);
}

}  // namespace detail

// ---------------------------------------------------------------- generate

inline std::string generate_hash(const RunConfig& c) {
  return io::config_hash({{"command", "generate"}, {"generator", c.generator}});
}

inline int cmd_generate(const RunConfig& c, std::ostream& log = std::cout) {
  if (c.out.empty()) throw UsageError("--out is required");
  const auto index = generate_dataset(c.generator, c.out, c.force);
  detail::write_run(c.out, c, generate_hash(c), {{"dataset_hash", index.at("config_hash")}});
  for (const auto& [name, ids] : index.at("splits").items())
    log << "split " << name << ": " << ids.size() << " minicubes\n";
  log << "dataset written to " << c.out << " (config " << index.at("config_hash").get<std::string>() << ")\n";
  return kOk;
}

// ---------------------------------------------------------------- train

/// Resuming may extend the schedule, so the epoch budget is not part of the hash.
inline std::string train_hash(const RunConfig& c, const std::string& dataset_hash) {
  nlohmann::json t = c.train;
  t.erase("epochs");
  return io::config_hash({{"command", "train"}, {"dataset_hash", dataset_hash}, {"model", c.model}, {"train", t}});
}

inline int cmd_train(const RunConfig& c, std::ostream& log = std::cout) {
  namespace fs = std::filesystem;
  const Dataset ds = detail::open_dataset(c.dataset);
  if (c.out.empty()) throw UsageError("--out is required");
  const auto train_cubes = ds.load_split("train");
  const auto val_cubes = ds.load_split("val");
  if (train_cubes.empty()) throw FormatError("dataset '" + c.dataset + "' has no training minicubes");
  const std::string hash = train_hash(c, ds.config_hash());
  const fs::path out = c.out;

  Checkpoint ck;
  TrainLog prior;
  const bool resuming = c.resume && fs::exists(out / "manifest.json");
  if (resuming) {
    ck = load_checkpoint(out);
    if (ck.config_hash != hash)
      throw UsageError("cannot resume: '" + out.string() + "' was trained with a different configuration (" +
                       ck.config_hash + " vs " + hash + ")");
    if (fs::exists(out / "train_log.jsonl")) prior = TrainLog::parse_json_lines(io::read_text(out / "train_log.jsonl"));
    log << "resuming after epoch " << (prior.epochs.empty() ? 0 : prior.epochs.back().epoch) << "\n";
  } else {
    detail::prepare_out(out, c.force);
    ck.model = make_model<float>(c.model, train_cubes.front().context_length, train_cubes.front().target_length);
    ck.scaler = FeatureScaler::fit(train_cubes);
    ck.context_steps = train_cubes.front().context_length;
    ck.target_steps = train_cubes.front().target_length;
    ck.config_hash = hash;
  }
  log << ck.model_id() << ": " << ck.model->parameter_count() << " parameters, " << train_cubes.size()
      << " training minicubes\n";

  TrainLog running = prior;
  auto meta = [&](int best_epoch, double best_val) {
    return nlohmann::json{{"dataset_hash", ds.config_hash()},
                          {"best_epoch", best_epoch},
                          {"best_val_rmse", std::isfinite(best_val) ? nlohmann::json(best_val) : nlohmann::json(nullptr)},
                          {"epochs_run", running.epochs.empty() ? 0 : running.epochs.back().epoch}};
  };
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& e) {
    running.epochs.push_back(e);
    io::write_text(out / "train_log.jsonl", running.json_lines());
    log << "epoch " << e.epoch << " loss " << e.train_loss << " val_rmse " << e.val_rmse << " lr " << e.lr << " ("
        << e.seconds << " s)\n";
  };
  hooks.on_best = [&](int epoch) {
    ck.extra = meta(epoch, running.epochs.empty() ? NAN : running.epochs.back().val_rmse);
    save_checkpoint(out, ck);
  };
  const TrainLog result = train(*ck.model, train_cubes, val_cubes, ck.scaler, c.train, hooks, resuming ? &prior : nullptr);
  ck.extra = meta(result.best_epoch, result.best_val_rmse);
  ck.extra["diverged"] = result.diverged;
  save_checkpoint(out, ck);
  detail::write_run(out, c, hash,
                    {{"diverged", result.diverged}, {"best_epoch", result.best_epoch}, {"model_id", ck.model_id()}});
  if (result.diverged) {
    std::cerr << "training diverged (non-finite loss); checkpoint at " << out.string() << " holds the best epoch "
              << result.best_epoch << "\n";
    return kDiverged;
  }
  log << "best epoch " << result.best_epoch << " val_rmse " << result.best_val_rmse << "\n";
  return kOk;
}

// ---------------------------------------------------------------- evaluate

inline std::string evaluate_hash(const RunConfig& c, const std::string& dataset_hash, const std::string& checkpoint_hash,
                                 const std::vector<std::string>& baselines) {
  return io::config_hash({{"command", "evaluate"},
                          {"dataset_hash", dataset_hash},
                          {"split", c.split},
                          {"checkpoint_hash", checkpoint_hash},
                          {"baselines", baselines},
                          {"shuffle", c.shuffle},
                          {"seed", c.shuffle ? c.seed : 0}});
}

struct Scored {
  eval::ScoreTable table;
  std::vector<eval::PixelScore> pixels;
};

inline int cmd_evaluate(const RunConfig& c, std::ostream& log = std::cout) {
  namespace fs = std::filesystem;
  const Dataset ds = detail::open_dataset(c.dataset);
  std::optional<Checkpoint> ck;
  if (!c.checkpoint.empty()) ck = load_checkpoint(c.checkpoint);
  std::vector<std::string> baselines = c.baselines;
  if (baselines.empty()) baselines = eval::baseline_names();
  const auto cubes = ds.load_split(c.split);
  if (cubes.empty()) throw FormatError("split '" + c.split + "' of '" + c.dataset + "' is empty");
  const std::string hash = evaluate_hash(c, ds.config_hash(), ck ? ck->config_hash : "", baselines);
  const std::string eval_hash = io::config_hash({{"dataset_hash", ds.config_hash()}, {"split", c.split}});
  detail::prepare_out(c.out, c.force);
  const fs::path out = c.out;
  const int width = cubes.front().width();

  auto score = [&](const std::vector<Forecast>& fc, const std::string& id) {
    Scored s;
    s.table = eval::score_forecasts(cubes, fc, id, hash, &s.pixels);
    s.table.eval_hash = eval_hash;
    return s;
  };
  auto run_baseline = [&](const std::string& name) {
    std::vector<Forecast> fc;
    for (const auto& cube : cubes) fc.push_back(eval::baseline_forecast(name, cube, ds));
    return score(fc, name);
  };

  std::vector<Scored> results;
  if (ck) {
    const auto fc = forecast(*ck, cubes, c.batch_size, c.shuffle ? std::optional<std::uint64_t>(c.seed) : std::nullopt);
    results.push_back(score(fc, ck->model_id() + (c.shuffle ? "-shuffled" : "")));
  }
  for (const auto& b : baselines) results.push_back(run_baseline(b));
  const auto ref_it = std::find_if(results.begin(), results.end(), [](const Scored& s) { return s.table.model_id == "climatology"; });
  const Scored reference = ref_it != results.end() ? *ref_it : run_baseline("climatology");

  nlohmann::json models = nlohmann::json::array();
  for (auto& s : results) {
    s.table.outperformance = eval::outperformance(s.table.rows, reference.table.rows);
    const fs::path dir = out / s.table.model_id;
    fs::create_directories(dir);
    io::write_text(dir / "scores.csv", eval::score_table_csv(s.table));
    io::write_json(dir / "summary.json", eval::score_table_summary(s.table));
    io::write_text(dir / "pixels.csv", eval::pixel_scores_csv(s.pixels, width));
    auto summary = eval::score_table_summary(s.table);
    models.push_back({{"model_id", s.table.model_id},
                      {"macro", summary.at("macro")},
                      {"outperformance", summary.at("outperformance")},
                      {"rmse_25d", summary.at("rmse_25d")}});
    log << s.table.model_id << ": rmse " << eval::detail::num(s.table.macro.rmse) << " r2 "
        << eval::detail::num(s.table.macro.r2) << " outperformance " << eval::detail::num(100 * s.table.outperformance)
        << "%\n";
  }

  nlohmann::json tests = nlohmann::json::array();
  if (ck) {
    const auto mine = eval::cube_means(results.front().table.rows);
    for (std::size_t i = 1; i < results.size(); ++i) {
      const auto theirs = eval::cube_means(results[i].table.rows);
      std::vector<double> diffs;
      for (const auto& [id, m] : mine)
        if (auto it = theirs.find(id); it != theirs.end()) diffs.push_back(m.rmse - it->second.rmse);
      const auto w = eval::wilcoxon_signed_rank(diffs);
      nlohmann::json row = {{"model", results.front().table.model_id}, {"baseline", results[i].table.model_id}, {"n", w.n}};
      if (w.defined) {
        row["statistic"] = w.statistic;
        row["p_two_sided"] = w.p_two_sided;
        row["exact"] = w.exact;
      } else {
        row["undefined"] = w.reason;
      }
      tests.push_back(row);
    }
  }
  io::write_json(out / "comparison.json", {{"config_hash", hash},
                                           {"eval_hash", eval_hash},
                                           {"split", c.split},
                                           {"reference", "climatology"},
                                           {"models", models},
                                           {"wilcoxon_cube_rmse", tests}});
  detail::write_run(out, c, hash, {{"minicubes", cubes.size()}});
  return kOk;
}

// ---------------------------------------------------------------- report

struct ReportInput {
  std::filesystem::path dir;
  nlohmann::json summary;
};

/// Summaries named by `inputs`: a summary.json file, a directory holding one,
/// or an evaluate output directory whose subdirectories hold them.
inline std::vector<ReportInput> collect_summaries(const std::vector<std::string>& inputs) {
  namespace fs = std::filesystem;
  std::vector<ReportInput> found;
  auto add = [&](const fs::path& file) { found.push_back({file.parent_path(), io::read_json(file, "score summary")}); };
  for (const auto& in : inputs) {
    const fs::path p = in;
    if (!fs::exists(p)) throw FormatError("report input '" + in + "' does not exist");
    if (fs::is_regular_file(p)) {
      add(p);
    } else if (fs::exists(p / "summary.json")) {
      add(p / "summary.json");
    } else {
      std::vector<fs::path> subs;
      for (const auto& e : fs::directory_iterator(p))
        if (e.is_directory() && fs::exists(e.path() / "summary.json")) subs.push_back(e.path() / "summary.json");
      std::sort(subs.begin(), subs.end());
      for (const auto& s : subs) add(s);
    }
  }
  for (const auto& r : found)
    if (!r.summary.contains("model_id") || !r.summary.contains("config_hash"))
      throw FormatError("'" + (r.dir / "summary.json").string() + "' is not a score summary");
  return found;
}

/// Mean per-pixel RMSE over the cubes of a pixels.csv, on the pixel grid.
inline report::Grid pixel_rmse_grid(const std::filesystem::path& csv, const std::string& title) {
  report::Grid g;
  g.title = title;
  if (!std::filesystem::exists(csv)) return g;
  std::istringstream in(io::read_text(csv));
  std::string line;
  std::getline(in, line);
  std::map<std::pair<int, int>, std::pair<double, int>> acc;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() < 9) throw FormatError("'" + csv.string() + "': malformed row");
    const int y = std::stoi(f[1]), x = std::stoi(f[2]);
    g.height = std::max(g.height, y + 1);
    g.width = std::max(g.width, x + 1);
    auto& a = acc[{y, x}];
    if (f[4] == "ok" && f[6] != "nan") a.first += std::stod(f[6]), a.second++;
  }
  g.values.assign(static_cast<std::size_t>(g.height) * g.width, std::nan(""));
  for (const auto& [yx, a] : acc)
    if (a.second > 0) g.values[static_cast<std::size_t>(yx.first) * g.width + yx.second] = a.first / a.second;
  return g;
}

inline int cmd_report(const RunConfig& c, std::ostream& log = std::cout) {
  namespace fs = std::filesystem;
  if (c.inputs.empty()) throw UsageError("report needs at least one input (an evaluate output directory)");
  const auto inputs = collect_summaries(c.inputs);
  std::set<std::string> hashes;
  for (const auto& r : inputs) hashes.insert(r.summary.at("config_hash").get<std::string>());
  if (hashes.size() > 1 && !c.allow_mixed) {
    std::string list;
    for (const auto& h : hashes) list += (list.empty() ? "" : ", ") + h;
    throw UsageError("report inputs come from different configurations (" + list + "); pass --allow-mixed to combine them");
  }
  detail::prepare_out(c.out, c.force);
  const fs::path out = c.out;

  auto number = [](const nlohmann::json& v) { return v.is_number() ? v.get<double>() : std::nan(""); };
  std::vector<report::Series> horizon, seasons;
  std::set<std::string> season_names;
  for (const auto& r : inputs) {
    const auto ps = r.summary.value("per_season_rmse", nlohmann::json::object());
    for (const auto& [name, v] : ps.items()) season_names.insert(name);
  }
  const std::vector<std::string> season_list(season_names.begin(), season_names.end());
  std::string table = "model_id,config_hash,r2,rmse,nse,abs_bias,outperformance,rmse_25d\n";
  nlohmann::json files = nlohmann::json::array();
  bool empty = inputs.empty();
  for (const auto& r : inputs) {
    const auto& s = r.summary;
    const std::string id = s.at("model_id");
    if (s.value("rows", 0) == 0) empty = true;
    report::Series h{id, {}};
    const auto curve = s.value("horizon_rmse", nlohmann::json::array());
    for (const auto& v : curve) h.y.push_back(number(v));
    horizon.push_back(h);
    report::Series b{id, {}};
    const auto ps = s.value("per_season_rmse", nlohmann::json::object());
    for (const auto& name : season_list) b.y.push_back(ps.contains(name) ? number(ps.at(name)) : std::nan(""));
    seasons.push_back(b);
    const auto macro = s.value("macro", nlohmann::json::object());
    table += id + "," + s.at("config_hash").get<std::string>();
    for (const char* k : {"r2", "rmse", "nse", "abs_bias"}) table += "," + eval::detail::num(number(macro.value(k, nlohmann::json())));
    table += "," + eval::detail::num(number(s.value("outperformance", nlohmann::json()))) + "," +
             eval::detail::num(number(s.value("rmse_25d", nlohmann::json()))) + "\n";
    const std::string map_name = "rmse_map_" + id + ".svg";
    io::write_text(out / map_name, report::grid_map(pixel_rmse_grid(r.dir / "pixels.csv", id + ": mean pixel RMSE"), "RMSE"));
    files.push_back(map_name);
  }
  if (empty) std::cerr << "warning: empty score table; plots are drawn without data\n";
  io::write_text(out / "horizon_rmse.svg",
                 report::line_chart("RMSE by lead time", horizon, "lead time (days)", "RMSE", kStrideDays));
  io::write_text(out / "season_rmse.svg", report::bar_chart("RMSE by season", season_list, seasons, "RMSE"));
  io::write_text(out / "table.csv", table);
  files.push_back("horizon_rmse.svg");
  files.push_back("season_rmse.svg");
  files.push_back("table.csv");
  io::write_json(out / "report.json", {{"format", kRunFormat},
                                       {"config_hashes", std::vector<std::string>(hashes.begin(), hashes.end())},
                                       {"mixed", hashes.size() > 1},
                                       {"empty", empty},
                                       {"files", files}});
  log << "report for " << inputs.size() << " score tables written to " << out.string() << "\n";
  return kOk;
}

/// Runs a command and maps failures onto exit codes.
inline int run(const RunConfig& c, std::ostream& log = std::cout) {
  try {
    if (c.command == "generate") return cmd_generate(c, log);
    if (c.command == "train") return cmd_train(c, log);
    if (c.command == "evaluate") return cmd_evaluate(c, log);
    if (c.command == "report") return cmd_report(c, log);
    throw UsageError("unknown command '" + c.command + "'");
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  }
}

}  // namespace vegcast::cli
