#include <CLI11.hpp>
#include <iostream>

#include "vegcast/cli.hpp"

namespace {

struct Flags {
  std::string config, out, data, checkpoint, family, meteo, split;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs, batch_size;
  std::vector<std::string> baselines, inputs;
  bool force = false, shuffle = false, resume = false, allow_mixed = false;
};

nlohmann::json merged_config(const std::string& command, const Flags& f) {
  nlohmann::json j = nlohmann::json::object();
  if (!f.config.empty()) {
    try {
      j = vegcast::io::read_json(f.config, "config");
    } catch (const vegcast::FormatError& e) {
      throw vegcast::cli::UsageError(e.what());
    }
  }
  auto section = [&](const char* key) -> nlohmann::json& {
    if (!j.contains(key)) j[key] = nlohmann::json::object();
    return j[key];
  };
  if (f.seed) j["seed"] = *f.seed;
  if (!f.out.empty()) j["out"] = f.out;
  if (!f.data.empty()) j["dataset"] = f.data;
  if (!f.checkpoint.empty()) j["checkpoint"] = f.checkpoint;
  if (f.force) j["force"] = true;
  if (f.resume) j["resume"] = true;
  if (!f.family.empty()) section("model")["family"] = f.family;
  if (!f.meteo.empty()) section("model")["meteo"] = f.meteo == "on";
  if (f.epochs) section("train")["epochs"] = *f.epochs;
  if (f.shuffle && command == "train") section("train")["shuffle"] = true;
  if (f.shuffle && command == "evaluate") section("evaluate")["shuffle"] = true;
  if (!f.split.empty()) section("evaluate")["split"] = f.split;
  if (!f.baselines.empty()) section("evaluate")["baselines"] = f.baselines;
  if (f.batch_size) section("evaluate")["batch_size"] = *f.batch_size;
  if (!f.inputs.empty()) section("report")["inputs"] = f.inputs;
  if (f.allow_mixed) section("report")["allow_mixed"] = true;
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weather-conditioned NDVI forecasting on minicubes"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "JSON config file; flags override its fields")->check(CLI::ExistingFile);
    sub->add_option("--seed", f.seed, "seed for generation, initialisation, training and shuffling");
    sub->add_option("--out", f.out, "output directory");
    sub->add_flag("--force", f.force, "overwrite a non-empty output directory");
  };

  auto* gen = app.add_subcommand("generate", "write a synthetic minicube dataset");
  common(gen);

  auto* tr = app.add_subcommand("train", "train a forecaster and write a checkpoint");
  common(tr);
  tr->add_option("--data", f.data, "dataset directory");
  tr->add_option("--family", f.family, "model family")->check(CLI::IsMember(vegcast::model_families()));
  tr->add_option("--meteo", f.meteo, "weather conditioning")->check(CLI::IsMember({"on", "off"}));
  tr->add_option("--epochs", f.epochs, "epoch budget");
  tr->add_flag("--shuffle", f.shuffle, "train on spatially shuffled minicubes");
  tr->add_flag("--resume", f.resume, "continue a run from the checkpoint in --out");

  auto* ev = app.add_subcommand("evaluate", "score a checkpoint and baselines on a split");
  common(ev);
  ev->add_option("--data", f.data, "dataset directory");
  ev->add_option("--checkpoint", f.checkpoint, "checkpoint directory");
  ev->add_option("--split", f.split, "split to score (default ood-t)");
  ev->add_option("--baseline", f.baselines, "baseline to score; repeatable")
      ->check(CLI::IsMember(vegcast::eval::baseline_names()));
  ev->add_option("--batch-size", f.batch_size, "inference batch size");
  ev->add_flag("--shuffle", f.shuffle, "shuffle pixels before forecasting");

  auto* rep = app.add_subcommand("report", "plot and tabulate evaluate outputs");
  common(rep);
  rep->add_option("inputs", f.inputs, "evaluate output directories or summary.json files");
  rep->add_flag("--allow-mixed", f.allow_mixed, "combine score tables from different configurations");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return vegcast::cli::kUsage;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  vegcast::cli::RunConfig cfg;
  try {
    cfg = vegcast::cli::run_config_from_json(command, merged_config(command, f));
  } catch (const vegcast::cli::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return vegcast::cli::kUsage;
  }
  return vegcast::cli::run(cfg);
}
