#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "tmpdir.hpp"
#include "vegcast/cli.hpp"

using namespace vegcast;
using vegcast::testing::TempDir;

namespace {

nlohmann::json tiny_json() {
  return nlohmann::json::parse(R"({
    "seed": 3,
    "generator": {"world": {"height": 12, "width": 12}, "locations": 2,
      "splits": [{"name": "train", "pool": "train", "years": [2017, 2018], "count": 4},
                 {"name": "val", "pool": "train", "years": [2020], "count": 2},
                 {"name": "ood-t", "pool": "train", "years": [2021], "count": 3}]},
    "model": {"family": "lstm-1x1", "encdec": {"hidden": 4, "groups": 2}},
    "train": {"epochs": 2, "batch_size": 2}
  })");
}

cli::RunConfig config(const std::string& command, nlohmann::json patch = nlohmann::json::object()) {
  auto j = tiny_json();
  j.merge_patch(patch);
  return cli::run_config_from_json(command, j);
}

int quiet(const cli::RunConfig& c) {
  std::ostringstream sink;
  return cli::run(c, sink);
}

std::string slurp(const std::filesystem::path& p) { return io::read_text(p); }

int shell(const std::string& args) {
  const int status = std::system((std::string(VEGCAST_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

/// generate -> train -> evaluate into `root`, returning the evaluate directory.
std::filesystem::path pipeline(const std::filesystem::path& root) {
  auto g = config("generate", {{"out", (root / "data").string()}});
  EXPECT_EQ(quiet(g), cli::kOk);
  auto t = config("train", {{"dataset", (root / "data").string()}, {"out", (root / "run").string()}});
  EXPECT_EQ(quiet(t), cli::kOk);
  auto e = config("evaluate", {{"dataset", (root / "data").string()},
                               {"checkpoint", (root / "run").string()},
                               {"out", (root / "eval").string()}});
  EXPECT_EQ(quiet(e), cli::kOk);
  return root / "eval";
}

}  // namespace

TEST(CliConfig, SectionsPatchFamilyDefaults) {
  auto c = config("train", {{"train", {{"lr", 5e-4}}}});
  EXPECT_EQ(c.model.family, "lstm-1x1");
  EXPECT_EQ(c.model.cell_kernel, 1);
  EXPECT_EQ(c.model.encdec.hidden, 4);
  EXPECT_EQ(c.train.lr, 5e-4);
  EXPECT_EQ(c.train.patience, TrainConfig::defaults("lstm-1x1").patience);
  EXPECT_EQ(c.generator.world.height, 12);
  EXPECT_EQ(c.generator.world.cloud_rate, SyntheticWorldParams{}.cloud_rate);
}

TEST(CliConfig, TopLevelSeedReachesEveryStage) {
  auto c = config("train", {{"seed", 77}, {"model", {{"seed", 1}}}});
  EXPECT_EQ(c.model.seed, 77u);
  EXPECT_EQ(c.train.seed, 77u);
  EXPECT_EQ(c.generator.world.seed, 77u);
  EXPECT_EQ(c.seed, 77u);
}

TEST(CliConfig, RejectsBadInput) {
  EXPECT_THROW(config("evaluate", {{"evaluate", {{"baselines", {"oracle"}}}}}), cli::UsageError);
  EXPECT_THROW(config("train", {{"model", {{"family", "transformer"}}}}), cli::UsageError);
  EXPECT_THROW(config("train", {{"train", {{"batch_size", 0}}}}), cli::UsageError);
  EXPECT_THROW(config("train", {{"train", "fast"}}), cli::UsageError);
  EXPECT_THROW(cli::run_config_from_json("train", nlohmann::json::array()), cli::UsageError);
}

TEST(CliConfig, HashIgnoresPathsAndEpochBudget) {
  auto a = config("train", {{"out", "a"}}), b = config("train", {{"out", "b"}, {"train", {{"epochs", 9}}}});
  EXPECT_EQ(cli::train_hash(a, "d"), cli::train_hash(b, "d"));
  EXPECT_NE(cli::train_hash(a, "d"), cli::train_hash(a, "e"));
  auto c = config("train", {{"train", {{"lr", 1e-4}}}});
  EXPECT_NE(cli::train_hash(a, "d"), cli::train_hash(c, "d"));
}

TEST(CliCommands, GenerateRefusesNonEmptyOutputWithoutForce) {
  TempDir dir("cli");
  auto g = config("generate", {{"out", (dir / "data").string()}});
  ASSERT_EQ(quiet(g), cli::kOk);
  EXPECT_EQ(quiet(g), cli::kUsage);
  g.force = true;
  EXPECT_EQ(quiet(g), cli::kOk);
  const auto run = io::read_json(dir / "data" / "run.json", "run");
  EXPECT_EQ(run.at("config_hash"), cli::generate_hash(g));
}

TEST(CliCommands, PipelineIsByteReproducibleAcrossDirectories) {
  TempDir a("cli"), b("cli");
  const auto ea = pipeline(a.path()), eb = pipeline(b.path());
  for (const char* model : {"lstm-1x1", "climatology", "persistence", "prevyear"})
    for (const char* file : {"scores.csv", "summary.json", "pixels.csv"})
      EXPECT_EQ(slurp(ea / model / file), slurp(eb / model / file)) << model << "/" << file;
  EXPECT_EQ(slurp(ea / "comparison.json"), slurp(eb / "comparison.json"));
}

TEST(CliCommands, EveryArtifactCarriesTheConfigHash) {
  TempDir dir("cli");
  const auto ev = pipeline(dir.path());
  const auto cmp = io::read_json(ev / "comparison.json", "comparison");
  const std::string hash = cmp.at("config_hash");
  EXPECT_EQ(io::read_json(ev / "run.json", "run").at("config_hash"), hash);
  for (const char* model : {"lstm-1x1", "climatology"}) {
    EXPECT_EQ(io::read_json(ev / model / "summary.json", "summary").at("config_hash"), hash);
    EXPECT_NE(slurp(ev / model / "scores.csv").find("config_hash=" + hash), std::string::npos);
  }
  const auto ck = load_checkpoint(dir / "run");
  EXPECT_EQ(io::read_json(dir / "run" / "run.json", "run").at("config_hash"), ck.config_hash);
}

TEST(CliCommands, ClimatologyAgainstItselfIsZeroPercent) {
  TempDir dir("cli");
  ASSERT_EQ(quiet(config("generate", {{"out", (dir / "data").string()}})), cli::kOk);
  auto e = config("evaluate", {{"dataset", (dir / "data").string()},
                               {"out", (dir / "eval").string()},
                               {"evaluate", {{"baselines", {"climatology"}}}}});
  ASSERT_EQ(quiet(e), cli::kOk);
  const auto s = io::read_json(dir / "eval" / "climatology" / "summary.json", "summary");
  EXPECT_EQ(s.at("outperformance").get<double>(), 0.0);
}

TEST(CliCommands, ResumeContinuesTheEpochCounter) {
  TempDir dir("cli");
  ASSERT_EQ(quiet(config("generate", {{"out", (dir / "data").string()}})), cli::kOk);
  auto t = config("train", {{"dataset", (dir / "data").string()}, {"out", (dir / "run").string()}});
  ASSERT_EQ(quiet(t), cli::kOk);
  EXPECT_EQ(quiet(t), cli::kUsage);
  t.resume = true;
  t.train.epochs = 1;
  ASSERT_EQ(quiet(t), cli::kOk);
  const auto log = TrainLog::parse_json_lines(slurp(dir / "run" / "train_log.jsonl"));
  ASSERT_EQ(log.epochs.size(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(log.epochs[i].epoch, i + 1);

  auto other = t;
  other.train.lr = 0.5;
  EXPECT_EQ(quiet(other), cli::kUsage);
}

TEST(CliCommands, DivergenceExitsWithCodeThreeAndKeepsCheckpoint) {
  TempDir dir("cli");
  ASSERT_EQ(quiet(config("generate", {{"out", (dir / "data").string()}})), cli::kOk);
  auto t = config("train", {{"dataset", (dir / "data").string()}, {"out", (dir / "run").string()}});
  ASSERT_EQ(quiet(t), cli::kOk);
  auto ck = load_checkpoint(dir / "run");
  for (auto& v : ck.model->params().entries().front().second->value.values()) v = std::nanf("");
  save_checkpoint(dir / "run", ck);
  t.resume = true;
  EXPECT_EQ(quiet(t), cli::kDiverged);
  EXPECT_NO_THROW(load_checkpoint(dir / "run"));
  EXPECT_TRUE(io::read_json(dir / "run" / "run.json", "run").at("status").at("diverged").get<bool>());
}

TEST(CliCommands, DataErrorsExitWithCodeTwo) {
  TempDir dir("cli");
  EXPECT_EQ(quiet(config("train", {{"dataset", (dir / "missing").string()}, {"out", (dir / "run").string()}})),
            cli::kDataError);
  std::filesystem::create_directories(dir / "junk");
  std::ofstream(dir / "junk" / "splits.json") << "{not json";
  EXPECT_EQ(quiet(config("evaluate", {{"dataset", (dir / "junk").string()}, {"out", (dir / "e").string()}})),
            cli::kDataError);
  ASSERT_EQ(quiet(config("generate", {{"out", (dir / "data").string()}})), cli::kOk);
  EXPECT_EQ(quiet(config("evaluate", {{"dataset", (dir / "data").string()},
                                      {"checkpoint", (dir / "junk").string()},
                                      {"out", (dir / "e").string()}})),
            cli::kDataError);
}

TEST(CliCommands, ReportRefusesMixedHashesUnlessAllowed) {
  TempDir dir("cli");
  ASSERT_EQ(quiet(config("generate", {{"out", (dir / "data").string()}})), cli::kOk);
  for (const char* b : {"climatology", "persistence"})
    ASSERT_EQ(quiet(config("evaluate", {{"dataset", (dir / "data").string()},
                                         {"out", (dir / b).string()},
                                         {"evaluate", {{"baselines", {b}}}}})),
              cli::kOk);
  auto r = config("report", {{"out", (dir / "rep").string()},
                             {"report", {{"inputs", {(dir / "climatology").string(), (dir / "persistence").string()}}}}});
  EXPECT_EQ(quiet(r), cli::kUsage);
  EXPECT_FALSE(std::filesystem::exists(dir / "rep"));
  r.allow_mixed = true;
  ASSERT_EQ(quiet(r), cli::kOk);
  for (const char* f : {"horizon_rmse.svg", "season_rmse.svg", "table.csv", "report.json", "rmse_map_climatology.svg"})
    EXPECT_TRUE(std::filesystem::exists(dir / "rep" / f)) << f;
  const auto rep = io::read_json(dir / "rep" / "report.json", "report");
  EXPECT_TRUE(rep.at("mixed").get<bool>());
  EXPECT_FALSE(rep.at("empty").get<bool>());
}

TEST(CliCommands, EmptyScoreTableWarnsAndDrawsEmptyPlots) {
  TempDir dir("cli");
  std::filesystem::create_directories(dir / "in");
  io::write_json(dir / "in" / "summary.json", eval::score_table_summary(eval::ScoreTable{"nothing", "h", "e"}));
  auto r = config("report", {{"out", (dir / "rep").string()}, {"report", {{"inputs", {(dir / "in").string()}}}}});
  ::testing::internal::CaptureStderr();
  ASSERT_EQ(quiet(r), cli::kOk);
  EXPECT_NE(::testing::internal::GetCapturedStderr().find("empty score table"), std::string::npos);
  EXPECT_NE(slurp(dir / "rep" / "horizon_rmse.svg").find("no data"), std::string::npos);
  EXPECT_NE(slurp(dir / "rep" / "season_rmse.svg").find("no data"), std::string::npos);
  EXPECT_TRUE(io::read_json(dir / "rep" / "report.json", "report").at("empty").get<bool>());
}

TEST(CliBinary, FlagsAndExitCodes) {
  TempDir dir("cli");
  const auto cfg = dir / "tiny.json";
  io::write_json(cfg, tiny_json());
  const std::string data = (dir / "data").string();
  EXPECT_EQ(shell("generate --config " + cfg.string() + " --out " + data), 0);
  EXPECT_EQ(shell("generate --config " + cfg.string() + " --out " + data), 1);
  EXPECT_EQ(shell("generate --config " + cfg.string() + " --out " + data + " --force --seed 4"), 0);
  EXPECT_EQ(io::read_json(dir / "data" / "generator.json", "gen").at("world").at("seed"), 4);
  EXPECT_EQ(shell("train --bogus"), 1);
  EXPECT_EQ(shell("train --meteo maybe --data " + data), 1);
  EXPECT_EQ(shell("evaluate --baseline oracle --data " + data), 1);
  EXPECT_EQ(shell("frobnicate"), 1);
  EXPECT_EQ(shell("evaluate --data " + (dir / "nowhere").string() + " --out " + (dir / "e").string()), 2);
  EXPECT_EQ(shell("train --config " + cfg.string() + " --data " + data + " --meteo off --epochs 1 --out " +
                  (dir / "run").string()),
            0);
  EXPECT_FALSE(load_checkpoint(dir / "run").model->config().meteo);
  EXPECT_EQ(shell("evaluate --data " + data + " --checkpoint " + (dir / "run").string() + " --shuffle --baseline persistence --out " +
                  (dir / "ev").string()),
            0);
  EXPECT_TRUE(std::filesystem::exists(dir / "ev" / "lstm-1x1-nometeo-shuffled" / "summary.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "ev" / "persistence" / "summary.json"));
  EXPECT_FALSE(std::filesystem::exists(dir / "ev" / "prevyear"));
  EXPECT_EQ(shell("report " + (dir / "ev").string() + " --out " + (dir / "rep").string()), 0);
}
