// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
// Usage: vegcast_acceptance [criterion numbers...]   (default: all)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "layer_checks.hpp"
#include "tmpdir.hpp"
#include "vegcast/cli.hpp"

using namespace vegcast;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    detail += (detail.empty() ? "" : "; ") + what + (ok ? "" : " [violated]");
  }
};

std::string fmt(double v, int digits = 4) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// ---------------------------------------------------------------- benchmark

/// The seed-fixed desk benchmark: 200 train / 20 val / 40 ood-t cubes at 32x32.
struct Benchmark {
  testing::TempDir dir{"vegcast_bench"};
  std::unique_ptr<Dataset> ds;
  std::vector<Minicube> train, val, test;
  FeatureScaler scaler;

  Benchmark() {
    DatasetConfig cfg;
    generate_dataset(cfg, dir / "data", false);
    ds = std::make_unique<Dataset>(dir / "data");
    train = ds->load_split("train");
    val = ds->load_split("val");
    test = ds->load_split("ood-t");
    scaler = FeatureScaler::fit(train);
  }

  eval::ScoreTable baseline(const std::string& name) const {
    std::vector<Forecast> fc;
    for (const auto& c : test) fc.push_back(eval::baseline_forecast(name, c, *ds));
    return eval::score_forecasts(test, fc, name, "");
  }

  /// Trains `family` with its default schedule and scores it on ood-t. With
  /// `shuffle`, training, validation and evaluation all see shuffled batches.
  eval::ScoreTable fit_and_score(const std::string& family, bool meteo, bool shuffle, TrainConfig tc,
                                 TrainLog* log = nullptr) const {
    auto mc = ModelConfig::defaults(family);
    mc.meteo = meteo;
    Checkpoint ck;
    ck.model = make_model<float>(mc, test.front().context_length, test.front().target_length);
    ck.scaler = scaler;
    tc.shuffle = shuffle;
    const auto l = vegcast::train(*ck.model, train, val, scaler, tc);
    if (log) *log = l;
    const auto fc = forecast(ck, test, 8, shuffle ? std::optional<std::uint64_t>(tc.seed + 17) : std::nullopt);
    return eval::score_forecasts(test, fc, ck.model_id(), "");
  }
};

Benchmark& bench() {
  static Benchmark b;
  return b;
}

Outcome synthetic_ordering() {
  Outcome o;
  const auto t0 = Clock::now();
  auto& b = bench();
  const auto tc = TrainConfig::defaults("convlstm-meteo");
  TrainLog log_on, log_off;
  const auto on = b.fit_and_score("convlstm-meteo", true, false, tc, &log_on);
  const auto off = b.fit_and_score("convlstm-meteo", false, false, tc, &log_off);
  auto clim = b.baseline("climatology");
  const auto pers = b.baseline("persistence");
  const double runtime = seconds_since(t0);
  const double r_on = on.macro.rmse, r_off = off.macro.rmse, r_clim = clim.macro.rmse, r_pers = pers.macro.rmse;
  const double outperf = eval::outperformance(on.rows, clim.rows);
  o.check(log_on.epochs.size() <= 30 && log_off.epochs.size() <= 30,
          "epochs " + std::to_string(log_on.epochs.size()) + "/" + std::to_string(log_off.epochs.size()) + " <= 30");
  o.check(r_off - r_on > 0.005, "RMSE meteo " + fmt(r_on) + " < no-meteo " + fmt(r_off) + " by > 0.005");
  o.check(r_clim - r_off > 0.005, "no-meteo " + fmt(r_off) + " < climatology " + fmt(r_clim) + " by > 0.005");
  o.check(r_pers - r_clim > 0.005, "climatology " + fmt(r_clim) + " < persistence " + fmt(r_pers) + " by > 0.005");
  o.check(outperf > 0.5, "outperformance " + fmt(100 * outperf, 1) + "% > 50%");
  o.check(runtime < 1800, "runtime " + fmt(runtime / 60, 1) + " min < 30 min");
  return o;
}

Outcome shuffle_invariance() {
  Outcome o;
  auto& b = bench();
  auto tc_lstm = TrainConfig::defaults("lstm-1x1");
  tc_lstm.crop = 0;  // whole tiles, so plain and shuffled batches hold the same pixels
  const double lstm = b.fit_and_score("lstm-1x1", true, false, tc_lstm).macro.rmse;
  const double lstm_s = b.fit_and_score("lstm-1x1", true, true, tc_lstm).macro.rmse;
  const auto tc_simvp = TrainConfig::defaults("simvp-meteo");
  const double simvp = b.fit_and_score("simvp-meteo", true, false, tc_simvp).macro.rmse;
  const double simvp_s = b.fit_and_score("simvp-meteo", true, true, tc_simvp).macro.rmse;
  o.check(std::abs(lstm_s - lstm) <= 0.005,
          "lstm-1x1 " + fmt(lstm) + " vs shuffled " + fmt(lstm_s) + " (|delta| " + fmt(std::abs(lstm_s - lstm)) + " <= 0.005)");
  o.check(simvp_s - simvp > 0.02,
          "simvp-meteo " + fmt(simvp) + " vs shuffled " + fmt(simvp_s) + " (+" + fmt(simvp_s - simvp) + " > 0.02)");
  return o;
}

// ---------------------------------------------------------------- properties

Outcome gradient_checks() {
  Outcome o;
  for (const auto& r : testing::layer_gradient_suite(50))
    o.check(r.draws == 50 && r.worst <= 1e-4, r.name + " " + sci(r.worst) + " over " + std::to_string(r.draws) + " draws");
  return o;
}

Outcome masking_exactness() {
  Outcome o;
  std::mt19937_64 rng(2024);
  int leaks = 0, batches = 0;
  for (; batches < 100; ++batches) {
    std::uniform_int_distribution<int> dim(1, 6);
    const Shape s{dim(rng), dim(rng), dim(rng), dim(rng)};
    std::bernoulli_distribution keep(std::uniform_real_distribution<double>(0.05, 0.95)(rng));
    auto pred = leaf(testing::random_tensor(s, rng));
    auto target = testing::random_tensor(s, rng);
    Tensor<double> mask(s);
    for (auto& m : mask.values()) m = keep(rng) ? 1.0 : 0.0;
    mask[0] = 1.0;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i] == 0.0 && (i % 3 == 0)) target[i] = std::nan("");
    backward(ops::masked_mse(pred, target, mask));
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i] == 0.0 && (pred->grad[i] != 0.0 || std::signbit(pred->grad[i]))) ++leaks;
  }
  o.check(leaks == 0, std::to_string(leaks) + " nonzero masked gradients over " + std::to_string(batches) + " batches");
  bool raised = false;
  try {
    ops::masked_mse(leaf(Tensor<double>({2, 3, 4, 4})), Tensor<double>({2, 3, 4, 4}), Tensor<double>({2, 3, 4, 4}));
  } catch (const NoValidPixelsError&) {
    raised = true;
  }
  o.check(raised, "all-masked batch raises NoValidPixelsError");
  return o;
}

/// Straightforward long-double evaluation of the four pixel metrics.
eval::Metrics brute_force_metrics(const std::vector<double>& v, const std::vector<double>& f, const std::vector<double>& q) {
  std::vector<long double> a, b;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (q[i] == 1.0) a.push_back(v[i]), b.push_back(f[i]);
  const long double n = a.size();
  long double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i] / n, mb += b[i] / n;
  long double sse = 0, saa = 0, sbb = 0, sab = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sse += (a[i] - b[i]) * (a[i] - b[i]);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
    sab += (a[i] - ma) * (b[i] - mb);
  }
  eval::Metrics m;
  m.rmse = static_cast<double>(std::sqrt(sse / n));
  m.nse = static_cast<double>(1 - sse / saa);
  m.abs_bias = static_cast<double>(std::fabs(ma - mb));
  const long double r = sab / std::sqrt(saa * sbb);
  m.r2 = static_cast<double>(r * r);
  return m;
}

Outcome metric_oracles() {
  Outcome o;
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(-0.2, 0.95);
  std::normal_distribution<double> noise(0, 0.1);
  double worst = 0;
  int scored = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = std::uniform_int_distribution<int>(3, 40)(rng);
    std::vector<double> v(n), f(n), q(n);
    for (int i = 0; i < n; ++i) {
      v[i] = u(rng);
      f[i] = 0.7 * v[i] + noise(rng);
      q[i] = i < 2 || std::bernoulli_distribution(0.7)(rng) ? 1.0 : 0.0;
    }
    const auto [m, reason] = eval::pixel_metrics(v, f, q);
    if (reason != eval::Reason::Ok) continue;
    ++scored;
    const auto ref = brute_force_metrics(v, f, q);
    worst = std::max({worst, std::abs(m.rmse - ref.rmse), std::abs(m.nse - ref.nse), std::abs(m.r2 - ref.r2),
                      std::abs(m.abs_bias - ref.abs_bias)});
  }
  o.check(scored == 1000 && worst <= 1e-10, "1000 series, max deviation " + sci(worst) + " <= 1e-10");

  bool nse_exact = true;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = std::uniform_int_distribution<int>(2, 30)(rng);
    std::vector<double> v(n), q(n, 1.0);
    for (auto& x : v) x = u(rng);
    double mean = 0;
    for (double x : v) mean += x;
    mean /= n;
    const std::vector<double> flat(n, mean);
    nse_exact = nse_exact && eval::pixel_metrics(v, v, q).first.nse == 1.0 && eval::pixel_metrics(v, flat, q).first.nse == 0.0;
  }
  o.check(nse_exact, "NSE(perfect) = 1 and NSE(mean) = 0 exactly");

  const auto clim = bench().baseline("climatology");
  const double self = eval::outperformance(clim.rows, clim.rows);
  o.check(self == 0.0, "Outperformance(climatology vs climatology) = " + fmt(100 * self, 1) + "%");
  return o;
}

/// Single-location history of `pixels` sinusoids over full years.
HistoryStack sinusoid_history(int first_year, int years, const std::vector<double>& base, const std::vector<double>& amp,
                              const std::vector<double>& phase) {
  const int w = static_cast<int>(base.size());
  const double omega = 2 * std::numbers::pi / kSlotsPerYear;
  HistoryStack h;
  h.location_id = "loc";
  const int n = years * kSlotsPerYear;
  h.ndvi = Tensor<float>({n, 1, w});
  h.valid = Tensor<float>({n, 1, w}, 1.0f);
  for (int y = 0; y < years; ++y)
    for (int s = 0; s < kSlotsPerYear; ++s) {
      h.days.push_back(grid_day(first_year + y, s));
      for (int x = 0; x < w; ++x)
        h.ndvi.at(y * kSlotsPerYear + s, 0, x) = static_cast<float>(base[x] + amp[x] * std::sin(omega * s + phase[x]));
    }
  return h;
}

Minicube blank_cube(int year, int start_slot, int width) {
  Minicube c;
  c.id = "c";
  c.location_id = "loc";
  c.year = year;
  c.start_slot = start_slot;
  c.context_length = 10;
  c.target_length = 20;
  const int t = 30;
  c.ndvi = Tensor<float>({t, 1, width});
  c.sat_red = Tensor<float>({t, 1, width}, 0.1f);
  c.sat_nir = Tensor<float>({t, 1, width}, 0.3f);
  c.quality_mask = Tensor<float>({t, 1, width}, 1.0f);
  c.landcover_mask = Tensor<float>({1, width}, 1.0f);
  c.landcover_class = Tensor<float>({1, width}, 40.0f);
  c.elevation = Tensor<float>({1, width});
  c.weather = Tensor<float>({5 * t, 8});
  for (int f = 0; f < t; ++f) c.time_axis.push_back(iso_date(year, start_slot + f));
  for (auto v : kWeatherVariables) c.weather_variables.emplace_back(v);
  return c;
}

Outcome climatology_analytics() {
  Outcome o;
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0, 1);
  const int w = 8;
  std::vector<double> base(w), amp(w), phase(w);
  for (int x = 0; x < w; ++x) base[x] = 0.3 + 0.3 * u(rng), amp[x] = 0.05 + 0.25 * u(rng), phase[x] = 2 * std::numbers::pi * u(rng);
  auto h = sinusoid_history(2016, 7, base, amp, phase);
  // 30-day box over the 5-day grid: half-weight end taps at +-15 days
  const double omega = 2 * std::numbers::pi / kSlotsPerYear;
  const double gain = (1 + 2 * std::cos(omega) + 2 * std::cos(2 * omega) + std::cos(3 * omega)) / 6;
  double worst = 0;
  for (const auto& season : seasons()) {
    const int start = season.target_start_slot - 10;
    const auto c = blank_cube(2019, start, w);
    const auto f = baselines::climatology_forecast(c, h);
    for (int k = 0; k < 20; ++k)
      for (int x = 0; x < w; ++x) {
        const int s = start + 10 + k;
        const double analytic = base[x] + gain * amp[x] * std::sin(omega * s + phase[x]);
        worst = std::max(worst, std::abs(f.ndvi_hat.at(k, 0, x) - analytic));
      }
  }
  o.check(worst <= 1e-6, "max |climatology - analytic| " + sci(worst) + " <= 1e-6");

  const auto c = blank_cube(2019, 26, w);
  const auto before = baselines::climatology_forecast(c, h);
  for (int s = 0; s < kSlotsPerYear; ++s)
    for (int x = 0; x < w; ++x) h.ndvi.at(3 * kSlotsPerYear + s, 0, x) = 9.0f;
  const auto after = baselines::climatology_forecast(c, h);
  o.check(bit_equal(before.ndvi_hat, after.ndvi_hat), "corrupting the target year leaves the forecast unchanged");
  return o;
}

Outcome conditioning_identities() {
  Outcome o;
  std::mt19937_64 rng(7);
  std::normal_distribution<float> g(0.0f, 3.0f);
  auto random_float = [&](Shape s) {
    Tensor<float> t(std::move(s));
    for (auto& v : t.values()) v = g(rng);
    return t;
  };
  bool film = true, xattn = true;
  for (int trial = 0; trial < 20; ++trial) {
    ParamStore<float> ps(trial);
    const auto fc = testing::small_cond(CondMethod::Film);
    CondLayer<float> fl(ps, "film", fc, 6);
    auto x = constant(random_float({2, 6, 5, 3}));
    film = film && bit_equal(fl(x, constant(random_float({2, fc.width(), 5, 3})))->value, x->value);
    const auto xc = testing::small_cond(CondMethod::XAttn, 1 + trial % 3);
    CondLayer<float> xl(ps, "xattn", xc, 6);
    xattn = xattn && bit_equal(xl(x, constant(random_float({2, xc.width(), 5, 3})))->value, x->value);
  }
  o.check(film, "zero-init FiLM is a bit-exact identity");
  o.check(xattn, "zero-init xAttn is a bit-exact identity");

  const auto cubes = testing::small_cubes(2);
  const auto batch = make_batch<float>(cubes, FeatureScaler::fit(cubes));
  const auto moved = testing::perturb_future_weather(batch, 1.5f);
  std::string insensitive, leaky;
  for (const auto& family : model_families()) {
    auto meteo = make_model<float>(testing::tiny_config(family, true));
    testing::one_training_step(*meteo, batch);
    if (!(max_abs_diff(meteo->forward(batch).prediction->value, meteo->forward(moved).prediction->value) > 0))
      insensitive += " " + family;
    auto blind = make_model<float>(testing::tiny_config(family, false));
    testing::one_training_step(*blind, batch);
    if (!bit_equal(blind->forward(batch).prediction->value, blind->forward(moved).prediction->value)) leaky += " " + family;
  }
  o.check(insensitive.empty(), "meteo models weather-sensitive after one step" + (insensitive.empty() ? "" : ":" + insensitive));
  o.check(leaky.empty(), "no-meteo models weather-invariant bit-for-bit" + (leaky.empty() ? "" : ":" + leaky));
  return o;
}

Outcome wilcoxon_exactness() {
  Outcome o;
  const auto r = eval::wilcoxon_signed_rank({0.3, 1.1, 0.2, 2.5, 0.7});
  o.check(r.defined && r.exact && r.p_two_sided == 0.0625, "n=5 all positive: p = " + fmt(r.p_two_sided, 6) + " (exact 0.0625)");
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0.25, 1.0);
  double worst = 0;
  for (int draw = 0; draw < 100; ++draw) {
    std::vector<double> d(20);
    for (auto& x : d) x = g(rng);
    const double pe = eval::wilcoxon_signed_rank(d, eval::WilcoxonMethod::Exact).p_two_sided;
    const double pn = eval::wilcoxon_signed_rank(d, eval::WilcoxonMethod::Normal).p_two_sided;
    worst = std::max(worst, std::abs(pe - pn));
  }
  o.check(worst <= 0.01, "n=20, 100 draws: max |p_exact - p_normal| " + fmt(worst, 5) + " <= 0.01");
  return o;
}

Outcome reproducibility() {
  Outcome o;
  auto cfg = nlohmann::json::parse(R"({
    "seed": 21,
    "generator": {"world": {"height": 16, "width": 16}, "locations": 3,
      "splits": [{"name": "train", "pool": "train", "years": [2017, 2018], "count": 12},
                 {"name": "val", "pool": "train", "years": [2020], "count": 3},
                 {"name": "ood-t", "pool": "train", "years": [2021, 2022], "count": 6}]},
    "model": {"family": "convlstm-meteo"},
    "train": {"epochs": 2}
  })");
  testing::TempDir a("vegcast_repro"), b("vegcast_repro");
  std::ostringstream sink;
  for (const auto* root : {&a, &b}) {
    auto j = cfg;
    j["out"] = (*root / "data").string();
    o.check(cli::run(cli::run_config_from_json("generate", j), sink) == cli::kOk, "generate");
    j["dataset"] = (*root / "data").string();
    j["out"] = (*root / "run").string();
    o.check(cli::run(cli::run_config_from_json("train", j), sink) == cli::kOk, "train");
    j["checkpoint"] = (*root / "run").string();
    j["out"] = (*root / "eval").string();
    o.check(cli::run(cli::run_config_from_json("evaluate", j), sink) == cli::kOk, "evaluate");
  }
  int identical = 0, compared = 0;
  std::string differing;
  for (const char* model : {"convlstm-meteo", "persistence", "prevyear", "climatology"})
    for (const char* file : {"scores.csv", "summary.json"}) {
      ++compared;
      const auto pa = a / "eval" / model / file, pb = b / "eval" / model / file;
      if (std::filesystem::exists(pa) && std::filesystem::exists(pb) && io::read_text(pa) == io::read_text(pb))
        ++identical;
      else
        differing += std::string(" ") + model + "/" + file;
    }
  o.check(identical == compared,
          std::to_string(identical) + "/" + std::to_string(compared) + " ScoreTable files byte-identical across runs" +
                                      (differing.empty() ? "" : " (differ:" + differing + ")"));
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, Outcome (*)()>> criteria = {
      {"synthetic ordering", synthetic_ordering},
      {"shuffle invariance", shuffle_invariance},
      {"gradient correctness", gradient_checks},
      {"masking exactness", masking_exactness},
      {"metric oracles", metric_oracles},
      {"climatology analytics", climatology_analytics},
      {"conditioning identities", conditioning_identities},
      {"wilcoxon exactness", wilcoxon_exactness},
      {"reproducibility", reproducibility},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail += std::string(o.detail.empty() ? "" : "; ") + "exception: " + e.what();
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << criteria[i].first << " (" << fmt(seconds_since(t0), 1)
              << " s): " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
