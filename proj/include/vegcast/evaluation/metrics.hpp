#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <tuple>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vegcast/forecast.hpp"
#include "vegcast/minicube/minicube.hpp"

namespace vegcast::eval {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

enum class Reason { Ok, Landcover, TargetCount, ContextCount, MinNdvi, Variation, NoForecast, ZeroVariance };

inline const char* reason_name(Reason r) {
  switch (r) {
    case Reason::Ok: return "ok";
    case Reason::Landcover: return "landcover";
    case Reason::TargetCount: return "target_count";
    case Reason::ContextCount: return "context_count";
    case Reason::MinNdvi: return "min_ndvi";
    case Reason::Variation: return "variation";
    case Reason::NoForecast: return "no_forecast";
    case Reason::ZeroVariance: return "zero_variance";
  }
  return "unknown";
}

struct Metrics {
  double r2 = kNaN, rmse = kNaN, nse = kNaN, abs_bias = kNaN;
};

struct PixelScore {
  Metrics m;
  Reason reason = Reason::Ok;
  int valid_target = 0;
  int valid_context = 0;
  int landcover = 0;
  int pixel = 0;
  std::string cube_id;
  std::string season;

  bool ok() const { return reason == Reason::Ok; }
};

/// R^2 (squared Pearson), RMSE, NSE = 1 - MSE/Var[V] and |mean(V) - mean(V_hat)|
/// over the entries with validity 1. Population moments throughout. R^2 is 0
/// when the forecast is constant. Reason::ZeroVariance when fewer than two valid
/// entries or the target is constant; Reason::NoForecast when a valid entry has
/// no finite forecast.
inline std::pair<Metrics, Reason> pixel_metrics(std::span<const double> target, std::span<const double> forecast,
                                                std::span<const double> validity) {
  require(target.size() == forecast.size() && target.size() == validity.size(), "pixel_metrics: length mismatch");
  double n = 0, mv = 0, mf = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (validity[i] == 0) continue;
    require(validity[i] == 1, "pixel_metrics: validity must be binary");
    if (!std::isfinite(forecast[i])) return {Metrics{}, Reason::NoForecast};
    n += 1;
    mv += target[i];
    mf += forecast[i];
  }
  if (n < 2) return {Metrics{}, Reason::ZeroVariance};
  mv /= n;
  mf /= n;
  double svv = 0, sff = 0, svf = 0, sse = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (validity[i] == 0) continue;
    const double dv = target[i] - mv, df = forecast[i] - mf, e = target[i] - forecast[i];
    svv += dv * dv;
    sff += df * df;
    svf += dv * df;
    sse += e * e;
  }
  if (svv == 0) return {Metrics{}, Reason::ZeroVariance};
  Metrics m;
  m.rmse = std::sqrt(sse / n);
  m.nse = 1 - sse / svv;
  m.abs_bias = std::abs(mv - mf);
  m.r2 = sff == 0 ? 0.0 : std::min(1.0, (svf * svf) / (svv * sff));
  return {m, Reason::Ok};
}

inline std::pair<Metrics, Reason> pixel_metrics(const std::vector<double>& target, const std::vector<double>& forecast,
                                                const std::vector<double>& validity) {
  return pixel_metrics(std::span<const double>(target), std::span<const double>(forecast),
                       std::span<const double>(validity));
}

struct FilterConfig {
  double min_ndvi = 0.0;   // strict: min NDVI must exceed this
  int min_target_obs = 10;
  int min_context_obs = 3;
  double min_std = 0.1;    // strict
};

/// Per-pixel eligibility. The minimum and the (population) standard deviation
/// are taken over every valid observation of the cube, context and target.
inline std::vector<Reason> pixel_filter(const Minicube& c, const FilterConfig& cfg = {}) {
  const int hw = c.height() * c.width();
  std::vector<Reason> out(hw, Reason::Ok);
  for (int i = 0; i < hw; ++i) {
    if (!landcover::vegetated(static_cast<int>(c.landcover_class[i])) || c.landcover_mask[i] != 1.0f) {
      out[i] = Reason::Landcover;
      continue;
    }
    int nt = 0, nc = 0;
    double lo = std::numeric_limits<double>::infinity(), s = 0, s2 = 0;
    for (int t = 0; t < c.frames(); ++t) {
      const std::size_t o = static_cast<std::size_t>(t) * hw + i;
      if (c.quality_mask[o] != 1.0f || !std::isfinite(c.ndvi[o])) continue;
      (t < c.context_length ? nc : nt)++;
      const double v = c.ndvi[o];
      lo = std::min(lo, v);
      s += v;
      s2 += v * v;
    }
    const double n = nt + nc;
    if (nt < cfg.min_target_obs) out[i] = Reason::TargetCount;
    else if (nc < cfg.min_context_obs) out[i] = Reason::ContextCount;
    else if (!(lo > cfg.min_ndvi)) out[i] = Reason::MinNdvi;
    else if (!(std::sqrt(std::max(0.0, s2 / n - (s / n) * (s / n))) > cfg.min_std)) out[i] = Reason::Variation;
  }
  return out;
}

/// Scores every pixel of one cube (excluded pixels carry their reason).
inline std::vector<PixelScore> score_cube(const Minicube& c, const Forecast& f, const FilterConfig& cfg = {}) {
  require(f.ndvi_hat.shape() == Shape({c.target_length, c.height(), c.width()}), "score_cube: forecast shape mismatch");
  const int hw = c.height() * c.width(), k = c.target_length;
  const auto eligible = pixel_filter(c, cfg);
  std::vector<PixelScore> out(hw);
  std::vector<double> v(k), vh(k), m(k);
  for (int i = 0; i < hw; ++i) {
    PixelScore& p = out[i];
    p.cube_id = c.id;
    p.season = c.season;
    p.pixel = i;
    p.landcover = static_cast<int>(c.landcover_class[i]);
    for (int t = 0; t < c.frames(); ++t) {
      const std::size_t o = static_cast<std::size_t>(t) * hw + i;
      const bool ok = c.quality_mask[o] == 1.0f && std::isfinite(c.ndvi[o]);
      if (t < c.context_length) {
        p.valid_context += ok;
      } else {
        const int s = t - c.context_length;
        p.valid_target += ok;
        m[s] = ok ? 1.0 : 0.0;
        v[s] = ok ? c.ndvi[o] : 0.0;
        vh[s] = f.ndvi_hat[static_cast<std::size_t>(s) * hw + i];
      }
    }
    if (eligible[i] != Reason::Ok) {
      p.reason = eligible[i];
      continue;
    }
    std::tie(p.m, p.reason) = pixel_metrics(v, vh, m);
  }
  return out;
}

// ---------------------------------------------------------------- aggregation

struct ScoreRow {
  std::string cube_id;
  std::string season;
  int landcover = 0;
  int pixels = 0;
  Metrics m;
};

struct ScoreTable {
  std::string model_id;
  std::string config_hash;
  std::string eval_hash;
  std::vector<ScoreRow> rows;                  // per (cube, landcover), sorted
  std::map<int, Metrics> per_landcover;
  Metrics macro;
  std::map<std::string, int> reasons;          // histogram over all scored pixels
  double outperformance = kNaN;                // filled by compare_to_reference
  std::vector<double> horizon_rmse;            // per target step
  double rmse_25d = kNaN;

  bool empty() const { return rows.empty(); }
};

namespace detail {

inline void accumulate(Metrics& acc, const Metrics& m) {
  acc.r2 += m.r2;
  acc.rmse += m.rmse;
  acc.nse += m.nse;
  acc.abs_bias += m.abs_bias;
}

inline Metrics zero_metrics() { return Metrics{0, 0, 0, 0}; }

inline Metrics divided(Metrics m, double n) {
  m.r2 /= n;
  m.rmse /= n;
  m.nse /= n;
  m.abs_bias /= n;
  return m;
}

}  // namespace detail

/// Mean within (cube, landcover), then within landcover, then an unweighted
/// mean across landcover classes. Empty input gives an empty table with NaN macro.
inline ScoreTable aggregate(const std::vector<PixelScore>& scores) {
  ScoreTable t;
  std::map<std::pair<std::string, int>, std::pair<Metrics, int>> groups;
  std::map<std::string, std::string> season_of;
  for (const auto& p : scores) {
    t.reasons[reason_name(p.reason)]++;
    if (!p.ok()) continue;
    auto& g = groups.try_emplace({p.cube_id, p.landcover}, detail::zero_metrics(), 0).first->second;
    detail::accumulate(g.first, p.m);
    g.second++;
    season_of[p.cube_id] = p.season;
  }
  std::map<int, std::pair<Metrics, int>> by_lc;
  for (const auto& [key, g] : groups) {
    ScoreRow r{key.first, season_of[key.first], key.second, g.second, detail::divided(g.first, g.second)};
    auto& l = by_lc.try_emplace(key.second, detail::zero_metrics(), 0).first->second;
    detail::accumulate(l.first, r.m);
    l.second++;
    t.rows.push_back(std::move(r));
  }
  if (by_lc.empty()) return t;
  Metrics macro = detail::zero_metrics();
  for (const auto& [lc, l] : by_lc) {
    t.per_landcover[lc] = detail::divided(l.first, l.second);
    detail::accumulate(macro, t.per_landcover[lc]);
  }
  t.macro = detail::divided(macro, static_cast<double>(by_lc.size()));
  return t;
}

/// Per-cube means over the cube's landcover rows.
inline std::map<std::string, Metrics> cube_means(const std::vector<ScoreRow>& rows) {
  std::map<std::string, std::pair<Metrics, int>> acc;
  for (const auto& r : rows) {
    auto& a = acc.try_emplace(r.cube_id, detail::zero_metrics(), 0).first->second;
    detail::accumulate(a.first, r.m);
    a.second++;
  }
  std::map<std::string, Metrics> out;
  for (const auto& [id, a] : acc) out[id] = detail::divided(a.first, a.second);
  return out;
}

struct OutperformanceThresholds {
  double rmse = 0.01, abs_bias = 0.01, nse = 0.05, r2 = 0.05;
};

/// Number of metrics on which `model` beats `reference` by strictly more than the threshold.
inline int outperformance_wins(const Metrics& model, const Metrics& reference, const OutperformanceThresholds& th = {}) {
  int wins = 0;
  wins += (reference.rmse - model.rmse) > th.rmse;
  wins += (reference.abs_bias - model.abs_bias) > th.abs_bias;
  wins += (model.nse - reference.nse) > th.nse;
  wins += (model.r2 - reference.r2) > th.r2;
  return wins;
}

/// Fraction of minicubes where the model wins on at least 3 of the 4 metrics.
inline double outperformance(const std::vector<ScoreRow>& model, const std::vector<ScoreRow>& reference,
                             const OutperformanceThresholds& th = {}) {
  const auto a = cube_means(model), b = cube_means(reference);
  require(a.size() == b.size(), "outperformance: model and reference cover different minicubes");
  if (a.empty()) return kNaN;
  int count = 0;
  for (const auto& [id, m] : a) {
    const auto it = b.find(id);
    require(it != b.end(), "outperformance: minicube '" + id + "' missing from the reference rows");
    count += outperformance_wins(m, it->second, th) >= 3;
  }
  return static_cast<double>(count) / static_cast<double>(a.size());
}

// ---------------------------------------------------------------- horizon RMSE

/// Pooled squared-error sums per target step, accumulated over cubes.
struct HorizonAccumulator {
  std::vector<double> sse, count;

  void add(const Minicube& c, const Forecast& f, const std::vector<Reason>* eligible = nullptr) {
    const int hw = c.height() * c.width(), k = c.target_length;
    if (sse.empty()) {
      sse.assign(k, 0.0);
      count.assign(k, 0.0);
    }
    require(static_cast<int>(sse.size()) == k, "horizon_rmse: target length differs between cubes");
    for (int s = 0; s < k; ++s)
      for (int i = 0; i < hw; ++i) {
        if (eligible && (*eligible)[i] != Reason::Ok) continue;
        const std::size_t o = static_cast<std::size_t>(c.context_length + s) * hw + i;
        if (c.quality_mask[o] != 1.0f || !std::isfinite(c.ndvi[o])) continue;
        const double p = f.ndvi_hat[static_cast<std::size_t>(s) * hw + i];
        if (!std::isfinite(p)) continue;
        sse[s] += (c.ndvi[o] - p) * (c.ndvi[o] - p);
        count[s] += 1;
      }
  }

  std::vector<double> curve() const {
    std::vector<double> out(sse.size());
    for (std::size_t s = 0; s < sse.size(); ++s) out[s] = count[s] > 0 ? std::sqrt(sse[s] / count[s]) : kNaN;
    return out;
  }

  /// RMSE over the steps whose lead time is within `horizon_days`.
  double scalar(int horizon_days) const {
    const int steps = horizon_days / kStrideDays;
    require(steps >= 1 && steps <= static_cast<int>(sse.size()), "horizon_rmse: horizon beyond the target period");
    double a = 0, n = 0;
    for (int s = 0; s < steps; ++s) {
      a += sse[s];
      n += count[s];
    }
    return n > 0 ? std::sqrt(a / n) : kNaN;
  }
};

struct HorizonResult {
  std::vector<double> curve;
  double scalar = kNaN;
};

inline HorizonResult horizon_rmse(const Minicube& c, const Forecast& f, int horizon_days = 25) {
  HorizonAccumulator acc;
  acc.add(c, f);
  return {acc.curve(), acc.scalar(horizon_days)};
}

// ---------------------------------------------------------------- serialization

namespace detail {

inline std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

inline nlohmann::json metrics_json(const Metrics& m) {
  auto val = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(std::stod(num(v))); };
  return {{"r2", val(m.r2)}, {"rmse", val(m.rmse)}, {"nse", val(m.nse)}, {"abs_bias", val(m.abs_bias)}};
}

}  // namespace detail

inline std::string score_table_csv(const ScoreTable& t) {
  std::string out = "# model=" + t.model_id + " config_hash=" + t.config_hash + " eval_hash=" + t.eval_hash + "\n";
  out += "cube_id,season,landcover,pixels,r2,rmse,nse,abs_bias\n";
  for (const auto& r : t.rows)
    out += r.cube_id + "," + r.season + "," + landcover::name(r.landcover) + "," + std::to_string(r.pixels) + "," +
           detail::num(r.m.r2) + "," + detail::num(r.m.rmse) + "," + detail::num(r.m.nse) + "," +
           detail::num(r.m.abs_bias) + "\n";
  return out;
}

inline nlohmann::json score_table_summary(const ScoreTable& t) {
  nlohmann::json lc = nlohmann::json::object();
  for (const auto& [code, m] : t.per_landcover) lc[landcover::name(code)] = detail::metrics_json(m);
  std::map<std::string, std::pair<double, int>> season_rmse;
  for (const auto& r : t.rows) {
    auto& s = season_rmse[r.season];
    s.first += r.m.rmse;
    s.second++;
  }
  nlohmann::json seasons = nlohmann::json::object();
  for (const auto& [name, s] : season_rmse) seasons[name] = std::stod(detail::num(s.first / s.second));
  nlohmann::json curve = nlohmann::json::array();
  for (double v : t.horizon_rmse) curve.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(std::stod(detail::num(v))));
  auto val = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(std::stod(detail::num(v))); };
  return {{"model_id", t.model_id},
          {"config_hash", t.config_hash},
          {"eval_hash", t.eval_hash},
          {"macro", detail::metrics_json(t.macro)},
          {"per_landcover", lc},
          {"per_season_rmse", seasons},
          {"outperformance", val(t.outperformance)},
          {"horizon_rmse", curve},
          {"rmse_25d", val(t.rmse_25d)},
          {"rows", t.rows.size()},
          {"reasons", t.reasons}};
}

inline std::string pixel_scores_csv(const std::vector<PixelScore>& scores, int width) {
  std::string out = "cube_id,y,x,landcover,reason,r2,rmse,nse,abs_bias\n";
  for (const auto& p : scores)
    out += p.cube_id + "," + std::to_string(p.pixel / width) + "," + std::to_string(p.pixel % width) + "," +
           std::to_string(p.landcover) + "," + reason_name(p.reason) + "," + detail::num(p.m.r2) + "," +
           detail::num(p.m.rmse) + "," + detail::num(p.m.nse) + "," + detail::num(p.m.abs_bias) + "\n";
  return out;
}

}  // namespace vegcast::eval
