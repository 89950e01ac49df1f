#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "vegcast/forecast.hpp"
#include "vegcast/minicube/dataset.hpp"

// Parameter-free reference forecasters. Pixels for which a forecaster lacks
// the data it needs receive NaN at every step and a 1 in Forecast::flagged.

namespace vegcast::baselines {

inline constexpr float kNaN = std::numeric_limits<float>::quiet_NaN();
inline constexpr int kPreviousYearMarginDays = 30;
inline constexpr int kBoxHalfWidthSteps = 3;  // 30-day box on the 5-day grid

inline bool valid_obs(float quality, float value) { return quality == 1.0f && std::isfinite(value); }

/// Piecewise-linear interpolation through (xs, ys) with constant extrapolation. xs increasing, nonempty.
inline double interpolate_linear(const std::vector<double>& xs, const std::vector<double>& ys, double x) {
  require(!xs.empty() && xs.size() == ys.size(), "interpolate_linear: need matching nonempty knots");
  if (x <= xs.front()) return ys.front();
  if (x >= xs.back()) return ys.back();
  const auto it = std::upper_bound(xs.begin(), xs.end(), x);
  const std::size_t j = static_cast<std::size_t>(it - xs.begin());
  const double t = (x - xs[j - 1]) / (xs[j] - xs[j - 1]);
  return ys[j - 1] + t * (ys[j] - ys[j - 1]);
}

namespace detail {

inline Forecast empty_forecast(const Minicube& c, const char* id) {
  Forecast f;
  f.ndvi_hat = Tensor<float>({c.target_length, c.height(), c.width()});
  f.flagged = Tensor<float>({c.height(), c.width()});
  f.model_id = id;
  f.cube_id = c.id;
  f.context_fingerprint = context_fingerprint(c);
  return f;
}

inline void flag_pixel(Forecast& f, int i) {
  const std::size_t hw = f.flagged.size();
  f.flagged[i] = 1.0f;
  for (int k = 0; k < f.steps(); ++k) f.ndvi_hat[static_cast<std::size_t>(k) * hw + i] = kNaN;
}

/// Mean that returns the common value exactly when all inputs agree.
inline double stable_mean(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double acc = 0;
  for (double x : v) acc += x - v.front();
  return v.front() + acc / static_cast<double>(v.size());
}

}  // namespace detail

/// Every target step repeats the last valid context observation.
inline Forecast persistence_forecast(const Minicube& c) {
  Forecast f = detail::empty_forecast(c, "persistence");
  const int hw = c.height() * c.width();
  for (int i = 0; i < hw; ++i) {
    float last = kNaN;
    for (int t = c.context_length - 1; t >= 0; --t) {
      const std::size_t o = static_cast<std::size_t>(t) * hw + i;
      if (valid_obs(c.quality_mask[o], c.ndvi[o])) {
        last = c.ndvi[o];
        break;
      }
    }
    if (std::isnan(last)) {
      detail::flag_pixel(f, i);
      continue;
    }
    for (int k = 0; k < c.target_length; ++k) f.ndvi_hat[static_cast<std::size_t>(k) * hw + i] = last;
  }
  return f;
}

/// Linear interpolation of last year's valid observations, evaluated one year
/// (365 grid days) before each target timestamp.
inline Forecast previous_year_forecast(const Minicube& c, const HistoryStack& h) {
  h.validate();
  require(h.height() == c.height() && h.width() == c.width(), "previous_year_forecast: history/cube size mismatch");
  Forecast f = detail::empty_forecast(c, "previous-year");
  const int hw = c.height() * c.width();
  const int first = c.first_target_day() - kGridYearDays;
  const int last = c.frame_day(c.frames() - 1) - kGridYearDays;
  std::vector<int> frames;
  for (std::size_t n = 0; n < h.days.size(); ++n)
    if (h.days[n] >= first - kPreviousYearMarginDays && h.days[n] <= last + kPreviousYearMarginDays)
      frames.push_back(static_cast<int>(n));
  std::vector<double> xs, ys;
  for (int i = 0; i < hw; ++i) {
    xs.clear();
    ys.clear();
    for (int n : frames) {
      const std::size_t o = static_cast<std::size_t>(n) * hw + i;
      if (h.valid[o] == 1.0f) {
        xs.push_back(h.days[n]);
        ys.push_back(h.ndvi[o]);
      }
    }
    if (xs.empty()) {
      detail::flag_pixel(f, i);
      continue;
    }
    for (int k = 0; k < c.target_length; ++k)
      f.ndvi_hat[static_cast<std::size_t>(k) * hw + i] =
          static_cast<float>(interpolate_linear(xs, ys, c.frame_day(c.context_length + k) - kGridYearDays));
  }
  return f;
}

/// 30-day box filter over the piecewise-linear curve through a 5-day series:
/// weights [1/2, 1, 1, 1, 1, 1, 1/2] / 6, truncated and renormalized at the
/// series ends. Constant input is returned exactly.
inline std::vector<double> box_filter_30d(const std::vector<double>& y) {
  const int n = static_cast<int>(y.size());
  std::vector<double> out(n);
  for (int s = 0; s < n; ++s) {
    double acc = 0, wsum = 0;
    for (int d = -kBoxHalfWidthSteps; d <= kBoxHalfWidthSteps; ++d) {
      const int j = s + d;
      if (j < 0 || j >= n) continue;
      const double wt = (d == -kBoxHalfWidthSteps || d == kBoxHalfWidthSteps) ? 0.5 : 1.0;
      acc += wt * (y[j] - y[s]);
      wsum += wt;
    }
    out[s] = y[s] + acc / wsum;
  }
  return out;
}

/// Leave-target-year-out climatology: per pixel and source year, the valid
/// observations are binned to the nearest 5-day slot and linearly interpolated
/// over the 73-slot year; the years are averaged, smoothed with the 30-day box
/// and read off at the target slots. Needs at least two source years per pixel.
inline Forecast climatology_forecast(const Minicube& c, const HistoryStack& h) {
  h.validate();
  require(h.height() == c.height() && h.width() == c.width(), "climatology_forecast: history/cube size mismatch");
  require(c.start_slot >= 0 && c.start_slot + c.frames() <= kSlotsPerYear,
          "climatology_forecast: cube window must lie within one year");
  Forecast f = detail::empty_forecast(c, "climatology");
  const int hw = c.height() * c.width();
  std::map<int, std::vector<int>> frames_by_year;
  for (std::size_t n = 0; n < h.days.size(); ++n) {
    const int y = grid_year(h.days[n]);
    if (y != c.year) frames_by_year[y].push_back(static_cast<int>(n));
  }
  std::vector<double> xs, ys;
  std::vector<std::vector<double>> per_slot(kSlotsPerYear);
  std::vector<double> mean(kSlotsPerYear);
  for (int i = 0; i < hw; ++i) {
    for (auto& v : per_slot) v.clear();
    int years = 0;
    for (const auto& [year, frames] : frames_by_year) {
      xs.clear();
      ys.clear();
      for (int n : frames) {
        const std::size_t o = static_cast<std::size_t>(n) * hw + i;
        if (h.valid[o] != 1.0f) continue;
        const int slot = std::min(kSlotsPerYear - 1, static_cast<int>(std::lround(grid_doy(h.days[n]) / double(kStrideDays))));
        if (!xs.empty() && xs.back() == slot) continue;
        xs.push_back(slot);
        ys.push_back(h.ndvi[o]);
      }
      if (xs.empty()) continue;
      ++years;
      for (int s = 0; s < kSlotsPerYear; ++s) per_slot[s].push_back(interpolate_linear(xs, ys, s));
    }
    if (years < 2) {
      detail::flag_pixel(f, i);
      continue;
    }
    for (int s = 0; s < kSlotsPerYear; ++s) mean[s] = detail::stable_mean(per_slot[s]);
    const auto smooth = box_filter_30d(mean);
    for (int k = 0; k < c.target_length; ++k)
      f.ndvi_hat[static_cast<std::size_t>(k) * hw + i] = static_cast<float>(smooth[c.start_slot + c.context_length + k]);
  }
  return f;
}

}  // namespace vegcast::baselines
