#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vegcast/core/autodiff.hpp"
#include "vegcast/minicube/minicube.hpp"

namespace vegcast {

/// Per-frame input channels: ndvi, red, nir, quality flag, elevation.
inline constexpr int kFrameChannels = 5;
inline constexpr int kChannelNdvi = 0;
inline constexpr int kChannelValid = 3;
inline constexpr int kChannelElevation = 4;

/// Standardization statistics fitted on the training split.
struct FeatureScaler {
  double red_mean = 0, red_std = 1;
  double nir_mean = 0, nir_std = 1;
  double elevation_mean = 0, elevation_std = 1;
  std::vector<double> weather_mean;
  std::vector<double> weather_std;

  static FeatureScaler fit(const std::vector<Minicube>& cubes) {
    require(!cubes.empty(), "feature scaler: no cubes to fit on");
    FeatureScaler s;
    double rs = 0, rss = 0, ns = 0, nss = 0, es = 0, ess = 0;
    double n_obs = 0, n_elev = 0;
    const int f = kWeatherStats * static_cast<int>(cubes.front().weather_variables.size());
    std::vector<double> ws(f, 0.0), wss(f, 0.0);
    double n_w = 0;
    for (const auto& c : cubes) {
      const std::size_t hw = static_cast<std::size_t>(c.height()) * c.width();
      for (std::size_t i = 0; i < c.context_length * hw; ++i) {
        if (c.quality_mask[i] != 1.0f || std::isnan(c.sat_red[i]) || std::isnan(c.sat_nir[i])) continue;
        rs += c.sat_red[i];
        rss += double(c.sat_red[i]) * c.sat_red[i];
        ns += c.sat_nir[i];
        nss += double(c.sat_nir[i]) * c.sat_nir[i];
        n_obs += 1;
      }
      for (float e : c.elevation.values()) {
        es += e;
        ess += double(e) * e;
        n_elev += 1;
      }
      const auto agg = aggregate_weather(c.weather);
      require(agg.dim(1) == f, "feature scaler: cubes disagree on the weather layout");
      for (int t = 0; t < agg.dim(0); ++t) {
        for (int j = 0; j < f; ++j) {
          ws[j] += agg.at(t, j);
          wss[j] += double(agg.at(t, j)) * agg.at(t, j);
        }
        n_w += 1;
      }
    }
    auto finish = [](double sum, double sq, double n, double& mean, double& sd) {
      mean = n > 0 ? sum / n : 0.0;
      const double var = n > 0 ? std::max(sq / n - mean * mean, 0.0) : 1.0;
      sd = std::max(std::sqrt(var), 1e-6);
    };
    finish(rs, rss, n_obs, s.red_mean, s.red_std);
    finish(ns, nss, n_obs, s.nir_mean, s.nir_std);
    finish(es, ess, n_elev, s.elevation_mean, s.elevation_std);
    s.weather_mean.resize(f);
    s.weather_std.resize(f);
    for (int j = 0; j < f; ++j) finish(ws[j], wss[j], n_w, s.weather_mean[j], s.weather_std[j]);
    return s;
  }

  int weather_features() const { return static_cast<int>(weather_mean.size()); }
};

inline void to_json(nlohmann::json& j, const FeatureScaler& s) {
  j = {{"red", {s.red_mean, s.red_std}},
       {"nir", {s.nir_mean, s.nir_std}},
       {"elevation", {s.elevation_mean, s.elevation_std}},
       {"weather_mean", s.weather_mean},
       {"weather_std", s.weather_std}};
}

inline void from_json(const nlohmann::json& j, FeatureScaler& s) {
  s.red_mean = j.at("red").at(0);
  s.red_std = j.at("red").at(1);
  s.nir_mean = j.at("nir").at(0);
  s.nir_std = j.at("nir").at(1);
  s.elevation_mean = j.at("elevation").at(0);
  s.elevation_std = j.at("elevation").at(1);
  s.weather_mean = j.at("weather_mean").get<std::vector<double>>();
  s.weather_std = j.at("weather_std").get<std::vector<double>>();
}

/// Model-ready tensors for N cubes.
///   context  [N, T, 5, H, W]   observed frames (invalid pixels zero-filled)
///   future   [N, K, 5, H, W]   target-period frames, only for teacher forcing
///   weather  [N, T+K, F, H, W] standardized per-pixel weather
///   target   [N, K, H, W]      NDVI truth (0 where invalid)
///   mask     [N, K, H, W]      quality x landcover
template <typename S>
struct Batch {
  int n = 0, t = 0, k = 0, h = 0, w = 0, f = 0;
  Tensor<S> context, future, weather, target, mask;
  std::vector<std::string> cube_ids;

  Tensor<S> frame(int step) const {
    require(step >= 0 && step < t, "batch: context step out of range");
    return slice5(context, step, t, kFrameChannels);
  }
  Tensor<S> future_frame(int step) const {
    require(step >= 0 && step < k, "batch: target step out of range");
    return slice5(future, step, k, kFrameChannels);
  }
  Tensor<S> weather_at(int step) const {
    require(step >= 0 && step < t + k, "batch: weather step out of range");
    return slice5(weather, step, t + k, f);
  }
  /// Weather of `count` consecutive steps stacked along channels.
  Tensor<S> weather_stack(int first, int count) const {
    require(first >= 0 && count > 0 && first + count <= t + k, "batch: weather window out of range");
    const std::size_t plane = static_cast<std::size_t>(f) * h * w;
    Tensor<S> out({n, count * f, h, w});
    for (int b = 0; b < n; ++b)
      std::copy_n(weather.data() + (static_cast<std::size_t>(b) * (t + k) + first) * plane, count * plane,
                  out.data() + static_cast<std::size_t>(b) * count * plane);
    return out;
  }
  /// Context frames stacked along channels: [N, T*5, H, W].
  Tensor<S> context_stack() const { return context.reshaped({n, t * kFrameChannels, h, w}); }

  /// Per pixel, the last valid context frame (ndvi, red, nir), with the quality
  /// channel telling whether any context observation was valid.
  Tensor<S> last_valid_frame() const {
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    Tensor<S> out({n, kFrameChannels, h, w});
    for (int b = 0; b < n; ++b)
      for (std::size_t p = 0; p < hw; ++p) {
        S* o = out.data() + static_cast<std::size_t>(b) * kFrameChannels * hw + p;
        for (int s = t - 1; s >= 0; --s) {
          const S* fr = context.data() + (static_cast<std::size_t>(b) * t + s) * kFrameChannels * hw + p;
          if (fr[kChannelValid * hw] == S(1)) {
            for (int ch = 0; ch < kChannelValid; ++ch) o[ch * hw] = fr[ch * hw];
            o[kChannelValid * hw] = S(1);
            break;
          }
        }
        o[kChannelElevation * hw] = context[(static_cast<std::size_t>(b) * t * kFrameChannels + kChannelElevation) * hw + p];
      }
    return out;
  }

  template <typename T>
  Batch<T> cast() const {
    Batch<T> o;
    o.n = n, o.t = t, o.k = k, o.h = h, o.w = w, o.f = f;
    o.context = context.template cast<T>();
    o.future = future.template cast<T>();
    o.weather = weather.template cast<T>();
    o.target = target.template cast<T>();
    o.mask = mask.template cast<T>();
    o.cube_ids = cube_ids;
    return o;
  }

 private:
  Tensor<S> slice5(const Tensor<S>& src, int step, int steps, int channels) const {
    const std::size_t plane = static_cast<std::size_t>(channels) * h * w;
    Tensor<S> out({n, channels, h, w});
    for (int b = 0; b < n; ++b)
      std::copy_n(src.data() + (static_cast<std::size_t>(b) * steps + step) * plane, plane,
                  out.data() + static_cast<std::size_t>(b) * plane);
    return out;
  }
};

/// Assembles cubes (same T, K, H, W) into a batch.
template <typename S>
Batch<S> make_batch(const std::vector<const Minicube*>& cubes, const FeatureScaler& scaler) {
  require(!cubes.empty(), "make_batch: no cubes");
  const Minicube& c0 = *cubes.front();
  Batch<S> b;
  b.n = static_cast<int>(cubes.size());
  b.t = c0.context_length;
  b.k = c0.target_length;
  b.h = c0.height();
  b.w = c0.width();
  b.f = scaler.weather_features();
  const int frames = b.t + b.k;
  const std::size_t hw = static_cast<std::size_t>(b.h) * b.w;
  b.context = Tensor<S>({b.n, b.t, kFrameChannels, b.h, b.w});
  b.future = Tensor<S>({b.n, b.k, kFrameChannels, b.h, b.w});
  b.weather = Tensor<S>({b.n, frames, b.f, b.h, b.w});
  b.target = Tensor<S>({b.n, b.k, b.h, b.w});
  b.mask = Tensor<S>({b.n, b.k, b.h, b.w});
  for (int i = 0; i < b.n; ++i) {
    const Minicube& c = *cubes[static_cast<std::size_t>(i)];
    require(c.context_length == b.t && c.target_length == b.k && c.height() == b.h && c.width() == b.w,
            "make_batch: cube '" + c.id + "' has different dimensions");
    b.cube_ids.push_back(c.id);
    for (int fr = 0; fr < frames; ++fr) {
      S* dst = fr < b.t ? b.context.data() + (static_cast<std::size_t>(i) * b.t + fr) * kFrameChannels * hw
                        : b.future.data() + (static_cast<std::size_t>(i) * b.k + fr - b.t) * kFrameChannels * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t src = fr * hw + p;
        const float nd = c.ndvi[src], red = c.sat_red[src], nir = c.sat_nir[src];
        const bool ok = c.quality_mask[src] == 1.0f && !std::isnan(nd) && !std::isnan(red) && !std::isnan(nir);
        dst[0 * hw + p] = ok ? static_cast<S>(nd) : S(0);
        dst[1 * hw + p] = ok ? static_cast<S>((red - scaler.red_mean) / scaler.red_std) : S(0);
        dst[2 * hw + p] = ok ? static_cast<S>((nir - scaler.nir_mean) / scaler.nir_std) : S(0);
        dst[3 * hw + p] = ok ? S(1) : S(0);
        dst[4 * hw + p] = static_cast<S>((c.elevation[p] - scaler.elevation_mean) / scaler.elevation_std);
        if (fr >= b.t) {
          const std::size_t o = (static_cast<std::size_t>(i) * b.k + fr - b.t) * hw + p;
          const bool scored = ok && c.landcover_mask[p] == 1.0f;
          b.target[o] = scored ? static_cast<S>(nd) : S(0);
          b.mask[o] = scored ? S(1) : S(0);
        }
      }
    }
    const auto agg = aggregate_weather(c.weather);
    require(agg.dim(0) == frames && agg.dim(1) == b.f, "make_batch: weather layout of '" + c.id + "' does not match the scaler");
    for (int fr = 0; fr < frames; ++fr)
      for (int j = 0; j < b.f; ++j) {
        const S v = static_cast<S>((agg.at(fr, j) - scaler.weather_mean[j]) / scaler.weather_std[j]);
        S* dst = b.weather.data() + ((static_cast<std::size_t>(i) * frames + fr) * b.f + j) * hw;
        std::fill(dst, dst + hw, v);
      }
  }
  return b;
}

template <typename S>
Batch<S> make_batch(const std::vector<Minicube>& cubes, const FeatureScaler& scaler) {
  std::vector<const Minicube*> ptrs;
  for (const auto& c : cubes) ptrs.push_back(&c);
  return make_batch<S>(ptrs, scaler);
}

}  // namespace vegcast
