#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vegcast/minicube/minicube.hpp"

namespace vegcast {

/// Knobs of the synthetic world. Everything downstream is a pure function of these.
struct SyntheticWorldParams {
  std::uint64_t seed = 7;
  int height = 32;
  int width = 32;
  int context_length = 10;
  int target_length = 20;
  int first_year = 2017;
  int last_year = 2022;

  double cloud_rate = 0.25;
  double missing_frame_rate = 0.0;
  double noise_scale = 0.02;

  // NDVI per degree C of smoothed temperature anomaly, and per mm/day of
  // smoothed rainfall anomaly; scaled per landcover class and jittered per pixel.
  double temperature_sensitivity = 0.025;
  double rainfall_sensitivity = 0.11;
  double temperature_memory_days = 30.0;
  double rain_memory_min_days = 20.0;
  double rain_memory_max_days = 60.0;

  int landcover_patches = 7;
  double nonvegetated_fraction = 0.1;
  double coefficient_jitter = 0.08;
  double phase_jitter_days = 4.0;

  void validate() const {
    require(height > 0 && width > 0, "synthetic world: spatial size must be positive");
    require(context_length > 0 && target_length > 0, "synthetic world: context and target lengths must be positive");
    require(context_length <= seasons().front().target_start_slot, "synthetic world: context too long for the MAM window");
    require(seasons().back().target_start_slot + target_length <= kSlotsPerYear,
            "synthetic world: target too long for the SON window");
    require(first_year <= last_year, "synthetic world: empty year range");
    require(cloud_rate >= 0 && cloud_rate < 1, "synthetic world: cloud_rate must lie in [0, 1)");
    require(missing_frame_rate >= 0 && missing_frame_rate < 1, "synthetic world: missing_frame_rate must lie in [0, 1)");
    require(noise_scale >= 0, "synthetic world: noise_scale must be non-negative");
    require(temperature_memory_days > 0 && rain_memory_min_days > 0 && rain_memory_max_days >= rain_memory_min_days,
            "synthetic world: memory constants must be positive and ordered");
    require(landcover_patches > 0, "synthetic world: need at least one landcover patch");
    require(nonvegetated_fraction >= 0 && nonvegetated_fraction < 1, "synthetic world: bad nonvegetated_fraction");
    require(coefficient_jitter >= 0 && phase_jitter_days >= 0, "synthetic world: jitter must be non-negative");
  }
};

inline void to_json(nlohmann::json& j, const SyntheticWorldParams& p) {
  j = {{"seed", p.seed},
       {"height", p.height},
       {"width", p.width},
       {"context_length", p.context_length},
       {"target_length", p.target_length},
       {"first_year", p.first_year},
       {"last_year", p.last_year},
       {"cloud_rate", p.cloud_rate},
       {"missing_frame_rate", p.missing_frame_rate},
       {"noise_scale", p.noise_scale},
       {"temperature_sensitivity", p.temperature_sensitivity},
       {"rainfall_sensitivity", p.rainfall_sensitivity},
       {"temperature_memory_days", p.temperature_memory_days},
       {"rain_memory_min_days", p.rain_memory_min_days},
       {"rain_memory_max_days", p.rain_memory_max_days},
       {"landcover_patches", p.landcover_patches},
       {"nonvegetated_fraction", p.nonvegetated_fraction},
       {"coefficient_jitter", p.coefficient_jitter},
       {"phase_jitter_days", p.phase_jitter_days}};
}

inline void from_json(const nlohmann::json& j, SyntheticWorldParams& p) {
  SyntheticWorldParams d;
  p.seed = j.value("seed", d.seed);
  p.height = j.value("height", d.height);
  p.width = j.value("width", d.width);
  p.context_length = j.value("context_length", d.context_length);
  p.target_length = j.value("target_length", d.target_length);
  p.first_year = j.value("first_year", d.first_year);
  p.last_year = j.value("last_year", d.last_year);
  p.cloud_rate = j.value("cloud_rate", d.cloud_rate);
  p.missing_frame_rate = j.value("missing_frame_rate", d.missing_frame_rate);
  p.noise_scale = j.value("noise_scale", d.noise_scale);
  p.temperature_sensitivity = j.value("temperature_sensitivity", d.temperature_sensitivity);
  p.rainfall_sensitivity = j.value("rainfall_sensitivity", d.rainfall_sensitivity);
  p.temperature_memory_days = j.value("temperature_memory_days", d.temperature_memory_days);
  p.rain_memory_min_days = j.value("rain_memory_min_days", d.rain_memory_min_days);
  p.rain_memory_max_days = j.value("rain_memory_max_days", d.rain_memory_max_days);
  p.landcover_patches = j.value("landcover_patches", d.landcover_patches);
  p.nonvegetated_fraction = j.value("nonvegetated_fraction", d.nonvegetated_fraction);
  p.coefficient_jitter = j.value("coefficient_jitter", d.coefficient_jitter);
  p.phase_jitter_days = j.value("phase_jitter_days", d.phase_jitter_days);
}

/// Every observation of one location over all simulated years.
/// Frames are indexed by (year - first_year) * 73 + slot.
struct LocationSeries {
  std::string location_id;
  int first_year = 0;
  int years = 0;
  int first_daily_gday = 0;  // grid day of weather row 0
  Tensor<float> red, nir, ndvi, quality_mask;  // [years*73, H, W]
  Tensor<float> landcover_class, elevation;    // [H, W]
  Tensor<float> weather;                       // [days, 8]

  int frame_index(int year, int slot) const { return (year - first_year) * kSlotsPerYear + slot; }
  int frame_gday(int frame) const { return grid_day(first_year, 0) + frame * kStrideDays; }
};

namespace synth {

struct ClassProfile {
  int code;
  double weight;
  double base, amplitude, phase_days, brightness;
  double temperature_gain, rainfall_gain;
};

inline const std::vector<ClassProfile>& class_profiles() {
  static const std::vector<ClassProfile> p = {
      {landcover::kCrop, 0.36, 0.45, 0.30, 100, 0.50, 1.0, 1.2},
      {landcover::kGrass, 0.26, 0.50, 0.22, 80, 0.42, 0.8, 1.4},
      {landcover::kTree, 0.24, 0.62, 0.14, 95, 0.32, 0.6, 0.6},
      {landcover::kShrub, 0.14, 0.38, 0.18, 115, 0.55, -0.5, 1.0},
      {landcover::kBuilt, 0.0, 0.12, 0.03, 90, 0.60, 0.1, 0.1},
      {landcover::kWater, 0.0, -0.25, 0.02, 0, 0.10, 0.0, 0.0},
  };
  return p;
}

inline const ClassProfile& profile(int code) {
  for (const auto& c : class_profiles())
    if (c.code == code) return c;
  throw ContractError("no synthetic profile for landcover class " + std::to_string(code));
}

/// Low-frequency random field with roughly unit standard deviation.
struct SmoothField {
  struct Wave {
    double kx, ky, phase;
  };
  std::vector<Wave> waves;

  template <typename Rng>
  SmoothField(Rng& rng, double min_wavelength, double max_wavelength, int count = 4) {
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < count; ++i) {
      const double len = min_wavelength + (max_wavelength - min_wavelength) * u(rng);
      const double ang = 2 * std::numbers::pi * u(rng);
      const double k = 2 * std::numbers::pi / len;
      waves.push_back({k * std::cos(ang), k * std::sin(ang), 2 * std::numbers::pi * u(rng)});
    }
  }

  double operator()(double y, double x) const {
    double s = 0;
    for (const auto& w : waves) s += std::cos(w.kx * x + w.ky * y + w.phase);
    return s * std::sqrt(2.0 / static_cast<double>(waves.size()));
  }
};

inline std::uint64_t location_seed(std::uint64_t seed, int location_index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(location_index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline constexpr double kTempSeasonalAmplitude = 9.0;
inline constexpr double kTempSeasonalPhase = 105.0;
inline constexpr double kWetBase = 0.3;
inline constexpr double kRainMean = 6.0;

inline double seasonal_wave(double doy, double phase) {
  return std::sin(2 * std::numbers::pi * (doy - phase) / kGridYearDays);
}

}  // namespace synth

/// Simulates one location: landcover layout, per-pixel response coefficients,
/// daily weather and every 5-day observation of every simulated year.
inline LocationSeries simulate_location(const SyntheticWorldParams& p, int location_index, const std::string& location_id) {
  using namespace synth;
  p.validate();
  std::mt19937_64 rng(location_seed(p.seed, location_index));
  std::uniform_real_distribution<double> unif(0, 1);
  std::normal_distribution<double> gauss(0, 1);
  const int h = p.height, w = p.width, hw = h * w;
  const int years = p.last_year - p.first_year + 1;
  const int frames = years * kSlotsPerYear;

  LocationSeries s;
  s.location_id = location_id;
  s.first_year = p.first_year;
  s.years = years;

  // landcover: Voronoi patches with classes drawn by weight
  std::vector<double> py(p.landcover_patches), px(p.landcover_patches);
  std::vector<int> pcls(p.landcover_patches);
  std::vector<double> poffset(p.landcover_patches);
  double total_w = 0;
  for (const auto& c : class_profiles()) total_w += c.weight;
  for (int k = 0; k < p.landcover_patches; ++k) {
    py[k] = unif(rng) * h;
    px[k] = unif(rng) * w;
    if (unif(rng) < p.nonvegetated_fraction) {
      pcls[k] = unif(rng) < 0.5 ? landcover::kBuilt : landcover::kWater;
    } else {
      double r = unif(rng) * total_w;
      pcls[k] = class_profiles().front().code;
      for (const auto& c : class_profiles()) {
        if (c.weight <= 0) continue;
        if (r < c.weight) {
          pcls[k] = c.code;
          break;
        }
        r -= c.weight;
      }
    }
    poffset[k] = gauss(rng);
  }
  std::vector<int> patch(hw);
  s.landcover_class = Tensor<float>({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int best = 0;
      double bd = 1e300;
      for (int k = 0; k < p.landcover_patches; ++k) {
        const double d = (y + 0.5 - py[k]) * (y + 0.5 - py[k]) + (x + 0.5 - px[k]) * (x + 0.5 - px[k]);
        if (d < bd) {
          bd = d;
          best = k;
        }
      }
      patch[y * w + x] = best;
      s.landcover_class[y * w + x] = static_cast<float>(pcls[best]);
    }

  // static maps and per-pixel coefficients
  SmoothField elev_f(rng, 24, 64), base_f(rng, 12, 40), amp_f(rng, 12, 40), phase_f(rng, 12, 40),
      sens_f(rng, 12, 40), tau_f(rng, 12, 40), bright_f(rng, 12, 40);
  const double elev_base = 200 + 600 * unif(rng);
  s.elevation = Tensor<float>({h, w});
  std::vector<double> base(hw), amp(hw), phase(hw), s_t(hw), s_r(hw), tau(hw), bright(hw);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int i = y * w + x;
      const auto& cp = profile(pcls[patch[i]]);
      const double j = p.coefficient_jitter;
      const double elev = elev_base + 150 * elev_f(y, x);
      s.elevation[i] = static_cast<float>(elev);
      base[i] = cp.base + j * 0.5 * (base_f(y, x) + poffset[patch[i]]) * 0.5;
      amp[i] = cp.amplitude * (1 + j * amp_f(y, x));
      phase[i] = cp.phase_days + p.phase_jitter_days * phase_f(y, x) + (elev - 500) / 100.0;
      s_t[i] = p.temperature_sensitivity * cp.temperature_gain * (1 + j * sens_f(y, x));
      s_r[i] = p.rainfall_sensitivity * cp.rainfall_gain * (1 + j * sens_f(y, x));
      tau[i] = p.rain_memory_min_days +
               (p.rain_memory_max_days - p.rain_memory_min_days) * 0.5 * (1 + std::tanh(tau_f(y, x)));
      bright[i] = cp.brightness * (1 + 0.5 * j * bright_f(y, x));
    }

  // daily weather, with one spin-up year so the memory terms start stationary
  const int spin = kGridYearDays;
  const int days = spin + years * kGridYearDays;
  s.first_daily_gday = grid_day(p.first_year, 0) - spin;
  s.weather = Tensor<float>({days, static_cast<int>(kWeatherVariables.size())});
  const double t_loc = 10 + 2 * (2 * unif(rng) - 1);
  std::vector<double> temp_anom(days), rain(days);
  double wet_regime = gauss(rng), slow_t = 1.5 * gauss(rng), fast_t = 2.5 * gauss(rng), press = 0, wind = 0;
  for (int d = 0; d < days; ++d) {
    const double doy = grid_doy(s.first_daily_gday + d);
    wet_regime = 0.99 * wet_regime + std::sqrt(1 - 0.99 * 0.99) * gauss(rng);
    slow_t = 0.99 * slow_t + 1.5 * std::sqrt(1 - 0.99 * 0.99) * gauss(rng);
    fast_t = 0.8 * fast_t + 2.5 * std::sqrt(1 - 0.8 * 0.8) * gauss(rng);
    press = 0.7 * press + 6 * std::sqrt(1 - 0.49) * gauss(rng);
    wind = 0.6 * wind + 1.5 * std::sqrt(1 - 0.36) * gauss(rng);
    const double p_wet = std::clamp(kWetBase + 0.12 * wet_regime, 0.05, 0.8);
    const bool wet = unif(rng) < p_wet;
    const double amount = wet ? -std::log(1 - unif(rng)) * kRainMean * std::exp(0.3 * wet_regime) : 0.0;
    const double anomaly = slow_t + fast_t;
    const double t_mean = t_loc + kTempSeasonalAmplitude * seasonal_wave(doy, kTempSeasonalPhase) + anomaly;
    const double dtr = std::max(2.0, 8 + 2 * seasonal_wave(doy, kTempSeasonalPhase) + gauss(rng) - 3 * wet);
    temp_anom[d] = anomaly;
    rain[d] = amount;
    float* row = s.weather.data() + static_cast<std::size_t>(d) * kWeatherVariables.size();
    row[0] = static_cast<float>(amount);
    row[1] = static_cast<float>(1013 + press - 4 * wet);
    row[2] = static_cast<float>(t_mean);
    row[3] = static_cast<float>(t_mean - dtr / 2);
    row[4] = static_cast<float>(t_mean + dtr / 2);
    row[5] = static_cast<float>(3 + std::abs(wind) + (wet ? 1.0 : 0.0));
    row[6] = static_cast<float>(std::clamp(72 + 12 * wet - 1.2 * fast_t + 4 * gauss(rng), 20.0, 100.0));
    row[7] = static_cast<float>(std::max(0.0, 190 + 110 * seasonal_wave(doy, 80) - 70 * wet + 15 * gauss(rng)));
  }

  // smoothed drivers: exponential memory of the temperature anomaly (location-wide)
  // and of the rainfall departure from its long-run mean (per-pixel time constant)
  const double rain_mean = [&] {
    double acc = 0;
    for (double r : rain) acc += r;
    return acc / days;
  }();
  std::vector<double> temp_mem(days);
  {
    const double a = 1.0 / p.temperature_memory_days;
    double m = 0;
    for (int d = 0; d < days; ++d) temp_mem[d] = m = m + a * (temp_anom[d] - m);
  }
  std::vector<int> frame_daily(frames);
  for (int f = 0; f < frames; ++f) frame_daily[f] = spin + f * kStrideDays;
  std::vector<double> rain_at_frame(static_cast<std::size_t>(frames) * hw);
  for (int i = 0; i < hw; ++i) {
    const double a = 1.0 / tau[i];
    double m = 0;
    int f = 0;
    for (int d = 0; d < days && f < frames; ++d) {
      m += a * (rain[d] - rain_mean - m);
      if (d == frame_daily[f]) rain_at_frame[static_cast<std::size_t>(f++) * hw + i] = m;
    }
  }

  // observations
  s.red = Tensor<float>({frames, h, w});
  s.nir = Tensor<float>({frames, h, w});
  s.quality_mask = Tensor<float>({frames, h, w}, 1.0f);
  std::vector<std::pair<double, int>> cloud(hw);
  for (int f = 0; f < frames; ++f) {
    const double doy = grid_doy(s.frame_gday(f));
    const bool missing = p.missing_frame_rate > 0 && unif(rng) < p.missing_frame_rate;
    const int n_cloud = static_cast<int>(std::lround(p.cloud_rate * hw));
    std::vector<char> cloudy(hw, 0);
    if (n_cloud > 0) {
      const int blobs = 3 + static_cast<int>(unif(rng) * 4);
      std::vector<double> cy(blobs), cx(blobs), cr(blobs);
      for (int b = 0; b < blobs; ++b) {
        cy[b] = unif(rng) * h;
        cx[b] = unif(rng) * w;
        cr[b] = 3 + 7 * unif(rng);
      }
      for (int i = 0; i < hw; ++i) {
        const double y = i / w + 0.5, x = i % w + 0.5;
        double v = 0.05 * unif(rng);
        for (int b = 0; b < blobs; ++b)
          v += std::exp(-((y - cy[b]) * (y - cy[b]) + (x - cx[b]) * (x - cx[b])) / (2 * cr[b] * cr[b]));
        cloud[i] = {v, i};
      }
      std::nth_element(cloud.begin(), cloud.begin() + (n_cloud - 1), cloud.end(),
                       [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
      for (int k = 0; k < n_cloud; ++k) cloudy[cloud[k].second] = 1;
    }
    for (int i = 0; i < hw; ++i) {
      const std::size_t o = static_cast<std::size_t>(f) * hw + i;
      const double eps = p.noise_scale > 0 ? p.noise_scale * gauss(rng) : 0.0;
      const double beps = p.noise_scale > 0 ? 0.5 * p.noise_scale * gauss(rng) : 0.0;
      if (missing) {
        s.red[o] = s.nir[o] = std::numeric_limits<float>::quiet_NaN();
        s.quality_mask[o] = 0;
        continue;
      }
      if (cloudy[i]) {
        s.red[o] = static_cast<float>(0.32 + 0.06 * unif(rng));
        s.nir[o] = static_cast<float>(0.34 + 0.06 * unif(rng));
        s.quality_mask[o] = 0;
        continue;
      }
      double v = base[i] + amp[i] * seasonal_wave(doy, phase[i]) + s_t[i] * temp_mem[frame_daily[f]] +
                 s_r[i] * rain_at_frame[o] + eps;
      v = std::clamp(v, -0.9, 0.95);
      const double b = std::clamp(bright[i] * (1 + 0.05 * seasonal_wave(doy, 0)) + beps, 0.02, 0.95);
      s.nir[o] = static_cast<float>(b * (1 + v) / 2);
      s.red[o] = static_cast<float>(b * (1 - v) / 2);
    }
  }
  s.ndvi = compute_ndvi(s.red, s.nir);
  return s;
}

/// Cuts the cube for (year, season) out of a simulated location.
inline Minicube cut_minicube(const LocationSeries& s, const SyntheticWorldParams& p, int year, const std::string& season,
                             const std::string& split_tag) {
  require(year >= s.first_year && year < s.first_year + s.years, "cut_minicube: year outside simulated range");
  const Season& se = season_by_name(season);
  const int t = p.context_length, k = p.target_length, h = p.height, w = p.width, hw = h * w;
  Minicube c;
  c.location_id = s.location_id;
  c.split_tag = split_tag;
  c.season = season;
  c.year = year;
  c.start_slot = se.target_start_slot - t;
  c.context_length = t;
  c.target_length = k;
  c.id = split_tag + "_" + s.location_id + "_" + std::to_string(year) + "_" + season;
  for (const auto v : kWeatherVariables) c.weather_variables.emplace_back(v);
  const int f0 = s.frame_index(year, c.start_slot);
  auto slice = [&](const Tensor<float>& src) {
    Tensor<float> out({t + k, h, w});
    std::copy(src.data() + static_cast<std::size_t>(f0) * hw, src.data() + static_cast<std::size_t>(f0 + t + k) * hw,
              out.data());
    return out;
  };
  c.sat_red = slice(s.red);
  c.sat_nir = slice(s.nir);
  c.ndvi = slice(s.ndvi);
  c.quality_mask = slice(s.quality_mask);
  c.landcover_class = s.landcover_class;
  c.landcover_mask = Tensor<float>({h, w});
  for (int i = 0; i < hw; ++i) c.landcover_mask[i] = landcover::vegetated(static_cast<int>(s.landcover_class[i])) ? 1.0f : 0.0f;
  c.elevation = s.elevation;
  const int nv = static_cast<int>(kWeatherVariables.size());
  c.weather = Tensor<float>({kStrideDays * (t + k), nv});
  for (int f = 0; f < t + k; ++f) {
    c.time_axis.push_back(iso_date(year, c.start_slot + f));
    const int last_day = s.frame_gday(f0 + f) - s.first_daily_gday;
    for (int j = 0; j < kStrideDays; ++j) {
      const int day = last_day - (kStrideDays - 1) + j;
      for (int v = 0; v < nv; ++v) c.weather.at(f * kStrideDays + j, v) = s.weather.at(day, v);
    }
  }
  validate(c);
  return c;
}

/// Single-cube convenience over simulate_location + cut_minicube.
inline Minicube synthesize_minicube(const SyntheticWorldParams& p, int location_index, int year, const std::string& season,
                                    const std::string& split_tag) {
  char id[16];
  std::snprintf(id, sizeof id, "loc%03d", location_index);
  return cut_minicube(simulate_location(p, location_index, id), p, year, season, split_tag);
}

}  // namespace vegcast
