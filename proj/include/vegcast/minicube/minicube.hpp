#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <string_view>
#include <vector>

#include "vegcast/core/tensor.hpp"

namespace vegcast {

inline constexpr int kStrideDays = 5;
inline constexpr int kSlotsPerYear = 73;
inline constexpr int kGridYearDays = kSlotsPerYear * kStrideDays;  // 365
inline constexpr double kNdviEpsilon = 1e-8;

inline constexpr std::array<std::string_view, 8> kWeatherVariables = {
    "rainfall", "sea_level_pressure", "temperature_mean", "temperature_min",
    "temperature_max", "wind_speed", "relative_humidity", "shortwave_radiation"};
inline constexpr int kWeatherStats = 4;  // min, mean, max, std

// ESA WorldCover codes.
namespace landcover {
inline constexpr int kTree = 10;
inline constexpr int kShrub = 20;
inline constexpr int kGrass = 30;
inline constexpr int kCrop = 40;
inline constexpr int kBuilt = 50;
inline constexpr int kWater = 80;

inline bool vegetated(int code) { return code == kTree || code == kShrub || code == kGrass || code == kCrop; }

inline std::string name(int code) {
  switch (code) {
    case kTree: return "forest";
    case kShrub: return "shrubland";
    case kGrass: return "grassland";
    case kCrop: return "cropland";
    case kBuilt: return "built";
    case kWater: return "water";
    default: return "class" + std::to_string(code);
  }
}
}  // namespace landcover

inline const std::vector<std::string>& split_tags() {
  static const std::vector<std::string> tags = {"train", "val", "ood-t", "ood-s", "ood-st"};
  return tags;
}

inline bool known_split(const std::string& tag) {
  for (const auto& t : split_tags())
    if (t == tag) return true;
  return false;
}

// ---------------------------------------------------------------- time grid
//
// Every year is divided into 73 slots at 5-day stride starting on January 1.
// A "grid day" counts 365-day grid years since 1970, so the same slot one year
// earlier is exactly 365 grid days back.

inline int grid_day(int year, int slot) { return (year - 1970) * kGridYearDays + slot * kStrideDays; }
inline int grid_year(int gday) { return 1970 + (gday >= 0 ? gday / kGridYearDays : -((-gday + kGridYearDays - 1) / kGridYearDays)); }
inline int grid_doy(int gday) { return ((gday % kGridYearDays) + kGridYearDays) % kGridYearDays; }

inline std::string iso_date(int year, int slot) {
  using namespace std::chrono;
  const sys_days d = sys_days{std::chrono::year{year} / January / 1} + days{slot * kStrideDays};
  const year_month_day ymd{d};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                static_cast<unsigned>(ymd.day()));
  return buf;
}

/// Inverse of iso_date; throws FormatError for dates off the 5-day grid.
inline std::pair<int, int> parse_grid_date(const std::string& iso) {
  using namespace std::chrono;
  int y = 0;
  unsigned m = 0, d = 0;
  if (iso.size() != 10 || std::sscanf(iso.c_str(), "%4d-%2u-%2u", &y, &m, &d) != 3)
    throw FormatError("malformed date '" + iso + "'");
  const year_month_day ymd{std::chrono::year{y}, month{m}, day{d}};
  if (!ymd.ok()) throw FormatError("invalid date '" + iso + "'");
  const int offset = static_cast<int>((sys_days{ymd} - sys_days{std::chrono::year{y} / January / 1}).count());
  if (offset % kStrideDays != 0 || offset / kStrideDays >= kSlotsPerYear)
    throw FormatError("date '" + iso + "' is not on the 5-day grid");
  return {y, offset / kStrideDays};
}

// Target periods start at fixed slots; the context precedes them.
struct Season {
  std::string name;
  int target_start_slot;
};

inline const std::vector<Season>& seasons() {
  static const std::vector<Season> s = {{"MAM", 12}, {"MJJ", 24}, {"JAS", 36}, {"SON", 48}};
  return s;
}

inline const Season& season_by_name(const std::string& name) {
  for (const auto& s : seasons())
    if (s.name == name) return s;
  throw ContractError("unknown season '" + name + "'");
}

// ---------------------------------------------------------------- the sample

/// One spatio-temporal sample. Cuboids are [T+K, H, W], maps [H, W], weather [5(T+K), V].
/// Missing observations are NaN in the spectral fields; contaminated ones have quality_mask 0.
struct Minicube {
  std::string id;
  std::string location_id;
  std::string split_tag = "train";
  std::string season;
  int year = 0;
  int start_slot = 0;  // slot of the first context frame
  int context_length = 0;
  int target_length = 0;
  std::vector<std::string> time_axis;
  std::vector<std::string> weather_variables;

  Tensor<float> sat_red;
  Tensor<float> sat_nir;
  Tensor<float> ndvi;
  Tensor<float> quality_mask;
  Tensor<float> landcover_mask;
  Tensor<float> landcover_class;
  Tensor<float> weather;
  Tensor<float> elevation;

  int frames() const { return context_length + target_length; }
  int height() const { return ndvi.rank() == 3 ? ndvi.dim(1) : 0; }
  int width() const { return ndvi.rank() == 3 ? ndvi.dim(2) : 0; }
  int first_target_day() const { return grid_day(year, start_slot + context_length); }
  int frame_day(int f) const { return grid_day(year, start_slot + f); }
};

inline bool is_binary(const Tensor<float>& t) {
  for (float v : t.values())
    if (v != 0.0f && v != 1.0f) return false;
  return true;
}

/// Throws FormatError (naming the field) when a cube breaks its structural invariants.
inline void validate(const Minicube& c) {
  const int t = c.frames(), h = c.height(), w = c.width();
  if (c.context_length <= 0 || c.target_length <= 0) throw FormatError(c.id + ": context/target lengths must be positive");
  const Shape cube{t, h, w}, map{h, w};
  auto check = [&](const Tensor<float>& x, const Shape& s, const char* field) {
    if (x.shape() != s)
      throw FormatError(c.id + ": field '" + field + "' has shape " + shape_string(x.shape()) + ", expected " +
                        shape_string(s));
  };
  check(c.sat_red, cube, "sat_red");
  check(c.sat_nir, cube, "sat_nir");
  check(c.ndvi, cube, "ndvi");
  check(c.quality_mask, cube, "quality_mask");
  check(c.landcover_mask, map, "landcover_mask");
  check(c.landcover_class, map, "landcover_class");
  check(c.elevation, map, "elevation");
  if (c.weather.rank() != 2 || c.weather.dim(0) != kStrideDays * t)
    throw FormatError(c.id + ": field 'weather' must have " + std::to_string(kStrideDays * t) + " daily rows");
  if (static_cast<std::size_t>(c.weather.dim(1)) != c.weather_variables.size())
    throw FormatError(c.id + ": field 'weather' column count does not match its variable list");
  if (!is_binary(c.quality_mask)) throw FormatError(c.id + ": field 'quality_mask' is not binary");
  if (!is_binary(c.landcover_mask)) throw FormatError(c.id + ": field 'landcover_mask' is not binary");
  if (static_cast<int>(c.time_axis.size()) != t) throw FormatError(c.id + ": time axis length mismatch");
  if (!known_split(c.split_tag)) throw FormatError(c.id + ": unknown split tag '" + c.split_tag + "'");
}

// ---------------------------------------------------------------- derived fields

/// NDVI = (nir - red) / (nir + red + 1e-8), elementwise; NaN propagates.
template <typename S>
Tensor<S> compute_ndvi(const Tensor<S>& red, const Tensor<S>& nir) {
  require(red.shape() == nir.shape(),
          "compute_ndvi: shape mismatch " + shape_string(red.shape()) + " vs " + shape_string(nir.shape()));
  Tensor<S> out(red.shape());
  const S eps = static_cast<S>(kNdviEpsilon);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (nir[i] - red[i]) / (nir[i] + red[i] + eps);
  return out;
}

/// M_Q * M_L with the landcover map broadcast over time.
template <typename S>
Tensor<S> valid_pixel_mask(const Tensor<S>& quality, const Tensor<S>& landcover) {
  require(quality.rank() == 3 && landcover.rank() == 2 && quality.dim(1) == landcover.dim(0) &&
              quality.dim(2) == landcover.dim(1),
          "valid_pixel_mask: incompatible shapes " + shape_string(quality.shape()) + " and " +
              shape_string(landcover.shape()));
  const std::size_t hw = landcover.size();
  Tensor<S> out(quality.shape());
  for (std::size_t i = 0; i < quality.size(); ++i) {
    const S q = quality[i], l = landcover[i % hw];
    require((q == S(0) || q == S(1)) && (l == S(0) || l == S(1)), "valid_pixel_mask: masks must be binary");
    out[i] = q * l;
  }
  return out;
}

/// Per window of `stride` days and per variable: (min, mean, max, population std).
/// Output [D/stride, 4V]; variable v occupies columns 4v..4v+3.
template <typename S>
Tensor<S> aggregate_weather(const Tensor<S>& daily, int stride = kStrideDays) {
  require(daily.rank() == 2, "aggregate_weather: expected [days, variables]");
  const int d = daily.dim(0), v = daily.dim(1);
  require(stride > 0 && d % stride == 0,
          "aggregate_weather: " + std::to_string(d) + " days not divisible by stride " + std::to_string(stride));
  Tensor<S> out({d / stride, kWeatherStats * v});
  for (int win = 0; win < d / stride; ++win)
    for (int var = 0; var < v; ++var) {
      double lo = daily.at(win * stride, var), hi = lo, sum = 0;
      for (int k = 0; k < stride; ++k) {
        const double x = daily.at(win * stride + k, var);
        lo = std::min(lo, x);
        hi = std::max(hi, x);
        sum += x;
      }
      const double mean = sum / stride;
      double ss = 0;
      for (int k = 0; k < stride; ++k) {
        const double e = daily.at(win * stride + k, var) - mean;
        ss += e * e;
      }
      out.at(win, kWeatherStats * var + 0) = static_cast<S>(lo);
      out.at(win, kWeatherStats * var + 1) = static_cast<S>(mean);
      out.at(win, kWeatherStats * var + 2) = static_cast<S>(hi);
      out.at(win, kWeatherStats * var + 3) = static_cast<S>(std::sqrt(ss / stride));
    }
  return out;
}

}  // namespace vegcast
