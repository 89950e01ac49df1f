#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "vegcast/baselines.hpp"

using namespace vegcast;
using namespace vegcast::baselines;

namespace {

/// A 1x1 cube whose context/target NDVI is given explicitly.
Minicube tiny_cube(const std::vector<float>& ndvi, const std::vector<float>& quality, int context, int year = 2021,
                   int start_slot = 2) {
  Minicube c;
  c.id = "t";
  c.location_id = "loc000";
  c.year = year;
  c.start_slot = start_slot;
  c.context_length = context;
  c.target_length = static_cast<int>(ndvi.size()) - context;
  const int t = static_cast<int>(ndvi.size());
  c.ndvi = Tensor<float>({t, 1, 1}, ndvi);
  c.sat_red = Tensor<float>({t, 1, 1}, 0.1f);
  c.sat_nir = Tensor<float>({t, 1, 1}, 0.3f);
  c.quality_mask = Tensor<float>({t, 1, 1}, quality);
  c.landcover_mask = Tensor<float>({1, 1}, 1.0f);
  c.landcover_class = Tensor<float>({1, 1}, 40.0f);
  c.elevation = Tensor<float>({1, 1});
  c.weather = Tensor<float>({5 * t, 8});
  for (int f = 0; f < t; ++f) c.time_axis.push_back(iso_date(year, start_slot + f));
  for (auto v : kWeatherVariables) c.weather_variables.emplace_back(v);
  return c;
}

/// History of one pixel over `years` full years, value = fn(year, slot).
template <typename F>
HistoryStack tiny_history(int first_year, int years, F fn) {
  HistoryStack h;
  h.location_id = "loc000";
  const int n = years * kSlotsPerYear;
  h.ndvi = Tensor<float>({n, 1, 1});
  h.valid = Tensor<float>({n, 1, 1}, 1.0f);
  for (int y = 0; y < years; ++y)
    for (int s = 0; s < kSlotsPerYear; ++s) {
      h.days.push_back(grid_day(first_year + y, s));
      h.ndvi[y * kSlotsPerYear + s] = static_cast<float>(fn(first_year + y, s));
    }
  return h;
}

}  // namespace

TEST(Persistence, RepeatsLastValidValue) {
  std::vector<float> v(30, 0.0f), q(30, 1.0f);
  v[9] = 0.62f;
  auto f = persistence_forecast(tiny_cube(v, q, 10));
  for (int k = 0; k < 20; ++k) EXPECT_EQ(f.ndvi_hat[k], 0.62f);
  EXPECT_EQ(f.flagged[0], 0.0f);
}

TEST(Persistence, SkipsCloudyObservations) {
  std::vector<float> v = {0.3f, 0.9f, 0.5f, 0.5f}, q = {1, 0, 1, 1};
  auto f = persistence_forecast(tiny_cube(v, q, 2));
  EXPECT_EQ(f.ndvi_hat[0], 0.3f);
  EXPECT_EQ(f.ndvi_hat[1], 0.3f);
}

TEST(Persistence, AllCloudyContextIsFlagged) {
  std::vector<float> v(4, 0.4f), q = {0, 0, 1, 1};
  auto f = persistence_forecast(tiny_cube(v, q, 2));
  EXPECT_TRUE(std::isnan(f.ndvi_hat[0]));
  EXPECT_EQ(f.flagged[0], 1.0f);
}

TEST(Interpolation, LinearAndConstantExtrapolation) {
  EXPECT_DOUBLE_EQ(interpolate_linear({0, 10}, {0.2, 0.4}, 5), 0.3);
  EXPECT_DOUBLE_EQ(interpolate_linear({3}, {0.7}, -100), 0.7);
  EXPECT_DOUBLE_EQ(interpolate_linear({3}, {0.7}, 100), 0.7);
  EXPECT_DOUBLE_EQ(interpolate_linear({0, 10, 20}, {0, 1, 0}, 15), 0.5);
}

TEST(PreviousYear, PeriodicHistoryReproducesTarget) {
  auto fn = [](int, int s) { return 0.4 + 0.3 * std::sin(s * 0.1); };
  auto h = tiny_history(2019, 3, fn);
  std::vector<float> v(30), q(30, 1.0f);
  for (int f = 0; f < 30; ++f) v[f] = static_cast<float>(fn(2021, 2 + f));
  auto c = tiny_cube(v, q, 10, 2021, 2);
  auto f = previous_year_forecast(c, h);
  for (int k = 0; k < 20; ++k) EXPECT_EQ(f.ndvi_hat[k], v[10 + k]);
}

TEST(PreviousYear, SinglePointExtrapolatesAndMissingYearFlags) {
  auto h = tiny_history(2020, 2, [](int, int) { return 0.5; });
  for (std::size_t i = 0; i < h.valid.size(); ++i) h.valid[i] = 0;
  h.valid[15] = 1;  // 2020, slot 15
  h.ndvi[15] = 0.33f;
  std::vector<float> v(30, 0.2f), q(30, 1.0f);
  auto f = previous_year_forecast(tiny_cube(v, q, 10, 2021, 2), h);
  for (int k = 0; k < 20; ++k) EXPECT_FLOAT_EQ(f.ndvi_hat[k], 0.33f);
  h.valid[15] = 0;
  auto g = previous_year_forecast(tiny_cube(v, q, 10, 2021, 2), h);
  EXPECT_EQ(g.flagged[0], 1.0f);
  EXPECT_TRUE(std::isnan(g.ndvi_hat[3]));
}

TEST(BoxFilter, ConstantsAreExactAndWeightsAreTrapezoid) {
  std::vector<double> c(73, 0.123456789);
  for (double v : box_filter_30d(c)) EXPECT_EQ(v, 0.123456789);
  std::vector<double> impulse(20, 0.0);
  impulse[10] = 1;
  auto r = box_filter_30d(impulse);
  EXPECT_NEAR(r[10], 1.0 / 6, 1e-15);
  EXPECT_NEAR(r[13], 1.0 / 12, 1e-15);
  EXPECT_EQ(r[14], 0.0);
  // edge: slot 0 sees weights 1 (itself), 1, 1, 1/2 over 3.5
  std::vector<double> ramp(10);
  for (int i = 0; i < 10; ++i) ramp[i] = i;
  EXPECT_NEAR(box_filter_30d(ramp)[0], (0 + 1 + 2 + 0.5 * 3) / 3.5, 1e-14);
}

TEST(Climatology, ConstantHistoryGivesConstant) {
  auto h = tiny_history(2017, 5, [](int, int) { return 0.37; });
  std::vector<float> v(30, 0.0f), q(30, 1.0f);
  auto f = climatology_forecast(tiny_cube(v, q, 10, 2019, 2), h);
  for (int k = 0; k < 20; ++k) EXPECT_EQ(f.ndvi_hat[k], 0.37f);
}

TEST(Climatology, SinusoidMatchesTrapezoidResponse) {
  const double a = 0.3, omega = 2 * std::numbers::pi / kSlotsPerYear;
  auto h = tiny_history(2017, 6, [&](int, int s) { return 0.4 + a * std::sin(omega * s); });
  std::vector<float> v(30, 0.0f), q(30, 1.0f);
  auto c = tiny_cube(v, q, 10, 2021, 26);
  auto f = climatology_forecast(c, h);
  const double gain = (1 + 2 * std::cos(omega) + 2 * std::cos(2 * omega) + std::cos(3 * omega)) / 6;
  for (int k = 0; k < 20; ++k) {
    const double s = 36 + k;
    // history holds float32 samples; compare against the filter of the stored values
    EXPECT_NEAR(f.ndvi_hat[k], 0.4 + gain * a * std::sin(omega * s), 2e-7);
  }
}

TEST(Climatology, TargetYearIsLeftOut) {
  auto h = tiny_history(2017, 5, [](int y, int s) { return 0.3 + 0.01 * (y - 2017) + 0.001 * s; });
  std::vector<float> v(30, 0.0f), q(30, 1.0f);
  auto c = tiny_cube(v, q, 10, 2019, 12);
  auto before = climatology_forecast(c, h);
  for (int s = 0; s < kSlotsPerYear; ++s) h.ndvi[2 * kSlotsPerYear + s] = 5.0f;
  auto after = climatology_forecast(c, h);
  EXPECT_TRUE(bit_equal(before.ndvi_hat, after.ndvi_hat));
}

TEST(Climatology, InvariantToSourceYearOrder) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> vals(5 * kSlotsPerYear);
  for (auto& x : vals) x = u(rng);
  auto h1 = tiny_history(2017, 5, [&](int y, int s) { return vals[(y - 2017) * kSlotsPerYear + s]; });
  const int perm[5] = {3, 0, 2, 4, 1};  // target year 2019 (index 2) stays put
  auto h2 = tiny_history(2017, 5, [&](int y, int s) { return vals[perm[y - 2017] * kSlotsPerYear + s]; });
  std::vector<float> v(30, 0.0f), q(30, 1.0f);
  auto c = tiny_cube(v, q, 10, 2019, 12);
  EXPECT_TRUE(bit_equal(climatology_forecast(c, h1).ndvi_hat, climatology_forecast(c, h2).ndvi_hat));
}

TEST(Climatology, TooFewYearsFlagged) {
  auto h = tiny_history(2020, 2, [](int, int) { return 0.5; });
  std::vector<float> v(30, 0.0f), q(30, 1.0f);
  auto f = climatology_forecast(tiny_cube(v, q, 10, 2021, 2), h);
  EXPECT_EQ(f.flagged[0], 1.0f);
}
