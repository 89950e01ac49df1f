#pragma once

#include <string>
#include <vector>

#include "vegcast/baselines.hpp"
#include "vegcast/evaluation/metrics.hpp"
#include "vegcast/minicube/dataset.hpp"

namespace vegcast::eval {

inline const std::vector<std::string>& baseline_names() {
  static const std::vector<std::string> n{"persistence", "prevyear", "climatology"};
  return n;
}

inline Forecast baseline_forecast(const std::string& name, const Minicube& c, const Dataset& ds) {
  if (name == "persistence") return baselines::persistence_forecast(c);
  if (name == "prevyear") return baselines::previous_year_forecast(c, ds.history(c.location_id));
  if (name == "climatology") return baselines::climatology_forecast(c, ds.history(c.location_id));
  throw ContractError("unknown baseline '" + name + "'");
}

/// Scores forecasts aligned with `cubes`: pixel filter, per-pixel metrics,
/// aggregation, and the horizon curve over eligible pixels.
inline ScoreTable score_forecasts(const std::vector<Minicube>& cubes, const std::vector<Forecast>& forecasts,
                                  const std::string& model_id, const std::string& config_hash,
                                  std::vector<PixelScore>* pixels = nullptr) {
  require(cubes.size() == forecasts.size(), "score_forecasts: one forecast per cube required");
  std::vector<PixelScore> all;
  HorizonAccumulator horizon;
  for (std::size_t i = 0; i < cubes.size(); ++i) {
    require(forecasts[i].cube_id.empty() || forecasts[i].cube_id == cubes[i].id,
            "score_forecasts: forecast for '" + forecasts[i].cube_id + "' paired with cube '" + cubes[i].id + "'");
    auto scores = score_cube(cubes[i], forecasts[i]);
    const auto eligible = pixel_filter(cubes[i]);
    horizon.add(cubes[i], forecasts[i], &eligible);
    all.insert(all.end(), std::make_move_iterator(scores.begin()), std::make_move_iterator(scores.end()));
  }
  ScoreTable t = aggregate(all);
  t.model_id = model_id;
  t.config_hash = config_hash;
  if (!cubes.empty()) {
    t.horizon_rmse = horizon.curve();
    t.rmse_25d = horizon.scalar(25);
  }
  if (pixels) *pixels = std::move(all);
  return t;
}

}  // namespace vegcast::eval
