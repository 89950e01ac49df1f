#pragma once

#include <cstring>
#include <string>

#include "vegcast/core/binary.hpp"
#include "vegcast/minicube/minicube.hpp"

namespace vegcast {

/// A K-step NDVI prediction for one minicube.
struct Forecast {
  Tensor<float> ndvi_hat;  // [K, H, W]
  Tensor<float> flagged;   // [H, W]; 1 where a reference forecaster could not produce values (NaN emitted)
  std::string model_id;
  std::string config_hash;
  std::string context_fingerprint;
  std::string cube_id;

  int steps() const { return ndvi_hat.dim(0); }
};

/// Hash of everything a forecaster may legally look at: context frames,
/// the quality mask, the full weather series and elevation.
inline std::string context_fingerprint(const Minicube& c) {
  const std::size_t hw = static_cast<std::size_t>(c.height()) * c.width();
  std::string bytes;
  auto append = [&](const float* p, std::size_t n) { bytes.append(reinterpret_cast<const char*>(p), n * sizeof(float)); };
  append(c.ndvi.data(), c.context_length * hw);
  append(c.sat_red.data(), c.context_length * hw);
  append(c.sat_nir.data(), c.context_length * hw);
  append(c.quality_mask.data(), c.context_length * hw);
  append(c.weather.data(), c.weather.size());
  append(c.elevation.data(), c.elevation.size());
  bytes += c.id;
  return io::fnv1a_hex(bytes);
}

/// Clips to [-1, 1]; NaN stays NaN.
inline Tensor<float> clip_ndvi(Tensor<float> t) {
  for (auto& v : t.values())
    if (!std::isnan(v)) v = std::clamp(v, -1.0f, 1.0f);
  return t;
}

}  // namespace vegcast
