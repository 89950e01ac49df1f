#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "vegcast/vegcast.hpp"

namespace vegcast::testing {

/// A handful of synthetic cubes at a small spatial size, from distinct locations.
inline std::vector<Minicube> small_cubes(int count, int size = 16, std::uint64_t seed = 11) {
  SyntheticWorldParams p;
  p.seed = seed;
  p.height = size;
  p.width = size;
  p.first_year = 2019;
  p.last_year = 2021;
  const char* seasons[] = {"MAM", "MJJ", "JAS", "SON"};
  std::vector<Minicube> out;
  for (int i = 0; i < count; ++i) out.push_back(synthesize_minicube(p, i, 2020, seasons[i % 4], "train"));
  return out;
}

/// A small configuration of `family` for fast tests.
inline ModelConfig tiny_config(const std::string& family, bool meteo = true, std::uint64_t seed = 42) {
  auto cfg = ModelConfig::defaults(family);
  cfg.meteo = meteo;
  cfg.seed = seed;
  cfg.encdec.hidden = 4;
  cfg.encdec.groups = 2;
  cfg.conditioning.hidden = 4;
  cfg.cells = 1;
  cfg.unet_depth = 2;
  cfg.gsta_layers = 1;
  return cfg;
}

/// One AdamW step on the masked MSE of `batch`.
template <typename S>
void one_training_step(Model<S>& model, const Batch<S>& batch, double lr = 1e-2) {
  auto out = model.forward(batch);
  auto loss = ops::masked_mse(out.prediction, batch.target, batch.mask);
  model.params().zero_grad();
  backward(loss);
  AdamW<S> opt({lr, 0.9, 0.999, 1e-8, 0.0});
  opt.step(model.params());
  model.params().zero_grad();
}

/// The batch with every future weather value shifted by `delta`.
template <typename S>
Batch<S> perturb_future_weather(const Batch<S>& b, S delta) {
  Batch<S> o = b;
  const std::size_t plane = static_cast<std::size_t>(b.f) * b.h * b.w;
  for (int n = 0; n < b.n; ++n)
    for (int s = b.t; s < b.t + b.k; ++s) {
      S* p = o.weather.data() + (static_cast<std::size_t>(n) * (b.t + b.k) + s) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] += delta;
    }
  return o;
}

}  // namespace vegcast::testing
