#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "vegcast/backbones.hpp"
#include "vegcast/conditioning.hpp"

namespace vegcast::testing {

struct LayerCheck {
  std::string name;
  double worst = 0.0;
  int draws = 0;
};

/// Redraws every parameter of `ps` from U(-scale, scale), including zero-initialized ones.
inline void randomize(ParamStore<double>& ps, std::mt19937_64& rng, double scale = 0.5) {
  std::uniform_real_distribution<double> d(-scale, scale);
  for (const auto& e : ps.entries())
    for (auto& v : e.second->value.values()) v = d(rng);
}

inline std::vector<Var<double>> param_leaves(const ParamStore<double>& ps) {
  std::vector<Var<double>> out;
  for (const auto& e : ps.entries()) out.push_back(e.second);
  return out;
}

/// One draw: builds a layer with random parameters and inputs, returns its worst relative error.
using DrawFn = std::function<double(std::mt19937_64&)>;

inline LayerCheck run_draws(const std::string& name, int draws, std::uint64_t seed, const DrawFn& fn) {
  LayerCheck r{name, 0.0, draws};
  std::mt19937_64 rng(seed);
  for (int i = 0; i < draws; ++i) r.worst = std::max(r.worst, fn(rng));
  return r;
}

inline ConditioningConfig small_cond(CondMethod m, int heads = 1) {
  ConditioningConfig c;
  c.method = m;
  c.location = FusionLocation::All;
  c.hidden = 5;
  c.heads = heads;
  c.variables = 3;
  c.features = 2;
  return c;
}

inline double check_cond_layer(CondMethod m, int heads, std::mt19937_64& rng) {
  const auto cfg = small_cond(m, heads);
  ParamStore<double> ps(rng());
  CondLayer<double> layer(ps, "cond", cfg, 4);
  randomize(ps, rng);
  auto x = leaf(random_tensor({2, 4, 3, 3}, rng));
  auto c = leaf(random_tensor({2, cfg.width(), 3, 3}, rng));
  auto leaves = param_leaves(ps);
  leaves.push_back(x);
  leaves.push_back(c);
  return gradient_check([&] { return layer(x, c); }, leaves, rng);
}

inline double check_convlstm_cell(std::mt19937_64& rng) {
  ParamStore<double> ps(rng());
  ConvLstmCell<double> cell(ps, "cell", 3, 4, 3);
  randomize(ps, rng);
  auto x = leaf(random_tensor({2, 3, 4, 4}, rng));
  auto h = leaf(random_tensor({2, 4, 4, 4}, rng));
  auto c = leaf(random_tensor({2, 4, 4, 4}, rng));
  auto leaves = param_leaves(ps);
  leaves.insert(leaves.end(), {x, h, c});
  return gradient_check(
      [&] {
        auto s = cell(x, {h, c});
        return ops::concat_channels<double>({s.h, s.c});
      },
      leaves, rng);
}

inline double check_stlstm_cell(std::mt19937_64& rng) {
  ParamStore<double> ps(rng());
  StLstmCell<double> cell(ps, "cell", 3, 4, 3);
  randomize(ps, rng);
  auto x = leaf(random_tensor({2, 3, 4, 4}, rng));
  auto h = leaf(random_tensor({2, 4, 4, 4}, rng));
  auto c = leaf(random_tensor({2, 4, 4, 4}, rng));
  auto m = leaf(random_tensor({2, 4, 4, 4}, rng));
  auto leaves = param_leaves(ps);
  leaves.insert(leaves.end(), {x, h, c, m});
  const double state = gradient_check(
      [&] {
        auto o = cell(x, {h, c}, m);
        return ops::concat_channels<double>({o.state.h, o.state.c, o.m});
      },
      leaves, rng);
  const double penalty = gradient_check([&] { return cell(x, {h, c}, m).penalty; }, leaves, rng);
  return std::max(state, penalty);
}

inline double check_gsta_block(std::mt19937_64& rng) {
  ParamStore<double> ps(rng());
  GstaBlock<double> block(ps, "gsta", 6, 3);
  randomize(ps, rng);
  auto x = leaf(random_tensor({2, 6, 5, 5}, rng));
  auto leaves = param_leaves(ps);
  leaves.push_back(x);
  return gradient_check([&] { return block(x); }, leaves, rng);
}

inline double check_unet_block(std::mt19937_64& rng) {
  ParamStore<double> ps(rng());
  UNetBlock<double> block(ps, "unet", 3, 4, 3, 2);
  randomize(ps, rng);
  auto x = leaf(random_tensor({2, 3, 4, 4}, rng));
  auto leaves = param_leaves(ps);
  leaves.push_back(x);
  return gradient_check([&] { return block(x); }, leaves, rng);
}

/// All layer gradient suites, `draws` random parameter/input draws each.
inline std::vector<LayerCheck> layer_gradient_suite(int draws) {
  return {
      run_draws("cat", draws, 101, [](auto& r) { return check_cond_layer(CondMethod::Cat, 1, r); }),
      run_draws("film", draws, 102, [](auto& r) { return check_cond_layer(CondMethod::Film, 1, r); }),
      run_draws("xattn", draws, 103, [](auto& r) { return check_cond_layer(CondMethod::XAttn, 1, r); }),
      run_draws("xattn-2heads", draws, 104, [](auto& r) { return check_cond_layer(CondMethod::XAttn, 2, r); }),
      run_draws("convlstm-cell", draws, 105, check_convlstm_cell),
      run_draws("stlstm-cell", draws, 106, check_stlstm_cell),
      run_draws("gsta-block", draws, 107, check_gsta_block),
      run_draws("unet-block", draws, 108, check_unet_block),
  };
}

}  // namespace vegcast::testing
