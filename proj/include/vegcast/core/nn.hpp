#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "vegcast/core/ops.hpp"

namespace vegcast {

/// Owns the trainable leaves of a model, keyed by hierarchical path.
template <typename S>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  Var<S> add(const std::string& name, Tensor<S> value) {
    for (const auto& e : entries_) require(e.first != name, "duplicate parameter path '" + name + "'");
    auto v = leaf(std::move(value), true);
    entries_.emplace_back(name, v);
    return v;
  }

  /// Uniform(-bound, bound) initialization.
  Var<S> uniform(const std::string& name, Shape shape, double bound) {
    Tensor<S> t(std::move(shape));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.values()) v = static_cast<S>(dist(rng_));
    return add(name, std::move(t));
  }

  Var<S> filled(const std::string& name, Shape shape, S value) { return add(name, Tensor<S>(std::move(shape), value)); }

  const std::vector<std::pair<std::string, Var<S>>>& entries() const { return entries_; }

  Var<S> find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.first == name) return e.second;
    return nullptr;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.second->grad = Tensor<S>();
  }

  std::vector<Tensor<S>> snapshot() const {
    std::vector<Tensor<S>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.second->value);
    return out;
  }

  void restore(const std::vector<Tensor<S>>& values) {
    require(values.size() == entries_.size(), "parameter snapshot size mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
      require(values[i].shape() == entries_[i].second->value.shape(), "parameter snapshot shape mismatch");
      entries_[i].second->value = values[i];
    }
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
  std::vector<std::pair<std::string, Var<S>>> entries_;
};

enum class Init { FanIn, Zero };

/// Stride-1 same-padded convolution; with kernel 1 it is a pixelwise linear layer.
template <typename S>
struct Conv2d {
  Var<S> weight;
  Var<S> bias;
  int in = 0, out = 0, kernel = 1;

  Conv2d() = default;
  Conv2d(ParamStore<S>& ps, const std::string& name, int in_channels, int out_channels, int k, bool with_bias = true,
         Init init = Init::FanIn)
      : in(in_channels), out(out_channels), kernel(k) {
    require(in_channels > 0 && out_channels > 0, name + ": channel counts must be positive");
    require(k > 0 && k % 2 == 1, name + ": kernel size must be odd");
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels * k * k));
    if (init == Init::Zero) {
      weight = ps.filled(name + ".weight", {out_channels, in_channels, k, k}, S(0));
      if (with_bias) bias = ps.filled(name + ".bias", {out_channels}, S(0));
    } else {
      weight = ps.uniform(name + ".weight", {out_channels, in_channels, k, k}, bound);
      if (with_bias) bias = ps.uniform(name + ".bias", {out_channels}, bound);
    }
  }

  Var<S> operator()(const Var<S>& x) const { return ops::conv2d(x, weight, bias); }
};

template <typename S>
struct DepthwiseConv2d {
  Var<S> weight;
  Var<S> bias;

  DepthwiseConv2d() = default;
  DepthwiseConv2d(ParamStore<S>& ps, const std::string& name, int channels, int k) {
    require(channels > 0 && k > 0 && k % 2 == 1, name + ": invalid depthwise configuration");
    const double bound = 1.0 / std::sqrt(static_cast<double>(k * k));
    weight = ps.uniform(name + ".weight", {channels, 1, k, k}, bound);
    bias = ps.uniform(name + ".bias", {channels}, bound);
  }

  Var<S> operator()(const Var<S>& x) const { return ops::depthwise_conv2d(x, weight, bias); }
};

template <typename S>
struct GroupNorm {
  Var<S> gamma;
  Var<S> beta;
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(ParamStore<S>& ps, const std::string& name, int channels, int num_groups) : groups(num_groups) {
    require(num_groups > 0 && channels % num_groups == 0,
            name + ": " + std::to_string(num_groups) + " groups do not divide " + std::to_string(channels) + " channels");
    gamma = ps.filled(name + ".gamma", {channels}, S(1));
    beta = ps.filled(name + ".beta", {channels}, S(0));
  }

  Var<S> operator()(const Var<S>& x) const { return ops::group_norm(x, groups, gamma, beta); }
};

/// conv -> GroupNorm -> LeakyReLU
template <typename S>
struct ConvNormAct {
  Conv2d<S> conv;
  GroupNorm<S> norm;

  ConvNormAct() = default;
  ConvNormAct(ParamStore<S>& ps, const std::string& name, int in, int out, int k, int groups)
      : conv(ps, name + ".conv", in, out, k), norm(ps, name + ".norm", out, groups) {}

  Var<S> operator()(const Var<S>& x) const { return ops::leaky_relu(norm(conv(x))); }
};

/// Two-layer pixelwise MLP. The final layer may start at zero.
template <typename S>
struct PixelMlp {
  Conv2d<S> hidden;
  Conv2d<S> output;

  PixelMlp() = default;
  PixelMlp(ParamStore<S>& ps, const std::string& name, int in, int width, int out, bool zero_final)
      : hidden(ps, name + ".0", in, width, 1),
        output(ps, name + ".1", width, out, 1, true, zero_final ? Init::Zero : Init::FanIn) {}

  Var<S> operator()(const Var<S>& x) const { return output(ops::leaky_relu(hidden(x))); }
};

}  // namespace vegcast
