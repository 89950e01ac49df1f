#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "vegcast/models/batch.hpp"

namespace vegcast::eval {

/// A permutation of the N*H*W pixel columns of a batch. Column j of the
/// shuffled batch is column `source[j]` of the original.
struct PixelPermutation {
  int n = 0, h = 0, w = 0;
  std::vector<std::size_t> source;

  std::vector<std::size_t> inverse() const {
    std::vector<std::size_t> inv(source.size());
    for (std::size_t j = 0; j < source.size(); ++j) inv[source[j]] = j;
    return inv;
  }
};

namespace detail {

/// Moves pixel columns of a [N, ..., H, W] tensor: out column j = in column from[j].
template <typename S>
Tensor<S> permute_columns(const Tensor<S>& t, int n, int hw, const std::vector<std::size_t>& from) {
  require(t.rank() >= 3 && t.dim(0) == n && static_cast<std::size_t>(t.dim(-1)) * t.dim(-2) == static_cast<std::size_t>(hw),
          "spatial shuffle: tensor " + shape_string(t.shape()) + " does not match the permutation");
  const std::size_t inner = t.size() / (static_cast<std::size_t>(n) * hw);
  Tensor<S> out(t.shape());
  for (std::size_t j = 0; j < from.size(); ++j) {
    const std::size_t sb = from[j] / hw, sp = from[j] % hw;
    const std::size_t db = j / hw, dp = j % hw;
    for (std::size_t x = 0; x < inner; ++x) out[(db * inner + x) * hw + dp] = t[(sb * inner + x) * hw + sp];
  }
  return out;
}

}  // namespace detail

inline PixelPermutation make_permutation(int n, int h, int w, std::uint64_t seed) {
  PixelPermutation p{n, h, w, {}};
  p.source.resize(static_cast<std::size_t>(n) * h * w);
  std::iota(p.source.begin(), p.source.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(p.source.begin(), p.source.end(), rng);
  return p;
}

/// Applies one pixel permutation across batch and space to every input,
/// target and mask tensor; the time axis of each pixel is left intact.
template <typename S>
Batch<S> apply_permutation(const Batch<S>& b, const PixelPermutation& p) {
  require(p.n == b.n && p.h == b.h && p.w == b.w, "spatial shuffle: permutation built for a different batch");
  const int hw = b.h * b.w;
  Batch<S> o = b;
  o.context = detail::permute_columns(b.context, b.n, hw, p.source);
  o.future = detail::permute_columns(b.future, b.n, hw, p.source);
  o.weather = detail::permute_columns(b.weather, b.n, hw, p.source);
  o.target = detail::permute_columns(b.target, b.n, hw, p.source);
  o.mask = detail::permute_columns(b.mask, b.n, hw, p.source);
  return o;
}

template <typename S>
std::pair<Batch<S>, PixelPermutation> spatial_shuffle(const Batch<S>& b, std::uint64_t seed) {
  auto p = make_permutation(b.n, b.h, b.w, seed);
  return {apply_permutation(b, p), p};
}

/// Maps a tensor laid out like the shuffled batch back to original pixel order.
template <typename S>
Tensor<S> unshuffle(const Tensor<S>& t, const PixelPermutation& p) {
  return detail::permute_columns(t, p.n, p.h * p.w, p.inverse());
}

template <typename S>
Batch<S> unshuffle(const Batch<S>& b, const PixelPermutation& p) {
  PixelPermutation inv{p.n, p.h, p.w, p.inverse()};
  return apply_permutation(b, inv);
}

}  // namespace vegcast::eval
