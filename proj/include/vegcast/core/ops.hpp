#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "vegcast/core/autodiff.hpp"

// Differentiable operations on NCHW tensors. Every op validates shapes, computes
// its value eagerly and records a closure that accumulates parent gradients.

namespace vegcast {

class NoValidPixelsError : public std::runtime_error {
 public:
  NoValidPixelsError() : std::runtime_error("no valid pixels in batch") {}
};

namespace ops {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

template <typename S>
void require_same(const Var<S>& a, const Var<S>& b, const char* op) {
  require(a->value.shape() == b->value.shape(), std::string(op) + ": shape mismatch " +
                                                     shape_string(a->value.shape()) + " vs " +
                                                     shape_string(b->value.shape()));
}

template <typename S>
void require_rank4(const Var<S>& a, const char* op) {
  require(a->value.rank() == 4, std::string(op) + ": expected NCHW tensor, got " + shape_string(a->value.shape()));
}

template <typename S>
void im2col(const S* x, int channels, int height, int width, int k, int pad, S* col) {
  const int hw = height * width;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        S* dst = col + static_cast<std::size_t>((c * k + ky) * k + kx) * hw;
        for (int y = 0; y < height; ++y) {
          const int iy = y + ky - pad;
          S* row = dst + y * width;
          if (iy < 0 || iy >= height) {
            std::fill(row, row + width, S(0));
            continue;
          }
          const S* src = x + (static_cast<std::size_t>(c) * height + iy) * width;
          const int shift = kx - pad;
          const int lo = std::max(0, -shift), hi = std::min(width, width - shift);
          std::fill(row, row + lo, S(0));
          std::copy(src + lo + shift, src + hi + shift, row + lo);
          std::fill(row + hi, row + width, S(0));
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const S* col, int channels, int height, int width, int k, int pad, S* x) {
  const int hw = height * width;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const S* src = col + static_cast<std::size_t>((c * k + ky) * k + kx) * hw;
        for (int y = 0; y < height; ++y) {
          const int iy = y + ky - pad;
          if (iy < 0 || iy >= height) continue;
          S* dst = x + (static_cast<std::size_t>(c) * height + iy) * width;
          const S* row = src + y * width;
          const int shift = kx - pad;
          const int lo = std::max(0, -shift), hi = std::min(width, width - shift);
          for (int xx = lo; xx < hi; ++xx) dst[xx + shift] += row[xx];
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  detail::require_same(a, b, "add");
  Tensor<S> out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
  return make_result<S>(std::move(out), {a, b}, [](Node<S>& self) {
    for (int p = 0; p < 2; ++p) {
      auto& par = self.parent(p);
      if (!par.requires_grad) continue;
      auto& g = par.grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  detail::require_same(a, b, "sub");
  Tensor<S> out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] - b->value[i];
  return make_result<S>(std::move(out), {a, b}, [](Node<S>& self) {
    for (int p = 0; p < 2; ++p) {
      auto& par = self.parent(p);
      if (!par.requires_grad) continue;
      auto& g = par.grad_ref();
      const S sign = p == 0 ? S(1) : S(-1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  detail::require_same(a, b, "mul");
  Tensor<S> out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
  return make_result<S>(std::move(out), {a, b}, [](Node<S>& self) {
    auto& pa = self.parent(0);
    auto& pb = self.parent(1);
    if (pa.requires_grad) {
      auto& g = pa.grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
  Tensor<S> out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * factor;
  return make_result<S>(std::move(out), {a}, [factor](Node<S>& self) {
    auto& g = self.parent(0).grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

/// Elementwise `cond ? a : b` with a constant 0/1 selector.
template <typename S>
Var<S> blend(const Tensor<S>& cond, const Var<S>& a, const Var<S>& b) {
  detail::require_same(a, b, "blend");
  require(cond.shape() == a->value.shape(), "blend: selector shape mismatch");
  Tensor<S> out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = cond[i] != S(0) ? a->value[i] : b->value[i];
  return make_result<S>(std::move(out), {a, b}, [cond](Node<S>& self) {
    auto& pa = self.parent(0);
    auto& pb = self.parent(1);
    if (pa.requires_grad) {
      auto& g = pa.grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (cond[i] != S(0)) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (cond[i] == S(0)) g[i] += self.grad[i];
    }
  });
}

namespace detail {

template <typename S>
using ArrayMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <typename S>
using ConstArrayMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

/// out = sigmoid(in + shift), through the vectorized tanh identity.
template <typename S>
void sigmoid_into(const S* in, S* out, std::size_t n, S shift = S(0)) {
  ConstArrayMap<S> x(in, static_cast<Eigen::Index>(n));
  ArrayMap<S> y(out, static_cast<Eigen::Index>(n));
  y = S(0.5) * (S(0.5) * (x + shift)).tanh() + S(0.5);
}

template <typename S>
void tanh_into(const S* in, S* out, std::size_t n) {
  ConstArrayMap<S> x(in, static_cast<Eigen::Index>(n));
  ArrayMap<S> y(out, static_cast<Eigen::Index>(n));
  y = x.tanh();
}

}  // namespace detail

template <typename S>
Var<S> sigmoid(const Var<S>& a) {
  Tensor<S> out(a->value.shape());
  detail::sigmoid_into(a->value.data(), out.data(), out.size());
  return make_result<S>(std::move(out), {a}, [](Node<S>& self) {
    auto& g = self.parent(0).grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const S y = self.value[i];
      g[i] += self.grad[i] * y * (S(1) - y);
    }
  });
}

template <typename S>
Var<S> tanh(const Var<S>& a) {
  Tensor<S> out(a->value.shape());
  detail::tanh_into(a->value.data(), out.data(), out.size());
  return make_result<S>(std::move(out), {a}, [](Node<S>& self) {
    auto& g = self.parent(0).grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const S y = self.value[i];
      g[i] += self.grad[i] * (S(1) - y * y);
    }
  });
}

inline constexpr double kLeakySlope = 0.01;

template <typename S>
Var<S> leaky_relu(const Var<S>& a, S slope = S(kLeakySlope)) {
  Tensor<S> out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const S x = a->value[i];
    out[i] = x > S(0) ? x : slope * x;
  }
  return make_result<S>(std::move(out), {a}, [slope](Node<S>& self) {
    auto& par = self.parent(0);
    auto& g = par.grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (par.value[i] > S(0) ? S(1) : slope);
  });
}

// ---------------------------------------------------------------- reductions

template <typename S>
Var<S> sum(const Var<S>& a) {
  S total = 0;
  for (S v : a->value.values()) total += v;
  return make_result<S>(Tensor<S>({1}, total), {a}, [](Node<S>& self) {
    auto& g = self.parent(0).grad_ref();
    const S s = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s;
  });
}

/// sum(a * weights) for a constant weight tensor; the standard probe for gradient checks.
template <typename S>
Var<S> weighted_sum(const Var<S>& a, const Tensor<S>& weights) {
  require(weights.shape() == a->value.shape(), "weighted_sum: shape mismatch");
  S total = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) total += a->value[i] * weights[i];
  return make_result<S>(Tensor<S>({1}, total), {a}, [weights](Node<S>& self) {
    auto& g = self.parent(0).grad_ref();
    const S s = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * weights[i];
  });
}

template <typename S>
Var<S> add_scalars(const Var<S>& a, const Var<S>& b, S b_weight = S(1)) {
  require(a->value.size() == 1 && b->value.size() == 1, "add_scalars expects scalars");
  return make_result<S>(Tensor<S>({1}, a->value[0] + b_weight * b->value[0]), {a, b}, [b_weight](Node<S>& self) {
    if (self.parent(0).requires_grad) self.parent(0).grad_ref()[0] += self.grad[0];
    if (self.parent(1).requires_grad) self.parent(1).grad_ref()[0] += b_weight * self.grad[0];
  });
}

/// Masked mean squared error: sum(mask * (pred - target)^2) / sum(mask).
/// Entries with mask 0 never touch the target, so NaN targets there are fine,
/// and their gradient is exactly zero.
template <typename S>
Var<S> masked_mse(const Var<S>& pred, const Tensor<S>& target, const Tensor<S>& mask) {
  require(pred->value.shape() == target.shape() && target.shape() == mask.shape(), "masked_mse: shape mismatch");
  double count = 0;
  double total = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] == S(0)) continue;
    require(mask[i] == S(1), "masked_mse: mask must be binary");
    const double d = static_cast<double>(pred->value[i]) - static_cast<double>(target[i]);
    total += d * d;
    count += 1;
  }
  if (count == 0) throw NoValidPixelsError();
  const S inv = static_cast<S>(1.0 / count);
  return make_result<S>(Tensor<S>({1}, static_cast<S>(total / count)), {pred}, [target, mask, inv](Node<S>& self) {
    auto& par = self.parent(0);
    auto& g = par.grad_ref();
    const S s = self.grad[0] * S(2) * inv;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (mask[i] != S(0)) g[i] += s * (par.value[i] - target[i]);
    }
  });
}

/// Mean over (sample, channel) of |cos| between the spatial maps of `a` and `b`.
template <typename S>
Var<S> mean_abs_cosine(const Var<S>& a, const Var<S>& b) {
  detail::require_same(a, b, "mean_abs_cosine");
  detail::require_rank4(a, "mean_abs_cosine");
  const Shape& sh = a->value.shape();
  const int rows = sh[0] * sh[1];
  const int len = sh[2] * sh[3];
  const S eps = static_cast<S>(1e-12);
  S total = 0;
  for (int r = 0; r < rows; ++r) {
    const S* x = a->value.data() + static_cast<std::size_t>(r) * len;
    const S* y = b->value.data() + static_cast<std::size_t>(r) * len;
    S dot = 0, nx = 0, ny = 0;
    for (int i = 0; i < len; ++i) {
      dot += x[i] * y[i];
      nx += x[i] * x[i];
      ny += y[i] * y[i];
    }
    total += std::abs(dot / (std::max(std::sqrt(nx), eps) * std::max(std::sqrt(ny), eps)));
  }
  return make_result<S>(Tensor<S>({1}, total / static_cast<S>(rows)), {a, b}, [rows, len, eps](Node<S>& self) {
    auto& pa = self.parent(0);
    auto& pb = self.parent(1);
    const S s = self.grad[0] / static_cast<S>(rows);
    for (int r = 0; r < rows; ++r) {
      const std::size_t off = static_cast<std::size_t>(r) * len;
      const S* x = pa.value.data() + off;
      const S* y = pb.value.data() + off;
      S dot = 0, nx2 = 0, ny2 = 0;
      for (int i = 0; i < len; ++i) {
        dot += x[i] * y[i];
        nx2 += x[i] * x[i];
        ny2 += y[i] * y[i];
      }
      const S rx = std::sqrt(nx2), ry = std::sqrt(ny2);
      const S nx = std::max(rx, eps), ny = std::max(ry, eps);
      const S cos = dot / (nx * ny);
      const S sign = cos > 0 ? S(1) : (cos < 0 ? S(-1) : S(0));
      if (sign == S(0)) continue;
      if (pa.requires_grad) {
        S* g = pa.grad_ref().data() + off;
        const S cx = rx > eps ? cos / (nx * nx) : S(0);
        for (int i = 0; i < len; ++i) g[i] += s * sign * (y[i] / (nx * ny) - cx * x[i]);
      }
      if (pb.requires_grad) {
        S* g = pb.grad_ref().data() + off;
        const S cy = ry > eps ? cos / (ny * ny) : S(0);
        for (int i = 0; i < len; ++i) g[i] += s * sign * (x[i] / (nx * ny) - cy * y[i]);
      }
    }
  });
}

// ---------------------------------------------------------------- channel plumbing

template <typename S>
Var<S> concat_channels(const std::vector<Var<S>>& parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  for (const auto& p : parts) detail::require_rank4(p, "concat_channels");
  const Shape& s0 = parts[0]->value.shape();
  int channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p->value.shape();
    require(s[0] == s0[0] && s[2] == s0[2] && s[3] == s0[3], "concat_channels: batch/spatial mismatch");
    channels += s[1];
  }
  const int n = s0[0];
  const std::size_t hw = static_cast<std::size_t>(s0[2]) * s0[3];
  Tensor<S> out({n, channels, s0[2], s0[3]});
  std::vector<int> offsets;
  int c0 = 0;
  for (const auto& p : parts) {
    offsets.push_back(c0);
    const int c = p->value.dim(1);
    for (int b = 0; b < n; ++b) {
      const S* src = p->value.data() + static_cast<std::size_t>(b) * c * hw;
      S* dst = out.data() + (static_cast<std::size_t>(b) * channels + c0) * hw;
      std::copy(src, src + c * hw, dst);
    }
    c0 += c;
  }
  return make_result<S>(std::move(out), parts, [offsets, channels, n, hw](Node<S>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& par = self.parent(k);
      if (!par.requires_grad) continue;
      auto& g = par.grad_ref();
      const int c = par.value.dim(1);
      for (int b = 0; b < n; ++b) {
        const S* src = self.grad.data() + (static_cast<std::size_t>(b) * channels + offsets[k]) * hw;
        S* dst = g.data() + static_cast<std::size_t>(b) * c * hw;
        for (std::size_t i = 0; i < c * hw; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename S>
Var<S> slice_channels(const Var<S>& a, int begin, int count) {
  detail::require_rank4(a, "slice_channels");
  const Shape& s = a->value.shape();
  require(begin >= 0 && count > 0 && begin + count <= s[1], "slice_channels: range out of bounds");
  const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
  Tensor<S> out({s[0], count, s[2], s[3]});
  for (int b = 0; b < s[0]; ++b) {
    const S* src = a->value.data() + (static_cast<std::size_t>(b) * s[1] + begin) * hw;
    std::copy(src, src + count * hw, out.data() + static_cast<std::size_t>(b) * count * hw);
  }
  return make_result<S>(std::move(out), {a}, [begin, count, hw](Node<S>& self) {
    auto& par = self.parent(0);
    auto& g = par.grad_ref();
    const int n = par.value.dim(0), c = par.value.dim(1);
    for (int b = 0; b < n; ++b) {
      const S* src = self.grad.data() + static_cast<std::size_t>(b) * count * hw;
      S* dst = g.data() + (static_cast<std::size_t>(b) * c + begin) * hw;
      for (std::size_t i = 0; i < count * hw; ++i) dst[i] += src[i];
    }
  });
}

namespace detail {

/// Result[i] = source[index[i]]; gradient scatters back.
template <typename S>
Var<S> gather(const Var<S>& a, Shape out_shape, std::vector<std::size_t> index) {
  Tensor<S> out(std::move(out_shape));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[index[i]];
  return make_result<S>(std::move(out), {a}, [index = std::move(index)](Node<S>& self) {
    auto& g = self.parent(0).grad_ref();
    for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += self.grad[i];
  });
}

}  // namespace detail

/// [N, C, H, W] -> [N, C*f*f, H/f, W/f]; output channel c*f*f + dy*f + dx.
template <typename S>
Var<S> space_to_depth(const Var<S>& a, int f) {
  detail::require_rank4(a, "space_to_depth");
  const Shape& s = a->value.shape();
  require(f > 0 && s[2] % f == 0 && s[3] % f == 0, "space_to_depth: factor must divide spatial dims");
  const int n = s[0], c = s[1], h = s[2] / f, w = s[3] / f;
  std::vector<std::size_t> index;
  index.reserve(a->value.size());
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int dy = 0; dy < f; ++dy)
        for (int dx = 0; dx < f; ++dx)
          for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
              index.push_back(((static_cast<std::size_t>(b) * c + ch) * s[2] + y * f + dy) * s[3] + x * f + dx);
  return detail::gather(a, {n, c * f * f, h, w}, std::move(index));
}

template <typename S>
Var<S> depth_to_space(const Var<S>& a, int f) {
  detail::require_rank4(a, "depth_to_space");
  const Shape& s = a->value.shape();
  require(f > 0 && s[1] % (f * f) == 0, "depth_to_space: channels must be divisible by f*f");
  const int n = s[0], c = s[1] / (f * f), h = s[2] * f, w = s[3] * f;
  std::vector<std::size_t> index;
  index.reserve(a->value.size());
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const int src_c = ch * f * f + (y % f) * f + (x % f);
          index.push_back(((static_cast<std::size_t>(b) * s[1] + src_c) * s[2] + y / f) * s[3] + x / f);
        }
  return detail::gather(a, {n, c, h, w}, std::move(index));
}

template <typename S>
Var<S> upsample_nearest(const Var<S>& a, int f) {
  detail::require_rank4(a, "upsample_nearest");
  const Shape& s = a->value.shape();
  const int h = s[2] * f, w = s[3] * f;
  std::vector<std::size_t> index;
  index.reserve(a->value.size() * f * f);
  for (int b = 0; b < s[0]; ++b)
    for (int ch = 0; ch < s[1]; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          index.push_back(((static_cast<std::size_t>(b) * s[1] + ch) * s[2] + y / f) * s[3] + x / f);
  return detail::gather(a, {s[0], s[1], h, w}, std::move(index));
}

template <typename S>
Var<S> avg_pool(const Var<S>& a, int f) {
  detail::require_rank4(a, "avg_pool");
  const Shape& s = a->value.shape();
  require(f > 0 && s[2] % f == 0 && s[3] % f == 0, "avg_pool: factor must divide spatial dims");
  const int h = s[2] / f, w = s[3] / f;
  Tensor<S> out({s[0], s[1], h, w});
  const S inv = S(1) / static_cast<S>(f * f);
  for (int bc = 0; bc < s[0] * s[1]; ++bc)
    for (int y = 0; y < s[2]; ++y)
      for (int x = 0; x < s[3]; ++x)
        out[(static_cast<std::size_t>(bc) * h + y / f) * w + x / f] +=
            a->value[(static_cast<std::size_t>(bc) * s[2] + y) * s[3] + x] * inv;
  return make_result<S>(std::move(out), {a}, [f, h, w, inv](Node<S>& self) {
    auto& par = self.parent(0);
    auto& g = par.grad_ref();
    const Shape& s = par.value.shape();
    for (int bc = 0; bc < s[0] * s[1]; ++bc)
      for (int y = 0; y < s[2]; ++y)
        for (int x = 0; x < s[3]; ++x)
          g[(static_cast<std::size_t>(bc) * s[2] + y) * s[3] + x] +=
              self.grad[(static_cast<std::size_t>(bc) * h + y / f) * w + x / f] * inv;
  });
}

// ---------------------------------------------------------------- convolutions

/// Stride-1 "same" convolution with zero padding. x [N,C,H,W], w [O,C,k,k], bias [O] or null.
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
  detail::require_rank4(x, "conv2d");
  const Shape& xs = x->value.shape();
  const Shape& ws = weight->value.shape();
  require(ws.size() == 4 && ws[1] == xs[1] && ws[2] == ws[3] && ws[2] % 2 == 1,
          "conv2d: weight " + shape_string(ws) + " incompatible with input " + shape_string(xs));
  if (bias) require(bias->value.size() == static_cast<std::size_t>(ws[0]), "conv2d: bias size mismatch");
  const int n = xs[0], c = xs[1], h = xs[2], w = xs[3], o = ws[0], k = ws[2], pad = k / 2;
  const int hw = h * w, ckk = c * k * k;
  Tensor<S> out({n, o, h, w});
  std::vector<S> col(k == 1 ? 0 : static_cast<std::size_t>(ckk) * hw);
  Eigen::Map<const RowMat<S>> wm(weight->value.data(), o, ckk);
  for (int b = 0; b < n; ++b) {
    const S* xb = x->value.data() + static_cast<std::size_t>(b) * c * hw;
    const S* colp = xb;
    if (k != 1) {
      detail::im2col(xb, c, h, w, k, pad, col.data());
      colp = col.data();
    }
    Eigen::Map<const RowMat<S>> cm(colp, ckk, hw);
    Eigen::Map<RowMat<S>> om(out.data() + static_cast<std::size_t>(b) * o * hw, o, hw);
    om.noalias() = wm * cm;
    if (bias) {
      for (int oc = 0; oc < o; ++oc) om.row(oc).array() += bias->value[oc];
    }
  }
  std::vector<Var<S>> parents{x, weight};
  if (bias) parents.push_back(bias);
  return make_result<S>(std::move(out), std::move(parents), [=](Node<S>& self) {
    auto& px = self.parent(0);
    auto& pw = self.parent(1);
    Node<S>* pb = self.parents.size() > 2 ? &self.parent(2) : nullptr;
    std::vector<S> colb(k == 1 ? 0 : static_cast<std::size_t>(ckk) * hw);
    std::vector<S> dcol(static_cast<std::size_t>(ckk) * hw);
    Eigen::Map<const RowMat<S>> wmat(pw.value.data(), o, ckk);
    for (int b = 0; b < n; ++b) {
      Eigen::Map<const RowMat<S>> gm(self.grad.data() + static_cast<std::size_t>(b) * o * hw, o, hw);
      if (pw.requires_grad) {
        const S* xb = px.value.data() + static_cast<std::size_t>(b) * c * hw;
        const S* colp = xb;
        if (k != 1) {
          detail::im2col(xb, c, h, w, k, pad, colb.data());
          colp = colb.data();
        }
        Eigen::Map<const RowMat<S>> cm(colp, ckk, hw);
        Eigen::Map<RowMat<S>> gw(pw.grad_ref().data(), o, ckk);
        gw.noalias() += gm * cm.transpose();
      }
      if (pb && pb->requires_grad) {
        auto& gb = pb->grad_ref();
        for (int oc = 0; oc < o; ++oc) gb[oc] += std::accumulate(gm.data() + oc * hw, gm.data() + (oc + 1) * hw, S(0));
      }
      if (px.requires_grad) {
        S* gx = px.grad_ref().data() + static_cast<std::size_t>(b) * c * hw;
        if (k == 1) {
          Eigen::Map<RowMat<S>> gxm(gx, c, hw);
          gxm.noalias() += wmat.transpose() * gm;
        } else {
          Eigen::Map<RowMat<S>> dm(dcol.data(), ckk, hw);
          dm.noalias() = wmat.transpose() * gm;
          detail::col2im_add(dcol.data(), c, h, w, k, pad, gx);
        }
      }
    }
  });
}

/// Depthwise stride-1 "same" convolution. w [C,1,k,k], bias [C] or null.
template <typename S>
Var<S> depthwise_conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
  detail::require_rank4(x, "depthwise_conv2d");
  const Shape& xs = x->value.shape();
  const Shape& ws = weight->value.shape();
  require(ws.size() == 4 && ws[0] == xs[1] && ws[1] == 1 && ws[2] == ws[3] && ws[2] % 2 == 1,
          "depthwise_conv2d: weight " + shape_string(ws) + " incompatible with input " + shape_string(xs));
  const int n = xs[0], c = xs[1], h = xs[2], w = xs[3], k = ws[2], pad = k / 2;
  Tensor<S> out({n, c, h, w});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const S* src = x->value.data() + (static_cast<std::size_t>(b) * c + ch) * h * w;
      S* dst = out.data() + (static_cast<std::size_t>(b) * c + ch) * h * w;
      const S* kern = weight->value.data() + static_cast<std::size_t>(ch) * k * k;
      const S bv = bias ? bias->value[ch] : S(0);
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          S acc = bv;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = y + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = xx + kx - pad;
              if (ix < 0 || ix >= w) continue;
              acc += kern[ky * k + kx] * src[iy * w + ix];
            }
          }
          dst[y * w + xx] = acc;
        }
    }
  std::vector<Var<S>> parents{x, weight};
  if (bias) parents.push_back(bias);
  return make_result<S>(std::move(out), std::move(parents), [=](Node<S>& self) {
    auto& px = self.parent(0);
    auto& pw = self.parent(1);
    Node<S>* pb = self.parents.size() > 2 ? &self.parent(2) : nullptr;
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * h * w;
        const S* src = px.value.data() + off;
        const S* gout = self.grad.data() + off;
        const S* kern = pw.value.data() + static_cast<std::size_t>(ch) * k * k;
        S* gk = pw.requires_grad ? pw.grad_ref().data() + static_cast<std::size_t>(ch) * k * k : nullptr;
        S* gx = px.requires_grad ? px.grad_ref().data() + off : nullptr;
        if (pb && pb->requires_grad) {
          S acc = 0;
          for (int i = 0; i < h * w; ++i) acc += gout[i];
          pb->grad_ref()[ch] += acc;
        }
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) {
            const S go = gout[y * w + xx];
            for (int ky = 0; ky < k; ++ky) {
              const int iy = y + ky - pad;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = xx + kx - pad;
                if (ix < 0 || ix >= w) continue;
                if (gk) gk[ky * k + kx] += go * src[iy * w + ix];
                if (gx) gx[iy * w + ix] += go * kern[ky * k + kx];
              }
            }
          }
      }
  });
}

// ---------------------------------------------------------------- normalization

/// GroupNorm over (C/G, H, W) per sample and group with per-channel affine.
template <typename S>
Var<S> group_norm(const Var<S>& x, int groups, const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-5)) {
  detail::require_rank4(x, "group_norm");
  const Shape& s = x->value.shape();
  const int n = s[0], c = s[1];
  require(groups > 0 && c % groups == 0, "group_norm: groups must divide channels");
  require(gamma->value.size() == static_cast<std::size_t>(c) && beta->value.size() == static_cast<std::size_t>(c),
          "group_norm: affine size mismatch");
  const int cg = c / groups;
  const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
  const std::size_t m = cg * hw;
  std::vector<S> mean(static_cast<std::size_t>(n) * groups), rstd(mean.size());
  Tensor<S> out(s);
  for (int b = 0; b < n; ++b)
    for (int g = 0; g < groups; ++g) {
      const S* src = x->value.data() + (static_cast<std::size_t>(b) * c + g * cg) * hw;
      S mu = 0;
      for (std::size_t i = 0; i < m; ++i) mu += src[i];
      mu /= static_cast<S>(m);
      S var = 0;
      for (std::size_t i = 0; i < m; ++i) var += (src[i] - mu) * (src[i] - mu);
      var /= static_cast<S>(m);
      const S r = S(1) / std::sqrt(var + eps);
      mean[b * groups + g] = mu;
      rstd[b * groups + g] = r;
      S* dst = out.data() + (static_cast<std::size_t>(b) * c + g * cg) * hw;
      for (int cc = 0; cc < cg; ++cc) {
        const S ga = gamma->value[g * cg + cc], be = beta->value[g * cg + cc];
        for (std::size_t i = 0; i < hw; ++i) dst[cc * hw + i] = (src[cc * hw + i] - mu) * r * ga + be;
      }
    }
  return make_result<S>(std::move(out), {x, gamma, beta}, [=](Node<S>& self) {
    auto& px = self.parent(0);
    auto& pg = self.parent(1);
    auto& pbeta = self.parent(2);
    for (int b = 0; b < n; ++b)
      for (int g = 0; g < groups; ++g) {
        const std::size_t off = (static_cast<std::size_t>(b) * c + g * cg) * hw;
        const S* src = px.value.data() + off;
        const S* gy = self.grad.data() + off;
        const S mu = mean[b * groups + g], r = rstd[b * groups + g];
        S sum_d = 0, sum_dx = 0;
        for (int cc = 0; cc < cg; ++cc) {
          const S ga = pg.value[g * cg + cc];
          S dgam = 0, dbet = 0;
          for (std::size_t i = 0; i < hw; ++i) {
            const S xhat = (src[cc * hw + i] - mu) * r;
            const S d = gy[cc * hw + i] * ga;
            sum_d += d;
            sum_dx += d * xhat;
            dgam += gy[cc * hw + i] * xhat;
            dbet += gy[cc * hw + i];
          }
          if (pg.requires_grad) pg.grad_ref()[g * cg + cc] += dgam;
          if (pbeta.requires_grad) pbeta.grad_ref()[g * cg + cc] += dbet;
        }
        if (!px.requires_grad) continue;
        S* gx = px.grad_ref().data() + off;
        const S inv_m = S(1) / static_cast<S>(m);
        for (int cc = 0; cc < cg; ++cc) {
          const S ga = pg.value[g * cg + cc];
          for (std::size_t i = 0; i < hw; ++i) {
            const S xhat = (src[cc * hw + i] - mu) * r;
            const S d = gy[cc * hw + i] * ga;
            gx[cc * hw + i] += r * (d - inv_m * sum_d - xhat * inv_m * sum_dx);
          }
        }
      }
  });
}

/// Standardizes the channel vector of every pixel (no affine).
template <typename S>
Var<S> channel_layer_norm(const Var<S>& x, S eps = S(1e-5)) {
  detail::require_rank4(x, "channel_layer_norm");
  const Shape& s = x->value.shape();
  const int n = s[0], c = s[1];
  const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
  Tensor<S> out(s);
  std::vector<S> rstd(static_cast<std::size_t>(n) * hw);
  for (int b = 0; b < n; ++b) {
    const S* src = x->value.data() + static_cast<std::size_t>(b) * c * hw;
    S* dst = out.data() + static_cast<std::size_t>(b) * c * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      S mu = 0;
      for (int ch = 0; ch < c; ++ch) mu += src[ch * hw + p];
      mu /= static_cast<S>(c);
      S var = 0;
      for (int ch = 0; ch < c; ++ch) var += (src[ch * hw + p] - mu) * (src[ch * hw + p] - mu);
      var /= static_cast<S>(c);
      const S r = S(1) / std::sqrt(var + eps);
      rstd[b * hw + p] = r;
      for (int ch = 0; ch < c; ++ch) dst[ch * hw + p] = (src[ch * hw + p] - mu) * r;
    }
  }
  return make_result<S>(std::move(out), {x}, [n, c, hw, rstd](Node<S>& self) {
    auto& g = self.parent(0).grad_ref();
    const S inv_c = S(1) / static_cast<S>(c);
    for (int b = 0; b < n; ++b) {
      const S* y = self.value.data() + static_cast<std::size_t>(b) * c * hw;
      const S* gy = self.grad.data() + static_cast<std::size_t>(b) * c * hw;
      S* gx = g.data() + static_cast<std::size_t>(b) * c * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        S sd = 0, sdy = 0;
        for (int ch = 0; ch < c; ++ch) {
          sd += gy[ch * hw + p];
          sdy += gy[ch * hw + p] * y[ch * hw + p];
        }
        const S r = rstd[b * hw + p];
        for (int ch = 0; ch < c; ++ch)
          gx[ch * hw + p] += r * (gy[ch * hw + p] - inv_c * sd - y[ch * hw + p] * inv_c * sdy);
      }
    }
  });
}

// ---------------------------------------------------------------- recurrent gates

/// Fused LSTM gate algebra. `pre` holds the [i, f, g, o] pre-activations
/// ([N, 4h, H, W]); `c_prev` is [N, h, H, W]. Returns [N, 2h, H, W] with the
/// new hidden state in the first h channels and the new cell in the last h.
template <typename S>
Var<S> lstm_gates(const Var<S>& pre, const Var<S>& c_prev, S forget_bias = S(0)) {
  detail::require_rank4(pre, "lstm_gates");
  detail::require_rank4(c_prev, "lstm_gates");
  const Shape& ps = pre->value.shape();
  const Shape& cs = c_prev->value.shape();
  require(ps[1] == 4 * cs[1] && ps[0] == cs[0] && ps[2] == cs[2] && ps[3] == cs[3], "lstm_gates: shape mismatch");
  const int n = cs[0], hid = cs[1];
  const std::size_t hw = static_cast<std::size_t>(cs[2]) * cs[3];
  const std::size_t plane = hid * hw;
  // activated gates [i, f, g, o] and tanh(c), kept for the backward pass
  auto acts = std::make_shared<std::vector<S>>(static_cast<std::size_t>(n) * 5 * plane);
  Tensor<S> out({n, 2 * hid, cs[2], cs[3]});
  for (int b = 0; b < n; ++b) {
    const S* pp = pre->value.data() + static_cast<std::size_t>(b) * 4 * plane;
    const S* cp = c_prev->value.data() + static_cast<std::size_t>(b) * plane;
    S* act = acts->data() + static_cast<std::size_t>(b) * 5 * plane;
    S* ho = out.data() + static_cast<std::size_t>(b) * 2 * plane;
    S* co = ho + plane;
    detail::sigmoid_into(pp, act, plane);
    detail::sigmoid_into(pp + plane, act + plane, plane, forget_bias);
    detail::tanh_into(pp + 2 * plane, act + 2 * plane, plane);
    detail::sigmoid_into(pp + 3 * plane, act + 3 * plane, plane);
    for (std::size_t i = 0; i < plane; ++i) co[i] = act[plane + i] * cp[i] + act[i] * act[2 * plane + i];
    detail::tanh_into(co, act + 4 * plane, plane);
    for (std::size_t i = 0; i < plane; ++i) ho[i] = act[3 * plane + i] * act[4 * plane + i];
  }
  return make_result<S>(std::move(out), {pre, c_prev}, [=](Node<S>& self) {
    auto& pp_node = self.parent(0);
    auto& pc_node = self.parent(1);
    for (int b = 0; b < n; ++b) {
      const S* act = acts->data() + static_cast<std::size_t>(b) * 5 * plane;
      const S* cp = pc_node.value.data() + static_cast<std::size_t>(b) * plane;
      const S* gh = self.grad.data() + static_cast<std::size_t>(b) * 2 * plane;
      const S* gc = gh + plane;
      S* gpre = pp_node.requires_grad ? pp_node.grad_ref().data() + static_cast<std::size_t>(b) * 4 * plane : nullptr;
      S* gcp = pc_node.requires_grad ? pc_node.grad_ref().data() + static_cast<std::size_t>(b) * plane : nullptr;
      for (std::size_t i = 0; i < plane; ++i) {
        const S ig = act[i], fg = act[plane + i], gg = act[2 * plane + i], og = act[3 * plane + i],
                tc = act[4 * plane + i];
        const S dc = gc[i] + gh[i] * og * (S(1) - tc * tc);
        if (gpre) {
          gpre[i] += dc * gg * ig * (S(1) - ig);
          gpre[plane + i] += dc * cp[i] * fg * (S(1) - fg);
          gpre[2 * plane + i] += dc * ig * (S(1) - gg * gg);
          gpre[3 * plane + i] += gh[i] * tc * og * (S(1) - og);
        }
        if (gcp) gcp[i] += dc * fg;
      }
    }
  });
}

// ---------------------------------------------------------------- pixelwise attention

/// Projects each of `tokens` feature groups of `c` ([N, tokens*nf, H, W]) with a
/// shared weight [d, nf] plus a per-token bias [tokens, d]; returns [N, tokens*d, H, W].
template <typename S>
Var<S> token_projection(const Var<S>& c, const Var<S>& weight, const Var<S>& token_bias, int tokens) {
  detail::require_rank4(c, "token_projection");
  const Shape& cs = c->value.shape();
  const Shape& ws = weight->value.shape();
  require(ws.size() == 2 && tokens > 0 && cs[1] == tokens * ws[1], "token_projection: width mismatch");
  require(token_bias->value.size() == static_cast<std::size_t>(tokens) * ws[0], "token_projection: bias mismatch");
  const int n = cs[0], d = ws[0], nf = ws[1];
  const int hw = cs[2] * cs[3];
  Tensor<S> out({n, tokens * d, cs[2], cs[3]});
  Eigen::Map<const RowMat<S>> wm(weight->value.data(), d, nf);
  for (int b = 0; b < n; ++b)
    for (int t = 0; t < tokens; ++t) {
      Eigen::Map<const RowMat<S>> cm(c->value.data() + (static_cast<std::size_t>(b) * tokens + t) * nf * hw, nf, hw);
      Eigen::Map<RowMat<S>> om(out.data() + (static_cast<std::size_t>(b) * tokens + t) * d * hw, d, hw);
      om.noalias() = wm * cm;
      for (int j = 0; j < d; ++j) om.row(j).array() += token_bias->value[t * d + j];
    }
  return make_result<S>(std::move(out), {c, weight, token_bias}, [=](Node<S>& self) {
    auto& pc = self.parent(0);
    auto& pw = self.parent(1);
    auto& pb = self.parent(2);
    Eigen::Map<const RowMat<S>> wmat(pw.value.data(), d, nf);
    for (int b = 0; b < n; ++b)
      for (int t = 0; t < tokens; ++t) {
        const std::size_t coff = (static_cast<std::size_t>(b) * tokens + t) * nf * hw;
        Eigen::Map<const RowMat<S>> gm(self.grad.data() + (static_cast<std::size_t>(b) * tokens + t) * d * hw, d, hw);
        if (pw.requires_grad) {
          Eigen::Map<const RowMat<S>> cm(pc.value.data() + coff, nf, hw);
          Eigen::Map<RowMat<S>> gw(pw.grad_ref().data(), d, nf);
          gw.noalias() += gm * cm.transpose();
        }
        if (pb.requires_grad) {
          auto& gb = pb.grad_ref();
          for (int j = 0; j < d; ++j) gb[t * d + j] += std::accumulate(gm.data() + j * hw, gm.data() + (j + 1) * hw, S(0));
        }
        if (pc.requires_grad) {
          Eigen::Map<RowMat<S>> gc(pc.grad_ref().data() + coff, nf, hw);
          gc.noalias() += wmat.transpose() * gm;
        }
      }
  });
}

/// Multi-head attention of one query token per pixel over `tokens` key/value
/// tokens per pixel. q [N, d, H, W]; k, v [N, tokens*d, H, W]. Returns [N, d, H, W].
template <typename S>
Var<S> pixel_attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, int tokens, int heads) {
  detail::require_rank4(q, "pixel_attention");
  detail::require_same(k, v, "pixel_attention");
  const Shape& qs = q->value.shape();
  const int n = qs[0], d = qs[1];
  require(heads > 0 && d % heads == 0, "pixel_attention: heads must divide the feature width");
  require(k->value.dim(1) == tokens * d && k->value.dim(0) == n && k->value.dim(2) == qs[2] && k->value.dim(3) == qs[3],
          "pixel_attention: key/value shape mismatch");
  const int dh = d / heads;
  const std::size_t hw = static_cast<std::size_t>(qs[2]) * qs[3];
  const S scale_f = S(1) / std::sqrt(static_cast<S>(dh));

  // attention weights [n, heads, tokens, hw], needed again in backward
  std::vector<S> attn(static_cast<std::size_t>(n) * heads * tokens * hw);
  Tensor<S> out(qs);
  std::vector<S> scores(tokens);
  for (int b = 0; b < n; ++b) {
    const S* qb = q->value.data() + static_cast<std::size_t>(b) * d * hw;
    const S* kb = k->value.data() + static_cast<std::size_t>(b) * tokens * d * hw;
    const S* vb = v->value.data() + static_cast<std::size_t>(b) * tokens * d * hw;
    S* ob = out.data() + static_cast<std::size_t>(b) * d * hw;
    for (int hd = 0; hd < heads; ++hd)
      for (std::size_t p = 0; p < hw; ++p) {
        S mx = -std::numeric_limits<S>::infinity();
        for (int t = 0; t < tokens; ++t) {
          S sc = 0;
          for (int j = hd * dh; j < (hd + 1) * dh; ++j) sc += qb[j * hw + p] * kb[(t * d + j) * hw + p];
          scores[t] = sc * scale_f;
          mx = std::max(mx, scores[t]);
        }
        S z = 0;
        for (int t = 0; t < tokens; ++t) {
          scores[t] = std::exp(scores[t] - mx);
          z += scores[t];
        }
        S* a = attn.data() + ((static_cast<std::size_t>(b) * heads + hd) * tokens) * hw;
        for (int t = 0; t < tokens; ++t) a[t * hw + p] = scores[t] / z;
        for (int j = hd * dh; j < (hd + 1) * dh; ++j) {
          S acc = 0;
          for (int t = 0; t < tokens; ++t) acc += a[t * hw + p] * vb[(t * d + j) * hw + p];
          ob[j * hw + p] = acc;
        }
      }
  }
  return make_result<S>(std::move(out), {q, k, v}, [=, attn = std::move(attn)](Node<S>& self) {
    auto& pq = self.parent(0);
    auto& pk = self.parent(1);
    auto& pv = self.parent(2);
    std::vector<S> da(tokens);
    for (int b = 0; b < n; ++b) {
      const S* qb = pq.value.data() + static_cast<std::size_t>(b) * d * hw;
      const S* kb = pk.value.data() + static_cast<std::size_t>(b) * tokens * d * hw;
      const S* vb = pv.value.data() + static_cast<std::size_t>(b) * tokens * d * hw;
      const S* gout = self.grad.data() + static_cast<std::size_t>(b) * d * hw;
      S* gq = pq.requires_grad ? pq.grad_ref().data() + static_cast<std::size_t>(b) * d * hw : nullptr;
      S* gk = pk.requires_grad ? pk.grad_ref().data() + static_cast<std::size_t>(b) * tokens * d * hw : nullptr;
      S* gv = pv.requires_grad ? pv.grad_ref().data() + static_cast<std::size_t>(b) * tokens * d * hw : nullptr;
      for (int hd = 0; hd < heads; ++hd)
        for (std::size_t p = 0; p < hw; ++p) {
          const S* a = attn.data() + ((static_cast<std::size_t>(b) * heads + hd) * tokens) * hw;
          S dot = 0;
          for (int t = 0; t < tokens; ++t) {
            S acc = 0;
            for (int j = hd * dh; j < (hd + 1) * dh; ++j) {
              acc += gout[j * hw + p] * vb[(t * d + j) * hw + p];
              if (gv) gv[(t * d + j) * hw + p] += a[t * hw + p] * gout[j * hw + p];
            }
            da[t] = acc;
            dot += a[t * hw + p] * acc;
          }
          for (int t = 0; t < tokens; ++t) {
            const S ds = a[t * hw + p] * (da[t] - dot) * scale_f;
            for (int j = hd * dh; j < (hd + 1) * dh; ++j) {
              if (gq) gq[j * hw + p] += ds * kb[(t * d + j) * hw + p];
              if (gk) gk[(t * d + j) * hw + p] += ds * qb[j * hw + p];
            }
          }
        }
    }
  });
}

}  // namespace ops
}  // namespace vegcast
