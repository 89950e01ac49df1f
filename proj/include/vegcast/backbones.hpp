#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vegcast/conditioning.hpp"

namespace vegcast {

struct EncoderDecoderConfig {
  int hidden = 64;
  int kernel = 3;
  int downsample = 4;
  int groups = 16;
  bool skips = true;

  int stages() const {
    int n = 0;
    for (int f = downsample; f > 1; f /= 2) ++n;
    return n;
  }

  void validate() const {
    require(hidden > 0, "encoder/decoder: hidden width must be positive");
    require(kernel > 0 && kernel % 2 == 1, "encoder/decoder: kernel size must be odd");
    require(downsample >= 1 && (downsample & (downsample - 1)) == 0, "encoder/decoder: downsampling must be a power of two");
    require(groups > 0 && hidden % groups == 0, "encoder/decoder: norm groups must divide the hidden width");
  }
};

inline void to_json(nlohmann::json& j, const EncoderDecoderConfig& c) {
  j = {{"hidden", c.hidden}, {"kernel", c.kernel}, {"downsample", c.downsample}, {"groups", c.groups}, {"skips", c.skips}};
}

inline void from_json(const nlohmann::json& j, EncoderDecoderConfig& c) {
  c = EncoderDecoderConfig{};
  c.hidden = j.value("hidden", c.hidden);
  c.kernel = j.value("kernel", c.kernel);
  c.downsample = j.value("downsample", c.downsample);
  c.groups = j.value("groups", c.groups);
  c.skips = j.value("skips", c.skips);
}

/// Weather maps pooled to each resolution a backbone works at, computed on demand.
template <typename S>
class CondPyramid {
 public:
  CondPyramid() = default;
  explicit CondPyramid(Var<S> full) : full_(std::move(full)) {}

  bool empty() const { return full_ == nullptr; }

  Var<S> at(int factor) const {
    if (!full_ || factor == 1) return full_;
    auto it = cache_.find(factor);
    if (it != cache_.end()) return it->second;
    auto pooled = ops::avg_pool(full_, factor);
    cache_.emplace(factor, pooled);
    return pooled;
  }

 private:
  Var<S> full_;
  mutable std::map<int, Var<S>> cache_;
};

/// PatchMerge encoder: conv block at full resolution, then per halving a
/// space-to-depth merge, a 1x1 projection and a conv block. With `fusion`
/// active at every-block stage, weather is fused after each block.
template <typename S>
class PatchMergeEncoder {
 public:
  struct Output {
    Var<S> latent;
    std::vector<Var<S>> skips;  // finest first
  };

  PatchMergeEncoder() = default;
  PatchMergeEncoder(ParamStore<S>& ps, const std::string& name, int in_channels, const EncoderDecoderConfig& cfg,
                    Fusion<S>* fusion = nullptr)
      : cfg_(cfg), fusion_(fusion) {
    cfg.validate();
    const int d = cfg.hidden;
    blocks_.emplace_back(ps, name + ".in", in_channels, d, cfg.kernel, cfg.groups);
    if (fusion_) slots_.push_back(fusion_->declare(ps, name + ".cond0", Stage::Block, d));
    for (int s = 0; s < cfg.stages(); ++s) {
      const std::string p = name + ".down" + std::to_string(s);
      merges_.emplace_back(ps, p + ".merge", 4 * d, d, 1);
      blocks_.emplace_back(ps, p + ".block", d, d, cfg.kernel, cfg.groups);
      if (fusion_) slots_.push_back(fusion_->declare(ps, name + ".cond" + std::to_string(s + 1), Stage::Block, d));
    }
  }

  Output operator()(const Var<S>& x, const CondPyramid<S>* cond = nullptr) const {
    const int f = cfg_.downsample;
    require(x->value.rank() == 4 && x->value.dim(2) % f == 0 && x->value.dim(3) % f == 0,
            "encode: spatial dims " + shape_string(x->value.shape()) + " not divisible by " + std::to_string(f));
    Output out;
    auto h = blocks_[0](x);
    int scale = 1;
    h = fuse_block(0, h, cond, scale);
    for (std::size_t s = 0; s < merges_.size(); ++s) {
      out.skips.push_back(h);
      h = merges_[s](ops::space_to_depth(h, 2));
      scale *= 2;
      h = blocks_[s + 1](h);
      h = fuse_block(s + 1, h, cond, scale);
    }
    out.latent = h;
    return out;
  }

  const EncoderDecoderConfig& config() const { return cfg_; }

 private:
  Var<S> fuse_block(std::size_t i, const Var<S>& h, const CondPyramid<S>* cond, int scale) const {
    if (!fusion_ || !cond || cond->empty() || !fusion_->active(slots_[i])) return h;
    return (*fusion_)(slots_[i], h, cond->at(scale));
  }

  EncoderDecoderConfig cfg_;
  Fusion<S>* fusion_ = nullptr;
  std::vector<ConvNormAct<S>> blocks_;
  std::vector<Conv2d<S>> merges_;
  std::vector<int> slots_;
};

/// Mirror of PatchMergeEncoder: conv block, 1x1 expansion and depth-to-space per
/// doubling, optional skip merge, linear head.
template <typename S>
class PatchMergeDecoder {
 public:
  PatchMergeDecoder() = default;
  PatchMergeDecoder(ParamStore<S>& ps, const std::string& name, int out_channels, const EncoderDecoderConfig& cfg,
                    Fusion<S>* fusion = nullptr)
      : cfg_(cfg), fusion_(fusion) {
    cfg.validate();
    const int d = cfg.hidden;
    for (int s = 0; s < cfg.stages(); ++s) {
      const std::string p = name + ".up" + std::to_string(s);
      blocks_.emplace_back(ps, p + ".block", d, d, cfg.kernel, cfg.groups);
      if (fusion_) slots_.push_back(fusion_->declare(ps, name + ".cond" + std::to_string(s), Stage::Block, d));
      expands_.emplace_back(ps, p + ".expand", d, 4 * d, 1);
      if (cfg.skips) skip_merges_.emplace_back(ps, p + ".skip", 2 * d, d, 1);
    }
    blocks_.emplace_back(ps, name + ".out_block", d, d, cfg.kernel, cfg.groups);
    if (fusion_) slots_.push_back(fusion_->declare(ps, name + ".cond" + std::to_string(cfg.stages()), Stage::Block, d));
    head_ = Conv2d<S>(ps, name + ".head", d, out_channels, 1);
  }

  Var<S> operator()(const Var<S>& latent, const std::vector<Var<S>>& skips, const CondPyramid<S>* cond = nullptr) const {
    require(latent->value.dim(1) == cfg_.hidden, "decode: latent width mismatch");
    if (cfg_.skips) require(skips.size() == expands_.size(), "decode: expected one skip tensor per stage");
    auto h = latent;
    int scale = cfg_.downsample;
    for (std::size_t s = 0; s < expands_.size(); ++s) {
      h = blocks_[s](h);
      h = fuse_block(s, h, cond, scale);
      h = ops::depth_to_space(expands_[s](h), 2);
      scale /= 2;
      if (cfg_.skips) h = skip_merges_[s](ops::concat_channels<S>({h, skips[skips.size() - 1 - s]}));
    }
    h = blocks_.back()(h);
    h = fuse_block(blocks_.size() - 1, h, cond, 1);
    return head_(h);
  }

 private:
  Var<S> fuse_block(std::size_t i, const Var<S>& h, const CondPyramid<S>* cond, int scale) const {
    if (!fusion_ || !cond || cond->empty() || !fusion_->active(slots_[i])) return h;
    return (*fusion_)(slots_[i], h, cond->at(scale));
  }

  EncoderDecoderConfig cfg_;
  Fusion<S>* fusion_ = nullptr;
  std::vector<ConvNormAct<S>> blocks_;
  std::vector<Conv2d<S>> expands_;
  std::vector<Conv2d<S>> skip_merges_;
  std::vector<int> slots_;
  Conv2d<S> head_;
};

template <typename S>
struct LstmState {
  Var<S> h;
  Var<S> c;
};

template <typename S>
LstmState<S> zero_state(int n, int hidden, int height, int width) {
  return {constant(Tensor<S>({n, hidden, height, width})), constant(Tensor<S>({n, hidden, height, width}))};
}

inline constexpr double kForgetBias = 1.0;

/// Convolutional LSTM cell: gates from conv([x; h]).
template <typename S>
class ConvLstmCell {
 public:
  ConvLstmCell() = default;
  ConvLstmCell(ParamStore<S>& ps, const std::string& name, int in_channels, int hidden, int kernel)
      : gates_(ps, name + ".gates", in_channels + hidden, 4 * hidden, kernel), hidden_(hidden) {}

  int hidden() const { return hidden_; }

  LstmState<S> operator()(const Var<S>& x, const LstmState<S>& state) const {
    auto pre = gates_(ops::concat_channels<S>({x, state.h}));
    auto hc = ops::lstm_gates(pre, state.c, S(kForgetBias));
    return {ops::slice_channels(hc, 0, hidden_), ops::slice_channels(hc, hidden_, hidden_)};
  }

  const Conv2d<S>& gates() const { return gates_; }

 private:
  Conv2d<S> gates_;
  int hidden_ = 0;
};

template <typename S>
struct StLstmOutput {
  LstmState<S> state;
  Var<S> m;
  Var<S> penalty;  // mean |cos(delta c, delta m)|
};

/// Spatiotemporal LSTM cell with temporal memory c and zigzag memory m.
template <typename S>
class StLstmCell {
 public:
  StLstmCell() = default;
  StLstmCell(ParamStore<S>& ps, const std::string& name, int in_channels, int hidden, int kernel)
      : conv_x_(ps, name + ".conv_x", in_channels, 7 * hidden, kernel),
        conv_h_(ps, name + ".conv_h", hidden, 4 * hidden, kernel, false),
        conv_m_(ps, name + ".conv_m", hidden, 3 * hidden, kernel, false),
        conv_o_(ps, name + ".conv_o", 2 * hidden, hidden, kernel, false),
        conv_last_(ps, name + ".conv_last", 2 * hidden, hidden, 1, false),
        hidden_(hidden) {}

  int hidden() const { return hidden_; }

  StLstmOutput<S> operator()(const Var<S>& x, const LstmState<S>& state, const Var<S>& m) const {
    const int d = hidden_;
    auto xs = conv_x_(x);
    auto hs = conv_h_(state.h);
    auto ms = conv_m_(m);
    auto part = [](const Var<S>& v, int i, int d_) { return ops::slice_channels(v, i * d_, d_); };
    const S fb = S(kForgetBias);
    auto bias_add = [](const Var<S>& v, S b) { return ops::add(v, constant(Tensor<S>(v->value.shape(), b))); };

    auto i = ops::sigmoid(ops::add(part(xs, 0, d), part(hs, 0, d)));
    auto f = ops::sigmoid(bias_add(ops::add(part(xs, 1, d), part(hs, 1, d)), fb));
    auto g = ops::tanh(ops::add(part(xs, 2, d), part(hs, 2, d)));
    auto dc = ops::mul(i, g);
    auto c_new = ops::add(ops::mul(f, state.c), dc);

    auto i2 = ops::sigmoid(ops::add(part(xs, 3, d), part(ms, 0, d)));
    auto f2 = ops::sigmoid(bias_add(ops::add(part(xs, 4, d), part(ms, 1, d)), fb));
    auto g2 = ops::tanh(ops::add(part(xs, 5, d), part(ms, 2, d)));
    auto dm = ops::mul(i2, g2);
    auto m_new = ops::add(ops::mul(f2, m), dm);

    auto mem = ops::concat_channels<S>({c_new, m_new});
    auto o = ops::sigmoid(ops::add(ops::add(part(xs, 6, d), part(hs, 3, d)), conv_o_(mem)));
    auto h_new = ops::mul(o, ops::tanh(conv_last_(mem)));
    return {{h_new, c_new}, m_new, ops::mean_abs_cosine(dc, dm)};
  }

 private:
  Conv2d<S> conv_x_, conv_h_, conv_m_, conv_o_, conv_last_;
  int hidden_ = 0;
};

/// Gated spatiotemporal attention block on channel-stacked time steps:
/// depthwise spatial conv, pointwise (temporal) conv, sigmoid gate.
template <typename S>
class GstaBlock {
 public:
  GstaBlock() = default;
  GstaBlock(ParamStore<S>& ps, const std::string& name, int channels, int kernel)
      : spatial_(ps, name + ".spatial", channels, kernel),
        temporal_(ps, name + ".temporal", channels, channels, 1),
        gate_(ps, name + ".gate", channels, channels, 1),
        channels_(channels) {}

  Var<S> operator()(const Var<S>& x) const {
    require(x->value.dim(1) == channels_, "gsta block: channel mismatch");
    auto h = temporal_(spatial_(x));
    return ops::mul(ops::sigmoid(gate_(h)), h);
  }

  DepthwiseConv2d<S>& spatial() { return spatial_; }
  Conv2d<S>& temporal() { return temporal_; }
  Conv2d<S>& gate() { return gate_; }

 private:
  DepthwiseConv2d<S> spatial_;
  Conv2d<S> temporal_, gate_;
  int channels_ = 0;
};

/// Maps a [T*d] latent stack to a [K*d] stack: 1x1 lift, then gated blocks with
/// residual connections and a LeakyReLU between them. Block-stage fusion sees
/// the stacked future weather.
template <typename S>
class GstaTranslator {
 public:
  GstaTranslator() = default;
  GstaTranslator(ParamStore<S>& ps, const std::string& name, int in_steps, int out_steps, int width, int layers,
                 int kernel, Fusion<S>* fusion = nullptr, int cond_steps = 0)
      : in_channels_(in_steps * width), out_channels_(out_steps * width), fusion_(fusion) {
    require(layers > 0 && width > 0 && in_steps > 0 && out_steps > 0, name + ": invalid translator configuration");
    lift_ = Conv2d<S>(ps, name + ".lift", in_channels_, out_channels_, 1);
    for (int l = 0; l < layers; ++l) {
      if (fusion_)
        slots_.push_back(fusion_->declare(ps, name + ".cond" + std::to_string(l), Stage::Block, out_channels_,
                                          std::max(cond_steps, 1)));
      blocks_.emplace_back(ps, name + ".block" + std::to_string(l), out_channels_, kernel);
    }
  }

  int in_channels() const { return in_channels_; }
  int out_channels() const { return out_channels_; }

  Var<S> operator()(const Var<S>& z, const Var<S>& stacked_weather = nullptr) const {
    require(z->value.dim(1) == in_channels_, "gsta_translate: expected " + std::to_string(in_channels_) +
                                                 " channels, got " + std::to_string(z->value.dim(1)));
    auto h = lift_(z);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      if (fusion_ && stacked_weather && fusion_->active(slots_[l])) h = (*fusion_)(slots_[l], h, stacked_weather);
      h = ops::add(h, blocks_[l](h));
      if (l + 1 < blocks_.size()) h = ops::leaky_relu(h);
    }
    return h;
  }

  GstaBlock<S>& block(std::size_t i) { return blocks_.at(i); }

 private:
  int in_channels_ = 0, out_channels_ = 0;
  Fusion<S>* fusion_ = nullptr;
  Conv2d<S> lift_;
  std::vector<GstaBlock<S>> blocks_;
  std::vector<int> slots_;
};

/// Two conv-norm-act layers; the UNet building block.
template <typename S>
struct UNetBlock {
  ConvNormAct<S> a, b;

  UNetBlock() = default;
  UNetBlock(ParamStore<S>& ps, const std::string& name, int in, int out, int kernel, int groups)
      : a(ps, name + ".a", in, out, kernel, groups), b(ps, name + ".b", out, out, kernel, groups) {}

  Var<S> operator()(const Var<S>& x) const { return b(a(x)); }
};

/// UNet with average-pool downsampling, nearest upsampling, concatenated skips
/// and widths doubling per level. Latent fusion sits at the bottleneck.
template <typename S>
class UNet {
 public:
  UNet() = default;
  UNet(ParamStore<S>& ps, const std::string& name, int in_channels, int out_channels, int depth,
       const EncoderDecoderConfig& cfg, Fusion<S>* fusion = nullptr, int cond_steps = 1)
      : depth_(depth), skips_(cfg.skips), fusion_(fusion) {
    cfg.validate();
    require(depth >= 1, name + ": depth must be at least 1");
    const int d = cfg.hidden;
    auto width = [d](int level) { return d << level; };
    const int tok = std::max(cond_steps, 1);
    for (int l = 0; l < depth; ++l) {
      down_.emplace_back(ps, name + ".down" + std::to_string(l), l == 0 ? in_channels : width(l - 1), width(l),
                         cfg.kernel, cfg.groups);
      if (fusion_) down_slots_.push_back(fusion_->declare(ps, name + ".down_cond" + std::to_string(l), Stage::Block, width(l), tok));
    }
    if (fusion_) post_encoder_ = fusion_->declare(ps, name + ".post_encoder", Stage::PostEncoder, width(depth - 1), tok);
    mid_ = UNetBlock<S>(ps, name + ".mid", width(depth - 1), width(depth), cfg.kernel, cfg.groups);
    if (fusion_) pre_decoder_ = fusion_->declare(ps, name + ".pre_decoder", Stage::PreDecoder, width(depth), tok);
    for (int l = depth - 1; l >= 0; --l) {
      const int in = width(l + 1) + (skips_ ? width(l) : 0);
      up_.emplace_back(ps, name + ".up" + std::to_string(l), in, width(l), cfg.kernel, cfg.groups);
      if (fusion_) up_slots_.push_back(fusion_->declare(ps, name + ".up_cond" + std::to_string(l), Stage::Block, width(l), tok));
    }
    head_ = Conv2d<S>(ps, name + ".head", width(0), out_channels, 1);
  }

  int depth() const { return depth_; }
  void set_skips(bool on) { skips_live_ = on; }

  /// `cond` holds the (possibly stacked) weather at full resolution.
  Var<S> operator()(const Var<S>& x, const CondPyramid<S>* cond = nullptr) const {
    const int f = 1 << depth_;
    require(x->value.rank() == 4 && x->value.dim(2) % f == 0 && x->value.dim(3) % f == 0,
            "unet: spatial dims " + shape_string(x->value.shape()) + " not divisible by " + std::to_string(f));
    std::vector<Var<S>> skips;
    auto h = x;
    for (int l = 0; l < depth_; ++l) {
      h = down_[l](h);
      h = fuse(down_slots_, l, h, cond, 1 << l);
      skips.push_back(h);
      h = ops::avg_pool(h, 2);
    }
    h = fuse_one(post_encoder_, h, cond, f);
    h = mid_(h);
    h = fuse_one(pre_decoder_, h, cond, f);
    for (int i = 0; i < depth_; ++i) {
      const int l = depth_ - 1 - i;
      h = ops::upsample_nearest(h, 2);
      if (skips_) {
        auto s = skips[l];
        if (!skips_live_) s = constant(Tensor<S>(s->value.shape()));
        h = ops::concat_channels<S>({h, s});
      }
      h = up_[i](h);
      h = fuse(up_slots_, i, h, cond, 1 << l);
    }
    return head_(h);
  }

 private:
  Var<S> fuse_one(int slot, const Var<S>& h, const CondPyramid<S>* cond, int scale) const {
    if (!fusion_ || slot < 0 || !cond || cond->empty() || !fusion_->active(slot)) return h;
    return (*fusion_)(slot, h, cond->at(scale));
  }
  Var<S> fuse(const std::vector<int>& slots, int i, const Var<S>& h, const CondPyramid<S>* cond, int scale) const {
    if (slots.empty()) return h;
    return fuse_one(slots[static_cast<std::size_t>(i)], h, cond, scale);
  }

  int depth_ = 0;
  bool skips_ = true;
  bool skips_live_ = true;
  Fusion<S>* fusion_ = nullptr;
  std::vector<UNetBlock<S>> down_, up_;
  std::vector<int> down_slots_, up_slots_;
  int post_encoder_ = -1, pre_decoder_ = -1;
  UNetBlock<S> mid_;
  Conv2d<S> head_;
};

}  // namespace vegcast
