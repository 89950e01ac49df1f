#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vegcast/backbones.hpp"
#include "vegcast/models/batch.hpp"

namespace vegcast {

inline const std::vector<std::string>& model_families() {
  static const std::vector<std::string> f{"convlstm-meteo", "predrnn-meteo", "simvp-meteo",
                                          "lstm-1x1",       "unet-next-frame", "unet-next-cuboid"};
  return f;
}

struct ModelConfig {
  std::string family = "convlstm-meteo";
  ConditioningConfig conditioning;
  EncoderDecoderConfig encdec;
  std::uint64_t seed = 42;
  bool meteo = true;
  int cell_kernel = 3;     // recurrent cells; lstm-1x1 forces 1
  int cells = 2;           // per recurrent network
  int unet_depth = 3;
  int gsta_layers = 2;
  int gsta_kernel = 5;

  /// Effective conditioning: method none when meteo is off.
  ConditioningConfig effective_conditioning() const {
    ConditioningConfig c = conditioning;
    if (!meteo) c.method = CondMethod::None;
    return c;
  }

  void validate() const {
    bool known = false;
    for (const auto& f : model_families()) known = known || f == family;
    require(known, "unknown model family '" + family + "'");
    encdec.validate();
    require(cells >= 1, family + ": at least one recurrent cell per network");
    require(cell_kernel > 0 && cell_kernel % 2 == 1, family + ": cell kernel must be odd");
    require(unet_depth >= 1 && gsta_layers >= 1 && gsta_kernel % 2 == 1, family + ": invalid depth settings");
    const auto c = effective_conditioning();
    c.validate(encdec.hidden);
    if (family == "lstm-1x1") require(cell_kernel == 1, "lstm-1x1 requires cell kernel 1");
    if (c.method == CondMethod::None) return;
    if (family == "simvp-meteo")
      require(c.location == FusionLocation::Latent, "simvp-meteo supports latent fusion or none");
    if (family == "unet-next-frame" || family == "unet-next-cuboid")
      require(c.location != FusionLocation::Early, family + " supports latent or all fusion");
  }

  /// Per-family defaults at desk scale.
  static ModelConfig defaults(const std::string& family) {
    ModelConfig m;
    m.family = family;
    m.encdec.hidden = 16;
    m.encdec.groups = 4;
    m.conditioning.hidden = 16;
    if (family == "convlstm-meteo" || family == "lstm-1x1") {
      m.conditioning.method = CondMethod::Cat;
      m.conditioning.location = FusionLocation::Early;
      m.cell_kernel = family == "lstm-1x1" ? 1 : 3;
    } else if (family == "predrnn-meteo") {
      m.conditioning.method = CondMethod::Film;
      m.conditioning.location = FusionLocation::Early;
    } else {
      m.conditioning.method = CondMethod::Film;
      m.conditioning.location = FusionLocation::Latent;
    }
    m.validate();
    return m;
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& m) {
  j = {{"family", m.family},          {"conditioning", m.conditioning}, {"encdec", m.encdec},
       {"seed", m.seed},              {"meteo", m.meteo},               {"cell_kernel", m.cell_kernel},
       {"cells", m.cells},            {"unet_depth", m.unet_depth},     {"gsta_layers", m.gsta_layers},
       {"gsta_kernel", m.gsta_kernel}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& m) {
  m = ModelConfig::defaults(j.value("family", std::string("convlstm-meteo")));
  if (j.contains("conditioning")) m.conditioning = j.at("conditioning").get<ConditioningConfig>();
  if (j.contains("encdec")) m.encdec = j.at("encdec").get<EncoderDecoderConfig>();
  m.seed = j.value("seed", m.seed);
  m.meteo = j.value("meteo", m.meteo);
  m.cell_kernel = j.value("cell_kernel", m.cell_kernel);
  m.cells = j.value("cells", m.cells);
  m.unet_depth = j.value("unet_depth", m.unet_depth);
  m.gsta_layers = j.value("gsta_layers", m.gsta_layers);
  m.gsta_kernel = j.value("gsta_kernel", m.gsta_kernel);
}

/// Teacher forcing for next-frame families: use_truth[k][b] feeds the observed
/// frame instead of the prediction as input for target step k+1.
struct Rollout {
  std::vector<std::vector<bool>> use_truth;
};

template <typename S>
struct ModelOutput {
  Var<S> prediction;  // [N, K, H, W], unclipped
  Var<S> penalty;     // auxiliary loss term or null
};

template <typename S>
class Model {
 public:
  explicit Model(const ModelConfig& cfg)
      : cfg_(cfg), params_(cfg.seed), fusion_(std::make_unique<Fusion<S>>(cfg.effective_conditioning())) {
    cfg.validate();
  }
  virtual ~Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  virtual ModelOutput<S> forward(const Batch<S>& batch, const Rollout* rollout = nullptr) const = 0;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }
  const Fusion<S>& fusion() const { return *fusion_; }
  std::size_t parameter_count() const { return params_.scalar_count(); }

 protected:
  Var<S> weather(const Batch<S>& b, int step) const {
    if (!cfg_.meteo || cfg_.effective_conditioning().method == CondMethod::None) return nullptr;
    return constant(b.weather_at(step));
  }
  Var<S> weather_stack(const Batch<S>& b, int first, int count) const {
    if (!cfg_.meteo || cfg_.effective_conditioning().method == CondMethod::None) return nullptr;
    return constant(b.weather_stack(first, count));
  }

  /// Input frame built from a prediction: ndvi = prediction, spectral channels at
  /// their mean, quality flag 1, elevation carried over.
  static Var<S> feedback_frame(const Var<S>& ndvi, const Tensor<S>& reference) {
    const int n = reference.dim(0), h = reference.dim(2), w = reference.dim(3);
    Tensor<S> rest({n, kFrameChannels - 1, h, w});
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (int b = 0; b < n; ++b) {
      S* r = rest.data() + static_cast<std::size_t>(b) * (kFrameChannels - 1) * hw;
      const S* e = reference.data() + (static_cast<std::size_t>(b) * kFrameChannels + kChannelElevation) * hw;
      std::fill(r + 2 * hw, r + 3 * hw, S(1));
      std::copy_n(e, hw, r + 3 * hw);
    }
    return ops::concat_channels<S>({ndvi, constant(std::move(rest))});
  }

  /// Per-sample choice between a truth frame and a feedback frame.
  static Var<S> choose(const std::vector<bool>& use_truth, const Tensor<S>& truth, const Var<S>& predicted) {
    bool any = false, all = true;
    for (bool u : use_truth) any = any || u, all = all && u;
    if (!any) return predicted;
    if (all) return constant(truth);
    Tensor<S> cond(truth.shape());
    const std::size_t per = truth.size() / use_truth.size();
    for (std::size_t b = 0; b < use_truth.size(); ++b)
      std::fill_n(cond.data() + b * per, per, use_truth[b] ? S(1) : S(0));
    return ops::blend(cond, constant(truth), predicted);
  }

  ModelConfig cfg_;
  ParamStore<S> params_;
  std::unique_ptr<Fusion<S>> fusion_;
};

/// Encoding-forecasting ConvLSTM: a context network over observed frames and past
/// weather, a separate forecasting network rolled over future weather. The
/// forecasting network sees the last observed frame once, on its first step.
/// With kernel 1 this is the pixelwise LSTM.
template <typename S>
class ConvLstmModel : public Model<S> {
  using Model<S>::cfg_;
  using Model<S>::params_;
  using Model<S>::fusion_;

 public:
  explicit ConvLstmModel(const ModelConfig& cfg) : Model<S>(cfg) {
    const int d = cfg.encdec.hidden, k = cfg.cell_kernel;
    auto& ps = params_;
    for (const char* net : {"context", "forecast"}) {
      Net n;
      const std::string p = net;
      n.stem = Conv2d<S>(ps, p + ".stem", kFrameChannels, d, 1);
      n.input_slot = fusion_->declare(ps, p + ".cond_input", Stage::Input, d);
      for (int c = 0; c < cfg.cells; ++c) {
        if (c > 0) n.mid_slots.push_back(fusion_->declare(ps, p + ".cond_cell" + std::to_string(c), Stage::PostEncoder, d));
        n.cells.emplace_back(ps, p + ".cell" + std::to_string(c), d, d, k);
      }
      nets_.push_back(std::move(n));
    }
    head_slot_ = fusion_->declare(ps, "head.cond", Stage::PreDecoder, d);
    head_ = Conv2d<S>(ps, "head", d, 1, 1);
  }

  ModelOutput<S> forward(const Batch<S>& b, const Rollout* = nullptr) const override {
    const int d = cfg_.encdec.hidden;
    std::vector<LstmState<S>> states(static_cast<std::size_t>(cfg_.cells), zero_state<S>(b.n, d, b.h, b.w));
    for (int t = 0; t < b.t; ++t) {
      auto e = ops::leaky_relu(nets_[0].stem(constant(b.frame(t))));
      step(nets_[0], e, this->weather(b, t), states);
    }
    std::vector<Var<S>> outs;
    const auto zero_in = constant(Tensor<S>({b.n, d, b.h, b.w}));
    for (int k = 0; k < b.k; ++k) {
      Var<S> e = k == 0 ? ops::leaky_relu(nets_[1].stem(constant(b.last_valid_frame()))) : zero_in;
      auto c = this->weather(b, b.t + k);
      step(nets_[1], e, c, states);
      outs.push_back(head_((*fusion_)(head_slot_, states.back().h, c)));
    }
    return {ops::concat_channels(outs), nullptr};
  }

 private:
  struct Net {
    Conv2d<S> stem;
    int input_slot = -1;
    std::vector<int> mid_slots;
    std::vector<ConvLstmCell<S>> cells;
  };

  void step(const Net& net, Var<S> x, const Var<S>& c, std::vector<LstmState<S>>& states) const {
    x = (*fusion_)(net.input_slot, x, c);
    for (std::size_t i = 0; i < net.cells.size(); ++i) {
      if (i > 0) x = (*fusion_)(net.mid_slots[i - 1], states[i - 1].h, c);
      states[i] = net.cells[i](x, states[i]);
    }
  }

  std::vector<Net> nets_;
  int head_slot_ = -1;
  Conv2d<S> head_;
};

/// PredRNN with PatchMerge encoder/decoder and a stack of ST-LSTM cells. Each
/// step consumes one frame and predicts the next; the weather fused at a step
/// is that of the predicted frame.
template <typename S>
class PredRnnModel : public Model<S> {
  using Model<S>::cfg_;
  using Model<S>::params_;
  using Model<S>::fusion_;

 public:
  explicit PredRnnModel(const ModelConfig& cfg) : Model<S>(cfg) {
    const int d = cfg.encdec.hidden;
    auto& ps = params_;
    stem_ = Conv2d<S>(ps, "stem", kFrameChannels, d, 1);
    input_slot_ = fusion_->declare(ps, "cond_input", Stage::Input, d);
    encoder_ = PatchMergeEncoder<S>(ps, "encoder", d, cfg.encdec, fusion_.get());
    post_slot_ = fusion_->declare(ps, "cond_post_encoder", Stage::PostEncoder, d);
    for (int c = 0; c < cfg.cells; ++c) cells_.emplace_back(ps, "cell" + std::to_string(c), d, d, cfg.cell_kernel);
    pre_slot_ = fusion_->declare(ps, "cond_pre_decoder", Stage::PreDecoder, d);
    decoder_ = PatchMergeDecoder<S>(ps, "decoder", 1, cfg.encdec, fusion_.get());
  }

  /// The zigzag memory leaving the deepest cell at each step, for wiring probes.
  mutable std::vector<std::pair<Tensor<S>, Tensor<S>>> zigzag_trace;
  bool trace = false;

  ModelOutput<S> forward(const Batch<S>& b, const Rollout* rollout = nullptr) const override {
    const int d = cfg_.encdec.hidden, f = cfg_.encdec.downsample;
    require(b.h % f == 0 && b.w % f == 0, "predrnn: spatial dims not divisible by the downsampling factor");
    const int lh = b.h / f, lw = b.w / f;
    std::vector<LstmState<S>> states(cells_.size(), zero_state<S>(b.n, d, lh, lw));
    Var<S> m = constant(Tensor<S>({b.n, d, lh, lw}));
    std::vector<Var<S>> outs, penalties;
    Var<S> prev_pred;
    if (trace) zigzag_trace.clear();
    for (int i = 0; i < b.t + b.k - 1; ++i) {
      Var<S> frame;
      if (i < b.t) {
        frame = constant(b.frame(i));
      } else {
        const int k = i - b.t;  // the frame being fed is target step k
        auto fed = this->feedback_frame(prev_pred, b.frame(b.t - 1));
        if (rollout && static_cast<std::size_t>(k) < rollout->use_truth.size())
          fed = this->choose(rollout->use_truth[k], b.future_frame(k), fed);
        frame = fed;
      }
      auto c = this->weather(b, i + 1);
      CondPyramid<S> pyr(c);
      auto x = (*fusion_)(input_slot_, ops::leaky_relu(stem_(frame)), c);
      auto enc = encoder_(x, &pyr);
      auto z = (*fusion_)(post_slot_, enc.latent, pyr.at(f));
      Var<S> inp = z;
      for (std::size_t l = 0; l < cells_.size(); ++l) {
        Var<S> m_in = m;
        auto o = cells_[l](inp, states[l], m_in);
        if (trace && l == 0) zigzag_trace.emplace_back(m_in->value, Tensor<S>());
        states[l] = o.state;
        m = o.m;
        penalties.push_back(o.penalty);
        inp = l == 0 ? o.state.h : ops::add(o.state.h, inp);
      }
      if (trace) zigzag_trace.back().second = m->value;
      auto y = decoder_((*fusion_)(pre_slot_, inp, pyr.at(f)), enc.skips, &pyr);
      if (i >= b.t - 1) outs.push_back(y);
      prev_pred = y;
    }
    Var<S> pen = penalties.front();
    for (std::size_t i = 1; i < penalties.size(); ++i) pen = ops::add(pen, penalties[i]);
    pen = ops::scale(pen, S(1) / static_cast<S>(penalties.size()));
    return {ops::concat_channels(outs), pen};
  }

 private:
  Conv2d<S> stem_;
  int input_slot_ = -1, post_slot_ = -1, pre_slot_ = -1;
  PatchMergeEncoder<S> encoder_;
  std::vector<StLstmCell<S>> cells_;
  PatchMergeDecoder<S> decoder_;
};

/// SimVP: per-frame encoder, GSTA translator over the channel-stacked latent
/// sequence, per-step decoder with skips from the last context frame.
template <typename S>
class SimVpModel : public Model<S> {
  using Model<S>::cfg_;
  using Model<S>::params_;
  using Model<S>::fusion_;

 public:
  SimVpModel(const ModelConfig& cfg, int context_steps, int target_steps)
      : Model<S>(cfg), t_(context_steps), k_(target_steps) {
    const int d = cfg.encdec.hidden;
    auto& ps = params_;
    encoder_ = PatchMergeEncoder<S>(ps, "encoder", kFrameChannels, cfg.encdec, fusion_.get());
    post_slot_ = fusion_->declare(ps, "cond_post_encoder", Stage::PostEncoder, d);
    translator_ = GstaTranslator<S>(ps, "translator", t_, k_, d, cfg.gsta_layers, cfg.gsta_kernel, fusion_.get(), k_);
    pre_slot_ = fusion_->declare(ps, "cond_pre_decoder", Stage::PreDecoder, d);
    decoder_ = PatchMergeDecoder<S>(ps, "decoder", 1, cfg.encdec, fusion_.get());
  }

  ModelOutput<S> forward(const Batch<S>& b, const Rollout* = nullptr) const override {
    require(b.t == t_ && b.k == k_, "simvp: batch has T=" + std::to_string(b.t) + ", K=" + std::to_string(b.k) +
                                        " but the model was built for T=" + std::to_string(t_) +
                                        ", K=" + std::to_string(k_));
    const int d = cfg_.encdec.hidden, f = cfg_.encdec.downsample;
    std::vector<Var<S>> latents;
    std::vector<Var<S>> skips;
    for (int t = 0; t < b.t; ++t) {
      auto c = this->weather(b, t);
      CondPyramid<S> pyr(c);
      auto enc = encoder_(constant(b.frame(t)), &pyr);
      latents.push_back((*fusion_)(post_slot_, enc.latent, pyr.at(f)));
      if (t == b.t - 1) skips = enc.skips;
    }
    auto future = this->weather_stack(b, b.t, b.k);
    auto z = translator_(ops::concat_channels(latents), future ? ops::avg_pool(future, f) : nullptr);
    std::vector<Var<S>> outs;
    for (int k = 0; k < b.k; ++k) {
      auto c = this->weather(b, b.t + k);
      CondPyramid<S> pyr(c);
      auto y = (*fusion_)(pre_slot_, ops::slice_channels(z, k * d, d), pyr.at(f));
      outs.push_back(decoder_(y, skips, &pyr));
    }
    return {ops::concat_channels(outs), nullptr};
  }

 private:
  int t_ = 0, k_ = 0;
  PatchMergeEncoder<S> encoder_;
  int post_slot_ = -1, pre_slot_ = -1;
  GstaTranslator<S> translator_;
  PatchMergeDecoder<S> decoder_;
};

/// Memoryless UNet predicting one frame ahead from one frame, rolled out
/// autoregressively from the last valid context observation.
template <typename S>
class UNetNextFrameModel : public Model<S> {
  using Model<S>::cfg_;
  using Model<S>::params_;
  using Model<S>::fusion_;

 public:
  explicit UNetNextFrameModel(const ModelConfig& cfg) : Model<S>(cfg) {
    unet_ = UNet<S>(params_, "unet", kFrameChannels, 1, cfg.unet_depth, cfg.encdec, fusion_.get());
  }

  /// One step: frame [N,5,H,W] and the weather of the predicted step.
  Var<S> step(const Var<S>& frame, const Var<S>& weather) const {
    CondPyramid<S> pyr(weather);
    return unet_(frame, &pyr);
  }

  ModelOutput<S> forward(const Batch<S>& b, const Rollout* rollout = nullptr) const override {
    const Tensor<S> start = b.last_valid_frame();
    Var<S> frame = constant(start);
    std::vector<Var<S>> outs;
    for (int k = 0; k < b.k; ++k) {
      auto y = step(frame, this->weather(b, b.t + k));
      outs.push_back(y);
      frame = this->feedback_frame(y, start);
      if (rollout && static_cast<std::size_t>(k) < rollout->use_truth.size())
        frame = this->choose(rollout->use_truth[k], b.future_frame(k), frame);
    }
    return {ops::concat_channels(outs), nullptr};
  }

 private:
  UNet<S> unet_;
};

/// UNet mapping the channel-stacked context to all target steps at once.
template <typename S>
class UNetNextCuboidModel : public Model<S> {
  using Model<S>::cfg_;
  using Model<S>::params_;
  using Model<S>::fusion_;

 public:
  UNetNextCuboidModel(const ModelConfig& cfg, int context_steps, int target_steps)
      : Model<S>(cfg), t_(context_steps), k_(target_steps) {
    unet_ = UNet<S>(params_, "unet", t_ * kFrameChannels, k_, cfg.unet_depth, cfg.encdec, fusion_.get(), t_ + k_);
  }

  ModelOutput<S> forward(const Batch<S>& b, const Rollout* = nullptr) const override {
    require(b.t == t_ && b.k == k_, "unet-next-cuboid: batch dimensions differ from the model's");
    CondPyramid<S> pyr(this->weather_stack(b, 0, b.t + b.k));
    return {unet_(constant(b.context_stack()), &pyr), nullptr};
  }

 private:
  int t_ = 0, k_ = 0;
  UNet<S> unet_;
};

/// Builds a model; cuboid families need the sequence lengths.
template <typename S>
std::unique_ptr<Model<S>> make_model(const ModelConfig& cfg, int context_steps = 10, int target_steps = 20) {
  cfg.validate();
  require(context_steps > 0 && target_steps > 0, "make_model: sequence lengths must be positive");
  if (cfg.family == "convlstm-meteo" || cfg.family == "lstm-1x1") return std::make_unique<ConvLstmModel<S>>(cfg);
  if (cfg.family == "predrnn-meteo") return std::make_unique<PredRnnModel<S>>(cfg);
  if (cfg.family == "simvp-meteo") return std::make_unique<SimVpModel<S>>(cfg, context_steps, target_steps);
  if (cfg.family == "unet-next-frame") return std::make_unique<UNetNextFrameModel<S>>(cfg);
  return std::make_unique<UNetNextCuboidModel<S>>(cfg, context_steps, target_steps);
}

template <typename S>
std::size_t count_parameters(const Model<S>& m) {
  return m.parameter_count();
}

}  // namespace vegcast
