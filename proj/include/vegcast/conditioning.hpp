#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vegcast/core/nn.hpp"
#include "vegcast/minicube/minicube.hpp"

namespace vegcast {

enum class CondMethod { None, Cat, Film, XAttn };
enum class FusionLocation { Early, Latent, All };
enum class Stage { Input, PostEncoder, PreDecoder, Block };

inline constexpr std::array<Stage, 4> kStages{Stage::Input, Stage::PostEncoder, Stage::PreDecoder, Stage::Block};

inline std::string method_name(CondMethod m) {
  switch (m) {
    case CondMethod::None: return "none";
    case CondMethod::Cat: return "cat";
    case CondMethod::Film: return "film";
    case CondMethod::XAttn: return "xattn";
  }
  return "?";
}

inline CondMethod parse_method(const std::string& s) {
  if (s == "none") return CondMethod::None;
  if (s == "cat" || s == "CAT") return CondMethod::Cat;
  if (s == "film" || s == "FiLM") return CondMethod::Film;
  if (s == "xattn" || s == "xAttn") return CondMethod::XAttn;
  throw ContractError("unknown conditioning method '" + s + "'");
}

inline std::string location_name(FusionLocation l) {
  switch (l) {
    case FusionLocation::Early: return "early";
    case FusionLocation::Latent: return "latent";
    case FusionLocation::All: return "all";
  }
  return "?";
}

inline FusionLocation parse_location(const std::string& s) {
  if (s == "early") return FusionLocation::Early;
  if (s == "latent") return FusionLocation::Latent;
  if (s == "all") return FusionLocation::All;
  throw ContractError("unknown fusion location '" + s + "'");
}

inline std::string stage_name(Stage s) {
  switch (s) {
    case Stage::Input: return "input";
    case Stage::PostEncoder: return "post-encoder";
    case Stage::PreDecoder: return "pre-decoder";
    case Stage::Block: return "every-block";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  for (Stage st : kStages)
    if (stage_name(st) == s) return st;
  throw ContractError("unknown fusion stage '" + s + "'");
}

struct ConditioningConfig {
  CondMethod method = CondMethod::Film;
  FusionLocation location = FusionLocation::Latent;
  int hidden = 32;  // width of the gamma/beta networks
  int heads = 1;
  int variables = static_cast<int>(kWeatherVariables.size());
  int features = kWeatherStats;

  int width() const { return variables * features; }

  void validate(int feature_width) const {
    if (method == CondMethod::None) return;
    require(hidden > 0, "conditioning: hidden width must be positive");
    require(variables > 0 && features > 0, "conditioning: weather layout must be positive");
    if (method == CondMethod::XAttn)
      require(heads > 0 && feature_width % heads == 0, "conditioning: " + std::to_string(heads) +
                                                           " heads do not divide feature width " +
                                                           std::to_string(feature_width));
  }

  bool active(Stage s) const {
    if (method == CondMethod::None) return false;
    switch (location) {
      case FusionLocation::Early: return s == Stage::Input;
      case FusionLocation::Latent: return s == Stage::PostEncoder || s == Stage::PreDecoder;
      case FusionLocation::All: return true;
    }
    return false;
  }
};

inline void to_json(nlohmann::json& j, const ConditioningConfig& c) {
  j = {{"method", method_name(c.method)}, {"location", location_name(c.location)}, {"hidden", c.hidden},
       {"heads", c.heads},                {"variables", c.variables},             {"features", c.features}};
}

inline void from_json(const nlohmann::json& j, ConditioningConfig& c) {
  c = ConditioningConfig{};
  if (j.contains("method")) c.method = parse_method(j.at("method").get<std::string>());
  if (j.contains("location")) c.location = parse_location(j.at("location").get<std::string>());
  c.hidden = j.value("hidden", c.hidden);
  c.heads = j.value("heads", c.heads);
  c.variables = j.value("variables", c.variables);
  c.features = j.value("features", c.features);
}

/// x' = W [x; c] + b, initialized to [I | 0] so the layer starts as the identity.
template <typename S>
struct CatCondition {
  Conv2d<S> proj;
  int d = 0;

  CatCondition() = default;
  CatCondition(ParamStore<S>& ps, const std::string& name, int width, int cond_width) : d(width) {
    proj = Conv2d<S>(ps, name + ".proj", width + cond_width, width, 1, true, Init::Zero);
    auto& w = proj.weight->value;
    for (int i = 0; i < width; ++i) w.at(i, i, 0, 0) = S(1);
  }

  Var<S> operator()(const Var<S>& x, const Var<S>& c) const {
    require(x->value.dim(1) == d, "cat_condition: feature width mismatch");
    require(c->value.dim(1) + d == proj.in, "cat_condition: conditioning width mismatch");
    return proj(ops::concat_channels<S>({x, c}));
  }
};

/// x' = x + leaky(gamma(c) * LN(f(x)) + beta(c)); gamma and beta end in zero layers.
template <typename S>
struct FilmCondition {
  Conv2d<S> f;
  PixelMlp<S> gamma;
  PixelMlp<S> beta;
  int d = 0;

  FilmCondition() = default;
  FilmCondition(ParamStore<S>& ps, const std::string& name, int width, int cond_width, int hidden)
      : f(ps, name + ".f", width, width, 1),
        gamma(ps, name + ".gamma", cond_width, hidden, width, true),
        beta(ps, name + ".beta", cond_width, hidden, width, true),
        d(width) {}

  Var<S> operator()(const Var<S>& x, const Var<S>& c) const {
    require(x->value.dim(1) == d, "film_condition: feature width mismatch");
    auto mod = ops::add(ops::mul(gamma(c), ops::channel_layer_norm(f(x))), beta(c));
    return ops::add(x, ops::leaky_relu(mod));
  }
};

/// x' = x + f(LN(MHA(Q x, K c, V c))) with one key/value token per weather variable.
template <typename S>
struct XAttnCondition {
  Conv2d<S> q;
  Var<S> k_weight, k_bias, v_weight, v_bias;
  Conv2d<S> f;
  int d = 0, tokens = 0, heads = 1;

  XAttnCondition() = default;
  XAttnCondition(ParamStore<S>& ps, const std::string& name, int width, int variables, int features, int num_heads)
      : q(ps, name + ".q", width, width, 1), d(width), tokens(variables), heads(num_heads) {
    require(num_heads > 0 && width % num_heads == 0, name + ": heads must divide the feature width");
    const double bound = 1.0 / std::sqrt(static_cast<double>(features));
    k_weight = ps.uniform(name + ".k.weight", {width, features}, bound);
    k_bias = ps.uniform(name + ".k.token_bias", {variables, width}, bound);
    v_weight = ps.uniform(name + ".v.weight", {width, features}, bound);
    v_bias = ps.uniform(name + ".v.token_bias", {variables, width}, bound);
    f = Conv2d<S>(ps, name + ".f", width, width, 1, true, Init::Zero);
  }

  Var<S> operator()(const Var<S>& x, const Var<S>& c) const {
    require(x->value.dim(1) == d, "xattn_condition: feature width mismatch");
    auto keys = ops::token_projection(c, k_weight, k_bias, tokens);
    auto values = ops::token_projection(c, v_weight, v_bias, tokens);
    auto att = ops::pixel_attention(q(x), keys, values, tokens, heads);
    return ops::add(x, f(ops::channel_layer_norm(att)));
  }
};

/// One conditioning layer of whichever method the config names.
template <typename S>
struct CondLayer {
  CondMethod method = CondMethod::None;
  CatCondition<S> cat;
  FilmCondition<S> film;
  XAttnCondition<S> xattn;

  CondLayer() = default;
  CondLayer(ParamStore<S>& ps, const std::string& name, const ConditioningConfig& cfg, int width, int tokens_per_pixel = 1)
      : method(cfg.method) {
    cfg.validate(width);
    const int cw = cfg.width() * tokens_per_pixel;
    switch (cfg.method) {
      case CondMethod::Cat: cat = CatCondition<S>(ps, name + ".cat", width, cw); break;
      case CondMethod::Film: film = FilmCondition<S>(ps, name + ".film", width, cw, cfg.hidden); break;
      case CondMethod::XAttn:
        xattn = XAttnCondition<S>(ps, name + ".xattn", width, cfg.variables * tokens_per_pixel, cfg.features, cfg.heads);
        break;
      case CondMethod::None: break;
    }
  }

  Var<S> operator()(const Var<S>& x, const Var<S>& c) const {
    switch (method) {
      case CondMethod::Cat: return cat(x, c);
      case CondMethod::Film: return film(x, c);
      case CondMethod::XAttn: return xattn(x, c);
      case CondMethod::None: return x;
    }
    return x;
  }
};

/// Routes weather into a backbone. Backbones declare one slot per fusion point;
/// slots whose stage the location policy excludes hold no parameters and pass
/// features through untouched.
template <typename S>
class Fusion {
 public:
  Fusion() = default;
  explicit Fusion(ConditioningConfig cfg) : cfg_(cfg) {}

  const ConditioningConfig& config() const { return cfg_; }

  /// Returns a slot handle; `tokens_per_pixel` > 1 when c stacks several timesteps.
  int declare(ParamStore<S>& ps, const std::string& name, Stage stage, int width, int tokens_per_pixel = 1) {
    Slot s;
    s.stage = stage;
    if (cfg_.active(stage)) s.layer = std::make_shared<CondLayer<S>>(ps, name, cfg_, width, tokens_per_pixel);
    slots_.push_back(std::move(s));
    return static_cast<int>(slots_.size()) - 1;
  }

  bool active(int slot) const { return slots_.at(static_cast<std::size_t>(slot)).layer != nullptr; }

  Var<S> operator()(int slot, const Var<S>& x, const Var<S>& c) const {
    const Slot& s = slots_.at(static_cast<std::size_t>(slot));
    if (!s.layer) return x;
    require(c != nullptr, "fusion: conditioning input missing for an active stage");
    ++applications_[static_cast<std::size_t>(s.stage)];
    return (*s.layer)(x, c);
  }

  /// Applications per stage since the last reset.
  const std::array<long, 4>& applications() const { return applications_; }
  void reset_counters() const { applications_.fill(0); }

 private:
  struct Slot {
    Stage stage = Stage::Input;
    std::shared_ptr<CondLayer<S>> layer;
  };
  ConditioningConfig cfg_{CondMethod::None, FusionLocation::Early};
  std::vector<Slot> slots_;
  mutable std::array<long, 4> applications_{};
};

/// Stage-level entry point: applies `layer` iff the policy activates `stage`.
template <typename S>
Var<S> fuse(Stage stage, const Var<S>& x, const Var<S>& c, const ConditioningConfig& cfg, const CondLayer<S>& layer) {
  if (!cfg.active(stage)) return x;
  return layer(x, c);
}

}  // namespace vegcast
