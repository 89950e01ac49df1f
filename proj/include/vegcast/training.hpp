#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vegcast/evaluation/harness.hpp"
#include "vegcast/evaluation/shuffle.hpp"
#include "vegcast/models/checkpoint.hpp"

namespace vegcast {

/// Raised when the training loss stops being finite.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Probability of feeding the observed frame at target steps: starts at p0,
/// stays near it early and falls to 0 at `decay_steps` along a mirrored
/// exponential, p(s) = p0 * (1 - (e^{s/tau} - 1) / (e^{D/tau} - 1)).
struct ScheduledSampling {
  double p0 = 1.0;
  double decay_steps = 2000;
  double tau = 500;

  double probability(long step) const {
    if (step <= 0) return p0;
    if (step >= decay_steps) return 0.0;
    const double num = std::expm1(static_cast<double>(step) / tau);
    const double den = std::expm1(decay_steps / tau);
    return std::max(0.0, p0 * (1.0 - num / den));
  }
};

/// Per-target-step teacher-forcing probabilities; context steps always see observations.
inline std::vector<double> scheduled_sampling_mask(long step, const ScheduledSampling& s, int target_steps) {
  return std::vector<double>(static_cast<std::size_t>(target_steps), s.probability(step));
}

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay: p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps).
template <typename S>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  long steps() const { return t_; }

  void step(ParamStore<S>& ps) {
    const auto& entries = ps.entries();
    if (m_.empty()) {
      for (const auto& e : entries) {
        m_.emplace_back(e.second->value.size(), 0.0);
        v_.emplace_back(e.second->value.size(), 0.0);
      }
    }
    require(m_.size() == entries.size(), "AdamW: parameter set changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double shrink = 1.0 - cfg_.lr * cfg_.weight_decay;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto& node = *entries[i].second;
      const bool has = node.has_grad();
      for (std::size_t j = 0; j < node.value.size(); ++j) {
        const double g = has ? static_cast<double>(node.grad[j]) : 0.0;
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
        const double upd = cfg_.lr * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + cfg_.eps);
        node.value[j] = static_cast<S>(static_cast<double>(node.value[j]) * shrink - upd);
      }
    }
  }

 private:
  AdamWConfig cfg_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Scales all gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
template <typename S>
double clip_grad_norm(ParamStore<S>& ps, double max_norm) {
  double sq = 0;
  for (const auto& e : ps.entries())
    if (e.second->has_grad())
      for (S g : e.second->grad.values()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const S f = static_cast<S>(max_norm / (norm + 1e-12));
    for (const auto& e : ps.entries())
      if (e.second->has_grad())
        for (S& g : e.second->grad.values()) g *= f;
  }
  return norm;
}

struct TrainConfig {
  int epochs = 30;
  int batch_size = 4;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double decouple_weight = 0.0;
  ScheduledSampling sampling;
  int patience = 10;
  std::uint64_t seed = 42;
  int crop = 16;          // random square training crops; 0 trains on full cubes
  bool shuffle = false;   // spatial shuffle of every training and validation batch
  int max_batches = 0;    // per epoch; 0 = all
  bool cosine = true;     // cosine decay of the learning rate over the run
  double min_lr_fraction = 0.05;

  /// Learning rate for the i-th epoch (0-based) of a run of `epochs` epochs.
  double lr_at(int i) const {
    if (!cosine || epochs <= 1) return lr;
    const double progress = static_cast<double>(i) / (epochs - 1);
    return lr * (min_lr_fraction + (1 - min_lr_fraction) * 0.5 * (1 + std::cos(std::numbers::pi * progress)));
  }

  void validate() const {
    require(epochs >= 0, "train: epochs must be non-negative");
    require(batch_size > 0, "train: batch size must be positive");
    require(lr >= 0 && weight_decay >= 0 && clip_norm >= 0, "train: rates must be non-negative");
    require(patience >= 1, "train: patience must be at least 1");
    require(crop >= 0 && max_batches >= 0, "train: crop and batch limits must be non-negative");
    require(min_lr_fraction >= 0 && min_lr_fraction <= 1, "train: min_lr_fraction must lie in [0, 1]");
  }

  /// Desk-scale defaults per family.
  static TrainConfig defaults(const std::string& family) {
    TrainConfig t;
    if (family == "convlstm-meteo" || family == "lstm-1x1") t.lr = 3e-3;
    else if (family == "predrnn-meteo") t.lr = 1e-3, t.decouple_weight = 0.1;
    else if (family == "simvp-meteo") t.lr = 2e-3;
    else t.lr = 1e-3;
    return t;
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& t) {
  j = {{"epochs", t.epochs},
       {"batch_size", t.batch_size},
       {"lr", t.lr},
       {"weight_decay", t.weight_decay},
       {"clip_norm", t.clip_norm},
       {"decouple_weight", t.decouple_weight},
       {"sampling", {{"p0", t.sampling.p0}, {"decay_steps", t.sampling.decay_steps}, {"tau", t.sampling.tau}}},
       {"patience", t.patience},
       {"seed", t.seed},
       {"crop", t.crop},
       {"shuffle", t.shuffle},
       {"max_batches", t.max_batches},
       {"cosine", t.cosine},
       {"min_lr_fraction", t.min_lr_fraction}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& t) {
  t.epochs = j.value("epochs", t.epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.lr = j.value("lr", t.lr);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.clip_norm = j.value("clip_norm", t.clip_norm);
  t.decouple_weight = j.value("decouple_weight", t.decouple_weight);
  if (j.contains("sampling")) {
    const auto& s = j.at("sampling");
    t.sampling.p0 = s.value("p0", t.sampling.p0);
    t.sampling.decay_steps = s.value("decay_steps", t.sampling.decay_steps);
    t.sampling.tau = s.value("tau", t.sampling.tau);
  }
  t.patience = j.value("patience", t.patience);
  t.seed = j.value("seed", t.seed);
  t.crop = j.value("crop", t.crop);
  t.shuffle = j.value("shuffle", t.shuffle);
  t.max_batches = j.value("max_batches", t.max_batches);
  t.cosine = j.value("cosine", t.cosine);
  t.min_lr_fraction = j.value("min_lr_fraction", t.min_lr_fraction);
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_rmse = 0;
  double lr = 0;
  double seconds = 0;
  int skipped_batches = 0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_val_rmse = std::numeric_limits<double>::infinity();
  bool diverged = false;

  std::string json_lines() const {
    std::string out;
    for (const auto& e : epochs)
      out += nlohmann::json{{"epoch", e.epoch},     {"train_loss", e.train_loss}, {"val_rmse", e.val_rmse},
                            {"lr", e.lr},           {"seconds", e.seconds},       {"skipped_batches", e.skipped_batches}}
                 .dump() +
             "\n";
    return out;
  }

  static TrainLog parse_json_lines(const std::string& text) {
    TrainLog log;
    std::size_t pos = 0;
    while (pos < text.size()) {
      const auto end = text.find('\n', pos);
      const auto line = text.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
      pos = end == std::string::npos ? text.size() : end + 1;
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      EpochRecord e;
      e.epoch = j.at("epoch");
      e.train_loss = j.at("train_loss");
      e.val_rmse = j.at("val_rmse");
      e.lr = j.at("lr");
      e.seconds = j.at("seconds");
      e.skipped_batches = j.at("skipped_batches");
      if (e.val_rmse < log.best_val_rmse) log.best_val_rmse = e.val_rmse, log.best_epoch = e.epoch;
      log.epochs.push_back(e);
    }
    return log;
  }
};

/// A square spatial window of a batch.
template <typename S>
Batch<S> crop_batch(const Batch<S>& b, int y0, int x0, int size) {
  require(y0 >= 0 && x0 >= 0 && size > 0 && y0 + size <= b.h && x0 + size <= b.w, "crop_batch: window out of range");
  auto crop = [&](const Tensor<S>& t) {
    Shape s = t.shape();
    const std::size_t planes = t.size() / (static_cast<std::size_t>(b.h) * b.w);
    s[s.size() - 2] = size;
    s[s.size() - 1] = size;
    Tensor<S> out(s);
    for (std::size_t p = 0; p < planes; ++p)
      for (int y = 0; y < size; ++y)
        std::copy_n(t.data() + (p * b.h + y0 + y) * b.w + x0, size, out.data() + (p * size + y) * size);
    return out;
  };
  Batch<S> o;
  o.n = b.n, o.t = b.t, o.k = b.k, o.h = size, o.w = size, o.f = b.f;
  o.context = crop(b.context);
  o.future = crop(b.future);
  o.weather = crop(b.weather);
  o.target = crop(b.target);
  o.mask = crop(b.mask);
  o.cube_ids = b.cube_ids;
  return o;
}

inline bool uses_teacher_forcing(const std::string& family) {
  return family == "predrnn-meteo" || family == "unet-next-frame";
}

/// Macro RMSE of a model on cubes, scored with the full evaluation protocol.
inline double validation_rmse(const Model<float>& model, const FeatureScaler& scaler, const std::vector<Minicube>& cubes,
                              int batch_size, std::optional<std::uint64_t> shuffle_seed) {
  std::vector<const Minicube*> ptrs;
  for (const auto& c : cubes) ptrs.push_back(&c);
  auto preds = predict(model, scaler, ptrs, batch_size, shuffle_seed);
  std::vector<Forecast> fc(cubes.size());
  for (std::size_t i = 0; i < cubes.size(); ++i) {
    fc[i].ndvi_hat = clip_ndvi(std::move(preds[i]));
    fc[i].cube_id = cubes[i].id;
  }
  const auto t = eval::score_forecasts(cubes, fc, model.config().family, "");
  return t.macro.rmse;
}

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  /// Called with the improved model after each new best epoch.
  std::function<void(int epoch)> on_best;
};

/// Masked-MSE training with AdamW, global-norm clipping, early stopping on the
/// validation macro RMSE, and restoration of the best parameters. A non-finite
/// loss stops training with the best finite parameters restored and
/// `log.diverged` set. `resume` continues an earlier log's epoch counter.
inline TrainLog train(Model<float>& model, const std::vector<Minicube>& train_cubes, const std::vector<Minicube>& val_cubes,
                      const FeatureScaler& scaler, const TrainConfig& cfg, const TrainHooks& hooks = {},
                      const TrainLog* resume = nullptr) {
  cfg.validate();
  require(!train_cubes.empty(), "train: the training split is empty");
  TrainLog log;
  if (resume) log = *resume;
  const int first_epoch = log.epochs.empty() ? 1 : log.epochs.back().epoch + 1;
  std::mt19937_64 rng(cfg.seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(first_epoch)));
  AdamW<float> opt({cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  auto& ps = model.params();
  auto best = ps.snapshot();
  const bool forcing = uses_teacher_forcing(model.config().family);
  const std::optional<std::uint64_t> val_shuffle =
      cfg.shuffle ? std::optional<std::uint64_t>(cfg.seed + 1000003) : std::nullopt;
  int since_best = 0;
  long step = 0;
  std::vector<std::size_t> order(train_cubes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = first_epoch; epoch < first_epoch + cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cfg.lr_at(epoch - first_epoch);
    opt.set_lr(lr);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    int batches = 0, skipped = 0;
    for (std::size_t first = 0; first < order.size(); first += static_cast<std::size_t>(cfg.batch_size)) {
      if (cfg.max_batches > 0 && batches + skipped >= cfg.max_batches) break;
      std::vector<const Minicube*> group;
      for (std::size_t i = first; i < std::min(order.size(), first + cfg.batch_size); ++i)
        group.push_back(&train_cubes[order[i]]);
      auto batch = make_batch<float>(group, scaler);
      if (cfg.crop > 0 && cfg.crop < batch.h && cfg.crop < batch.w) {
        std::uniform_int_distribution<int> dy(0, batch.h - cfg.crop), dx(0, batch.w - cfg.crop);
        const int y0 = dy(rng), x0 = dx(rng);
        batch = crop_batch(batch, y0, x0, cfg.crop);
      }
      if (cfg.shuffle) batch = eval::spatial_shuffle(batch, rng()).first;
      Rollout rollout;
      if (forcing) {
        const double p = cfg.sampling.probability(step);
        std::bernoulli_distribution coin(p);
        rollout.use_truth.assign(static_cast<std::size_t>(batch.k), std::vector<bool>(batch.n));
        for (auto& row : rollout.use_truth)
          for (std::size_t b = 0; b < row.size(); ++b) row[b] = coin(rng);
      }
      auto out = model.forward(batch, forcing ? &rollout : nullptr);
      Var<float> loss;
      try {
        loss = ops::masked_mse(out.prediction, batch.target, batch.mask);
      } catch (const NoValidPixelsError&) {
        ++skipped;
        continue;
      }
      if (out.penalty && cfg.decouple_weight > 0)
        loss = ops::add_scalars(loss, out.penalty, static_cast<float>(cfg.decouple_weight));
      const double value = loss->value[0];
      if (!std::isfinite(value)) {
        ps.restore(best);
        log.diverged = true;
        return log;
      }
      ps.zero_grad();
      backward(loss);
      clip_grad_norm(ps, cfg.clip_norm);
      opt.step(ps);
      ps.zero_grad();
      loss_sum += value;
      ++batches;
      ++step;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = batches > 0 ? loss_sum / batches : std::numeric_limits<double>::quiet_NaN();
    rec.lr = lr;
    rec.skipped_batches = skipped;
    rec.val_rmse = val_cubes.empty() ? rec.train_loss
                                     : validation_rmse(model, scaler, val_cubes, cfg.batch_size, val_shuffle);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (std::isfinite(rec.val_rmse) && rec.val_rmse < log.best_val_rmse) {
      log.best_val_rmse = rec.val_rmse;
      log.best_epoch = epoch;
      best = ps.snapshot();
      since_best = 0;
      if (hooks.on_best) hooks.on_best(epoch);
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  ps.restore(best);
  return log;
}

}  // namespace vegcast
