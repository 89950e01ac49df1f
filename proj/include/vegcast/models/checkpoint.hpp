#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vegcast/core/binary.hpp"
#include "vegcast/evaluation/shuffle.hpp"
#include "vegcast/forecast.hpp"
#include "vegcast/models/models.hpp"

namespace vegcast {

inline constexpr const char* kCheckpointFormat = "vegcast-checkpoint";

/// A trained forecaster with everything needed to run it.
struct Checkpoint {
  std::unique_ptr<Model<float>> model;
  FeatureScaler scaler;
  int context_steps = 10;
  int target_steps = 20;
  std::string config_hash;
  nlohmann::json extra;  // training metadata (history, epochs, dataset hash)

  std::string model_id() const { return model->config().family + (model->config().meteo ? "" : "-nometeo"); }
};

/// Writes manifest.json and params.f32. Parameters are stored back to back in
/// declaration order; the manifest maps each path to its offset and shape.
inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck) {
  std::filesystem::create_directories(dir);
  nlohmann::json params = nlohmann::json::array();
  std::vector<float> blob;
  for (const auto& [name, var] : ck.model->params().entries()) {
    params.push_back({{"path", name}, {"shape", var->value.shape()}, {"offset", blob.size()}});
    blob.insert(blob.end(), var->value.values().begin(), var->value.values().end());
  }
  nlohmann::json m = {{"format", kCheckpointFormat},
                      {"version", 1},
                      {"model", ck.model->config()},
                      {"seed", ck.model->config().seed},
                      {"context_steps", ck.context_steps},
                      {"target_steps", ck.target_steps},
                      {"scaler", ck.scaler},
                      {"config_hash", ck.config_hash},
                      {"parameter_count", ck.model->parameter_count()},
                      {"dtype", "float32"},
                      {"byte_order", "little"},
                      {"params", params},
                      {"extra", ck.extra}};
  io::write_f32(dir / "params.f32", blob.data(), blob.size());
  io::write_json(dir / "manifest.json", m);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.json"))
    throw FormatError("no checkpoint at '" + dir.string() + "' (manifest.json missing)");
  const auto m = io::read_json(dir / "manifest.json", "checkpoint manifest");
  if (m.value("format", std::string()) != kCheckpointFormat)
    throw FormatError("'" + dir.string() + "' is not a checkpoint directory");
  Checkpoint ck;
  try {
    ck.context_steps = m.at("context_steps");
    ck.target_steps = m.at("target_steps");
    ck.scaler = m.at("scaler").get<FeatureScaler>();
    ck.config_hash = m.value("config_hash", std::string());
    ck.extra = m.value("extra", nlohmann::json::object());
    const auto cfg = m.at("model").get<ModelConfig>();
    ck.model = make_model<float>(cfg, ck.context_steps, ck.target_steps);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint manifest '" + (dir / "manifest.json").string() + "': " + e.what());
  } catch (const ContractError& e) {
    throw FormatError(std::string("checkpoint config rejected: ") + e.what());
  }
  const auto& entries = ck.model->params().entries();
  const auto& listed = m.at("params");
  if (listed.size() != entries.size())
    throw FormatError("checkpoint lists " + std::to_string(listed.size()) + " parameters, model has " +
                      std::to_string(entries.size()));
  std::size_t total = 0;
  for (const auto& e : entries) total += e.second->value.size();
  const auto blob = io::read_f32(dir / "params.f32", total, "checkpoint parameters");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, var] = entries[i];
    const auto& p = listed[i];
    if (p.at("path").get<std::string>() != name)
      throw FormatError("checkpoint parameter " + std::to_string(i) + " is '" + p.at("path").get<std::string>() +
                        "', expected '" + name + "'");
    if (p.at("shape").get<Shape>() != var->value.shape())
      throw FormatError("checkpoint parameter '" + name + "' has a different shape");
    const std::size_t off = p.at("offset");
    if (off + var->value.size() > blob.size()) throw FormatError("checkpoint parameter '" + name + "' out of range");
    std::copy_n(blob.begin() + static_cast<std::ptrdiff_t>(off), var->value.size(), var->value.data());
  }
  return ck;
}

/// Raw (unclipped) predictions [K, H, W] per cube, batched in input order. With
/// `shuffle_seed` set, every batch is pixel-shuffled before the forward pass and
/// the prediction mapped back to the original pixel order.
inline std::vector<Tensor<float>> predict(const Model<float>& model, const FeatureScaler& scaler,
                                          const std::vector<const Minicube*>& cubes, int batch_size = 8,
                                          std::optional<std::uint64_t> shuffle_seed = std::nullopt) {
  require(batch_size > 0, "predict: batch size must be positive");
  std::vector<Tensor<float>> out;
  for (std::size_t first = 0; first < cubes.size(); first += static_cast<std::size_t>(batch_size)) {
    const std::vector<const Minicube*> group(cubes.begin() + static_cast<std::ptrdiff_t>(first),
                                             cubes.begin() + static_cast<std::ptrdiff_t>(
                                                                 std::min(cubes.size(), first + batch_size)));
    auto batch = make_batch<float>(group, scaler);
    Tensor<float> pred;
    if (shuffle_seed) {
      auto [shuffled, perm] = eval::spatial_shuffle(batch, *shuffle_seed + first);
      pred = eval::unshuffle(model.forward(shuffled).prediction->value, perm);
    } else {
      pred = model.forward(batch).prediction->value;
    }
    const std::size_t per = static_cast<std::size_t>(batch.k) * batch.h * batch.w;
    for (std::size_t i = 0; i < group.size(); ++i)
      out.emplace_back(Shape{batch.k, batch.h, batch.w},
                       std::vector<float>(pred.data() + i * per, pred.data() + (i + 1) * per));
  }
  return out;
}

/// Runs a checkpoint over cubes and emits clipped forecasts.
inline std::vector<Forecast> forecast(const Checkpoint& ck, const std::vector<Minicube>& cubes, int batch_size = 8,
                                      std::optional<std::uint64_t> shuffle_seed = std::nullopt) {
  std::vector<const Minicube*> ptrs;
  for (const auto& c : cubes) ptrs.push_back(&c);
  auto preds = predict(*ck.model, ck.scaler, ptrs, batch_size, shuffle_seed);
  std::vector<Forecast> out;
  for (std::size_t i = 0; i < cubes.size(); ++i) {
    Forecast f;
    f.ndvi_hat = clip_ndvi(std::move(preds[i]));
    f.flagged = Tensor<float>({cubes[i].height(), cubes[i].width()});
    f.model_id = ck.model_id();
    f.config_hash = ck.config_hash;
    f.context_fingerprint = context_fingerprint(cubes[i]);
    f.cube_id = cubes[i].id;
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace vegcast
