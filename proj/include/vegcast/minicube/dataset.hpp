#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "vegcast/core/binary.hpp"
#include "vegcast/minicube/io.hpp"
#include "vegcast/minicube/synthetic.hpp"

namespace vegcast {

/// Multi-year NDVI observations of one location, used by the reference forecasters.
struct HistoryStack {
  std::string location_id;
  std::vector<int> days;  // grid days, strictly increasing
  Tensor<float> ndvi;     // [N, H, W]
  Tensor<float> valid;    // [N, H, W], 1 where clear-sky and finite

  int height() const { return ndvi.dim(1); }
  int width() const { return ndvi.dim(2); }

  void validate() const {
    require(ndvi.rank() == 3 && valid.shape() == ndvi.shape(), "history: ndvi/valid shape mismatch");
    require(static_cast<int>(days.size()) == ndvi.dim(0), "history: one timestamp per frame required");
    for (std::size_t i = 1; i < days.size(); ++i) require(days[i] > days[i - 1], "history: timestamps must increase");
    require(is_binary(valid), "history: validity mask must be binary");
  }
};

inline HistoryStack history_from_series(const LocationSeries& s) {
  HistoryStack hs;
  hs.location_id = s.location_id;
  hs.ndvi = s.ndvi;
  hs.valid = Tensor<float>(s.ndvi.shape());
  for (std::size_t i = 0; i < hs.valid.size(); ++i)
    hs.valid[i] = (s.quality_mask[i] == 1.0f && std::isfinite(s.ndvi[i])) ? 1.0f : 0.0f;
  for (int f = 0; f < s.ndvi.dim(0); ++f) hs.days.push_back(s.frame_gday(f));
  return hs;
}

/// One named subset: which location pool and which years its cubes are drawn from.
struct SplitRule {
  std::string name;
  std::string pool = "train";  // "train" or "heldout" locations
  std::vector<int> years;
  int count = 0;
};

struct DatasetConfig {
  SyntheticWorldParams world;
  int locations = 20;
  int heldout_locations = 0;
  std::vector<SplitRule> splits = {
      {"train", "train", {2017, 2018, 2019}, 200},
      {"val", "train", {2020}, 20},
      {"ood-t", "train", {2021, 2022}, 40},
  };
};

inline void to_json(nlohmann::json& j, const SplitRule& r) {
  j = {{"name", r.name}, {"pool", r.pool}, {"years", r.years}, {"count", r.count}};
}
inline void from_json(const nlohmann::json& j, SplitRule& r) {
  r.name = j.at("name").get<std::string>();
  r.pool = j.value("pool", std::string("train"));
  r.years = j.at("years").get<std::vector<int>>();
  r.count = j.at("count").get<int>();
}
inline void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = {{"world", c.world}, {"locations", c.locations}, {"heldout_locations", c.heldout_locations}, {"splits", c.splits}};
}
inline void from_json(const nlohmann::json& j, DatasetConfig& c) {
  DatasetConfig d;
  c.world = j.contains("world") ? j.at("world").get<SyntheticWorldParams>() : d.world;
  c.locations = j.value("locations", d.locations);
  c.heldout_locations = j.value("heldout_locations", d.heldout_locations);
  c.splits = j.contains("splits") ? j.at("splits").get<std::vector<SplitRule>>() : d.splits;
}

inline std::string location_name(const std::string& pool, int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%s%03d", pool == "train" ? "loc" : "hld", i);
  return buf;
}

/// Throws ContractError naming the offending rule.
inline void validate_splits(const DatasetConfig& c) {
  c.world.validate();
  require(c.locations > 0 && c.heldout_locations >= 0, "dataset: location counts must be positive");
  std::set<std::string> names;
  for (const auto& r : c.splits) {
    require(known_split(r.name), "dataset: unknown split '" + r.name + "'");
    require(names.insert(r.name).second, "dataset: split '" + r.name + "' listed twice");
    require(r.pool == "train" || r.pool == "heldout", "dataset: split '" + r.name + "' has unknown pool '" + r.pool + "'");
    require(r.count >= 0, "dataset: split '" + r.name + "' has a negative count");
    const int pool_size = r.pool == "train" ? c.locations : c.heldout_locations;
    for (int y : r.years)
      require(y >= c.world.first_year && y <= c.world.last_year,
              "dataset: split '" + r.name + "' uses year " + std::to_string(y) + " outside the simulated range");
    const long available = static_cast<long>(pool_size) * static_cast<long>(r.years.size()) * 4;
    require(r.count <= available, "dataset: split '" + r.name + "' requests " + std::to_string(r.count) +
                                      " cubes but only " + std::to_string(available) + " (location, year, season) windows exist");
  }
  for (std::size_t a = 0; a < c.splits.size(); ++a)
    for (std::size_t b = a + 1; b < c.splits.size(); ++b) {
      const auto& ra = c.splits[a];
      const auto& rb = c.splits[b];
      if (ra.pool != rb.pool || ra.count == 0 || rb.count == 0) continue;
      for (int y : ra.years)
        require(std::find(rb.years.begin(), rb.years.end(), y) == rb.years.end(),
                "dataset: split disjointness violated, '" + ra.name + "' and '" + rb.name + "' share pool '" + ra.pool +
                    "' and year " + std::to_string(y));
    }
  const SplitRule* train = nullptr;
  for (const auto& r : c.splits)
    if (r.name == "train") train = &r;
  auto shares_year = [&](const SplitRule& r) {
    for (int y : r.years)
      if (train && std::find(train->years.begin(), train->years.end(), y) != train->years.end()) return true;
    return false;
  };
  for (const auto& r : c.splits) {
    if (r.count == 0) continue;
    if (r.name == "train") require(r.pool == "train", "dataset: 'train' must draw from the train location pool");
    if (r.name == "ood-t") require(r.pool == "train" && !shares_year(r), "dataset: 'ood-t' must share locations but not years with train");
    if (r.name == "ood-s") {
      require(r.pool == "heldout", "dataset: 'ood-s' must use held-out locations");
      for (int y : r.years)
        require(train && std::find(train->years.begin(), train->years.end(), y) != train->years.end(),
                "dataset: 'ood-s' must use training years only");
    }
    if (r.name == "ood-st") require(r.pool == "heldout" && !shares_year(r), "dataset: 'ood-st' must share neither locations nor years with train");
  }
}

struct CubeEntry {
  std::string id, location_id, split, season;
  int year = 0;
};

/// Deterministic assignment of (location, year, season) windows to splits.
inline std::vector<CubeEntry> plan_cubes(const DatasetConfig& c) {
  validate_splits(c);
  std::vector<CubeEntry> out;
  for (std::size_t si = 0; si < c.splits.size(); ++si) {
    const auto& r = c.splits[si];
    const int pool_size = r.pool == "train" ? c.locations : c.heldout_locations;
    std::vector<CubeEntry> cand;
    for (int l = 0; l < pool_size; ++l)
      for (int y : r.years)
        for (const auto& s : seasons()) {
          const std::string loc = location_name(r.pool, l);
          cand.push_back({r.name + "_" + loc + "_" + std::to_string(y) + "_" + s.name, loc, r.name, s.name, y});
        }
    std::mt19937_64 rng(synth::location_seed(c.world.seed, 100000 + static_cast<int>(si)));
    std::shuffle(cand.begin(), cand.end(), rng);
    cand.resize(static_cast<std::size_t>(r.count));
    std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    out.insert(out.end(), cand.begin(), cand.end());
  }
  return out;
}

namespace detail {

inline void save_history(const HistoryStack& h, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::write_f32(dir / "ndvi.f32", h.ndvi);
  io::write_f32(dir / "valid.f32", h.valid);
  io::write_json(dir / "manifest.json", {{"format", "vegcast-history"},
                                         {"version", 1},
                                         {"location_id", h.location_id},
                                         {"dims", h.ndvi.shape()},
                                         {"days", h.days},
                                         {"byte_order", "little"},
                                         {"dtype", "float32"}});
}

inline HistoryStack load_history(const std::filesystem::path& dir) {
  const auto m = io::read_json(dir / "manifest.json", "history manifest");
  HistoryStack h;
  try {
    h.location_id = m.at("location_id").get<std::string>();
    h.days = m.at("days").get<std::vector<int>>();
    const Shape dims = m.at("dims").get<Shape>();
    if (dims.size() != 3) throw FormatError("history dims must be [N, H, W]");
    h.ndvi = Tensor<float>(dims, io::read_f32(dir / "ndvi.f32", shape_size(dims), "history variable 'ndvi'"));
    h.valid = Tensor<float>(dims, io::read_f32(dir / "valid.f32", shape_size(dims), "history variable 'valid'"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("history manifest in '" + dir.string() + "' is malformed: " + e.what());
  }
  try {
    h.validate();
  } catch (const ContractError& e) {
    throw FormatError(e.what());
  }
  return h;
}

}  // namespace detail

inline constexpr const char* kDatasetFormat = "vegcast-dataset";

/// Writes cubes/, history/, generator.json and splits.json under `dir`.
/// Refuses a non-empty directory unless `force` is set.
inline nlohmann::json generate_dataset(const DatasetConfig& config, const std::filesystem::path& dir, bool force) {
  namespace fs = std::filesystem;
  const auto plan = plan_cubes(config);
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    require(force, "output directory '" + dir.string() + "' is not empty (use --force to overwrite)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir / "cubes");
  fs::create_directories(dir / "history");
  const nlohmann::json cfg = config;
  const std::string hash = io::config_hash(cfg);
  io::write_json(dir / "generator.json", cfg);

  std::map<std::string, std::vector<const CubeEntry*>> by_location;
  for (const auto& e : plan) by_location[e.location_id].push_back(&e);
  nlohmann::json locations = {{"train", nlohmann::json::array()}, {"heldout", nlohmann::json::array()}};
  for (const std::string pool : {"train", "heldout"}) {
    const int n = pool == "train" ? config.locations : config.heldout_locations;
    for (int l = 0; l < n; ++l) {
      const std::string loc = location_name(pool, l);
      locations[pool].push_back(loc);
      const int index = pool == "train" ? l : 1000 + l;
      const LocationSeries series = simulate_location(config.world, index, loc);
      detail::save_history(history_from_series(series), dir / "history" / loc);
      for (const CubeEntry* e : by_location[loc])
        save_minicube(cut_minicube(series, config.world, e->year, e->season, e->split), dir / "cubes" / e->id);
    }
  }
  nlohmann::json cubes = nlohmann::json::array();
  nlohmann::json splits = nlohmann::json::object();
  for (const auto& r : config.splits) splits[r.name] = nlohmann::json::array();
  for (const auto& e : plan) {
    cubes.push_back({{"id", e.id}, {"location", e.location_id}, {"year", e.year}, {"season", e.season}, {"split", e.split}});
    splits[e.split].push_back(e.id);
  }
  nlohmann::json index = {{"format", kDatasetFormat}, {"version", 1},       {"config_hash", hash},
                          {"cubes", cubes},           {"splits", splits},   {"locations", locations}};
  io::write_json(dir / "splits.json", index);
  return index;
}

/// Read access to a generated (or externally prepared) dataset directory.
class Dataset {
 public:
  explicit Dataset(std::filesystem::path dir) : dir_(std::move(dir)) {
    index_ = io::read_json(dir_ / "splits.json", "dataset index");
    if (index_.value("format", std::string()) != kDatasetFormat)
      throw FormatError("'" + dir_.string() + "' is not a dataset directory");
  }

  const std::filesystem::path& path() const { return dir_; }
  std::string config_hash() const { return index_.value("config_hash", std::string()); }

  std::vector<std::string> cube_ids(const std::string& split) const {
    if (!index_.at("splits").contains(split)) return {};
    return index_.at("splits").at(split).get<std::vector<std::string>>();
  }

  Minicube load(const std::string& id) const { return load_minicube(dir_ / "cubes" / id); }

  std::vector<Minicube> load_split(const std::string& split) const {
    std::vector<Minicube> out;
    for (const auto& id : cube_ids(split)) out.push_back(load(id));
    return out;
  }

  const HistoryStack& history(const std::string& location_id) const {
    auto it = history_.find(location_id);
    if (it == history_.end()) it = history_.emplace(location_id, detail::load_history(dir_ / "history" / location_id)).first;
    return it->second;
  }

 private:
  std::filesystem::path dir_;
  nlohmann::json index_;
  mutable std::map<std::string, HistoryStack> history_;
};

}  // namespace vegcast
