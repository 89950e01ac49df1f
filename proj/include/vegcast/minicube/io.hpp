#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vegcast/core/binary.hpp"
#include "vegcast/minicube/minicube.hpp"

namespace vegcast {

inline constexpr const char* kMinicubeFormat = "vegcast-minicube";
inline constexpr int kMinicubeFormatVersion = 1;

namespace detail {

struct CubeField {
  const char* name;
  Tensor<float> Minicube::*member;
};

inline const std::vector<CubeField>& cube_fields() {
  static const std::vector<CubeField> f = {
      {"sat_red", &Minicube::sat_red},           {"sat_nir", &Minicube::sat_nir},
      {"ndvi", &Minicube::ndvi},                 {"quality_mask", &Minicube::quality_mask},
      {"landcover_mask", &Minicube::landcover_mask}, {"landcover_class", &Minicube::landcover_class},
      {"weather", &Minicube::weather},           {"elevation", &Minicube::elevation}};
  return f;
}

}  // namespace detail

/// Writes `cube` as <dir>/manifest.json plus one little-endian float32 file per variable.
inline void save_minicube(const Minicube& cube, const std::filesystem::path& dir) {
  validate(cube);
  std::filesystem::create_directories(dir);
  nlohmann::json vars = nlohmann::json::array();
  for (const auto& f : detail::cube_fields()) {
    const Tensor<float>& t = cube.*(f.member);
    const std::string file = std::string(f.name) + ".f32";
    io::write_f32(dir / file, t);
    vars.push_back({{"name", f.name}, {"shape", t.shape()}, {"file", file}});
  }
  nlohmann::json m = {{"format", kMinicubeFormat},
                      {"version", kMinicubeFormatVersion},
                      {"id", cube.id},
                      {"location_id", cube.location_id},
                      {"split", cube.split_tag},
                      {"season", cube.season},
                      {"year", cube.year},
                      {"start_slot", cube.start_slot},
                      {"context_length", cube.context_length},
                      {"target_length", cube.target_length},
                      {"dims", {cube.frames(), cube.height(), cube.width()}},
                      {"dtype", "float32"},
                      {"byte_order", "little"},
                      {"time_axis", cube.time_axis},
                      {"weather_variables", cube.weather_variables},
                      {"variables", vars}};
  io::write_json(dir / "manifest.json", m);
}

inline Minicube load_minicube(const std::filesystem::path& dir) {
  const nlohmann::json m = io::read_json(dir / "manifest.json", "minicube manifest");
  Minicube c;
  try {
    if (m.at("format").get<std::string>() != kMinicubeFormat) throw FormatError("not a minicube manifest");
    if (m.at("version").get<int>() != kMinicubeFormatVersion) throw FormatError("unsupported minicube version");
    if (m.at("dtype").get<std::string>() != "float32" || m.at("byte_order").get<std::string>() != "little")
      throw FormatError("minicube payloads must be little-endian float32");
    c.id = m.at("id").get<std::string>();
    c.location_id = m.at("location_id").get<std::string>();
    c.split_tag = m.at("split").get<std::string>();
    c.season = m.value("season", std::string());
    c.year = m.at("year").get<int>();
    c.start_slot = m.at("start_slot").get<int>();
    c.context_length = m.at("context_length").get<int>();
    c.target_length = m.at("target_length").get<int>();
    c.time_axis = m.at("time_axis").get<std::vector<std::string>>();
    c.weather_variables = m.at("weather_variables").get<std::vector<std::string>>();
    const auto dims = m.at("dims").get<std::vector<int>>();
    if (dims.size() != 3 || dims[0] != c.frames())
      throw FormatError("manifest dims do not match context+target length");
    for (const auto& f : detail::cube_fields()) {
      const nlohmann::json* entry = nullptr;
      for (const auto& v : m.at("variables"))
        if (v.at("name").get<std::string>() == f.name) entry = &v;
      if (!entry) throw FormatError("variable '" + std::string(f.name) + "' missing from manifest");
      const Shape shape = entry->at("shape").get<Shape>();
      for (int d : shape)
        if (d < 0) throw FormatError("variable '" + std::string(f.name) + "' has a negative dimension");
      auto values = io::read_f32(dir / entry->at("file").get<std::string>(), shape_size(shape),
                                 "variable '" + std::string(f.name) + "'");
      c.*(f.member) = Tensor<float>(shape, std::move(values));
    }
    if (Shape(dims.begin(), dims.end()) != c.ndvi.shape())
      throw FormatError("manifest dims " + shape_string(Shape(dims.begin(), dims.end())) +
                        " disagree with variable 'ndvi' " + shape_string(c.ndvi.shape()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("minicube manifest '" + (dir / "manifest.json").string() + "' is malformed: " + e.what());
  }
  validate(c);
  return c;
}

}  // namespace vegcast
