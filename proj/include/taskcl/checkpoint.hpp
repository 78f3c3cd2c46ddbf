#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "taskcl/metalearn.hpp"

namespace taskcl::checkpoint {

using nlohmann::json;

// Checkpoint layout: <dir>/manifest.json plus one raw little-endian binary
// per named array. Training runs in float64; dtype "f8" round-trips exactly,
// "f4" is available where space matters.

namespace detail {

inline std::string sanitize(const std::string& name) {
  std::string out = name;
  for (char& c : out)
    if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
  return out;
}

inline void write_array(const std::string& path, const Tensor& t, const std::string& dtype) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("checkpoint: cannot write " + path);
  if (dtype == "f8") {
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * 8));
  } else if (dtype == "f4") {
    std::vector<float> buf(static_cast<std::size_t>(t.size()));
    for (long i = 0; i < t.size(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(t[i]);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(t.size() * 4));
  } else {
    throw ConfigError("checkpoint: unknown dtype " + dtype);
  }
}

inline Tensor read_array(const std::string& path, const std::vector<int>& shape,
                         const std::string& dtype) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("checkpoint: cannot read " + path);
  Tensor t(shape);
  if (dtype == "f8") {
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * 8));
  } else if (dtype == "f4") {
    std::vector<float> buf(static_cast<std::size_t>(t.size()));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(t.size() * 4));
    for (long i = 0; i < t.size(); ++i) t[i] = buf[static_cast<std::size_t>(i)];
  } else {
    throw ConfigError("checkpoint: unknown dtype " + dtype);
  }
  if (!in) throw ConfigError("checkpoint: truncated array file " + path);
  return t;
}

}  // namespace detail

inline void save_params(const std::string& dir, const models::ParamList& params,
                        const std::map<std::string, std::string>& meta,
                        const std::string& dtype = "f8") {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "taskcl-checkpoint-1";
  manifest["byte_order"] = "little-endian";
  manifest["meta"] = meta;
  json arrays = json::array();
  int idx = 0;
  for (const auto& [name, v] : params.items) {
    std::string file = std::to_string(idx++) + "_" + detail::sanitize(name) + ".bin";
    detail::write_array((fs::path(dir) / file).string(), v.value(), dtype);
    json a;
    a["name"] = name;
    a["file"] = file;
    a["dtype"] = dtype;
    a["shape"] = v.value().shape();
    arrays.push_back(a);
  }
  manifest["arrays"] = arrays;
  std::ofstream out(fs::path(dir) / "manifest.json");
  out << manifest.dump(2) << "\n";
}

struct LoadedParams {
  std::vector<std::pair<std::string, Tensor>> arrays;
  std::map<std::string, std::string> meta;
};

inline LoadedParams load_params(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw ConfigError("checkpoint: missing manifest in " + dir);
  json manifest = json::parse(in);
  LoadedParams out;
  if (manifest.contains("meta"))
    out.meta = manifest["meta"].get<std::map<std::string, std::string>>();
  for (const auto& a : manifest["arrays"]) {
    std::vector<int> shape = a["shape"].get<std::vector<int>>();
    out.arrays.push_back({a["name"].get<std::string>(),
                          detail::read_array((fs::path(dir) / a["file"].get<std::string>()).string(),
                                             shape, a["dtype"].get<std::string>())});
  }
  return out;
}

inline void assign_params(models::ParamList& params, const LoadedParams& loaded) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : loaded.arrays) by_name[name] = &t;
  for (auto& [name, v] : params.items) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ConfigError("checkpoint: missing array " + name);
    if (!(it->second->shape() == v.value().shape()))
      throw ConfigError("checkpoint: shape mismatch for " + name);
    v.value_mut() = *it->second;
  }
}

// ---------------------------------------------------------------------------
// model-level save/load (ModelSpec serialized into the manifest meta)

inline std::map<std::string, std::string> spec_to_meta(const metalearn::ModelSpec& s) {
  std::map<std::string, std::string> m;
  m["input"] = s.input == models::InputKind::Image ? "image" : "vector";
  m["input_dim"] = std::to_string(s.input_dim);
  m["input_channels"] = std::to_string(s.input_channels);
  m["conv_channels"] = std::to_string(s.conv_channels);
  m["conv_blocks"] = std::to_string(s.conv_blocks);
  m["mlp_hidden"] = std::to_string(s.mlp_hidden);
  m["ways"] = std::to_string(s.ways);
  m["embed_dim"] = std::to_string(s.embed_dim);
  m["embedding_mode"] = metalearn::embedding_mode_name(s.embedding_mode);
  std::string proj;
  for (std::size_t i = 0; i < s.projection_hidden.size(); ++i)
    proj += (i ? "," : "") + std::to_string(s.projection_hidden[i]);
  m["projection_hidden"] = proj;
  m["unit_normalize"] = s.unit_normalize ? "1" : "0";
  m["film"] = s.film ? "1" : "0";
  m["film_hidden"] = std::to_string(s.film_hidden);
  m["label_conditioned_encoder"] = s.label_conditioned_encoder ? "1" : "0";
  m["cluster_count"] = std::to_string(s.cluster_count);
  m["film_experts"] = std::to_string(s.film_experts);
  m["domain_count"] = std::to_string(s.domain_count);
  return m;
}

inline metalearn::ModelSpec spec_from_meta(const std::map<std::string, std::string>& m) {
  metalearn::ModelSpec s;
  auto get = [&m](const std::string& k) {
    auto it = m.find(k);
    if (it == m.end()) throw ConfigError("checkpoint: manifest meta missing key " + k);
    return it->second;
  };
  s.input = get("input") == "image" ? models::InputKind::Image : models::InputKind::Vector;
  s.input_dim = std::stoi(get("input_dim"));
  s.input_channels = std::stoi(get("input_channels"));
  s.conv_channels = std::stoi(get("conv_channels"));
  s.conv_blocks = std::stoi(get("conv_blocks"));
  s.mlp_hidden = std::stoi(get("mlp_hidden"));
  s.ways = std::stoi(get("ways"));
  s.embed_dim = std::stoi(get("embed_dim"));
  s.embedding_mode = metalearn::parse_embedding_mode(get("embedding_mode"));
  s.projection_hidden.clear();
  std::stringstream ss(get("projection_hidden"));
  std::string tok;
  while (std::getline(ss, tok, ',')) s.projection_hidden.push_back(std::stoi(tok));
  s.unit_normalize = get("unit_normalize") == "1";
  s.film = get("film") == "1";
  s.film_hidden = std::stoi(get("film_hidden"));
  s.label_conditioned_encoder = get("label_conditioned_encoder") == "1";
  s.cluster_count = std::stoi(get("cluster_count"));
  s.film_experts = std::stoi(get("film_experts"));
  s.domain_count = std::stoi(get("domain_count"));
  return s;
}

inline void save_model(const std::string& dir, const metalearn::Model& model,
                       std::map<std::string, std::string> extra_meta = {},
                       const std::string& dtype = "f8") {
  auto meta = spec_to_meta(model.spec);
  for (auto& [k, v] : extra_meta) meta["x_" + k] = v;
  models::ParamList params = model.named_params();
  save_params(dir, params, meta, dtype);
}

inline metalearn::Model load_model(const std::string& dir) {
  LoadedParams loaded = load_params(dir);
  metalearn::Model model = metalearn::Model::init(spec_from_meta(loaded.meta), 0);
  models::ParamList params = model.named_params();
  assign_params(params, loaded);
  return model;
}

}  // namespace taskcl::checkpoint
