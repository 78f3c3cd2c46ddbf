#pragma once

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "taskcl/episodes.hpp"
#include "taskcl/metalearn.hpp"

namespace taskcl::config {

// ---------------------------------------------------------------------------
// INI-style experiment files: [section] blocks of key = value lines,
// comments with '#' or ';'. One experiment = one file.

struct IniSection {
  std::string name;
  std::vector<std::pair<std::string, std::string>> entries;

  const std::string* find(const std::string& key) const {
    for (const auto& [k, v] : entries)
      if (k == key) return &v;
    return nullptr;
  }
};

struct IniFile {
  std::vector<IniSection> sections;

  const IniSection* find(const std::string& name) const {
    for (const auto& s : sections)
      if (s.name == name) return &s;
    return nullptr;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

inline IniFile parse_ini(std::istream& in) {
  IniFile file;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": unterminated section");
      IniSection s;
      s.name = detail::trim(t.substr(1, t.size() - 2));
      if (s.name.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty section name");
      file.sections.push_back(std::move(s));
      continue;
    }
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    if (file.sections.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": key outside any section");
    std::string key = detail::trim(t.substr(0, eq));
    std::string value = detail::trim(t.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    file.sections.back().entries.push_back({key, value});
  }
  return file;
}

inline IniFile parse_ini_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  return parse_ini(in);
}

// Typed reader over one section that records consumed keys, so unknown keys
// can be rejected afterwards.
class SectionReader {
 public:
  explicit SectionReader(const IniSection& s) : s_(s) {}

  std::string str(const std::string& key, const std::string& fallback) {
    used_.insert(key);
    const std::string* v = s_.find(key);
    return v ? *v : fallback;
  }

  std::string require(const std::string& key) {
    used_.insert(key);
    const std::string* v = s_.find(key);
    if (!v) throw ConfigError("config: [" + s_.name + "] missing required key '" + key + "'");
    return *v;
  }

  long integer(const std::string& key, long fallback) {
    std::string v = str(key, "");
    if (v.empty()) return fallback;
    try {
      std::size_t pos = 0;
      long out = std::stol(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("");
      return out;
    } catch (...) {
      throw ConfigError("config: [" + s_.name + "] key '" + key + "' is not an integer: " + v);
    }
  }

  double real(const std::string& key, double fallback) {
    std::string v = str(key, "");
    if (v.empty()) return fallback;
    try {
      std::size_t pos = 0;
      double out = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("");
      return out;
    } catch (...) {
      throw ConfigError("config: [" + s_.name + "] key '" + key + "' is not a number: " + v);
    }
  }

  bool boolean(const std::string& key, bool fallback) {
    std::string v = str(key, "");
    if (v.empty()) return fallback;
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config: [" + s_.name + "] key '" + key + "' is not a boolean: " + v);
  }

  void reject_unknown() const {
    for (const auto& [k, v] : s_.entries)
      if (!used_.count(k))
        throw ConfigError("config: [" + s_.name + "] unknown key '" + k + "'");
  }

 private:
  const IniSection& s_;
  std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// experiment configuration

struct RoutingConfig {
  int experts = 3;
  std::string scope = "head";    // full | head | bias | tail<k>
  std::string space = "";        // embedding | parameter; default depends on method
  int pool_tasks = 60;           // tasks sampled for clustering / fine-tuning
  int finetune_steps = 100;
  double finetune_lr = 0.05;
};

struct ExperimentConfig {
  std::string method = "maml";
  std::uint64_t seed = 0;
  std::string out_dir = "runs/out";

  metalearn::TrainConfig train;
  RoutingConfig routing;

  int eval_episodes = 200;

  // model sizing
  int embed_dim = 64;
  int conv_channels = 32;
  int conv_blocks = 4;
  int mlp_hidden = 64;
  int film_hidden = 32;
  bool label_conditioned_encoder = false;

  std::vector<episodes::DomainConfig> domain_configs;
  std::vector<double> domain_weights;  // empty = uniform
};

inline ExperimentConfig parse_experiment(const IniFile& ini) {
  ExperimentConfig cfg;
  std::set<std::string> seen_sections;

  for (const auto& section : ini.sections) {
    if (seen_sections.count(section.name) && section.name.rfind("domain.", 0) != 0)
      throw ConfigError("config: duplicate section [" + section.name + "]");
    seen_sections.insert(section.name);

    SectionReader r(section);
    if (section.name == "experiment") {
      cfg.method = r.str("method", cfg.method);
      cfg.seed = static_cast<std::uint64_t>(r.integer("seed", 0));
      cfg.out_dir = r.str("out", cfg.out_dir);
    } else if (section.name == "episode") {
      cfg.train.ways = static_cast<int>(r.integer("ways", cfg.train.ways));
      cfg.train.shots = static_cast<int>(r.integer("shots", cfg.train.shots));
      cfg.train.query_per_class = static_cast<int>(r.integer("query", cfg.train.query_per_class));
    } else if (section.name == "train") {
      cfg.train.steps = static_cast<int>(r.integer("steps", cfg.train.steps));
      cfg.train.batch_size = static_cast<int>(r.integer("batch", cfg.train.batch_size));
      cfg.train.outer_lr = r.real("outer_lr", cfg.train.outer_lr);
      cfg.train.outer_opt = r.str("outer_opt", cfg.train.outer_opt);
      cfg.train.inner_lr = r.real("inner_lr", cfg.train.inner_lr);
      cfg.train.inner_steps = static_cast<int>(r.integer("inner_steps", cfg.train.inner_steps));
      cfg.train.second_order = r.boolean("second_order", cfg.train.second_order);
      cfg.train.loss.lambda_con = r.real("lambda", cfg.train.loss.lambda_con);
      cfg.train.loss.temperature = r.real("temperature", cfg.train.loss.temperature);
      cfg.train.loss.entropy_weight = r.real("entropy_weight", cfg.train.loss.entropy_weight);
      cfg.train.loss.cluster_count = static_cast<int>(r.integer("clusters", cfg.train.loss.cluster_count));
      cfg.train.embedding_mode = metalearn::parse_embedding_mode(
          r.str("embedding", metalearn::embedding_mode_name(cfg.train.embedding_mode)));
      cfg.train.divergence_threshold = r.real("divergence_threshold", cfg.train.divergence_threshold);
    } else if (section.name == "augment") {
      cfg.train.augment = taskaug::AugmentSpec::parse(r.str("strategy", "none"));
      cfg.train.augment.augment_query = r.boolean("augment_query", false);
      long m = r.integer("mix_count", -1);
      cfg.train.augment.mix_count = static_cast<int>(m);
      cfg.label_conditioned_encoder = r.boolean("label_conditioned_encoder",
                                                cfg.train.augment.use_relabel);
    } else if (section.name == "model") {
      cfg.embed_dim = static_cast<int>(r.integer("embed_dim", cfg.embed_dim));
      cfg.conv_channels = static_cast<int>(r.integer("conv_channels", cfg.conv_channels));
      cfg.conv_blocks = static_cast<int>(r.integer("conv_blocks", cfg.conv_blocks));
      cfg.mlp_hidden = static_cast<int>(r.integer("mlp_hidden", cfg.mlp_hidden));
      cfg.film_hidden = static_cast<int>(r.integer("film_hidden", cfg.film_hidden));
    } else if (section.name == "routing") {
      cfg.routing.experts = static_cast<int>(r.integer("experts", cfg.routing.experts));
      cfg.routing.scope = r.str("scope", cfg.routing.scope);
      cfg.routing.space = r.str("space", cfg.routing.space);
      cfg.routing.pool_tasks = static_cast<int>(r.integer("pool_tasks", cfg.routing.pool_tasks));
      cfg.routing.finetune_steps = static_cast<int>(r.integer("finetune_steps", cfg.routing.finetune_steps));
      cfg.routing.finetune_lr = r.real("finetune_lr", cfg.routing.finetune_lr);
    } else if (section.name == "eval") {
      cfg.eval_episodes = static_cast<int>(r.integer("episodes", cfg.eval_episodes));
    } else if (section.name.rfind("domain.", 0) == 0) {
      episodes::DomainConfig d;
      d.name = section.name.substr(7);
      if (d.name.empty()) throw ConfigError("config: domain section needs a name");
      d.kind = r.require("kind");
      d.class_count = static_cast<int>(r.integer("classes", d.class_count));
      d.dim = static_cast<int>(r.integer("dim", d.dim));
      d.sigma = r.real("sigma", d.sigma);
      d.texture = r.str("texture", d.texture);
      d.image_noise = r.real("image_noise", d.image_noise);
      d.image_size = static_cast<int>(r.integer("image_size", d.image_size));
      d.root = r.str("root", d.root);
      double w = r.real("weight", -1.0);
      cfg.domain_configs.push_back(std::move(d));
      cfg.domain_weights.push_back(w);
    } else {
      throw ConfigError("config: unknown section [" + section.name + "]");
    }
    r.reject_unknown();
  }

  if (cfg.domain_configs.empty()) throw ConfigError("config: no [domain.*] sections");
  bool any_w = false, all_w = true;
  for (double w : cfg.domain_weights) {
    if (w >= 0.0)
      any_w = true;
    else
      all_w = false;
  }
  if (any_w && !all_w) throw ConfigError("config: either all domains carry a weight or none");
  if (!all_w) cfg.domain_weights.clear();
  return cfg;
}

inline ExperimentConfig parse_experiment_file(const std::string& path) {
  return parse_experiment(parse_ini_file(path));
}

// ---------------------------------------------------------------------------
// derived objects

inline episodes::MixtureSpec build_mixture(const ExperimentConfig& cfg) {
  std::vector<episodes::DomainSpec> domains;
  for (const auto& dc : cfg.domain_configs)
    domains.push_back(episodes::build_domain(dc, derive_seed(cfg.seed, "domain:" + dc.name)));
  if (cfg.domain_weights.empty()) return episodes::uniform_mixture(std::move(domains));
  return episodes::make_mixture(std::move(domains), cfg.domain_weights);
}

inline models::InputKind input_kind_of(const ExperimentConfig& cfg) {
  bool image = false, vector_in = false;
  for (const auto& d : cfg.domain_configs)
    (d.kind == "synthetic-gaussian" ? vector_in : image) = true;
  if (image && vector_in)
    throw ConfigError("config: mixtures must be all-vector or all-image domains");
  return image ? models::InputKind::Image : models::InputKind::Vector;
}

inline metalearn::ModelSpec build_model_spec(const ExperimentConfig& cfg,
                                             const metalearn::Method& method) {
  metalearn::ModelSpec ms;
  ms.input = input_kind_of(cfg);
  if (ms.input == models::InputKind::Vector) {
    ms.input_dim = cfg.domain_configs[0].dim;
    for (const auto& d : cfg.domain_configs)
      if (d.dim != ms.input_dim) throw ConfigError("config: all vector domains must share dim");
  }
  ms.conv_channels = cfg.conv_channels;
  ms.conv_blocks = cfg.conv_blocks;
  ms.mlp_hidden = cfg.mlp_hidden;
  ms.ways = cfg.train.ways;
  ms.embed_dim = cfg.embed_dim;
  ms.embedding_mode = cfg.train.embedding_mode;
  ms.film = method.family == metalearn::Family::Mmaml;
  ms.film_hidden = cfg.film_hidden;
  ms.label_conditioned_encoder = cfg.label_conditioned_encoder;
  if (method.family == metalearn::Family::CcFilm) {
    int c = cfg.train.loss.cluster_count > 0 ? cfg.train.loss.cluster_count : cfg.routing.experts;
    ms.cluster_count = c;
    ms.film_experts = c;
  }
  if (method.family == metalearn::Family::Mmaml && method.sup == metalearn::Supervision::Supervised)
    ms.domain_count = static_cast<int>(cfg.domain_configs.size());
  return ms;
}

}  // namespace taskcl::config
