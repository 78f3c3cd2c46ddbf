#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "taskcl/rng.hpp"
#include "taskcl/tensor.hpp"

namespace taskcl::episodes {

// ---------------------------------------------------------------------------
// domain hiding

/**
 * While a DomainBlindScope is alive on this thread, reading a task's hidden
 * domain id throws. Training paths run inside the scope; evaluation and
 * reporting run outside it.
 */
class DomainBlindScope {
 public:
  DomainBlindScope() { ++depth(); }
  ~DomainBlindScope() { --depth(); }
  DomainBlindScope(const DomainBlindScope&) = delete;
  DomainBlindScope& operator=(const DomainBlindScope&) = delete;

  static bool active() { return depth() > 0; }

 private:
  static int& depth() {
    thread_local int d = 0;
    return d;
  }
};

// Lifts domain blindness for a supervised method that assumes task sources.
class DomainRevealScope {
 public:
  DomainRevealScope() { ++depth(); }
  ~DomainRevealScope() { --depth(); }

  static bool active() { return depth() > 0; }

 private:
  static int& depth() {
    thread_local int d = 0;
    return d;
  }
};

// ---------------------------------------------------------------------------
// data model

struct Sample {
  std::uint64_t id = 0;
  Tensor data;  // [dim] for vector domains, [C,H,W] for image domains
};

struct LabeledSample {
  Sample sample;
  int label = 0;
};

class Task {
 public:
  std::vector<LabeledSample> support;
  std::vector<LabeledSample> query;
  int ways = 0;
  int shots = 0;
  int query_per_class = 0;
  std::uint64_t origin_id = 0;

  // Ground-truth domain ordinal, for evaluation and reporting only.
  int domain_id() const {
    if (DomainBlindScope::active() && !DomainRevealScope::active())
      throw DomainAccessError("Task::domain_id read inside a domain-blind training section");
    return domain_id_;
  }

  void set_domain_id(int id) { domain_id_ = id; }

 private:
  int domain_id_ = -1;
};

struct TaskBatch {
  std::vector<Task> tasks;
  std::uint64_t batch_seed = 0;
};

enum class DomainKind { SyntheticGaussian, SyntheticImage, ImageFolder };

// Plain-field description of one domain; the config module fills this from
// the experiment file.
struct DomainConfig {
  std::string name;
  std::string kind;           // synthetic-gaussian | synthetic-image | image-folder
  int class_count = 0;        // ignored for image-folder (derived from dirs)
  int dim = 16;               // synthetic-gaussian
  double sigma = 0.1;         // synthetic-gaussian noise scale
  std::string texture;        // synthetic-image: stripes | checker | blobs
  double texture_scale = 1.0;  // scales the per-class parameter ladder
  double image_noise = 0.04;  // synthetic-image pixel noise
  int image_size = 28;
  std::string root;           // image-folder
};

struct DomainSpec {
  std::string name;
  DomainKind kind = DomainKind::SyntheticGaussian;
  int class_count = 0;
  std::uint64_t seed = 0;
  int ordinal = 0;  // position within the mixture

  // synthetic-gaussian
  int dim = 0;
  double sigma = 0.1;
  std::vector<std::vector<double>> prototypes;  // per-class parameter vectors

  // synthetic-image
  std::string texture;
  double texture_scale = 1.0;
  double image_noise = 0.0;
  int image_size = 0;
  std::vector<std::vector<double>> class_params;

  // image-folder
  std::string root;
  std::vector<std::string> class_names;
  std::vector<std::vector<std::string>> class_files;

  std::uint64_t identity_hash() const { return hash_mix(seed, hash_str(name)); }

  int per_class_pool() const {
    if (kind != DomainKind::ImageFolder) return 1 << 20;  // procedural, effectively unbounded
    int m = -1;
    for (const auto& files : class_files) {
      int n = static_cast<int>(files.size());
      if (m < 0 || n < m) m = n;
    }
    return m < 0 ? 0 : m;
  }
};

struct MixtureSpec {
  std::vector<DomainSpec> domains;
  std::vector<double> weights;

  void validate() const {
    if (domains.empty()) throw ConfigError("MixtureSpec: empty mixture");
    if (weights.size() != domains.size())
      throw ConfigError("MixtureSpec: weights and domains length mismatch");
    double s = 0.0;
    for (double w : weights) {
      if (w < 0.0) throw ConfigError("MixtureSpec: negative weight");
      s += w;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("MixtureSpec: weights must sum to 1");
  }
};

inline MixtureSpec make_mixture(std::vector<DomainSpec> domains, std::vector<double> weights) {
  MixtureSpec m;
  m.domains = std::move(domains);
  m.weights = std::move(weights);
  for (std::size_t i = 0; i < m.domains.size(); ++i) m.domains[i].ordinal = static_cast<int>(i);
  m.validate();
  return m;
}

inline MixtureSpec uniform_mixture(std::vector<DomainSpec> domains) {
  std::vector<double> w(domains.size(), 1.0 / static_cast<double>(domains.size()));
  return make_mixture(std::move(domains), std::move(w));
}

// ---------------------------------------------------------------------------
// PGM loading (image-folder domains)

namespace detail {

inline Tensor load_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("load_pgm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P2") throw ConfigError("load_pgm: unsupported format in " + path);
  auto next_int = [&in, &path]() {
    // skip whitespace and '#' comment lines
    int c = in.peek();
    while (c == '#' || std::isspace(c)) {
      if (c == '#')
        in.ignore(1 << 16, '\n');
      else
        in.get();
      c = in.peek();
    }
    long v = -1;
    in >> v;
    if (v < 0) throw ConfigError("load_pgm: malformed header in " + path);
    return static_cast<int>(v);
  };
  int w = next_int();
  int h = next_int();
  int maxval = next_int();
  if (maxval <= 0 || maxval > 255) throw ConfigError("load_pgm: unsupported maxval in " + path);
  Tensor img({1, h, w});
  if (magic == "P5") {
    in.get();  // single whitespace after maxval
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!in) throw ConfigError("load_pgm: truncated pixel data in " + path);
    for (long i = 0; i < img.size(); ++i) img[i] = buf[static_cast<std::size_t>(i)] / double(maxval);
  } else {
    for (long i = 0; i < img.size(); ++i) {
      int v;
      if (!(in >> v)) throw ConfigError("load_pgm: truncated pixel data in " + path);
      img[i] = v / double(maxval);
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// procedural texture rendering

inline Tensor render_synthetic_image(const DomainSpec& d, int cls, std::uint64_t content_seed) {
  Rng rng(content_seed);
  int S = d.image_size;
  Tensor img({1, S, S});
  const std::vector<double>& p = d.class_params[static_cast<std::size_t>(cls)];

  if (d.texture == "stripes") {
    // p = {frequency, angle}; instance nuisance: phase and slight angle jitter
    double freq = p[0], angle = p[1];
    double phase = rng.uniform(0.0, 2.0 * M_PI);
    double aj = angle + rng.uniform(-0.06, 0.06);
    double ca = std::cos(aj), sa = std::sin(aj);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        double t = (x * ca + y * sa) / S;
        img[static_cast<long>(y) * S + x] = 0.5 + 0.42 * std::sin(2.0 * M_PI * freq * t + phase);
      }
  } else if (d.texture == "checker") {
    // p = {cell size, softness}; instance nuisance: grid offset
    double cell = p[0], soft = p[1];
    double dx = rng.uniform(0.0, 2.0 * cell), dy = rng.uniform(0.0, 2.0 * cell);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        double s = std::sin(M_PI * (x + dx) / cell) * std::sin(M_PI * (y + dy) / cell);
        img[static_cast<long>(y) * S + x] = 0.5 + 0.42 * std::tanh(soft * s);
      }
  } else if (d.texture == "blobs") {
    // p = {bump count, ring radius, bump width}; nuisance: ring rotation + center jitter
    int count = static_cast<int>(p[0]);
    double radius = p[1], width = p[2];
    double rot = rng.uniform(0.0, 2.0 * M_PI);
    double cx = S / 2.0 + rng.uniform(-2.0, 2.0);
    double cy = S / 2.0 + rng.uniform(-2.0, 2.0);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        double v = 0.0;
        for (int b = 0; b < count; ++b) {
          double ang = rot + 2.0 * M_PI * b / count;
          double bx = cx + radius * std::cos(ang);
          double by = cy + radius * std::sin(ang);
          double d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
          v += std::exp(-d2 / (2.0 * width * width));
        }
        img[static_cast<long>(y) * S + x] = std::min(1.0, v);
      }
  } else {
    throw ConfigError("render_synthetic_image: unknown texture '" + d.texture + "'");
  }

  // per-instance global contrast/offset nuisance, then pixel noise
  double contrast = rng.uniform(0.45, 1.0);
  double offset = rng.uniform(-0.15, 0.15);
  for (long i = 0; i < img.size(); ++i)
    img[i] = std::clamp(0.5 + (img[i] - 0.5) * contrast + offset, 0.0, 1.0);
  if (d.image_noise > 0.0)
    for (long i = 0; i < img.size(); ++i)
      img[i] = std::clamp(img[i] + d.image_noise * rng.normal(), 0.0, 1.0);
  return img;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// operations

/** Builds a fully deterministic DomainSpec from a configuration and a seed. */
inline DomainSpec build_domain(const DomainConfig& cfg, std::uint64_t seed) {
  DomainSpec d;
  d.name = cfg.name.empty() ? cfg.kind : cfg.name;
  d.seed = seed;

  if (cfg.kind == "synthetic-gaussian") {
    d.kind = DomainKind::SyntheticGaussian;
    d.class_count = cfg.class_count;
    d.dim = cfg.dim;
    d.sigma = cfg.sigma;
    if (d.class_count < 2) throw ConfigError("build_domain: class_count must be >= 2");
    if (d.dim <= 0) throw ConfigError("build_domain: dim must be positive");
    for (int c = 0; c < d.class_count; ++c) {
      Rng rng(derive_seed(seed, "gaussian-prototype", static_cast<std::uint64_t>(c)));
      std::vector<double> proto(static_cast<std::size_t>(d.dim));
      for (double& v : proto) v = rng.uniform(-1.0, 1.0);
      d.prototypes.push_back(std::move(proto));
    }
  } else if (cfg.kind == "synthetic-image") {
    d.kind = DomainKind::SyntheticImage;
    d.class_count = cfg.class_count;
    d.texture = cfg.texture;
    d.texture_scale = cfg.texture_scale;
    d.image_noise = cfg.image_noise;
    d.image_size = cfg.image_size;
    if (d.class_count < 2) throw ConfigError("build_domain: class_count must be >= 2");
    if (d.image_size < 8) throw ConfigError("build_domain: image_size too small");
    for (int c = 0; c < d.class_count; ++c) {
      Rng rng(derive_seed(seed, "image-class", static_cast<std::uint64_t>(c)));
      std::vector<double> p;
      double s = d.texture_scale;
      if (d.texture == "stripes") {
        p = {s * (1.5 + 0.8 * c) + rng.uniform(-0.15, 0.15),
             M_PI * (0.13 + 0.31 * c) + rng.uniform(-0.05, 0.05)};
      } else if (d.texture == "checker") {
        p = {(3.0 + 1.5 * (c % 6)) / s + rng.uniform(-0.3, 0.3), 2.0 + (c / 6) * 2.0};
      } else if (d.texture == "blobs") {
        p = {double(2 + c % 5), s * (5.0 + 1.6 * ((c / 5) % 3)) + rng.uniform(-0.4, 0.4),
             1.8 + 0.35 * (c % 3)};
      } else {
        throw ConfigError("build_domain: unknown texture '" + d.texture + "'");
      }
      d.class_params.push_back(std::move(p));
    }
    d.prototypes = d.class_params;
  } else if (cfg.kind == "image-folder") {
    d.kind = DomainKind::ImageFolder;
    d.root = cfg.root;
    namespace fs = std::filesystem;
    if (!fs::is_directory(d.root)) throw ConfigError("build_domain: missing image folder " + d.root);
    std::vector<std::string> dirs;
    for (const auto& e : fs::directory_iterator(d.root))
      if (e.is_directory()) dirs.push_back(e.path().filename().string());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.size() < 2)
      throw ConfigError("build_domain: image folder needs at least 2 class directories");
    for (const std::string& cls : dirs) {
      std::vector<std::string> files;
      for (const auto& e : fs::directory_iterator(fs::path(d.root) / cls))
        if (e.is_regular_file()) files.push_back(e.path().string());
      std::sort(files.begin(), files.end());
      d.class_names.push_back(cls);
      d.class_files.push_back(std::move(files));
    }
    d.class_count = static_cast<int>(d.class_names.size());
  } else {
    throw ConfigError("build_domain: unknown kind '" + cfg.kind + "'");
  }
  return d;
}

namespace detail {

inline Sample draw_sample(const DomainSpec& d, int cls, std::uint64_t content_seed) {
  Sample s;
  s.id = hash_mix(content_seed, 0x5a5a5a5aULL);
  switch (d.kind) {
    case DomainKind::SyntheticGaussian: {
      Rng rng(content_seed);
      Tensor x({d.dim});
      const auto& proto = d.prototypes[static_cast<std::size_t>(cls)];
      for (int i = 0; i < d.dim; ++i) x[i] = proto[static_cast<std::size_t>(i)] + d.sigma * rng.normal();
      s.data = std::move(x);
      break;
    }
    case DomainKind::SyntheticImage:
      s.data = render_synthetic_image(d, cls, content_seed);
      break;
    case DomainKind::ImageFolder:
      throw ConfigError("draw_sample: image-folder samples are indexed, not procedural");
  }
  return s;
}

}  // namespace detail

/**
 * Samples one N-way K-shot episode. Pure function of (domain, shape, seed):
 * the same arguments reproduce the task bit-exactly, including sample ids.
 */
inline Task sample_episode(const DomainSpec& domain, int ways, int shots, int query_per_class,
                           std::uint64_t seed) {
  if (ways < 2) throw ConfigError("sample_episode: ways must be >= 2");
  if (shots < 1 || query_per_class < 1)
    throw ConfigError("sample_episode: shots and query_per_class must be positive");
  if (domain.class_count < ways)
    throw ConfigError("sample_episode: domain has " + std::to_string(domain.class_count) +
                      " classes, need " + std::to_string(ways));
  if (domain.per_class_pool() < shots + query_per_class)
    throw ConfigError("sample_episode: per-class pool smaller than K + q");

  std::uint64_t s0 = hash_mix(domain.identity_hash(), seed);
  Rng rng(s0);

  std::vector<int> chosen = rng.sample_without_replacement(domain.class_count, ways);
  std::sort(chosen.begin(), chosen.end());
  std::vector<int> labels(static_cast<std::size_t>(ways));
  for (int i = 0; i < ways; ++i) labels[static_cast<std::size_t>(i)] = i;
  rng.shuffle(labels);  // label remap is a function of the seed only

  Task t;
  t.ways = ways;
  t.shots = shots;
  t.query_per_class = query_per_class;
  t.origin_id = derive_seed(s0, "task-origin");
  t.set_domain_id(domain.ordinal);

  for (int i = 0; i < ways; ++i) {
    int cls = chosen[static_cast<std::size_t>(i)];
    int label = labels[static_cast<std::size_t>(i)];
    int need = shots + query_per_class;

    std::vector<Sample> drawn;
    if (domain.kind == DomainKind::ImageFolder) {
      const auto& files = domain.class_files[static_cast<std::size_t>(cls)];
      Rng crng(derive_seed(s0, "class-files", static_cast<std::uint64_t>(cls)));
      std::vector<int> idx = crng.sample_without_replacement(static_cast<int>(files.size()), need);
      for (int j = 0; j < need; ++j) {
        Sample s;
        s.id = hash_mix(domain.identity_hash(),
                        hash_mix(static_cast<std::uint64_t>(cls), static_cast<std::uint64_t>(idx[j])));
        s.data = detail::load_pgm(files[static_cast<std::size_t>(idx[static_cast<std::size_t>(j)])]);
        drawn.push_back(std::move(s));
      }
    } else {
      for (int j = 0; j < need; ++j) {
        std::uint64_t content = derive_seed(s0, "sample", hash_mix(static_cast<std::uint64_t>(cls),
                                                                   static_cast<std::uint64_t>(j)));
        drawn.push_back(detail::draw_sample(domain, cls, content));
      }
    }
    for (int j = 0; j < shots; ++j)
      t.support.push_back({std::move(drawn[static_cast<std::size_t>(j)]), label});
    for (int j = shots; j < need; ++j)
      t.query.push_back({std::move(drawn[static_cast<std::size_t>(j)]), label});
  }
  return t;
}

/**
 * Draws a batch of tasks from the mixture: for each slot, a domain is picked
 * from the weights, then an episode is sampled. Slot seeds are derived from
 * (seed, index), so slots are independent and order-stable.
 */
inline TaskBatch sample_task_batch(const MixtureSpec& mixture, int batch_size, int ways, int shots,
                                   int query_per_class, std::uint64_t seed) {
  mixture.validate();
  if (batch_size < 1) throw ConfigError("sample_task_batch: batch_size must be positive");
  TaskBatch batch;
  batch.batch_seed = seed;
  for (int i = 0; i < batch_size; ++i) {
    std::uint64_t si = derive_seed(seed, "episode", static_cast<std::uint64_t>(i));
    Rng rng(si);
    int which = rng.pick_weighted(mixture.weights);
    batch.tasks.push_back(sample_episode(mixture.domains[static_cast<std::size_t>(which)], ways,
                                         shots, query_per_class, rng.next_u64()));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// invariant checking (used by tests and by the augmentation module)

inline void validate_task(const Task& t) {
  if (t.ways < 2 || t.shots < 1 || t.query_per_class < 1)
    throw ConfigError("validate_task: bad episode shape");
  if (static_cast<int>(t.support.size()) != t.ways * t.shots)
    throw ConfigError("validate_task: |support| != N*K");
  if (static_cast<int>(t.query.size()) != t.ways * t.query_per_class)
    throw ConfigError("validate_task: |query| != N*q");
  std::map<int, int> sup_counts, qry_counts;
  for (const auto& ls : t.support) sup_counts[ls.label]++;
  for (const auto& ls : t.query) qry_counts[ls.label]++;
  for (int c = 0; c < t.ways; ++c) {
    if (sup_counts[c] != t.shots) throw ConfigError("validate_task: support class imbalance");
    if (qry_counts[c] != t.query_per_class) throw ConfigError("validate_task: query class imbalance");
  }
  std::set<std::uint64_t> ids;
  for (const auto& ls : t.support)
    if (!ids.insert(ls.sample.id).second) throw ConfigError("validate_task: duplicate sample id");
  for (const auto& ls : t.query)
    if (!ids.insert(ls.sample.id).second)
      throw ConfigError("validate_task: support/query share a sample id");
}

inline bool tasks_identical(const Task& a, const Task& b) {
  if (a.ways != b.ways || a.shots != b.shots || a.query_per_class != b.query_per_class) return false;
  if (a.support.size() != b.support.size() || a.query.size() != b.query.size()) return false;
  auto same = [](const LabeledSample& x, const LabeledSample& y) {
    return x.label == y.label && x.sample.id == y.sample.id && bitwise_equal(x.sample.data, y.sample.data);
  };
  for (std::size_t i = 0; i < a.support.size(); ++i)
    if (!same(a.support[i], b.support[i])) return false;
  for (std::size_t i = 0; i < a.query.size(); ++i)
    if (!same(a.query[i], b.query[i])) return false;
  return true;
}

}  // namespace taskcl::episodes
