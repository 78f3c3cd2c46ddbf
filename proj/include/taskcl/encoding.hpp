#pragma once

#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "taskcl/episodes.hpp"
#include "taskcl/models.hpp"

namespace taskcl::encoding {

using episodes::Task;
using models::InputKind;

struct EncoderParams {
  InputKind input = InputKind::Vector;
  int input_dim = 16;      // vector domains
  int input_channels = 1;  // image domains
  int conv_channels = 32;
  int conv_blocks = 4;
  int mlp_hidden = 64;
  int embed_dim = 64;
  // When set, a one-hot label channel is appended to the encoder input (the
  // switch that reproduces the relabeling collapse mode).
  bool label_conditioned = false;
  int ways = 0;  // required when label_conditioned
};

struct TaskEmbedding {
  enum class Source { SetEncoder, FeatureAgg };
  enum class Adaptation { Pre, Post };

  Var row;  // [1, d]
  Source source = Source::SetEncoder;
  Adaptation adaptation = Adaptation::Pre;
  std::string reducer = "mean";
  std::uint64_t origin_id = 0;

  int dim() const { return row.value().dim(1); }
  Tensor vec() const { return row.value().reshaped({dim()}); }
};

// ---------------------------------------------------------------------------
// set encoder (DeepSets-style trunk, mean pooled over the support set)

struct SetEncoder {
  EncoderParams params;
  models::Trunk trunk;
  Var out_w, out_b;

  static SetEncoder init(const EncoderParams& p, Rng& rng) {
    SetEncoder e;
    e.params = p;
    int extra = p.label_conditioned ? p.ways : 0;
    if (p.label_conditioned && p.ways <= 0)
      throw ConfigError("SetEncoder: label conditioning requires the way count");
    if (p.input == InputKind::Image)
      e.trunk = models::Trunk::init_image(p.input_channels + extra, p.conv_channels, p.conv_blocks, rng);
    else
      e.trunk = models::Trunk::init_vector(p.input_dim + extra, p.mlp_hidden, rng);
    int fd = e.trunk.feature_dim();
    e.out_w = models::he_normal({fd, p.embed_dim}, fd, rng);
    e.out_b = models::zeros_leaf({p.embed_dim});
    return e;
  }

  models::ParamList parameters(const std::string& prefix = "encoder.") const {
    models::ParamList out;
    trunk.collect(out, prefix);
    out.add(prefix + "out.w", out_w);
    out.add(prefix + "out.b", out_b);
    return out;
  }
};

namespace detail {

// Canonical sample order: sorted by sample id. Mean pooling then sums in a
// fixed order, which is what makes permutation invariance bit-exact.
inline std::vector<std::size_t> canonical_order(const std::vector<episodes::LabeledSample>& set) {
  std::vector<std::size_t> idx(set.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&set](std::size_t a, std::size_t b) {
    return set[a].sample.id < set[b].sample.id;
  });
  return idx;
}

inline Tensor stack_support(const Task& t, const EncoderParams& p) {
  const auto& set = t.support;
  if (set.empty()) throw ConfigError("stack_support: empty support set");
  auto order = canonical_order(set);
  int n = static_cast<int>(set.size());
  int extra = p.label_conditioned ? p.ways : 0;

  const Tensor& first = set[0].sample.data;
  if (p.input == InputKind::Image) {
    if (first.rank() != 3) throw ConfigError("stack_support: image encoder fed non-image samples");
    int C = first.dim(0), H = first.dim(1), W = first.dim(2);
    Tensor x({n, C + extra, H, W});
    for (int i = 0; i < n; ++i) {
      const auto& ls = set[order[static_cast<std::size_t>(i)]];
      if (!(ls.sample.data.shape() == first.shape()))
        throw ConfigError("stack_support: inconsistent sample shapes");
      std::copy(ls.sample.data.data(), ls.sample.data.data() + ls.sample.data.size(),
                x.data() + static_cast<long>(i) * (C + extra) * H * W);
      if (extra > 0) {
        double* lbl = x.data() + (static_cast<long>(i) * (C + extra) + C + ls.label) * H * W;
        std::fill(lbl, lbl + static_cast<long>(H) * W, 1.0);
      }
    }
    return x;
  }
  if (first.rank() != 1) throw ConfigError("stack_support: vector encoder fed non-vector samples");
  int D = first.dim(0);
  Tensor x({n, D + extra});
  for (int i = 0; i < n; ++i) {
    const auto& ls = set[order[static_cast<std::size_t>(i)]];
    std::copy(ls.sample.data.data(), ls.sample.data.data() + D,
              x.data() + static_cast<long>(i) * (D + extra));
    if (extra > 0) x[static_cast<long>(i) * (D + extra) + D + ls.label] = 1.0;
  }
  return x;
}

// [n, D] -> [1, D] mean over the sample axis.
inline Var mean_over_set(const Var& feats) {
  int n = feats.value().dim(0), d = feats.value().dim(1);
  return mean_axis1(reshape(feats, {1, n, d}));
}

}  // namespace detail

/** z = g_phi(S): per-sample trunk features, mean over set, linear map. */
inline TaskEmbedding encode_support_set(const Task& task, const SetEncoder& enc) {
  Var x = Var::constant(detail::stack_support(task, enc.params));
  Var feats = enc.trunk.forward(x);
  Var pooled = detail::mean_over_set(feats);
  TaskEmbedding e;
  e.row = linear(pooled, enc.out_w, enc.out_b);
  e.source = TaskEmbedding::Source::SetEncoder;
  e.adaptation = TaskEmbedding::Adaptation::Pre;
  e.reducer = "mean";
  e.origin_id = task.origin_id;
  return e;
}

/**
 * Task embedding from per-sample features of the main feature extractor,
 * reduced over the support set (mean, max or min). The feature function
 * receives the support samples stacked in canonical order.
 */
inline TaskEmbedding aggregate_features_with(
    const Task& task, const std::function<Var(const Tensor&)>& feature_fn,
    const std::string& reducer) {
  const auto& set = task.support;
  if (set.empty()) throw ConfigError("aggregate_features: empty support set");
  auto order = detail::canonical_order(set);
  int n = static_cast<int>(set.size());

  const Tensor& first = set[0].sample.data;
  Tensor x;
  if (first.rank() == 3) {
    int C = first.dim(0), H = first.dim(1), W = first.dim(2);
    x = Tensor({n, C, H, W});
    for (int i = 0; i < n; ++i) {
      const Tensor& s = set[order[static_cast<std::size_t>(i)]].sample.data;
      std::copy(s.data(), s.data() + s.size(), x.data() + static_cast<long>(i) * C * H * W);
    }
  } else {
    int D = first.dim(0);
    x = Tensor({n, D});
    for (int i = 0; i < n; ++i) {
      const Tensor& s = set[order[static_cast<std::size_t>(i)]].sample.data;
      std::copy(s.data(), s.data() + D, x.data() + static_cast<long>(i) * D);
    }
  }

  Var feats = feature_fn(x);  // [n, D]
  int d = feats.value().dim(1);
  Var row;
  if (reducer == "mean")
    row = detail::mean_over_set(feats);
  else if (reducer == "max")
    row = reshape(col_reduce_extreme(feats, true), {1, d});
  else if (reducer == "min")
    row = reshape(col_reduce_extreme(feats, false), {1, d});
  else
    throw ConfigError("aggregate_features: unknown reducer '" + reducer + "'");

  TaskEmbedding e;
  e.row = row;
  e.source = TaskEmbedding::Source::FeatureAgg;
  e.reducer = reducer;
  e.origin_id = task.origin_id;
  return e;
}

// ---------------------------------------------------------------------------
// projection head g

struct ProjectionParams {
  std::vector<int> layers;  // e.g. {64, 64, 32}; single pair = one linear map
  bool unit_normalize = true;
};

struct ProjectionNet {
  ProjectionParams params;
  std::vector<Var> w, b;

  static ProjectionNet init(const ProjectionParams& p, Rng& rng) {
    if (p.layers.size() < 2) throw ConfigError("ProjectionNet: need at least input and output dims");
    ProjectionNet net;
    net.params = p;
    for (std::size_t i = 0; i + 1 < p.layers.size(); ++i) {
      net.w.push_back(models::he_normal({p.layers[i], p.layers[i + 1]}, p.layers[i], rng));
      net.b.push_back(models::zeros_leaf({p.layers[i + 1]}));
    }
    return net;
  }

  models::ParamList parameters(const std::string& prefix = "projection.") const {
    models::ParamList out;
    for (std::size_t i = 0; i < w.size(); ++i) {
      out.add(prefix + "fc" + std::to_string(i) + ".w", w[i]);
      out.add(prefix + "fc" + std::to_string(i) + ".b", b[i]);
    }
    return out;
  }
};

/** Maps a [1,d] embedding row through the projection MLP; optionally unit-normalized. */
inline Var project_embedding(const Var& row, const ProjectionNet& net) {
  if (row.value().rank() != 2 || row.value().dim(1) != net.params.layers.front())
    throw ConfigError("project_embedding: dimension mismatch");
  Var h = row;
  for (std::size_t i = 0; i < net.w.size(); ++i) {
    h = linear(h, net.w[i], net.b[i]);
    if (i + 1 < net.w.size()) h = relu(h);
  }
  if (net.params.unit_normalize) h = normalize_rows(h);
  return h;
}

inline Var project_embedding(const TaskEmbedding& e, const ProjectionNet& net) {
  return project_embedding(e.row, net);
}

// Stacks embedding rows into an embedding matrix [n, d].
inline Var embeddings_to_matrix(const std::vector<TaskEmbedding>& embeddings) {
  if (embeddings.empty()) throw ConfigError("embeddings_to_matrix: empty input");
  std::vector<Var> rows;
  rows.reserve(embeddings.size());
  for (const auto& e : embeddings) rows.push_back(e.row);
  return concat_rows(rows);
}

}  // namespace taskcl::encoding
