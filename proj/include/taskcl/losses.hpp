#pragma once

#include <vector>

#include "taskcl/models.hpp"

namespace taskcl::losses {

struct LossConfig {
  double temperature = 0.5;
  double lambda_con = 1.0;   // weight of the contrastive term in the combined objective
  int cluster_count = 0;     // C; clustering loss requires C >= 2
  double entropy_weight = 1.0;

  void validate(bool clustering = false) const {
    if (!(temperature > 0.0)) throw ConfigError("LossConfig: temperature must be positive");
    if (lambda_con < 0.0) throw ConfigError("LossConfig: lambda_con must be nonnegative");
    if (clustering && cluster_count < 2)
      throw ConfigError("LossConfig: cluster_count must be >= 2 for the clustering loss");
  }
};

namespace detail {

inline void check_matrix(const Var& z, bool require_pairs) {
  const Tensor& m = z.value();
  if (m.rank() != 2 || m.dim(0) < 2) throw ConfigError("embedding matrix: need >= 2 rows");
  if (require_pairs && m.dim(0) % 2 != 0)
    throw ConfigError("embedding matrix: paired losses need an even row count");
  if (!m.all_finite()) throw NumericalError("embedding matrix: non-finite entries");
}

// Cosine similarities scaled by 1/temperature, with the diagonal pushed to a
// value that underflows to exactly zero after the log-sum-exp shift, which
// removes the k=i term from every denominator.
inline Var scaled_similarities(const Var& z, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("nt_xent: temperature must be positive");
  Var zn = normalize_rows(z);
  Var sim = scale(matmul(zn, transpose(zn)), 1.0 / temperature);
  int n = sim.value().dim(0);
  Tensor mask({n, n});
  for (int i = 0; i < n; ++i) mask.at(i, i) = -1e9;
  return add(sim, Var::constant(std::move(mask)));
}

inline Var take_rows(const Var& a, const std::vector<int>& idx) {
  std::vector<Var> parts;
  parts.reserve(idx.size());
  for (int i : idx) parts.push_back(slice_rows(a, i, i + 1));
  return concat_rows(parts);
}

}  // namespace detail

/**
 * NT-Xent term for anchor i with positive j:
 *   -log( exp(sim(z_i,z_j)/t) / sum_{k != i} exp(sim(z_i,z_k)/t) ).
 */
inline Var nt_xent(int i, int j, const Var& z, double temperature) {
  detail::check_matrix(z, false);
  int n = z.value().dim(0);
  if (i == j || i < 0 || j < 0 || i >= n || j >= n) throw ConfigError("nt_xent: bad index pair");
  Var masked = detail::scaled_similarities(z, temperature);
  Var lse = logsumexp_rows(masked);
  Var pos = gather2(masked, {{i, j}});
  return sub(gather2(bc_over_cols(lse, 1), {{i, 0}}), pos);
}

/**
 * Paired contrastive loss over an embedding matrix whose rows are ordered
 * positive pairs (2k, 2k+1):  (1/2N) * sum_k [ L(2k,2k+1) + L(2k+1,2k) ].
 */
inline Var task_contrastive_loss(const Var& z, double temperature) {
  detail::check_matrix(z, true);
  int n = z.value().dim(0);
  Var masked = detail::scaled_similarities(z, temperature);
  Var lse = logsumexp_rows(masked);
  std::vector<std::array<int, 2>> pos;
  pos.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) pos.push_back({i, i ^ 1});
  Var picked = gather2(masked, pos);
  return scale(sum_all(sub(lse, picked)), 1.0 / n);
}

// ---------------------------------------------------------------------------
// task contrastive clustering (row space + column space + entropy)

struct ClusterHead {
  Var w, b;

  static ClusterHead init(int embed_dim, int clusters, Rng& rng) {
    ClusterHead h;
    h.w = models::he_normal({embed_dim, clusters}, embed_dim, rng);
    h.b = models::zeros_leaf({clusters});
    return h;
  }

  Var assign(const Var& z) const { return softmax_rows(linear(z, w, b)); }

  models::ParamList parameters(const std::string& prefix = "cluster.") const {
    models::ParamList out;
    out.add(prefix + "w", w);
    out.add(prefix + "b", b);
    return out;
  }
};

struct ClusteringLossParts {
  Var total;
  Var task_term;
  Var cluster_term;
  Var entropy;
};

namespace detail {

// Entropy of the batch-mean assignment distribution. The epsilon inside the
// log resolves 0*log(0) to 0 without moving values at normal magnitudes.
inline Var marginal_entropy(const Var& probs) {
  int rows = probs.value().dim(0);
  Var marginal = scale(col_sum(probs), 1.0 / rows);
  return neg(sum_all(mul(marginal, log_(add_scalar(marginal, 1e-300)))));
}

inline ClusteringLossParts clustering_loss_impl(const Var& z, const Var& probs,
                                                const LossConfig& cfg) {
  cfg.validate(true);
  check_matrix(z, true);
  int n = z.value().dim(0);
  int c = probs.value().dim(1);
  if (probs.value().dim(0) != n) throw ConfigError("clustering loss: probs/embedding row mismatch");
  if (c != cfg.cluster_count) throw ConfigError("clustering loss: head width != cluster_count");

  ClusteringLossParts parts;
  parts.task_term = task_contrastive_loss(z, cfg.temperature);

  // Column space: pair column j of the first views with column j of the
  // second views and run the same paired NT-Xent over the 2C column vectors.
  std::vector<int> first, second;
  for (int i = 0; i < n; i += 2) first.push_back(i);
  for (int i = 1; i < n; i += 2) second.push_back(i);
  Var a1t = transpose(detail::take_rows(probs, first));   // [C, B]
  Var a2t = transpose(detail::take_rows(probs, second));  // [C, B]
  std::vector<Var> col_pairs;
  for (int j = 0; j < c; ++j) {
    col_pairs.push_back(slice_rows(a1t, j, j + 1));
    col_pairs.push_back(slice_rows(a2t, j, j + 1));
  }
  parts.cluster_term = task_contrastive_loss(concat_rows(col_pairs), cfg.temperature);

  parts.entropy = marginal_entropy(probs);
  parts.total = add(add(parts.task_term, parts.cluster_term),
                    scale(parts.entropy, -cfg.entropy_weight));
  return parts;
}

}  // namespace detail

/** Loss of the clustering router: L_task + L_clu - entropy_weight * H. */
inline ClusteringLossParts contrastive_clustering_loss(const Var& z, const ClusterHead& head,
                                                       const LossConfig& cfg) {
  return detail::clustering_loss_impl(z, head.assign(z), cfg);
}

// Overload taking precomputed assignment probabilities; rows must sum to 1.
inline ClusteringLossParts contrastive_clustering_loss(const Var& z, const Var& probs,
                                                       const LossConfig& cfg) {
  const Tensor& p = probs.value();
  for (int i = 0; i < p.dim(0); ++i) {
    double s = 0.0;
    for (int j = 0; j < p.dim(1); ++j) s += p.at(i, j);
    if (std::abs(s - 1.0) > 1e-6)
      throw ConfigError("clustering loss: assignment row " + std::to_string(i) +
                        " does not sum to 1");
  }
  return detail::clustering_loss_impl(z, probs, cfg);
}

// ---------------------------------------------------------------------------
// supervised contrastive baseline

/**
 * Supervised contrastive objective: every same-label row is a positive.
 * Anchors without positives are skipped; having none at all is an error.
 */
inline Var supervised_task_contrastive_loss(const Var& z, const std::vector<int>& labels,
                                            double temperature) {
  detail::check_matrix(z, false);
  int n = z.value().dim(0);
  if (static_cast<int>(labels.size()) != n)
    throw ConfigError("supervised contrastive: label count != row count");

  Var masked = detail::scaled_similarities(z, temperature);
  Var lse = logsumexp_rows(masked);

  std::vector<Var> anchor_terms;
  for (int i = 0; i < n; ++i) {
    std::vector<std::array<int, 2>> pos;
    for (int p = 0; p < n; ++p)
      if (p != i && labels[static_cast<std::size_t>(p)] == labels[static_cast<std::size_t>(i)])
        pos.push_back({i, p});
    if (pos.empty()) continue;
    Var pos_mean = reshape(mean_all(gather2(masked, pos)), {1});
    Var anchor_lse = gather2(bc_over_cols(lse, 1), {{i, 0}});
    anchor_terms.push_back(reshape(sub(anchor_lse, pos_mean), {1, 1}));
  }
  if (anchor_terms.empty())
    throw ConfigError("supervised contrastive: no anchor has a positive (all labels distinct)");
  return mean_all(concat_rows(anchor_terms));
}

}  // namespace taskcl::losses
