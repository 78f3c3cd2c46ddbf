#pragma once

#include <Eigen/Eigenvalues>
#include <array>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "taskcl/rng.hpp"
#include "taskcl/tensor.hpp"

namespace taskcl::evalkit {

using PointSet = std::vector<std::vector<double>>;

namespace detail {

inline void check_points(const PointSet& points) {
  if (points.empty()) throw ConfigError("evalkit: empty point set");
  for (const auto& p : points)
    if (p.size() != points[0].size()) throw ConfigError("evalkit: inconsistent point dimensions");
}

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// Maps arbitrary label values to 0..L-1 in order of first appearance sorted by value.
inline std::vector<int> compact_labels(const std::vector<int>& labels, int* count) {
  std::map<int, int> remap;
  for (int l : labels) remap.emplace(l, 0);
  int next = 0;
  for (auto& [k, v] : remap) v = next++;
  std::vector<int> out;
  out.reserve(labels.size());
  for (int l : labels) out.push_back(remap[l]);
  *count = next;
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Davies-Bouldin index

/**
 * Standard DB index: mean over clusters i of max_{j != i} (s_i + s_j) / d_ij,
 * where s_i is the mean Euclidean distance of cluster i's points to their
 * centroid and d_ij the distance between centroids. Lower is better.
 */
inline double davies_bouldin(const PointSet& points, const std::vector<int>& labels) {
  detail::check_points(points);
  if (labels.size() != points.size()) throw ConfigError("davies_bouldin: label count mismatch");
  int L = 0;
  std::vector<int> ids = detail::compact_labels(labels, &L);
  if (L < 2) throw ConfigError("davies_bouldin: need at least 2 distinct labels");

  std::size_t d = points[0].size();
  std::vector<std::vector<double>> centroid(static_cast<std::size_t>(L), std::vector<double>(d, 0.0));
  std::vector<int> counts(static_cast<std::size_t>(L), 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) centroid[static_cast<std::size_t>(ids[i])][j] += points[i][j];
    counts[static_cast<std::size_t>(ids[i])]++;
  }
  for (int c = 0; c < L; ++c)
    for (std::size_t j = 0; j < d; ++j) centroid[static_cast<std::size_t>(c)][j] /= counts[static_cast<std::size_t>(c)];

  std::vector<double> scatter(static_cast<std::size_t>(L), 0.0);
  for (std::size_t i = 0; i < points.size(); ++i)
    scatter[static_cast<std::size_t>(ids[i])] +=
        std::sqrt(detail::sq_dist(points[i], centroid[static_cast<std::size_t>(ids[i])]));
  for (int c = 0; c < L; ++c) scatter[static_cast<std::size_t>(c)] /= counts[static_cast<std::size_t>(c)];

  double total = 0.0;
  for (int i = 0; i < L; ++i) {
    double worst = 0.0;
    for (int j = 0; j < L; ++j) {
      if (i == j) continue;
      double dij = std::sqrt(detail::sq_dist(centroid[static_cast<std::size_t>(i)],
                                             centroid[static_cast<std::size_t>(j)]));
      if (dij == 0.0)
        throw NumericalError("davies_bouldin: degenerate clustering (coincident centroids)");
      worst = std::max(worst, (scatter[static_cast<std::size_t>(i)] + scatter[static_cast<std::size_t>(j)]) / dij);
    }
    total += worst;
  }
  return total / L;
}

// ---------------------------------------------------------------------------
// linear probe

/**
 * Domain-information probe: stratified 80/20 split, features standardized on
 * the train split, multinomial softmax regression trained by full-batch
 * gradient descent (lr 0.5, stop when the gradient sup-norm falls below 1e-6
 * or after 3000 iterations). Returns test accuracy.
 */
inline double linear_probe(const PointSet& points, const std::vector<int>& labels,
                           std::uint64_t split_seed) {
  detail::check_points(points);
  if (labels.size() != points.size()) throw ConfigError("linear_probe: label count mismatch");
  int L = 0;
  std::vector<int> ids = detail::compact_labels(labels, &L);
  if (L < 2) throw ConfigError("linear_probe: need at least 2 labels");

  std::vector<std::vector<std::size_t>> by_label(static_cast<std::size_t>(L));
  for (std::size_t i = 0; i < ids.size(); ++i)
    by_label[static_cast<std::size_t>(ids[i])].push_back(i);
  for (int c = 0; c < L; ++c)
    if (by_label[static_cast<std::size_t>(c)].size() < 10)
      throw ConfigError("linear_probe: need at least 10 points per label");

  std::vector<std::size_t> train_idx, test_idx;
  Rng rng(derive_seed(split_seed, "probe-split"));
  for (int c = 0; c < L; ++c) {
    auto& members = by_label[static_cast<std::size_t>(c)];
    rng.shuffle(members);
    std::size_t n_test = std::max<std::size_t>(1, members.size() / 5);
    for (std::size_t i = 0; i < members.size(); ++i)
      (i < n_test ? test_idx : train_idx).push_back(members[i]);
  }

  std::size_t d = points[0].size();
  std::vector<double> mean(d, 0.0), stdev(d, 0.0);
  for (std::size_t i : train_idx)
    for (std::size_t j = 0; j < d; ++j) mean[j] += points[i][j];
  for (std::size_t j = 0; j < d; ++j) mean[j] /= double(train_idx.size());
  for (std::size_t i : train_idx)
    for (std::size_t j = 0; j < d; ++j) stdev[j] += (points[i][j] - mean[j]) * (points[i][j] - mean[j]);
  for (std::size_t j = 0; j < d; ++j) {
    stdev[j] = std::sqrt(stdev[j] / double(train_idx.size()));
    if (stdev[j] == 0.0) stdev[j] = 1.0;
  }
  auto feat = [&](std::size_t i, std::size_t j) { return (points[i][j] - mean[j]) / stdev[j]; };

  // softmax regression, full batch
  std::vector<double> W(d * static_cast<std::size_t>(L), 0.0), B(static_cast<std::size_t>(L), 0.0);
  std::vector<double> logits(static_cast<std::size_t>(L));
  std::vector<double> gW(W.size()), gB(B.size());
  double lr = 0.5;
  double n_train = double(train_idx.size());
  for (int iter = 0; iter < 3000; ++iter) {
    std::fill(gW.begin(), gW.end(), 0.0);
    std::fill(gB.begin(), gB.end(), 0.0);
    for (std::size_t i : train_idx) {
      double mx = -1e300;
      for (int c = 0; c < L; ++c) {
        double v = B[static_cast<std::size_t>(c)];
        for (std::size_t j = 0; j < d; ++j) v += feat(i, j) * W[j * static_cast<std::size_t>(L) + c];
        logits[static_cast<std::size_t>(c)] = v;
        mx = std::max(mx, v);
      }
      double z = 0.0;
      for (int c = 0; c < L; ++c) z += std::exp(logits[static_cast<std::size_t>(c)] - mx);
      for (int c = 0; c < L; ++c) {
        double p = std::exp(logits[static_cast<std::size_t>(c)] - mx) / z;
        double delta = (p - (ids[i] == c ? 1.0 : 0.0)) / n_train;
        gB[static_cast<std::size_t>(c)] += delta;
        for (std::size_t j = 0; j < d; ++j) gW[j * static_cast<std::size_t>(L) + c] += delta * feat(i, j);
      }
    }
    double ginf = 0.0;
    for (double g : gW) ginf = std::max(ginf, std::abs(g));
    for (double g : gB) ginf = std::max(ginf, std::abs(g));
    if (ginf < 1e-6) break;
    for (std::size_t k = 0; k < W.size(); ++k) W[k] -= lr * gW[k];
    for (std::size_t k = 0; k < B.size(); ++k) B[k] -= lr * gB[k];
  }

  int correct = 0;
  for (std::size_t i : test_idx) {
    int best = 0;
    double best_v = -1e300;
    for (int c = 0; c < L; ++c) {
      double v = B[static_cast<std::size_t>(c)];
      for (std::size_t j = 0; j < d; ++j) v += feat(i, j) * W[j * static_cast<std::size_t>(L) + c];
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    if (best == ids[i]) ++correct;
  }
  return double(correct) / double(test_idx.size());
}

// ---------------------------------------------------------------------------
// cluster/domain heatmap matrix

struct HeatmapMatrix {
  Tensor matrix;                 // [clusters, domains], rows normalized
  std::vector<bool> empty_rows;  // flagged empty clusters

  int clusters() const { return matrix.dim(0); }
  int domains() const { return matrix.dim(1); }
};

/** Entry (c, d) = fraction of cluster-c tasks whose hidden domain is d. */
inline HeatmapMatrix cluster_domain_matrix(const std::vector<int>& assignments,
                                           const std::vector<int>& domains, int cluster_count = -1,
                                           int domain_count = -1) {
  if (assignments.size() != domains.size() || assignments.empty())
    throw ConfigError("cluster_domain_matrix: equal-length nonempty lists required");
  int k = cluster_count, d = domain_count;
  for (int a : assignments) {
    if (a < 0) throw ConfigError("cluster_domain_matrix: negative cluster id");
    k = std::max(k, a + 1);
  }
  for (int dom : domains) {
    if (dom < 0) throw ConfigError("cluster_domain_matrix: negative domain id");
    d = std::max(d, dom + 1);
  }
  HeatmapMatrix out;
  out.matrix = Tensor({k, d});
  std::vector<int> row_counts(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    out.matrix.at(assignments[i], domains[i]) += 1.0;
    row_counts[static_cast<std::size_t>(assignments[i])]++;
  }
  out.empty_rows.resize(static_cast<std::size_t>(k), false);
  for (int c = 0; c < k; ++c) {
    if (row_counts[static_cast<std::size_t>(c)] == 0) {
      out.empty_rows[static_cast<std::size_t>(c)] = true;
      continue;
    }
    for (int j = 0; j < d; ++j) out.matrix.at(c, j) /= row_counts[static_cast<std::size_t>(c)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// finite-difference gradient oracle

/**
 * Central-difference check at probe_count random coordinates. Returns
 * max |analytic - numeric| / (|numeric| + 1e-12).
 */
inline double finite_difference_check(
    const std::function<double(const std::vector<double>&)>& loss_fn,
    const std::function<std::vector<double>(const std::vector<double>&)>& grad_fn,
    std::vector<double> params, int probe_count, double step, std::uint64_t seed = 17) {
  if (!(step > 0.0)) throw ConfigError("finite_difference_check: step must be positive");
  if (params.empty()) throw ConfigError("finite_difference_check: empty parameter vector");
  std::vector<double> analytic = grad_fn(params);
  if (analytic.size() != params.size())
    throw ConfigError("finite_difference_check: gradient size mismatch");

  Rng rng(derive_seed(seed, "fd-probes"));
  double worst = 0.0;
  for (int p = 0; p < probe_count; ++p) {
    std::size_t i = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(params.size())));
    double saved = params[i];
    params[i] = saved + step;
    double up = loss_fn(params);
    params[i] = saved - step;
    double down = loss_fn(params);
    params[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericalError("finite_difference_check: non-finite loss at perturbed point");
    double numeric = (up - down) / (2.0 * step);
    double rel = std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-12);
    worst = std::max(worst, rel);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// 2D projection (PCA)

/**
 * Deterministic PCA to two components. Component signs are fixed by making
 * the largest-magnitude coordinate positive; a rank-deficient second
 * direction yields a zero-padded second coordinate.
 */
inline std::vector<std::array<double, 2>> project_2d(const PointSet& points) {
  detail::check_points(points);
  if (points.size() < 3) throw ConfigError("project_2d: need at least 3 points");
  std::size_t n = points.size(), d = points[0].size();

  Eigen::MatrixXd X(static_cast<long>(n), static_cast<long>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) X(static_cast<long>(i), static_cast<long>(j)) = points[i][j];
  Eigen::RowVectorXd mu = X.colwise().mean();
  X.rowwise() -= mu;
  Eigen::MatrixXd cov = (X.transpose() * X) / double(n);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw NumericalError("project_2d: eigendecomposition failed");
  // eigenvalues ascending; take the top two
  long last = static_cast<long>(d) - 1;
  double tiny = 1e-12 * std::max(1.0, es.eigenvalues()(last));
  std::array<Eigen::VectorXd, 2> comps;
  std::array<bool, 2> live{};
  for (int c = 0; c < 2; ++c) {
    long idx = last - c;
    live[static_cast<std::size_t>(c)] = idx >= 0 && es.eigenvalues()(idx) > tiny;
    comps[static_cast<std::size_t>(c)] = live[static_cast<std::size_t>(c)]
                                             ? es.eigenvectors().col(idx).eval()
                                             : Eigen::VectorXd::Zero(static_cast<long>(d)).eval();
    if (live[static_cast<std::size_t>(c)]) {
      long arg = 0;
      for (long j = 1; j < static_cast<long>(d); ++j)
        if (std::abs(comps[static_cast<std::size_t>(c)](j)) >
            std::abs(comps[static_cast<std::size_t>(c)](arg)))
          arg = j;
      if (comps[static_cast<std::size_t>(c)](arg) < 0) comps[static_cast<std::size_t>(c)] *= -1.0;
    }
  }

  std::vector<std::array<double, 2>> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i][0] = X.row(static_cast<long>(i)).dot(comps[0].transpose());
    out[i][1] = X.row(static_cast<long>(i)).dot(comps[1].transpose());
  }
  return out;
}

// ---------------------------------------------------------------------------
// consolidated report

struct AccuracyStat {
  double mean = 0.0;
  double ci = 0.0;  // 95% half-width, 1.96 * stdev / sqrt(E)
  int episodes = 0;
};

struct MetricsReport {
  double db_index = -1.0;
  double probe_accuracy = -1.0;
  AccuracyStat overall;
  std::map<std::string, AccuracyStat> accuracy_by_domain;
  HeatmapMatrix heatmap;
  std::vector<std::array<double, 2>> projection;
};

}  // namespace taskcl::evalkit
