#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "taskcl/evalkit.hpp"
#include "taskcl/losses.hpp"

using namespace taskcl;
using namespace taskcl::losses;

namespace {

Tensor random_rows(int n, int d, std::uint64_t seed) {
  Rng r(seed);
  return Tensor::randn({n, d}, r);
}

// Independent double-loop oracle for the paired contrastive loss.
double brute_force_pair_loss(const Tensor& z, double tau) {
  int n = z.dim(0), d = z.dim(1);
  auto cos = [&z, d](int i, int j) {
    double dot = 0, ni = 0, nj = 0;
    for (int k = 0; k < d; ++k) {
      dot += z.at(i, k) * z.at(j, k);
      ni += z.at(i, k) * z.at(i, k);
      nj += z.at(j, k) * z.at(j, k);
    }
    return dot / (std::sqrt(ni) * std::sqrt(nj));
  };
  auto term = [&](int i, int j) {
    double denom = 0.0;
    for (int k = 0; k < n; ++k)
      if (k != i) denom += std::exp(cos(i, k) / tau);
    return -std::log(std::exp(cos(i, j) / tau) / denom);
  };
  double total = 0.0;
  for (int k = 0; k < n / 2; ++k) total += term(2 * k, 2 * k + 1) + term(2 * k + 1, 2 * k);
  return total / n;
}

double brute_force_supervised(const Tensor& z, const std::vector<int>& labels, double tau) {
  int n = z.dim(0), d = z.dim(1);
  auto cos = [&z, d](int i, int j) {
    double dot = 0, ni = 0, nj = 0;
    for (int k = 0; k < d; ++k) {
      dot += z.at(i, k) * z.at(j, k);
      ni += z.at(i, k) * z.at(i, k);
      nj += z.at(j, k) * z.at(j, k);
    }
    return dot / (std::sqrt(ni) * std::sqrt(nj));
  };
  double total = 0.0;
  int anchors = 0;
  for (int i = 0; i < n; ++i) {
    double denom = 0.0;
    for (int k = 0; k < n; ++k)
      if (k != i) denom += std::exp(cos(i, k) / tau);
    double acc = 0.0;
    int pos = 0;
    for (int p = 0; p < n; ++p)
      if (p != i && labels[static_cast<std::size_t>(p)] == labels[static_cast<std::size_t>(i)]) {
        acc += -std::log(std::exp(cos(i, p) / tau) / denom);
        ++pos;
      }
    if (pos > 0) {
      total += acc / pos;
      ++anchors;
    }
  }
  return total / anchors;
}

}  // namespace

TEST_CASE("nt_xent degenerate two-row batch gives zero") {
  Tensor z = Tensor::from({2, 3}, {1.0, 0.0, 0.0, 0.4, 0.8, -0.1});
  NoGradScope ng;
  REQUIRE(nt_xent(0, 1, Var::constant(z), 0.7).value().item() == 0.0);
  REQUIRE(nt_xent(1, 0, Var::constant(z), 0.7).value().item() == 0.0);
}

TEST_CASE("nt_xent orthogonal pairs match the closed form") {
  // z0 = z1 perpendicular to z2 = z3, tau = 1: L(0,1) = -ln(e / (e + 2))
  Tensor z = Tensor::from({4, 2}, {1, 0, 1, 0, 0, 1, 0, 1});
  double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
  NoGradScope ng;
  for (auto [i, j] : std::vector<std::pair<int, int>>{{0, 1}, {1, 0}, {2, 3}, {3, 2}})
    REQUIRE(nt_xent(i, j, Var::constant(z), 1.0).value().item() ==
            Catch::Approx(expect).margin(1e-12));
  REQUIRE(expect == Catch::Approx(0.5514).margin(5e-5));

  REQUIRE(task_contrastive_loss(Var::constant(z), 1.0).value().item() ==
          Catch::Approx(expect).margin(1e-12));
}

TEST_CASE("losses are invariant to positive rescaling of the embeddings") {
  Tensor z = random_rows(8, 5, 3);
  NoGradScope ng;
  double base = task_contrastive_loss(Var::constant(z), 0.5).value().item();
  Tensor scaled = z;
  for (long i = 0; i < scaled.size(); ++i) scaled[i] *= 3.0;
  double after = task_contrastive_loss(Var::constant(scaled), 0.5).value().item();
  REQUIRE(std::abs(base - after) < 1e-10);

  std::vector<int> labels = {0, 0, 1, 1, 0, 1, 2, 2};
  double s1 = supervised_task_contrastive_loss(Var::constant(z), labels, 0.5).value().item();
  double s2 = supervised_task_contrastive_loss(Var::constant(scaled), labels, 0.5).value().item();
  REQUIRE(std::abs(s1 - s2) < 1e-10);
}

TEST_CASE("task_contrastive_loss equals the brute-force oracle") {
  NoGradScope ng;
  for (int n : {8, 12, 16}) {
    Tensor z = random_rows(n, 6, static_cast<std::uint64_t>(100 + n));
    double ours = task_contrastive_loss(Var::constant(z), 0.5).value().item();
    REQUIRE(std::abs(ours - brute_force_pair_loss(z, 0.5)) < 1e-10);
  }
  // N = 1: both terms degenerate to zero
  Tensor two = random_rows(2, 4, 9);
  REQUIRE(task_contrastive_loss(Var::constant(two), 0.5).value().item() == 0.0);
}

TEST_CASE("task_contrastive_loss error cases") {
  NoGradScope ng;
  REQUIRE_THROWS_AS(task_contrastive_loss(Var::constant(random_rows(5, 3, 1)), 0.5), ConfigError);
  REQUIRE_THROWS_AS(task_contrastive_loss(Var::constant(random_rows(4, 3, 1)), 0.0), ConfigError);
  REQUIRE_THROWS_AS(task_contrastive_loss(Var::constant(random_rows(4, 3, 1)), -1.0), ConfigError);
  Tensor with_zero = random_rows(4, 3, 2);
  for (int j = 0; j < 3; ++j) with_zero.at(2, j) = 0.0;
  REQUIRE_THROWS_AS(task_contrastive_loss(Var::constant(with_zero), 0.5), NumericalError);
  Tensor with_nan = random_rows(4, 3, 3);
  with_nan.at(0, 0) = std::nan("");
  REQUIRE_THROWS_AS(task_contrastive_loss(Var::constant(with_nan), 0.5), NumericalError);
}

TEST_CASE("lower bound when the positive attains the max similarity") {
  // pairs are exact duplicates: sim(i, pair) = 1 is the row max
  Rng r(5);
  Tensor z({6, 4});
  for (int k = 0; k < 3; ++k) {
    std::vector<double> v(4);
    for (auto& x : v) x = r.normal();
    for (int j = 0; j < 4; ++j) {
      z.at(2 * k, j) = v[static_cast<std::size_t>(j)];
      z.at(2 * k + 1, j) = v[static_cast<std::size_t>(j)];
    }
  }
  NoGradScope ng;
  REQUIRE(task_contrastive_loss(Var::constant(z), 0.5).value().item() >= 0.0);
}

TEST_CASE("clustering loss: uniform assignments give H = ln C and weight linearity") {
  Tensor z = random_rows(8, 5, 11);
  int C = 4;
  Tensor probs = Tensor::full({8, C}, 1.0 / C);
  LossConfig cfg;
  cfg.temperature = 0.5;
  cfg.cluster_count = C;

  NoGradScope ng;
  cfg.entropy_weight = 0.0;
  auto p0 = contrastive_clustering_loss(Var::constant(z), Var::constant(probs), cfg);
  REQUIRE(p0.entropy.value().item() == Catch::Approx(std::log(double(C))).margin(1e-12));

  cfg.entropy_weight = 1.0;
  auto p1 = contrastive_clustering_loss(Var::constant(z), Var::constant(probs), cfg);
  REQUIRE(p0.total.value().item() - p1.total.value().item() ==
          Catch::Approx(p1.entropy.value().item()).margin(1e-12));
  REQUIRE(p0.task_term.value().item() == p1.task_term.value().item());
}

TEST_CASE("clustering loss column term equals a brute-force column evaluation") {
  // one-hot assignments, positive pairs assigned identically, each pair its own cluster
  int pairs = 3, C = 3;
  Tensor z = random_rows(2 * pairs, 5, 21);
  Tensor probs({2 * pairs, C});
  for (int k = 0; k < pairs; ++k) {
    probs.at(2 * k, k) = 1.0;
    probs.at(2 * k + 1, k) = 1.0;
  }
  LossConfig cfg;
  cfg.temperature = 0.5;
  cfg.cluster_count = C;
  cfg.entropy_weight = 1.0;

  NoGradScope ng;
  auto parts = contrastive_clustering_loss(Var::constant(z), Var::constant(probs), cfg);

  // brute force on the 2C column vectors (views interleaved)
  Tensor cols({2 * C, pairs});
  for (int c = 0; c < C; ++c)
    for (int k = 0; k < pairs; ++k) {
      cols.at(2 * c, k) = probs.at(2 * k, c);      // view-1 assignment column c
      cols.at(2 * c + 1, k) = probs.at(2 * k + 1, c);  // view-2 column c
    }
  REQUIRE(parts.cluster_term.value().item() ==
          Catch::Approx(brute_force_pair_loss(cols, 0.5)).margin(1e-10));
  REQUIRE(parts.task_term.value().item() ==
          Catch::Approx(brute_force_pair_loss(z, 0.5)).margin(1e-10));
}

TEST_CASE("clustering loss rejects non-normalized assignment rows") {
  Tensor z = random_rows(4, 3, 31);
  Tensor bad = Tensor::full({4, 2}, 0.4);
  LossConfig cfg;
  cfg.cluster_count = 2;
  REQUIRE_THROWS_AS(contrastive_clustering_loss(Var::constant(z), Var::constant(bad), cfg),
                    ConfigError);
  cfg.cluster_count = 1;
  Tensor ok = Tensor::full({4, 1}, 1.0);
  REQUIRE_THROWS_AS(contrastive_clustering_loss(Var::constant(z), Var::constant(ok), cfg),
                    ConfigError);
}

TEST_CASE("supervised loss reduces to nt_xent with exactly one positive per anchor") {
  Tensor z = random_rows(6, 4, 41);
  std::vector<int> labels = {0, 0, 1, 1, 2, 2};
  NoGradScope ng;
  Var zc = Var::constant(z);
  double sup = supervised_task_contrastive_loss(zc, labels, 0.5).value().item();
  double manual = 0.0;
  for (auto [i, j] : std::vector<std::pair<int, int>>{{0, 1}, {1, 0}, {2, 3}, {3, 2}, {4, 5}, {5, 4}})
    manual += nt_xent(i, j, zc, 0.5).value().item();
  REQUIRE(sup == Catch::Approx(manual / 6.0).margin(1e-12));
}

TEST_CASE("supervised loss: label-bijection invariance and brute-force oracle") {
  Tensor z = random_rows(6, 5, 51);
  std::vector<int> labels = {0, 1, 0, 1, 0, 1};
  NoGradScope ng;
  double a = supervised_task_contrastive_loss(Var::constant(z), labels, 0.5).value().item();
  std::vector<int> remapped = {7, 3, 7, 3, 7, 3};
  double b = supervised_task_contrastive_loss(Var::constant(z), remapped, 0.5).value().item();
  REQUIRE(a == Catch::Approx(b).margin(1e-15));
  REQUIRE(a == Catch::Approx(brute_force_supervised(z, labels, 0.5)).margin(1e-10));

  std::vector<int> distinct = {0, 1, 2, 3, 4, 5};
  REQUIRE_THROWS_AS(supervised_task_contrastive_loss(Var::constant(z), distinct, 0.5), ConfigError);
}

TEST_CASE("loss gradients match finite differences") {
  auto check = [](const std::function<Var(const Var&)>& f, const Tensor& x0) {
    auto loss = [&f, &x0](const std::vector<double>& p) {
      NoGradScope ng;
      return f(Var::constant(Tensor::from(x0.shape(), p))).value().item();
    };
    auto grad = [&f, &x0](const std::vector<double>& p) {
      Var v = Var::leaf(Tensor::from(x0.shape(), p));
      return grad_of(f(v), v).raw();
    };
    return evalkit::finite_difference_check(loss, grad, x0.raw(), 60, 1e-4);
  };

  Tensor z = random_rows(8, 5, 61);
  REQUIRE(check([](const Var& v) { return task_contrastive_loss(v, 0.5); }, z) < 1e-4);
  REQUIRE(check([](const Var& v) { return nt_xent(2, 3, v, 0.5); }, z) < 1e-4);
  std::vector<int> labels = {0, 1, 0, 1, 2, 2, 0, 1};
  REQUIRE(check([&labels](const Var& v) {
            return supervised_task_contrastive_loss(v, labels, 0.5);
          }, z) < 1e-4);

  LossConfig cfg;
  cfg.temperature = 0.5;
  cfg.cluster_count = 3;
  Rng hr(71);
  ClusterHead head = ClusterHead::init(5, 3, hr);
  REQUIRE(check([&head, &cfg](const Var& v) {
            return contrastive_clustering_loss(v, head, cfg).total;
          }, z) < 1e-4);
}
