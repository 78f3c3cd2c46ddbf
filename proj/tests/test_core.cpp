#include <catch2/catch_amalgamated.hpp>

#include "taskcl/evalkit.hpp"
#include "taskcl/nn.hpp"

using namespace taskcl;

TEST_CASE("rng determinism and ranges") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

  Rng r(7);
  for (int i = 0; i < 1000; ++i) {
    double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    int k = r.uniform_int(13);
    REQUIRE(k >= 0);
    REQUIRE(k < 13);
  }
}

TEST_CASE("rng normal moments") {
  Rng r(11);
  double sum = 0.0, sq = 0.0;
  int n = 20000;
  for (int i = 0; i < n; ++i) {
    double x = r.normal();
    sum += x;
    sq += x * x;
  }
  REQUIRE(std::abs(sum / n) < 0.03);
  REQUIRE(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("derive_seed is stable and purpose-separated") {
  REQUIRE(derive_seed(1, "a") == derive_seed(1, "a"));
  REQUIRE(derive_seed(1, "a") != derive_seed(1, "b"));
  REQUIRE(derive_seed(1, "a", 0) != derive_seed(1, "a", 1));
}

TEST_CASE("weighted pick follows weights") {
  Rng r(3);
  std::vector<double> w = {0.5, 0.3, 0.2};
  std::vector<int> counts(3, 0);
  int n = 30000;
  for (int i = 0; i < n; ++i) counts[static_cast<std::size_t>(r.pick_weighted(w))]++;
  for (int i = 0; i < 3; ++i) REQUIRE(std::abs(counts[static_cast<std::size_t>(i)] / double(n) - w[static_cast<std::size_t>(i)]) < 0.02);
}

TEST_CASE("tensor basics") {
  Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  REQUIRE(t.at(1, 2) == 6.0);
  REQUIRE(t.size() == 6);
  REQUIRE(t.reshaped({3, 2}).at(2, 1) == 6.0);
  REQUIRE_THROWS_AS(t.reshaped({4, 2}), ConfigError);
  REQUIRE(bitwise_equal(t, t));
}

// ---------------------------------------------------------------------------
// autodiff

namespace {

// FD oracle over a scalar-valued graph builder.
double fd_check(const std::function<Var(const Var&)>& f, const Tensor& x0, int probes = 40,
                double step = 1e-6) {
  auto loss = [&f, &x0](const std::vector<double>& p) {
    NoGradScope ng;
    return f(Var::constant(Tensor::from(x0.shape(), p))).value().item();
  };
  auto grad = [&f, &x0](const std::vector<double>& p) {
    Var v = Var::leaf(Tensor::from(x0.shape(), p));
    return grad_of(f(v), v).raw();
  };
  return evalkit::finite_difference_check(loss, grad, x0.raw(), probes, step);
}

}  // namespace

TEST_CASE("autodiff elementwise and reduction gradients") {
  Rng r(5);
  Tensor x = Tensor::randn({4, 5}, r);
  REQUIRE(fd_check([](const Var& v) { return sum_all(mul(v, v)); }, x) < 1e-7);
  REQUIRE(fd_check([](const Var& v) { return mean_all(exp_(scale(v, 0.3))); }, x) < 1e-7);
  REQUIRE(fd_check([](const Var& v) { return sum_all(sqrt_(add_scalar(square(v), 1.0))); }, x) < 1e-7);
  REQUIRE(fd_check([](const Var& v) { return sum_all(square(row_sum(v))); }, x) < 1e-7);
  REQUIRE(fd_check([](const Var& v) { return sum_all(square(col_sum(v))); }, x) < 1e-7);
  REQUIRE(fd_check([](const Var& v) { return sum_all(square(logsumexp_rows(v))); }, x) < 1e-7);
  REQUIRE(fd_check([](const Var& v) { return sum_all(square(softmax_rows(v))); }, x) < 1e-6);
}

TEST_CASE("autodiff matmul chain gradient") {
  Rng r(9);
  Tensor a = Tensor::randn({3, 4}, r);
  Tensor w = Tensor::randn({4, 2}, r);
  Var wv = Var::constant(w);
  REQUIRE(fd_check([&wv](const Var& v) { return sum_all(square(relu(matmul(v, wv)))); }, a) < 1e-7);

  Var av = Var::constant(a);
  auto lossw = [&av](const Var& v) { return sum_all(square(relu(matmul(av, v)))); };
  REQUIRE(fd_check(lossw, w) < 1e-7);
}

TEST_CASE("cross entropy gradient and value") {
  Tensor logits = Tensor::from({2, 3}, {1.0, 2.0, 0.5, -1.0, 0.0, 3.0});
  std::vector<int> y = {1, 2};
  Var v = Var::leaf(logits);
  Var l = cross_entropy_mean(v, y);
  // brute-force value
  double expect = 0.0;
  for (int i = 0; i < 2; ++i) {
    double z = 0.0;
    for (int c = 0; c < 3; ++c) z += std::exp(logits.at(i, c));
    expect += std::log(z) - logits.at(i, y[static_cast<std::size_t>(i)]);
  }
  expect /= 2.0;
  REQUIRE(l.value().item() == Catch::Approx(expect).epsilon(1e-12));
  REQUIRE(fd_check([&y](const Var& vv) { return cross_entropy_mean(vv, y); }, logits) < 1e-7);
}

TEST_CASE("slice, concat, gather gradients") {
  Rng r(13);
  Tensor x = Tensor::randn({6, 3}, r);
  REQUIRE(fd_check([](const Var& v) {
            Var top = slice_rows(v, 0, 2);
            Var bot = slice_rows(v, 3, 6);
            return sum_all(square(concat_rows({top, bot, top})));
          }, x) < 1e-7);
  REQUIRE(fd_check([](const Var& v) {
            return sum_all(square(gather2(v, {{0, 0}, {5, 2}, {0, 0}})));
          }, x) < 1e-7);
  REQUIRE(fd_check([](const Var& v) {
            return sum_all(square(mean_axis1(reshape(v, {2, 3, 3}))));
          }, x) < 1e-7);
  REQUIRE(fd_check([](const Var& v) { return sum_all(square(col_reduce_extreme(v, true))); }, x) < 1e-7);
}

TEST_CASE("normalize_rows rejects zero rows and is scale invariant") {
  Tensor z({2, 3});
  z.at(0, 0) = 1.0;  // row 1 all zeros
  REQUIRE_THROWS_AS(normalize_rows(Var::constant(z)), NumericalError);

  Rng r(21);
  Tensor x = Tensor::randn({4, 3}, r);
  NoGradScope ng;
  Tensor n1 = normalize_rows(Var::constant(x)).value();
  for (long i = 0; i < x.size(); ++i) x[i] *= 7.5;
  Tensor n2 = normalize_rows(Var::constant(x)).value();
  REQUIRE(max_abs_diff(n1, n2) < 1e-15);
}

TEST_CASE("conv2d matches direct convolution and its gradient checks out") {
  Rng r(31);
  Tensor x = Tensor::randn({2, 2, 5, 5}, r);
  Tensor w = Tensor::randn({3, 2, 3, 3}, r);
  Tensor b = Tensor::randn({3}, r);

  NoGradScope ng_value;
  Tensor y = conv2d(Var::constant(x), Var::constant(w), Var::constant(b), 1).value();
  REQUIRE(y.shape() == std::vector<int>({2, 3, 5, 5}));
  // direct evaluation at a few positions
  for (auto [n, f, oi, oj] : std::vector<std::array<int, 4>>{{0, 0, 0, 0}, {1, 2, 4, 4}, {0, 1, 2, 3}}) {
    double acc = b[f];
    for (int c = 0; c < 2; ++c)
      for (int ki = 0; ki < 3; ++ki)
        for (int kj = 0; kj < 3; ++kj) {
          int ii = oi + ki - 1, jj = oj + kj - 1;
          if (ii < 0 || ii >= 5 || jj < 0 || jj >= 5) continue;
          acc += x[((static_cast<long>(n) * 2 + c) * 5 + ii) * 5 + jj] *
                 w[((static_cast<long>(f) * 2 + c) * 3 + ki) * 3 + kj];
        }
    REQUIRE(y[((static_cast<long>(n) * 3 + f) * 5 + oi) * 5 + oj] == Catch::Approx(acc).epsilon(1e-12));
  }
}

TEST_CASE("conv, pool and film gradients via finite differences") {
  Rng r(33);
  Tensor x = Tensor::randn({2, 2, 6, 6}, r);
  Tensor w = Tensor::randn({2, 2, 3, 3}, r);
  Tensor b = Tensor::randn({2}, r);
  Tensor gamma = Tensor::randn({2}, r);
  Tensor beta = Tensor::randn({2}, r);

  Var wv = Var::constant(w), bv = Var::constant(b);
  REQUIRE(fd_check([&wv, &bv](const Var& v) {
            return sum_all(square(avgpool2x2(relu(conv2d(v, wv, bv, 1)))));
          }, x, 40, 1e-5) < 1e-6);

  Var xv = Var::constant(x);
  REQUIRE(fd_check([&xv, &bv](const Var& v) {
            return sum_all(square(conv2d(xv, v, bv, 1)));
          }, w, 40, 1e-5) < 1e-6);

  Var gv = Var::constant(gamma), betav = Var::constant(beta);
  REQUIRE(fd_check([&gv, &betav](const Var& v) {
            return sum_all(square(film_channels(v, gv, betav)));
          }, x, 40, 1e-5) < 1e-6);
  REQUIRE(fd_check([&xv, &betav](const Var& v) {
            return sum_all(square(film_channels(xv, v, betav)));
          }, gamma, 8, 1e-5) < 1e-6);
}

TEST_CASE("second-order gradients through a gradient-descent step") {
  // f(w) = loss(w - a * dloss/dw): the double-backward path the exact
  // second-order meta-learning option relies on.
  Rng r(55);
  Tensor w0 = Tensor::randn({3, 2}, r);
  Tensor xin = Tensor::randn({4, 3}, r);
  std::vector<int> y = {0, 1, 1, 0};
  double a = 0.2;

  auto meta_loss = [&](const Var& w) {
    Var inner = cross_entropy_mean(matmul(Var::constant(xin), w), y);
    Var g = grad_all(inner, {w}, /*create_graph=*/true)[0];
    Var w1 = sub(w, scale(g, a));
    return cross_entropy_mean(matmul(Var::constant(xin), w1), y);
  };

  auto loss = [&](const std::vector<double>& p) {
    Var w = Var::leaf(Tensor::from(w0.shape(), p));
    return meta_loss(w).value().item();
  };
  auto grad = [&](const std::vector<double>& p) {
    Var w = Var::leaf(Tensor::from(w0.shape(), p));
    return grad_of(meta_loss(w), w).raw();
  };
  // central differences see the true (second-order) derivative
  REQUIRE(evalkit::finite_difference_check(loss, grad, w0.raw(), 24, 1e-5) < 1e-6);
}

TEST_CASE("second-order through conv ops is rejected") {
  Rng r(60);
  Var x = Var::leaf(Tensor::randn({1, 1, 4, 4}, r));
  Var w = Var::leaf(Tensor::randn({1, 1, 3, 3}, r));
  Var b = Var::leaf(Tensor::zeros({1}));
  Var loss = sum_all(square(conv2d(x, w, b, 1)));
  REQUIRE_THROWS_AS(grad_all(loss, {w}, /*create_graph=*/true), ConfigError);
}

TEST_CASE("optimizers are deterministic") {
  auto run = []() {
    Var p = Var::leaf(Tensor::from({2}, {1.0, -2.0}));
    std::vector<Var> params = {p};
    AdamOptimizer opt(0.1);
    for (int i = 0; i < 5; ++i) {
      std::vector<Tensor> g = {Tensor::from({2}, {0.5, -0.25})};
      opt.step(params, g);
    }
    return p.value();
  };
  REQUIRE(bitwise_equal(run(), run()));
}
