#pragma once

#include <memory>

#include "taskcl/autodiff.hpp"

namespace taskcl {

namespace detail {

// cols layout: [C*kh*kw, N*OH*OW]; column index = (n*OH + oh)*OW + ow.
inline Tensor im2col(const Tensor& x, int kh, int kw, int pad) {
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int OH = H + 2 * pad - kh + 1;
  int OW = W + 2 * pad - kw + 1;
  Tensor cols({C * kh * kw, N * OH * OW});
  long ncols = static_cast<long>(N) * OH * OW;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        long row = (static_cast<long>(c) * kh + ki) * kw + kj;
        double* dst = cols.data() + row * ncols;
        for (int n = 0; n < N; ++n) {
          const double* img = x.data() + (static_cast<long>(n) * C + c) * H * W;
          for (int oh = 0; oh < OH; ++oh) {
            int ih = oh + ki - pad;
            for (int ow = 0; ow < OW; ++ow) {
              int iw = ow + kj - pad;
              *dst++ = (ih >= 0 && ih < H && iw >= 0 && iw < W)
                           ? img[static_cast<long>(ih) * W + iw]
                           : 0.0;
            }
          }
        }
      }
    }
  }
  return cols;
}

inline Tensor col2im(const Tensor& cols, int N, int C, int H, int W, int kh, int kw, int pad) {
  int OH = H + 2 * pad - kh + 1;
  int OW = W + 2 * pad - kw + 1;
  Tensor x({N, C, H, W});
  long ncols = static_cast<long>(N) * OH * OW;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        long row = (static_cast<long>(c) * kh + ki) * kw + kj;
        const double* src = cols.data() + row * ncols;
        for (int n = 0; n < N; ++n) {
          double* img = x.data() + (static_cast<long>(n) * C + c) * H * W;
          for (int oh = 0; oh < OH; ++oh) {
            int ih = oh + ki - pad;
            for (int ow = 0; ow < OW; ++ow) {
              int iw = ow + kj - pad;
              if (ih >= 0 && ih < H && iw >= 0 && iw < W) img[static_cast<long>(ih) * W + iw] += *src;
              ++src;
            }
          }
        }
      }
    }
  }
  return x;
}

}  // namespace detail

/**
 * conv2d, stride 1. x [N,C,H,W], w [F,C,kh,kw], b [F] -> [N,F,OH,OW].
 * First-order only (the vjp runs raw kernels); second-order meta-learning is
 * restricted to MLP backbones.
 */
inline Var conv2d(const Var& x, const Var& w, const Var& b, int pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(1) != wv.dim(1))
    throw ConfigError("conv2d: bad shapes " + xv.shape_str() + " / " + wv.shape_str());
  int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int F = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (b.value().rank() != 1 || b.value().dim(0) != F) throw ConfigError("conv2d: bias shape");
  int OH = H + 2 * pad - kh + 1;
  int OW = W + 2 * pad - kw + 1;
  if (OH <= 0 || OW <= 0) throw ConfigError("conv2d: kernel larger than padded input");

  auto cols = std::make_shared<Tensor>(detail::im2col(xv, kh, kw, pad));
  long ncols = static_cast<long>(N) * OH * OW;
  Tensor wmat = wv.reshaped({F, C * kh * kw});
  Tensor outmat({F, static_cast<int>(ncols)});
  outmat.mat().noalias() = wmat.mat() * cols->mat();

  Tensor out({N, F, OH, OW});
  long plane = static_cast<long>(OH) * OW;
  for (int n = 0; n < N; ++n)
    for (int f = 0; f < F; ++f) {
      const double* src = outmat.data() + f * ncols + n * plane;
      double* dst = out.data() + (static_cast<long>(n) * F + f) * plane;
      double bias = b.value()[f];
      for (long i = 0; i < plane; ++i) dst[i] = src[i] + bias;
    }

  auto vjp = [cols, N, C, H, W, F, kh, kw, pad, OH, OW, w](const Var& g) {
    const Tensor& gy = g.value();
    long plane = static_cast<long>(OH) * OW;
    long ncols = static_cast<long>(N) * plane;
    Tensor gymat({F, static_cast<int>(ncols)});
    Tensor gb({F});
    for (int n = 0; n < N; ++n)
      for (int f = 0; f < F; ++f) {
        const double* src = gy.data() + (static_cast<long>(n) * F + f) * plane;
        double* dst = gymat.data() + f * ncols + n * plane;
        double acc = 0.0;
        for (long i = 0; i < plane; ++i) {
          dst[i] = src[i];
          acc += src[i];
        }
        gb[f] += acc;
      }
    Tensor gwmat({F, C * kh * kw});
    gwmat.mat().noalias() = gymat.mat() * cols->mat().transpose();
    Tensor wmat = w.value().reshaped({F, C * kh * kw});
    Tensor gcols({C * kh * kw, static_cast<int>(ncols)});
    gcols.mat().noalias() = wmat.mat().transpose() * gymat.mat();
    Tensor gx = detail::col2im(gcols, N, C, H, W, kh, kw, pad);
    return std::vector<Var>{Var::constant(std::move(gx)),
                            Var::constant(gwmat.reshaped({F, C, kh, kw})),
                            Var::constant(std::move(gb))};
  };
  return make_op("conv2d", std::move(out), {x, w, b}, vjp, /*higher_order_ok=*/false);
}

// 2x2 average pooling, stride 2; odd trailing row/column dropped.
inline Var avgpool2x2(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw ConfigError("avgpool2x2: rank-4 required");
  int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int OH = H / 2, OW = W / 2;
  if (OH == 0 || OW == 0) throw ConfigError("avgpool2x2: input too small");
  Tensor out({N, C, OH, OW});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* img = xv.data() + (static_cast<long>(n) * C + c) * H * W;
      double* dst = out.data() + (static_cast<long>(n) * C + c) * OH * OW;
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow)
          dst[static_cast<long>(oh) * OW + ow] =
              0.25 * (img[static_cast<long>(2 * oh) * W + 2 * ow] +
                      img[static_cast<long>(2 * oh) * W + 2 * ow + 1] +
                      img[static_cast<long>(2 * oh + 1) * W + 2 * ow] +
                      img[static_cast<long>(2 * oh + 1) * W + 2 * ow + 1]);
    }
  auto vjp = [N, C, H, W, OH, OW](const Var& g) {
    Tensor gx({N, C, H, W});
    const Tensor& gy = g.value();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        double* img = gx.data() + (static_cast<long>(n) * C + c) * H * W;
        const double* src = gy.data() + (static_cast<long>(n) * C + c) * OH * OW;
        for (int oh = 0; oh < OH; ++oh)
          for (int ow = 0; ow < OW; ++ow) {
            double v = 0.25 * src[static_cast<long>(oh) * OW + ow];
            img[static_cast<long>(2 * oh) * W + 2 * ow] += v;
            img[static_cast<long>(2 * oh) * W + 2 * ow + 1] += v;
            img[static_cast<long>(2 * oh + 1) * W + 2 * ow] += v;
            img[static_cast<long>(2 * oh + 1) * W + 2 * ow + 1] += v;
          }
      }
    return std::vector<Var>{Var::constant(std::move(gx))};
  };
  return make_op("avgpool2x2", std::move(out), {x}, vjp, /*higher_order_ok=*/false);
}

// Channel-wise feature modulation: y[n,c,h,w] = gamma[c]*x[n,c,h,w] + beta[c].
inline Var film_channels(const Var& x, const Var& gamma, const Var& beta) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw ConfigError("film_channels: rank-4 required");
  int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (gamma.value().size() != C || beta.value().size() != C)
    throw ConfigError("film_channels: scale/shift length must equal channel count");
  long plane = static_cast<long>(H) * W;
  Tensor out({N, C, H, W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* src = xv.data() + (static_cast<long>(n) * C + c) * plane;
      double* dst = out.data() + (static_cast<long>(n) * C + c) * plane;
      double gc = gamma.value()[c], bc = beta.value()[c];
      for (long i = 0; i < plane; ++i) dst[i] = gc * src[i] + bc;
    }
  auto vjp = [x, gamma, N, C, plane](const Var& g) {
    const Tensor& gy = g.value();
    Tensor gx(x.value().shape());
    Tensor gg({C});
    Tensor gb({C});
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const double* gsrc = gy.data() + (static_cast<long>(n) * C + c) * plane;
        const double* xsrc = x.value().data() + (static_cast<long>(n) * C + c) * plane;
        double* gdst = gx.data() + (static_cast<long>(n) * C + c) * plane;
        double gc = gamma.value()[c];
        double acc_g = 0.0, acc_b = 0.0;
        for (long i = 0; i < plane; ++i) {
          gdst[i] = gc * gsrc[i];
          acc_g += gsrc[i] * xsrc[i];
          acc_b += gsrc[i];
        }
        gg[c] += acc_g;
        gb[c] += acc_b;
      }
    return std::vector<Var>{Var::constant(std::move(gx)), Var::constant(std::move(gg)),
                            Var::constant(std::move(gb))};
  };
  return make_op("film_channels", std::move(out), {x, gamma, beta}, vjp,
                 /*higher_order_ok=*/false);
}

// Unit-wise modulation for MLP features: y = x*gamma + beta row-broadcast.
// Built from tape ops, so it stays valid under double backward.
inline Var film_units(const Var& x, const Var& gamma, const Var& beta) {
  int rows = x.value().dim(0);
  return add(mul(x, bc_over_rows(gamma, rows)), bc_over_rows(beta, rows));
}

inline Var linear(const Var& x, const Var& w, const Var& b) {
  int rows = x.value().dim(0);
  return add(matmul(x, w), bc_over_rows(b, rows));
}

// ---------------------------------------------------------------------------
// optimizers

class SgdOptimizer {
 public:
  explicit SgdOptimizer(double lr) : lr_(lr) {}

  void step(std::vector<Var>& params, const std::vector<Tensor>& grads) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& v = params[i].value_mut();
      const Tensor& g = grads[i];
      for (long j = 0; j < v.size(); ++j) v[j] -= lr_ * g[j];
    }
  }

 private:
  double lr_;
};

class AdamOptimizer {
 public:
  explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::vector<Var>& params, const std::vector<Tensor>& grads) {
    if (m_.empty()) {
      for (const Var& p : params) {
        m_.push_back(Tensor::zeros(p.value().shape()));
        v_.push_back(Tensor::zeros(p.value().shape()));
      }
    }
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, t_);
    double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = params[i].value_mut();
      const Tensor& g = grads[i];
      for (long j = 0; j < p.size(); ++j) {
        m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
        v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
        double mh = m_[i][j] / bc1;
        double vh = v_[i][j] / bc2;
        p[j] -= lr_ * mh / (std::sqrt(vh) + eps_);
      }
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace taskcl
