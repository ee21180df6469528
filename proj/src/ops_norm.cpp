#include <cmath>

#include "ndl/ops.hpp"

namespace ndl::ops {

namespace {

struct BnDims {
  int b, c, sp;            // batch, channels, spatial elements per sample
  std::int64_t per_chan;   // b * sp
};

BnDims bn_dims(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  if (x.ndim() != 5)
    throw ShapeError("batch_norm: input must be [b,c,z,y,x], got " +
                     shape_str(x.shape));
  BnDims d;
  d.b = x.dim(0);
  d.c = x.dim(1);
  d.sp = x.dim(2) * x.dim(3) * x.dim(4);
  d.per_chan = static_cast<std::int64_t>(d.b) * d.sp;
  if (gamma.ndim() != 1 || gamma.dim(0) != d.c || beta.ndim() != 1 ||
      beta.dim(0) != d.c)
    throw ShapeError("batch_norm: gamma/beta must be [c] with c=" +
                     std::to_string(d.c));
  return d;
}

}  // namespace

TensorPtr batch_norm_train(Graph* g, const TensorPtr& x, const TensorPtr& gamma,
                           const TensorPtr& beta, BatchNormStats& stats,
                           double eps) {
  const BnDims d = bn_dims(*x, *gamma, *beta);
  if (eps <= 0.0) throw ConfigError("batch_norm: eps must be > 0");
  if (d.per_chan < 2)
    throw DataError(
        "batch_norm: batch statistics are degenerate with a single "
        "spatial-batch element");
  if (static_cast<int>(stats.mean.size()) != d.c)
    throw ShapeError("batch_norm: running stats have wrong channel count");

  auto out = make_tensor(x->shape);
  // xhat is saved for the backward pass and the gamma gradient.
  auto xhat = std::make_shared<std::vector<double>>(x->values.size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(d.c));

  const double* xv = x->values.data();
  double* ov = out->values.data();
  double* xh = xhat->data();
  const double* gm = gamma->values.data();
  const double* bt = beta->values.data();
  const double inv_m = 1.0 / static_cast<double>(d.per_chan);

#pragma omp parallel for schedule(static)
  for (int c = 0; c < d.c; ++c) {
    double mean = 0.0;
    for (int b = 0; b < d.b; ++b) {
      const double* row = xv + (static_cast<std::int64_t>(b) * d.c + c) * d.sp;
      for (int s = 0; s < d.sp; ++s) mean += row[s];
    }
    mean *= inv_m;
    double var = 0.0;
    for (int b = 0; b < d.b; ++b) {
      const double* row = xv + (static_cast<std::int64_t>(b) * d.c + c) * d.sp;
      for (int s = 0; s < d.sp; ++s) {
        const double t = row[s] - mean;
        var += t * t;
      }
    }
    var *= inv_m;  // biased, same normalizer train and infer
    const double istd = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(c)] = istd;

    for (int b = 0; b < d.b; ++b) {
      const std::int64_t off = (static_cast<std::int64_t>(b) * d.c + c) * d.sp;
      for (int s = 0; s < d.sp; ++s) {
        const double h = (xv[off + s] - mean) * istd;
        xh[off + s] = h;
        ov[off + s] = gm[c] * h + bt[c];
      }
    }

    stats.mean[static_cast<std::size_t>(c)] =
        (1.0 - stats.momentum) * stats.mean[static_cast<std::size_t>(c)] +
        stats.momentum * mean;
    stats.var[static_cast<std::size_t>(c)] =
        (1.0 - stats.momentum) * stats.var[static_cast<std::size_t>(c)] +
        stats.momentum * var;
  }

  if (g) {
    TensorPtr x_p = x, gm_p = gamma, bt_p = beta, out_p = out;
    g->record("batch_norm", {x_p, gm_p, bt_p}, out, [x_p, gm_p, bt_p, out_p, xhat, inv_std, d]() {
      x_p->ensure_grad();
      gm_p->ensure_grad();
      bt_p->ensure_grad();
      const double* go = out_p->grad.data();
      const double* xh = xhat->data();
      const double* gm = gm_p->values.data();
      double* gx = x_p->grad.data();
      double* ggm = gm_p->grad.data();
      double* gbt = bt_p->grad.data();
      const double inv_m = 1.0 / static_cast<double>(d.per_chan);

#pragma omp parallel for schedule(static)
      for (int c = 0; c < d.c; ++c) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (int b = 0; b < d.b; ++b) {
          const std::int64_t off = (static_cast<std::int64_t>(b) * d.c + c) * d.sp;
          for (int s = 0; s < d.sp; ++s) {
            sum_g += go[off + s];
            sum_gx += go[off + s] * xh[off + s];
          }
        }
        ggm[c] += sum_gx;
        gbt[c] += sum_g;

        const double k = gm[c] * (*inv_std)[static_cast<std::size_t>(c)] * inv_m;
        const double m = static_cast<double>(d.per_chan);
        for (int b = 0; b < d.b; ++b) {
          const std::int64_t off = (static_cast<std::int64_t>(b) * d.c + c) * d.sp;
          for (int s = 0; s < d.sp; ++s)
            gx[off + s] += k * (m * go[off + s] - sum_g - xh[off + s] * sum_gx);
        }
      }
    });
  }
  return out;
}

TensorPtr batch_norm_infer(Graph* g, const TensorPtr& x, const TensorPtr& gamma,
                           const TensorPtr& beta, const BatchNormStats& stats,
                           double eps) {
  const BnDims d = bn_dims(*x, *gamma, *beta);
  if (eps <= 0.0) throw ConfigError("batch_norm: eps must be > 0");
  if (static_cast<int>(stats.mean.size()) != d.c)
    throw ShapeError("batch_norm: running stats have wrong channel count");

  auto out = make_tensor(x->shape);
  const double* xv = x->values.data();
  double* ov = out->values.data();
  const double* gm = gamma->values.data();
  const double* bt = beta->values.data();

  std::vector<double> istd(static_cast<std::size_t>(d.c));
  for (int c = 0; c < d.c; ++c)
    istd[static_cast<std::size_t>(c)] =
        1.0 / std::sqrt(stats.var[static_cast<std::size_t>(c)] + eps);

#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < d.b; ++b) {
    for (int c = 0; c < d.c; ++c) {
      const std::int64_t off = (static_cast<std::int64_t>(b) * d.c + c) * d.sp;
      const double mu = stats.mean[static_cast<std::size_t>(c)];
      const double is = istd[static_cast<std::size_t>(c)];
      for (int s = 0; s < d.sp; ++s)
        ov[off + s] = gm[c] * (xv[off + s] - mu) * is + bt[c];
    }
  }

  if (g) {
    TensorPtr x_p = x, gm_p = gamma, bt_p = beta, out_p = out;
    std::vector<double> mu = stats.mean;
    auto istd_s = std::make_shared<std::vector<double>>(std::move(istd));
    auto mu_s = std::make_shared<std::vector<double>>(std::move(mu));
    g->record("batch_norm_infer", {x_p, gm_p, bt_p}, out, [x_p, gm_p, bt_p, out_p, istd_s, mu_s, d]() {
      x_p->ensure_grad();
      gm_p->ensure_grad();
      bt_p->ensure_grad();
      const double* go = out_p->grad.data();
      const double* xv = x_p->values.data();
      const double* gm = gm_p->values.data();
      double* gx = x_p->grad.data();
      double* ggm = gm_p->grad.data();
      double* gbt = bt_p->grad.data();
      for (int c = 0; c < d.c; ++c) {
        const double is = (*istd_s)[static_cast<std::size_t>(c)];
        const double mu = (*mu_s)[static_cast<std::size_t>(c)];
        double sum_g = 0.0, sum_gx = 0.0;
        for (int b = 0; b < d.b; ++b) {
          const std::int64_t off = (static_cast<std::int64_t>(b) * d.c + c) * d.sp;
          for (int s = 0; s < d.sp; ++s) {
            sum_g += go[off + s];
            sum_gx += go[off + s] * (xv[off + s] - mu) * is;
            gx[off + s] += go[off + s] * gm[c] * is;
          }
        }
        ggm[c] += sum_gx;
        gbt[c] += sum_g;
      }
    });
  }
  return out;
}

TensorPtr batch_norm(Graph* g, const TensorPtr& x, const TensorPtr& gamma,
                     const TensorPtr& beta, BatchNormStats& stats, Mode mode,
                     double eps) {
  return mode == Mode::Train
             ? batch_norm_train(g, x, gamma, beta, stats, eps)
             : batch_norm_infer(g, x, gamma, beta, stats, eps);
}

}  // namespace ndl::ops
