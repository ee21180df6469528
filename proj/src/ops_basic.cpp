#include <algorithm>
#include <cmath>

#include "ndl/ops.hpp"

namespace ndl::ops {

TensorPtr relu(Graph* g, const TensorPtr& x) {
  auto out = make_tensor(x->shape);
  const std::size_t n = x->values.size();
  for (std::size_t i = 0; i < n; ++i)
    out->values[i] = x->values[i] > 0.0 ? x->values[i] : 0.0;
  if (g) {
    TensorPtr x_p = x, out_p = out;
    g->record("relu", {x_p}, out, [x_p, out_p]() {
      x_p->ensure_grad();
      const std::size_t n = x_p->values.size();
      for (std::size_t i = 0; i < n; ++i)
        if (x_p->values[i] > 0.0) x_p->grad[i] += out_p->grad[i];
    });
  }
  return out;
}

TensorPtr sigmoid(Graph* g, const TensorPtr& x) {
  auto out = make_tensor(x->shape);
  const std::size_t n = x->values.size();
  for (std::size_t i = 0; i < n; ++i)
    out->values[i] = 1.0 / (1.0 + std::exp(-x->values[i]));
  if (g) {
    TensorPtr x_p = x, out_p = out;
    g->record("sigmoid", {x_p}, out, [x_p, out_p]() {
      x_p->ensure_grad();
      const std::size_t n = x_p->values.size();
      for (std::size_t i = 0; i < n; ++i) {
        const double s = out_p->values[i];
        x_p->grad[i] += out_p->grad[i] * s * (1.0 - s);
      }
    });
  }
  return out;
}

TensorPtr softmax(Graph* g, const TensorPtr& x) {
  if (x->ndim() != 2)
    throw ShapeError("softmax: input must be [b,k], got " + shape_str(x->shape));
  const int b = x->dim(0), k = x->dim(1);
  auto out = make_tensor(x->shape);
  for (int i = 0; i < b; ++i) {
    const double* row = x->values.data() + static_cast<std::int64_t>(i) * k;
    double* orow = out->values.data() + static_cast<std::int64_t>(i) * k;
    double mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < k; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    const double inv = 1.0 / denom;
    for (int j = 0; j < k; ++j) orow[j] *= inv;
  }
  if (g) {
    TensorPtr x_p = x, out_p = out;
    g->record("softmax", {x_p}, out, [x_p, out_p, b, k]() {
      x_p->ensure_grad();
      for (int i = 0; i < b; ++i) {
        const double* p = out_p->values.data() + static_cast<std::int64_t>(i) * k;
        const double* go = out_p->grad.data() + static_cast<std::int64_t>(i) * k;
        double* gx = x_p->grad.data() + static_cast<std::int64_t>(i) * k;
        double dot = 0.0;
        for (int j = 0; j < k; ++j) dot += go[j] * p[j];
        for (int j = 0; j < k; ++j) gx[j] += p[j] * (go[j] - dot);
      }
    });
  }
  return out;
}

TensorPtr max_pool_xy(Graph* g, const TensorPtr& x) {
  if (x->ndim() != 5)
    throw ShapeError("max_pool_xy: input must be [b,c,z,y,x], got " +
                     shape_str(x->shape));
  const int b = x->dim(0), c = x->dim(1), z = x->dim(2), y = x->dim(3),
            xx = x->dim(4);
  if (y % 2 != 0 || xx % 2 != 0)
    throw ShapeError("max_pool_xy: y and x must be even, got " +
                     shape_str(x->shape));
  const int yo = y / 2, xo = xx / 2;
  auto out = make_tensor({b, c, z, yo, xo});
  // Flat input index of each window max, for the backward scatter.
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out->values.size());

  const double* xv = x->values.data();
  double* ov = out->values.data();
  std::int64_t* am = argmax->data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int bi = 0; bi < b; ++bi) {
    for (int ci = 0; ci < c; ++ci) {
      const std::int64_t ibase =
          (static_cast<std::int64_t>(bi) * c + ci) * z * y * xx;
      const std::int64_t obase =
          (static_cast<std::int64_t>(bi) * c + ci) * z * yo * xo;
      for (int zi = 0; zi < z; ++zi) {
        for (int oy = 0; oy < yo; ++oy) {
          for (int ox = 0; ox < xo; ++ox) {
            std::int64_t best_idx =
                ibase + (static_cast<std::int64_t>(zi) * y + 2 * oy) * xx + 2 * ox;
            double best = xv[best_idx];
            // Row-major window scan; strictly-greater keeps the first on ties.
            for (int dy = 0; dy < 2; ++dy) {
              for (int dx = 0; dx < 2; ++dx) {
                const std::int64_t idx =
                    ibase +
                    (static_cast<std::int64_t>(zi) * y + 2 * oy + dy) * xx +
                    2 * ox + dx;
                if (xv[idx] > best) {
                  best = xv[idx];
                  best_idx = idx;
                }
              }
            }
            const std::int64_t oidx =
                obase + (static_cast<std::int64_t>(zi) * yo + oy) * xo + ox;
            ov[oidx] = best;
            am[oidx] = best_idx;
          }
        }
      }
    }
  }

  if (g) {
    TensorPtr x_p = x, out_p = out;
    g->record("max_pool_xy", {x_p}, out, [x_p, out_p, argmax]() {
      x_p->ensure_grad();
      const std::size_t n = out_p->values.size();
      for (std::size_t i = 0; i < n; ++i)
        x_p->grad[static_cast<std::size_t>((*argmax)[i])] += out_p->grad[i];
    });
  }
  return out;
}

namespace {

// Half-pixel-center source taps for factor-2 upsampling of a 1-d extent.
struct LerpTap {
  int i0, i1;
  double w0, w1;
};

std::vector<LerpTap> lerp_taps(int in_size) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(2 * in_size));
  for (int o = 0; o < 2 * in_size; ++o) {
    double s = (o + 0.5) / 2.0 - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in_size - 1));
    const int i0 = static_cast<int>(std::floor(s));
    const int i1 = std::min(i0 + 1, in_size - 1);
    const double w1 = s - static_cast<double>(i0);
    taps[static_cast<std::size_t>(o)] = {i0, i1, 1.0 - w1, w1};
  }
  return taps;
}

}  // namespace

TensorPtr bilinear_upsample_xy(Graph* g, const TensorPtr& x) {
  if (x->ndim() != 5)
    throw ShapeError("bilinear_upsample_xy: input must be [b,c,z,y,x], got " +
                     shape_str(x->shape));
  const int b = x->dim(0), c = x->dim(1), z = x->dim(2), y = x->dim(3),
            xx = x->dim(4);
  const int yo = 2 * y, xo = 2 * xx;
  auto out = make_tensor({b, c, z, yo, xo});

  auto ty = std::make_shared<std::vector<LerpTap>>(lerp_taps(y));
  auto tx = std::make_shared<std::vector<LerpTap>>(lerp_taps(xx));

  const double* xv = x->values.data();
  double* ov = out->values.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int bi = 0; bi < b; ++bi) {
    for (int ci = 0; ci < c; ++ci) {
      for (int zi = 0; zi < z; ++zi) {
        const double* plane =
            xv + ((static_cast<std::int64_t>(bi) * c + ci) * z + zi) * y * xx;
        double* oplane =
            ov + ((static_cast<std::int64_t>(bi) * c + ci) * z + zi) * yo * xo;
        for (int oy = 0; oy < yo; ++oy) {
          const LerpTap& a = (*ty)[static_cast<std::size_t>(oy)];
          const double* r0 = plane + static_cast<std::int64_t>(a.i0) * xx;
          const double* r1 = plane + static_cast<std::int64_t>(a.i1) * xx;
          double* orow = oplane + static_cast<std::int64_t>(oy) * xo;
          for (int ox = 0; ox < xo; ++ox) {
            const LerpTap& t = (*tx)[static_cast<std::size_t>(ox)];
            orow[ox] = a.w0 * (t.w0 * r0[t.i0] + t.w1 * r0[t.i1]) +
                       a.w1 * (t.w0 * r1[t.i0] + t.w1 * r1[t.i1]);
          }
        }
      }
    }
  }

  if (g) {
    TensorPtr x_p = x, out_p = out;
    g->record("bilinear_upsample_xy", {x_p}, out, [x_p, out_p, ty, tx, b, c, z, y, xx]() {
      x_p->ensure_grad();
      const int yo = 2 * y, xo = 2 * xx;
      const double* go = out_p->grad.data();
      double* gx = x_p->grad.data();
#pragma omp parallel for collapse(2) schedule(static)
      for (int bi = 0; bi < b; ++bi) {
        for (int ci = 0; ci < c; ++ci) {
          for (int zi = 0; zi < z; ++zi) {
            double* gplane =
                gx + ((static_cast<std::int64_t>(bi) * c + ci) * z + zi) * y * xx;
            const double* goplane =
                go + ((static_cast<std::int64_t>(bi) * c + ci) * z + zi) * yo * xo;
            for (int oy = 0; oy < yo; ++oy) {
              const LerpTap& a = (*ty)[static_cast<std::size_t>(oy)];
              double* r0 = gplane + static_cast<std::int64_t>(a.i0) * xx;
              double* r1 = gplane + static_cast<std::int64_t>(a.i1) * xx;
              const double* gorow = goplane + static_cast<std::int64_t>(oy) * xo;
              for (int ox = 0; ox < xo; ++ox) {
                const LerpTap& t = (*tx)[static_cast<std::size_t>(ox)];
                const double v = gorow[ox];
                r0[t.i0] += a.w0 * t.w0 * v;
                r0[t.i1] += a.w0 * t.w1 * v;
                r1[t.i0] += a.w1 * t.w0 * v;
                r1[t.i1] += a.w1 * t.w1 * v;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

TensorPtr fully_connected(Graph* g, const TensorPtr& x, const TensorPtr& weight,
                          const TensorPtr& bias) {
  if (x->ndim() != 2 || weight->ndim() != 2 || bias->ndim() != 1)
    throw ShapeError("fully_connected: expected x[b,n], weight[m,n], bias[m]");
  const int b = x->dim(0), n = x->dim(1), m = weight->dim(0);
  if (weight->dim(1) != n || bias->dim(0) != m)
    throw ShapeError("fully_connected: dimension mismatch, x " +
                     shape_str(x->shape) + " weight " + shape_str(weight->shape) +
                     " bias " + shape_str(bias->shape));

  auto out = make_tensor({b, m});
  const double* xv = x->values.data();
  const double* wv = weight->values.data();
  const double* bv = bias->values.data();
  double* ov = out->values.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int i = 0; i < b; ++i) {
    for (int j = 0; j < m; ++j) {
      const double* xr = xv + static_cast<std::int64_t>(i) * n;
      const double* wr = wv + static_cast<std::int64_t>(j) * n;
      double acc = bv[j];
      for (int k = 0; k < n; ++k) acc += xr[k] * wr[k];
      ov[static_cast<std::int64_t>(i) * m + j] = acc;
    }
  }

  if (g) {
    TensorPtr x_p = x, w_p = weight, b_p = bias, out_p = out;
    g->record("fully_connected", {x_p, w_p, b_p}, out, [x_p, w_p, b_p, out_p, b, n, m]() {
      x_p->ensure_grad();
      w_p->ensure_grad();
      b_p->ensure_grad();
      const double* go = out_p->grad.data();
      const double* xv = x_p->values.data();
      const double* wv = w_p->values.data();
      double* gx = x_p->grad.data();
      double* gw = w_p->grad.data();
      double* gb = b_p->grad.data();

#pragma omp parallel for schedule(static)
      for (int i = 0; i < b; ++i) {
        double* gxr = gx + static_cast<std::int64_t>(i) * n;
        const double* gor = go + static_cast<std::int64_t>(i) * m;
        for (int j = 0; j < m; ++j) {
          const double gij = gor[j];
          const double* wr = wv + static_cast<std::int64_t>(j) * n;
          for (int k = 0; k < n; ++k) gxr[k] += gij * wr[k];
        }
      }

#pragma omp parallel for schedule(static)
      for (int j = 0; j < m; ++j) {
        double* gwr = gw + static_cast<std::int64_t>(j) * n;
        double bacc = 0.0;
        for (int i = 0; i < b; ++i) {
          const double gij = go[static_cast<std::int64_t>(i) * m + j];
          bacc += gij;
          const double* xr = xv + static_cast<std::int64_t>(i) * n;
          for (int k = 0; k < n; ++k) gwr[k] += gij * xr[k];
        }
        gb[j] += bacc;
      }
    });
  }
  return out;
}

TensorPtr flatten_to_rows(Graph* g, const TensorPtr& x) {
  if (x->ndim() < 2)
    throw ShapeError("flatten_to_rows: need at least 2 dims, got " +
                     shape_str(x->shape));
  const int b = x->dim(0);
  const int n = static_cast<int>(x->size() / b);
  auto out = make_tensor({b, n});
  out->values = x->values;
  if (g) {
    TensorPtr x_p = x, out_p = out;
    g->record("flatten_to_rows", {x_p}, out, [x_p, out_p]() {
      x_p->ensure_grad();
      const std::size_t n = x_p->grad.size();
      for (std::size_t i = 0; i < n; ++i) x_p->grad[i] += out_p->grad[i];
    });
  }
  return out;
}

TensorPtr concat_channels(Graph* g, const TensorPtr& a, const TensorPtr& b) {
  if (a->ndim() != 5 || b->ndim() != 5)
    throw ShapeError("concat_channels: inputs must be [b,c,z,y,x]");
  if (a->dim(0) != b->dim(0) || a->dim(2) != b->dim(2) ||
      a->dim(3) != b->dim(3) || a->dim(4) != b->dim(4))
    throw ShapeError("concat_channels: non-channel dims differ, " +
                     shape_str(a->shape) + " vs " + shape_str(b->shape));
  const int nb = a->dim(0), ca = a->dim(1), cb = b->dim(1);
  const std::int64_t sp =
      static_cast<std::int64_t>(a->dim(2)) * a->dim(3) * a->dim(4);
  auto out = make_tensor({nb, ca + cb, a->dim(2), a->dim(3), a->dim(4)});
  for (int i = 0; i < nb; ++i) {
    std::copy(a->values.begin() + i * ca * sp, a->values.begin() + (i + 1) * ca * sp,
              out->values.begin() + static_cast<std::int64_t>(i) * (ca + cb) * sp);
    std::copy(b->values.begin() + i * cb * sp, b->values.begin() + (i + 1) * cb * sp,
              out->values.begin() + static_cast<std::int64_t>(i) * (ca + cb) * sp +
                  ca * sp);
  }
  if (g) {
    TensorPtr a_p = a, b_p = b, out_p = out;
    g->record("concat_channels", {a_p, b_p}, out, [a_p, b_p, out_p, nb, ca, cb, sp]() {
      a_p->ensure_grad();
      b_p->ensure_grad();
      const double* go = out_p->grad.data();
      for (int i = 0; i < nb; ++i) {
        const double* src = go + static_cast<std::int64_t>(i) * (ca + cb) * sp;
        double* ga = a_p->grad.data() + static_cast<std::int64_t>(i) * ca * sp;
        double* gb = b_p->grad.data() + static_cast<std::int64_t>(i) * cb * sp;
        for (std::int64_t j = 0; j < ca * sp; ++j) ga[j] += src[j];
        for (std::int64_t j = 0; j < cb * sp; ++j) gb[j] += src[ca * sp + j];
      }
    });
  }
  return out;
}

TensorPtr add(Graph* g, const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape)
    throw ShapeError("add: shape mismatch " + shape_str(a->shape) + " vs " +
                     shape_str(b->shape));
  auto out = make_tensor(a->shape);
  for (std::size_t i = 0; i < a->values.size(); ++i)
    out->values[i] = a->values[i] + b->values[i];
  if (g) {
    TensorPtr a_p = a, b_p = b, out_p = out;
    g->record("add", {a_p, b_p}, out, [a_p, b_p, out_p]() {
      a_p->ensure_grad();
      b_p->ensure_grad();
      for (std::size_t i = 0; i < out_p->grad.size(); ++i) {
        a_p->grad[i] += out_p->grad[i];
        b_p->grad[i] += out_p->grad[i];
      }
    });
  }
  return out;
}

TensorPtr mul(Graph* g, const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape)
    throw ShapeError("mul: shape mismatch " + shape_str(a->shape) + " vs " +
                     shape_str(b->shape));
  auto out = make_tensor(a->shape);
  for (std::size_t i = 0; i < a->values.size(); ++i)
    out->values[i] = a->values[i] * b->values[i];
  if (g) {
    TensorPtr a_p = a, b_p = b, out_p = out;
    g->record("mul", {a_p, b_p}, out, [a_p, b_p, out_p]() {
      a_p->ensure_grad();
      b_p->ensure_grad();
      for (std::size_t i = 0; i < out_p->grad.size(); ++i) {
        a_p->grad[i] += out_p->grad[i] * b_p->values[i];
        b_p->grad[i] += out_p->grad[i] * a_p->values[i];
      }
    });
  }
  return out;
}

TensorPtr scale(Graph* g, const TensorPtr& x, double k) {
  auto out = make_tensor(x->shape);
  for (std::size_t i = 0; i < x->values.size(); ++i)
    out->values[i] = k * x->values[i];
  if (g) {
    TensorPtr x_p = x, out_p = out;
    g->record("scale", {x_p}, out, [x_p, out_p, k]() {
      x_p->ensure_grad();
      for (std::size_t i = 0; i < out_p->grad.size(); ++i)
        x_p->grad[i] += k * out_p->grad[i];
    });
  }
  return out;
}

TensorPtr sum(Graph* g, const TensorPtr& x) {
  auto out = make_tensor(Shape{1});
  double acc = 0.0;
  for (double v : x->values) acc += v;
  out->values[0] = acc;
  if (g) {
    TensorPtr x_p = x, out_p = out;
    g->record("sum", {x_p}, out, [x_p, out_p]() {
      x_p->ensure_grad();
      const double go = out_p->grad[0];
      for (std::size_t i = 0; i < x_p->grad.size(); ++i) x_p->grad[i] += go;
    });
  }
  return out;
}

}  // namespace ndl::ops
