#include <algorithm>

#include "ndl/ops.hpp"

namespace ndl::ops {

namespace {

struct ConvDims {
  int b, cin, z, y, x;    // input
  int cout;               // kernel
  int zo, yo, xo;         // output
  int p;                  // pad per axis (1 same, 0 valid)
};

ConvDims conv_dims(const Tensor& in, const Tensor& ker, const Tensor& bias,
                   Padding padding) {
  if (in.ndim() != 5)
    throw ShapeError("conv3d: input must be [b,cin,z,y,x], got " +
                     shape_str(in.shape));
  if (ker.ndim() != 5)
    throw ShapeError("conv3d: kernel must be [cout,cin,3,3,3], got " +
                     shape_str(ker.shape));
  if (ker.dim(2) != 3 || ker.dim(3) != 3 || ker.dim(4) != 3)
    throw ConfigError("conv3d: kernel spatial extents must be 3x3x3, got " +
                      shape_str(ker.shape));
  if (ker.dim(1) != in.dim(1))
    throw ShapeError("conv3d: channel mismatch, input " + shape_str(in.shape) +
                     " vs kernel " + shape_str(ker.shape));
  if (bias.ndim() != 1 || bias.dim(0) != ker.dim(0))
    throw ShapeError("conv3d: bias must be [cout], got " + shape_str(bias.shape));

  ConvDims d;
  d.b = in.dim(0);
  d.cin = in.dim(1);
  d.z = in.dim(2);
  d.y = in.dim(3);
  d.x = in.dim(4);
  d.cout = ker.dim(0);
  d.p = padding == Padding::Same ? 1 : 0;
  if (padding == Padding::Valid && (d.z < 3 || d.y < 3 || d.x < 3))
    throw ShapeError("conv3d: valid padding needs spatial extents >= 3, got " +
                     shape_str(in.shape));
  d.zo = d.z - 2 + 2 * d.p;
  d.yo = d.y - 2 + 2 * d.p;
  d.xo = d.x - 2 + 2 * d.p;
  return d;
}

}  // namespace

TensorPtr conv3d(Graph* g, const TensorPtr& input, const TensorPtr& kernel,
                 const TensorPtr& bias, Padding padding) {
  const ConvDims d = conv_dims(*input, *kernel, *bias, padding);
  auto out = make_tensor({d.b, d.cout, d.zo, d.yo, d.xo});

  const double* in = input->values.data();
  const double* ker = kernel->values.data();
  const double* bs = bias->values.data();
  double* o = out->values.data();

  const std::int64_t in_sp = static_cast<std::int64_t>(d.z) * d.y * d.x;
  const std::int64_t out_sp = static_cast<std::int64_t>(d.zo) * d.yo * d.xo;

  // Each (b,co) output slice is owned by one iteration: accumulation order is
  // fixed per element, so results are identical for any thread count.
#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < d.b; ++b) {
    for (int co = 0; co < d.cout; ++co) {
      double* obc = o + (static_cast<std::int64_t>(b) * d.cout + co) * out_sp;
      std::fill(obc, obc + out_sp, bs[co]);
      for (int ci = 0; ci < d.cin; ++ci) {
        const double* ibc =
            in + (static_cast<std::int64_t>(b) * d.cin + ci) * in_sp;
        const double* kcc = ker + ((static_cast<std::int64_t>(co) * d.cin + ci)) * 27;
        for (int dz = 0; dz < 3; ++dz) {
          const int z_lo = std::max(0, d.p - dz);
          const int z_hi = std::min(d.zo, d.z + d.p - dz);
          for (int dy = 0; dy < 3; ++dy) {
            const int y_lo = std::max(0, d.p - dy);
            const int y_hi = std::min(d.yo, d.y + d.p - dy);
            for (int dx = 0; dx < 3; ++dx) {
              const int x_lo = std::max(0, d.p - dx);
              const int x_hi = std::min(d.xo, d.x + d.p - dx);
              if (x_lo >= x_hi) continue;
              const double w = kcc[(dz * 3 + dy) * 3 + dx];
              for (int zo = z_lo; zo < z_hi; ++zo) {
                const int zi = zo + dz - d.p;
                for (int yo = y_lo; yo < y_hi; ++yo) {
                  const int yi = yo + dy - d.p;
                  const double* irow =
                      ibc + (static_cast<std::int64_t>(zi) * d.y + yi) * d.x +
                      (x_lo + dx - d.p);
                  double* orow =
                      obc + (static_cast<std::int64_t>(zo) * d.yo + yo) * d.xo +
                      x_lo;
                  const int n = x_hi - x_lo;
                  for (int k = 0; k < n; ++k) orow[k] += w * irow[k];
                }
              }
            }
          }
        }
      }
    }
  }

  if (g) {
    TensorPtr in_p = input, ker_p = kernel, bias_p = bias, out_p = out;
    g->record("conv3d", {in_p, ker_p, bias_p}, out, [in_p, ker_p, bias_p, out_p, d]() {
      in_p->ensure_grad();
      ker_p->ensure_grad();
      bias_p->ensure_grad();
      const double* go = out_p->grad.data();
      const double* in = in_p->values.data();
      const double* ker = ker_p->values.data();
      double* gin = in_p->grad.data();
      double* gker = ker_p->grad.data();
      double* gbias = bias_p->grad.data();

      const std::int64_t in_sp = static_cast<std::int64_t>(d.z) * d.y * d.x;
      const std::int64_t out_sp = static_cast<std::int64_t>(d.zo) * d.yo * d.xo;

      // d/d input: each (b,ci) slice owned by one iteration.
#pragma omp parallel for collapse(2) schedule(static)
      for (int b = 0; b < d.b; ++b) {
        for (int ci = 0; ci < d.cin; ++ci) {
          double* gibc =
              gin + (static_cast<std::int64_t>(b) * d.cin + ci) * in_sp;
          for (int co = 0; co < d.cout; ++co) {
            const double* gobc =
                go + (static_cast<std::int64_t>(b) * d.cout + co) * out_sp;
            const double* kcc =
                ker + (static_cast<std::int64_t>(co) * d.cin + ci) * 27;
            for (int dz = 0; dz < 3; ++dz) {
              const int zi_lo = std::max(0, dz - d.p);
              const int zi_hi = std::min(d.z, d.zo + dz - d.p);
              for (int dy = 0; dy < 3; ++dy) {
                const int yi_lo = std::max(0, dy - d.p);
                const int yi_hi = std::min(d.y, d.yo + dy - d.p);
                for (int dx = 0; dx < 3; ++dx) {
                  const int xi_lo = std::max(0, dx - d.p);
                  const int xi_hi = std::min(d.x, d.xo + dx - d.p);
                  if (xi_lo >= xi_hi) continue;
                  const double w = kcc[(dz * 3 + dy) * 3 + dx];
                  for (int zi = zi_lo; zi < zi_hi; ++zi) {
                    const int zo = zi - dz + d.p;
                    for (int yi = yi_lo; yi < yi_hi; ++yi) {
                      const int yo = yi - dy + d.p;
                      double* girow =
                          gibc +
                          (static_cast<std::int64_t>(zi) * d.y + yi) * d.x +
                          xi_lo;
                      const double* gorow =
                          gobc +
                          (static_cast<std::int64_t>(zo) * d.yo + yo) * d.xo +
                          (xi_lo - dx + d.p);
                      const int n = xi_hi - xi_lo;
                      for (int k = 0; k < n; ++k) girow[k] += w * gorow[k];
                    }
                  }
                }
              }
            }
          }
        }
      }

      // d/d kernel and d/d bias: each co slice owned by one iteration.
#pragma omp parallel for schedule(static)
      for (int co = 0; co < d.cout; ++co) {
        double bacc = 0.0;
        for (int b = 0; b < d.b; ++b) {
          const double* gobc =
              go + (static_cast<std::int64_t>(b) * d.cout + co) * out_sp;
          for (std::int64_t i = 0; i < out_sp; ++i) bacc += gobc[i];
        }
        gbias[co] += bacc;

        for (int ci = 0; ci < d.cin; ++ci) {
          double* gkcc = gker + (static_cast<std::int64_t>(co) * d.cin + ci) * 27;
          for (int dz = 0; dz < 3; ++dz) {
            const int z_lo = std::max(0, d.p - dz);
            const int z_hi = std::min(d.zo, d.z + d.p - dz);
            for (int dy = 0; dy < 3; ++dy) {
              const int y_lo = std::max(0, d.p - dy);
              const int y_hi = std::min(d.yo, d.y + d.p - dy);
              for (int dx = 0; dx < 3; ++dx) {
                const int x_lo = std::max(0, d.p - dx);
                const int x_hi = std::min(d.xo, d.x + d.p - dx);
                if (x_lo >= x_hi) continue;
                // Four fixed accumulator lanes keep the reduction
                // deterministic while letting the row loop vectorize.
                double lane[4] = {0.0, 0.0, 0.0, 0.0};
                for (int b = 0; b < d.b; ++b) {
                  const double* ibc =
                      in + (static_cast<std::int64_t>(b) * d.cin + ci) * in_sp;
                  const double* gobc =
                      go + (static_cast<std::int64_t>(b) * d.cout + co) * out_sp;
                  for (int zo = z_lo; zo < z_hi; ++zo) {
                    const int zi = zo + dz - d.p;
                    for (int yo = y_lo; yo < y_hi; ++yo) {
                      const int yi = yo + dy - d.p;
                      const double* irow =
                          ibc +
                          (static_cast<std::int64_t>(zi) * d.y + yi) * d.x +
                          (x_lo + dx - d.p);
                      const double* gorow =
                          gobc +
                          (static_cast<std::int64_t>(zo) * d.yo + yo) * d.xo +
                          x_lo;
                      const int n = x_hi - x_lo;
                      int k = 0;
                      for (; k + 4 <= n; k += 4) {
                        lane[0] += gorow[k] * irow[k];
                        lane[1] += gorow[k + 1] * irow[k + 1];
                        lane[2] += gorow[k + 2] * irow[k + 2];
                        lane[3] += gorow[k + 3] * irow[k + 3];
                      }
                      for (; k < n; ++k) lane[0] += gorow[k] * irow[k];
                    }
                  }
                }
                gkcc[(dz * 3 + dy) * 3 + dx] +=
                    (lane[0] + lane[1]) + (lane[2] + lane[3]);
              }
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace ndl::ops
