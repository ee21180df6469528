#include "ndl/losses.hpp"

#include <algorithm>
#include <cmath>

namespace ndl {

void MultiTaskLossConfig::validate() const {
  if (w_cls < 0.0 || w_seg < 0.0)
    throw ConfigError("loss config: task weights must be nonnegative");
  if (w_cls == 0.0 && w_seg == 0.0)
    throw ConfigError("loss config: at least one task weight must be > 0");
  if (lambda < 0.0) throw ConfigError("loss config: lambda must be >= 0");
  if (!(clamp_eps > 0.0 && clamp_eps < 0.5))
    throw ConfigError("loss config: clamp_eps must lie in (0, 0.5)");
}

namespace ops {

namespace {
inline double clamp_p(double p, double eps) {
  return std::clamp(p, eps, 1.0 - eps);
}
}  // namespace

TensorPtr cross_entropy_class(Graph* g, const TensorPtr& probs,
                              const std::vector<int>& labels, double clamp_eps) {
  if (probs->ndim() != 2)
    throw ShapeError("cross_entropy_class: probs must be [b,k], got " +
                     shape_str(probs->shape));
  const int b = probs->dim(0), k = probs->dim(1);
  if (static_cast<int>(labels.size()) != b)
    throw ShapeError("cross_entropy_class: need one label per row");
  for (int l : labels)
    if (l < 0 || l >= k)
      throw DataError("cross_entropy_class: label " + std::to_string(l) +
                      " outside {0.." + std::to_string(k - 1) + "}");

  auto out = make_tensor(Shape{1});
  double acc = 0.0;
  for (int i = 0; i < b; ++i)
    acc -= std::log(clamp_p(
        probs->values[static_cast<std::int64_t>(i) * k + labels[static_cast<std::size_t>(i)]],
        clamp_eps));
  out->values[0] = acc / static_cast<double>(b);

  if (g) {
    TensorPtr p_p = probs, out_p = out;
    auto lab = std::make_shared<std::vector<int>>(labels);
    g->record("cross_entropy_class", {p_p}, out, [p_p, out_p, lab, b, k, clamp_eps]() {
      p_p->ensure_grad();
      const double go = out_p->grad[0] / static_cast<double>(b);
      for (int i = 0; i < b; ++i) {
        const std::int64_t idx =
            static_cast<std::int64_t>(i) * k + (*lab)[static_cast<std::size_t>(i)];
        const double p = p_p->values[idx];
        // The clamp has zero slope outside its band.
        if (p > clamp_eps && p < 1.0 - clamp_eps)
          p_p->grad[idx] += -go / p;
      }
    });
  }
  return out;
}

TensorPtr cross_entropy_voxel_rows(Graph* g, const TensorPtr& probs,
                                   const TensorPtr& target,
                                   const std::vector<double>& row_weight,
                                   double clamp_eps) {
  if (probs->shape != target->shape)
    throw ShapeError("cross_entropy_voxel: shape mismatch " +
                     shape_str(probs->shape) + " vs " + shape_str(target->shape));
  const int b = probs->dim(0);
  if (static_cast<int>(row_weight.size()) != b)
    throw ShapeError("cross_entropy_voxel: need one weight per batch row");
  const std::int64_t per_row = probs->size() / b;

  for (double t : target->values)
    if (t != 0.0 && t != 1.0)
      throw DataError("cross_entropy_voxel: target values must be 0 or 1");

  double wsum = 0.0;
  for (double w : row_weight) wsum += w;
  auto out = make_tensor(Shape{1});
  if (wsum == 0.0) {
    // Nothing included; constant zero loss with no inputs to differentiate.
    if (g) g->record("cross_entropy_voxel", {probs}, out, []() {});
    return out;
  }
  const double norm = 1.0 / (wsum * static_cast<double>(per_row));

  double acc = 0.0;
  for (int i = 0; i < b; ++i) {
    const double w = row_weight[static_cast<std::size_t>(i)];
    if (w == 0.0) continue;
    const double* p = probs->values.data() + static_cast<std::int64_t>(i) * per_row;
    const double* t = target->values.data() + static_cast<std::int64_t>(i) * per_row;
    double row_acc = 0.0;
    for (std::int64_t j = 0; j < per_row; ++j) {
      const double pc = clamp_p(p[j], clamp_eps);
      row_acc -= t[j] * std::log(pc) + (1.0 - t[j]) * std::log(1.0 - pc);
    }
    acc += w * row_acc;
  }
  out->values[0] = acc * norm;

  if (g) {
    TensorPtr p_p = probs, t_p = target, out_p = out;
    auto rw = std::make_shared<std::vector<double>>(row_weight);
    g->record("cross_entropy_voxel", {p_p}, out,
              [p_p, t_p, out_p, rw, b, per_row, norm, clamp_eps]() {
                p_p->ensure_grad();
                const double go = out_p->grad[0] * norm;
                for (int i = 0; i < b; ++i) {
                  const double w = (*rw)[static_cast<std::size_t>(i)];
                  if (w == 0.0) continue;
                  const double* p =
                      p_p->values.data() + static_cast<std::int64_t>(i) * per_row;
                  const double* t =
                      t_p->values.data() + static_cast<std::int64_t>(i) * per_row;
                  double* gp =
                      p_p->grad.data() + static_cast<std::int64_t>(i) * per_row;
                  for (std::int64_t j = 0; j < per_row; ++j) {
                    if (p[j] <= clamp_eps || p[j] >= 1.0 - clamp_eps) continue;
                    gp[j] += go * w * (-t[j] / p[j] + (1.0 - t[j]) / (1.0 - p[j]));
                  }
                }
              });
  }
  return out;
}

TensorPtr cross_entropy_voxel(Graph* g, const TensorPtr& probs,
                              const TensorPtr& target, double clamp_eps) {
  return cross_entropy_voxel_rows(
      g, probs, target,
      std::vector<double>(static_cast<std::size_t>(probs->dim(0)), 1.0),
      clamp_eps);
}

TensorPtr multi_task_loss(Graph* g, const TensorPtr& cls_loss,
                          const TensorPtr& seg_loss,
                          const std::vector<TensorPtr>& params,
                          const MultiTaskLossConfig& cfg) {
  cfg.validate();
  if (cls_loss->size() != 1 || seg_loss->size() != 1)
    throw ShapeError("multi_task_loss: task losses must be scalars");

  auto out = make_tensor(Shape{1});
  double reg = 0.0;
  if (cfg.lambda > 0.0) {
    for (const auto& p : params)
      for (double v : p->values) reg += v * v;
  }
  out->values[0] =
      cfg.w_cls * cls_loss->values[0] + cfg.w_seg * seg_loss->values[0] +
      cfg.lambda * reg;

  if (g) {
    TensorPtr c_p = cls_loss, s_p = seg_loss, out_p = out;
    auto ps = std::make_shared<std::vector<TensorPtr>>(params);
    const double wc = cfg.w_cls, ws = cfg.w_seg, lam = cfg.lambda;
    g->record("multi_task_loss", [&]{ std::vector<TensorPtr> ins{c_p, s_p}; ins.insert(ins.end(), ps->begin(), ps->end()); return ins; }(), out, [c_p, s_p, out_p, ps, wc, ws, lam]() {
      c_p->ensure_grad();
      s_p->ensure_grad();
      const double go = out_p->grad[0];
      c_p->grad[0] += wc * go;
      s_p->grad[0] += ws * go;
      if (lam > 0.0) {
        for (const auto& p : *ps) {
          p->ensure_grad();
          for (std::size_t i = 0; i < p->values.size(); ++i)
            p->grad[i] += 2.0 * lam * p->values[i] * go;
        }
      }
    });
  }
  return out;
}

}  // namespace ops
}  // namespace ndl
