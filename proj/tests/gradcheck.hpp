#pragma once

// Central finite-difference gradient oracle for the test suites. Independent
// of the tape: it only re-runs a forward closure with perturbed inputs, so it
// can never inherit a bug from the backward pass it is checking.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ndl/rng.hpp"
#include "ndl/tensor.hpp"

namespace ndl::test {

inline double fd_slope(const std::function<double()>& forward, double* slot,
                       double h = 1e-5) {
  const double orig = *slot;
  *slot = orig + h;
  const double fp = forward();
  *slot = orig - h;
  const double fm = forward();
  *slot = orig;
  return (fp - fm) / (2.0 * h);
}

// Relative error with a unit floor, so near-zero gradients are judged on an
// absolute scale instead of blowing up the ratio.
inline double rel_err(double analytic, double numeric) {
  const double scale =
      std::max({std::abs(analytic), std::abs(numeric), 1.0});
  return std::abs(analytic - numeric) / scale;
}

// Error for one element, robust to relu/max-pool kinks inside the stencil:
// when the first stencil straddles a state flip the error looks large, but
// shrinking h moves both samples onto one side and the estimate converges to
// the true derivative. A genuinely wrong analytic gradient fails at every h.
inline double element_err(const std::function<double()>& forward, double* slot,
                          double analytic, double h) {
  double err = rel_err(analytic, fd_slope(forward, slot, h));
  for (double hh : {h / 10.0, h / 30.0}) {
    if (err < 1e-6) break;
    err = std::min(err, rel_err(analytic, fd_slope(forward, slot, hh)));
  }
  return err;
}

// Checks every element of every parameter. Analytic grads must be populated
// (one backward pass) before calling.
inline double max_grad_rel_err(const std::vector<TensorPtr>& params,
                               const std::function<double()>& forward,
                               double h = 1e-5) {
  double worst = 0.0;
  for (const auto& p : params) {
    for (std::size_t i = 0; i < p->values.size(); ++i)
      worst = std::max(worst, element_err(forward, &p->values[i], p->grad[i], h));
  }
  return worst;
}

// Checks a deterministic random sample of parameter elements (for the large
// end-to-end network case).
inline double sampled_grad_rel_err(const std::vector<TensorPtr>& params,
                                   const std::function<double()>& forward,
                                   int n_samples, std::uint64_t seed,
                                   double h = 1e-5) {
  Rng rng(seed);
  std::int64_t total = 0;
  for (const auto& p : params) total += p->size();
  double worst = 0.0;
  for (int s = 0; s < n_samples; ++s) {
    std::int64_t pick =
        static_cast<std::int64_t>(rng.next_u64() % static_cast<std::uint64_t>(total));
    for (const auto& p : params) {
      if (pick < p->size()) {
        const auto i = static_cast<std::size_t>(pick);
        worst = std::max(worst, element_err(forward, &p->values[i], p->grad[i], h));
        break;
      }
      pick -= p->size();
    }
  }
  return worst;
}

inline void fill_uniform(Tensor& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (auto& v : t.values) v = rng.uniform(lo, hi);
}

}  // namespace ndl::test
