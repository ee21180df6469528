#include "ndl/adam.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "ndl/errors.hpp"

namespace ndl {

void adam_step(const std::vector<TensorPtr>& params, AdamState& state) {
  const std::size_t n = params.size();
  if (state.m.empty()) {
    state.m.resize(n);
    state.v.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      state.m[i].assign(params[i]->values.size(), 0.0);
      state.v[i].assign(params[i]->values.size(), 0.0);
    }
  }
  if (state.m.size() != n)
    throw UsageError("adam_step: state was created for a different parameter set");

  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);

  for (std::size_t i = 0; i < n; ++i) {
    Tensor& p = *params[i];
    if (!p.has_grad())
      throw UsageError("adam_step: parameter " + std::to_string(i) +
                       " has no populated grad");
    if (state.m[i].size() != p.values.size())
      throw UsageError("adam_step: moment shape mismatch on parameter " +
                       std::to_string(i));
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    const double* grad = p.grad.data();
    double* w = p.values.data();
    const std::size_t sz = p.values.size();
    for (std::size_t j = 0; j < sz; ++j) {
      const double gj = grad[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

namespace {

constexpr char kMagic[4] = {'N', 'D', 'L', 'A'};

void put_u64(std::ofstream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::ifstream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_f64(std::ofstream& os, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(os, v);
}

double get_f64(std::ifstream& is) {
  std::uint64_t v = get_u64(is);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

void put_vec(std::ofstream& os, const std::vector<double>& v) {
  put_u64(os, v.size());
  for (double d : v) put_f64(os, d);
}

std::vector<double> get_vec(std::ifstream& is) {
  const std::uint64_t n = get_u64(is);
  std::vector<double> v(n);
  for (auto& d : v) d = get_f64(is);
  return v;
}

}  // namespace

void AdamState::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write adam state to " + path.string());
  os.write(kMagic, 4);
  put_u64(os, 1);  // version
  put_f64(os, lr);
  put_f64(os, beta1);
  put_f64(os, beta2);
  put_f64(os, eps);
  put_u64(os, step_count);
  put_u64(os, m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    put_vec(os, m[i]);
    put_vec(os, v[i]);
  }
  if (!os) throw DataError("short write on " + path.string());
}

AdamState AdamState::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read adam state from " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError(path.string() + " is not an adam state file");
  if (get_u64(is) != 1)
    throw FormatError(path.string() + ": unsupported adam state version");
  AdamState s;
  s.lr = get_f64(is);
  s.beta1 = get_f64(is);
  s.beta2 = get_f64(is);
  s.eps = get_f64(is);
  s.step_count = get_u64(is);
  const std::uint64_t n = get_u64(is);
  s.m.resize(n);
  s.v.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    s.m[i] = get_vec(is);
    s.v[i] = get_vec(is);
  }
  if (!is) throw FormatError(path.string() + ": truncated adam state file");
  return s;
}

}  // namespace ndl
