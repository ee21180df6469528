#include "ndl/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <type_traits>

#include "binio.hpp"
#include "ndl/rng.hpp"

namespace ndl {

// ---------------------------------------------------------------------------
// NetworkConfig
// ---------------------------------------------------------------------------

void NetworkConfig::validate() const {
  if (channels_per_stage.size() != 14)
    throw ConfigError(
        "network config: trunk must have exactly 14 conv layers, got " +
        std::to_string(channels_per_stage.size()));
  for (int c : channels_per_stage)
    if (c < 1) throw ConfigError("network config: channel counts must be >= 1");
  if (pool_positions.size() != upsample_positions.size())
    throw ConfigError(
        "network config: pool and upsample position counts must match so the "
        "decoder restores the encoder xy resolution");
  auto check_positions = [](const std::vector<int>& pos, const char* what) {
    for (std::size_t i = 0; i < pos.size(); ++i) {
      if (pos[i] < 1 || pos[i] > 14)
        throw ConfigError(std::string("network config: ") + what +
                          " positions must lie in [1,14]");
      if (i > 0 && pos[i] <= pos[i - 1])
        throw ConfigError(std::string("network config: ") + what +
                          " positions must be strictly increasing");
    }
  };
  check_positions(pool_positions, "pool");
  check_positions(upsample_positions, "upsample");
  for (int p : pool_positions)
    if (std::find(upsample_positions.begin(), upsample_positions.end(), p) !=
        upsample_positions.end())
      throw ConfigError("network config: layer " + std::to_string(p) +
                        " cannot be followed by both pool and upsample");
  for (int e : input_shape)
    if (e < 1) throw ConfigError("network config: input extents must be >= 1");
  const int div = 1 << pool_positions.size();
  if (input_shape[1] % div != 0 || input_shape[2] % div != 0)
    throw ConfigError("network config: input y and x must be divisible by 2^" +
                      std::to_string(pool_positions.size()));
  if (fc_hidden < 2) throw ConfigError("network config: fc_hidden must be >= 2");
  if (cls_head_channels < 1)
    throw ConfigError("network config: cls_head_channels must be >= 1");
  if (skip_connections) {
    // Each upsample must land on the resolution of the matching pre-pool map.
    std::vector<int> stack;  // saved resolutions (y; x scales identically)
    int res = input_shape[1];
    for (int i = 1; i <= 14; ++i) {
      if (std::find(pool_positions.begin(), pool_positions.end(), i) !=
          pool_positions.end()) {
        stack.push_back(res);
        res /= 2;
      }
      if (std::find(upsample_positions.begin(), upsample_positions.end(), i) !=
          upsample_positions.end()) {
        res *= 2;
        if (stack.empty() || stack.back() != res)
          throw ConfigError(
              "network config: skip connections need the upsample after layer " +
              std::to_string(i) + " to mirror a pooled resolution");
        stack.pop_back();
      }
    }
  }
}

std::string NetworkConfig::signature() const {
  std::ostringstream os;
  os << "in=" << input_shape[0] << "x" << input_shape[1] << "x"
     << input_shape[2] << ";ch=";
  for (std::size_t i = 0; i < channels_per_stage.size(); ++i)
    os << (i ? "," : "") << channels_per_stage[i];
  os << ";pool=";
  for (std::size_t i = 0; i < pool_positions.size(); ++i)
    os << (i ? "," : "") << pool_positions[i];
  os << ";up=";
  for (std::size_t i = 0; i < upsample_positions.size(); ++i)
    os << (i ? "," : "") << upsample_positions[i];
  os << ";fc=" << fc_hidden << ";clsch=" << cls_head_channels
     << ";skips=" << (skip_connections ? 1 : 0);
  return os.str();
}

std::uint64_t NetworkConfig::digest() const {
  return binio::fnv1a_str(signature());
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

namespace {

TensorPtr he_tensor(Shape shape, int fan_in, Rng& rng) {
  auto t = make_tensor(std::move(shape));
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t->values) v = std_dev * rng.normal();
  return t;
}

ConvBnLayer make_conv_bn(int cin, int cout, Rng& rng) {
  ConvBnLayer l;
  l.kernel = he_tensor({cout, cin, 3, 3, 3}, 27 * cin, rng);
  l.bias = make_tensor({cout}, 0.0);
  l.gamma = make_tensor({cout}, 1.0);
  l.beta = make_tensor({cout}, 0.0);
  l.stats = ops::BatchNormStats(cout);
  return l;
}

}  // namespace

MultiTaskNet MultiTaskNet::build(const NetworkConfig& cfg) {
  cfg.validate();
  MultiTaskNet net;
  net.cfg_ = cfg;
  Rng rng(cfg.seed);

  auto at_position = [](const std::vector<int>& pos, int layer) {
    return std::find(pos.begin(), pos.end(), layer) != pos.end();
  };
  std::vector<int> skip_channels;
  int cin = 1;
  for (int i = 0; i < 14; ++i) {
    const int cout = cfg.channels_per_stage[static_cast<std::size_t>(i)];
    net.trunk_.push_back(make_conv_bn(cin, cout, rng));
    cin = cout;
    if (cfg.skip_connections) {
      if (at_position(cfg.pool_positions, i + 1)) skip_channels.push_back(cout);
      if (at_position(cfg.upsample_positions, i + 1)) {
        cin += skip_channels.back();
        skip_channels.pop_back();
      }
    }
  }
  const int trunk_out = cfg.channels_per_stage.back();

  net.seg_kernel_ = he_tensor({1, trunk_out, 3, 3, 3}, 27 * trunk_out, rng);
  net.seg_bias_ = make_tensor({1}, 0.0);

  net.cls_conv_ = make_conv_bn(trunk_out, cfg.cls_head_channels, rng);
  const int flat = cfg.cls_head_channels * cfg.input_shape[0] *
                   cfg.input_shape[1] * cfg.input_shape[2];
  net.fc1_w_ = he_tensor({cfg.fc_hidden, flat}, flat, rng);
  net.fc1_b_ = make_tensor({cfg.fc_hidden}, 0.0);
  net.fc2_w_ = he_tensor({2, cfg.fc_hidden}, cfg.fc_hidden, rng);
  net.fc2_b_ = make_tensor({2}, 0.0);
  return net;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

template <typename NetT>
HeadOutputs MultiTaskNet::run_forward(NetT& net, Graph* g, const TensorPtr& batch,
                                      ops::Mode mode) {
  const auto& cfg = net.cfg_;
  if (batch->ndim() != 5 || batch->dim(1) != 1 ||
      batch->dim(2) != cfg.input_shape[0] ||
      batch->dim(3) != cfg.input_shape[1] ||
      batch->dim(4) != cfg.input_shape[2])
    throw ShapeError("forward: batch must be [b,1," +
                     std::to_string(cfg.input_shape[0]) + "," +
                     std::to_string(cfg.input_shape[1]) + "," +
                     std::to_string(cfg.input_shape[2]) + "], got " +
                     shape_str(batch->shape));

  auto followed_by = [](const std::vector<int>& pos, int layer) {
    return std::find(pos.begin(), pos.end(), layer) != pos.end();
  };

  TensorPtr h = batch;
  std::vector<TensorPtr> skip_stack;
  for (int i = 0; i < 14; ++i) {
    auto& layer = net.trunk_[static_cast<std::size_t>(i)];
    h = ops::conv3d(g, h, layer.kernel, layer.bias, ops::Padding::Same);
    if constexpr (std::is_const_v<NetT>) {
      h = ops::batch_norm_infer(g, h, layer.gamma, layer.beta, layer.stats);
    } else {
      h = ops::batch_norm(g, h, layer.gamma, layer.beta, layer.stats, mode);
    }
    h = ops::relu(g, h);
    if (followed_by(cfg.pool_positions, i + 1)) {
      if (cfg.skip_connections) skip_stack.push_back(h);
      h = ops::max_pool_xy(g, h);
    }
    if (followed_by(cfg.upsample_positions, i + 1)) {
      h = ops::bilinear_upsample_xy(g, h);
      if (cfg.skip_connections) {
        h = ops::concat_channels(g, h, skip_stack.back());
        skip_stack.pop_back();
      }
    }
  }

  // Segmentation head: conv + sigmoid at full resolution.
  auto seg = ops::sigmoid(
      g, ops::conv3d(g, h, net.seg_kernel_, net.seg_bias_, ops::Padding::Same));

  // Classification head: conv(+BN+ReLU), global flatten, FC -> FC -> softmax.
  auto c = ops::conv3d(g, h, net.cls_conv_.kernel, net.cls_conv_.bias,
                       ops::Padding::Same);
  if constexpr (std::is_const_v<NetT>) {
    c = ops::batch_norm_infer(g, c, net.cls_conv_.gamma, net.cls_conv_.beta,
                              net.cls_conv_.stats);
  } else {
    c = ops::batch_norm(g, c, net.cls_conv_.gamma, net.cls_conv_.beta,
                        net.cls_conv_.stats, mode);
  }
  c = ops::relu(g, c);
  c = ops::flatten_to_rows(g, c);
  c = ops::relu(g, ops::fully_connected(g, c, net.fc1_w_, net.fc1_b_));
  c = ops::fully_connected(g, c, net.fc2_w_, net.fc2_b_);
  auto cls = ops::softmax(g, c);

  return HeadOutputs{cls, seg};
}

HeadOutputs MultiTaskNet::forward(Graph* g, const TensorPtr& batch,
                                  ops::Mode mode) {
  return run_forward(*this, g, batch, mode);
}

HeadOutputs MultiTaskNet::forward(const TensorPtr& batch) const {
  return run_forward(*this, nullptr, batch, ops::Mode::Infer);
}

Prediction MultiTaskNet::predict(const Volume& patch,
                                 double seg_threshold) const {
  if (!(seg_threshold > 0.0 && seg_threshold < 1.0))
    throw ConfigError("predict: seg_threshold must lie in (0,1)");
  auto batch = batch_from_volumes({&patch});
  auto out = forward(batch);
  Prediction pred;
  pred.nodule_prob = out.class_probs->values[1];
  pred.mask.shape = patch.shape;
  pred.mask.voxels.resize(out.seg_probs->values.size());
  for (std::size_t i = 0; i < pred.mask.voxels.size(); ++i)
    pred.mask.voxels[i] = out.seg_probs->values[i] >= seg_threshold ? 1 : 0;
  return pred;
}

// ---------------------------------------------------------------------------
// Parameter enumeration
// ---------------------------------------------------------------------------

std::vector<TensorPtr> MultiTaskNet::parameters() const {
  std::vector<TensorPtr> ps;
  for (const auto& l : trunk_) {
    ps.push_back(l.kernel);
    ps.push_back(l.bias);
    ps.push_back(l.gamma);
    ps.push_back(l.beta);
  }
  ps.push_back(seg_kernel_);
  ps.push_back(seg_bias_);
  ps.push_back(cls_conv_.kernel);
  ps.push_back(cls_conv_.bias);
  ps.push_back(cls_conv_.gamma);
  ps.push_back(cls_conv_.beta);
  ps.push_back(fc1_w_);
  ps.push_back(fc1_b_);
  ps.push_back(fc2_w_);
  ps.push_back(fc2_b_);
  return ps;
}

std::vector<TensorPtr> MultiTaskNet::seg_head_parameters() const {
  return {seg_kernel_, seg_bias_};
}

std::vector<TensorPtr> MultiTaskNet::cls_head_parameters() const {
  return {cls_conv_.kernel, cls_conv_.bias, cls_conv_.gamma, cls_conv_.beta,
          fc1_w_, fc1_b_, fc2_w_, fc2_b_};
}

// ---------------------------------------------------------------------------
// Weights file
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint32_t kWeightsVersion = 1;

// Parameter tensors and BN running-stat vectors, in layer order.
struct NamedArray {
  std::string name;
  Tensor* tensor = nullptr;
  std::vector<double>* plain = nullptr;
  Shape plain_shape;
};

std::vector<NamedArray> layer_arrays(std::vector<ConvBnLayer>& trunk,
                                     ConvBnLayer& cls_conv, TensorPtr& seg_k,
                                     TensorPtr& seg_b, TensorPtr& fc1_w,
                                     TensorPtr& fc1_b, TensorPtr& fc2_w,
                                     TensorPtr& fc2_b) {
  std::vector<NamedArray> arrays;
  auto add_t = [&](std::string name, const TensorPtr& t) {
    arrays.push_back({std::move(name), t.get(), nullptr, {}});
  };
  auto add_v = [&](std::string name, std::vector<double>& v) {
    arrays.push_back(
        {std::move(name), nullptr, &v, Shape{static_cast<int>(v.size())}});
  };
  char buf[32];
  for (std::size_t i = 0; i < trunk.size(); ++i) {
    std::snprintf(buf, sizeof buf, "trunk%02zu.", i);
    const std::string p(buf);
    add_t(p + "kernel", trunk[i].kernel);
    add_t(p + "bias", trunk[i].bias);
    add_t(p + "bn_gamma", trunk[i].gamma);
    add_t(p + "bn_beta", trunk[i].beta);
    add_v(p + "bn_running_mean", trunk[i].stats.mean);
    add_v(p + "bn_running_var", trunk[i].stats.var);
  }
  add_t("seg.kernel", seg_k);
  add_t("seg.bias", seg_b);
  add_t("cls.kernel", cls_conv.kernel);
  add_t("cls.bias", cls_conv.bias);
  add_t("cls.bn_gamma", cls_conv.gamma);
  add_t("cls.bn_beta", cls_conv.beta);
  add_v("cls.bn_running_mean", cls_conv.stats.mean);
  add_v("cls.bn_running_var", cls_conv.stats.var);
  add_t("fc1.weight", fc1_w);
  add_t("fc1.bias", fc1_b);
  add_t("fc2.weight", fc2_w);
  add_t("fc2.bias", fc2_b);
  return arrays;
}

}  // namespace

void MultiTaskNet::save_weights(const std::filesystem::path& path) const {
  binio::Writer w(path);
  w.raw("NDLW", 4);
  w.u32(kWeightsVersion);
  w.u64(cfg_.digest());
  w.str16(cfg_.signature());

  auto& self = const_cast<MultiTaskNet&>(*this);  // arrays are read, not written
  auto arrays =
      layer_arrays(self.trunk_, self.cls_conv_, self.seg_kernel_,
                   self.seg_bias_, self.fc1_w_, self.fc1_b_, self.fc2_w_,
                   self.fc2_b_);
  w.u32(static_cast<std::uint32_t>(arrays.size()));

  w.reset_hash();  // trailing checksum covers the array payload only
  for (const auto& a : arrays) {
    w.str16(a.name);
    const Shape& shape = a.tensor ? a.tensor->shape : a.plain_shape;
    const std::vector<double>& vals = a.tensor ? a.tensor->values : *a.plain;
    w.u8(static_cast<std::uint8_t>(shape.size()));
    for (int d : shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : vals) w.f64(v);
  }
  const std::uint64_t checksum = w.hash();
  w.u64(checksum);
  w.close();
}

MultiTaskNet MultiTaskNet::load_weights(const std::filesystem::path& path,
                                        const NetworkConfig& cfg) {
  binio::Reader r(path);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, "NDLW", 4) != 0)
    throw FormatError(r.path() + " is not a weights file (bad magic)");
  if (r.u32() != kWeightsVersion)
    throw FormatError(r.path() + ": unsupported weights format version");
  const std::uint64_t digest = r.u64();
  const std::string file_sig = r.str16();
  if (digest != cfg.digest() || file_sig != cfg.signature())
    throw FormatError("weights file architecture [" + file_sig +
                      "] does not match requested config [" + cfg.signature() +
                      "]");
  const std::uint32_t n_arrays = r.u32();

  MultiTaskNet net = build(cfg);
  auto arrays = layer_arrays(net.trunk_, net.cls_conv_, net.seg_kernel_,
                             net.seg_bias_, net.fc1_w_, net.fc1_b_, net.fc2_w_,
                             net.fc2_b_);
  if (n_arrays != arrays.size())
    throw FormatError(r.path() + ": expected " + std::to_string(arrays.size()) +
                      " arrays, file has " + std::to_string(n_arrays));

  r.reset_hash();
  for (auto& a : arrays) {
    const std::string name = r.str16();
    if (name != a.name)
      throw FormatError(r.path() + ": expected array '" + a.name +
                        "', file has '" + name + "'");
    const int nd = r.u8();
    Shape shape(static_cast<std::size_t>(nd));
    for (auto& d : shape) d = static_cast<int>(r.u32());
    const Shape& want = a.tensor ? a.tensor->shape : a.plain_shape;
    if (shape != want)
      throw FormatError(r.path() + ": array '" + a.name + "' has shape " +
                        shape_str(shape) + ", expected " + shape_str(want));
    std::vector<double>& dst = a.tensor ? a.tensor->values : *a.plain;
    for (auto& v : dst) v = r.f64();
  }
  const std::uint64_t payload_hash = r.hash();
  if (r.u64() != payload_hash)
    throw FormatError(r.path() + ": payload checksum mismatch");
  return net;
}

TensorPtr batch_from_volumes(const std::vector<const Volume*>& patches) {
  if (patches.empty()) throw UsageError("batch_from_volumes: empty batch");
  const Extents e = patches[0]->shape;
  auto batch =
      make_tensor({static_cast<int>(patches.size()), 1, e[0], e[1], e[2]});
  const std::int64_t per = extent_count(e);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (patches[i]->shape != e)
      throw ShapeError("batch_from_volumes: mixed patch shapes");
    double* dst = batch->values.data() + static_cast<std::int64_t>(i) * per;
    for (std::int64_t j = 0; j < per; ++j)
      dst[j] =
          static_cast<double>(patches[i]->voxels[static_cast<std::size_t>(j)]);
  }
  return batch;
}

}  // namespace ndl
