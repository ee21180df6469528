#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "gradcheck.hpp"
#include "ndl/losses.hpp"
#include "ndl/model.hpp"

using namespace ndl;
using ndl::test::fill_uniform;

namespace {

NetworkConfig tiny_config() {
  NetworkConfig cfg;
  cfg.input_shape = {2, 8, 8};
  cfg.channels_per_stage = {2, 2, 3, 3, 4, 4, 4, 4, 4, 3, 3, 2, 2, 2};
  cfg.pool_positions = {2, 4, 6};
  cfg.upsample_positions = {8, 10, 12};
  cfg.fc_hidden = 8;
  cfg.cls_head_channels = 2;
  cfg.seed = 42;
  return cfg;
}

TensorPtr random_batch(const NetworkConfig& cfg, int b, std::uint64_t seed) {
  auto t = make_tensor(
      {b, 1, cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]});
  Rng rng(seed);
  for (auto& v : t->values) v = rng.uniform(0.0, 1.0);
  return t;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

}  // namespace

TEST_CASE("build_network: deterministic for a fixed seed") {
  auto a = MultiTaskNet::build(tiny_config());
  auto b = MultiTaskNet::build(tiny_config());
  auto pa = a.parameters(), pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->values == pb[i]->values);

  auto cfg2 = tiny_config();
  cfg2.seed = 43;
  auto c = MultiTaskNet::build(cfg2);
  CHECK(c.parameters()[0]->values != pa[0]->values);
}

TEST_CASE("build_network: invariant violations are configuration errors") {
  auto cfg = tiny_config();
  cfg.channels_per_stage.pop_back();  // 13 trunk layers
  CHECK_THROWS_AS(MultiTaskNet::build(cfg), ConfigError);

  cfg = tiny_config();
  cfg.pool_positions = {2, 4};  // counts no longer match
  CHECK_THROWS_AS(MultiTaskNet::build(cfg), ConfigError);

  cfg = tiny_config();
  cfg.input_shape = {2, 12, 8};  // y not divisible by 2^3
  CHECK_THROWS_AS(MultiTaskNet::build(cfg), ConfigError);

  cfg = tiny_config();
  cfg.fc_hidden = 1;
  CHECK_THROWS_AS(MultiTaskNet::build(cfg), ConfigError);

  cfg = tiny_config();
  cfg.pool_positions = {2, 4, 15};
  CHECK_THROWS_AS(MultiTaskNet::build(cfg), ConfigError);
}

TEST_CASE("build_network: parameter count matches the closed-form sum") {
  // Computed independently from the config: conv (27*cin*cout + cout),
  // BN (2*cout) per trunk/cls-conv layer, the seg conv, and both FC layers.
  const NetworkConfig cfg;  // default network
  std::int64_t expect = 0;
  int cin = 1;
  for (int cout : cfg.channels_per_stage) {
    expect += 27LL * cin * cout + cout;  // kernel + bias
    expect += 2LL * cout;                // gamma + beta
    cin = cout;
  }
  expect += 27LL * cin * 1 + 1;  // seg conv
  expect += 27LL * cin * cfg.cls_head_channels + cfg.cls_head_channels;
  expect += 2LL * cfg.cls_head_channels;
  const std::int64_t flat = static_cast<std::int64_t>(cfg.cls_head_channels) *
                            cfg.input_shape[0] * cfg.input_shape[1] *
                            cfg.input_shape[2];
  expect += cfg.fc_hidden * flat + cfg.fc_hidden;
  expect += 2LL * cfg.fc_hidden + 2;

  auto net = MultiTaskNet::build(cfg);
  std::int64_t got = 0;
  for (const auto& p : net.parameters()) got += p->size();
  CHECK(got == expect);
}

TEST_CASE("forward: probability contracts and shape restoration") {
  auto net = MultiTaskNet::build(tiny_config());
  auto batch = random_batch(net.config(), 3, 5);
  auto out = net.forward(batch);  // infer

  REQUIRE(out.class_probs->shape == Shape{3, 2});
  REQUIRE(out.seg_probs->shape == batch->shape);
  for (int i = 0; i < 3; ++i) {
    const double s = out.class_probs->values[static_cast<std::size_t>(2 * i)] +
                     out.class_probs->values[static_cast<std::size_t>(2 * i + 1)];
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
  for (double v : out.seg_probs->values) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }

  auto bad = make_tensor({1, 1, 2, 8, 10});
  CHECK_THROWS_AS(net.forward(bad), ShapeError);
}

TEST_CASE("forward: identical patches give identical rows in infer mode") {
  auto net = MultiTaskNet::build(tiny_config());
  auto one = random_batch(net.config(), 1, 9);
  auto two = make_tensor({2, 1, 2, 8, 8});
  for (int i = 0; i < 2; ++i)
    std::copy(one->values.begin(), one->values.end(),
              two->values.begin() + i * one->size());
  auto out = net.forward(two);
  for (int j = 0; j < 2; ++j)
    CHECK(out.class_probs->values[static_cast<std::size_t>(j)] ==
          out.class_probs->values[static_cast<std::size_t>(2 + j)]);
  const std::int64_t per = one->size();
  for (std::int64_t i = 0; i < per; ++i)
    CHECK(out.seg_probs->values[static_cast<std::size_t>(i)] ==
          out.seg_probs->values[static_cast<std::size_t>(per + i)]);
}

TEST_CASE("heads are independent past the fork") {
  auto net = MultiTaskNet::build(tiny_config());
  auto batch = random_batch(net.config(), 2, 13);
  auto before = net.forward(batch);

  SUBCASE("zeroing the seg head leaves class probs bit-identical") {
    for (auto& p : net.seg_head_parameters())
      std::fill(p->values.begin(), p->values.end(), 0.0);
    auto after = net.forward(batch);
    CHECK(after.class_probs->values == before.class_probs->values);
    CHECK(after.seg_probs->values != before.seg_probs->values);
  }
  SUBCASE("zeroing the cls head leaves seg probs bit-identical") {
    for (auto& p : net.cls_head_parameters())
      std::fill(p->values.begin(), p->values.end(), 0.0);
    auto after = net.forward(batch);
    CHECK(after.seg_probs->values == before.seg_probs->values);
    CHECK(after.class_probs->values != before.class_probs->values);
  }
}

namespace {

// Builds the full training loss on a fixed micro-batch.
double full_loss(MultiTaskNet& net, Graph* g, const TensorPtr& batch,
                 const TensorPtr& target, const std::vector<int>& labels,
                 const MultiTaskLossConfig& cfg) {
  auto out = net.forward(g, batch, ops::Mode::Train);
  auto lc = ops::cross_entropy_class(g, out.class_probs, labels, cfg.clamp_eps);
  auto ls = ops::cross_entropy_voxel(g, out.seg_probs, target, cfg.clamp_eps);
  auto total = ops::multi_task_loss(g, lc, ls, net.parameters(), cfg);
  if (g) g->backward(total);
  return total->values[0];
}

}  // namespace

TEST_CASE("end-to-end: every parameter gradient matches finite differences") {
  auto net = MultiTaskNet::build(tiny_config());
  auto batch = random_batch(net.config(), 2, 17);
  auto target = make_tensor(batch->shape);
  Rng rng(19);
  for (auto& v : target->values) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
  const std::vector<int> labels = {1, 0};
  MultiTaskLossConfig cfg;
  cfg.lambda = 1e-3;  // exercise the regularizer path too

  auto params = net.parameters();
  zero_grads(params);
  Graph g;
  full_loss(net, &g, batch, target, labels, cfg);

  auto fwd = [&]() { return full_loss(net, nullptr, batch, target, labels, cfg); };
  CHECK(ndl::test::max_grad_rel_err(params, fwd) < 1e-4);
}

TEST_CASE("shared-trunk gradients add across tasks at lambda 0") {
  auto net = MultiTaskNet::build(tiny_config());
  auto batch = random_batch(net.config(), 2, 23);
  auto target = make_tensor(batch->shape);
  Rng rng(29);
  for (auto& v : target->values) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
  const std::vector<int> labels = {0, 1};

  auto grads_for = [&](double wc, double ws) {
    MultiTaskLossConfig cfg;
    cfg.w_cls = wc;
    cfg.w_seg = ws;
    auto params = net.parameters();
    zero_grads(params);
    Graph g;
    full_loss(net, &g, batch, target, labels, cfg);
    std::vector<std::vector<double>> out;
    for (auto& p : params) out.push_back(p->grad);
    return out;
  };

  const auto combined = grads_for(1.0, 1.0);
  const auto cls_only = grads_for(1.0, 0.0);
  const auto seg_only = grads_for(0.0, 1.0);
  for (std::size_t p = 0; p < combined.size(); ++p)
    for (std::size_t i = 0; i < combined[p].size(); ++i) {
      const double want = cls_only[p][i] + seg_only[p][i];
      const double got = combined[p][i];
      CHECK(std::abs(got - want) <=
            1e-10 * std::max({1.0, std::abs(got), std::abs(want)}));
    }
}

TEST_CASE("single-task classification sends zero gradient to the seg head") {
  auto net = MultiTaskNet::build(tiny_config());
  auto batch = random_batch(net.config(), 2, 31);
  auto target = make_tensor(batch->shape, 0.0);
  MultiTaskLossConfig cfg;
  cfg.w_seg = 0.0;  // single-task-cls
  auto params = net.parameters();
  zero_grads(params);
  Graph g;
  full_loss(net, &g, batch, target, {0, 1}, cfg);
  for (const auto& p : net.seg_head_parameters())
    for (double gv : p->grad) CHECK(gv == 0.0);
  // And the trunk still learns from the classification task.
  double trunk_norm = 0.0;
  for (double gv : params[0]->grad) trunk_norm += std::abs(gv);
  CHECK(trunk_norm > 0.0);
}

TEST_CASE("predict: threshold boundary uses >= and extreme threshold empties") {
  auto cfg = tiny_config();
  auto net = MultiTaskNet::build(cfg);
  // Zeroed seg head makes seg_probs exactly sigmoid(0) = 0.5 everywhere.
  for (auto& p : net.seg_head_parameters())
    std::fill(p->values.begin(), p->values.end(), 0.0);

  Volume patch;
  patch.shape = cfg.input_shape;
  patch.voxels.assign(static_cast<std::size_t>(extent_count(patch.shape)), 0.3f);

  auto pred = net.predict(patch, 0.5);
  CHECK(pred.mask.count() == extent_count(patch.shape));  // 0.5 >= 0.5

  auto none = net.predict(patch, 0.999999);
  CHECK(none.mask.count() == 0);

  CHECK(pred.nodule_prob >= 0.0);
  CHECK(pred.nodule_prob <= 1.0);
  CHECK_THROWS_AS(net.predict(patch, 1.5), ConfigError);
}

TEST_CASE("weights: save -> load -> save produces byte-identical files") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "ndl_model_test";
  fs::create_directories(dir);

  auto cfg = tiny_config();
  auto net = MultiTaskNet::build(cfg);
  // Move BN stats off their initial values so they are exercised too.
  auto batch = random_batch(cfg, 2, 37);
  Graph g;
  net.forward(&g, batch, ops::Mode::Train);

  const auto w1 = dir / "a.ndlw";
  const auto w2 = dir / "b.ndlw";
  net.save_weights(w1);
  auto loaded = MultiTaskNet::load_weights(w1, cfg);
  loaded.save_weights(w2);
  CHECK(file_bytes(w1) == file_bytes(w2));

  // Forward on the loaded net matches the original exactly.
  auto probe = random_batch(cfg, 2, 41);
  auto a = net.forward(probe);
  auto b = loaded.forward(probe);
  CHECK(a.class_probs->values == b.class_probs->values);
  CHECK(a.seg_probs->values == b.seg_probs->values);

  // Structural mismatch names both signatures.
  auto other = cfg;
  other.channels_per_stage[3] = 5;
  CHECK_THROWS_AS(MultiTaskNet::load_weights(w1, other), FormatError);
  try {
    MultiTaskNet::load_weights(w1, other);
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(cfg.signature()) != std::string::npos);
    CHECK(msg.find(other.signature()) != std::string::npos);
  }

  // Corrupting the payload trips the trailing checksum.
  {
    std::fstream f(w1, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-64, std::ios::end);
    const char junk = 0x5a;
    f.write(&junk, 1);
  }
  CHECK_THROWS_AS(MultiTaskNet::load_weights(w1, cfg), FormatError);

  fs::remove_all(dir);
}

TEST_CASE("xy resolution is restored while z never changes") {
  for (Extents in : {Extents{2, 8, 8}, Extents{5, 16, 8}, Extents{1, 8, 16}}) {
    auto cfg = tiny_config();
    cfg.input_shape = in;
    auto net = MultiTaskNet::build(cfg);
    auto batch = random_batch(cfg, 1, 47);
    auto out = net.forward(batch);
    CHECK(out.seg_probs->shape == (Shape{1, 1, in[0], in[1], in[2]}));
  }
}

TEST_CASE("skip connections: shapes, gradients, and validation") {
  auto cfg = tiny_config();
  cfg.skip_connections = true;
  auto net = MultiTaskNet::build(cfg);
  auto batch = random_batch(cfg, 2, 53);
  auto out = net.forward(batch);
  CHECK(out.seg_probs->shape == batch->shape);
  CHECK(out.class_probs->shape == Shape{2, 2});

  // Signature distinguishes the wiring; weights are not interchangeable.
  auto plain = tiny_config();
  CHECK(cfg.signature() != plain.signature());

  // Sampled end-to-end gradient check through the concat path.
  auto target = make_tensor(batch->shape);
  Rng rng(59);
  for (auto& v : target->values) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
  const std::vector<int> labels = {1, 0};
  MultiTaskLossConfig lcfg;
  auto params = net.parameters();
  zero_grads(params);
  Graph g;
  full_loss(net, &g, batch, target, labels, lcfg);
  auto fwd = [&]() { return full_loss(net, nullptr, batch, target, labels, lcfg); };
  CHECK(ndl::test::sampled_grad_rel_err(params, fwd, 60, 61) < 1e-4);

  // An upsample with no pooled map left to concatenate is rejected when
  // skips are on (fine without them).
  auto bad = cfg;
  bad.pool_positions = {4, 6, 8};
  bad.upsample_positions = {2, 10, 12};
  CHECK_THROWS_AS(MultiTaskNet::build(bad), ConfigError);
  bad.skip_connections = false;
  bad.input_shape = {2, 16, 16};  // divisibility for the doubled start
  CHECK_NOTHROW(MultiTaskNet::build(bad));
}
