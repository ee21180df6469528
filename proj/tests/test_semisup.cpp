#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ndl/semisup.hpp"

using namespace ndl;

namespace {

NetworkConfig tiny_net_config(std::uint64_t seed = 11) {
  NetworkConfig cfg;
  cfg.input_shape = {8, 8, 8};
  cfg.channels_per_stage = {2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2};
  cfg.pool_positions = {2, 4, 6};
  cfg.upsample_positions = {8, 10, 12};
  cfg.fc_hidden = 4;
  cfg.cls_head_channels = 1;
  cfg.seed = seed;
  return cfg;
}

Dataset tiny_dataset(std::uint64_t seed = 3, int n_scans = 4) {
  GenConfig gen;
  gen.seed = seed;
  gen.n_scans = n_scans;
  gen.nodules_per_scan = 2;
  gen.nonnodules_per_scan = 2;
  gen.patch_shape = {8, 8, 8};
  auto ds = generate_synthetic(gen);
  kfold_split(ds, n_scans, seed + 1);  // one scan per fold
  return ds;
}

LabeledPool pool_of(const Dataset& ds) {
  LabeledPool pool;
  pool.records = ds.records;
  return pool;
}

std::vector<const CandidateRecord*> fold_records(const Dataset& ds, int fold) {
  std::vector<const CandidateRecord*> out;
  for (const auto& r : ds.records)
    if (r.fold == fold) out.push_back(&r);
  return out;
}

bool params_equal(const MultiTaskNet& a, const MultiTaskNet& b) {
  auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i]->values != pb[i]->values) return false;
  return true;
}

}  // namespace

TEST_CASE("train_supervised: zero epochs is a no-op with an empty log") {
  auto ds = tiny_dataset();
  auto net = MultiTaskNet::build(tiny_net_config());
  auto before = MultiTaskNet::build(tiny_net_config());
  AdamState adam;
  TrainOptions opt;
  opt.epochs = 0;
  opt.validation_fold = 0;
  auto log = train_supervised(net, pool_of(ds), fold_records(ds, 0),
                              MultiTaskLossConfig{}, adam, opt);
  CHECK(log.rows.empty());
  CHECK(params_equal(net, before));
  CHECK(adam.step_count == 0);
}

TEST_CASE("train_supervised: errors on empty pools and empty training folds") {
  auto ds = tiny_dataset();
  auto net = MultiTaskNet::build(tiny_net_config());
  AdamState adam;
  TrainOptions opt;
  opt.epochs = 1;

  LabeledPool empty;
  CHECK_THROWS_AS(train_supervised(net, empty, {}, MultiTaskLossConfig{}, adam, opt),
                  DataError);

  // Pool containing only the validation fold leaves nothing to train on.
  LabeledPool val_only;
  for (const auto& r : ds.records)
    if (r.fold == 0) val_only.records.push_back(r);
  opt.validation_fold = 0;
  CHECK_THROWS_AS(
      train_supervised(net, val_only, {}, MultiTaskLossConfig{}, adam, opt),
      DataError);
}

TEST_CASE("train_supervised: memorizes a single sample") {
  auto ds = tiny_dataset();
  LabeledPool pool;
  pool.records.push_back(ds.records[0]);  // one nodule record

  auto net = MultiTaskNet::build(tiny_net_config());
  AdamState adam;
  TrainOptions opt;
  opt.epochs = 50;
  opt.batch_size = 1;
  opt.validation_fold = 99;  // nothing held out
  auto log = train_supervised(net, pool, {}, MultiTaskLossConfig{}, adam, opt);

  REQUIRE(log.rows.size() == 50);
  CHECK(log.rows.back().loss_total < log.rows.front().loss_total);
  CHECK(adam.step_count == 50);
  // Epochs strictly increase within the round.
  for (std::size_t i = 1; i < log.rows.size(); ++i)
    CHECK(log.rows[i].epoch == log.rows[i - 1].epoch + 1);
}

TEST_CASE("train_supervised: per-epoch validation metrics are logged") {
  auto ds = tiny_dataset();
  auto net = MultiTaskNet::build(tiny_net_config());
  AdamState adam;
  TrainOptions opt;
  opt.epochs = 2;
  opt.batch_size = 4;
  opt.validation_fold = 0;
  auto log = train_supervised(net, pool_of(ds), fold_records(ds, 0),
                              MultiTaskLossConfig{}, adam, opt);
  REQUIRE(log.rows.size() == 2);
  for (const auto& r : log.rows) {
    CHECK(r.val_dsc >= 0.0);
    CHECK(r.val_dsc <= 1.0);
    CHECK(r.val_sens >= 0.0);
    CHECK(r.val_sens <= 1.0);
  }
}

TEST_CASE("pseudo_label: confidence gating") {
  auto ds = tiny_dataset();
  std::vector<const CandidateRecord*> unlabeled;
  for (const auto& r : ds.records) unlabeled.push_back(&r);

  // Constant 0.5 predictor: everything is maximally uncertain.
  auto coin = [&](const Volume& v) {
    Prediction p;
    p.nodule_prob = 0.5;
    p.mask.shape = v.shape;
    p.mask.voxels.assign(v.voxels.size(), 1);
    return p;
  };

  auto all = pseudo_label(coin, unlabeled, 0.5, 0.0, 1);
  CHECK(all.accepted.size() == unlabeled.size());
  CHECK(all.rejected_ids.empty());

  auto none = pseudo_label(coin, unlabeled, 0.5, 0.9, 1);
  CHECK(none.accepted.empty());
  CHECK(none.rejected_ids.size() == unlabeled.size());

  // Empty input gives empty outputs.
  auto empty = pseudo_label(coin, {}, 0.5, 0.0, 1);
  CHECK(empty.accepted.empty());
  CHECK(empty.rejected_ids.empty());
}

TEST_CASE("pseudo_label: unlabeled records take the predicted class and mask") {
  auto ds = tiny_dataset();
  CandidateRecord a = ds.records[0], b = ds.records[1];
  for (auto* r : {&a, &b}) {
    r->label = ClassLabel::Unlabeled;
    r->mask.reset();
  }
  std::vector<const CandidateRecord*> two = {&a, &b};

  int call = 0;
  auto flip = [&](const Volume& v) {
    Prediction p;
    p.nodule_prob = (call++ == 0) ? 0.8 : 0.2;
    p.mask.shape = v.shape;
    p.mask.voxels.assign(v.voxels.size(), 0);
    p.mask.voxels[7] = 1;
    return p;
  };
  auto res = pseudo_label(flip, two, 0.5, 0.0, 3);
  REQUIRE(res.accepted.size() == 2);

  const auto& nodule = res.accepted[0];
  CHECK(nodule.label == ClassLabel::Nodule);
  CHECK(nodule.provenance == Provenance::Pseudo);
  CHECK(nodule.pseudo_round == 3);
  CHECK(nodule.mask->count() == 1);

  const auto& nonnodule = res.accepted[1];
  CHECK(nonnodule.label == ClassLabel::NonNodule);
  CHECK(nonnodule.mask->count() == 0);  // zeroed, not the predicted mask
  CHECK_NOTHROW(nonnodule.validate());
}

TEST_CASE("pseudo_label: known class labels are kept, only masks are filled") {
  auto ds = tiny_dataset();
  CandidateRecord nodule = ds.records[0];  // true nodule, mask hidden
  REQUIRE(nodule.label == ClassLabel::Nodule);
  nodule.mask.reset();

  // The model disagrees (p = 0.2) but the manual class stands.
  auto low = [&](const Volume& v) {
    Prediction p;
    p.nodule_prob = 0.2;
    p.mask.shape = v.shape;
    p.mask.voxels.assign(v.voxels.size(), 0);
    p.mask.voxels[3] = 1;
    return p;
  };
  auto res = pseudo_label(low, {&nodule}, 0.5, 0.0, 2);
  REQUIRE(res.accepted.size() == 1);
  CHECK(res.accepted[0].label == ClassLabel::Nodule);
  CHECK(res.accepted[0].mask->count() == 1);  // predicted mask attached

  // Confidence gating for known-class records uses p(true class).
  auto gated = pseudo_label(low, {&nodule}, 0.5, 0.6, 2);
  CHECK(gated.accepted.empty());
  CHECK(gated.rejected_ids.size() == 1);
}

TEST_CASE("semi_supervised_train: empty unlabeled reduces to train_supervised") {
  auto ds = tiny_dataset();
  MultiTaskLossConfig loss_cfg;
  TrainOptions opt;
  opt.epochs = 0;  // semisup driver sets per-phase targets
  opt.batch_size = 4;
  opt.validation_fold = 0;
  opt.seed = 5;

  SemiSupConfig scfg;
  scfg.epochs_initial = 3;
  scfg.rounds = 2;
  scfg.epochs_per_round = 2;
  scfg.seed = 5;

  auto net_a = MultiTaskNet::build(tiny_net_config());
  AdamState adam_a;
  MetricsLog log_a;
  auto result = semi_supervised_train(net_a, pool_of(ds), {}, scfg, loss_cfg,
                                      adam_a, opt, fold_records(ds, 0), log_a);

  auto net_b = MultiTaskNet::build(tiny_net_config());
  AdamState adam_b;
  TrainOptions sup = opt;
  sup.epochs = 3;
  auto log_b = train_supervised(net_b, pool_of(ds), fold_records(ds, 0),
                                loss_cfg, adam_b, sup);

  CHECK(params_equal(net_a, net_b));
  CHECK(adam_a.step_count == adam_b.step_count);
  REQUIRE(log_a.rows.size() == log_b.rows.size());
  for (std::size_t i = 0; i < log_a.rows.size(); ++i) {
    CHECK(log_a.rows[i].epoch == log_b.rows[i].epoch);
    CHECK(log_a.rows[i].loss_total == log_b.rows[i].loss_total);
    CHECK(log_a.rows[i].val_dsc == log_b.rows[i].val_dsc);
  }
  CHECK(result.accepted_total == 0);
  CHECK(result.remaining.empty());
}

TEST_CASE("semi_supervised_train: pool bookkeeping across rounds") {
  auto ds = tiny_dataset(9, 4);
  // Half the training records become unlabeled.
  LabeledPool pool;
  std::vector<CandidateRecord> unlabeled;
  int flip = 0;
  for (const auto& r : ds.records) {
    if (r.fold == 0) continue;  // validation scan stays out entirely
    if (flip++ % 2 == 0) {
      pool.records.push_back(r);
    } else {
      CandidateRecord u = r;
      u.label = ClassLabel::Unlabeled;
      u.mask.reset();
      unlabeled.push_back(std::move(u));
    }
  }
  const std::size_t initial_unlabeled = unlabeled.size();
  const std::size_t manual = pool.records.size();
  std::vector<std::string> manual_ids;
  for (const auto& r : pool.records) manual_ids.push_back(r.id);

  SemiSupConfig scfg;
  scfg.chunk_fraction = 0.5;
  scfg.rounds = 3;
  scfg.epochs_initial = 1;
  scfg.epochs_per_round = 1;
  scfg.seed = 21;

  TrainOptions opt;
  opt.batch_size = 4;
  opt.validation_fold = 0;
  opt.seed = 21;

  auto net = MultiTaskNet::build(tiny_net_config());
  AdamState adam;
  MetricsLog log;

  std::size_t last_pool_size = pool.records.size();
  SemiSupHooks hooks;
  hooks.on_round_merged = [&](int round, const LabeledPool& p,
                              const std::vector<CandidateRecord>& remaining) {
    CHECK(round >= 1);
    CHECK(p.records.size() >= last_pool_size);  // pool monotonicity
    last_pool_size = p.records.size();
    CHECK(p.pseudo_count() + remaining.size() == initial_unlabeled);
    CHECK(p.manual_count() == manual);
  };

  auto result = semi_supervised_train(net, std::move(pool), std::move(unlabeled),
                                      scfg, MultiTaskLossConfig{}, adam, opt,
                                      fold_records(ds, 0), log, hooks);

  CHECK(result.accepted_total + result.remaining.size() == initial_unlabeled);
  CHECK(result.pool.manual_count() == manual);
  CHECK(result.pool.pseudo_count() == result.accepted_total);

  // Manual records in the final pool are byte-identical to the originals.
  for (const auto& id : manual_ids) {
    const CandidateRecord* orig = nullptr;
    for (const auto& r : ds.records)
      if (r.id == id) orig = &r;
    const CandidateRecord* fin = nullptr;
    for (const auto& r : result.pool.records)
      if (r.id == id) fin = &r;
    REQUIRE(fin != nullptr);
    CHECK(fin->label == orig->label);
    CHECK(fin->provenance == orig->provenance);
    CHECK(fin->patch.voxels == orig->patch.voxels);
    CHECK(fin->mask->voxels == orig->mask->voxels);
  }

  // Rows are tagged with their round and epochs keep increasing.
  REQUIRE(log.rows.size() == 4);  // 1 initial + 3 rounds
  CHECK(log.rows[0].round == 0);
  CHECK(log.rows[1].round == 1);
  CHECK(log.rows[3].round == 3);
  for (std::size_t i = 1; i < log.rows.size(); ++i)
    CHECK(log.rows[i].epoch == log.rows[i - 1].epoch + 1);
}

TEST_CASE("semi_supervised_train: replay determinism") {
  auto run_once = [&]() {
    auto ds = tiny_dataset(15, 4);
    LabeledPool pool;
    std::vector<CandidateRecord> unlabeled;
    int flip = 0;
    for (const auto& r : ds.records) {
      if (r.fold == 0) continue;
      if (flip++ % 3 == 0) {
        CandidateRecord u = r;
        u.label = ClassLabel::Unlabeled;
        u.mask.reset();
        unlabeled.push_back(std::move(u));
      } else {
        pool.records.push_back(r);
      }
    }
    SemiSupConfig scfg;
    scfg.chunk_fraction = 0.5;
    scfg.rounds = 2;
    scfg.epochs_initial = 1;
    scfg.epochs_per_round = 1;
    scfg.seed = 31;
    TrainOptions opt;
    opt.batch_size = 4;
    opt.validation_fold = 0;
    opt.seed = 31;
    auto net = MultiTaskNet::build(tiny_net_config());
    AdamState adam;
    MetricsLog log;
    auto ignored_ds = ds;  // keep validation records alive through the call
    auto res = semi_supervised_train(net, std::move(pool), std::move(unlabeled),
                                     scfg, MultiTaskLossConfig{}, adam, opt,
                                     fold_records(ignored_ds, 0), log);
    std::vector<std::string> pool_ids;
    for (const auto& r : res.pool.records) pool_ids.push_back(r.id);
    std::vector<std::vector<double>> weights;
    for (const auto& p : net.parameters()) weights.push_back(p->values);
    return std::tuple{pool_ids, weights, log.rows.size(),
                      log.rows.back().val_dsc};
  };
  auto a = run_once();
  auto b = run_once();
  CHECK(std::get<0>(a) == std::get<0>(b));
  CHECK(std::get<1>(a) == std::get<1>(b));
  CHECK(std::get<2>(a) == std::get<2>(b));
  CHECK(std::get<3>(a) == std::get<3>(b));
}

TEST_CASE("pool checkpoint round-trips through CSV and mask files") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "ndl_pool_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);

  auto ds = tiny_dataset(33, 4);
  LabeledPool pool;
  pool.records.push_back(ds.records[0]);  // manual
  CandidateRecord pseudo = ds.records[1];
  pseudo.provenance = Provenance::Pseudo;
  pseudo.pseudo_round = 2;
  pseudo.label = ClassLabel::Nodule;
  Mask m;
  m.shape = pseudo.patch.shape;
  m.voxels.assign(pseudo.patch.voxels.size(), 0);
  m.voxels[5] = 1;
  m.voxels[9] = 1;
  pseudo.mask = m;
  pool.records.push_back(pseudo);

  write_pool_checkpoint(pool, dir / "pool.csv", dir / "pool_masks");
  auto back = read_pool_checkpoint(ds, dir / "pool.csv");
  REQUIRE(back.records.size() == 2);
  CHECK(back.records[0].id == pool.records[0].id);
  CHECK(back.records[0].provenance == Provenance::SyntheticTruth);
  CHECK(back.records[1].provenance == Provenance::Pseudo);
  CHECK(back.records[1].pseudo_round == 2);
  CHECK(back.records[1].label == ClassLabel::Nodule);
  CHECK(back.records[1].mask->voxels == m.voxels);
  CHECK(back.manual_count() == 1);
  CHECK(back.pseudo_count() == 1);

  fs::remove_all(dir);
}

TEST_CASE("train_supervised: resume at an epoch boundary replays exactly") {
  auto ds = tiny_dataset(41, 4);
  MultiTaskLossConfig loss_cfg;

  auto straight = MultiTaskNet::build(tiny_net_config());
  AdamState adam_s;
  TrainOptions opt;
  opt.epochs = 4;
  opt.batch_size = 4;
  opt.validation_fold = 0;
  opt.seed = 77;
  auto log_s = train_supervised(straight, pool_of(ds), fold_records(ds, 0),
                                loss_cfg, adam_s, opt);

  // Interrupted arm: 2 epochs, state round-trip through files, 2 more.
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "ndl_resume";
  fs::create_directories(dir);
  auto first = MultiTaskNet::build(tiny_net_config());
  AdamState adam_1;
  TrainOptions half = opt;
  half.epochs = 2;
  auto log_1 = train_supervised(first, pool_of(ds), fold_records(ds, 0),
                                loss_cfg, adam_1, half);
  first.save_weights(dir / "w.ndlw");
  adam_1.save(dir / "adam.ndla");

  auto second = MultiTaskNet::load_weights(dir / "w.ndlw", tiny_net_config());
  AdamState adam_2 = AdamState::load(dir / "adam.ndla");
  TrainOptions rest = opt;
  rest.start_epoch = 2;
  rest.epochs = 4;
  auto log_2 = train_supervised(second, pool_of(ds), fold_records(ds, 0),
                                loss_cfg, adam_2, rest);

  CHECK(params_equal(straight, second));
  CHECK(adam_2.step_count == adam_s.step_count);
  REQUIRE(log_1.rows.size() + log_2.rows.size() == log_s.rows.size());
  CHECK(log_2.rows.back().val_dsc == log_s.rows.back().val_dsc);
  CHECK(log_2.rows.back().loss_total == log_s.rows.back().loss_total);
  fs::remove_all(dir);
}
