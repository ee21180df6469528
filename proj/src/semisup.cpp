#include "ndl/semisup.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include "ndl/rng.hpp"

namespace ndl {

void SemiSupConfig::validate() const {
  if (!(chunk_fraction > 0.0 && chunk_fraction <= 1.0))
    throw ConfigError("semisup config: chunk_fraction must lie in (0,1]");
  if (rounds < 1) throw ConfigError("semisup config: rounds must be >= 1");
  if (epochs_initial < 0 || epochs_per_round < 0)
    throw ConfigError("semisup config: epoch counts must be >= 0");
  if (!(confidence_floor >= 0.0 && confidence_floor < 1.0))
    throw ConfigError("semisup config: confidence_floor must lie in [0,1)");
}

std::size_t LabeledPool::manual_count() const {
  std::size_t n = 0;
  for (const auto& r : records) n += (r.provenance != Provenance::Pseudo);
  return n;
}

std::size_t LabeledPool::pseudo_count() const {
  return records.size() - manual_count();
}

// ---------------------------------------------------------------------------
// Supervised phase
// ---------------------------------------------------------------------------

namespace {

struct BatchTensors {
  TensorPtr patches;
  TensorPtr target;
  std::vector<int> labels;
  std::vector<double> seg_row_weight;
};

BatchTensors assemble_batch(const std::vector<const CandidateRecord*>& recs,
                            bool nonnodule_seg_loss) {
  BatchTensors b;
  std::vector<const Volume*> patches;
  patches.reserve(recs.size());
  for (const auto* r : recs) patches.push_back(&r->patch);
  b.patches = batch_from_volumes(patches);

  b.target = make_tensor(b.patches->shape, 0.0);
  const std::int64_t per = extent_count(recs[0]->patch.shape);
  b.labels.resize(recs.size());
  b.seg_row_weight.assign(recs.size(), 1.0);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto& r = *recs[i];
    if (r.label == ClassLabel::Unlabeled)
      throw DataError("train: record '" + r.id + "' is unlabeled");
    b.labels[i] = r.label == ClassLabel::Nodule ? 1 : 0;
    if (r.label == ClassLabel::Nodule) {
      if (r.mask) {
        const auto& mv = r.mask->voxels;
        double* dst =
            b.target->values.data() + static_cast<std::int64_t>(i) * per;
        for (std::int64_t j = 0; j < per; ++j)
          dst[j] = mv[static_cast<std::size_t>(j)] ? 1.0 : 0.0;
      } else {
        // Class is known but the mask is not: classification signal only.
        b.seg_row_weight[i] = 0.0;
      }
    } else if (!nonnodule_seg_loss) {
      b.seg_row_weight[i] = 0.0;  // excluded from the segmentation loss
    }
  }
  return b;
}

}  // namespace

void train_supervised(MultiTaskNet& net, const LabeledPool& pool,
                      const std::vector<const CandidateRecord*>& validation,
                      const MultiTaskLossConfig& loss_cfg, AdamState& adam,
                      const TrainOptions& opt, MetricsLog& log) {
  loss_cfg.validate();
  if (opt.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (pool.records.empty()) throw DataError("train: empty pool");
  if (opt.epochs <= opt.start_epoch) return;  // nothing left to do

  std::vector<const CandidateRecord*> train_recs;
  for (const auto& r : pool.records)
    if (r.fold != opt.validation_fold) train_recs.push_back(&r);
  if (train_recs.empty())
    throw DataError("train: no records outside validation fold " +
                    std::to_string(opt.validation_fold));

  auto params = net.parameters();

  for (int epoch = opt.start_epoch + 1; epoch <= opt.epochs; ++epoch) {
    // Shuffle stream depends only on (seed, epoch): resume replays exactly.
    std::vector<std::size_t> order(train_recs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(mix_seed(opt.seed, 0xE90Cull), static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);

    double sum_total = 0.0, sum_cls = 0.0, sum_seg = 0.0;
    const double n_samples = static_cast<double>(order.size());

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(opt.batch_size)) {
      const std::size_t end = std::min(
          order.size(), start + static_cast<std::size_t>(opt.batch_size));
      std::vector<const CandidateRecord*> recs;
      recs.reserve(end - start);
      for (std::size_t i = start; i < end; ++i)
        recs.push_back(train_recs[order[i]]);

      auto batch = assemble_batch(recs, opt.nonnodule_seg_loss);
      Graph g;
      auto out = net.forward(&g, batch.patches, ops::Mode::Train);
      auto lc = ops::cross_entropy_class(&g, out.class_probs, batch.labels,
                                         loss_cfg.clamp_eps);
      auto ls = ops::cross_entropy_voxel_rows(&g, out.seg_probs, batch.target,
                                              batch.seg_row_weight,
                                              loss_cfg.clamp_eps);
      auto total = ops::multi_task_loss(&g, lc, ls, params, loss_cfg);
      if (!std::isfinite(total->values[0]))
        throw NumericError("train: non-finite loss at epoch " +
                           std::to_string(epoch));

      zero_grads(params);
      g.backward(total);
      if (opt.on_batch_grads) opt.on_batch_grads();
      adam_step(params, adam);

      const double w = static_cast<double>(end - start);
      sum_total += total->values[0] * w;
      sum_cls += lc->values[0] * w;
      sum_seg += ls->values[0] * w;
    }

    MetricsLog::Row row;
    row.epoch = epoch;
    row.round = opt.round_tag;
    row.loss_total = sum_total / n_samples;
    row.loss_cls = sum_cls / n_samples;
    row.loss_seg = sum_seg / n_samples;
    if (!validation.empty()) {
      auto fm = evaluate_fold(net, validation, opt.seg_threshold, opt.batch_size);
      row.val_dsc = fm.mean_dsc;
      row.val_sens = fm.sens;
    } else {
      row.val_dsc = std::nan("");
      row.val_sens = std::nan("");
    }
    log.rows.push_back(row);
    if (opt.on_epoch_end) opt.on_epoch_end(epoch);
  }
}

MetricsLog train_supervised(MultiTaskNet& net, const LabeledPool& pool,
                            const std::vector<const CandidateRecord*>& validation,
                            const MultiTaskLossConfig& loss_cfg, AdamState& adam,
                            const TrainOptions& opt) {
  MetricsLog log;
  train_supervised(net, pool, validation, loss_cfg, adam, opt, log);
  return log;
}

// ---------------------------------------------------------------------------
// Pseudo-labeling
// ---------------------------------------------------------------------------

namespace {

CandidateRecord accept_record(const CandidateRecord& src, double nodule_prob,
                              Mask predicted_mask, int round) {
  CandidateRecord out = src;
  out.provenance = Provenance::Pseudo;
  out.pseudo_round = round;
  // Fully unlabeled records take the predicted class; records that already
  // carry a (manual) class keep it and only gain the predicted mask.
  if (src.label == ClassLabel::Unlabeled)
    out.label = nodule_prob >= 0.5 ? ClassLabel::Nodule : ClassLabel::NonNodule;
  if (out.label == ClassLabel::Nodule) {
    out.mask = std::move(predicted_mask);
  } else {
    Mask zero;
    zero.shape = src.patch.shape;
    zero.voxels.assign(src.patch.voxels.size(), 0);
    out.mask = std::move(zero);
  }
  return out;
}

double prediction_confidence(const CandidateRecord& src, double nodule_prob) {
  switch (src.label) {
    case ClassLabel::Nodule: return nodule_prob;
    case ClassLabel::NonNodule: return 1.0 - nodule_prob;
    case ClassLabel::Unlabeled: break;
  }
  return std::max(nodule_prob, 1.0 - nodule_prob);
}

}  // namespace

PseudoLabelResult pseudo_label(const Predictor& predict,
                               const std::vector<const CandidateRecord*>& unlabeled,
                               double seg_threshold, double confidence_floor,
                               int round) {
  if (!(confidence_floor >= 0.0 && confidence_floor < 1.0))
    throw ConfigError("pseudo_label: confidence_floor must lie in [0,1)");
  PseudoLabelResult res;
  for (const auto* rec : unlabeled) {
    Prediction p = predict(rec->patch);
    if (confidence_floor > 0.0 &&
        prediction_confidence(*rec, p.nodule_prob) < confidence_floor) {
      res.rejected_ids.push_back(rec->id);
      continue;
    }
    res.accepted.push_back(
        accept_record(*rec, p.nodule_prob, std::move(p.mask), round));
  }
  (void)seg_threshold;
  return res;
}

PseudoLabelResult pseudo_label(const MultiTaskNet& net,
                               const std::vector<const CandidateRecord*>& unlabeled,
                               double seg_threshold, double confidence_floor,
                               int round) {
  return pseudo_label(
      [&](const Volume& v) { return net.predict(v, seg_threshold); }, unlabeled,
      seg_threshold, confidence_floor, round);
}

// ---------------------------------------------------------------------------
// Self-training loop
// ---------------------------------------------------------------------------

SemiSupResult semi_supervised_train(
    MultiTaskNet& net, LabeledPool pool, std::vector<CandidateRecord> unlabeled,
    const SemiSupConfig& cfg, const MultiTaskLossConfig& loss_cfg,
    AdamState& adam, const TrainOptions& base,
    const std::vector<const CandidateRecord*>& validation, MetricsLog& log,
    const SemiSupHooks& hooks, const std::optional<SemiSupResume>& resume) {
  cfg.validate();
  if (pool.records.empty()) throw DataError("semi_supervised_train: empty pool");

  SemiSupResult res;
  res.pool = std::move(pool);
  res.remaining = std::move(unlabeled);

  int epochs_done = resume ? resume->epochs_done : 0;
  int rounds_merged = resume ? resume->rounds_merged : 0;
  if (!(resume && resume->already_ordered)) {
    Rng rng(mix_seed(cfg.seed, 0x5EEDull));
    rng.shuffle(res.remaining);
  }

  auto run_phase = [&](int round, int target_end) {
    if (epochs_done >= target_end) return;
    TrainOptions opt = base;
    opt.start_epoch = epochs_done;
    opt.epochs = target_end;
    opt.round_tag = round;
    if (hooks.on_epoch_end) {
      opt.on_epoch_end = [&, round](int epoch) {
        hooks.on_epoch_end(epoch, round, res.pool, res.remaining);
        if (base.on_epoch_end) base.on_epoch_end(epoch);
      };
    }
    train_supervised(net, res.pool, validation, loss_cfg, adam, opt, log);
    epochs_done = target_end;
  };

  run_phase(0, cfg.epochs_initial);

  for (int round = 1; round <= cfg.rounds; ++round) {
    if (round > rounds_merged) {
      if (res.remaining.empty()) break;
      const auto chunk_n = static_cast<std::size_t>(std::max<std::int64_t>(
          1, static_cast<std::int64_t>(
                 std::ceil(cfg.chunk_fraction *
                           static_cast<double>(res.remaining.size())))));
      const std::size_t take = std::min(chunk_n, res.remaining.size());

      std::vector<CandidateRecord> chunk(
          std::make_move_iterator(res.remaining.begin()),
          std::make_move_iterator(res.remaining.begin() +
                                  static_cast<std::ptrdiff_t>(take)));
      res.remaining.erase(res.remaining.begin(),
                          res.remaining.begin() + static_cast<std::ptrdiff_t>(take));

      std::vector<const CandidateRecord*> chunk_ptrs;
      chunk_ptrs.reserve(chunk.size());
      for (const auto& r : chunk) chunk_ptrs.push_back(&r);
      auto labeled = pseudo_label(net, chunk_ptrs, base.seg_threshold,
                                  cfg.confidence_floor, round);

      res.accepted_total += labeled.accepted.size();
      res.rejected_total += labeled.rejected_ids.size();
      for (auto& rec : labeled.accepted) res.pool.records.push_back(std::move(rec));
      // Rejected records stay unlabeled and go back to the end of the queue.
      for (auto& rec : chunk) {
        if (std::find(labeled.rejected_ids.begin(), labeled.rejected_ids.end(),
                      rec.id) != labeled.rejected_ids.end())
          res.remaining.push_back(std::move(rec));
      }
      rounds_merged = round;
      if (hooks.on_round_merged)
        hooks.on_round_merged(round, res.pool, res.remaining);
    }
    run_phase(round, cfg.epochs_initial + round * cfg.epochs_per_round);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Pool checkpoint
// ---------------------------------------------------------------------------

namespace {
constexpr const char* kPoolHeader = "id,provenance,round,class,mask_path";
}

void write_pool_checkpoint(const LabeledPool& pool,
                           const std::filesystem::path& csv_path,
                           const std::filesystem::path& mask_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(mask_dir);
  std::ofstream os(csv_path);
  if (!os) throw DataError("cannot write pool checkpoint to " + csv_path.string());
  os << kPoolHeader << "\n";
  for (const auto& r : pool.records) {
    if (r.provenance == Provenance::Pseudo && !r.mask)
      throw DataError("pool checkpoint: pseudo record '" + r.id +
                      "' has no mask");
    // Masks are written for every record that has one; an empty path means
    // the pool record genuinely carries no mask (classification-only row).
    std::string mask_rel;
    if (r.mask) {
      const std::string name =
          r.id + (r.provenance == Provenance::Pseudo ? ".pseudo.msk" : ".msk");
      mask_rel = (mask_dir.filename() / name).string();
      write_mask(mask_dir / name, *r.mask);
    }
    os << r.id << ',' << to_string(r.provenance) << ',' << r.pseudo_round << ','
       << to_string(r.label) << ',' << mask_rel << "\n";
  }
  if (!os) throw DataError("short write on " + csv_path.string());
}

LabeledPool read_pool_checkpoint(const Dataset& ds,
                                 const std::filesystem::path& csv_path) {
  std::unordered_map<std::string, const CandidateRecord*> by_id;
  for (const auto& r : ds.records) by_id[r.id] = &r;

  std::ifstream is(csv_path);
  if (!is) throw DataError("cannot read pool checkpoint from " + csv_path.string());
  std::string line;
  if (!std::getline(is, line) || line != kPoolHeader)
    throw FormatError(csv_path.string() + ": unexpected pool header");

  LabeledPool pool;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::string cur;
    for (char c : line) {
      if (c == ',') {
        cols.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    cols.push_back(cur);
    if (cols.size() != 5)
      throw FormatError(csv_path.string() + ": expected 5 columns");

    auto it = by_id.find(cols[0]);
    if (it == by_id.end())
      throw DataError("pool checkpoint references unknown record '" + cols[0] +
                      "'");
    CandidateRecord rec = *it->second;
    rec.provenance = provenance_from_string(cols[1]);
    rec.pseudo_round = std::stoi(cols[2]);
    rec.label = class_from_string(cols[3]);
    if (cols[4].empty()) {
      if (rec.provenance == Provenance::Pseudo)
        throw FormatError(csv_path.string() + ": pseudo record '" + cols[0] +
                          "' has no mask path");
      rec.mask.reset();  // classification-only pool row
    } else {
      rec.mask = read_mask(csv_path.parent_path() / cols[4]);
    }
    pool.records.push_back(std::move(rec));
  }
  return pool;
}

}  // namespace ndl
