#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ndl/adam.hpp"
#include "ndl/data.hpp"
#include "ndl/eval.hpp"
#include "ndl/losses.hpp"
#include "ndl/model.hpp"

namespace ndl {

struct SemiSupConfig {
  double chunk_fraction = 0.25;  // fraction of remaining unlabeled per round
  int rounds = 4;
  int epochs_initial = 10;
  int epochs_per_round = 5;
  double confidence_floor = 0.0;  // 0 disables the gate
  std::uint64_t seed = 1;

  void validate() const;
};

// Labeled training pool. Records with provenance != Pseudo are trusted
// ("manual") and are never modified; pseudo records carry the self-training
// round that produced them.
struct LabeledPool {
  std::vector<CandidateRecord> records;

  std::size_t manual_count() const;
  std::size_t pseudo_count() const;
};

struct TrainOptions {
  int epochs = 0;       // global target; runs epochs start_epoch+1 .. epochs
  int start_epoch = 0;  // epochs already completed (resume)
  int batch_size = 8;
  int validation_fold = 0;
  double seg_threshold = 0.5;
  bool nonnodule_seg_loss = true;  // all-zero masks teach the seg head to suppress
  std::uint64_t seed = 1;
  int round_tag = 0;  // written into MetricsLog rows

  std::function<void(int epoch)> on_epoch_end;   // checkpoint hook
  std::function<void()> on_batch_grads;          // runs after each backward
};

// One supervised phase: per epoch, a seed-derived shuffle of the pool records
// outside the validation fold, mini-batch forward/backward, one ADAM step per
// batch, then a MetricsLog row with validation DSC and sensitivity. The
// shuffle stream depends only on (seed, epoch index), so resuming at an epoch
// boundary replays the remaining epochs bit-identically.
void train_supervised(MultiTaskNet& net, const LabeledPool& pool,
                      const std::vector<const CandidateRecord*>& validation,
                      const MultiTaskLossConfig& loss_cfg, AdamState& adam,
                      const TrainOptions& opt, MetricsLog& log);

MetricsLog train_supervised(MultiTaskNet& net, const LabeledPool& pool,
                            const std::vector<const CandidateRecord*>& validation,
                            const MultiTaskLossConfig& loss_cfg, AdamState& adam,
                            const TrainOptions& opt);

struct PseudoLabelResult {
  std::vector<CandidateRecord> accepted;
  std::vector<std::string> rejected_ids;  // stay unlabeled this round
};

// Predicts a class and a mask for each unlabeled patch. With a positive
// confidence floor, records with max(p, 1-p) below it are rejected. Accepted
// nodules carry the thresholded predicted mask; accepted non-nodules carry an
// all-zero mask (a non-nodule's mask is empty by definition).
PseudoLabelResult pseudo_label(const Predictor& predict,
                               const std::vector<const CandidateRecord*>& unlabeled,
                               double seg_threshold, double confidence_floor,
                               int round);
PseudoLabelResult pseudo_label(const MultiTaskNet& net,
                               const std::vector<const CandidateRecord*>& unlabeled,
                               double seg_threshold, double confidence_floor,
                               int round);

// Resume state for the self-training loop; the pool and unlabeled list passed
// alongside must already reflect `rounds_merged` merges.
struct SemiSupResume {
  int epochs_done = 0;
  int rounds_merged = 0;
  bool already_ordered = false;  // skip the initial unlabeled shuffle
};

struct SemiSupHooks {
  // After a round's pseudo-labels are merged into the pool.
  std::function<void(int round, const LabeledPool& pool,
                     const std::vector<CandidateRecord>& remaining)>
      on_round_merged;
  // After every epoch (checkpointing).
  std::function<void(int epoch, int round, const LabeledPool& pool,
                     const std::vector<CandidateRecord>& remaining)>
      on_epoch_end;
};

struct SemiSupResult {
  LabeledPool pool;
  std::vector<CandidateRecord> remaining;  // still unlabeled at the end
  std::size_t accepted_total = 0;
  std::size_t rejected_total = 0;
};

// Initial supervised training, then per round: pseudo-label a chunk_fraction
// slice of the remaining unlabeled records, merge the accepted ones, retrain.
// Stops after `rounds` or when the unlabeled set is exhausted. With no
// unlabeled data this reduces exactly (bit-identically) to train_supervised.
SemiSupResult semi_supervised_train(
    MultiTaskNet& net, LabeledPool pool, std::vector<CandidateRecord> unlabeled,
    const SemiSupConfig& cfg, const MultiTaskLossConfig& loss_cfg,
    AdamState& adam, const TrainOptions& base,
    const std::vector<const CandidateRecord*>& validation, MetricsLog& log,
    const SemiSupHooks& hooks = {},
    const std::optional<SemiSupResume>& resume = std::nullopt);

// Pool checkpoint: CSV (id,provenance,round,class,mask_path) plus one mask
// file per pseudo record. Manual records are recovered from the dataset.
void write_pool_checkpoint(const LabeledPool& pool,
                           const std::filesystem::path& csv_path,
                           const std::filesystem::path& mask_dir);
LabeledPool read_pool_checkpoint(const Dataset& ds,
                                 const std::filesystem::path& csv_path);

}  // namespace ndl
