#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "ndl/data.hpp"
#include "ndl/losses.hpp"
#include "ndl/model.hpp"
#include "ndl/semisup.hpp"

namespace ndl {

enum class Strategy {
  SingleTaskSeg,
  SingleTaskCls,
  MultiTaskManual,
  MultiTaskSemisup,
};

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

// Effective configuration of one pipeline run: a flat key=value file with
// sections. Every field has a default; unknown sections or keys are rejected;
// serialize() -> parse() round-trips bit-exactly (doubles printed at full
// precision). One [run] seed feeds every module; stream separation happens
// inside the modules.
struct RunConfig {
  // [run]
  Strategy strategy = Strategy::MultiTaskManual;
  std::uint64_t seed = 1;

  // [paths]
  std::string data_dir = "data";
  std::string weights;  // input weights for eval / pseudo-label

  // [data]
  int n_scans = 40;
  int nodules_per_scan = 10;
  int nonnodules_per_scan = 10;
  Extents patch_shape{8, 32, 32};
  bool augment = true;
  int k_folds = 10;

  // [network] (input shape comes from [data] patch_*)
  std::vector<int> channels{16, 16, 32, 32, 64, 64, 64, 64, 64, 32, 32, 16, 16, 16};
  std::vector<int> pools{2, 4, 6};
  std::vector<int> upsamples{8, 10, 12};
  int fc_hidden = 1024;
  int cls_head_channels = 2;
  bool skips = false;

  // [loss]
  MultiTaskLossConfig loss;
  bool nonnodule_seg_loss = true;

  // [optim]
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  // [train]
  int epochs = 30;
  int batch_size = 8;
  int validation_fold = 0;
  double seg_threshold = 0.5;
  double labeled_fraction = 1.0;
  // Scarcity shape of the labeled_fraction split: true hides only the masks
  // of the unlabeled nodule families (class labels stay, mirroring scarce
  // annotations); false strips class and mask both.
  bool mask_scarce = true;

  // [semisup]
  double chunk_fraction = 0.25;
  int rounds = 4;
  int epochs_initial = 10;
  int epochs_per_round = 5;
  double confidence_floor = 0.0;

  static RunConfig parse(const std::string& text, const std::string& origin);
  static RunConfig load(const std::filesystem::path& path);
  std::string serialize() const;
  void save(const std::filesystem::path& path) const;

  void validate() const;

  // Views assembled for the modules.
  GenConfig gen_config() const;
  NetworkConfig network_config() const;
  SemiSupConfig semisup_config() const;
  AdamState adam_state() const;
};

}  // namespace ndl
