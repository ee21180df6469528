// nodulenet CLI: synthetic data generation, the three training strategies,
// pseudo-labeling, evaluation, and SVG plot emission.
//
// Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric error.

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <unordered_map>

#include "ndl/eval.hpp"
#include "ndl/rng.hpp"
#include "ndl/runconfig.hpp"
#include "ndl/semisup.hpp"
#include "ndl/svgplot.hpp"

namespace fs = std::filesystem;
using namespace ndl;

namespace {

// Thrown by the --halt-after hook; the run is resumable, exit is clean.
struct HaltRequested {
  int epochs_this_run;
};

// ---------------------------------------------------------------------------
// Labeled/unlabeled split (desk-scale mirror of scarce annotations)
// ---------------------------------------------------------------------------

struct LabeledSplit {
  LabeledPool pool;
  std::vector<CandidateRecord> unlabeled;
};

// Keeps `fraction` of the training-fold record families labeled, stratified
// per class. A family is an original record plus its shift variants, so
// hidden labels never leak through augmentation. Validation-fold records
// enter neither side.
//
// mask_scarce=true mirrors scarce annotations: unlabeled NODULE families
// lose only their masks (class labels stay, the records remain in the pool
// as classification-only rows) and the mask-less nodules form the unlabeled
// list for pseudo-labeling; non-nodule masks are trivially known. With
// mask_scarce=false the unlabeled families lose class and mask both and
// leave the pool entirely.
LabeledSplit split_labeled(const Dataset& ds, double fraction,
                           std::uint64_t seed, int validation_fold,
                           bool mask_scarce) {
  std::unordered_map<std::string, const CandidateRecord*> by_id;
  for (const auto& r : ds.records) by_id[r.id] = &r;

  std::vector<std::string> roots_nodule, roots_other;
  std::unordered_map<std::string, std::vector<const CandidateRecord*>> family;
  for (const auto& r : ds.records) {
    if (r.fold == validation_fold) continue;
    const std::string root = r.parent_id.empty() ? r.id : r.parent_id;
    auto [it, fresh] = family.try_emplace(root);
    it->second.push_back(&r);
    if (fresh) {
      auto root_it = by_id.find(root);
      if (root_it == by_id.end())
        throw DataError("record '" + r.id + "' references missing parent '" +
                        root + "'");
      (root_it->second->label == ClassLabel::Nodule ? roots_nodule : roots_other)
          .push_back(root);
    }
  }

  LabeledSplit out;
  auto deal = [&](std::vector<std::string>& roots, std::uint64_t stream,
                  bool hide) {
    Rng rng(mix_seed(seed, stream));
    rng.shuffle(roots);
    const auto n_labeled = static_cast<std::size_t>(std::ceil(
        fraction * static_cast<double>(roots.size())));
    for (std::size_t i = 0; i < roots.size(); ++i) {
      for (const auto* rec : family.at(roots[i])) {
        if (i < n_labeled || !hide) {
          out.pool.records.push_back(*rec);
        } else if (mask_scarce) {
          CandidateRecord u = *rec;
          u.mask.reset();  // class label stays, the mask is unknown
          out.pool.records.push_back(u);
          out.unlabeled.push_back(std::move(u));
        } else {
          CandidateRecord u = *rec;
          u.label = ClassLabel::Unlabeled;
          u.mask.reset();
          out.unlabeled.push_back(std::move(u));
        }
      }
    }
  };
  // Only nodule masks are ever scarce; non-nodule masks are trivially known.
  deal(roots_nodule, 0x1AB0ull, true);
  deal(roots_other, 0x1AB1ull, !mask_scarce);
  return out;
}

std::vector<const CandidateRecord*> validation_records(const Dataset& ds,
                                                       int fold) {
  // Originals only: shifted copies would double-count lesions in the metrics.
  std::vector<const CandidateRecord*> out;
  for (const auto& r : ds.records)
    if (r.fold == fold && r.parent_id.empty()) out.push_back(&r);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

struct CheckpointState {
  int epochs_done = 0;
  int rounds_merged = 0;
};

void write_checkpoint(const fs::path& out, const MultiTaskNet& net,
                      const AdamState& adam, const LabeledPool& pool,
                      const std::vector<CandidateRecord>& remaining,
                      const MetricsLog& log, const CheckpointState& st) {
  const fs::path tmp = out / "checkpoint.tmp";
  const fs::path final_dir = out / "checkpoint";
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  net.save_weights(tmp / "weights.ndlw");
  adam.save(tmp / "adam.ndla");
  write_pool_checkpoint(pool, tmp / "pool.csv", tmp / "pool_masks");
  {
    std::ofstream os(tmp / "remaining.txt");
    for (const auto& r : remaining) os << r.id << "\n";
  }
  log.write_csv(tmp / "metrics.csv");
  {
    std::ofstream os(tmp / "state.cfg");
    os << "epochs_done = " << st.epochs_done << "\n";
    os << "rounds_merged = " << st.rounds_merged << "\n";
  }
  fs::remove_all(final_dir);
  fs::rename(tmp, final_dir);
}

std::optional<CheckpointState> read_checkpoint_state(const fs::path& out) {
  const fs::path state = out / "checkpoint" / "state.cfg";
  if (!fs::exists(state)) return std::nullopt;
  std::ifstream is(state);
  CheckpointState st;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string key, eq;
    int value;
    if (ls >> key >> eq >> value) {
      if (key == "epochs_done") st.epochs_done = value;
      if (key == "rounds_merged") st.rounds_merged = value;
    }
  }
  return st;
}

std::vector<CandidateRecord> read_remaining(const Dataset& ds,
                                            const fs::path& path) {
  std::unordered_map<std::string, const CandidateRecord*> by_id;
  for (const auto& r : ds.records) by_id[r.id] = &r;
  std::vector<CandidateRecord> out;
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  std::string id;
  while (std::getline(is, id)) {
    if (id.empty()) continue;
    auto it = by_id.find(id);
    if (it == by_id.end())
      throw DataError("checkpoint references unknown record '" + id + "'");
    CandidateRecord u = *it->second;
    u.label = ClassLabel::Unlabeled;
    u.mask.reset();
    out.push_back(std::move(u));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

void cmd_gen_data(const RunConfig& cfg, const fs::path& out, bool verify) {
  auto ds = generate_synthetic(cfg.gen_config());
  if (cfg.augment) balance_by_augmentation(ds);
  kfold_split(ds, cfg.k_folds, cfg.seed);
  save_dataset(ds, out);
  cfg.save(out / "config.effective");

  int nodules = 0;
  for (const auto& r : ds.records) nodules += r.label == ClassLabel::Nodule;
  std::printf("gen-data: %zu records (%d nodule / %zu non-nodule) in %s\n",
              ds.records.size(), nodules, ds.records.size() - nodules,
              out.string().c_str());
  if (verify) {
    verify_dataset(load_dataset(out));
    std::printf("verify: all dataset invariants hold\n");
  }
}

void cmd_train(const RunConfig& cfg, const fs::path& out, bool resume,
               int halt_after) {
  auto ds = load_dataset(cfg.data_dir);
  if (ds.patch_shape != cfg.patch_shape)
    throw ConfigError("dataset patch shape does not match the config");
  fs::create_directories(out);
  cfg.save(out / "config.effective");

  MultiTaskLossConfig lcfg = cfg.loss;
  if (cfg.strategy == Strategy::SingleTaskSeg) lcfg.w_cls = 0.0;
  if (cfg.strategy == Strategy::SingleTaskCls) lcfg.w_seg = 0.0;

  const bool semisup = cfg.strategy == Strategy::MultiTaskSemisup;
  auto split = split_labeled(ds, cfg.labeled_fraction, cfg.seed,
                             cfg.validation_fold, cfg.mask_scarce);
  if (!semisup) split.unlabeled.clear();  // supervised arms never pseudo-label
  if (cfg.strategy == Strategy::SingleTaskSeg) {
    // The seg-only baseline trains on the records whose masks are known.
    std::vector<CandidateRecord> masked;
    for (auto& r : split.pool.records)
      if (r.mask) masked.push_back(std::move(r));
    split.pool.records = std::move(masked);
  }
  auto validation = validation_records(ds, cfg.validation_fold);

  MultiTaskNet net = MultiTaskNet::build(cfg.network_config());
  AdamState adam = cfg.adam_state();
  MetricsLog log;
  std::optional<SemiSupResume> semisup_resume;
  CheckpointState st;

  if (resume) {
    if (auto prev = read_checkpoint_state(out)) {
      st = *prev;
      const fs::path ck = out / "checkpoint";
      net = MultiTaskNet::load_weights(ck / "weights.ndlw", cfg.network_config());
      adam = AdamState::load(ck / "adam.ndla");
      split.pool = read_pool_checkpoint(ds, ck / "pool.csv");
      split.unlabeled = read_remaining(ds, ck / "remaining.txt");
      log = MetricsLog::read_csv(ck / "metrics.csv");
      semisup_resume = SemiSupResume{st.epochs_done, st.rounds_merged, true};
      std::printf("train: resuming at epoch %d (round merges applied: %d)\n",
                  st.epochs_done, st.rounds_merged);
    } else {
      std::printf("train: no checkpoint under %s, starting fresh\n",
                  out.string().c_str());
    }
  }

  TrainOptions opt;
  opt.batch_size = cfg.batch_size;
  opt.validation_fold = cfg.validation_fold;
  opt.seg_threshold = cfg.seg_threshold;
  opt.nonnodule_seg_loss = cfg.nonnodule_seg_loss;
  opt.seed = cfg.seed;

  if (cfg.strategy == Strategy::SingleTaskCls && lcfg.lambda == 0.0) {
    // Weight-0 contract: the seg head must never receive gradient.
    opt.on_batch_grads = [&net]() {
      for (const auto& p : net.seg_head_parameters())
        for (double g : p->grad)
          if (g != 0.0)
            throw std::logic_error(
                "single-task-cls: segmentation head received gradient");
    };
  }

  int halted_after = 0;
  const auto checkpoint_hook = [&](int epoch, int round,
                                   const LabeledPool& pool,
                                   const std::vector<CandidateRecord>& remaining) {
    st.epochs_done = epoch;
    st.rounds_merged = round > st.rounds_merged ? round : st.rounds_merged;
    write_checkpoint(out, net, adam, pool, remaining, log, st);
    if (halt_after > 0 && ++halted_after >= halt_after)
      throw HaltRequested{halted_after};
  };

  try {
    if (semisup) {
      SemiSupHooks hooks;
      hooks.on_epoch_end = checkpoint_hook;
      hooks.on_round_merged = [&](int round, const LabeledPool& pool,
                                  const std::vector<CandidateRecord>&) {
        char name[48];
        std::snprintf(name, sizeof name, "pool_round_%d.csv", round);
        write_pool_checkpoint(pool, out / name, out / "pool_masks");
        st.rounds_merged = round;
      };
      auto result = semi_supervised_train(
          net, std::move(split.pool), std::move(split.unlabeled),
          cfg.semisup_config(), lcfg, adam, opt, validation, log, hooks,
          semisup_resume);
      std::printf(
          "train: semisup done, pool %zu (manual %zu / pseudo %zu), "
          "unlabeled left %zu\n",
          result.pool.records.size(), result.pool.manual_count(),
          result.pool.pseudo_count(), result.remaining.size());
    } else {
      opt.epochs = cfg.epochs;
      opt.start_epoch = st.epochs_done;
      opt.on_epoch_end = [&](int epoch) {
        checkpoint_hook(epoch, 0, split.pool, split.unlabeled);
      };
      train_supervised(net, split.pool, validation, lcfg, adam, opt, log);
    }
  } catch (const HaltRequested& h) {
    std::printf("train: halted after %d epoch(s); resume with --resume\n",
                h.epochs_this_run);
    return;
  }

  net.save_weights(out / "weights.ndlw");
  log.write_csv(out / "metrics.csv");
  fs::remove_all(out / "checkpoint");
  if (!log.rows.empty())
    std::printf("train: %zu epochs, final val DSC %.4f sens %.4f -> %s\n",
                log.rows.size(), log.rows.back().val_dsc,
                log.rows.back().val_sens, (out / "weights.ndlw").string().c_str());
  else
    std::printf("train: 0 epochs requested, wrote initial weights\n");
}

void cmd_pseudo_label(const RunConfig& cfg, const fs::path& out) {
  if (cfg.weights.empty())
    throw ConfigError("pseudo-label: paths.weights must point at a weights file");
  auto ds = load_dataset(cfg.data_dir);
  auto net = MultiTaskNet::load_weights(cfg.weights, cfg.network_config());
  auto split = split_labeled(ds, cfg.labeled_fraction, cfg.seed,
                             cfg.validation_fold, cfg.mask_scarce);

  std::vector<const CandidateRecord*> unlabeled;
  for (const auto& r : split.unlabeled) unlabeled.push_back(&r);
  auto res = pseudo_label(net, unlabeled, cfg.seg_threshold,
                          cfg.confidence_floor, 1);

  LabeledPool pool = std::move(split.pool);
  for (auto& r : res.accepted) pool.records.push_back(std::move(r));
  fs::create_directories(out);
  cfg.save(out / "config.effective");
  write_pool_checkpoint(pool, out / "pool.csv", out / "pool_masks");
  std::printf("pseudo-label: accepted %zu, rejected %zu, pool now %zu -> %s\n",
              pool.pseudo_count(), res.rejected_ids.size(), pool.records.size(),
              (out / "pool.csv").string().c_str());
}

void cmd_eval(const RunConfig& cfg, const fs::path& out, int fold) {
  if (cfg.weights.empty())
    throw ConfigError("eval: paths.weights must point at a weights file");
  auto ds = load_dataset(cfg.data_dir);
  auto net = MultiTaskNet::load_weights(cfg.weights, cfg.network_config());
  auto records = validation_records(ds, fold);
  auto fm = evaluate_fold(net, records, cfg.seg_threshold, cfg.batch_size);

  fs::create_directories(out);
  cfg.save(out / "config.effective");
  {
    std::ofstream os(out / "eval.csv");
    os << "fold,n_records,n_nodules,dsc,sensitivity,froc_score\n";
    char buf[160];
    std::snprintf(buf, sizeof buf, "%d,%d,%d,%.17g,%.17g,%.17g\n", fold,
                  fm.n_records, fm.n_nodules, fm.mean_dsc, fm.sens, fm.froc_avg);
    os << buf;
    if (!os) throw DataError("short write on eval.csv");
  }
  write_froc_csv(out / "froc.csv", fm.curve);
  std::printf("eval: fold %d (%d records) DSC %.4f sensitivity %.4f "
              "FROC score %.4f\n",
              fold, fm.n_records, fm.mean_dsc, fm.sens, fm.froc_avg);
}

void cmd_plot(const std::vector<std::string>& inputs, const fs::path& out) {
  std::vector<std::pair<std::string, MetricsLog>> learning;
  std::vector<std::pair<std::string, FrocCurve>> frocs;

  for (const auto& in : inputs) {
    std::ifstream is(in);
    if (!is) throw DataError("plot: cannot read " + in);
    std::string header;
    std::getline(is, header);
    const std::string label = fs::path(in).stem().string();
    if (header ==
        "epoch,round,loss_total,loss_cls,loss_seg,val_dsc,val_sens") {
      auto log = MetricsLog::read_csv(in);
      if (log.rows.empty()) throw DataError("plot: " + in + " has no rows");
      learning.emplace_back(label, std::move(log));
    } else if (header == "threshold,fp_per_scan,sensitivity") {
      auto curve = read_froc_csv(in);
      if (curve.points.empty()) throw DataError("plot: " + in + " has no rows");
      frocs.emplace_back(label, std::move(curve));
    } else {
      throw FormatError("plot: " + in + " has an unrecognized header");
    }
  }

  auto write_svg = [](const fs::path& path, const std::string& svg) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("plot: cannot write " + path.string());
    os << svg;
    if (!os) throw DataError("plot: short write on " + path.string());
    std::printf("plot: wrote %s\n", path.string().c_str());
  };

  const bool both = !learning.empty() && !frocs.empty();
  auto suffixed = [&](const char* tag) {
    fs::path p = out;
    p.replace_extension();
    return fs::path(p.string() + tag + ".svg");
  };
  if (!learning.empty())
    write_svg(both ? suffixed("_learning") : out, render_learning_svg(learning));
  if (!frocs.empty())
    write_svg(both ? suffixed("_froc") : out, render_froc_svg(frocs));
  if (learning.empty() && frocs.empty())
    throw DataError("plot: no inputs given");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3D multi-task nodule network: data, training, evaluation"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "run";
  std::optional<std::uint64_t> seed_override;

  auto add_common = [&](CLI::App* sub, bool needs_config = true) {
    if (needs_config)
      sub->add_option("--config", config_path, "run configuration file")
          ->required();
    sub->add_option("--seed", seed_override, "override the config seed");
    sub->add_option("--out", out_dir, "output directory / path");
  };

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  bool verify = false;
  gen->add_flag("--verify", verify, "re-check dataset invariants after writing");
  add_common(gen);

  auto* train = app.add_subcommand("train", "train the selected strategy");
  bool resume = false;
  int halt_after = 0;
  train->add_flag("--resume", resume, "continue from the latest checkpoint");
  train->add_option("--halt-after", halt_after,
                    "stop after N epochs this invocation (resumable)");
  add_common(train);

  auto* pseudo = app.add_subcommand("pseudo-label",
                                    "label the unlabeled split with a model");
  add_common(pseudo);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate weights on one fold");
  int fold_override = -1;
  eval_cmd->add_option("--fold", fold_override, "fold to evaluate");
  add_common(eval_cmd);

  auto* plot = app.add_subcommand("plot", "render CSV logs as SVG charts");
  std::vector<std::string> plot_inputs;
  plot->add_option("csv", plot_inputs, "metrics or FROC CSV files")->required();
  add_common(plot, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (plot->parsed()) {
      cmd_plot(plot_inputs, out_dir);
      return 0;
    }
    RunConfig cfg = RunConfig::load(config_path);
    if (seed_override) cfg.seed = *seed_override;
    cfg.validate();

    if (gen->parsed()) {
      cmd_gen_data(cfg, out_dir, verify);
    } else if (train->parsed()) {
      cmd_train(cfg, out_dir, resume, halt_after);
    } else if (pseudo->parsed()) {
      cmd_pseudo_label(cfg, out_dir);
    } else if (eval_cmd->parsed()) {
      cmd_eval(cfg, out_dir,
               fold_override >= 0 ? fold_override : cfg.validation_fold);
    }
    return 0;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 3;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
