#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ndl/errors.hpp"

namespace ndl {

// z,y,x extents of a patch or mask.
using Extents = std::array<int, 3>;

inline std::int64_t extent_count(const Extents& e) {
  return static_cast<std::int64_t>(e[0]) * e[1] * e[2];
}

// Voxel intensities in [0,1], row-major z,y,x. Stored as f32 on disk and in
// memory; training promotes to double at batch assembly.
struct Volume {
  Extents shape{0, 0, 0};
  std::vector<float> voxels;
};

// Binary voxel labels, same layout as Volume.
struct Mask {
  Extents shape{0, 0, 0};
  std::vector<std::uint8_t> voxels;

  std::int64_t count() const {
    std::int64_t n = 0;
    for (auto v : voxels) n += (v != 0);
    return n;
  }
};

enum class ClassLabel { Nodule, NonNodule, Unlabeled };
enum class Provenance { Manual, Pseudo, SyntheticTruth };

std::string to_string(ClassLabel c);
std::string to_string(Provenance p);
ClassLabel class_from_string(const std::string& s);
Provenance provenance_from_string(const std::string& s);

// One candidate location: a patch, its class, and (when known) its voxel
// mask. scan_id groups candidates into synthetic "scans" for per-scan FP
// accounting. Augmented variants carry their parent id (also recoverable
// from the "_s" id suffix).
struct CandidateRecord {
  std::string id;
  std::string scan_id;
  ClassLabel label = ClassLabel::Unlabeled;
  Provenance provenance = Provenance::SyntheticTruth;
  Volume patch;
  std::optional<Mask> mask;
  int fold = -1;
  int pseudo_round = -1;  // self-training round that produced a pseudo label
  std::string parent_id;  // empty for originals

  void validate() const;  // throws DataError naming the violated invariant
};

struct Dataset {
  Extents patch_shape{0, 0, 0};
  std::vector<CandidateRecord> records;
};

// ---------------------------------------------------------------------------
// Synthetic generation & augmentation
// ---------------------------------------------------------------------------

struct GenConfig {
  std::uint64_t seed = 1;
  int n_scans = 40;
  int nodules_per_scan = 10;
  int nonnodules_per_scan = 10;
  Extents patch_shape{8, 32, 32};
};

// Nodules are soft ellipsoidal bright blobs over correlated noise, with the
// exact blob support as ground-truth mask. Non-nodules are vessel-like bright
// tubes or noise-only patches with all-zero masks. Deterministic per seed,
// with an independent substream per scan.
Dataset generate_synthetic(const GenConfig& cfg);

enum class Direction { PosZ, NegZ, PosY, NegY, PosX, NegX };

constexpr std::array<Direction, 6> kAllDirections = {
    Direction::PosZ, Direction::NegZ, Direction::PosY,
    Direction::NegY, Direction::PosX, Direction::NegX};

std::string to_string(Direction d);

// Translates patch and mask together; vacated voxels are zero-filled.
CandidateRecord augment_shift(const CandidateRecord& rec, Direction dir,
                              int magnitude);

// Adds the 6 unit-shift variants of every original nodule record (x7 total).
void balance_by_augmentation(Dataset& ds);

// ---------------------------------------------------------------------------
// Fold assignment
// ---------------------------------------------------------------------------

struct FoldSplit {
  int k = 10;
  std::unordered_map<std::string, int> fold_of_scan;

  int fold_of(const std::string& scan_id) const;
};

// Shuffles scans with a seeded RNG and deals them round-robin; every record
// of a scan (and therefore every augmented variant) shares its scan's fold.
// Stamps record.fold on the way through.
FoldSplit kfold_split(Dataset& ds, int k, std::uint64_t seed);

// ---------------------------------------------------------------------------
// On-disk formats
// ---------------------------------------------------------------------------

// NDLV volume container (f32 voxels); masks use the same container with the
// u8 dtype code.
void write_volume(const std::filesystem::path& path, const Volume& v);
Volume read_volume(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const Mask& m);
Mask read_mask(const std::filesystem::path& path);

// Directory layout: manifest.csv + volumes/<id>.vol + masks/<id>.msk.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// Full invariant sweep (record invariants, scan/fold integrity, augmentation
// leakage freedom, id uniqueness). Throws DataError naming the first
// violation.
void verify_dataset(const Dataset& ds);

}  // namespace ndl
