#include "ndl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "binio.hpp"
#include "ndl/rng.hpp"

namespace ndl {

// ---------------------------------------------------------------------------
// Enum names (manifest vocabulary)
// ---------------------------------------------------------------------------

std::string to_string(ClassLabel c) {
  switch (c) {
    case ClassLabel::Nodule: return "nodule";
    case ClassLabel::NonNodule: return "non-nodule";
    case ClassLabel::Unlabeled: return "unlabeled";
  }
  return "?";
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::Manual: return "manual";
    case Provenance::Pseudo: return "pseudo";
    case Provenance::SyntheticTruth: return "synthetic-truth";
  }
  return "?";
}

ClassLabel class_from_string(const std::string& s) {
  if (s == "nodule") return ClassLabel::Nodule;
  if (s == "non-nodule") return ClassLabel::NonNodule;
  if (s == "unlabeled") return ClassLabel::Unlabeled;
  throw DataError("unknown class label '" + s + "'");
}

Provenance provenance_from_string(const std::string& s) {
  if (s == "manual") return Provenance::Manual;
  if (s == "pseudo") return Provenance::Pseudo;
  if (s == "synthetic-truth") return Provenance::SyntheticTruth;
  throw DataError("unknown provenance '" + s + "'");
}

std::string to_string(Direction d) {
  switch (d) {
    case Direction::PosZ: return "+z";
    case Direction::NegZ: return "-z";
    case Direction::PosY: return "+y";
    case Direction::NegY: return "-y";
    case Direction::PosX: return "+x";
    case Direction::NegX: return "-x";
  }
  return "?";
}

void CandidateRecord::validate() const {
  if (extent_count(patch.shape) !=
      static_cast<std::int64_t>(patch.voxels.size()))
    throw DataError(id + ": patch voxel count does not match its extents");
  if (mask) {
    if (mask->shape != patch.shape)
      throw DataError(id + ": mask shape differs from patch shape");
    if (extent_count(mask->shape) !=
        static_cast<std::int64_t>(mask->voxels.size()))
      throw DataError(id + ": mask voxel count does not match its extents");
    if (label == ClassLabel::NonNodule && mask->count() != 0)
      throw DataError(id + ": non-nodule record carries a non-empty mask");
  }
  if (label == ClassLabel::Nodule && provenance == Provenance::SyntheticTruth &&
      (!mask || mask->count() == 0))
    throw DataError(id + ": synthetic-truth nodule must have a non-empty mask");
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

namespace {

struct Vec3 {
  double z, y, x;
};

// Uniform white noise smoothed by one 3-tap box pass per axis; cheap
// correlated background texture.
std::vector<double> correlated_field(const Extents& e, Rng& rng) {
  const std::int64_t n = extent_count(e);
  std::vector<double> f(static_cast<std::size_t>(n));
  for (auto& v : f) v = rng.uniform();
  std::vector<double> tmp(f.size());
  const int ez = e[0], ey = e[1], ex = e[2];
  auto at = [&](int z, int y, int x) -> std::int64_t {
    return (static_cast<std::int64_t>(z) * ey + y) * ex + x;
  };
  for (int axis = 0; axis < 3; ++axis) {
    for (int z = 0; z < ez; ++z)
      for (int y = 0; y < ey; ++y)
        for (int x = 0; x < ex; ++x) {
          double acc = 0.0;
          int cnt = 0;
          for (int d = -1; d <= 1; ++d) {
            int zz = z + (axis == 0 ? d : 0);
            int yy = y + (axis == 1 ? d : 0);
            int xx = x + (axis == 2 ? d : 0);
            if (zz < 0 || zz >= ez || yy < 0 || yy >= ey || xx < 0 || xx >= ex)
              continue;
            acc += f[static_cast<std::size_t>(at(zz, yy, xx))];
            ++cnt;
          }
          tmp[static_cast<std::size_t>(at(z, y, x))] = acc / cnt;
        }
    f.swap(tmp);
  }
  return f;
}

Volume make_background(const Extents& e, Rng& rng) {
  Volume v;
  v.shape = e;
  const auto f = correlated_field(e, rng);
  v.voxels.resize(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double val = 0.18 + 0.8 * (f[i] - 0.5);
    v.voxels[i] = static_cast<float>(std::clamp(val, 0.0, 1.0));
  }
  return v;
}

// Integer jitter of the blob/tube center, at most extent/8 per axis.
Vec3 jittered_center(const Extents& e, Rng& rng) {
  Vec3 c;
  double* out[3] = {&c.z, &c.y, &c.x};
  for (int a = 0; a < 3; ++a) {
    const int j = e[static_cast<std::size_t>(a)] / 8;
    *out[a] = e[static_cast<std::size_t>(a)] / 2.0 + rng.uniform_int(-j, j);
  }
  return c;
}

void add_ellipsoid(Volume& vol, Mask& mask, const Extents& e, Rng& rng) {
  const Vec3 c = jittered_center(e, rng);
  double radii[3];
  const double centers[3] = {c.z, c.y, c.x};
  for (int a = 0; a < 3; ++a) {
    const double ext = e[static_cast<std::size_t>(a)];
    // Largest radius that keeps the support strictly inside the patch.
    const double slack = std::min(centers[a], ext - 1.0 - centers[a]);
    const double hi = std::max(2.0, std::min(6.0, slack));
    radii[a] = rng.uniform(2.0, hi);
  }
  const double amp = rng.uniform(0.75, 0.95);
  const double edge = 0.45;

  const int z0 = static_cast<int>(std::floor(c.z - radii[0]));
  const int z1 = static_cast<int>(std::ceil(c.z + radii[0]));
  const int y0 = static_cast<int>(std::floor(c.y - radii[1]));
  const int y1 = static_cast<int>(std::ceil(c.y + radii[1]));
  const int x0 = static_cast<int>(std::floor(c.x - radii[2]));
  const int x1 = static_cast<int>(std::ceil(c.x + radii[2]));
  for (int z = std::max(0, z0); z <= std::min(e[0] - 1, z1); ++z)
    for (int y = std::max(0, y0); y <= std::min(e[1] - 1, y1); ++y)
      for (int x = std::max(0, x0); x <= std::min(e[2] - 1, x1); ++x) {
        const double dz = (z - c.z) / radii[0];
        const double dy = (y - c.y) / radii[1];
        const double dx = (x - c.x) / radii[2];
        const double d2 = dz * dz + dy * dy + dx * dx;
        if (d2 > 1.0) continue;
        const auto idx = static_cast<std::size_t>(
            (static_cast<std::int64_t>(z) * e[1] + y) * e[2] + x);
        mask.voxels[idx] = 1;
        const double v = vol.voxels[idx] + edge + (amp - edge) * (1.0 - d2);
        vol.voxels[idx] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
}

// Bright cylinder through the patch, mostly in-plane, mimicking a vessel.
void add_tube(Volume& vol, const Extents& e, Rng& rng) {
  const Vec3 p0 = jittered_center(e, rng);
  Vec3 u{rng.uniform(-0.3, 0.3), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
  double norm = std::sqrt(u.z * u.z + u.y * u.y + u.x * u.x);
  if (norm < 0.2) {
    u = {0.0, 1.0, 0.0};
    norm = 1.0;
  }
  u.z /= norm;
  u.y /= norm;
  u.x /= norm;
  // Same intensity distribution as nodules: brightness alone cannot separate.
  const double rt = rng.uniform(1.2, 2.2);
  const double amp = rng.uniform(0.75, 0.95);
  const double edge = 0.45;

  for (int z = 0; z < e[0]; ++z)
    for (int y = 0; y < e[1]; ++y)
      for (int x = 0; x < e[2]; ++x) {
        const double wz = z - p0.z, wy = y - p0.y, wx = x - p0.x;
        const double proj = wz * u.z + wy * u.y + wx * u.x;
        const double dz = wz - proj * u.z;
        const double dy = wy - proj * u.y;
        const double dx = wx - proj * u.x;
        const double d2 = (dz * dz + dy * dy + dx * dx) / (rt * rt);
        if (d2 > 1.0) continue;
        const auto idx = static_cast<std::size_t>(
            (static_cast<std::int64_t>(z) * e[1] + y) * e[2] + x);
        const double v = vol.voxels[idx] + edge + (amp - edge) * (1.0 - d2);
        vol.voxels[idx] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
}

std::string scan_name(int s) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "scan%03d", s);
  return buf;
}

}  // namespace

Dataset generate_synthetic(const GenConfig& cfg) {
  if (cfg.n_scans < 1 || cfg.nodules_per_scan < 1 || cfg.nonnodules_per_scan < 1)
    throw ConfigError("generator: scan and per-scan counts must be >= 1");
  for (int ext : cfg.patch_shape)
    if (ext < 8)
      throw ConfigError(
          "generator: patch extents must be >= 8 to fit the 2-6 voxel radii "
          "range with center jitter");

  Dataset ds;
  ds.patch_shape = cfg.patch_shape;
  for (int s = 0; s < cfg.n_scans; ++s) {
    // Independent substream per scan: generation order and thread layout
    // cannot change the content.
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(s)));
    const std::string scan = scan_name(s);
    for (int i = 0; i < cfg.nodules_per_scan; ++i) {
      CandidateRecord rec;
      char buf[16];
      std::snprintf(buf, sizeof buf, "-n%02d", i);
      rec.id = scan + buf;
      rec.scan_id = scan;
      rec.label = ClassLabel::Nodule;
      rec.provenance = Provenance::SyntheticTruth;
      rec.patch = make_background(cfg.patch_shape, rng);
      Mask m;
      m.shape = cfg.patch_shape;
      m.voxels.assign(rec.patch.voxels.size(), 0);
      // Half the nodule patches also carry a vessel the mask excludes, so
      // segmentation has to use shape, not brightness.
      if (rng.uniform() < 0.5) add_tube(rec.patch, cfg.patch_shape, rng);
      add_ellipsoid(rec.patch, m, cfg.patch_shape, rng);
      rec.mask = std::move(m);
      ds.records.push_back(std::move(rec));
    }
    for (int i = 0; i < cfg.nonnodules_per_scan; ++i) {
      CandidateRecord rec;
      char buf[16];
      std::snprintf(buf, sizeof buf, "-c%02d", i);
      rec.id = scan + buf;
      rec.scan_id = scan;
      rec.label = ClassLabel::NonNodule;
      rec.provenance = Provenance::SyntheticTruth;
      rec.patch = make_background(cfg.patch_shape, rng);
      if (rng.uniform() < 0.6) add_tube(rec.patch, cfg.patch_shape, rng);
      Mask m;
      m.shape = cfg.patch_shape;
      m.voxels.assign(rec.patch.voxels.size(), 0);
      rec.mask = std::move(m);
      ds.records.push_back(std::move(rec));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

CandidateRecord augment_shift(const CandidateRecord& rec, Direction dir,
                              int magnitude) {
  if (magnitude < 0) throw ConfigError("augment_shift: negative magnitude");
  int off[3] = {0, 0, 0};
  switch (dir) {
    case Direction::PosZ: off[0] = magnitude; break;
    case Direction::NegZ: off[0] = -magnitude; break;
    case Direction::PosY: off[1] = magnitude; break;
    case Direction::NegY: off[1] = -magnitude; break;
    case Direction::PosX: off[2] = magnitude; break;
    case Direction::NegX: off[2] = -magnitude; break;
  }
  const Extents& e = rec.patch.shape;
  for (int a = 0; a < 3; ++a)
    if (std::abs(off[a]) >= e[static_cast<std::size_t>(a)])
      throw ConfigError("augment_shift: magnitude " + std::to_string(magnitude) +
                        " out of range for extent " +
                        std::to_string(e[static_cast<std::size_t>(a)]));

  CandidateRecord out = rec;
  out.id = rec.id + "_s" + to_string(dir) + std::to_string(magnitude);
  out.parent_id = rec.id;

  auto shift_into = [&](auto& dst, const auto& src) {
    using T = std::remove_reference_t<decltype(dst[0])>;
    std::fill(dst.begin(), dst.end(), T{});
    for (int z = 0; z < e[0]; ++z) {
      const int sz = z - off[0];
      if (sz < 0 || sz >= e[0]) continue;
      for (int y = 0; y < e[1]; ++y) {
        const int sy = y - off[1];
        if (sy < 0 || sy >= e[1]) continue;
        for (int x = 0; x < e[2]; ++x) {
          const int sx = x - off[2];
          if (sx < 0 || sx >= e[2]) continue;
          dst[static_cast<std::size_t>(
              (static_cast<std::int64_t>(z) * e[1] + y) * e[2] + x)] =
              src[static_cast<std::size_t>(
                  (static_cast<std::int64_t>(sz) * e[1] + sy) * e[2] + sx)];
        }
      }
    }
  };
  shift_into(out.patch.voxels, rec.patch.voxels);
  if (rec.mask) shift_into(out.mask->voxels, rec.mask->voxels);
  return out;
}

void balance_by_augmentation(Dataset& ds) {
  std::vector<CandidateRecord> variants;
  for (const auto& rec : ds.records) {
    if (rec.label != ClassLabel::Nodule || !rec.parent_id.empty()) continue;
    for (Direction d : kAllDirections) variants.push_back(augment_shift(rec, d, 1));
  }
  for (auto& v : variants) ds.records.push_back(std::move(v));
}

// ---------------------------------------------------------------------------
// Folds
// ---------------------------------------------------------------------------

int FoldSplit::fold_of(const std::string& scan_id) const {
  auto it = fold_of_scan.find(scan_id);
  if (it == fold_of_scan.end())
    throw DataError("no fold assignment for scan '" + scan_id + "'");
  return it->second;
}

FoldSplit kfold_split(Dataset& ds, int k, std::uint64_t seed) {
  if (k < 1) throw ConfigError("kfold_split: k must be >= 1");
  std::vector<std::string> scans;
  std::unordered_set<std::string> seen;
  for (const auto& r : ds.records)
    if (seen.insert(r.scan_id).second) scans.push_back(r.scan_id);
  if (static_cast<int>(scans.size()) < k)
    throw ConfigError("kfold_split: fewer scans (" +
                      std::to_string(scans.size()) + ") than folds (" +
                      std::to_string(k) + ")");

  Rng rng(mix_seed(seed, 0xF01Dull));
  rng.shuffle(scans);
  FoldSplit split;
  split.k = k;
  for (std::size_t i = 0; i < scans.size(); ++i)
    split.fold_of_scan[scans[i]] =
        static_cast<int>(i % static_cast<std::size_t>(k));
  for (auto& r : ds.records) r.fold = split.fold_of(r.scan_id);
  return split;
}

// ---------------------------------------------------------------------------
// NDLV container
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint32_t kVolumeVersion = 1;
constexpr std::uint32_t kDtypeF32 = 1;
constexpr std::uint32_t kDtypeU8 = 2;

void write_ndlv_header(binio::Writer& w, std::uint32_t dtype, const Extents& e) {
  w.raw("NDLV", 4);
  w.u32(kVolumeVersion);
  w.u32(dtype);
  w.u32(static_cast<std::uint32_t>(e[0]));
  w.u32(static_cast<std::uint32_t>(e[1]));
  w.u32(static_cast<std::uint32_t>(e[2]));
}

Extents read_ndlv_header(binio::Reader& r, std::uint32_t want_dtype) {
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, "NDLV", 4) != 0)
    throw FormatError(r.path() + " is not a volume file (bad magic)");
  if (r.u32() != kVolumeVersion)
    throw FormatError(r.path() + ": unsupported volume format version");
  const std::uint32_t dtype = r.u32();
  if (dtype != want_dtype)
    throw FormatError(r.path() + ": unexpected dtype code " +
                      std::to_string(dtype));
  Extents e;
  for (auto& d : e) {
    d = static_cast<int>(r.u32());
    if (d <= 0) throw FormatError(r.path() + ": non-positive extent");
  }
  return e;
}

}  // namespace

void write_volume(const std::filesystem::path& path, const Volume& v) {
  binio::Writer w(path);
  write_ndlv_header(w, kDtypeF32, v.shape);
  for (float f : v.voxels) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    w.u32(bits);
  }
  w.close();
}

Volume read_volume(const std::filesystem::path& path) {
  binio::Reader r(path);
  Volume v;
  v.shape = read_ndlv_header(r, kDtypeF32);
  v.voxels.resize(static_cast<std::size_t>(extent_count(v.shape)));
  for (auto& f : v.voxels) {
    const std::uint32_t bits = r.u32();
    std::memcpy(&f, &bits, 4);
  }
  return v;
}

void write_mask(const std::filesystem::path& path, const Mask& m) {
  binio::Writer w(path);
  write_ndlv_header(w, kDtypeU8, m.shape);
  if (!m.voxels.empty()) w.raw(m.voxels.data(), m.voxels.size());
  w.close();
}

Mask read_mask(const std::filesystem::path& path) {
  binio::Reader r(path);
  Mask m;
  m.shape = read_ndlv_header(r, kDtypeU8);
  m.voxels.resize(static_cast<std::size_t>(extent_count(m.shape)));
  r.raw(m.voxels.data(), m.voxels.size());
  return m;
}

// ---------------------------------------------------------------------------
// Dataset directory
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

// Variant ids look like "<parent>_s<+|-><z|y|x><digits>".
std::string derive_parent_id(const std::string& id) {
  const auto pos = id.rfind("_s");
  if (pos == std::string::npos || pos + 5 > id.size()) return {};
  const char sign = id[pos + 2];
  const char axis = id[pos + 3];
  if ((sign != '+' && sign != '-') || (axis != 'z' && axis != 'y' && axis != 'x'))
    return {};
  for (std::size_t i = pos + 4; i < id.size(); ++i)
    if (!std::isdigit(static_cast<unsigned char>(id[i]))) return {};
  return id.substr(0, pos);
}

constexpr const char* kManifestHeader =
    "id,scan_id,class,provenance,patch_path,mask_path,fold";

}  // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "volumes");
  fs::create_directories(dir / "masks");
  std::ofstream manifest(dir / "manifest.csv");
  if (!manifest) throw DataError("cannot write manifest in " + dir.string());
  manifest << kManifestHeader << "\n";
  for (const auto& r : ds.records) {
    const std::string patch_rel = "volumes/" + r.id + ".vol";
    std::string mask_rel;
    write_volume(dir / patch_rel, r.patch);
    if (r.mask) {
      mask_rel = "masks/" + r.id + ".msk";
      write_mask(dir / mask_rel, *r.mask);
    }
    manifest << r.id << ',' << r.scan_id << ',' << to_string(r.label) << ','
             << to_string(r.provenance) << ',' << patch_rel << ',' << mask_rel
             << ',' << r.fold << "\n";
  }
  if (!manifest) throw DataError("short write on manifest in " + dir.string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) throw DataError("cannot read manifest in " + dir.string());
  std::string line;
  if (!std::getline(manifest, line) || line != kManifestHeader)
    throw FormatError(dir.string() + "/manifest.csv: unexpected header");

  Dataset ds;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const auto cols = split_csv(line);
    if (cols.size() != 7)
      throw FormatError(dir.string() +
                        "/manifest.csv: expected 7 columns, got " +
                        std::to_string(cols.size()));
    CandidateRecord r;
    r.id = cols[0];
    r.scan_id = cols[1];
    r.label = class_from_string(cols[2]);
    r.provenance = provenance_from_string(cols[3]);
    r.patch = read_volume(dir / cols[4]);
    if (!cols[5].empty()) r.mask = read_mask(dir / cols[5]);
    r.fold = std::stoi(cols[6]);
    r.parent_id = derive_parent_id(r.id);
    if (ds.records.empty()) ds.patch_shape = r.patch.shape;
    ds.records.push_back(std::move(r));
  }
  if (ds.records.empty())
    throw DataError(dir.string() + ": dataset manifest has no records");
  return ds;
}

// ---------------------------------------------------------------------------
// Invariant sweep
// ---------------------------------------------------------------------------

void verify_dataset(const Dataset& ds) {
  std::unordered_set<std::string> ids;
  std::unordered_map<std::string, int> scan_fold;
  std::unordered_map<std::string, const CandidateRecord*> by_id;

  for (const auto& r : ds.records) {
    if (!ids.insert(r.id).second)
      throw DataError("duplicate record id '" + r.id + "'");
    by_id[r.id] = &r;
  }
  for (const auto& r : ds.records) {
    r.validate();
    if (r.patch.shape != ds.patch_shape)
      throw DataError(r.id + ": patch shape differs from the dataset shape");
    for (float v : r.patch.voxels)
      if (!(v >= 0.0f && v <= 1.0f))
        throw DataError(r.id + ": patch intensity outside [0,1]");
    auto [it, fresh] = scan_fold.emplace(r.scan_id, r.fold);
    if (!fresh && it->second != r.fold)
      throw DataError("scan '" + r.scan_id + "' straddles folds " +
                      std::to_string(it->second) + " and " +
                      std::to_string(r.fold));
    if (!r.parent_id.empty()) {
      auto parent = by_id.find(r.parent_id);
      if (parent == by_id.end())
        throw DataError(r.id + ": parent record '" + r.parent_id + "' missing");
      if (parent->second->fold != r.fold)
        throw DataError(r.id + ": fold differs from its parent (leakage)");
      if (parent->second->scan_id != r.scan_id)
        throw DataError(r.id + ": scan differs from its parent");
      if (parent->second->label != r.label)
        throw DataError(r.id + ": class label differs from its parent");
    }
  }
}

}  // namespace ndl
