#include "ndl/runconfig.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <unordered_map>

namespace ndl {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::SingleTaskSeg: return "single-task-seg";
    case Strategy::SingleTaskCls: return "single-task-cls";
    case Strategy::MultiTaskManual: return "multi-task-manual";
    case Strategy::MultiTaskSemisup: return "multi-task-semisup";
  }
  return "?";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "single-task-seg") return Strategy::SingleTaskSeg;
  if (s == "single-task-cls") return Strategy::SingleTaskCls;
  if (s == "multi-task-manual") return Strategy::MultiTaskManual;
  if (s == "multi-task-semisup") return Strategy::MultiTaskSemisup;
  throw ConfigError("unknown strategy '" + s +
                    "' (single-task-seg | single-task-cls | multi-task-manual "
                    "| multi-task-semisup)");
}

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_int_list(const std::vector<int>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

long long parse_int(const std::string& v, const std::string& where) {
  std::size_t pos = 0;
  long long out;
  try {
    out = std::stoll(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError(where + ": '" + v + "' is not an integer");
  }
  if (pos != v.size())
    throw ConfigError(where + ": '" + v + "' is not an integer");
  return out;
}

double parse_double(const std::string& v, const std::string& where) {
  std::size_t pos = 0;
  double out;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError(where + ": '" + v + "' is not a number");
  }
  if (pos != v.size())
    throw ConfigError(where + ": '" + v + "' is not a number");
  return out;
}

bool parse_bool(const std::string& v, const std::string& where) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(where + ": '" + v + "' is not true/false");
}

std::vector<int> parse_int_list(const std::string& v, const std::string& where) {
  std::vector<int> out;
  if (trim(v).empty()) return out;
  std::string cur;
  std::istringstream is(v);
  while (std::getline(is, cur, ','))
    out.push_back(static_cast<int>(parse_int(trim(cur), where)));
  return out;
}

}  // namespace

std::string RunConfig::serialize() const {
  std::ostringstream os;
  os << "[run]\n";
  os << "strategy = " << to_string(strategy) << "\n";
  os << "seed = " << seed << "\n";
  os << "\n[paths]\n";
  os << "data_dir = " << data_dir << "\n";
  os << "weights = " << weights << "\n";
  os << "\n[data]\n";
  os << "n_scans = " << n_scans << "\n";
  os << "nodules_per_scan = " << nodules_per_scan << "\n";
  os << "nonnodules_per_scan = " << nonnodules_per_scan << "\n";
  os << "patch_z = " << patch_shape[0] << "\n";
  os << "patch_y = " << patch_shape[1] << "\n";
  os << "patch_x = " << patch_shape[2] << "\n";
  os << "augment = " << (augment ? "true" : "false") << "\n";
  os << "k_folds = " << k_folds << "\n";
  os << "\n[network]\n";
  os << "channels = " << fmt_int_list(channels) << "\n";
  os << "pools = " << fmt_int_list(pools) << "\n";
  os << "upsamples = " << fmt_int_list(upsamples) << "\n";
  os << "fc_hidden = " << fc_hidden << "\n";
  os << "cls_head_channels = " << cls_head_channels << "\n";
  os << "skips = " << (skips ? "true" : "false") << "\n";
  os << "\n[loss]\n";
  os << "w_cls = " << fmt_double(loss.w_cls) << "\n";
  os << "w_seg = " << fmt_double(loss.w_seg) << "\n";
  os << "lambda = " << fmt_double(loss.lambda) << "\n";
  os << "clamp_eps = " << fmt_double(loss.clamp_eps) << "\n";
  os << "nonnodule_seg_loss = " << (nonnodule_seg_loss ? "true" : "false") << "\n";
  os << "\n[optim]\n";
  os << "lr = " << fmt_double(lr) << "\n";
  os << "beta1 = " << fmt_double(beta1) << "\n";
  os << "beta2 = " << fmt_double(beta2) << "\n";
  os << "adam_eps = " << fmt_double(adam_eps) << "\n";
  os << "\n[train]\n";
  os << "epochs = " << epochs << "\n";
  os << "batch_size = " << batch_size << "\n";
  os << "validation_fold = " << validation_fold << "\n";
  os << "seg_threshold = " << fmt_double(seg_threshold) << "\n";
  os << "labeled_fraction = " << fmt_double(labeled_fraction) << "\n";
  os << "mask_scarce = " << (mask_scarce ? "true" : "false") << "\n";
  os << "\n[semisup]\n";
  os << "chunk_fraction = " << fmt_double(chunk_fraction) << "\n";
  os << "rounds = " << rounds << "\n";
  os << "epochs_initial = " << epochs_initial << "\n";
  os << "epochs_per_round = " << epochs_per_round << "\n";
  os << "confidence_floor = " << fmt_double(confidence_floor) << "\n";
  return os.str();
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  RunConfig cfg;

  using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;
  static const std::unordered_map<std::string, Setter> setters = {
      {"run.strategy", [](RunConfig& c, const std::string& v, const std::string&) {
         c.strategy = strategy_from_string(v);
       }},
      {"run.seed", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.seed = static_cast<std::uint64_t>(parse_int(v, w));
       }},
      {"paths.data_dir", [](RunConfig& c, const std::string& v, const std::string&) {
         c.data_dir = v;
       }},
      {"paths.weights", [](RunConfig& c, const std::string& v, const std::string&) {
         c.weights = v;
       }},
      {"data.n_scans", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.n_scans = static_cast<int>(parse_int(v, w));
       }},
      {"data.nodules_per_scan", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.nodules_per_scan = static_cast<int>(parse_int(v, w));
       }},
      {"data.nonnodules_per_scan", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.nonnodules_per_scan = static_cast<int>(parse_int(v, w));
       }},
      {"data.patch_z", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.patch_shape[0] = static_cast<int>(parse_int(v, w));
       }},
      {"data.patch_y", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.patch_shape[1] = static_cast<int>(parse_int(v, w));
       }},
      {"data.patch_x", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.patch_shape[2] = static_cast<int>(parse_int(v, w));
       }},
      {"data.augment", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.augment = parse_bool(v, w);
       }},
      {"data.k_folds", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.k_folds = static_cast<int>(parse_int(v, w));
       }},
      {"network.channels", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.channels = parse_int_list(v, w);
       }},
      {"network.pools", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.pools = parse_int_list(v, w);
       }},
      {"network.upsamples", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.upsamples = parse_int_list(v, w);
       }},
      {"network.fc_hidden", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.fc_hidden = static_cast<int>(parse_int(v, w));
       }},
      {"network.cls_head_channels", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.cls_head_channels = static_cast<int>(parse_int(v, w));
       }},
      {"network.skips", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.skips = parse_bool(v, w);
       }},
      {"loss.w_cls", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.loss.w_cls = parse_double(v, w);
       }},
      {"loss.w_seg", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.loss.w_seg = parse_double(v, w);
       }},
      {"loss.lambda", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.loss.lambda = parse_double(v, w);
       }},
      {"loss.clamp_eps", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.loss.clamp_eps = parse_double(v, w);
       }},
      {"loss.nonnodule_seg_loss", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.nonnodule_seg_loss = parse_bool(v, w);
       }},
      {"optim.lr", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.lr = parse_double(v, w);
       }},
      {"optim.beta1", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.beta1 = parse_double(v, w);
       }},
      {"optim.beta2", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.beta2 = parse_double(v, w);
       }},
      {"optim.adam_eps", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.adam_eps = parse_double(v, w);
       }},
      {"train.epochs", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.epochs = static_cast<int>(parse_int(v, w));
       }},
      {"train.batch_size", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.batch_size = static_cast<int>(parse_int(v, w));
       }},
      {"train.validation_fold", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.validation_fold = static_cast<int>(parse_int(v, w));
       }},
      {"train.seg_threshold", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.seg_threshold = parse_double(v, w);
       }},
      {"train.labeled_fraction", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.labeled_fraction = parse_double(v, w);
       }},
      {"train.mask_scarce", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.mask_scarce = parse_bool(v, w);
       }},
      {"semisup.chunk_fraction", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.chunk_fraction = parse_double(v, w);
       }},
      {"semisup.rounds", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.rounds = static_cast<int>(parse_int(v, w));
       }},
      {"semisup.epochs_initial", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.epochs_initial = static_cast<int>(parse_int(v, w));
       }},
      {"semisup.epochs_per_round", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.epochs_per_round = static_cast<int>(parse_int(v, w));
       }},
      {"semisup.confidence_floor", [](RunConfig& c, const std::string& v, const std::string& w) {
         c.confidence_floor = parse_double(v, w);
       }},
  };

  std::istringstream is(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError(where + ": malformed section header '" + t + "'");
      section = t.substr(1, t.size() - 2);
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(where + ": expected 'key = value', got '" + t + "'");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (section.empty())
      throw ConfigError(where + ": key '" + key + "' outside any section");
    const std::string full = section + "." + key;
    auto it = setters.find(full);
    if (it == setters.end())
      throw ConfigError(where + ": unknown key '" + full + "'");
    it->second(cfg, value, where);
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse(buf.str(), path.string());
}

void RunConfig::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write config to " + path.string());
  os << serialize();
  if (!os) throw DataError("short write on " + path.string());
}

void RunConfig::validate() const {
  loss.validate();
  network_config().validate();
  semisup_config().validate();
  if (n_scans < 1 || nodules_per_scan < 1 || nonnodules_per_scan < 1)
    throw ConfigError("config: data counts must be >= 1");
  if (k_folds < 1) throw ConfigError("config: k_folds must be >= 1");
  if (validation_fold < 0 || validation_fold >= k_folds)
    throw ConfigError("config: validation_fold must lie in [0, k_folds)");
  if (epochs < 0) throw ConfigError("config: epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
  if (!(seg_threshold > 0.0 && seg_threshold < 1.0))
    throw ConfigError("config: seg_threshold must lie in (0,1)");
  if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0))
    throw ConfigError("config: labeled_fraction must lie in (0,1]");
  if (lr <= 0.0 || adam_eps <= 0.0)
    throw ConfigError("config: lr and adam_eps must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("config: betas must lie in [0,1)");
}

GenConfig RunConfig::gen_config() const {
  GenConfig g;
  g.seed = seed;
  g.n_scans = n_scans;
  g.nodules_per_scan = nodules_per_scan;
  g.nonnodules_per_scan = nonnodules_per_scan;
  g.patch_shape = patch_shape;
  return g;
}

NetworkConfig RunConfig::network_config() const {
  NetworkConfig n;
  n.input_shape = patch_shape;
  n.channels_per_stage = channels;
  n.pool_positions = pools;
  n.upsample_positions = upsamples;
  n.fc_hidden = fc_hidden;
  n.cls_head_channels = cls_head_channels;
  n.skip_connections = skips;
  n.seed = seed;
  return n;
}

SemiSupConfig RunConfig::semisup_config() const {
  SemiSupConfig s;
  s.chunk_fraction = chunk_fraction;
  s.rounds = rounds;
  s.epochs_initial = epochs_initial;
  s.epochs_per_round = epochs_per_round;
  s.confidence_floor = confidence_floor;
  s.seed = seed;
  return s;
}

AdamState RunConfig::adam_state() const {
  AdamState a;
  a.lr = lr;
  a.beta1 = beta1;
  a.beta2 = beta2;
  a.eps = adam_eps;
  return a;
}

}  // namespace ndl
