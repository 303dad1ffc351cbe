#include "lstsd/config.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace fs = std::filesystem;

namespace lstsd {

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("short write to " + tmp);
  }
  fs::rename(tmp, path);
}

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& v, const std::string& key) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = v.find(',', start);
    const std::string item =
        trim(comma == std::string::npos ? v.substr(start) : v.substr(start, comma - start));
    if (item.empty())
      throw std::invalid_argument("empty item in list for key '" + key + "'");
    out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

[[noreturn]] void bad_value(const std::string& v, const std::string& key, const char* want) {
  throw std::invalid_argument("invalid " + std::string(want) + " '" + v + "' for key '" +
                              key + "'");
}

std::uint64_t parse_u64(const std::string& v, const std::string& key) {
  if (v.empty() || v[0] == '-') bad_value(v, key, "unsigned integer");
  std::size_t pos = 0;
  unsigned long long r = 0;
  try {
    r = std::stoull(v, &pos);
  } catch (...) {
    bad_value(v, key, "unsigned integer");
  }
  if (pos != v.size()) bad_value(v, key, "unsigned integer");
  return r;
}

int parse_int(const std::string& v, const std::string& key) {
  std::size_t pos = 0;
  int r = 0;
  try {
    r = std::stoi(v, &pos);
  } catch (...) {
    bad_value(v, key, "integer");
  }
  if (pos != v.size()) bad_value(v, key, "integer");
  return r;
}

double parse_double(const std::string& v, const std::string& key) {
  std::size_t pos = 0;
  double r = 0.0;
  try {
    r = std::stod(v, &pos);
  } catch (...) {
    bad_value(v, key, "number");
  }
  if (pos != v.size()) bad_value(v, key, "number");
  return r;
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true") return true;
  if (v == "false") return false;
  bad_value(v, key, "bool (true/false)");
}

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

struct RawEntry {
  int line = 0;
  std::string value;
};

// Pulls typed values out of the raw key map and remembers what was consumed,
// so anything left over is reported as an unknown key with its line number.
class Reader {
 public:
  explicit Reader(std::map<std::string, RawEntry> kv) : kv_(std::move(kv)) {}

  std::optional<std::string> take(const std::string& key) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return std::nullopt;
    used_.insert(key);
    return it->second.value;
  }

  std::string required(const std::string& key) {
    auto v = take(key);
    if (!v) throw std::invalid_argument("missing required key '" + key + "'");
    return *v;
  }

  bool take_into(const std::string& key, double& dst) {
    if (auto v = take(key)) {
      dst = parse_double(*v, key);
      return true;
    }
    return false;
  }
  bool take_into(const std::string& key, int& dst) {
    if (auto v = take(key)) {
      dst = parse_int(*v, key);
      return true;
    }
    return false;
  }
  bool take_into(const std::string& key, std::uint64_t& dst) {
    if (auto v = take(key)) {
      dst = parse_u64(*v, key);
      return true;
    }
    return false;
  }
  bool take_into(const std::string& key, bool& dst) {
    if (auto v = take(key)) {
      dst = parse_bool(*v, key);
      return true;
    }
    return false;
  }
  bool take_into(const std::string& key, std::string& dst) {
    if (auto v = take(key)) {
      dst = *v;
      return true;
    }
    return false;
  }

  void finish() const {
    int line = 0;
    std::string offender;
    for (const auto& [key, entry] : kv_) {
      if (used_.count(key)) continue;
      if (offender.empty() || entry.line < line) {
        offender = key;
        line = entry.line;
      }
    }
    if (!offender.empty())
      throw std::invalid_argument("unknown config key '" + offender + "' (line " +
                                  std::to_string(line) + ")");
  }

 private:
  std::map<std::string, RawEntry> kv_;
  std::set<std::string> used_;
};

std::map<std::string, RawEntry> read_raw(const std::string& text) {
  std::map<std::string, RawEntry> kv;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    const std::size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  " is not 'key = value': '" + s + "'");
    const std::string key = trim(s.substr(0, eq));
    const std::string value = trim(s.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config line " + std::to_string(line_no) + " has no key");
    if (value.empty())
      throw std::invalid_argument("empty value for key '" + key + "' (line " +
                                  std::to_string(line_no) + ")");
    auto [it, inserted] = kv.emplace(key, RawEntry{line_no, value});
    if (!inserted)
      throw std::invalid_argument("duplicate key '" + key + "' (lines " +
                                  std::to_string(it->second.line) + " and " +
                                  std::to_string(line_no) + ")");
  }
  return kv;
}

const char* schedule_kind_name(LrSchedule::Kind k) {
  switch (k) {
    case LrSchedule::Kind::constant: return "constant";
    case LrSchedule::Kind::step_decay: return "step_decay";
    case LrSchedule::Kind::cyclic_cosine: return "cyclic_cosine";
  }
  throw std::logic_error("schedule_kind_name: unhandled kind");
}

LrSchedule::Kind schedule_kind_from(const std::string& v) {
  if (v == "constant") return LrSchedule::Kind::constant;
  if (v == "step_decay") return LrSchedule::Kind::step_decay;
  if (v == "cyclic_cosine") return LrSchedule::Kind::cyclic_cosine;
  throw std::invalid_argument("unknown schedule.kind '" + v +
                              "'; known: constant, step_decay, cyclic_cosine");
}

LabeledDataset concat_datasets(std::vector<LabeledDataset> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_datasets: no parts");
  if (parts.size() == 1) return std::move(parts[0]);
  Shape tail = parts[0].features.shape;
  std::size_t rows = 0;
  int classes = 0;
  for (const auto& p : parts) {
    Shape t = p.features.shape;
    t[0] = tail[0];
    if (t != tail)
      throw std::invalid_argument("concat_datasets: incompatible shapes " + shape_str(tail) +
                                  " vs " + shape_str(p.features.shape));
    rows += p.size();
    classes = std::max(classes, p.num_classes);
  }
  Shape out_shape = tail;
  out_shape[0] = rows;
  LabeledDataset out;
  out.features = Tensor::zeros(out_shape);
  out.num_classes = classes;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.features.data.begin(), p.features.data.end(),
              out.features.data.begin() + off);
    off += p.features.data.size();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  Reader r(read_raw(text));
  ExperimentConfig cfg;
  cfg.text = text;

  cfg.dataset_kind = r.required("dataset.kind");
  if (cfg.dataset_kind != "spiral" && cfg.dataset_kind != "cifar10" &&
      cfg.dataset_kind != "cifar100" && cfg.dataset_kind != "idx")
    throw std::invalid_argument("unknown dataset.kind '" + cfg.dataset_kind +
                                "'; known: spiral, cifar10, cifar100, idx");
  r.take_into("dataset.seed", cfg.dataset_seed);
  r.take_into("dataset.spiral.train_per_class", cfg.spiral_train_per_class);
  r.take_into("dataset.spiral.test_per_class", cfg.spiral_test_per_class);
  r.take_into("dataset.spiral.classes", cfg.spiral_classes);
  r.take_into("dataset.spiral.noise_std", cfg.spiral_noise_std);
  if (auto v = r.take("dataset.cifar.train_files"))
    cfg.cifar_train_files = split_list(*v, "dataset.cifar.train_files");
  if (auto v = r.take("dataset.cifar.test_files"))
    cfg.cifar_test_files = split_list(*v, "dataset.cifar.test_files");
  r.take_into("dataset.idx.train_images", cfg.idx_train_images);
  r.take_into("dataset.idx.train_labels", cfg.idx_train_labels);
  r.take_into("dataset.idx.test_images", cfg.idx_test_images);
  r.take_into("dataset.idx.test_labels", cfg.idx_test_labels);
  for (const auto& [key, dst] : {std::pair<const char*, std::array<double, 3>*>{
                                     "dataset.norm.mean", &cfg.norm.mean},
                                 {"dataset.norm.std", &cfg.norm.std}}) {
    if (auto v = r.take(key)) {
      const auto items = split_list(*v, key);
      if (items.size() != 3)
        throw std::invalid_argument(std::string(key) + " needs 3 values, got " +
                                    std::to_string(items.size()));
      for (int i = 0; i < 3; ++i) (*dst)[i] = parse_double(items[i], key);
    }
  }
  for (double s : cfg.norm.std)
    if (s == 0.0) throw std::invalid_argument("dataset.norm.std entries must be nonzero");

  if (cfg.dataset_kind == "spiral") {
    if (cfg.spiral_train_per_class < 1 || cfg.spiral_test_per_class < 1)
      throw std::invalid_argument("spiral per-class sizes must be >= 1");
    if (cfg.spiral_classes < 2)
      throw std::invalid_argument("dataset.spiral.classes must be >= 2, got " +
                                  std::to_string(cfg.spiral_classes));
  }
  if ((cfg.dataset_kind == "cifar10" || cfg.dataset_kind == "cifar100") &&
      (cfg.cifar_train_files.empty() || cfg.cifar_test_files.empty()))
    throw std::invalid_argument(cfg.dataset_kind +
                                " needs dataset.cifar.train_files and dataset.cifar.test_files");
  if (cfg.dataset_kind == "idx" &&
      (cfg.idx_train_images.empty() || cfg.idx_train_labels.empty() ||
       cfg.idx_test_images.empty() || cfg.idx_test_labels.empty()))
    throw std::invalid_argument("idx needs all four dataset.idx.* paths");

  cfg.arch_kind = r.required("arch.kind");
  if (cfg.arch_kind != "mlp" && cfg.arch_kind != "small_cnn")
    throw std::invalid_argument("unknown arch.kind '" + cfg.arch_kind +
                                "'; known: mlp, small_cnn");
  if (auto v = r.take("arch.hidden")) {
    cfg.hidden.clear();
    for (const auto& item : split_list(*v, "arch.hidden")) {
      const int w = parse_int(item, "arch.hidden");
      if (w < 1) throw std::invalid_argument("arch.hidden widths must be >= 1");
      cfg.hidden.push_back(w);
    }
  }

  for (const auto& name : split_list(r.required("policy.kind"), "policy.kind")) {
    const PolicyKind k = policy_kind_from_string(name);
    if (std::find(cfg.policy_kinds.begin(), cfg.policy_kinds.end(), k) !=
        cfg.policy_kinds.end())
      throw std::invalid_argument("policy.kind lists '" + name + "' twice");
    cfg.policy_kinds.push_back(k);
  }
  const bool ll_set = r.take_into("policy.lambda_long", cfg.policy.lambda_long);
  const bool ls_set = r.take_into("policy.lambda_short", cfg.policy.lambda_short);
  r.take_into("policy.temperature", cfg.policy.temperature);
  r.take_into("policy.mini_gen_epochs", cfg.policy.mini_gen_epochs);
  r.take_into("policy.mini_generations", cfg.policy.mini_generations);
  r.take_into("policy.alpha_mean_teacher", cfg.policy.alpha_mean_teacher);
  r.take_into("policy.alpha_temporal", cfg.policy.alpha_temporal);
  r.take_into("policy.lambda_baseline", cfg.policy.lambda_baseline);
  r.take_into("policy.record_post_update", cfg.policy.record_post_update);
  r.take_into("policy.reverse_kl", cfg.policy.reverse_kl);

  const auto all_kinds_are = [&](PolicyKind k) {
    return std::all_of(cfg.policy_kinds.begin(), cfg.policy_kinds.end(),
                       [&](PolicyKind x) { return x == k; });
  };
  if (ll_set && cfg.policy.lambda_long != 0.0 && all_kinds_are(PolicyKind::lstsd_no_long))
    throw std::invalid_argument(
        "policy.lambda_long is set but every policy kind forces it to zero");
  if (ls_set && cfg.policy.lambda_short != 0.0 && all_kinds_are(PolicyKind::lstsd_no_short))
    throw std::invalid_argument(
        "policy.lambda_short is set but every policy kind forces it to zero");

  r.take_into("optim.momentum", cfg.optim.momentum);
  r.take_into("optim.weight_decay", cfg.optim.weight_decay);
  r.take_into("optim.batch_size", cfg.optim.batch_size);
  r.take_into("optim.augment", cfg.optim.augment);
  r.take_into("optim.aug_pad", cfg.optim.aug_pad);
  r.take_into("optim.aug_flip_prob", cfg.optim.aug_flip_prob);
  if (cfg.optim.batch_size < 1)
    throw std::invalid_argument("optim.batch_size must be >= 1");

  if (auto v = r.take("schedule.kind")) cfg.schedule.kind = schedule_kind_from(*v);
  r.take_into("schedule.base_lr", cfg.schedule.base_lr);
  r.take_into("schedule.factor", cfg.schedule.factor);
  if (auto v = r.take("schedule.milestones")) {
    cfg.schedule.milestones.clear();
    for (const auto& item : split_list(*v, "schedule.milestones"))
      cfg.schedule.milestones.push_back(parse_double(item, "schedule.milestones"));
  }
  r.take_into("schedule.floor_lr", cfg.schedule.floor_lr);
  int cycle = 0;
  if (r.take_into("schedule.cycle_epochs", cycle)) {
    if (cycle < 0) throw std::invalid_argument("schedule.cycle_epochs must be >= 0");
    cfg.cycle_epochs_set = cycle > 0;
    if (cycle > 0) cfg.schedule.cycle_epochs = cycle;
  }
  if (!(cfg.schedule.base_lr > 0.0))
    throw std::invalid_argument("schedule.base_lr must be positive");
  if (!(cfg.schedule.factor > 0.0))
    throw std::invalid_argument("schedule.factor must be positive");
  if (cfg.schedule.floor_lr < 0.0 || cfg.schedule.floor_lr > cfg.schedule.base_lr)
    throw std::invalid_argument("schedule.floor_lr must lie in [0, base_lr]");
  double prev = 0.0;
  for (double m : cfg.schedule.milestones) {
    if (m <= prev || m >= 1.0)
      throw std::invalid_argument(
          "schedule.milestones must be strictly increasing inside (0, 1)");
    prev = m;
  }

  for (const auto& item : split_list(r.required("seeds"), "seeds"))
    cfg.seeds.push_back(parse_u64(item, "seeds"));

  r.take_into("out.dir", cfg.out_dir);
  r.take_into("out.dump_dataset", cfg.dump_dataset);

  if (auto v = r.take("sweep.mini_gen_epochs"))
    for (const auto& item : split_list(*v, "sweep.mini_gen_epochs"))
      cfg.sweep_epochs.push_back(parse_int(item, "sweep.mini_gen_epochs"));
  if (auto v = r.take("sweep.lambda_long"))
    for (const auto& item : split_list(*v, "sweep.lambda_long"))
      cfg.sweep_lambda_long.push_back(parse_double(item, "sweep.lambda_long"));
  if (auto v = r.take("sweep.lambda_short"))
    for (const auto& item : split_list(*v, "sweep.lambda_short"))
      cfg.sweep_lambda_short.push_back(parse_double(item, "sweep.lambda_short"));
  if (auto v = r.take("sweep.lambda_baseline"))
    for (const auto& item : split_list(*v, "sweep.lambda_baseline"))
      cfg.sweep_lambda_baseline.push_back(parse_double(item, "sweep.lambda_baseline"));
  const int axes = (cfg.sweep_epochs.empty() ? 0 : 1) +
                   (cfg.sweep_lambda_long.empty() ? 0 : 1) +
                   (cfg.sweep_lambda_short.empty() ? 0 : 1) +
                   (cfg.sweep_lambda_baseline.empty() ? 0 : 1);
  if (axes > 1)
    throw std::invalid_argument(
        "at most one sweep axis may be set (sweep.mini_gen_epochs, sweep.lambda_long, "
        "sweep.lambda_short, sweep.lambda_baseline)");

  r.take_into("compare.reference", cfg.compare_reference);

  r.finish();
  cfg.policy.validate();
  return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
  return parse_config(read_text_file(path));
}

std::pair<LabeledDataset, LabeledDataset> build_datasets(const ExperimentConfig& cfg) {
  if (cfg.dataset_kind == "spiral") {
    LabeledDataset train = gen_spiral(cfg.spiral_train_per_class, cfg.spiral_classes,
                                      cfg.spiral_noise_std, cfg.dataset_seed);
    LabeledDataset test = gen_spiral(cfg.spiral_test_per_class, cfg.spiral_classes,
                                     cfg.spiral_noise_std, cfg.dataset_seed + 1);
    return {std::move(train), std::move(test)};
  }
  if (cfg.dataset_kind == "cifar10" || cfg.dataset_kind == "cifar100") {
    const CifarVariant variant =
        cfg.dataset_kind == "cifar10" ? CifarVariant::cifar10 : CifarVariant::cifar100;
    std::vector<LabeledDataset> train_parts, test_parts;
    for (const auto& p : cfg.cifar_train_files)
      train_parts.push_back(load_cifar_binary(p, variant, cfg.norm));
    for (const auto& p : cfg.cifar_test_files)
      test_parts.push_back(load_cifar_binary(p, variant, cfg.norm));
    return {concat_datasets(std::move(train_parts)), concat_datasets(std::move(test_parts))};
  }
  LabeledDataset train = load_idx(cfg.idx_train_images, cfg.idx_train_labels, cfg.norm);
  LabeledDataset test = load_idx(cfg.idx_test_images, cfg.idx_test_labels, cfg.norm);
  const int classes = std::max(train.num_classes, test.num_classes);
  train.num_classes = classes;
  test.num_classes = classes;
  return {std::move(train), std::move(test)};
}

ModelArch make_arch(const ExperimentConfig& cfg, const LabeledDataset& train) {
  if (cfg.arch_kind == "mlp") {
    if (train.features.rank() != 2)
      throw std::invalid_argument("arch.kind mlp needs flat features, got " +
                                  shape_str(train.features.shape));
    std::vector<int> widths;
    widths.push_back(static_cast<int>(train.features.shape[1]));
    widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
    widths.push_back(train.num_classes);
    return ModelArch::mlp(std::move(widths));
  }
  if (train.features.rank() != 4)
    throw std::invalid_argument("arch.kind small_cnn needs image features, got " +
                                shape_str(train.features.shape));
  return ModelArch::small_cnn(static_cast<int>(train.features.shape[1]),
                              static_cast<int>(train.features.shape[2]),
                              static_cast<int>(train.features.shape[3]),
                              train.num_classes);
}

std::map<std::string, std::string> comparable_subset(const ExperimentConfig& cfg) {
  std::map<std::string, std::string> m;
  m["dataset.kind"] = cfg.dataset_kind;
  m["dataset.seed"] = std::to_string(cfg.dataset_seed);
  if (cfg.dataset_kind == "spiral") {
    m["dataset.spiral.train_per_class"] = std::to_string(cfg.spiral_train_per_class);
    m["dataset.spiral.test_per_class"] = std::to_string(cfg.spiral_test_per_class);
    m["dataset.spiral.classes"] = std::to_string(cfg.spiral_classes);
    m["dataset.spiral.noise_std"] = fmt_g(cfg.spiral_noise_std);
  } else {
    auto join = [](const std::vector<std::string>& v) {
      std::string s;
      for (const auto& p : v) {
        if (!s.empty()) s += ",";
        s += p;
      }
      return s;
    };
    m["dataset.cifar.train_files"] = join(cfg.cifar_train_files);
    m["dataset.cifar.test_files"] = join(cfg.cifar_test_files);
    m["dataset.idx.train_images"] = cfg.idx_train_images;
    m["dataset.idx.train_labels"] = cfg.idx_train_labels;
    m["dataset.idx.test_images"] = cfg.idx_test_images;
    m["dataset.idx.test_labels"] = cfg.idx_test_labels;
    m["dataset.norm.mean"] =
        fmt_g(cfg.norm.mean[0]) + "," + fmt_g(cfg.norm.mean[1]) + "," + fmt_g(cfg.norm.mean[2]);
    m["dataset.norm.std"] =
        fmt_g(cfg.norm.std[0]) + "," + fmt_g(cfg.norm.std[1]) + "," + fmt_g(cfg.norm.std[2]);
  }
  m["arch.kind"] = cfg.arch_kind;
  std::string hidden;
  for (int w : cfg.hidden) {
    if (!hidden.empty()) hidden += ",";
    hidden += std::to_string(w);
  }
  m["arch.hidden"] = hidden;
  m["optim.momentum"] = fmt_g(cfg.optim.momentum);
  m["optim.weight_decay"] = fmt_g(cfg.optim.weight_decay);
  m["optim.batch_size"] = std::to_string(cfg.optim.batch_size);
  m["optim.augment"] = cfg.optim.augment ? "true" : "false";
  m["optim.aug_pad"] = std::to_string(cfg.optim.aug_pad);
  m["optim.aug_flip_prob"] = fmt_g(cfg.optim.aug_flip_prob);
  m["schedule.kind"] = schedule_kind_name(cfg.schedule.kind);
  m["schedule.base_lr"] = fmt_g(cfg.schedule.base_lr);
  m["schedule.factor"] = fmt_g(cfg.schedule.factor);
  std::string miles;
  for (double v : cfg.schedule.milestones) {
    if (!miles.empty()) miles += ",";
    miles += fmt_g(v);
  }
  m["schedule.milestones"] = miles;
  m["schedule.floor_lr"] = fmt_g(cfg.schedule.floor_lr);
  m["total_epochs"] =
      std::to_string(cfg.policy.mini_gen_epochs * cfg.policy.mini_generations);
  return m;
}

namespace {

bool is_snapshot_kind(PolicyKind k) {
  return k == PolicyKind::snapshot_ensembles || k == PolicyKind::snapshot_distillation;
}

LrSchedule cell_schedule(const ExperimentConfig& cfg, PolicyKind kind, int cell_epochs) {
  if (is_snapshot_kind(kind)) {
    // Warm restarts are what defines these baselines, so they always get the
    // cyclic schedule; the cycle tracks the mini-generation length unless
    // schedule.cycle_epochs pins it.
    const int cycle = cfg.cycle_epochs_set ? cfg.schedule.cycle_epochs : cell_epochs;
    return LrSchedule::cyclic_cosine(cfg.schedule.base_lr, cycle, cfg.schedule.floor_lr);
  }
  LrSchedule s = cfg.schedule;
  if (s.kind == LrSchedule::Kind::cyclic_cosine && !cfg.cycle_epochs_set)
    s.cycle_epochs = cell_epochs;
  return s;
}

}  // namespace

std::vector<RunCell> enumerate_cells(const ExperimentConfig& cfg) {
  if (cfg.policy_kinds.empty()) throw std::invalid_argument("no policy kinds configured");
  if (cfg.seeds.empty()) throw std::invalid_argument("no seeds configured");

  struct SweepVal {
    std::string suffix;
    std::function<void(PolicyConfig&)> apply;
  };
  std::vector<SweepVal> sweep;
  const int total = cfg.policy.mini_gen_epochs * cfg.policy.mini_generations;
  for (int e : cfg.sweep_epochs) {
    if (e < 1) throw std::invalid_argument("sweep.mini_gen_epochs values must be >= 1");
    if (total % e != 0)
      throw std::invalid_argument("sweep.mini_gen_epochs: value " + std::to_string(e) +
                                  " does not divide the fixed budget of " +
                                  std::to_string(total) + " epochs");
    sweep.push_back({"_E" + std::to_string(e), [e, total](PolicyConfig& p) {
                       p.mini_gen_epochs = e;
                       p.mini_generations = total / e;
                     }});
  }
  for (double v : cfg.sweep_lambda_long) {
    if (v < 0.0) throw std::invalid_argument("sweep.lambda_long values must be >= 0");
    sweep.push_back({"_ll" + fmt_g(v), [v](PolicyConfig& p) { p.lambda_long = v; }});
  }
  for (double v : cfg.sweep_lambda_short) {
    if (v < 0.0) throw std::invalid_argument("sweep.lambda_short values must be >= 0");
    sweep.push_back({"_ls" + fmt_g(v), [v](PolicyConfig& p) { p.lambda_short = v; }});
  }
  for (double v : cfg.sweep_lambda_baseline) {
    if (v < 0.0) throw std::invalid_argument("sweep.lambda_baseline values must be >= 0");
    sweep.push_back({"_lb" + fmt_g(v), [v](PolicyConfig& p) { p.lambda_baseline = v; }});
  }
  if (sweep.empty()) sweep.push_back({"", [](PolicyConfig&) {}});

  std::vector<RunCell> cells;
  for (PolicyKind kind : cfg.policy_kinds) {
    if (!cfg.sweep_lambda_long.empty() && kind == PolicyKind::lstsd_no_long)
      throw std::invalid_argument("sweep.lambda_long cannot apply to lstsd_no_long");
    if (!cfg.sweep_lambda_short.empty() && kind == PolicyKind::lstsd_no_short)
      throw std::invalid_argument("sweep.lambda_short cannot apply to lstsd_no_short");
    for (const SweepVal& sv : sweep) {
      PolicyConfig p = cfg.policy;
      p.kind = kind;
      if (kind == PolicyKind::lstsd_no_long) p.lambda_long = 0.0;
      if (kind == PolicyKind::lstsd_no_short) p.lambda_short = 0.0;
      sv.apply(p);
      p.validate();
      const std::string group = std::string(to_string(kind)) + sv.suffix;
      const LrSchedule sched = cell_schedule(cfg, kind, p.mini_gen_epochs);
      for (std::uint64_t seed : cfg.seeds) {
        RunCell cell;
        cell.prefix = group + "_s" + std::to_string(seed);
        cell.group = group;
        cell.policy = p;
        cell.schedule = sched;
        cell.seed = seed;
        cells.push_back(std::move(cell));
      }
    }
  }
  return cells;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  ExperimentConfig c = cfg;
  std::string hash_src = c.text;
  if (opts.seed_override) {
    c.seeds = {*opts.seed_override};
    hash_src += "\nseed_override=" + std::to_string(*opts.seed_override);
  }

  std::string root = !opts.out_root.empty() ? opts.out_root : c.out_dir;
  if (root.empty()) {
    const char* env = std::getenv("LSTSD_OUT_ROOT");
    root = env && *env ? env : "runs";
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx",
                static_cast<unsigned long long>(fnv1a64(hash_src)));
  const fs::path run_dir = fs::path(root) / hex;
  fs::create_directories(run_dir);

  const fs::path cfg_path = run_dir / "config.txt";
  if (fs::exists(cfg_path)) {
    if (read_text_file(cfg_path.string()) != c.text)
      throw std::runtime_error("run directory " + run_dir.string() +
                               " already holds a different config.txt; refusing to mix runs");
  } else {
    write_file_atomic(cfg_path.string(), c.text);
  }

  const auto [train_set, test_set] = build_datasets(c);
  const ModelArch arch = make_arch(c, train_set);
  if (c.dump_dataset) {
    write_dataset_csv(train_set, (run_dir / "dataset_train.csv").string());
    write_dataset_csv(test_set, (run_dir / "dataset_test.csv").string());
  }

  const std::vector<RunCell> cells = enumerate_cells(c);
  std::vector<CellOutcome> outcomes(cells.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      CellOutcome& o = outcomes[i];
      o.cell = cells[i];
      try {
        TrainResult res = train(cells[i].policy, arch, train_set, test_set, c.optim,
                                cells[i].schedule, cells[i].seed);
        res.report.config_echo = c.text;
        const std::string stem = (run_dir / cells[i].prefix).string();
        write_file_atomic(stem + ".csv", report_to_csv(res.report));
        write_file_atomic(stem + ".summary.txt", report_summary(res.report));
        save_checkpoint(res.params, stem + ".final.ckpt.tmp");
        fs::rename(stem + ".final.ckpt.tmp", stem + ".final.ckpt");
        o.report = std::move(res.report);
        o.ok = true;
      } catch (const std::exception& e) {
        o.ok = false;
        o.error = e.what();
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(opts.jobs, static_cast<int>(cells.size())));
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::string manifest;
  manifest += std::string("config_hash = ") + hex + "\n";
  manifest += "cells = " + std::to_string(cells.size()) + "\n";
  char buf[512];
  for (const CellOutcome& o : outcomes) {
    if (o.ok) {
      std::snprintf(buf, sizeof buf, "cell %s group=%s seed=%llu status=ok final_test_acc=%.6f\n",
                    o.cell.prefix.c_str(), o.cell.group.c_str(),
                    static_cast<unsigned long long>(o.cell.seed), o.report.final_test_acc);
      manifest += buf;
    } else {
      manifest += "cell " + o.cell.prefix + " group=" + o.cell.group + " seed=" +
                  std::to_string(o.cell.seed) + " status=failed error=" + o.error + "\n";
    }
  }
  write_file_atomic((run_dir / "manifest.txt").string(), manifest);

  ExperimentResult result;
  result.run_dir = run_dir.string();
  result.cells = std::move(outcomes);
  result.ok = !result.cells.empty();
  std::vector<std::pair<std::string, RunReport>> labeled;
  bool have_ref = false;
  for (const CellOutcome& o : result.cells) {
    if (!o.ok) {
      result.ok = false;
      continue;
    }
    labeled.emplace_back(o.cell.group, o.report);
    have_ref = have_ref || o.cell.group == c.compare_reference;
  }
  if (!labeled.empty()) {
    const std::string ref = have_ref ? c.compare_reference : labeled.front().first;
    result.comparison = compare_runs(labeled, ref).format();
    write_file_atomic((run_dir / "comparison.txt").string(), result.comparison);
  }
  return result;
}

std::string format_delta(double delta) {
  const double pct = delta * 100.0;
  char buf[40];
  if (std::fabs(pct) < 0.005) return "(-0.00)";
  std::snprintf(buf, sizeof buf, "(%+.2f)", pct);
  return buf;
}

ComparisonTable compare_runs(const std::vector<std::pair<std::string, RunReport>>& labeled,
                             const std::string& reference) {
  if (labeled.empty()) throw std::invalid_argument("compare_runs: nothing to compare");
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunReport*>> groups;
  for (const auto& [label, report] : labeled) {
    if (!groups.count(label)) order.push_back(label);
    groups[label].push_back(&report);
  }
  std::string ref = reference.empty() ? order.front() : reference;
  if (!groups.count(ref)) {
    std::string known;
    for (const auto& l : order) {
      if (!known.empty()) known += ", ";
      known += l;
    }
    throw std::invalid_argument("compare_runs: reference group '" + ref +
                                "' not present; groups: " + known);
  }

  const auto make_row = [&](const std::string& label) {
    ComparisonRow row;
    row.label = label;
    const auto& reports = groups[label];
    row.runs = reports.size();
    double sum = 0.0, sum_best = 0.0;
    for (const RunReport* r : reports) {
      sum += r->final_test_acc;
      sum_best += r->best_test_acc;
    }
    row.mean_final = sum / static_cast<double>(row.runs);
    row.mean_best = sum_best / static_cast<double>(row.runs);
    double var = 0.0;
    for (const RunReport* r : reports) {
      const double d = r->final_test_acc - row.mean_final;
      var += d * d;
    }
    row.std_final = std::sqrt(var / static_cast<double>(row.runs));
    return row;
  };

  ComparisonTable table;
  table.reference = ref;
  table.rows.push_back(make_row(ref));
  table.rows.front().is_reference = true;
  for (const auto& label : order)
    if (label != ref) table.rows.push_back(make_row(label));
  const double ref_mean = table.rows.front().mean_final;
  for (auto& row : table.rows) row.delta = row.mean_final - ref_mean;
  return table;
}

std::string ComparisonTable::format() const {
  std::string out = "reference = " + reference + "\n";
  char buf[200];
  std::snprintf(buf, sizeof buf, "%-28s %5s %9s %8s %9s   %s\n", "group", "runs", "final%",
                "std%", "best%", "delta");
  out += buf;
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof buf, "%-28s %5zu %9.2f %8.2f %9.2f   %s\n", row.label.c_str(),
                  row.runs, row.mean_final * 100.0, row.std_final * 100.0,
                  row.mean_best * 100.0, format_delta(row.delta).c_str());
    out += buf;
  }
  return out;
}

RunReport parse_summary(const std::string& text) {
  RunReport report;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line == "config_echo:") break;
    const std::size_t eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 3);
    if (key == "policy")
      report.policy = value;
    else if (key == "seed")
      report.seed = parse_u64(value, key);
    else if (key == "final_test_acc")
      report.final_test_acc = parse_double(value, key);
    else if (key == "best_test_acc")
      report.best_test_acc = parse_double(value, key);
    else if (key == "ensemble_test_acc")
      report.ensemble_test_acc = parse_double(value, key);
    else if (key == "wall_seconds")
      report.wall_seconds = parse_double(value, key);
  }
  return report;
}

ComparisonTable compare_run_dirs(const std::vector<std::string>& dirs,
                                 const std::string& reference) {
  if (dirs.empty()) throw std::invalid_argument("compare_run_dirs: no directories given");
  std::vector<std::pair<std::string, RunReport>> labeled;
  std::map<std::string, std::string> canon;
  std::string ref = reference;
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    const ExperimentConfig cfg =
        parse_config(read_text_file((fs::path(dirs[i]) / "config.txt").string()));
    const auto sub = comparable_subset(cfg);
    if (i == 0) {
      canon = sub;
      if (ref.empty()) ref = cfg.compare_reference;
    } else if (sub != canon) {
      std::string diff;
      for (const auto& [key, value] : canon) {
        auto it = sub.find(key);
        if (it == sub.end() || it->second != value) {
          if (!diff.empty()) diff += ", ";
          diff += key;
        }
      }
      for (const auto& [key, value] : sub)
        if (!canon.count(key)) {
          if (!diff.empty()) diff += ", ";
          diff += key;
        }
      throw std::runtime_error("run directory " + dirs[i] +
                               " is not comparable with " + dirs[0] +
                               "; differing settings: " + diff);
    }

    const std::string manifest =
        read_text_file((fs::path(dirs[i]) / "manifest.txt").string());
    std::istringstream in(manifest);
    std::string line;
    while (std::getline(in, line)) {
      if (line.rfind("cell ", 0) != 0) continue;
      std::istringstream ls(line);
      std::string tok, prefix, group, status;
      ls >> tok >> prefix;
      while (ls >> tok) {
        if (tok.rfind("group=", 0) == 0) group = tok.substr(6);
        if (tok.rfind("status=", 0) == 0) status = tok.substr(7);
      }
      if (status != "ok") continue;
      const std::string summary =
          read_text_file((fs::path(dirs[i]) / (prefix + ".summary.txt")).string());
      labeled.emplace_back(group, parse_summary(summary));
    }
  }
  if (labeled.empty())
    throw std::runtime_error("no successful cells found in the given run directories");
  bool have_ref = false;
  for (const auto& [label, report] : labeled) have_ref = have_ref || label == ref;
  if (reference.empty() && !have_ref) ref = labeled.front().first;
  return compare_runs(labeled, ref);
}

}  // namespace lstsd
