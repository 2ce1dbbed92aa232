#include "spadapt/config.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>

namespace spadapt {

std::string to_string(RunMode mode) {
  switch (mode) {
    case RunMode::pretrain: return "pretrain";
    case RunMode::finetune: return "finetune";
    case RunMode::scratch: return "scratch";
  }
  return "?";
}

RunMode parse_run_mode(const std::string& s) {
  if (s == "pretrain") return RunMode::pretrain;
  if (s == "finetune") return RunMode::finetune;
  if (s == "scratch") return RunMode::scratch;
  throw std::invalid_argument("unknown mode '" + s + "'");
}

nlohmann::json DatasetRef::to_json() const {
  return {{"path", path},
          {"toy", toy.to_json()},
          {"expand_k", expand_k},
          {"expand_seed", expand_seed},
          {"transforms", transforms}};
}

DatasetRef DatasetRef::from_json(const nlohmann::json& j) {
  DatasetRef r;
  r.path = j.value("path", std::string());
  if (j.contains("toy")) r.toy = ToyDatasetParams::from_json(j.at("toy"));
  r.expand_k = j.value("expand_k", r.expand_k);
  r.expand_seed = j.value("expand_seed", r.expand_seed);
  r.transforms = j.value("transforms", std::vector<std::string>{});
  return r;
}

nlohmann::json OptimizerConfig::to_json() const {
  return {{"lr", lr},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"milestones", milestones},
          {"decay", decay}};
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& j) {
  OptimizerConfig o;
  o.lr = j.value("lr", o.lr);
  o.batch_size = j.value("batch_size", o.batch_size);
  o.epochs = j.value("epochs", o.epochs);
  o.milestones = j.value("milestones", o.milestones);
  o.decay = j.value("decay", o.decay);
  return o;
}

void ExperimentConfig::validate() const {
  adaptor.validate();
  diversity_cfg.validate();
  if (num_views == 0) throw std::invalid_argument("num_views must be >= 1");
  if (!(optimizer.lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (optimizer.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (!(adaptor_lr_multiplier > 0.0)) {
    throw std::invalid_argument("adaptor_lr_multiplier must be positive");
  }
  if (widths.empty()) throw std::invalid_argument("backbone widths must not be empty");
  const bool passthrough =
      adaptor.kind == AdaptorKind::identity || adaptor.kind == AdaptorKind::inflate;
  if (passthrough && num_views != 1) {
    throw std::invalid_argument(to_string(adaptor.kind) + " runs take exactly one view");
  }
  if (mode == RunMode::scratch && adaptor.kind != AdaptorKind::identity) {
    throw std::invalid_argument(
        "scratch mode trains a network whose first layer takes k channels; adaptor kind must be "
        "identity, got " + to_string(adaptor.kind));
  }
  if (mode == RunMode::pretrain && adaptor.kind != AdaptorKind::identity) {
    throw std::invalid_argument("pretrain mode takes no adaptor");
  }
  if (pool_block && *pool_block >= widths.size()) {
    throw std::invalid_argument("pool_block out of range for the backbone");
  }
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j{{"name", name},
                   {"mode", to_string(mode)},
                   {"dataset", dataset.to_json()},
                   {"adaptor", adaptor.to_json()},
                   {"num_views", num_views},
                   {"pool", to_string(pool)},
                   {"diversity", diversity},
                   {"diversity_cfg", diversity_cfg.to_json()},
                   {"optimizer", optimizer.to_json()},
                   {"adaptor_lr_multiplier", adaptor_lr_multiplier},
                   {"scratch_epoch_multiplier", scratch_epoch_multiplier},
                   {"scale_views", scale_views},
                   {"seed", seed},
                   {"augment", {{"hflip", hflip}, {"rotations", rotations}}},
                   {"widths", widths},
                   {"dtype", dtype_name(dtype)},
                   {"pretrained", pretrained},
                   {"freeze_backbone", freeze_backbone},
                   {"autoencoder",
                    {{"epochs", autoencoder.epochs},
                     {"lr", autoencoder.lr},
                     {"batch_size", autoencoder.batch_size}}},
                   {"pca_pixels", pca_pixels}};
  j["pool_block"] = pool_block ? nlohmann::json(*pool_block) : nlohmann::json(nullptr);
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.name = j.value("name", c.name);
  if (j.contains("mode")) c.mode = parse_run_mode(j.at("mode").get<std::string>());
  if (j.contains("dataset")) c.dataset = DatasetRef::from_json(j.at("dataset"));
  if (j.contains("adaptor")) {
    nlohmann::json a = j.at("adaptor");
    if (!a.contains("k_in")) a["k_in"] = 0;
    c.adaptor = AdaptorSpec::from_json(a);
  }
  c.num_views = j.value("num_views", c.num_views);
  if (j.contains("pool_block") && !j.at("pool_block").is_null()) {
    c.pool_block = j.at("pool_block").get<std::size_t>();
  }
  if (j.contains("pool")) c.pool = parse_view_pool(j.at("pool").get<std::string>());
  c.diversity = j.value("diversity", c.diversity);
  if (j.contains("diversity_cfg")) c.diversity_cfg = DiversityRegConfig::from_json(j.at("diversity_cfg"));
  if (j.contains("optimizer")) c.optimizer = OptimizerConfig::from_json(j.at("optimizer"));
  c.adaptor_lr_multiplier = j.value("adaptor_lr_multiplier", c.adaptor_lr_multiplier);
  c.scratch_epoch_multiplier = j.value("scratch_epoch_multiplier", c.scratch_epoch_multiplier);
  c.scale_views = j.value("scale_views", c.scale_views);
  c.seed = j.value("seed", c.seed);
  if (j.contains("augment")) {
    c.hflip = j.at("augment").value("hflip", c.hflip);
    c.rotations = j.at("augment").value("rotations", c.rotations);
  }
  c.widths = j.value("widths", c.widths);
  if (j.contains("dtype")) {
    const auto d = j.at("dtype").get<std::string>();
    if (d == "float32") {
      c.dtype = DType::f32;
    } else if (d == "float64") {
      c.dtype = DType::f64;
    } else {
      throw std::invalid_argument("unknown dtype '" + d + "'");
    }
  }
  c.pretrained = j.value("pretrained", c.pretrained);
  c.freeze_backbone = j.value("freeze_backbone", c.freeze_backbone);
  if (j.contains("autoencoder")) {
    const auto& a = j.at("autoencoder");
    c.autoencoder.epochs = a.value("epochs", c.autoencoder.epochs);
    c.autoencoder.lr = a.value("lr", c.autoencoder.lr);
    c.autoencoder.batch_size = a.value("batch_size", c.autoencoder.batch_size);
  }
  c.pca_pixels = j.value("pca_pixels", c.pca_pixels);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  return from_json(load_json(path));
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const ExperimentConfig& cfg) { return fnv1a_hex(cfg.to_json().dump()); }

// ---------------------------------------------------------------------------

nlohmann::json MetricsRecord::to_json() const {
  return {{"config_hash", config_hash},
          {"config", config},
          {"resolved", resolved},
          {"train_loss", train_loss},
          {"test_accuracy", test_accuracy},
          {"epoch_seconds", epoch_seconds},
          {"final_accuracy", final_accuracy},
          {"wall_seconds", wall_seconds},
          {"extra", extra}};
}

MetricsRecord MetricsRecord::from_json(const nlohmann::json& j) {
  MetricsRecord m;
  m.config_hash = j.at("config_hash").get<std::string>();
  m.config = j.at("config");
  m.resolved = j.value("resolved", nlohmann::json::object());
  m.train_loss = j.at("train_loss").get<std::vector<double>>();
  m.test_accuracy = j.at("test_accuracy").get<std::vector<double>>();
  m.epoch_seconds = j.value("epoch_seconds", std::vector<double>{});
  m.final_accuracy = j.at("final_accuracy").get<double>();
  m.wall_seconds = j.value("wall_seconds", 0.0);
  m.extra = j.value("extra", nlohmann::json::object());
  if (m.final_accuracy < 0.0 || m.final_accuracy > 100.0) {
    throw std::invalid_argument("metrics record accuracy out of [0,100]");
  }
  if (!m.config.is_null() && fnv1a_hex(m.config.dump()) != m.config_hash) {
    throw std::invalid_argument("metrics record hash does not match its config");
  }
  return m;
}

bool MetricsRecord::same_results(const MetricsRecord& o) const {
  return config_hash == o.config_hash && config == o.config && resolved == o.resolved &&
         train_loss == o.train_loss && test_accuracy == o.test_accuracy &&
         final_accuracy == o.final_accuracy && extra == o.extra;
}

void save_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write then rename so an interrupted run never leaves a truncated record.
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    os << j.dump(1) << '\n';
    if (!os) throw std::runtime_error("error writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

nlohmann::json load_json(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return nlohmann::json::parse(is);
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::size_t> parse_index_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoul(item));
  return out;
}

Dataset apply_transform(const Dataset& d, const std::string& t) {
  if (t.rfind("permute:", 0) == 0) return permute_dataset(d, parse_index_list(t.substr(8)));
  if (t == "grayscale") return grayscale_dataset(d);
  if (t == "lowres") return low_resolution_dataset(d, 4);
  if (t.rfind("lowres:", 0) == 0) return low_resolution_dataset(d, std::stoul(t.substr(7)));
  throw std::invalid_argument("unknown dataset transform '" + t + "'");
}

struct DatasetCache {
  std::mutex mu;
  std::map<std::string, std::shared_ptr<const Dataset>> entries;
  std::vector<std::string> order;
};

DatasetCache& cache() {
  static DatasetCache c;
  return c;
}

constexpr std::size_t kCacheEntries = 12;

}  // namespace

std::shared_ptr<const Dataset> resolve_dataset(const DatasetRef& ref) {
  auto& c = cache();
  const std::string key = ref.to_json().dump();
  {
    std::lock_guard lock(c.mu);
    auto it = c.entries.find(key);
    if (it != c.entries.end()) return it->second;
  }
  Dataset d = ref.path.empty() ? gen_toy_color_dataset(ref.toy) : read_dataset(ref.path);
  if (ref.expand_k != 0) d = expand_dataset(d, ref.expand_k, ref.expand_seed);
  for (const auto& t : ref.transforms) d = apply_transform(d, t);
  auto ptr = std::make_shared<const Dataset>(std::move(d));
  std::lock_guard lock(c.mu);
  if (c.order.size() >= kCacheEntries) {
    c.entries.erase(c.order.front());
    c.order.erase(c.order.begin());
  }
  if (c.entries.emplace(key, ptr).second) c.order.push_back(key);
  return ptr;
}

void clear_dataset_cache() {
  auto& c = cache();
  std::lock_guard lock(c.mu);
  c.entries.clear();
  c.order.clear();
}

}  // namespace spadapt
