#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cil/dataset.hpp"
#include "cil/rng.hpp"
#include "cil/tensor.hpp"

namespace cil {

inline constexpr int kDefaultEpochs = 10;

struct EpisodeConfig {
  std::string dataset;  // train split
  std::string test;     // test split; derived from `dataset` when absent
  std::vector<int> classes;  // local ids; empty = every class of the dataset
  int epochs = kDefaultEpochs;
};

/// (episode index, local class id) pair used in sharing declarations.
struct ClassRef {
  int episode = 0;
  int local_class = 0;
  auto operator<=>(const ClassRef&) const = default;
};

struct ScenarioConfig {
  std::string name = "scenario";
  std::uint64_t seed = 0;
  std::vector<EpisodeConfig> episodes;
  std::vector<std::vector<ClassRef>> shared_classes;
  std::filesystem::path base_dir;  // relative dataset paths resolve here
};

namespace detail {

/// ".../x_train.clds" → ".../x_test.clds" (last "train" in the file name).
inline std::string derive_test_path(const std::string& train_path) {
  const auto slash = train_path.find_last_of('/');
  const auto pos = train_path.rfind("train");
  if (pos == std::string::npos || (slash != std::string::npos && pos < slash)) {
    throw ConfigError("episode '" + train_path + "' has no \"test\" entry and no \"train\" in its file name");
  }
  return train_path.substr(0, pos) + "test" + train_path.substr(pos + 5);
}

inline ClassRef parse_class_ref(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw ConfigError("shared class '" + s + "' must look like \"episode:class\"");
    try {
      return {std::stoi(s.substr(0, colon)), std::stoi(s.substr(colon + 1))};
    } catch (const std::exception&) {
      throw ConfigError("shared class '" + s + "' must look like \"episode:class\"");
    }
  }
  if (j.is_object()) return {j.at("episode").get<int>(), j.at("class").get<int>()};
  throw ConfigError("shared class entries must be \"episode:class\" strings or {episode, class} objects");
}

}  // namespace detail

inline ScenarioConfig parse_scenario_config(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  try {
    ScenarioConfig cfg;
    cfg.base_dir = base_dir;
    cfg.name = j.value("name", std::string("scenario"));
    cfg.seed = j.value("seed", std::uint64_t{0});
    if (!j.contains("episodes") || !j.at("episodes").is_array() || j.at("episodes").empty())
      throw ConfigError("config needs a non-empty \"episodes\" array");
    for (const auto& e : j.at("episodes")) {
      EpisodeConfig ep;
      ep.dataset = e.at("dataset").get<std::string>();
      ep.test = e.contains("test") ? e.at("test").get<std::string>() : detail::derive_test_path(ep.dataset);
      if (e.contains("classes")) ep.classes = e.at("classes").get<std::vector<int>>();
      ep.epochs = e.value("epochs", kDefaultEpochs);
      if (ep.epochs < 0) throw ConfigError("episode epochs must be non-negative");
      cfg.episodes.push_back(std::move(ep));
    }
    if (j.contains("shared_classes")) {
      for (const auto& group : j.at("shared_classes")) {
        std::vector<ClassRef> refs;
        for (const auto& r : group) refs.push_back(detail::parse_class_ref(r));
        cfg.shared_classes.push_back(std::move(refs));
      }
    }
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scenario config: ") + e.what());
  }
}

inline nlohmann::json scenario_config_to_json(const ScenarioConfig& cfg) {
  nlohmann::json eps = nlohmann::json::array();
  for (const auto& e : cfg.episodes)
    eps.push_back({{"dataset", e.dataset}, {"test", e.test}, {"classes", e.classes}, {"epochs", e.epochs}});
  nlohmann::json shared = nlohmann::json::array();
  for (const auto& g : cfg.shared_classes) {
    nlohmann::json group = nlohmann::json::array();
    for (const auto& r : g) group.push_back(std::to_string(r.episode) + ":" + std::to_string(r.local_class));
    shared.push_back(group);
  }
  return {{"name", cfg.name}, {"seed", cfg.seed}, {"episodes", eps}, {"shared_classes", shared}};
}

/// One training sample: a dataset row and its global class id.
struct SampleRef {
  const DatasetFile* dataset = nullptr;
  std::uint32_t index = 0;
  int label = 0;
};

struct Episode {
  int index = 0;
  std::string name;
  std::shared_ptr<const DatasetFile> train;
  std::shared_ptr<const DatasetFile> test;
  std::vector<int> local_classes;
  std::map<int, int> local_to_global;
  int epochs = kDefaultEpochs;

  /// Global ids in the order this episode introduces or reuses them.
  std::vector<int> global_classes() const {
    std::vector<int> out;
    for (int c : local_classes) out.push_back(local_to_global.at(c));
    return out;
  }

  std::vector<SampleRef> samples(Split split) const {
    const DatasetFile& ds = split == Split::train ? *train : *test;
    std::vector<SampleRef> out;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      auto it = local_to_global.find(ds.labels[i]);
      if (it != local_to_global.end()) out.push_back({&ds, static_cast<std::uint32_t>(i), it->second});
    }
    return out;
  }
};

struct Scenario {
  std::string name;
  std::uint64_t seed = 0;
  std::vector<Episode> episodes;
  std::vector<std::string> class_names;  // global registry, index = global id

  int class_count() const { return static_cast<int>(class_names.size()); }
};

/// Loads datasets and assigns contiguous global ids in first-appearance
/// order. Classes stay distinct across episodes unless a shared_classes
/// group ties them together.
inline Scenario build_scenario(const ScenarioConfig& cfg) {
  Scenario sc;
  sc.name = cfg.name;
  sc.seed = cfg.seed;
  std::map<std::string, std::shared_ptr<const DatasetFile>> cache;
  auto load = [&](const std::string& rel) {
    const auto path = (cfg.base_dir / rel).lexically_normal();
    auto it = cache.find(path.string());
    if (it != cache.end()) return it->second;
    if (!std::filesystem::exists(path)) throw ConfigError("unknown dataset path '" + path.string() + "'");
    auto ds = std::make_shared<const DatasetFile>(load_dataset(path));
    cache.emplace(path.string(), ds);
    return ds;
  };

  std::map<ClassRef, std::size_t> group_of;
  for (std::size_t g = 0; g < cfg.shared_classes.size(); ++g) {
    for (const auto& r : cfg.shared_classes[g]) {
      if (r.episode < 0 || r.episode >= static_cast<int>(cfg.episodes.size()))
        throw ConfigError("shared class refers to unknown episode " + std::to_string(r.episode));
      if (!group_of.emplace(r, g).second) throw ConfigError("a class appears in two sharing groups");
    }
  }
  std::map<std::size_t, int> group_id;
  std::map<std::string, std::set<int>> used_by_dataset;

  for (std::size_t e = 0; e < cfg.episodes.size(); ++e) {
    const auto& ec = cfg.episodes[e];
    Episode ep;
    ep.index = static_cast<int>(e);
    ep.name = std::to_string(e + 1);
    ep.train = load(ec.dataset);
    ep.test = load(ec.test);
    ep.epochs = ec.epochs;
    if (ep.train->class_names != ep.test->class_names)
      throw ConfigError("train and test splits of '" + ec.dataset + "' disagree on the class table");
    ep.local_classes = ec.classes;
    if (ep.local_classes.empty()) {
      for (int c = 0; c < static_cast<int>(ep.train->class_count()); ++c) ep.local_classes.push_back(c);
    }
    auto& used = used_by_dataset[(cfg.base_dir / ec.dataset).lexically_normal().string()];
    std::set<int> seen;
    for (int c : ep.local_classes) {
      if (c < 0 || c >= static_cast<int>(ep.train->class_count()))
        throw ConfigError("episode " + std::to_string(e) + " selects class " + std::to_string(c) +
                          " which its dataset does not have");
      if (!seen.insert(c).second) throw ConfigError("episode " + std::to_string(e) + " lists a class twice");
      if (!used.insert(c).second)
        throw ConfigError("class " + std::to_string(c) + " of '" + ec.dataset +
                          "' appears in more than one episode of the split plan");
      int gid = -1;
      auto g = group_of.find(ClassRef{static_cast<int>(e), c});
      if (g != group_of.end()) {
        auto known = group_id.find(g->second);
        if (known != group_id.end()) gid = known->second;
      }
      if (gid < 0) {
        gid = sc.class_count();
        sc.class_names.push_back(ep.train->class_names[static_cast<std::size_t>(c)]);
        if (g != group_of.end()) group_id[g->second] = gid;
      }
      ep.local_to_global[c] = gid;
    }
    sc.episodes.push_back(std::move(ep));
  }
  return sc;
}

/// Float batch normalised as (byte/255 − 0.5)/0.5 per channel.
struct Batch {
  Tensor images;
  std::vector<int> labels;
  std::vector<SampleRef> samples;
};

inline float normalize_pixel(std::uint8_t b) { return (static_cast<float>(b) / 255.0f - 0.5f) / 0.5f; }

inline Batch make_batch(std::span<const SampleRef> samples) {
  Batch b;
  b.images = Tensor(Shape{samples.size(), kImageChannels, kImageSide, kImageSide});
  float* out = b.images.ptr();
  for (const auto& s : samples) {
    for (auto byte : s.dataset->image(s.index)) *out++ = normalize_pixel(byte);
    b.labels.push_back(s.label);
    b.samples.push_back(s);
  }
  return b;
}

/// Batches of `images` (3072 raw bytes each) normalised like make_batch.
inline Tensor images_to_tensor(const std::vector<std::span<const std::uint8_t>>& images) {
  Tensor t(Shape{images.size(), kImageChannels, kImageSide, kImageSide});
  float* out = t.ptr();
  for (const auto& img : images)
    for (auto byte : img) *out++ = normalize_pixel(byte);
  return t;
}

/// One epoch over `samples`. With shuffle on, the order is a permutation
/// drawn from `rng` (so successive epochs from one rng differ); otherwise
/// file order is kept. The final partial batch is kept.
class BatchStream {
 public:
  BatchStream(std::vector<SampleRef> samples, std::size_t batch_size, Rng& rng, bool shuffle)
      : samples_(std::move(samples)), batch_size_(batch_size) {
    if (batch_size_ < 1) throw ConfigError("batch size must be at least 1");
    if (samples_.empty()) throw ContractError("episode has no samples");
    if (shuffle) rng.shuffle(samples_.begin(), samples_.end());
  }

  std::optional<Batch> next() {
    if (pos_ >= samples_.size()) return std::nullopt;
    const std::size_t end = std::min(samples_.size(), pos_ + batch_size_);
    Batch b = make_batch(std::span<const SampleRef>(samples_).subspan(pos_, end - pos_));
    pos_ = end;
    return b;
  }

  std::size_t batch_count() const { return (samples_.size() + batch_size_ - 1) / batch_size_; }

 private:
  std::vector<SampleRef> samples_;
  std::size_t batch_size_;
  std::size_t pos_ = 0;
};

inline BatchStream iterate_batches(const Episode& episode, std::size_t batch_size, Rng& rng, bool shuffle) {
  return BatchStream(episode.samples(Split::train), batch_size, rng, shuffle);
}

}  // namespace cil
