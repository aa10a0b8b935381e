#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "cil/dataset.hpp"
#include "cil/scenario.hpp"

namespace cil::testing {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "cil") {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            (tag + "-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes `<name>_train.clds` and `<name>_test.clds` into `dir`.
inline void write_synth(const std::filesystem::path& dir, const std::string& name, const SynthSpec& spec) {
  auto [train, test] = synth_generate(spec);
  save_dataset(train, dir / (name + "_train.clds"));
  save_dataset(test, dir / (name + "_test.clds"));
}

inline SynthSpec small_spec(int classes, int train_per_class, int test_per_class, std::uint64_t seed = 7,
                            double separation = 1.0) {
  SynthSpec s;
  s.classes = classes;
  s.samples_per_class = train_per_class;
  s.test_per_class = test_per_class;
  s.seed = seed;
  s.separation = separation;
  return s;
}

/// Scenario JSON with one episode per class group, all drawn from
/// `<name>_train.clds`.
inline nlohmann::json split_scenario(const std::string& name, const std::vector<std::vector<int>>& groups,
                                     int epochs) {
  nlohmann::json eps = nlohmann::json::array();
  for (const auto& g : groups) eps.push_back({{"dataset", name + "_train.clds"}, {"classes", g}, {"epochs", epochs}});
  return {{"name", name}, {"episodes", eps}};
}

}  // namespace cil::testing
