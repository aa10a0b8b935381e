#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cil/tensor.hpp"

namespace cil {

struct SgdConfig {
  float learning_rate = 0.01f;
  float momentum = 0.9f;
  float weight_decay = 0.0f;

  void validate() const {
    if (!(learning_rate > 0.0f) || !std::isfinite(learning_rate))
      throw ConfigError("optimizer: learning_rate must be positive");
    if (!(momentum >= 0.0f && momentum < 1.0f)) throw ConfigError("optimizer: momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0f)) throw ConfigError("optimizer: weight_decay must be non-negative");
  }
};

/// A named trainable tensor. `locked` (empty or one byte per element) pins
/// individual elements: a non-zero entry is never updated by the optimizer.
struct Parameter {
  std::string name;
  Tensor value;
  std::vector<std::uint8_t> locked;
};

/// SGD with heavy-ball momentum and L2 weight decay:
///   v ← momentum·v + g + weight_decay·θ,   θ ← θ − lr·v.
/// Parameters with requires_grad off are skipped entirely.
class Sgd {
 public:
  explicit Sgd(SgdConfig config = {}) : config_(config) {}

  const SgdConfig& config() const { return config_; }

  void step(std::span<Parameter> params) {
    for (auto& p : params) {
      if (!p.value.requires_grad()) continue;
      if (!p.value.has_grad()) throw ContractError("sgd: parameter '" + p.name + "' has no gradient");
    }
    for (auto& p : params) {
      if (!p.value.requires_grad()) continue;
      auto theta = p.value.data();
      auto grad = p.value.grad();
      auto& v = velocity_[p.name];
      // Head rows are appended on expansion; existing velocity stays a prefix.
      if (v.size() != theta.size()) v.resize(theta.size(), 0.0f);
      const bool has_locks = !p.locked.empty();
      if (has_locks && p.locked.size() != theta.size())
        throw ContractError("sgd: lock mask of '" + p.name + "' does not match its size");
      for (std::size_t i = 0; i < theta.size(); ++i) {
        if (has_locks && p.locked[i]) continue;
        v[i] = config_.momentum * v[i] + grad[i] + config_.weight_decay * theta[i];
        theta[i] -= config_.learning_rate * v[i];
      }
      p.value.zero_grad();
    }
  }

  const std::vector<float>* velocity(const std::string& name) const {
    auto it = velocity_.find(name);
    return it == velocity_.end() ? nullptr : &it->second;
  }

 private:
  SgdConfig config_;
  std::map<std::string, std::vector<float>> velocity_;
};

}  // namespace cil
