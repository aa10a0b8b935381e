#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "cil/binary_io.hpp"
#include "cil/ops.hpp"
#include "cil/optim.hpp"
#include "cil/rng.hpp"

namespace cil {

inline constexpr int kStageCount = 5;

/// Five 3×3 conv stages (ReLU each), 2×2 max-pool after stages 2 and 3,
/// global average pool after stage 5, then a linear head over all classes.
struct BackboneConfig {
  int input_channels = 3;
  int input_size = 32;
  std::array<int, kStageCount> channels{32, 32, 64, 64, 128};
  std::array<bool, kStageCount> pool_after{false, true, true, false, false};
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  float head_init_scale = 0.01f;

  int feature_width() const { return channels.back(); }

  void validate() const {
    if (kernel < 1 || stride < 1 || padding < 0) throw ConfigError("backbone: invalid kernel/stride/padding");
    for (int c : channels)
      if (c < 1) throw ConfigError("backbone: channel counts must be positive");
    if (input_channels < 1 || input_size < 1) throw ConfigError("backbone: invalid input shape");
  }

  nlohmann::json to_json() const {
    return {{"input", {input_channels, input_size, input_size}},
            {"channels", channels},
            {"pool_after", pool_after},
            {"kernel", kernel},
            {"stride", stride},
            {"padding", padding},
            {"head_init_scale", head_init_scale}};
  }
};

enum class Mode { train, eval };

/// Single-head backbone. Parameters live in a fixed order:
/// stage1.weight, stage1.bias, ..., stage5.bias, head.weight, head.bias.
class Model {
 public:
  static constexpr std::size_t kHeadWeight = 2 * kStageCount;
  static constexpr std::size_t kHeadBias = kHeadWeight + 1;

  const BackboneConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  /// 1-based stage index.
  Parameter& stage_weight(int stage) { return params_.at(static_cast<std::size_t>(2 * (stage - 1))); }
  const Parameter& stage_weight(int stage) const { return params_.at(static_cast<std::size_t>(2 * (stage - 1))); }
  Parameter& stage_bias(int stage) { return params_.at(static_cast<std::size_t>(2 * (stage - 1) + 1)); }
  const Parameter& stage_bias(int stage) const { return params_.at(static_cast<std::size_t>(2 * (stage - 1) + 1)); }
  Parameter& head_weight() { return params_[kHeadWeight]; }
  const Parameter& head_weight() const { return params_[kHeadWeight]; }
  Parameter& head_bias() { return params_[kHeadBias]; }
  const Parameter& head_bias() const { return params_[kHeadBias]; }

  /// Head row r predicts global class class_ids()[r].
  const std::vector<int>& class_ids() const { return class_ids_; }
  int class_count() const { return static_cast<int>(class_ids_.size()); }

  int frozen_prefix() const { return frozen_prefix_; }

  /// One byte per output channel of a stage; 0 forces the unit off.
  std::vector<std::uint8_t>& unit_mask(int stage) { return unit_masks_.at(static_cast<std::size_t>(stage - 1)); }
  const std::vector<std::uint8_t>& unit_mask(int stage) const {
    return unit_masks_.at(static_cast<std::size_t>(stage - 1));
  }
  /// One byte per weight of a stage (empty = dense).
  std::vector<std::uint8_t>& connection_mask(int stage) {
    return connection_masks_.at(static_cast<std::size_t>(stage - 1));
  }
  const std::vector<std::uint8_t>& connection_mask(int stage) const {
    return connection_masks_.at(static_cast<std::size_t>(stage - 1));
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.value.numel();
    return total;
  }

  /// Deep copy; shares no storage with the original.
  Model clone() const {
    Model m = *this;
    for (auto& p : m.params_) {
      const bool rg = p.value.requires_grad();
      p.value = p.value.clone();
      p.value.set_requires_grad(rg);
    }
    return m;
  }

 private:
  friend Model build_backbone(const BackboneConfig&, std::uint64_t);
  friend void expand_head(Model&, std::span<const int>);
  friend void freeze_prefix(Model&, int);
  friend Model load_checkpoint(const std::filesystem::path&);

  BackboneConfig config_;
  std::uint64_t seed_ = 0;
  std::vector<Parameter> params_;
  std::vector<int> class_ids_;
  int frozen_prefix_ = 0;
  std::array<std::vector<std::uint8_t>, kStageCount> unit_masks_;
  std::array<std::vector<std::uint8_t>, kStageCount> connection_masks_;
};

/// C×H×W of the activation leaving `stage` (1..5). Stage 5 includes the
/// global average pool, so it is C×1×1.
inline std::array<std::size_t, 3> stage_output_shape(const BackboneConfig& cfg, int stage) {
  if (stage < 1 || stage > kStageCount) throw ContractError("stage index must lie in [1, 5]");
  std::size_t size = static_cast<std::size_t>(cfg.input_size);
  for (int s = 1; s <= stage; ++s) {
    size = (size + 2 * static_cast<std::size_t>(cfg.padding) - static_cast<std::size_t>(cfg.kernel)) /
               static_cast<std::size_t>(cfg.stride) +
           1;
    if (cfg.pool_after[static_cast<std::size_t>(s - 1)]) size = (size - 2) / 2 + 1;
  }
  if (stage == kStageCount) size = 1;
  return {static_cast<std::size_t>(cfg.channels[static_cast<std::size_t>(stage - 1)]), size, size};
}

inline std::size_t feature_width(const BackboneConfig& cfg, int stage) {
  auto s = stage_output_shape(cfg, stage);
  return s[0] * s[1] * s[2];
}

/// He-normal (fan-in) conv weights, zero biases, empty head.
inline Model build_backbone(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  m.seed_ = seed;
  Rng rng(derive_seed(seed, "backbone"));
  std::size_t in_c = static_cast<std::size_t>(config.input_channels);
  const auto k = static_cast<std::size_t>(config.kernel);
  for (int s = 1; s <= kStageCount; ++s) {
    const auto out_c = static_cast<std::size_t>(config.channels[static_cast<std::size_t>(s - 1)]);
    const double std_dev = std::sqrt(2.0 / static_cast<double>(in_c * k * k));
    Tensor w(Shape{out_c, in_c, k, k}, 0.0f, true);
    for (float& v : w.data()) v = static_cast<float>(rng.normal() * std_dev);
    Tensor b(Shape{out_c}, 0.0f, true);
    m.params_.push_back({"stage" + std::to_string(s) + ".weight", w, {}});
    m.params_.push_back({"stage" + std::to_string(s) + ".bias", b, {}});
    m.unit_masks_[static_cast<std::size_t>(s - 1)].assign(out_c, 1);
    in_c = out_c;
  }
  const auto f = static_cast<std::size_t>(config.feature_width());
  m.params_.push_back({"head.weight", Tensor(Shape{0, f}, 0.0f, true), {}});
  m.params_.push_back({"head.bias", Tensor(Shape{0}, 0.0f, true), {}});
  return m;
}

/// Appends one head row per id. Existing rows are preserved bitwise; a new
/// row's weights are drawn from a stream keyed by (model seed, global id),
/// so the growth path does not affect row contents. New biases start at 0.
inline void expand_head(Model& model, std::span<const int> global_ids) {
  if (global_ids.empty()) throw ContractError("expand_head: need at least one new class");
  const auto f = static_cast<std::size_t>(model.config_.feature_width());
  auto& hw = model.params_[Model::kHeadWeight];
  auto& hb = model.params_[Model::kHeadBias];
  const std::size_t old_c = hw.value.dim(0);
  const std::size_t new_c = old_c + global_ids.size();

  std::vector<float> w(hw.value.data().begin(), hw.value.data().end());
  std::vector<float> b(hb.value.data().begin(), hb.value.data().end());
  w.reserve(new_c * f);
  for (int id : global_ids) {
    Rng rng(derive_seed(model.seed_, "head-row", static_cast<std::uint64_t>(id)));
    for (std::size_t j = 0; j < f; ++j)
      w.push_back(static_cast<float>(rng.normal() * model.config_.head_init_scale));
    b.push_back(0.0f);
    model.class_ids_.push_back(id);
  }
  const bool rg_w = hw.value.requires_grad();
  const bool rg_b = hb.value.requires_grad();
  hw.value = Tensor(Shape{new_c, f}, std::move(w), rg_w);
  hb.value = Tensor(Shape{new_c}, std::move(b), rg_b);
  if (!hw.locked.empty()) hw.locked.resize(new_c * f, 0);
  if (!hb.locked.empty()) hb.locked.resize(new_c, 0);
}

/// Appends `count` rows with the next contiguous global ids.
inline void expand_head(Model& model, int count) {
  if (count < 1) throw ContractError("expand_head: need at least one new class");
  std::vector<int> ids;
  const int start = model.class_count() ? model.class_ids().back() + 1 : 0;
  for (int i = 0; i < count; ++i) ids.push_back(start + i);
  expand_head(model, ids);
}

/// Excludes every parameter of stages 1..split from optimizer updates.
inline void freeze_prefix(Model& model, int split) {
  if (split < 1 || split > kStageCount) throw ContractError("freeze_prefix: split must lie in [1, 5]");
  for (int s = 1; s <= split; ++s) {
    model.stage_weight(s).value.set_requires_grad(false);
    model.stage_bias(s).value.set_requires_grad(false);
    model.stage_weight(s).value.drop_grad();
    model.stage_bias(s).value.drop_grad();
  }
  model.frozen_prefix_ = std::max(model.frozen_prefix_, split);
}

namespace detail {

inline Tensor run_stage(Tape& tape, const Model& model, int stage, const Tensor& x) {
  const auto& cfg = model.config();
  const Tensor& raw_w = model.stage_weight(stage).value;
  const auto& cmask = model.connection_mask(stage);
  Tensor w = cmask.empty() ? raw_w : apply_mask(tape, raw_w, cmask);
  Tensor y = conv2d(tape, x, w, model.stage_bias(stage).value, cfg.stride, cfg.padding);
  y = relu(tape, y);
  const auto& umask = model.unit_mask(stage);
  if (std::any_of(umask.begin(), umask.end(), [](std::uint8_t v) { return v == 0; })) {
    y = mask_channels(tape, y, umask);
  }
  if (cfg.pool_after[static_cast<std::size_t>(stage - 1)]) y = max_pool2d(tape, y, 2, 2);
  if (stage == kStageCount) y = global_avg_pool(tape, y);
  return y;
}

inline void check_input(const Model& model, const Tensor& batch) {
  const auto& cfg = model.config();
  const auto c = static_cast<std::size_t>(cfg.input_channels);
  const auto s = static_cast<std::size_t>(cfg.input_size);
  if (batch.rank() != 4 || batch.dim(1) != c || batch.dim(2) != s || batch.dim(3) != s) {
    throw ShapeError("model input must be N×" + std::to_string(c) + "×" + std::to_string(s) + "×" +
                     std::to_string(s) + ", got " + shape_string(batch.shape()));
  }
}

}  // namespace detail

/// Activation after stage `split`, flattened to N×F.
inline Tensor forward_prefix(Tape& tape, const Model& model, const Tensor& batch, int split) {
  if (split < 1 || split > kStageCount) throw ContractError("feature split must lie in [1, 5]");
  detail::check_input(model, batch);
  Tensor x = batch;
  for (int s = 1; s <= split; ++s) x = detail::run_stage(tape, model, s, x);
  const std::size_t n = batch.dim(0);
  return reshape(tape, x, Shape{n, x.numel() / std::max<std::size_t>(n, 1)});
}

/// Logits from N×F features tapped after stage `split`.
inline Tensor forward_suffix(Tape& tape, const Model& model, const Tensor& features, int split) {
  if (split < 1 || split > kStageCount) throw ContractError("feature split must lie in [1, 5]");
  if (model.class_count() < 1) throw ContractError("forward: model head has no classes yet");
  const auto shape = stage_output_shape(model.config(), split);
  const std::size_t width = shape[0] * shape[1] * shape[2];
  if (features.rank() != 2 || features.dim(1) != width) {
    throw ShapeError("features for split " + std::to_string(split) + " must be N×" + std::to_string(width) +
                     ", got " + shape_string(features.shape()));
  }
  const std::size_t n = features.dim(0);
  Tensor x = features;
  if (split < kStageCount) {
    x = reshape(tape, features, Shape{n, shape[0], shape[1], shape[2]});
    for (int s = split + 1; s <= kStageCount; ++s) x = detail::run_stage(tape, model, s, x);
  }
  return linear(tape, x, model.head_weight().value, model.head_bias().value);
}

/// Logits over every registered class. The architecture has no
/// mode-dependent layers, so `mode` does not change the result.
inline Tensor forward(Tape& tape, const Model& model, const Tensor& batch, [[maybe_unused]] Mode mode = Mode::train) {
  detail::check_input(model, batch);
  if (model.class_count() < 1) throw ContractError("forward: model head has no classes yet");
  Tensor x = batch;
  for (int s = 1; s <= kStageCount; ++s) x = detail::run_stage(tape, model, s, x);
  return linear(tape, x, model.head_weight().value, model.head_bias().value);
}

/// Untracked feature extraction (the rehearsal storage path).
inline Tensor extract_features(const Model& model, const Tensor& batch, int split) {
  Tape tape = Tape::inference();
  return forward_prefix(tape, model, batch, split);
}

// Checkpoint: "CLCKPT1" | u32 json length | json header | per parameter
// (u32 count, float32 LE values, u32 lock count, lock bytes) | per stage
// (u32 unit-mask length, bytes, u32 connection-mask length, bytes).

inline std::vector<std::uint8_t> encode_checkpoint(const Model& model) {
  io::Writer w;
  w.text("CLCKPT1");
  nlohmann::json header = {{"config", model.config().to_json()},
                           {"seed", model.seed()},
                           {"class_ids", model.class_ids()},
                           {"frozen_prefix", model.frozen_prefix()},
                           {"parameters", nlohmann::json::array()}};
  for (const auto& p : model.parameters())
    header["parameters"].push_back({{"name", p.name}, {"shape", p.value.shape()}});
  const std::string text = header.dump();
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.text(text);
  for (const auto& p : model.parameters()) {
    w.u32(static_cast<std::uint32_t>(p.value.numel()));
    for (float v : p.value.data()) w.f32(v);
    w.u32(static_cast<std::uint32_t>(p.locked.size()));
    w.bytes(p.locked);
  }
  for (int s = 1; s <= kStageCount; ++s) {
    w.u32(static_cast<std::uint32_t>(model.unit_mask(s).size()));
    w.bytes(model.unit_mask(s));
    w.u32(static_cast<std::uint32_t>(model.connection_mask(s).size()));
    w.bytes(model.connection_mask(s));
  }
  return std::move(w.buffer());
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(model));
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::Reader r(bytes);
  auto magic = r.bytes(7, "magic");
  if (std::string(magic.begin(), magic.end()) != "CLCKPT1") throw BadMagicError("bad magic: not a CLCKPT1 file");
  const auto len = r.u32("header length");
  auto text = r.bytes(len, "header");
  const auto header = nlohmann::json::parse(text.begin(), text.end());

  BackboneConfig cfg;
  const auto& c = header.at("config");
  cfg.input_channels = c.at("input")[0];
  cfg.input_size = c.at("input")[1];
  cfg.channels = c.at("channels").get<std::array<int, kStageCount>>();
  cfg.pool_after = c.at("pool_after").get<std::array<bool, kStageCount>>();
  cfg.kernel = c.at("kernel");
  cfg.stride = c.at("stride");
  cfg.padding = c.at("padding");
  cfg.head_init_scale = c.at("head_init_scale");

  Model m = build_backbone(cfg, header.at("seed").get<std::uint64_t>());
  const auto ids = header.at("class_ids").get<std::vector<int>>();
  if (!ids.empty()) expand_head(m, ids);
  for (std::size_t i = 0; i < m.params_.size(); ++i) {
    auto& p = m.params_[i];
    const auto count = r.u32("parameter size");
    if (count != p.value.numel()) throw FormatError("checkpoint parameter '" + p.name + "' has the wrong size");
    for (float& v : p.value.data()) v = r.f32("parameter values");
    const auto locks = r.u32("lock size");
    auto lb = r.bytes(locks, "lock mask");
    p.locked.assign(lb.begin(), lb.end());
  }
  for (int s = 1; s <= kStageCount; ++s) {
    auto um = r.bytes(r.u32("unit mask size"), "unit mask");
    m.unit_masks_[static_cast<std::size_t>(s - 1)].assign(um.begin(), um.end());
    auto cm = r.bytes(r.u32("connection mask size"), "connection mask");
    m.connection_masks_[static_cast<std::size_t>(s - 1)].assign(cm.begin(), cm.end());
  }
  if (r.remaining() != 0) throw FormatError("checkpoint has trailing bytes");
  const int frozen = header.at("frozen_prefix");
  if (frozen > 0) freeze_prefix(m, frozen);
  return m;
}

}  // namespace cil
