#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "cil/backbone.hpp"
#include "cil/ops.hpp"
#include "cil/optim.hpp"
#include "cil/pq.hpp"
#include "cil/replay.hpp"
#include "cil/scenario.hpp"

namespace cil {

enum class Variant { naive_sequential, naive_independent, joint, mas, mas_replay, der, derpp, remind, nispa };

inline constexpr std::array<Variant, 9> kAllVariants = {
    Variant::naive_sequential, Variant::naive_independent, Variant::joint,  Variant::mas,  Variant::mas_replay,
    Variant::der,              Variant::derpp,             Variant::remind, Variant::nispa};

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::naive_sequential: return "naive";
    case Variant::naive_independent: return "naive_independent";
    case Variant::joint: return "joint";
    case Variant::mas: return "mas";
    case Variant::mas_replay: return "mas_replay";
    case Variant::der: return "der";
    case Variant::derpp: return "derpp";
    case Variant::remind: return "remind";
    case Variant::nispa: return "nispa";
  }
  return "?";
}

inline Variant parse_variant(const std::string& name) {
  for (Variant v : kAllVariants)
    if (name == variant_name(v)) return v;
  if (name == "naive_sequential") return Variant::naive_sequential;
  if (name == "mas+r" || name == "masr") return Variant::mas_replay;
  if (name == "der++") return Variant::derpp;
  std::string known;
  for (Variant v : kAllVariants) known += std::string(known.empty() ? "" : ", ") + variant_name(v);
  throw ConfigError("unknown strategy '" + name + "' (known: " + known + ")");
}

inline bool uses_buffer(Variant v) {
  return v == Variant::mas_replay || v == Variant::der || v == Variant::derpp || v == Variant::remind;
}
inline bool uses_mas(Variant v) { return v == Variant::mas || v == Variant::mas_replay; }
inline bool uses_logit_snapshots(Variant v) { return v == Variant::der || v == Variant::derpp; }

struct RemindConfig {
  int split = 3;
  int subspaces = 32;
  int centroids = 256;
  int iterations = 25;
};

struct NispaConfig {
  double sparsity = 0.5;
  double rewire_fraction = 0.1;
  double stable_quantile = 0.8;
  float rewire_init_scale = 0.01f;
};

struct StrategyConfig {
  Variant variant = Variant::naive_sequential;
  std::size_t buffer_capacity = 200;
  Selection selection = Selection::reservoir;
  double der_alpha = 0.5;
  double der_beta = 0.5;
  double mas_lambda = 0.01;
  double replay_ratio = 1.0;
  RemindConfig remind;
  NispaConfig nispa;

  /// β actually applied: DER is DER++ with the label term switched off.
  double effective_beta() const { return variant == Variant::der ? 0.0 : der_beta; }

  void validate() const {
    auto non_negative = [](double v, const char* what) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string("strategy: ") + what + " must be >= 0");
    };
    non_negative(der_alpha, "der_alpha");
    non_negative(der_beta, "der_beta");
    non_negative(mas_lambda, "mas_lambda");
    non_negative(replay_ratio, "replay_ratio");
    if (remind.split < 1 || remind.split >= kStageCount) throw ConfigError("strategy: remind.split must lie in [1, 4]");
    if (remind.subspaces < 1) throw ConfigError("strategy: remind.m must be positive");
    if (remind.centroids < 1 || remind.centroids > 256) throw ConfigError("strategy: remind.k must lie in [1, 256]");
    if (remind.iterations < 0) throw ConfigError("strategy: remind.iterations must be >= 0");
    if (!(nispa.sparsity >= 0.0 && nispa.sparsity < 1.0)) throw ConfigError("strategy: nispa.sparsity must lie in [0, 1)");
    if (!(nispa.rewire_fraction >= 0.0 && nispa.rewire_fraction <= 1.0))
      throw ConfigError("strategy: nispa.rewire_fraction must lie in [0, 1]");
    if (!(nispa.stable_quantile >= 0.0 && nispa.stable_quantile <= 1.0))
      throw ConfigError("strategy: nispa.stable_quantile must lie in [0, 1]");
  }

  nlohmann::json to_json() const {
    return {{"variant", variant_name(variant)},
            {"buffer_capacity", buffer_capacity},
            {"selection", selection_name(selection)},
            {"der_alpha", der_alpha},
            {"der_beta", der_beta},
            {"mas_lambda", mas_lambda},
            {"replay_ratio", replay_ratio},
            {"remind",
             {{"split", remind.split}, {"m", remind.subspaces}, {"k", remind.centroids}, {"iterations", remind.iterations}}},
            {"nispa",
             {{"sparsity", nispa.sparsity},
              {"rewire_fraction", nispa.rewire_fraction},
              {"stable_quantile", nispa.stable_quantile},
              {"rewire_init_scale", nispa.rewire_init_scale}}}};
  }
};

inline StrategyConfig parse_strategy_config(const nlohmann::json& j) {
  StrategyConfig c;
  if (j.is_null()) return c;
  if (!j.is_object()) throw ConfigError("\"strategy\" must be an object");
  try {
    if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
    if (j.contains("buffer_capacity")) {
      const auto m = j.at("buffer_capacity").get<long long>();
      if (m < 0) throw ConfigError("strategy: buffer_capacity must be >= 0");
      c.buffer_capacity = static_cast<std::size_t>(m);
    }
    if (j.contains("selection")) c.selection = parse_selection(j.at("selection").get<std::string>());
    c.der_alpha = j.value("der_alpha", c.der_alpha);
    c.der_beta = j.value("der_beta", c.der_beta);
    c.mas_lambda = j.value("mas_lambda", c.mas_lambda);
    c.replay_ratio = j.value("replay_ratio", c.replay_ratio);
    if (j.contains("remind")) {
      const auto& r = j.at("remind");
      c.remind.split = r.value("split", c.remind.split);
      c.remind.subspaces = r.value("m", c.remind.subspaces);
      c.remind.centroids = r.value("k", c.remind.centroids);
      c.remind.iterations = r.value("iterations", c.remind.iterations);
    }
    if (j.contains("nispa")) {
      const auto& n = j.at("nispa");
      c.nispa.sparsity = n.value("sparsity", c.nispa.sparsity);
      c.nispa.rewire_fraction = n.value("rewire_fraction", c.nispa.rewire_fraction);
      c.nispa.stable_quantile = n.value("stable_quantile", c.nispa.stable_quantile);
      c.nispa.rewire_init_scale = n.value("rewire_init_scale", c.nispa.rewire_init_scale);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("strategy config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Mutable per-run strategy state.
struct TrainState {
  /// Ω and θ*, indexed like Model::parameters(); empty until the first
  /// MAS episode completes.
  std::vector<std::vector<float>> importance;
  std::vector<std::vector<float>> anchor;
  ReservoirBuffer buffer;
  std::optional<PQCodebook> codebook;
  PQTrainLog codebook_log;
  /// Per stage, one byte per output unit (NISPA).
  std::array<std::vector<std::uint8_t>, kStageCount> frozen_units;
  int episodes_completed = 0;
  Rng reservoir_rng;
  Rng replay_rng;
  Rng structure_rng;
  std::uint64_t codebook_seed = 0;
};

inline TrainState make_train_state(const StrategyConfig& cfg, std::uint64_t seed) {
  TrainState s;
  s.buffer = ReservoirBuffer(uses_buffer(cfg.variant) ? cfg.buffer_capacity : 0, cfg.selection);
  s.reservoir_rng = Rng(derive_seed(seed, "reservoir"));
  s.replay_rng = Rng(derive_seed(seed, "replay-sample"));
  s.structure_rng = Rng(derive_seed(seed, "nispa"));
  s.codebook_seed = derive_seed(seed, "codebook");
  return s;
}

struct EpisodeLog {
  std::vector<double> epoch_losses;
  /// Rehearsal rows used by each optimizer step.
  std::vector<std::size_t> replay_rows;
  std::size_t steps = 0;
};

/// Global labels → head row indices.
inline std::vector<int> head_rows(const Model& model, std::span<const int> labels) {
  std::unordered_map<int, int> row_of;
  for (std::size_t r = 0; r < model.class_ids().size(); ++r) row_of[model.class_ids()[r]] = static_cast<int>(r);
  std::vector<int> out;
  out.reserve(labels.size());
  for (int l : labels) {
    auto it = row_of.find(l);
    if (it == row_of.end()) throw ContractError("class " + std::to_string(l) + " has no head row");
    out.push_back(it->second);
  }
  return out;
}

/// Adds head rows for any of `ids` the model does not know yet.
inline void register_classes(Model& model, std::span<const int> ids) {
  std::vector<int> fresh;
  for (int id : ids) {
    const auto& known = model.class_ids();
    if (std::find(known.begin(), known.end(), id) == known.end() &&
        std::find(fresh.begin(), fresh.end(), id) == fresh.end())
      fresh.push_back(id);
  }
  if (!fresh.empty()) expand_head(model, fresh);
}

// ---------------------------------------------------------------- MAS

/// Mean over `count` samples of |∂‖f(x)‖²/∂p| for every parameter that
/// requires grad. `output(tape, i)` runs sample i and returns its outputs.
inline std::vector<std::vector<float>> mas_importance(std::span<Parameter> params,
                                                      const std::function<Tensor(Tape&, std::size_t)>& output,
                                                      std::size_t count) {
  if (count == 0) throw ContractError("mas: importance needs at least one sample");
  std::vector<std::vector<double>> acc(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (params[p].value.requires_grad()) acc[p].assign(params[p].value.numel(), 0.0);
    params[p].value.zero_grad();
  }
  for (std::size_t i = 0; i < count; ++i) {
    Tape tape;
    Tensor out = output(tape, i);
    Tensor norm = sum_squares(tape, out);
    tape.backward(norm);
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& t = params[p].value;
      if (!t.requires_grad() || !t.has_grad()) continue;
      auto g = t.grad();
      for (std::size_t j = 0; j < g.size(); ++j) acc[p][j] += std::fabs(g[j]);
      t.zero_grad();
    }
  }
  std::vector<std::vector<float>> mean(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    mean[p].resize(acc[p].size());
    for (std::size_t j = 0; j < acc[p].size(); ++j)
      mean[p][j] = static_cast<float>(acc[p][j] / static_cast<double>(count));
  }
  return mean;
}

/// Zero-extends Ω and extends θ* with current values after head growth.
inline void sync_importance_shapes(const Model& model, TrainState& state) {
  if (state.importance.empty()) return;
  const auto& params = model.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    const std::size_t n = params[p].value.numel();
    auto& omega = state.importance[p];
    auto& anchor = state.anchor[p];
    if (omega.size() > n) throw ShapeError("mas: importance for '" + params[p].name + "' is larger than the parameter");
    const std::size_t old = anchor.size();
    omega.resize(n, 0.0f);
    anchor.resize(n);
    for (std::size_t j = old; j < n; ++j) anchor[j] = params[p].value.data()[j];
  }
}

/// Ω += mean |∂‖logits‖²/∂θ| over `samples` (batch of one each); θ* ← θ.
inline void mas_accumulate_importance(Model& model, std::span<const SampleRef> samples, TrainState& state) {
  if (samples.empty()) throw ContractError("mas: importance stream is empty");
  auto contribution = mas_importance(
      model.parameters(),
      [&](Tape& tape, std::size_t i) {
        Batch b = make_batch(samples.subspan(i, 1));
        return forward(tape, model, b.images);
      },
      samples.size());
  auto& params = model.parameters();
  if (state.importance.empty()) {
    state.importance.resize(params.size());
    state.anchor.resize(params.size());
  }
  sync_importance_shapes(model, state);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& omega = state.importance[p];
    omega.resize(params[p].value.numel(), 0.0f);
    for (std::size_t j = 0; j < contribution[p].size(); ++j) omega[j] += contribution[p][j];
    state.anchor[p].assign(params[p].value.data().begin(), params[p].value.data().end());
  }
}

/// λ·Σ_p Ω_p·(θ_p − θ*_p)². Parameters without importance contribute 0.
inline Tensor mas_penalty(Tape& tape, const std::vector<Parameter>& params,
                          const std::vector<std::vector<float>>& importance,
                          const std::vector<std::vector<float>>& anchor, double lambda) {
  Tensor total;
  for (std::size_t p = 0; p < params.size() && p < importance.size(); ++p) {
    if (importance[p].empty()) continue;
    if (importance[p].size() != params[p].value.numel() || anchor[p].size() != params[p].value.numel())
      throw ShapeError("mas: importance/anchor for '" + params[p].name + "' do not match the parameter shape " +
                       shape_string(params[p].value.shape()));
    Tensor term = weighted_sq_distance(tape, params[p].value, anchor[p], importance[p]);
    total = total.defined() ? add(tape, total, term) : term;
  }
  if (!total.defined()) return Tensor(Shape{}, 0.0f);
  return scale(tape, total, static_cast<float>(lambda));
}

inline Tensor mas_penalty(Tape& tape, const Model& model, const TrainState& state, double lambda) {
  return mas_penalty(tape, model.parameters(), state.importance, state.anchor, lambda);
}

// ---------------------------------------------------------------- DER

/// current_ce + α·mse(replay logits over each snapshot's classes, snapshot)
/// + β·CE(replay logits, replay rows). Zero-weight terms are not built;
/// an empty replay set returns current_ce unchanged.
inline Tensor der_loss(Tape& tape, const Tensor& current_ce, const Tensor& replay_logits,
                       const std::vector<std::vector<float>>& snapshots, std::span<const int> replay_rows,
                       double alpha, double beta) {
  if (!replay_logits.defined() || replay_logits.dim(0) == 0) return current_ce;
  Tensor loss = current_ce;
  if (alpha > 0.0) {
    bool any = false;
    for (const auto& s : snapshots) any = any || !s.empty();
    if (any) loss = add(tape, loss, scale(tape, prefix_mse(tape, replay_logits, snapshots), static_cast<float>(alpha)));
  }
  if (beta > 0.0)
    loss = add(tape, loss, scale(tape, cross_entropy(tape, replay_logits, replay_rows), static_cast<float>(beta)));
  return loss;
}

// ---------------------------------------------------------------- NISPA

namespace detail {

inline std::size_t fan_in(const Model& model, int stage) {
  const auto& w = model.stage_weight(stage).value;
  return w.numel() / w.dim(0);
}

}  // namespace detail

/// Random connection masks at the configured sparsity; masked weights are
/// zeroed. Only applied while a stage has no mask yet.
inline void nispa_init_masks(Model& model, TrainState& state, const NispaConfig& cfg) {
  for (int s = 1; s <= kStageCount; ++s) {
    auto& mask = model.connection_mask(s);
    auto& frozen = state.frozen_units[static_cast<std::size_t>(s - 1)];
    if (frozen.empty()) frozen.assign(model.stage_weight(s).value.dim(0), 0);
    if (!mask.empty()) continue;
    const std::size_t n = model.stage_weight(s).value.numel();
    const auto off = static_cast<std::size_t>(std::floor(cfg.sparsity * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    state.structure_rng.shuffle(order.begin(), order.end());
    mask.assign(n, 1);
    auto w = model.stage_weight(s).value.data();
    for (std::size_t i = 0; i < off; ++i) {
      mask[order[i]] = 0;
      w[order[i]] = 0.0f;
    }
  }
}

/// Mean post-activation value per unit of every stage over `samples`.
inline std::array<std::vector<double>, kStageCount> unit_activations(const Model& model,
                                                                     std::span<const SampleRef> samples,
                                                                     std::size_t batch_size = 128) {
  std::array<std::vector<double>, kStageCount> acc;
  for (int s = 1; s <= kStageCount; ++s)
    acc[static_cast<std::size_t>(s - 1)].assign(model.stage_weight(s).value.dim(0), 0.0);
  for (std::size_t pos = 0; pos < samples.size(); pos += batch_size) {
    const std::size_t end = std::min(samples.size(), pos + batch_size);
    Batch b = make_batch(samples.subspan(pos, end - pos));
    Tape tape = Tape::inference();
    Tensor x = b.images;
    for (int s = 1; s <= kStageCount; ++s) {
      x = detail::run_stage(tape, model, s, x);
      const std::size_t n = x.dim(0), c = x.dim(1), per = x.numel() / (n * c);
      auto& a = acc[static_cast<std::size_t>(s - 1)];
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum = 0.0;
          for (std::size_t j = 0; j < per; ++j) sum += x.ptr()[(i * c + ch) * per + j];
          a[ch] += sum / static_cast<double>(per);
        }
    }
  }
  for (auto& a : acc)
    for (auto& v : a) v /= static_cast<double>(samples.size());
  return acc;
}

struct RewireStats {
  std::size_t newly_frozen = 0;
  std::size_t swapped = 0;
};

/// Freezes units whose mean activation exceeds the stable quantile (their
/// incoming weights and bias are locked), then swaps the weakest active
/// connections of unfrozen units for randomly chosen inactive ones.
inline RewireStats nispa_rewire(Model& model, TrainState& state,
                                const std::array<std::vector<double>, kStageCount>& activations,
                                const NispaConfig& cfg) {
  RewireStats stats;
  for (int s = 1; s <= kStageCount; ++s) {
    const auto si = static_cast<std::size_t>(s - 1);
    auto& weight = model.stage_weight(s);
    auto& bias = model.stage_bias(s);
    auto& mask = model.connection_mask(s);
    auto& frozen = state.frozen_units[si];
    const std::size_t units = weight.value.dim(0), fan = detail::fan_in(model, s);
    if (mask.empty()) throw ContractError("nispa: stage " + std::to_string(s) + " has no connection mask");
    if (frozen.size() != units) frozen.assign(units, 0);
    const auto& act = activations[si];
    if (act.size() != units) throw ShapeError("nispa: activation count does not match stage width");

    std::vector<double> sorted(act);
    std::sort(sorted.begin(), sorted.end());
    const auto q_at = static_cast<std::size_t>(
        std::min<double>(static_cast<double>(units - 1), std::floor(cfg.stable_quantile * static_cast<double>(units - 1))));
    const double threshold = sorted[q_at];
    if (weight.locked.empty()) weight.locked.assign(weight.value.numel(), 0);
    if (bias.locked.empty()) bias.locked.assign(bias.value.numel(), 0);
    for (std::size_t u = 0; u < units; ++u) {
      if (frozen[u] || !(act[u] > threshold)) continue;
      frozen[u] = 1;
      ++stats.newly_frozen;
      std::fill_n(weight.locked.begin() + static_cast<long>(u * fan), fan, 1);
      bias.locked[u] = 1;
    }

    std::vector<std::size_t> active, inactive;
    for (std::size_t u = 0; u < units; ++u) {
      if (frozen[u]) continue;
      for (std::size_t j = u * fan; j < (u + 1) * fan; ++j) (mask[j] ? active : inactive).push_back(j);
    }
    const auto count = static_cast<std::size_t>(std::floor(cfg.rewire_fraction * static_cast<double>(active.size())));
    if (count == 0) continue;
    if (count > inactive.size())
      throw ContractError("nispa: stage " + std::to_string(s) + " needs " + std::to_string(count) +
                          " inactive connections to rewire but only " + std::to_string(inactive.size()) + " exist");
    auto w = weight.value.data();
    std::stable_sort(active.begin(), active.end(),
                     [&](std::size_t a, std::size_t b) { return std::fabs(w[a]) < std::fabs(w[b]); });
    // Partial Fisher-Yates: the first `count` entries become the grown set.
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(state.structure_rng.uniform_int(inactive.size() - i));
      std::swap(inactive[i], inactive[j]);
    }
    for (std::size_t i = 0; i < count; ++i) {
      mask[active[i]] = 0;
      w[active[i]] = 0.0f;
      mask[inactive[i]] = 1;
      w[inactive[i]] = static_cast<float>(state.structure_rng.normal()) * cfg.rewire_init_scale;
    }
    stats.swapped += count;
  }
  return stats;
}

inline std::size_t active_connections(const Model& model, int stage) {
  const auto& m = model.connection_mask(stage);
  if (m.empty()) return model.stage_weight(stage).value.numel();
  return static_cast<std::size_t>(std::count_if(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; }));
}

// ---------------------------------------------------------------- training

namespace detail {

inline std::size_t replay_count(const StrategyConfig& cfg, std::size_t batch) {
  return static_cast<std::size_t>(std::llround(cfg.replay_ratio * static_cast<double>(batch)));
}

/// Current images followed by replayed raw images, normalised alike.
inline Tensor stack_replay(const Tensor& current, const std::vector<ReplayItem>& replay) {
  if (replay.empty()) return current;
  Shape shape = current.shape();
  shape[0] += replay.size();
  Tensor out(shape);
  std::copy(current.data().begin(), current.data().end(), out.data().begin());
  float* dst = out.ptr() + current.numel();
  for (const auto& item : replay)
    for (auto byte : item.payload_bytes()) *dst++ = normalize_pixel(byte);
  return out;
}

inline std::vector<float> logit_row(const Tensor& logits, std::size_t r) {
  const std::size_t c = logits.dim(1);
  return std::vector<float>(logits.ptr() + r * c, logits.ptr() + (r + 1) * c);
}

inline std::vector<int> replay_labels(const std::vector<ReplayItem>& items) {
  std::vector<int> out;
  for (const auto& it : items) out.push_back(it.label);
  return out;
}

inline bool replay_active(const StrategyConfig& cfg) {
  switch (cfg.variant) {
    case Variant::mas_replay:
    case Variant::remind: return true;
    case Variant::der:
    case Variant::derpp: return cfg.der_alpha > 0.0 || cfg.effective_beta() > 0.0;
    default: return false;
  }
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Image-space step shared by naive, joint, MAS, MAS+r, DER, DER++, NISPA.
inline double image_step(const StrategyConfig& cfg, Model& model, TrainState& state, Sgd& opt, const Batch& batch,
                         int episode_index, EpisodeLog& log) {
  const std::size_t n = batch.labels.size();
  std::vector<ReplayItem> replay;
  const bool raw_buffer = uses_buffer(cfg.variant) && cfg.variant != Variant::remind;
  if (raw_buffer && replay_active(cfg) && !state.buffer.empty())
    replay = sample_batch(state.buffer, replay_count(cfg, n), state.replay_rng);

  Tape tape;
  const Tensor input = stack_replay(batch.images, replay);
  const Tensor logits = forward(tape, model, input);
  const Tensor current = replay.empty() ? logits : slice_rows(tape, logits, 0, n);
  Tensor loss = cross_entropy(tape, current, head_rows(model, batch.labels));
  if (!replay.empty()) {
    const Tensor rep = slice_rows(tape, logits, n, n + replay.size());
    const auto rows = head_rows(model, replay_labels(replay));
    if (uses_logit_snapshots(cfg.variant)) {
      std::vector<std::vector<float>> snaps;
      for (const auto& it : replay) snaps.push_back(it.logits);
      loss = der_loss(tape, loss, rep, snaps, rows, cfg.der_alpha, cfg.effective_beta());
    } else {
      loss = add(tape, loss, cross_entropy(tape, rep, rows));
    }
  }
  if (uses_mas(cfg.variant) && cfg.mas_lambda > 0.0 && !state.importance.empty())
    loss = add(tape, loss, mas_penalty(tape, model, state, cfg.mas_lambda));
  const double value = loss.item();
  tape.backward(loss);
  opt.step(model.parameters());
  log.replay_rows.push_back(replay.size());

  if (raw_buffer && state.buffer.capacity() > 0) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = batch.samples[i];
      ReplayItem item;
      const auto img = s.dataset->image(s.index);
      item.payload = RawImage{std::vector<std::uint8_t>(img.begin(), img.end())};
      item.label = s.label;
      item.episode = episode_index;
      auto row = logit_row(logits, i);
      if (cfg.selection == Selection::max_entropy) item.entropy = predictive_entropy(row);
      if (uses_logit_snapshots(cfg.variant)) item.logits = std::move(row);
      state.buffer.insert(std::move(item), state.reservoir_rng);
    }
  }
  return value;
}

inline std::vector<float> tensor_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  const std::size_t w = t.numel() / t.dim(0);
  return std::vector<float>(t.ptr() + begin * w, t.ptr() + end * w);
}

/// Latent-space step for REMIND episodes after the first.
inline double latent_step(const StrategyConfig& cfg, Model& model, TrainState& state, Sgd& opt, const Batch& batch,
                          int episode_index, EpisodeLog& log) {
  const int split = cfg.remind.split;
  const auto& cb = *state.codebook;
  const std::size_t n = batch.labels.size();
  const Tensor fresh = extract_features(model, batch.images, split);
  const std::size_t width = fresh.dim(1);

  std::vector<ReplayItem> replay;
  if (!state.buffer.empty()) replay = sample_batch(state.buffer, replay_count(cfg, n), state.replay_rng);
  Tensor feats = fresh;
  if (!replay.empty()) {
    std::vector<float> values(fresh.data().begin(), fresh.data().end());
    for (const auto& it : replay) {
      if (!it.is_latent()) throw ContractError("remind: buffer holds a raw image");
      auto dec = pq_decode(cb, it.payload_bytes());
      values.insert(values.end(), dec.begin(), dec.end());
    }
    feats = Tensor(Shape{n + replay.size(), width}, std::move(values));
  }

  Tape tape;
  const Tensor logits = forward_suffix(tape, model, feats, split);
  const Tensor current = replay.empty() ? logits : slice_rows(tape, logits, 0, n);
  Tensor loss = cross_entropy(tape, current, head_rows(model, batch.labels));
  if (!replay.empty()) {
    const Tensor rep = slice_rows(tape, logits, n, n + replay.size());
    loss = add(tape, loss, cross_entropy(tape, rep, head_rows(model, replay_labels(replay))));
  }
  const double value = loss.item();
  tape.backward(loss);
  opt.step(model.parameters());
  log.replay_rows.push_back(replay.size());

  if (state.buffer.capacity() > 0) {
    for (std::size_t i = 0; i < n; ++i) {
      ReplayItem item;
      item.payload = LatentCode{pq_encode(cb, std::span<const float>(fresh.ptr() + i * width, width))};
      item.label = batch.labels[i];
      item.episode = episode_index;
      if (cfg.selection == Selection::max_entropy) item.entropy = predictive_entropy(logit_row(logits, i));
      state.buffer.insert(std::move(item), state.reservoir_rng);
    }
  }
  return value;
}

/// End of REMIND's first episode: freeze the prefix, fit the codebook on
/// the episode's features and seed the buffer with their codes.
inline void remind_bootstrap(const StrategyConfig& cfg, Model& model, TrainState& state, const Episode& episode,
                             std::size_t batch_size) {
  const int split = cfg.remind.split;
  freeze_prefix(model, split);
  const auto samples = episode.samples(Split::train);
  const auto width = static_cast<int>(feature_width(model.config(), split));
  std::vector<float> feats;
  feats.reserve(samples.size() * static_cast<std::size_t>(width));
  std::vector<std::vector<float>> logits_rows;
  for (std::size_t pos = 0; pos < samples.size(); pos += batch_size) {
    const std::size_t end = std::min(samples.size(), pos + batch_size);
    Batch b = make_batch(std::span<const SampleRef>(samples).subspan(pos, end - pos));
    const Tensor f = extract_features(model, b.images, split);
    feats.insert(feats.end(), f.data().begin(), f.data().end());
    if (cfg.selection == Selection::max_entropy) {
      Tape tape = Tape::inference();
      const Tensor lg = forward_suffix(tape, model, f, split);
      for (std::size_t r = 0; r < lg.dim(0); ++r) logits_rows.push_back(logit_row(lg, r));
    }
  }
  state.codebook = pq_train(feats, samples.size(), width, cfg.remind.subspaces, cfg.remind.centroids,
                            cfg.remind.iterations, state.codebook_seed, &state.codebook_log);
  if (state.buffer.capacity() == 0) return;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    ReplayItem item;
    item.payload = LatentCode{pq_encode(
        *state.codebook, std::span<const float>(feats.data() + i * static_cast<std::size_t>(width),
                                                static_cast<std::size_t>(width)))};
    item.label = samples[i].label;
    item.episode = episode.index;
    if (!logits_rows.empty()) item.entropy = predictive_entropy(logits_rows[i]);
    state.buffer.insert(std::move(item), state.reservoir_rng);
  }
}

}  // namespace detail

struct TrainOptions {
  std::size_t batch_size = 64;
};

/// Trains one episode in place. The episode's classes are registered on the
/// head first; end-of-episode bookkeeping (MAS importance, REMIND codebook,
/// NISPA rewiring) runs afterwards.
inline EpisodeLog train_episode(const StrategyConfig& cfg, Model& model, TrainState& state, const Episode& episode,
                                Sgd& opt, Rng& shuffle_rng, const TrainOptions& opts = {}) {
  if (cfg.variant == Variant::joint || cfg.variant == Variant::naive_independent)
    throw ContractError(std::string("train_episode: variant '") + variant_name(cfg.variant) +
                        "' trains through its own driver");
  if (cfg.variant == Variant::remind && state.episodes_completed >= 1 && !state.codebook)
    throw ContractError("remind: codebook missing after the first episode");
  register_classes(model, episode.global_classes());
  sync_importance_shapes(model, state);
  if (cfg.variant == Variant::nispa) nispa_init_masks(model, state, cfg.nispa);

  EpisodeLog log;
  const auto samples = episode.samples(Split::train);
  const bool latent = cfg.variant == Variant::remind && state.episodes_completed >= 1;
  for (int epoch = 0; epoch < episode.epochs; ++epoch) {
    BatchStream stream(samples, opts.batch_size, shuffle_rng, true);
    std::vector<double> losses;
    while (auto batch = stream.next()) {
      const double loss = latent ? detail::latent_step(cfg, model, state, opt, *batch, episode.index, log)
                                 : detail::image_step(cfg, model, state, opt, *batch, episode.index, log);
      if (!std::isfinite(loss))
        throw Error("training diverged: non-finite loss in episode " + std::to_string(episode.index + 1) +
                    ", epoch " + std::to_string(epoch + 1));
      losses.push_back(loss);
      ++log.steps;
    }
    log.epoch_losses.push_back(detail::mean_of(losses));
  }

  if (uses_mas(cfg.variant)) mas_accumulate_importance(model, samples, state);
  if (cfg.variant == Variant::remind && state.episodes_completed == 0)
    detail::remind_bootstrap(cfg, model, state, episode, opts.batch_size);
  if (cfg.variant == Variant::nispa) nispa_rewire(model, state, unit_activations(model, samples), cfg.nispa);
  ++state.episodes_completed;
  return log;
}

/// One model on the shuffled union of every episode with the full class
/// registry. Epoch count is the largest over the episodes.
inline EpisodeLog joint_train(Model& model, const Scenario& scenario, Sgd& opt, Rng& shuffle_rng,
                              const TrainOptions& opts = {}) {
  if (scenario.episodes.empty()) throw ContractError("joint: scenario has no episodes");
  std::vector<int> all;
  std::vector<SampleRef> samples;
  int epochs = 0;
  for (const auto& ep : scenario.episodes) {
    for (int id : ep.global_classes()) all.push_back(id);
    auto s = ep.samples(Split::train);
    samples.insert(samples.end(), s.begin(), s.end());
    epochs = std::max(epochs, ep.epochs);
  }
  register_classes(model, all);
  StrategyConfig naive;
  TrainState state;
  EpisodeLog log;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    BatchStream stream(samples, opts.batch_size, shuffle_rng, true);
    std::vector<double> losses;
    while (auto batch = stream.next()) {
      const double loss = detail::image_step(naive, model, state, opt, *batch, 0, log);
      if (!std::isfinite(loss)) throw Error("training diverged: non-finite loss, joint epoch " + std::to_string(epoch + 1));
      losses.push_back(loss);
      ++log.steps;
    }
    log.epoch_losses.push_back(detail::mean_of(losses));
  }
  return log;
}

}  // namespace cil
