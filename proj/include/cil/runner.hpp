#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cil/backbone.hpp"
#include "cil/metrics.hpp"
#include "cil/optim.hpp"
#include "cil/scenario.hpp"
#include "cil/strategies.hpp"

namespace cil {

/// Everything one run needs: scenario, strategy, optimizer and backbone.
struct RunConfig {
  ScenarioConfig scenario;
  StrategyConfig strategy;
  SgdConfig optimizer;
  std::size_t batch_size = 64;
  BackboneConfig backbone;

  /// Resolved configuration with every default spelled out.
  nlohmann::json echo() const {
    return {{"scenario", scenario_config_to_json(scenario)},
            {"strategy", strategy.to_json()},
            {"optimizer",
             {{"learning_rate", optimizer.learning_rate},
              {"momentum", optimizer.momentum},
              {"weight_decay", optimizer.weight_decay},
              {"batch_size", batch_size}}},
            {"backbone", backbone.to_json()}};
  }
};

namespace detail {

inline BackboneConfig parse_backbone(const nlohmann::json& j) {
  BackboneConfig b;
  if (j.contains("channels")) b.channels = j.at("channels").get<std::array<int, kStageCount>>();
  if (j.contains("pool_after")) b.pool_after = j.at("pool_after").get<std::array<bool, kStageCount>>();
  b.kernel = j.value("kernel", b.kernel);
  b.stride = j.value("stride", b.stride);
  b.padding = j.value("padding", b.padding);
  b.head_init_scale = j.value("head_init_scale", b.head_init_scale);
  b.validate();
  return b;
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  c.scenario = parse_scenario_config(j, base_dir);
  c.strategy = parse_strategy_config(j.value("strategy", nlohmann::json()));
  try {
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      c.optimizer.learning_rate = o.value("learning_rate", o.value("lr", c.optimizer.learning_rate));
      c.optimizer.momentum = o.value("momentum", c.optimizer.momentum);
      c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
      const auto batch = o.value("batch_size", static_cast<long long>(c.batch_size));
      if (batch < 1) throw ConfigError("optimizer: batch_size must be at least 1");
      c.batch_size = static_cast<std::size_t>(batch);
    }
    if (j.contains("backbone")) c.backbone = detail::parse_backbone(j.at("backbone"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.optimizer.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw ConfigError("config file '" + path.string() + "' not found");
  const auto bytes = io::read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(j, path.parent_path());
}

struct RunHooks {
  /// Called after each episode (0-based) with the model that will be
  /// evaluated for that row.
  std::function<void(std::size_t, const Model&)> after_episode;
  std::function<void(const std::string&)> progress;
};

struct RunResult {
  RunReport report;
  /// One model, or one per episode for naive_independent.
  std::vector<Model> models;
  TrainState state;
  std::vector<EpisodeLog> logs;
};

namespace detail {

inline void fill_row(AccuracyMatrix& m, std::size_t t, const std::vector<EpisodeScore>& row) {
  for (std::size_t i = 0; i < row.size(); ++i) m.set(t, i, row[i].accuracy, row[i].correct, row[i].n);
}

inline void note_progress(const RunHooks& hooks, const std::string& text) {
  if (hooks.progress) hooks.progress(text);
}

}  // namespace detail

/// Trains and evaluates one (config, seed) pair. The seed is split into
/// named streams: "init" (model weights, indexed by episode for
/// independent models), "shuffle" (per-episode batch order), and the
/// strategy streams of make_train_state.
inline RunResult run_scenario(const RunConfig& cfg, const Scenario& scenario, std::uint64_t seed,
                              const RunHooks& hooks = {}) {
  const auto start = std::chrono::steady_clock::now();
  const std::size_t episodes = scenario.episodes.size();
  if (episodes == 0) throw ConfigError("scenario has no episodes");
  const Variant variant = cfg.strategy.variant;
  const TrainOptions opts{cfg.batch_size};

  RunResult res;
  res.state = make_train_state(cfg.strategy, seed);
  auto& rep = res.report;
  rep.variant = variant_name(variant);
  rep.seed = seed;
  rep.scenario_echo = scenario_config_to_json(cfg.scenario);
  rep.scenario_echo["seed"] = seed;
  rep.scenario_echo["class_names"] = scenario.class_names;
  const auto echo = cfg.echo();
  rep.strategy_echo = {{"strategy", echo.at("strategy")},
                       {"optimizer", echo.at("optimizer")},
                       {"backbone", echo.at("backbone")}};
  rep.matrix = AccuracyMatrix(episodes);

  auto shuffle_for = [&](std::size_t e) { return Rng(derive_seed(seed, "shuffle", e)); };
  auto record_log = [&](EpisodeLog log) {
    rep.epoch_losses.push_back(log.epoch_losses);
    res.logs.push_back(std::move(log));
  };

  if (variant == Variant::naive_independent) {
    rep.notes.push_back("naive_independent: episode i is scored with model i (task identity given at test time)");
    for (std::size_t e = 0; e < episodes; ++e) {
      Model m = build_backbone(cfg.backbone, derive_seed(seed, "init", e));
      Sgd opt(cfg.optimizer);
      Rng shuffle = shuffle_for(e);
      StrategyConfig naive = cfg.strategy;
      naive.variant = Variant::naive_sequential;
      TrainState st = make_train_state(naive, seed);
      record_log(train_episode(naive, m, st, scenario.episodes[e], opt, shuffle, opts));
      if (hooks.after_episode) hooks.after_episode(e, m);
      res.models.push_back(std::move(m));
      for (std::size_t i = 0; i <= e; ++i) {
        const auto s = evaluate_episode(res.models[i], scenario.episodes[i]);
        rep.matrix.set(e, i, s.accuracy, s.correct, s.n);
      }
      detail::note_progress(hooks, "episode " + std::to_string(e + 1) + " done");
    }
  } else if (variant == Variant::joint) {
    rep.notes.push_back("joint: one model trained on the union of all episodes; every row scores that final model");
    Model m = build_backbone(cfg.backbone, derive_seed(seed, "init", 0));
    Sgd opt(cfg.optimizer);
    Rng shuffle = shuffle_for(0);
    record_log(joint_train(m, scenario, opt, shuffle, opts));
    for (std::size_t t = 0; t < episodes; ++t) {
      if (hooks.after_episode) hooks.after_episode(t, m);
      detail::fill_row(rep.matrix, t, evaluate(m, scenario, t));
    }
    res.models.push_back(std::move(m));
  } else {
    if (variant == Variant::nispa)
      rep.notes.push_back(
          "nispa: simplified scheme (activation-quantile unit freezing plus magnitude-based, count-preserving "
          "connection rewiring); the original phase schedule is not reproduced");
    Model m = build_backbone(cfg.backbone, derive_seed(seed, "init", 0));
    Sgd opt(cfg.optimizer);
    for (std::size_t t = 0; t < episodes; ++t) {
      Rng shuffle = shuffle_for(t);
      record_log(train_episode(cfg.strategy, m, res.state, scenario.episodes[t], opt, shuffle, opts));
      if (hooks.after_episode) hooks.after_episode(t, m);
      detail::fill_row(rep.matrix, t, evaluate(m, scenario, t));
      detail::note_progress(hooks, "episode " + std::to_string(t + 1) + " done, A=" +
                                       format_fixed(average_accuracy(rep.matrix, t), 1));
    }
    res.models.push_back(std::move(m));
  }

  const auto& buf = res.state.buffer;
  rep.buffer_stats = {{"capacity", buf.capacity()},
                      {"size", buf.size()},
                      {"offered", buf.offered()},
                      {"payload_bytes", buf.payload_bytes()},
                      {"selection", selection_name(buf.selection())}};
  if (res.state.codebook) {
    const auto& cb = *res.state.codebook;
    rep.codebook_stats = {{"subspaces", cb.subspaces},
                          {"centroids", cb.centroids},
                          {"dim", cb.dim},
                          {"table_bytes", cb.table_bytes()},
                          {"train_sse", res.state.codebook_log.final_sse}};
  }
  rep.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

}  // namespace cil
