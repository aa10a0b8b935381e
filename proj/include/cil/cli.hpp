#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cil/dataset.hpp"
#include "cil/metrics.hpp"
#include "cil/runner.hpp"

namespace cil::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

namespace fs = std::filesystem;

/// Worker count for `jobs` runs: CL_NUM_WORKERS if set, else the core count.
inline std::size_t worker_count(std::size_t jobs) {
  std::size_t cap = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("CL_NUM_WORKERS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError("CL_NUM_WORKERS must be a positive integer");
    cap = static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::min(cap, jobs));
}

inline std::string run_dir_name(const std::string& variant, std::uint64_t seed) {
  return variant + "-seed" + std::to_string(seed);
}

struct RunArgs {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string out = "runs";
  std::string strategy;
  bool dump_buffer = false;
  bool quiet = false;
};

inline int cmd_run(const RunArgs& args, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_run_config(args.config);
  if (!args.strategy.empty()) cfg.strategy.variant = parse_variant(args.strategy);
  std::vector<std::uint64_t> seeds = args.seeds;
  if (seeds.empty()) seeds.push_back(cfg.scenario.seed);
  const Scenario scenario = build_scenario(cfg.scenario);
  const std::string variant = variant_name(cfg.strategy.variant);
  fs::create_directories(args.out);

  struct Status {
    std::uint64_t seed = 0;
    std::string dir;
    std::string status = "pending";
    std::string error;
    double final_average = 0.0;
  };
  std::vector<Status> status(seeds.size());
  std::mutex log_mu;
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t k = next++; k < seeds.size(); k = next++) {
      auto& st = status[k];
      st.seed = seeds[k];
      st.dir = (fs::path(args.out) / run_dir_name(variant, seeds[k])).string();
      try {
        RunHooks hooks;
        if (!args.quiet) {
          hooks.progress = [&, seed = seeds[k]](const std::string& msg) {
            std::lock_guard lock(log_mu);
            err << "[" << variant << " seed " << seed << "] " << msg << "\n";
          };
        }
        RunResult res = run_scenario(cfg, scenario, seeds[k], hooks);
        emit_report(res.report, st.dir);
        auto echo = cfg.echo();
        echo["seed"] = seeds[k];
        io::write_text(fs::path(st.dir) / "config.json", echo.dump(2) + "\n");
        if (args.dump_buffer) dump_buffer(res.state.buffer, fs::path(st.dir) / "buffer.jsonl");
        st.final_average = average_accuracy(res.report.matrix, res.report.matrix.episodes() - 1);
        st.status = "ok";
      } catch (const std::exception& e) {
        st.status = "failed";
        st.error = e.what();
      }
    }
  };
  const std::size_t workers = worker_count(seeds.size());
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  nlohmann::json runs = nlohmann::json::array();
  bool failed = false;
  for (const auto& st : status) {
    nlohmann::json r = {{"seed", st.seed}, {"dir", st.dir}, {"status", st.status}};
    if (!st.error.empty()) r["error"] = st.error;
    runs.push_back(r);
    if (st.status == "ok") {
      out << st.dir << "  final A = " << format_fixed(st.final_average, 1) << "\n";
    } else {
      failed = true;
      err << "error: seed " << st.seed << ": " << st.error << "\n";
    }
  }
  const nlohmann::json manifest = {{"config_path", args.config},
                                   {"config", cfg.echo()},
                                   {"seeds", seeds},
                                   {"out", args.out},
                                   {"runs", runs}};
  io::write_text(fs::path(args.out) / "manifest.json", manifest.dump(2) + "\n");
  return failed ? kExitRuntime : kExitOk;
}

struct SynthArgs {
  int classes = 4;
  int per_class = 500;
  int test_per_class = 200;
  std::string difficulty = "easy";
  std::uint64_t seed = 0;
  std::string out = ".";
  std::string name = "synth";
};

inline int cmd_synth(const SynthArgs& args, std::ostream& out) {
  SynthSpec spec;
  spec.classes = args.classes;
  spec.samples_per_class = args.per_class;
  spec.test_per_class = args.test_per_class;
  spec.separation = parse_difficulty(args.difficulty);
  spec.seed = args.seed;
  spec.validate();
  const auto [train, test] = synth_generate(spec);
  fs::create_directories(args.out);
  const fs::path train_path = fs::path(args.out) / (args.name + "_train.clds");
  const fs::path test_path = fs::path(args.out) / (args.name + "_test.clds");
  save_dataset(train, train_path);
  save_dataset(test, test_path);
  const nlohmann::json echo = {{"classes", spec.classes},
                               {"samples_per_class", spec.samples_per_class},
                               {"test_per_class", spec.test_per_class},
                               {"difficulty", args.difficulty},
                               {"separation", spec.separation},
                               {"seed", spec.seed},
                               {"train", train_path.filename().string()},
                               {"test", test_path.filename().string()},
                               {"train_checksum", checksum(encode_dataset(train))},
                               {"test_checksum", checksum(encode_dataset(test))}};
  io::write_text(fs::path(args.out) / (args.name + ".json"), echo.dump(2) + "\n");
  out << echo.dump(2) << "\n";
  return kExitOk;
}

/// Report directories under each argument: the directory itself if it
/// holds report.json, else its immediate subdirectories that do.
inline std::vector<fs::path> collect_reports(const std::vector<std::string>& roots) {
  std::vector<fs::path> found;
  for (const auto& r : roots) {
    const fs::path root(r);
    if (fs::is_regular_file(root / "report.json")) {
      found.push_back(root);
      continue;
    }
    if (!fs::is_directory(root)) throw ConfigError("report directory '" + r + "' not found");
    std::vector<fs::path> sub;
    for (const auto& e : fs::directory_iterator(root))
      if (e.is_directory() && fs::is_regular_file(e.path() / "report.json")) sub.push_back(e.path());
    if (sub.empty()) throw ConfigError("no report.json under '" + r + "'");
    std::sort(sub.begin(), sub.end());
    found.insert(found.end(), sub.begin(), sub.end());
  }
  return found;
}

inline std::string summary_csv(const std::vector<RunReport>& reports) {
  std::string csv = "strategy,seed,final_average_accuracy,backward_transfer\n";
  for (const auto& r : reports) {
    const std::size_t t = r.matrix.episodes();
    const auto bwt = backward_transfer(r.matrix);
    csv += r.variant + "," + std::to_string(r.seed) + "," + format_fixed(average_accuracy(r.matrix, t - 1), 2) + "," +
           (bwt ? format_fixed(*bwt, 2) : std::string("n/a")) + "\n";
  }
  return csv;
}

inline int cmd_compare(const std::vector<std::string>& dirs, const std::string& out_dir, std::ostream& out) {
  if (dirs.empty()) throw ConfigError("compare: at least one report directory is required");
  std::vector<RunReport> reports;
  for (const auto& d : collect_reports(dirs)) reports.push_back(read_report(d));
  fs::create_directories(out_dir);
  const std::string csv = summary_csv(reports);
  io::write_text(fs::path(out_dir) / "summary.csv", csv);
  io::write_text(fs::path(out_dir) / "curves.svg", render_curves_svg(reports));
  out << csv;
  return kExitOk;
}

inline void describe_dataset(const fs::path& path, std::ostream& out) {
  const DatasetFile ds = load_dataset(path);
  out << path.string() << ": " << ds.size() << " images, " << ds.class_count() << " classes, split "
      << split_name(ds.split) << ", checksum " << checksum(encode_dataset(ds)) << "\n";
  const auto hist = ds.histogram();
  for (std::size_t c = 0; c < hist.size(); ++c) out << "  " << c << " " << ds.class_names[c] << ": " << hist[c] << "\n";
}

inline void describe_scenario(const fs::path& config, std::ostream& out) {
  const RunConfig cfg = load_run_config(config);
  const Scenario sc = build_scenario(cfg.scenario);
  out << "scenario " << sc.name << ": " << sc.episodes.size() << " episodes, " << sc.class_count()
      << " global classes, strategy " << variant_name(cfg.strategy.variant) << "\n";
  for (const auto& ep : sc.episodes) {
    out << "  episode " << ep.name << " (" << ep.epochs << " epochs, " << ep.samples(Split::train).size()
        << " train / " << ep.samples(Split::test).size() << " test):";
    for (int c : ep.local_classes) out << " " << c << "->" << ep.local_to_global.at(c);
    out << "\n";
  }
  for (int g = 0; g < sc.class_count(); ++g) out << "  class " << g << ": " << sc.class_names[static_cast<std::size_t>(g)] << "\n";
}

/// Full command-line entry point; returns the process exit code.
inline int run_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Class-incremental continual-learning engine"};
  app.require_subcommand(1);

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "train a scenario and write reports");
  run_cmd->add_option("--config", run.config, "scenario config JSON")->required();
  run_cmd->add_option("--seed", run.seeds, "seed list, comma separated")->delimiter(',');
  run_cmd->add_option("--out", run.out, "output directory")->capture_default_str();
  run_cmd->add_option("--strategy", run.strategy, "override strategy.variant");
  run_cmd->add_flag("--dump-buffer", run.dump_buffer, "write buffer.jsonl per run");
  run_cmd->add_flag("--quiet", run.quiet, "no progress on stderr");

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic train/test dataset pair");
  synth_cmd->add_option("--classes", synth.classes, "class count K")->capture_default_str();
  synth_cmd->add_option("--per-class", synth.per_class, "training images per class")->capture_default_str();
  synth_cmd->add_option("--test-per-class", synth.test_per_class, "test images per class")->capture_default_str();
  synth_cmd->add_option("--difficulty", synth.difficulty, "easy, medium, hard or a separation value")
      ->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed, "generator seed")->capture_default_str();
  synth_cmd->add_option("--out", synth.out, "output directory")->capture_default_str();
  synth_cmd->add_option("--name", synth.name, "file name prefix")->capture_default_str();

  std::vector<std::string> report_dirs;
  std::string compare_out = "compare";
  auto* compare_cmd = app.add_subcommand("compare", "merge reports into summary.csv and curves.svg");
  compare_cmd->add_option("--reports", report_dirs, "report directories");
  compare_cmd->add_option("--out", compare_out, "output directory")->capture_default_str();

  std::vector<std::string> inspect_datasets;
  std::string inspect_config;
  auto* inspect_cmd = app.add_subcommand("inspect", "summarise datasets or a scenario config");
  inspect_cmd->add_option("--dataset", inspect_datasets, "CLDS1 file(s)");
  inspect_cmd->add_option("--config", inspect_config, "scenario config JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, e2;
    const int code = app.exit(e, o, e2);
    out << o.str();
    err << e2.str();
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run_cmd) return cmd_run(run, out, err);
    if (*synth_cmd) return cmd_synth(synth, out);
    if (*compare_cmd) return cmd_compare(report_dirs, compare_out, out);
    if (*inspect_cmd) {
      if (inspect_datasets.empty() && inspect_config.empty())
        throw ConfigError("inspect: give --dataset or --config");
      for (const auto& d : inspect_datasets) describe_dataset(d, out);
      if (!inspect_config.empty()) describe_scenario(inspect_config, out);
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace cil::cli
