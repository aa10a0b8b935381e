#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cil/backbone.hpp"
#include "cil/binary_io.hpp"
#include "cil/scenario.hpp"

namespace cil {

inline constexpr int kReportSchemaVersion = 1;

/// Lower-triangular accuracy matrix. Indices are 0-based here; files and
/// printed output number episodes from 1.
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(std::size_t episodes = 0)
      : acc_(episodes), correct_(episodes), counts_(episodes) {
    for (std::size_t t = 0; t < episodes; ++t) {
      acc_[t].assign(t + 1, std::nan(""));
      correct_[t].assign(t + 1, 0);
      counts_[t].assign(t + 1, 0);
    }
  }

  std::size_t episodes() const { return acc_.size(); }

  void set(std::size_t t, std::size_t i, double percent, std::size_t correct, std::size_t n) {
    check(t, i);
    if (!(percent >= 0.0 && percent <= 100.0)) throw ContractError("accuracy must lie in [0, 100]");
    acc_[t][i] = percent;
    correct_[t][i] = correct;
    counts_[t][i] = n;
  }
  void set(std::size_t t, std::size_t i, double percent) { set(t, i, percent, 0, 0); }

  double at(std::size_t t, std::size_t i) const {
    check(t, i);
    return acc_[t][i];
  }
  std::size_t count(std::size_t t, std::size_t i) const {
    check(t, i);
    return counts_[t][i];
  }
  std::size_t correct(std::size_t t, std::size_t i) const {
    check(t, i);
    return correct_[t][i];
  }

  bool row_complete(std::size_t t) const {
    if (t >= episodes()) return false;
    for (double v : acc_[t])
      if (std::isnan(v)) return false;
    return true;
  }

 private:
  void check(std::size_t t, std::size_t i) const {
    if (t >= episodes() || i > t) {
      throw ContractError("accuracy cell (" + std::to_string(t + 1) + ", " + std::to_string(i + 1) +
                          ") is outside the lower triangle of a " + std::to_string(episodes()) + "-episode matrix");
    }
  }

  std::vector<std::vector<double>> acc_;
  std::vector<std::vector<std::size_t>> correct_;
  std::vector<std::vector<std::size_t>> counts_;
};

/// Unweighted mean of row t (0-based): A = mean_{i≤t} R[t][i].
inline double average_accuracy(const AccuracyMatrix& r, std::size_t t) {
  if (!r.row_complete(t)) throw ContractError("average_accuracy: row " + std::to_string(t + 1) + " incomplete");
  double acc = 0.0;
  for (std::size_t i = 0; i <= t; ++i) acc += r.at(t, i);
  return acc / static_cast<double>(t + 1);
}

/// Sample-weighted accuracy over the episodes of row t.
inline double pooled_accuracy(const AccuracyMatrix& r, std::size_t t) {
  std::size_t correct = 0, n = 0;
  for (std::size_t i = 0; i <= t; ++i) {
    correct += r.correct(t, i);
    n += r.count(t, i);
  }
  return n ? 100.0 * static_cast<double>(correct) / static_cast<double>(n) : 0.0;
}

/// BWT = 1/(T−1) Σ_{i<T} (R[T][i] − R[i][i]); nullopt for a single episode.
inline std::optional<double> backward_transfer(const AccuracyMatrix& r) {
  const std::size_t t = r.episodes();
  if (t < 2) return std::nullopt;
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < t; ++i) acc += r.at(t - 1, i) - r.at(i, i);
  return acc / static_cast<double>(t - 1);
}

struct EpisodeScore {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t n = 0;
};

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax_row(std::span<const float> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

/// Argmax over every head row, mapped to global ids.
inline std::vector<int> predict(const Model& model, const Tensor& images) {
  Tape tape = Tape::inference();
  const Tensor logits = forward(tape, model, images, Mode::eval);
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t r = 0; r < n; ++r) out[r] = model.class_ids()[argmax_row(logits.data().subspan(r * c, c))];
  return out;
}

/// Accuracy on one episode's test split, no task label given.
inline EpisodeScore evaluate_episode(const Model& model, const Episode& episode, std::size_t batch_size = 256) {
  if (!episode.test) throw ContractError("episode " + episode.name + " has no test split");
  const auto samples = episode.samples(Split::test);
  if (samples.empty()) throw ContractError("episode " + episode.name + " has an empty test split");
  EpisodeScore score;
  for (std::size_t pos = 0; pos < samples.size(); pos += batch_size) {
    const std::size_t end = std::min(samples.size(), pos + batch_size);
    Batch b = make_batch(std::span<const SampleRef>(samples).subspan(pos, end - pos));
    const auto pred = predict(model, b.images);
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (pred[i] == b.labels[i]) ++score.correct;
  }
  score.n = samples.size();
  score.accuracy = 100.0 * static_cast<double>(score.correct) / static_cast<double>(score.n);
  return score;
}

/// Row t (0-based): scores for episodes 0..t.
inline std::vector<EpisodeScore> evaluate(const Model& model, const Scenario& scenario, std::size_t t) {
  if (t >= scenario.episodes.size()) throw ContractError("evaluate: episode index out of range");
  std::vector<EpisodeScore> row;
  for (std::size_t i = 0; i <= t; ++i) row.push_back(evaluate_episode(model, scenario.episodes[i]));
  return row;
}

struct RunReport {
  std::string variant;
  std::uint64_t seed = 0;
  nlohmann::json scenario_echo = nlohmann::json::object();
  nlohmann::json strategy_echo = nlohmann::json::object();
  AccuracyMatrix matrix;
  double wall_clock_seconds = 0.0;
  nlohmann::json buffer_stats = nlohmann::json::object();
  nlohmann::json codebook_stats = nlohmann::json::object();
  std::vector<std::string> notes;
  std::vector<std::vector<double>> epoch_losses;  // per episode, per epoch
};

inline std::string format_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

/// Shortest decimal text that parses back to exactly `v`.
inline std::string format_exact(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

/// `episode,i,accuracy,n`, 1-based indices; accuracy round-trips exactly.
inline std::string matrix_csv(const AccuracyMatrix& r) {
  std::string out = "episode,i,accuracy,n\n";
  for (std::size_t t = 0; t < r.episodes(); ++t)
    for (std::size_t i = 0; i <= t; ++i)
      out += std::to_string(t + 1) + "," + std::to_string(i + 1) + "," + format_exact(r.at(t, i)) + "," +
             std::to_string(r.count(t, i)) + "\n";
  return out;
}

inline nlohmann::json report_to_json(const RunReport& rep) {
  const auto& r = rep.matrix;
  nlohmann::json matrix = nlohmann::json::array(), counts = nlohmann::json::array(),
                 correct = nlohmann::json::array(), avg = nlohmann::json::array(), pooled = nlohmann::json::array();
  for (std::size_t t = 0; t < r.episodes(); ++t) {
    nlohmann::json row = nlohmann::json::array(), crow = nlohmann::json::array(), krow = nlohmann::json::array();
    for (std::size_t i = 0; i <= t; ++i) {
      row.push_back(r.at(t, i));
      crow.push_back(r.count(t, i));
      krow.push_back(r.correct(t, i));
    }
    matrix.push_back(row);
    counts.push_back(crow);
    correct.push_back(krow);
    avg.push_back(average_accuracy(r, t));
    pooled.push_back(pooled_accuracy(r, t));
  }
  const auto bwt = backward_transfer(r);
  return {{"schema_version", kReportSchemaVersion},
          {"variant", rep.variant},
          {"seed", rep.seed},
          {"scenario", rep.scenario_echo},
          {"strategy", rep.strategy_echo},
          {"accuracy_matrix", matrix},
          {"correct", correct},
          {"counts", counts},
          {"average_accuracy", avg},
          {"pooled_accuracy", pooled},
          {"backward_transfer", bwt ? nlohmann::json(*bwt) : nlohmann::json(nullptr)},
          {"wall_clock_seconds", rep.wall_clock_seconds},
          {"buffer", rep.buffer_stats},
          {"codebook", rep.codebook_stats},
          {"epoch_losses", rep.epoch_losses},
          {"notes", rep.notes}};
}

inline RunReport report_from_json(const nlohmann::json& j) {
  const int version = j.value("schema_version", -1);
  if (version != kReportSchemaVersion) {
    throw ConfigError("report schema version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kReportSchemaVersion) + ")");
  }
  RunReport rep;
  rep.variant = j.at("variant").get<std::string>();
  rep.seed = j.at("seed").get<std::uint64_t>();
  rep.scenario_echo = j.at("scenario");
  rep.strategy_echo = j.at("strategy");
  const auto& m = j.at("accuracy_matrix");
  const auto& counts = j.at("counts");
  const auto& correct = j.at("correct");
  rep.matrix = AccuracyMatrix(m.size());
  for (std::size_t t = 0; t < m.size(); ++t)
    for (std::size_t i = 0; i <= t; ++i)
      rep.matrix.set(t, i, m[t][i].get<double>(), correct[t][i].get<std::size_t>(), counts[t][i].get<std::size_t>());
  rep.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
  rep.buffer_stats = j.value("buffer", nlohmann::json::object());
  rep.codebook_stats = j.value("codebook", nlohmann::json::object());
  rep.notes = j.value("notes", std::vector<std::string>{});
  rep.epoch_losses = j.value("epoch_losses", std::vector<std::vector<double>>{});
  return rep;
}

inline RunReport read_report(const std::filesystem::path& dir) {
  const auto path = std::filesystem::is_directory(dir) ? dir / "report.json" : dir;
  const auto bytes = io::read_file(path);
  try {
    return report_from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("report '" + path.string() + "': " + e.what());
  }
}

/// Average-accuracy curves, one polyline per report.
inline std::string render_curves_svg(const std::vector<RunReport>& reports) {
  constexpr double kW = 640, kH = 400, kLeft = 60, kRight = 180, kTop = 30, kBottom = 50;
  static const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  std::size_t max_t = 1;
  for (const auto& r : reports) max_t = std::max(max_t, r.matrix.episodes());
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  auto x_of = [&](std::size_t t) {
    return kLeft + (max_t > 1 ? pw * static_cast<double>(t) / static_cast<double>(max_t - 1) : pw / 2);
  };
  auto y_of = [&](double acc) { return kTop + ph * (1.0 - acc / 100.0); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 "
      << kW << " " << kH << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << kLeft << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"14\">"
      << "Average accuracy on seen classes</text>\n";
  for (int tick = 0; tick <= 100; tick += 20) {
    const std::string y = format_fixed(y_of(tick), 1);
    svg << "<line x1=\"" << kLeft << "\" y1=\"" << y << "\" x2=\"" << kLeft + pw << "\" y2=\"" << y
        << "\" stroke=\"#ddd\"/>\n";
    svg << "<text x=\"" << kLeft - 8 << "\" y=\"" << y << "\" font-family=\"sans-serif\" font-size=\"11\" "
        << "text-anchor=\"end\">" << tick << "</text>\n";
  }
  for (std::size_t t = 0; t < max_t; ++t) {
    svg << "<text x=\"" << format_fixed(x_of(t), 1) << "\" y=\"" << kTop + ph + 18
        << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">" << t + 1 << "</text>\n";
  }
  svg << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kH - 10
      << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">episode</text>\n";
  for (std::size_t k = 0; k < reports.size(); ++k) {
    const auto& r = reports[k];
    const char* color = kColors[k % 10];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t t = 0; t < r.matrix.episodes(); ++t) {
      if (t) svg << " ";
      svg << format_fixed(x_of(t), 1) << "," << format_fixed(y_of(average_accuracy(r.matrix, t)), 1);
    }
    svg << "\"/>\n";
    const double ly = kTop + 16.0 * static_cast<double>(k);
    svg << "<text x=\"" << kLeft + pw + 12 << "\" y=\"" << format_fixed(ly + 4, 1) << "\" font-family=\"sans-serif\" "
        << "font-size=\"11\" fill=\"" << color << "\">" << r.variant << " (seed " << r.seed << ")</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

/// Writes report.json, matrix.csv and curves.svg into `out_dir`.
inline void emit_report(const RunReport& report, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir))
    throw IoError("cannot create report directory '" + out_dir.string() + "'");
  io::write_text(out_dir / "report.json", report_to_json(report).dump(2) + "\n");
  io::write_text(out_dir / "matrix.csv", matrix_csv(report.matrix));
  io::write_text(out_dir / "curves.svg", render_curves_svg({report}));
}

}  // namespace cil
