#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "cil/binary_io.hpp"
#include "cil/rng.hpp"

namespace cil {

struct RawImage {
  std::vector<std::uint8_t> bytes;  // 3×32×32, CHW
};

struct LatentCode {
  std::vector<std::uint8_t> codes;  // one byte per PQ subspace
};

/// A stored rehearsal example.
struct ReplayItem {
  std::variant<RawImage, LatentCode> payload;
  int label = 0;
  /// Logits over global classes [0, logits.size()) at insertion time.
  /// Empty for strategies that rehearse labels only.
  std::vector<float> logits;
  int episode = 0;
  /// Predictive entropy at insertion, used by max-entropy selection.
  float entropy = 0.0f;

  bool is_latent() const { return std::holds_alternative<LatentCode>(payload); }
  const std::vector<std::uint8_t>& payload_bytes() const {
    return is_latent() ? std::get<LatentCode>(payload).codes : std::get<RawImage>(payload).bytes;
  }
};

enum class Selection { reservoir, max_entropy };

inline Selection parse_selection(const std::string& s) {
  if (s == "reservoir") return Selection::reservoir;
  if (s == "max_entropy") return Selection::max_entropy;
  throw ConfigError("unknown buffer selection '" + s + "' (use reservoir or max_entropy)");
}

inline const char* selection_name(Selection s) { return s == Selection::reservoir ? "reservoir" : "max_entropy"; }

/// Softmax entropy (nats) of a logit vector.
inline float predictive_entropy(std::span<const float> logits) {
  if (logits.empty()) return 0.0f;
  double m = -std::numeric_limits<double>::infinity();
  for (float v : logits) m = std::max(m, static_cast<double>(v));
  double z = 0.0;
  for (float v : logits) z += std::exp(v - m);
  double h = 0.0;
  for (float v : logits) {
    const double p = std::exp(v - m) / z;
    if (p > 0.0) h -= p * std::log(p);
  }
  return static_cast<float>(h);
}

/// Fixed-capacity rehearsal store.
class ReservoirBuffer {
 public:
  explicit ReservoirBuffer(std::size_t capacity = 0, Selection selection = Selection::reservoir)
      : capacity_(capacity), selection_(selection) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  /// Total number of items ever offered.
  std::uint64_t offered() const { return offered_; }
  Selection selection() const { return selection_; }

  const std::vector<ReplayItem>& items() const { return items_; }
  const ReplayItem& operator[](std::size_t i) const { return items_[i]; }

  /// Reservoir rule: append while below capacity; afterwards draw
  /// j ∈ [0, N) with N the count offered so far (including this one) and
  /// overwrite slot j when j < capacity. Max-entropy mode instead replaces
  /// the lowest-entropy item when the newcomer's entropy is higher.
  /// Returns the slot written, or -1.
  long insert(ReplayItem item, Rng& rng) {
    ++offered_;
    if (items_.size() < capacity_) {
      items_.push_back(std::move(item));
      return static_cast<long>(items_.size() - 1);
    }
    if (capacity_ == 0) return -1;
    if (selection_ == Selection::reservoir) {
      const auto j = rng.uniform_int(offered_);
      if (j < capacity_) {
        items_[j] = std::move(item);
        return static_cast<long>(j);
      }
      return -1;
    }
    std::size_t lowest = 0;
    for (std::size_t i = 1; i < items_.size(); ++i)
      if (items_[i].entropy < items_[lowest].entropy) lowest = i;
    if (item.entropy > items_[lowest].entropy) {
      items_[lowest] = std::move(item);
      return static_cast<long>(lowest);
    }
    return -1;
  }

  /// Payload bytes currently held (excluding labels and logits).
  std::size_t payload_bytes() const {
    std::size_t total = 0;
    for (const auto& it : items_) total += it.payload_bytes().size();
    return total;
  }

 private:
  std::size_t capacity_;
  Selection selection_;
  std::vector<ReplayItem> items_;
  std::uint64_t offered_ = 0;
};

inline long reservoir_insert(ReservoirBuffer& buffer, ReplayItem item, Rng& rng) {
  return buffer.insert(std::move(item), rng);
}

/// Uniform draws with replacement; returns slot indices.
inline std::vector<std::size_t> sample_indices(const ReservoirBuffer& buffer, std::size_t count, Rng& rng) {
  if (count == 0) return {};
  if (buffer.empty()) throw ContractError("sample_batch: replay buffer is empty");
  std::vector<std::size_t> out(count);
  for (auto& i : out) i = rng.uniform_int(buffer.size());
  return out;
}

inline std::vector<ReplayItem> sample_batch(const ReservoirBuffer& buffer, std::size_t count, Rng& rng) {
  std::vector<ReplayItem> out;
  for (auto i : sample_indices(buffer, count, rng)) out.push_back(buffer[i]);
  return out;
}

inline std::string base64_encode(std::span<const std::uint8_t> data) {
  static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((data.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 3 <= data.size(); i += 3) {
    const std::uint32_t v = (data[i] << 16) | (data[i + 1] << 8) | data[i + 2];
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (const std::size_t rest = data.size() - i; rest) {
    std::uint32_t v = data[i] << 16;
    if (rest == 2) v |= data[i + 1] << 8;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += rest == 2 ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

/// Debug dump: one JSON object per line, payload base64-encoded.
inline std::string buffer_dump_jsonl(const ReservoirBuffer& buffer) {
  std::string out;
  for (const auto& it : buffer.items()) {
    nlohmann::json j = {{"kind", it.is_latent() ? "latent" : "raw"},
                        {"label", it.label},
                        {"episode", it.episode},
                        {"entropy", it.entropy},
                        {"logits", it.logits},
                        {"payload", base64_encode(it.payload_bytes())}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline void dump_buffer(const ReservoirBuffer& buffer, const std::filesystem::path& path) {
  io::write_text(path, buffer_dump_jsonl(buffer));
}

}  // namespace cil
