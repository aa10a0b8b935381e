#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cil/binary_io.hpp"
#include "cil/rng.hpp"

namespace cil {

inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kImageBytes = kImageChannels * kImageSide * kImageSide;

enum class Split : std::uint8_t { train = 0, test = 1 };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "test"; }

/// In-memory CLDS1 dataset: n images of 3×32×32 bytes (CHW), one u16 local
/// class id per image, and a class-name table.
struct DatasetFile {
  std::vector<std::uint8_t> images;
  std::vector<std::uint16_t> labels;
  std::vector<std::string> class_names;
  Split split = Split::train;

  std::size_t size() const { return labels.size(); }
  std::size_t class_count() const { return class_names.size(); }

  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span<const std::uint8_t>(images).subspan(i * kImageBytes, kImageBytes);
  }

  std::vector<std::size_t> histogram() const {
    std::vector<std::size_t> h(class_names.size(), 0);
    for (auto l : labels)
      if (l < h.size()) ++h[l];
    return h;
  }

  void validate() const {
    if (images.size() != labels.size() * kImageBytes)
      throw FormatError("image payload does not match the label count");
    if (class_names.size() > 0xffff) throw FormatError("too many classes for CLDS1");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= class_names.size()) {
        throw LabelRangeError("label " + std::to_string(labels[i]) + " of image " + std::to_string(i) +
                              " is out of range for " + std::to_string(class_names.size()) + " classes");
      }
    }
  }
};

// CLDS1 layout, little-endian:
//   "CLDS1" | u32 n | n·3072 image bytes | n × u16 label |
//   u16 class count | per class (u16 byte length, UTF-8 name) | u8 split (0 train, 1 test)

inline std::vector<std::uint8_t> encode_dataset(const DatasetFile& ds) {
  ds.validate();
  io::Writer w;
  w.text("CLDS1");
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.bytes(ds.images);
  for (auto l : ds.labels) w.u16(l);
  w.u16(static_cast<std::uint16_t>(ds.class_names.size()));
  for (const auto& name : ds.class_names) {
    if (name.size() > 0xffff) throw FormatError("class name too long");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.text(name);
  }
  w.u8(static_cast<std::uint8_t>(ds.split));
  return std::move(w.buffer());
}

inline DatasetFile decode_dataset(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 5 || std::string(bytes.begin(), bytes.begin() + 5) != "CLDS1")
    throw BadMagicError("bad magic: not a CLDS1 file");
  io::Reader r(bytes.subspan(5));
  DatasetFile ds;
  const std::uint32_t n = r.u32("image count");
  r.need(static_cast<std::size_t>(n) * (kImageBytes + 2), "image and label payload");
  auto img = r.bytes(static_cast<std::size_t>(n) * kImageBytes, "images");
  ds.images.assign(img.begin(), img.end());
  ds.labels.resize(n);
  for (auto& l : ds.labels) l = r.u16("labels");
  const std::uint16_t classes = r.u16("class count");
  ds.class_names.reserve(classes);
  for (std::uint16_t c = 0; c < classes; ++c) {
    const std::uint16_t len = r.u16("class name length");
    auto name = r.bytes(len, "class name");
    ds.class_names.emplace_back(name.begin(), name.end());
  }
  const std::uint8_t tag = r.u8("split tag");
  if (tag > 1) throw FormatError("unknown split tag " + std::to_string(tag));
  ds.split = static_cast<Split>(tag);
  if (r.remaining() != 0) {
    throw FormatError("file is " + std::to_string(r.remaining()) + " bytes longer than its header declares");
  }
  ds.validate();
  return ds;
}

inline DatasetFile load_dataset(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("dataset file '" + path.string() + "' does not exist");
  return decode_dataset(io::read_file(path));
}

inline void save_dataset(const DatasetFile& ds, const std::filesystem::path& path) {
  io::write_file(path, encode_dataset(ds));
}

/// Procedural stand-in data. Each class has a colour offset, an oriented
/// sinusoidal texture and a bright blob; samples add phase/position jitter
/// and Gaussian pixel noise. `separation` scales the class signal against
/// the fixed noise level.
struct SynthSpec {
  int classes = 4;
  int samples_per_class = 500;
  int test_per_class = 200;
  double separation = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (classes < 2) throw ConfigError("synth: class count must be at least 2");
    if (classes > 0xffff) throw ConfigError("synth: too many classes");
    if (samples_per_class < 1 || test_per_class < 1) throw ConfigError("synth: sample counts must be positive");
    if (!(separation > 0.0)) throw ConfigError("synth: separation must be positive");
  }
};

/// "easy" / "medium" / "hard" or a positive number.
inline double parse_difficulty(const std::string& text) {
  if (text == "easy") return 1.0;
  if (text == "medium") return 0.5;
  if (text == "hard") return 0.25;
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used == text.size() && v > 0.0) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("unknown difficulty '" + text + "' (use easy, medium, hard or a positive number)");
}

namespace detail {

struct ClassSignature {
  std::array<double, 3> color{};
  double fx = 0, fy = 0, phase = 0;
  double blob_x = 0, blob_y = 0;
};

inline std::vector<ClassSignature> make_signatures(const SynthSpec& spec) {
  Rng rng(derive_seed(spec.seed, "synth-classes"));
  std::vector<ClassSignature> sigs;
  while (sigs.size() < static_cast<std::size_t>(spec.classes)) {
    ClassSignature s;
    // Keep colour signatures apart; give up on the spacing after many tries.
    for (int attempt = 0; attempt < 200; ++attempt) {
      for (auto& c : s.color) c = rng.uniform(-1.0, 1.0);
      bool far = true;
      for (const auto& o : sigs) {
        double d = 0;
        for (int ch = 0; ch < 3; ++ch) d += (s.color[ch] - o.color[ch]) * (s.color[ch] - o.color[ch]);
        if (d < 0.5) far = false;
      }
      if (far) break;
    }
    const double angle = rng.uniform(0.0, 3.14159265358979323846);
    const double freq = rng.uniform(1.5, 4.5);
    s.fx = freq * std::cos(angle);
    s.fy = freq * std::sin(angle);
    s.phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    s.blob_x = rng.uniform(8.0, 24.0);
    s.blob_y = rng.uniform(8.0, 24.0);
    sigs.push_back(s);
  }
  return sigs;
}

inline DatasetFile render_split(const SynthSpec& spec, const std::vector<ClassSignature>& sigs, int per_class,
                                Split split) {
  Rng rng(derive_seed(spec.seed, split == Split::train ? "synth-train" : "synth-test"));
  DatasetFile ds;
  ds.split = split;
  for (int c = 0; c < spec.classes; ++c) ds.class_names.push_back("class_" + std::to_string(c));
  const std::size_t n = static_cast<std::size_t>(per_class) * static_cast<std::size_t>(spec.classes);
  ds.images.resize(n * kImageBytes);
  ds.labels.resize(n);
  constexpr double kTwoPi = 2.0 * 3.14159265358979323846;
  const double sep = spec.separation;
  for (std::size_t i = 0; i < n; ++i) {
    // Interleave classes so file order is balanced.
    const auto c = static_cast<std::size_t>(i % static_cast<std::size_t>(spec.classes));
    const auto& sig = sigs[c];
    ds.labels[i] = static_cast<std::uint16_t>(c);
    const double jitter = rng.uniform(-0.6, 0.6);
    const double bx = sig.blob_x + rng.uniform(-3.0, 3.0);
    const double by = sig.blob_y + rng.uniform(-3.0, 3.0);
    const double gain = rng.uniform(0.8, 1.2);
    std::uint8_t* img = ds.images.data() + i * kImageBytes;
    for (std::size_t ch = 0; ch < kImageChannels; ++ch) {
      for (std::size_t y = 0; y < kImageSide; ++y) {
        for (std::size_t x = 0; x < kImageSide; ++x) {
          const double xd = static_cast<double>(x), yd = static_cast<double>(y);
          const double wave = std::sin(kTwoPi * (sig.fx * xd + sig.fy * yd) / 32.0 + sig.phase + jitter);
          const double r2 = (xd - bx) * (xd - bx) + (yd - by) * (yd - by);
          const double blob = std::exp(-r2 / 18.0);
          const double signal = gain * (40.0 * sig.color[ch] + 30.0 * wave * (0.5 + 0.5 * sig.color[(ch + 1) % 3]) +
                                        50.0 * blob);
          const double v = 128.0 + sep * signal + 24.0 * rng.normal();
          img[(ch * kImageSide + y) * kImageSide + x] =
              static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
      }
    }
  }
  return ds;
}

}  // namespace detail

/// Deterministic (train, test) pair for a spec.
inline std::pair<DatasetFile, DatasetFile> synth_generate(const SynthSpec& spec) {
  spec.validate();
  const auto sigs = detail::make_signatures(spec);
  return {detail::render_split(spec, sigs, spec.samples_per_class, Split::train),
          detail::render_split(spec, sigs, spec.test_per_class, Split::test)};
}

/// 64-bit FNV-1a over a byte buffer; used for determinism checks.
inline std::uint64_t checksum(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace cil
