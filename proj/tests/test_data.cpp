#include <gtest/gtest.h>

#include <cmath>

#include "cil/scenario.hpp"
#include "fixtures.hpp"

using namespace cil;
using cil::testing::TempDir;

namespace {

DatasetFile tiny_dataset(std::size_t n, std::vector<std::string> names, std::uint64_t seed = 1) {
  DatasetFile ds;
  ds.class_names = std::move(names);
  Rng rng(seed);
  ds.images.resize(n * kImageBytes);
  for (auto& b : ds.images) b = static_cast<std::uint8_t>(rng.uniform_int(256));
  for (std::size_t i = 0; i < n; ++i) ds.labels.push_back(static_cast<std::uint16_t>(i % ds.class_names.size()));
  return ds;
}

void save_pair(const TempDir& dir, const std::string& name, const DatasetFile& ds) {
  save_dataset(ds, dir / (name + "_train.clds"));
  DatasetFile test = ds;
  test.split = Split::test;
  save_dataset(test, dir / (name + "_test.clds"));
}

Scenario scenario_from(const TempDir& dir, const nlohmann::json& j) {
  return build_scenario(parse_scenario_config(j, dir.path()));
}

std::vector<std::uint8_t> file_bytes(const std::filesystem::path& p) { return io::read_file(p); }

}  // namespace

TEST(Clds, RoundTripIsByteIdentical) {
  TempDir dir;
  DatasetFile ds = tiny_dataset(7, {"a", "bee", "sea"});
  ds.split = Split::test;
  save_dataset(ds, dir / "x.clds");
  const DatasetFile back = load_dataset(dir / "x.clds");
  EXPECT_EQ(back.images, ds.images);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(back.class_names, ds.class_names);
  EXPECT_EQ(back.split, Split::test);
  save_dataset(back, dir / "y.clds");
  EXPECT_EQ(file_bytes(dir / "x.clds"), file_bytes(dir / "y.clds"));
  EXPECT_EQ(back.histogram(), (std::vector<std::size_t>{3, 2, 2}));
}

TEST(Clds, LayoutArithmetic) {
  const DatasetFile ds = tiny_dataset(3, {"ab", "c"});
  const auto bytes = encode_dataset(ds);
  // magic + count + images + labels + class count + (len + name) per class + split
  EXPECT_EQ(bytes.size(), 5u + 4u + 3u * 3072u + 3u * 2u + 2u + (2u + 2u) + (2u + 1u) + 1u);
  EXPECT_EQ(bytes[5], 3u);
  EXPECT_EQ(bytes[6], 0u);
}

TEST(Clds, DistinctErrors) {
  TempDir dir;
  const auto good = encode_dataset(tiny_dataset(4, {"a", "b"}));

  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_dataset(bad_magic), BadMagicError);

  const std::vector<std::uint8_t> truncated(good.begin(), good.begin() + 5 + 4 + 3072);
  EXPECT_THROW(decode_dataset(truncated), TruncatedError);

  auto bad_label = good;
  bad_label[5 + 4 + 4 * 3072] = 9;
  EXPECT_THROW(decode_dataset(bad_label), LabelRangeError);

  EXPECT_THROW(load_dataset(dir / "missing.clds"), IoError);
}

TEST(Synth, DeterministicAndInRange) {
  const auto spec = cil::testing::small_spec(3, 20, 5, 42);
  const auto [a_train, a_test] = synth_generate(spec);
  const auto [b_train, b_test] = synth_generate(spec);
  EXPECT_EQ(checksum(encode_dataset(a_train)), checksum(encode_dataset(b_train)));
  EXPECT_EQ(checksum(encode_dataset(a_test)), checksum(encode_dataset(b_test)));
  EXPECT_EQ(a_train.size(), 60u);
  EXPECT_EQ(a_test.size(), 15u);
  EXPECT_EQ(a_test.split, Split::test);
  auto other = spec;
  other.seed = 43;
  EXPECT_NE(checksum(encode_dataset(synth_generate(other).first)), checksum(encode_dataset(a_train)));
  EXPECT_EQ(a_train.histogram(), (std::vector<std::size_t>{20, 20, 20}));
}

TEST(Synth, InvalidSpecs) {
  EXPECT_THROW(synth_generate(cil::testing::small_spec(1, 10, 10)), ConfigError);
  EXPECT_THROW(synth_generate(cil::testing::small_spec(3, 10, 10, 1, 0.0)), ConfigError);
  EXPECT_THROW(parse_difficulty("trivial"), ConfigError);
  EXPECT_EQ(parse_difficulty("easy"), 1.0);
  EXPECT_EQ(parse_difficulty("0.7"), 0.7);
}

// Softmax regression on raw normalised pixels, one pass of SGD in double.
TEST(Synth, EasyFourClassesAreLinearlySeparable) {
  auto spec = cil::testing::small_spec(4, 500, 200, 5, parse_difficulty("easy"));
  const auto [train, test] = synth_generate(spec);
  const std::size_t f = kImageBytes, k = 4;
  std::vector<double> w(k * f, 0.0), b(k, 0.0);
  auto scores = [&](const DatasetFile& ds, std::size_t i) {
    std::vector<double> z(b);
    const auto img = ds.image(i);
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t j = 0; j < f; ++j) z[c] += w[c * f + j] * normalize_pixel(img[j]);
    return z;
  };
  Rng rng(3);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());
  const double lr = 1e-3;
  for (std::size_t i : order) {
    auto z = scores(train, i);
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0;
    for (auto& v : z) s += (v = std::exp(v - m));
    const auto img = train.image(i);
    for (std::size_t c = 0; c < k; ++c) {
      const double g = z[c] / s - (c == train.labels[i] ? 1.0 : 0.0);
      b[c] -= lr * g;
      for (std::size_t j = 0; j < f; ++j) w[c * f + j] -= lr * g * normalize_pixel(img[j]);
    }
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto z = scores(test, i);
    correct += static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin()) == test.labels[i];
  }
  EXPECT_GE(static_cast<double>(correct) / static_cast<double>(test.size()), 0.90);
}

TEST(Scenario, ThreeDatasetsGiveSixGlobalClasses) {
  TempDir dir;
  save_pair(dir, "a", tiny_dataset(6, {"cat", "dog"}, 1));
  save_pair(dir, "b", tiny_dataset(6, {"car", "bus"}, 2));
  save_pair(dir, "c", tiny_dataset(6, {"oak", "elm"}, 3));
  const nlohmann::json j = {{"episodes",
                             {{{"dataset", "a_train.clds"}}, {{"dataset", "b_train.clds"}}, {{"dataset", "c_train.clds"}}}}};
  const Scenario sc = scenario_from(dir, j);
  ASSERT_EQ(sc.episodes.size(), 3u);
  EXPECT_EQ(sc.class_names, (std::vector<std::string>{"cat", "dog", "car", "bus", "oak", "elm"}));
  EXPECT_EQ(sc.episodes[1].global_classes(), (std::vector<int>{2, 3}));
  EXPECT_EQ(sc.episodes[2].epochs, kDefaultEpochs);
  const Scenario again = scenario_from(dir, j);
  EXPECT_EQ(again.class_names, sc.class_names);
  for (std::size_t e = 0; e < 3; ++e) EXPECT_EQ(again.episodes[e].local_to_global, sc.episodes[e].local_to_global);
}

TEST(Scenario, EightClassDatasetSplitFourWays) {
  TempDir dir;
  save_pair(dir, "eight", tiny_dataset(16, {"c0", "c1", "c2", "c3", "c4", "c5", "c6", "c7"}));
  const auto j = cil::testing::split_scenario("eight", {{0, 1}, {2, 3}, {4, 5}, {6, 7}}, 2);
  const Scenario sc = scenario_from(dir, j);
  ASSERT_EQ(sc.episodes.size(), 4u);
  EXPECT_EQ(sc.class_count(), 8);
  std::set<int> seen;
  for (const auto& ep : sc.episodes) {
    EXPECT_EQ(ep.local_classes.size(), 2u);
    EXPECT_EQ(ep.epochs, 2);
    for (int g : ep.global_classes()) EXPECT_TRUE(seen.insert(g).second);
    for (const auto& s : ep.samples(Split::train)) EXPECT_EQ(ep.local_to_global.at(s.dataset->labels[s.index]), s.label);
  }
}

TEST(Scenario, SameNameDifferentDatasetsStayDistinct) {
  TempDir dir;
  save_pair(dir, "h1", tiny_dataset(4, {"normal", "pneumonia"}, 1));
  save_pair(dir, "h2", tiny_dataset(4, {"pneumonia", "effusion"}, 2));
  nlohmann::json j = {{"episodes", {{{"dataset", "h1_train.clds"}}, {{"dataset", "h2_train.clds"}}}}};
  const Scenario sc = scenario_from(dir, j);
  EXPECT_EQ(sc.class_count(), 4);
  EXPECT_NE(sc.episodes[0].local_to_global.at(1), sc.episodes[1].local_to_global.at(0));

  j["shared_classes"] = nlohmann::json::array({nlohmann::json::array({"0:1", "1:0"})});
  const Scenario shared = scenario_from(dir, j);
  EXPECT_EQ(shared.class_count(), 3);
  EXPECT_EQ(shared.episodes[0].local_to_global.at(1), shared.episodes[1].local_to_global.at(0));
}

TEST(Scenario, ConfigErrors) {
  TempDir dir;
  save_pair(dir, "d", tiny_dataset(8, {"a", "b", "c", "e"}));
  EXPECT_THROW(scenario_from(dir, cil::testing::split_scenario("d", {{0, 1}, {1, 2}}, 1)), ConfigError);
  EXPECT_THROW(scenario_from(dir, cil::testing::split_scenario("d", {{0, 7}}, 1)), ConfigError);
  EXPECT_THROW(scenario_from(dir, cil::testing::split_scenario("nope", {{0}}, 1)), ConfigError);
  EXPECT_THROW(scenario_from(dir, nlohmann::json{{"episodes", nlohmann::json::array()}}), ConfigError);
  EXPECT_THROW(scenario_from(dir, nlohmann::json{{"episodes", {{{"dataset", "d.clds"}}}}}), ConfigError);
}

TEST(Scenario, TestPathDerivation) {
  EXPECT_EQ(detail::derive_test_path("data/blood_train.clds"), "data/blood_test.clds");
  EXPECT_EQ(detail::derive_test_path("train/x_train.clds"), "train/x_test.clds");
  EXPECT_THROW(detail::derive_test_path("training/x.clds"), ConfigError);
}

TEST(Batches, SizesAndOrder) {
  TempDir dir;
  save_pair(dir, "ten", tiny_dataset(10, {"a", "b"}));
  const Scenario sc = scenario_from(dir, cil::testing::split_scenario("ten", {{0, 1}}, 1));
  Rng rng(1);
  auto stream = iterate_batches(sc.episodes[0], 4, rng, false);
  std::vector<std::size_t> sizes;
  std::uint32_t expect_index = 0;
  const auto& ds = *sc.episodes[0].train;
  while (auto b = stream.next()) {
    sizes.push_back(b->labels.size());
    for (std::size_t r = 0; r < b->samples.size(); ++r) {
      EXPECT_EQ(b->samples[r].index, expect_index);
      const auto img = ds.image(expect_index);
      for (std::size_t j = 0; j < kImageBytes; j += 97)
        EXPECT_EQ(b->images.data()[r * kImageBytes + j], normalize_pixel(img[j]));
      ++expect_index;
    }
  }
  EXPECT_EQ(sizes, (std::vector<std::size_t>{4, 4, 2}));
  EXPECT_THROW(iterate_batches(sc.episodes[0], 0, rng, false), ConfigError);
}

TEST(Batches, PixelNormalisation) {
  EXPECT_EQ(normalize_pixel(255), 1.0f);
  EXPECT_EQ(normalize_pixel(0), -1.0f);
  EXPECT_NEAR(normalize_pixel(128), (128.0 / 255.0 - 0.5) / 0.5, 1e-7);
}

TEST(Batches, SeededShuffleIsDeterministic) {
  TempDir dir;
  save_pair(dir, "s", tiny_dataset(30, {"a", "b", "c"}));
  const Scenario sc = scenario_from(dir, cil::testing::split_scenario("s", {{0, 1, 2}}, 1));
  auto order = [&](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::uint32_t> out;
    for (int epoch = 0; epoch < 2; ++epoch) {
      auto st = iterate_batches(sc.episodes[0], 7, rng, true);
      while (auto b = st.next())
        for (const auto& s : b->samples) out.push_back(s.index);
    }
    return out;
  };
  EXPECT_EQ(order(5), order(5));
  EXPECT_NE(order(5), order(6));
  const auto o = order(5);
  EXPECT_NE(std::vector<std::uint32_t>(o.begin(), o.begin() + 30), std::vector<std::uint32_t>(o.begin() + 30, o.end()));
}

TEST(Batches, EmptyEpisodeIsRejected) {
  Rng rng(1);
  EXPECT_THROW(BatchStream({}, 4, rng, false), ContractError);
}
