#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "conslide/cssl.hpp"
#include "conslide/data.hpp"
#include "conslide/errors.hpp"
#include "support.hpp"

namespace conslide {
namespace {

namespace fs = std::filesystem;
using testing::random_bag;

class DataDirTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           (std::string("conslide_data_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

FormatErrorCode decode_error(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_bag(bytes);
  } catch (const FormatError& e) {
    return e.code();
  }
  ADD_FAILURE() << "decode succeeded";
  return FormatErrorCode::kIo;
}

TEST(BagFormatTest, RoundTripIsBitExact) {
  Rng rng(1);
  auto bag = random_bag(rng, 3, 4, 5, 2, 7, "x");
  auto back = decode_bag(encode_bag(bag));
  EXPECT_EQ(back.task_id, 2u);
  EXPECT_EQ(back.label, 7u);
  EXPECT_EQ(back.region_features, bag.region_features);
  EXPECT_EQ(back.patch_features, bag.patch_features);
}

TEST(BagFormatTest, HeaderLayout) {
  Rng rng(2);
  auto bytes = encode_bag(random_bag(rng, 2, 3, 4, 1, 5));
  ASSERT_EQ(bytes.size(), 4u + 2 + 5 * 4 + (2 * 4 + 2 * 3 * 4) * 8 + 4);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CSFB");
  EXPECT_EQ(bytes[4], 1);  // version, little-endian
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 1);  // task id
  EXPECT_EQ(bytes[10], 5);  // label
  EXPECT_EQ(bytes[14], 2);  // M
  EXPECT_EQ(bytes[18], 3);  // N
  EXPECT_EQ(bytes[22], 4);  // C
}

TEST(BagFormatTest, CorruptionsHaveDistinctCodes) {
  Rng rng(3);
  const auto bytes = encode_bag(random_bag(rng, 2, 2, 3));
  auto b = bytes;
  b[0] = 'X';
  EXPECT_EQ(decode_error(b), FormatErrorCode::kBadMagic);
  b = bytes;
  b[4] = 2;
  EXPECT_EQ(decode_error(b), FormatErrorCode::kUnsupportedVersion);
  EXPECT_EQ(decode_error({bytes.begin(), bytes.end() - 10}), FormatErrorCode::kTruncated);
  EXPECT_EQ(decode_error({bytes.begin(), bytes.begin() + 3}), FormatErrorCode::kTruncated);
  b = bytes;
  b[40] ^= 0x01;  // inside the payload
  EXPECT_EQ(decode_error(b), FormatErrorCode::kChecksumMismatch);
  b = bytes;
  b.back() ^= 0xff;  // the checksum itself
  EXPECT_EQ(decode_error(b), FormatErrorCode::kChecksumMismatch);
}

TEST(BagFormatTest, Crc32KnownValue) {
  const std::string s = "123456789";
  EXPECT_EQ(crc32(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())), 0xCBF43926u);
}

TEST_F(DataDirTest, FileRoundTripAndMissingFile) {
  Rng rng(4);
  auto bag = random_bag(rng, 2, 2, 2, 0, 1);
  write_bag(bag, dir_ / "slide_42.csfb");
  auto back = read_bag(dir_ / "slide_42.csfb");
  EXPECT_EQ(back.sample_id, "slide_42");
  EXPECT_EQ(back.patch_features, bag.patch_features);
  try {
    read_bag(dir_ / "nope.csfb");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.code(), FormatErrorCode::kIo);
  }
}

TEST_F(DataDirTest, ManifestRoundTripAndValidation) {
  std::vector<ManifestEntry> entries{{"a", "bags/a.csfb", 0, 1, 3, 4, 8}, {"b", "bags/b.csfb", 1, 2, 5, 4, 8}};
  write_manifest_jsonl(entries, dir_ / "m.jsonl");
  auto back = read_manifest_jsonl(dir_ / "m.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].sample_id, "b");
  EXPECT_EQ(back[1].regions, 5u);
  Manifest m{"d", {}, back};
  EXPECT_NO_THROW(m.validate());
  m.entries.push_back({"a", "x", 0, 0, 1, 1, 8});
  EXPECT_THROW(m.validate(), ConfigError);
  m.entries.back().sample_id = "c";
  m.entries.back().channels = 4;
  EXPECT_THROW(m.validate(), ConfigError);
  std::ofstream(dir_ / "bad.jsonl") << "{\"sample_id\": 3}\n";
  EXPECT_THROW(read_manifest_jsonl(dir_ / "bad.jsonl"), ConfigError);
}

SyntheticSpec small_spec(std::uint64_t seed = 5) {
  SyntheticSpec s;
  s.channels = 16;
  s.train_per_class = 6;
  s.test_per_class = 3;
  s.seed = seed;
  return s;
}

TEST(SyntheticTest, SameSeedSameBytes) {
  auto a = generate_synthetic(small_spec()), b = generate_synthetic(small_spec()), c = generate_synthetic(small_spec(6));
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(encode_bag(a.train[i]), encode_bag(b.train[i]));
  EXPECT_NE(encode_bag(a.train[0]), encode_bag(c.train[0]));
}

TEST(SyntheticTest, LabelBalanceAndShapes) {
  auto spec = small_spec();
  spec.train_counts = {1, 2, 3, 4, 5, 6, 7, 8};
  auto ds = generate_synthetic(spec);
  std::map<std::uint32_t, std::size_t> train, test;
  for (const auto& b : ds.train) {
    ++train[b.label];
    EXPECT_EQ(b.task_id, b.label / 2);
    EXPECT_GE(b.regions(), spec.min_regions);
    EXPECT_LE(b.regions(), spec.max_regions);
    EXPECT_EQ(b.patches(), spec.patches);
    EXPECT_EQ(b.channels(), 16u);
  }
  for (const auto& b : ds.test) ++test[b.label];
  for (std::uint32_t c = 0; c < 8; ++c) {
    EXPECT_EQ(train[c], c + 1);
    EXPECT_EQ(test[c], 3u);
  }
  ASSERT_EQ(ds.tasks.size(), 4u);
  EXPECT_EQ(ds.tasks[3].class_begin, 6u);
  EXPECT_EQ(ds.tasks[3].class_end, 8u);
}

TEST(SyntheticTest, ZeroPatchNoiseLimit) {
  auto spec = small_spec();
  spec.sigma_patch = 0.0;
  auto ds = generate_synthetic(spec);
  CsslProjector proj(16, 0, 1);
  auto& w = proj.parameters()[0].value;
  std::fill(w.data.begin(), w.data.end(), 0.0);
  for (std::size_t i = 0; i < 16; ++i) w[i * 16 + i] = 1.0;
  for (const auto& bag : ds.train) {
    Tape t;
    auto mean = patch_scale_regions(t.constant(bag.patch_features)).value();
    for (std::size_t i = 0; i < mean.size(); ++i)
      EXPECT_NEAR(mean[i], bag.region_features[i], 1e-12 * std::max(1.0, std::abs(bag.region_features[i])));
    EXPECT_LT(cssl_loss(t, proj, t.constant(bag.region_features), t.constant(bag.patch_features)).loss.item(), 1e-12);
  }
}

TEST(SyntheticTest, NearestCentroidSeparatesEachTask) {
  SyntheticSpec spec;
  spec.channels = 16;
  spec.seed = 11;
  auto ds = generate_synthetic(spec);
  auto bag_mean = [](const FeatureBag& b) {
    std::vector<double> m(b.channels(), 0.0);
    for (std::size_t i = 0; i < b.regions(); ++i)
      for (std::size_t c = 0; c < b.channels(); ++c) m[c] += b.region_features[i * b.channels() + c] / b.regions();
    return m;
  };
  std::map<std::uint32_t, std::vector<double>> centroid;
  std::map<std::uint32_t, std::size_t> count;
  for (const auto& b : ds.train) {
    auto m = bag_mean(b);
    auto& c = centroid[b.label];
    c.resize(m.size(), 0.0);
    for (std::size_t k = 0; k < m.size(); ++k) c[k] += m[k];
    ++count[b.label];
  }
  for (auto& [label, c] : centroid)
    for (auto& v : c) v /= static_cast<double>(count[label]);
  std::map<std::uint32_t, std::pair<int, int>> per_task;
  for (const auto& b : ds.test) {
    auto m = bag_mean(b);
    const auto& task = ds.tasks[b.task_id];
    std::uint32_t best = task.class_begin;
    double best_d = 1e300;
    for (std::uint32_t cls = task.class_begin; cls < task.class_end; ++cls) {
      double d = 0.0;
      for (std::size_t k = 0; k < m.size(); ++k) d += (m[k] - centroid[cls][k]) * (m[k] - centroid[cls][k]);
      if (d < best_d) {
        best_d = d;
        best = cls;
      }
    }
    per_task[b.task_id].first += best == b.label;
    ++per_task[b.task_id].second;
  }
  for (const auto& [task, ct] : per_task) EXPECT_GE(ct.first / static_cast<double>(ct.second), 0.95) << task;
}

TEST(SyntheticTest, ValidationAndMirrorSpec) {
  auto s = small_spec();
  s.sigma_between = 0.0;
  EXPECT_THROW(generate_synthetic(s), ConfigError);
  s = small_spec();
  s.min_regions = 9;
  s.max_regions = 3;
  EXPECT_THROW(generate_synthetic(s), ConfigError);
  s = small_spec();
  s.train_counts = {1, 2};
  EXPECT_THROW(generate_synthetic(s), ConfigError);

  auto mirror = tcga_mirror_spec();
  ASSERT_EQ(mirror.train_counts.size(), 8u);
  EXPECT_EQ(mirror.class_names[0], "LUAD");
  EXPECT_EQ(mirror.class_names[7], "ESCC");
  const std::size_t cases[] = {492, 466, 726, 149, 498, 289, 65, 89};
  for (std::size_t k = 0; k < 8; ++k)
    EXPECT_EQ(mirror.train_counts[k] + mirror.test_counts[k], static_cast<std::size_t>(std::lround(cases[k] / 10.0)));
}

TEST_F(DataDirTest, DatasetDirectoryRoundTrip) {
  auto ds = generate_synthetic(small_spec());
  write_dataset(ds, dir_);
  EXPECT_TRUE(fs::exists(dir_ / "train.jsonl"));
  EXPECT_TRUE(fs::exists(dir_ / "dataset.json"));
  auto back = load_dataset(dir_);
  ASSERT_EQ(back.train.size(), ds.train.size());
  ASSERT_EQ(back.test.size(), ds.test.size());
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    EXPECT_EQ(back.train[i].sample_id, ds.train[i].sample_id);
    EXPECT_EQ(back.train[i].patch_features, ds.train[i].patch_features);
  }
  EXPECT_EQ(back.tasks.size(), 4u);
  EXPECT_EQ(back.tasks[2].class_begin, 4u);
  EXPECT_EQ(back.class_names, ds.class_names);

  fs::remove(dir_ / ("bags/" + ds.train[0].sample_id + ".csfb"));
  try {
    load_dataset(dir_);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.code(), FormatErrorCode::kIo);
  }
  EXPECT_THROW(load_dataset(dir_ / "absent"), FormatError);
}

TEST(TilingTest, Examples) {
  EXPECT_EQ(mock_tiling_geometry(4096, 4096).patches_per_region, 64u);
  EXPECT_EQ(mock_tiling_geometry(8192, 4096).regions, 2u);
  EXPECT_EQ(mock_tiling_geometry(5000, 5000).regions, 1u);
  EXPECT_EQ(mock_tiling_geometry(3000, 5000).regions, 0u);
  // Floor-division oracle.
  for (std::size_t w : {4096u, 9000u, 20000u})
    for (std::size_t h : {4095u, 12288u})
      EXPECT_EQ(mock_tiling_geometry(w, h).regions, (w / 4096) * (h / 4096));
  EXPECT_THROW(mock_tiling_geometry(4096, 4096, 4096, 500), ConfigError);
  EXPECT_THROW(mock_tiling_geometry(0, 4096), ConfigError);
}

}  // namespace
}  // namespace conslide
