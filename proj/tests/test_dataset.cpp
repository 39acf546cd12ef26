#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include <unistd.h>

#include "ccm/dataset.hpp"
#include "ccm/error.hpp"

namespace ccm {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ccm_dataset_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

TransferOperator small_operator(std::size_t side = 16) {
  OperatorConfig c;
  c.obj_h = c.obj_w = c.sen_h = c.sen_w = side;
  c.seed = 2;
  return synthesize_operator(c);
}

PhantomSpec small_beads(std::size_t side = 16) {
  PhantomSpec s;
  s.img_h = s.img_w = side;
  s.params = BeadParams{3.0, 1, 2, 5.0};
  s.seed = 4;
  return s;
}

TEST(Split, TenAtNinetyPercent) {
  const auto [train, test] = split_indices(10, 0.9, 3);
  EXPECT_EQ(train.size(), 9u);
  EXPECT_EQ(test.size(), 1u);
  std::set<std::size_t> all(train.begin(), train.end());
  all.insert(test.begin(), test.end());
  EXPECT_EQ(all.size(), 10u);
}

TEST(Split, LargeCountsRoundTheTrainShare) {
  const auto [train, test] = split_indices(18339, 16504.0 / 18339.0, 1);
  EXPECT_EQ(train.size(), 16504u);
  EXPECT_EQ(test.size(), 1835u);
}

TEST(Split, DisjointAndCoveringForManySizes) {
  for (std::size_t n = 1; n < 60; n += 3)
    for (double f : {0.1, 0.5, 0.9}) {
      const auto [train, test] = split_indices(n, f, n);
      std::vector<int> seen(n, 0);
      for (auto i : train) ++seen[i];
      for (auto i : test) ++seen[i];
      for (int s : seen) EXPECT_EQ(s, 1);
    }
  EXPECT_THROW(split_indices(10, 1.0, 0), Error);
  EXPECT_THROW(split_indices(10, 0.0, 0), Error);
}

TEST(Split, GroupsNeverStraddleTrainAndTest) {
  std::vector<std::size_t> groups;
  for (std::size_t g = 0; g < 12; ++g)
    for (std::size_t k = 0; k < 4 + g % 3; ++k) groups.push_back(g);
  const auto [train, test] = split_by_group(groups, 0.75, 5);
  std::set<std::size_t> train_groups, test_groups;
  for (auto i : train) train_groups.insert(groups[i]);
  for (auto i : test) test_groups.insert(groups[i]);
  for (auto g : train_groups) EXPECT_EQ(test_groups.count(g), 0u);
  EXPECT_EQ(train.size() + test.size(), groups.size());
  EXPECT_FALSE(test.empty());
}

TEST(BuildDataset, PairsObjectsWithForwardImages) {
  const TransferOperator op = small_operator();
  const NoiseSpec noise{0.01, 0.0, 6};
  const PairedDataset ds = build_dataset(small_beads(), op, noise, 10, 0.9, 7);
  ds.validate();
  ASSERT_EQ(ds.entries.size(), 10u);
  EXPECT_EQ(ds.manifest.train_indices.size(), 9u);
  EXPECT_EQ(ds.manifest.source, "phantom");
  ASSERT_TRUE(ds.manifest.phantom.has_value());
  for (std::size_t i = 0; i < ds.entries.size(); ++i) {
    EXPECT_EQ(ds.entries[i].object, generate_phantom(small_beads(), i));
    NoiseSpec entry = noise;
    entry.seed = derive_seed(noise.seed, Stream::dataset_noise, i);
    EXPECT_EQ(ds.entries[i].sensor, forward(op, ds.entries[i].object, entry));
  }
}

TEST(BuildDataset, ShapeMismatchIsReported) {
  try {
    build_dataset(small_beads(12), small_operator(16), NoiseSpec{}, 4, 0.5, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::shape);
  }
}

TEST(SaveDataset, SameArgumentsGiveIdenticalFiles) {
  const TransferOperator op = small_operator();
  const fs::path a = scratch("a"), b = scratch("b");
  save_dataset(a, build_dataset(small_beads(), op, NoiseSpec{0.01, 0.0, 6}, 12, 0.75, 7));
  save_dataset(b, build_dataset(small_beads(), op, NoiseSpec{0.01, 0.0, 6}, 12, 0.75, 7));
  EXPECT_EQ(hash_directory(a), hash_directory(b));
  EXPECT_TRUE(fs::exists(a / "obj_000011.imgf"));
  EXPECT_TRUE(fs::exists(a / "sen_000000.imgf"));

  const fs::path c = scratch("c");
  save_dataset(c, build_dataset(small_beads(), op, NoiseSpec{0.01, 0.0, 8}, 12, 0.75, 7));
  EXPECT_NE(hash_directory(a), hash_directory(c));
  fs::remove_all(a);
  fs::remove_all(b);
  fs::remove_all(c);
}

TEST(SaveDataset, LoadRestoresManifestAndEntries) {
  const fs::path dir = scratch("load");
  PairedDataset ds = build_dataset(small_beads(), small_operator(), NoiseSpec{0.02, 50.0, 3}, 8, 0.5, 9);
  ds.manifest.operator_ref = "operator.ccmm";
  save_dataset(dir, ds);
  const PairedDataset back = load_dataset(dir);
  EXPECT_EQ(back.manifest.train_indices, ds.manifest.train_indices);
  EXPECT_EQ(back.manifest.test_indices, ds.manifest.test_indices);
  EXPECT_EQ(back.manifest.noise.gaussian_sigma, 0.02);
  EXPECT_EQ(back.manifest.noise.poisson_scale, 50.0);
  EXPECT_EQ(back.manifest.operator_ref, "operator.ccmm");
  ASSERT_TRUE(back.manifest.phantom.has_value());
  EXPECT_EQ(back.manifest.phantom->kind(), PhantomKind::beads);
  EXPECT_EQ(std::get<BeadParams>(back.manifest.phantom->params).diameter_um, 3.0);
  ASSERT_EQ(back.entries.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t k = 0; k < back.entries[i].object.size(); ++k)
      EXPECT_EQ(back.entries[i].object.data()[k], static_cast<double>(static_cast<float>(ds.entries[i].object.data()[k])));
  fs::remove_all(dir);
}

TEST(SaveDataset, MissingManifestAndCorruptManifestAreDistinct) {
  const fs::path dir = scratch("broken");
  try {
    load_dataset(dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
  }
  fs::create_directories(dir);
  std::ofstream(dir / "manifest.json") << "{ not json";
  try {
    load_dataset(dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
  }
  fs::remove_all(dir);
}

TEST(Manifest, ValidateRejectsOverlapAndGaps) {
  PairedDataset ds = build_dataset(small_beads(), small_operator(), NoiseSpec{}, 4, 0.5, 1);
  ds.manifest.test_indices.push_back(ds.manifest.train_indices.front());
  EXPECT_THROW(ds.validate(), Error);
  ds.manifest.test_indices.pop_back();
  ds.manifest.test_indices.pop_back();
  EXPECT_THROW(ds.validate(), Error);
}

TEST(Manifest, TileFlagsSurviveJson) {
  DatasetManifest m;
  m.source = "tiles";
  m.tile_overlapping = true;
  m.split_mode = SplitMode::structure_disjoint;
  m.train_indices = {0, 2};
  m.test_indices = {1};
  const DatasetManifest back = parse_manifest(manifest_json(m));
  EXPECT_TRUE(back.tile_overlapping);
  EXPECT_EQ(back.split_mode, SplitMode::structure_disjoint);
  EXPECT_EQ(back.source, "tiles");
  EXPECT_FALSE(back.phantom.has_value());
}

}  // namespace
}  // namespace ccm
