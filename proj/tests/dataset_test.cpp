#include "road/dataset.hpp"
#include "road/errors.hpp"
#include "road/image_io.hpp"
#include "road/trainer.hpp"

#include <gtest/gtest.h>

#include <unistd.h>

#include <fstream>
#include <set>

using namespace road;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("road_dataset_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  return dir;
}

SceneConfig small_scene() {
  SceneConfig c;
  c.height = c.width = 32;
  return c;
}

class SmallDataset : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fresh_dir("small");
    manifest_ = generate_dataset(root_, small_scene(), default_splits(6, 5, 4));
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static inline fs::path root_;
  static inline DatasetManifest manifest_;
};

}  // namespace

TEST(DefaultSplits, CountsAndDisjointSeeds) {
  const auto splits = default_splits();
  ASSERT_EQ(splits.size(), 3u);
  int total = 0;
  std::set<std::uint64_t> seeds;
  for (const auto& s : splits) {
    total += s.count;
    for (int i = 0; i < s.count; ++i) EXPECT_TRUE(seeds.insert(s.first_seed + i).second);
  }
  EXPECT_EQ(total, 450);
  EXPECT_EQ(splits[0].style, Style::SourceSynthetic);
  EXPECT_EQ(splits[1].style, Style::TargetReal);
  EXPECT_TRUE(splits[1].labels_evaluation_only);
  EXPECT_FALSE(splits[2].labels_evaluation_only);
}

TEST_F(SmallDataset, ManifestRoundTrip) {
  const auto m = read_manifest(root_);
  EXPECT_EQ(m.version, kGeneratorVersion);
  EXPECT_EQ(m.total_scenes(), 15);
  ASSERT_EQ(m.splits.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(m.splits[i].name, manifest_.splits[i].name);
    EXPECT_EQ(m.splits[i].first_seed, manifest_.splits[i].first_seed);
    EXPECT_EQ(m.splits[i].last_seed, manifest_.splits[i].last_seed);
    EXPECT_EQ(m.splits[i].domain, manifest_.splits[i].domain);
  }
  EXPECT_EQ(m.scene.height, 32);
  EXPECT_EQ(m.scene.gap.color_shift, manifest_.scene.gap.color_shift);
  EXPECT_NO_THROW(validate_manifest(m));
}

TEST_F(SmallDataset, FilesMatchTheGenerator) {
  const auto& split = manifest_.split(kTargetVal);
  for (int i = 0; i < split.count; ++i) {
    SceneConfig c = small_scene();
    c.style = Style::TargetReal;
    c.seed = split.first_seed + static_cast<std::uint64_t>(i);
    const Scene expected = generate_scene(c);
    EXPECT_EQ(read_rgb_png(manifest_.image_path(split, i)).pixels, expected.image.pixels);
    EXPECT_EQ(read_label_png(manifest_.label_path(split, i)).labels, expected.labels.labels);
  }
}

TEST_F(SmallDataset, LoadSplitWithoutLabels) {
  const auto scenes = load_split(manifest_, kTargetTrain, false);
  ASSERT_EQ(scenes.size(), 5u);
  for (const auto& s : scenes) {
    EXPECT_TRUE(s.labels.labels.empty());
    EXPECT_EQ(s.domain, Domain::Target);
  }
  EXPECT_THROW(load_split(manifest_, "nope", true), ConfigError);
}

TEST_F(SmallDataset, TrainingDataNeverReadsTargetLabels) {
  std::vector<fs::path> reads;
  set_read_observer([&](const fs::path& p) { reads.push_back(p); });
  const TrainData data = load_train_data(manifest_);
  set_read_observer(nullptr);
  const fs::path forbidden = root_ / kTargetTrain / "labels";
  int target_images = 0;
  for (const auto& p : reads) {
    EXPECT_NE(p.parent_path(), forbidden) << p;
    target_images += p.parent_path() == root_ / kTargetTrain / "images";
  }
  EXPECT_EQ(target_images, 5);
  EXPECT_EQ(data.target.size(), 5u);
  for (const auto& s : data.target) EXPECT_TRUE(s.labels.labels.empty());
}

TEST(GenerateDataset, MissingFileIsNamed) {
  const auto root = fresh_dir("missing");
  auto m = generate_dataset(root, small_scene(), default_splits(2, 2, 2));
  const auto victim = m.label_path(m.split(kSourceTrain), 1);
  fs::remove(victim);
  try {
    validate_manifest(m);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find(victim.string()), std::string::npos);
  }
  fs::remove_all(root);
}

TEST(GenerateDataset, CorruptLabelIsAValidationError) {
  const auto root = fresh_dir("corrupt");
  auto m = generate_dataset(root, small_scene(), default_splits(1, 1, 1));
  std::ofstream(m.label_path(m.split(kTargetVal), 0), std::ios::trunc) << "not a png";
  EXPECT_THROW(validate_manifest(m), ValidationError);
  fs::remove_all(root);
}

TEST(GenerateDataset, OverlappingSeedsAreRejected) {
  const auto root = fresh_dir("overlap");
  std::vector<SplitSpec> splits{{"a", Style::SourceSynthetic, 10, 0, false}, {"b", Style::TargetReal, 10, 5, false}};
  EXPECT_THROW(generate_dataset(root, small_scene(), splits), ConfigError);
  EXPECT_FALSE(fs::exists(root));
}

TEST(GenerateDataset, MissingParentIsAnIoError) {
  EXPECT_THROW(generate_dataset("/nonexistent_parent_dir/road/data", small_scene(), default_splits(1, 1, 1)), IoError);
}

TEST(ReadManifest, MalformedJson) {
  const auto root = fresh_dir("malformed");
  fs::create_directories(root);
  std::ofstream(root / "manifest.json") << "{ \"version\": ";
  EXPECT_THROW(read_manifest(root), ValidationError);
  std::ofstream(root / "manifest.json", std::ios::trunc) << "{ \"version\": \"x\" }";
  EXPECT_THROW(read_manifest(root), ValidationError);
  fs::remove_all(root);
}
