#pragma once

#include "road/scene.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace road {

inline constexpr const char* kGeneratorVersion = "road-scene-forge/1";
inline constexpr const char* kSourceTrain = "source-train";
inline constexpr const char* kTargetTrain = "target-train";
inline constexpr const char* kTargetVal = "target-val";

struct SplitSpec {
  std::string name;
  Style style = Style::SourceSynthetic;
  int count = 0;
  std::uint64_t first_seed = 0;
  bool labels_evaluation_only = false;  // written to disk but never handed to the trainer
};

/// Seed range of a split; `last` is inclusive.
struct SplitEntry {
  std::string name;
  Domain domain = Domain::Source;
  int count = 0;
  std::uint64_t first_seed = 0;
  std::uint64_t last_seed = 0;
  bool labels_evaluation_only = false;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::string version = kGeneratorVersion;
  SceneConfig scene;  // template: size, classes, jitter and style gap
  std::vector<SplitEntry> splits;

  const SplitEntry& split(const std::string& name) const;
  int total_scenes() const;
  std::filesystem::path image_path(const SplitEntry& split, int index) const;
  std::filesystem::path label_path(const SplitEntry& split, int index) const;
};

/// The standard three-split layout with disjoint seed ranges.
std::vector<SplitSpec> default_splits(int source_train = 200, int target_train = 200, int target_val = 50);

/// Renders every split under `root` and writes manifest.json last.
DatasetManifest generate_dataset(const std::filesystem::path& root, const SceneConfig& scene_template,
                                 const std::vector<SplitSpec>& splits);

void write_manifest(const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::filesystem::path& root);

/// Checks that every listed file exists and that each label map survives a
/// decode/re-encode round trip. Throws ValidationError naming the first bad file.
void validate_manifest(const DatasetManifest& manifest);

/// Loads a split into memory. With `with_labels` false no label file is opened.
std::vector<Scene> load_split(const DatasetManifest& manifest, const std::string& name, bool with_labels);

}  // namespace road
