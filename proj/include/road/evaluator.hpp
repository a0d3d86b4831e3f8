#pragma once

#include "road/errors.hpp"
#include "road/losses.hpp"
#include "road/model.hpp"
#include "road/scene.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace road {

/// counts[g * K + p] = pixels with ground truth g predicted as p.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<std::int64_t> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int k) : num_classes(k), counts(static_cast<std::size_t>(k) * k, 0) {}

  std::int64_t at(int gt, int pred) const { return counts[static_cast<std::size_t>(gt) * num_classes + pred]; }
  std::int64_t& at(int gt, int pred) { return counts[static_cast<std::size_t>(gt) * num_classes + pred]; }
  std::int64_t total() const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix& other) const = default;
};

ConfusionMatrix confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, int num_classes,
                          int ignore_index = kIgnoreLabel);

struct IoUReport {
  std::vector<double> per_class;  // 0 for absent classes
  std::vector<bool> present;      // non-empty union
  double mean = 0.0;              // over present classes; 0 when none is present
  ConfusionMatrix matrix;
  std::vector<IoUReport> regions;  // optional per-region breakdown
};

IoUReport iou(const ConfusionMatrix& cm);

/// Predicted label map for one image. Images larger than `tile` are covered
/// by non-overlapping tiles; a final partial tile is shifted inward.
template <typename Scalar>
LabelMap predict(StudentModel<Scalar>& model, const RgbImage& image, int tile_h, int tile_w) {
  LabelMap out{image.height, image.width, std::vector<std::uint8_t>(static_cast<std::size_t>(image.height) * image.width)};
  const int th = std::min(tile_h, image.height), tw = std::min(tile_w, image.width);
  auto starts = [](int length, int tile) {
    std::vector<int> s;
    for (int p = 0; p < length; p += tile) s.push_back(std::min(p, length - tile));
    return s;
  };
  const int k = model.num_classes();
  for (int r0 : starts(image.height, th)) {
    for (int c0 : starts(image.width, tw)) {
      Graph<Scalar> g;
      auto logits = model.forward_segmentation(g, make_crop<Scalar>(image, r0, c0, th, tw, Domain::Target));
      const auto& v = logits.value();
      const Index plane = static_cast<Index>(th) * tw;
      for (int y = 0; y < th; ++y)
        for (int x = 0; x < tw; ++x) {
          const Index cell = static_cast<Index>(y) * tw + x;
          int best = 0;
          for (int c = 1; c < k; ++c) {
            if (v[c * plane + cell] > v[best * plane + cell]) best = c;
          }
          out.at(r0 + y, c0 + x) = static_cast<std::uint8_t>(best);
        }
    }
  }
  return out;
}

/// Confusion of a prediction split by the region of each pixel.
std::vector<ConfusionMatrix> region_confusions(const LabelMap& pred, const LabelMap& gt, int num_classes,
                                               const RegionPartition& partition);

/// Accumulated IoU over labeled scenes. The tile defaults to the whole image.
template <typename Scalar>
IoUReport evaluate_model(StudentModel<Scalar>& model, const std::vector<Scene>& scenes,
                         const std::optional<RegionPartition>& partition = std::nullopt, int tile_h = 0,
                         int tile_w = 0) {
  const int k = model.num_classes();
  ConfusionMatrix total(k);
  std::vector<ConfusionMatrix> regional;
  if (partition) regional.assign(static_cast<std::size_t>(partition->regions()), ConfusionMatrix(k));
  for (const auto& scene : scenes) {
    if (scene.labels.labels.size() != scene.image.pixels.size() / 3) {
      throw ValidationError("evaluate_model needs labeled scenes");
    }
    const LabelMap pred = predict(model, scene.image, tile_h > 0 ? tile_h : scene.image.height,
                                  tile_w > 0 ? tile_w : scene.image.width);
    total += confusion(pred.labels, scene.labels.labels, k);
    if (partition) {
      auto parts = region_confusions(pred, scene.labels, k, *partition);
      for (std::size_t m = 0; m < parts.size(); ++m) regional[m] += parts[m];
    }
  }
  IoUReport report = iou(total);
  for (const auto& cm : regional) report.regions.push_back(iou(cm));
  return report;
}

/// One finished training run as seen by the report renderer.
struct RunSummary {
  std::string label;    // row key, e.g. "dst_spt" or "3x3"
  std::string variant;  // trainer variant name
  int grid_h = 3;
  int grid_w = 3;
  std::uint64_t seed = 0;
  std::string run_dir;
  double miou = 0.0;
  std::vector<double> per_class;
};

struct AblationRow {
  std::string label;
  std::string variant;
  int grid_h = 3;
  int grid_w = 3;
  std::vector<std::uint64_t> seeds;
  std::vector<double> miou;  // one per seed, seed order
  double median = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::vector<double> per_class_median;
};

struct AblationResult {
  std::string suite;  // table1, fig5 or fig6
  std::vector<AblationRow> rows;
  std::string config;  // resolved base config text

  const AblationRow& row(const std::string& label) const;
};

/// Groups runs by label (first-seen order) and fills the median/min/max.
AblationResult summarize(const std::string& suite, const std::vector<RunSummary>& runs, const std::string& config);

double median(std::vector<double> values);

/// Writes <suite>.csv and <suite>.json under `dir`, each via a temporary file
/// renamed into place. Throws ValidationError before touching disk when the
/// result has no rows.
void render_tables(const AblationResult& result, const std::filesystem::path& dir,
                   const std::vector<std::string>& class_names);

/// eval.json for a single evaluated model.
void write_eval_json(const IoUReport& report, const std::filesystem::path& path,
                     const std::vector<std::string>& class_names);

}  // namespace road
