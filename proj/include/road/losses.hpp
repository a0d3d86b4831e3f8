#pragma once

#include "road/autodiff/ops.hpp"
#include "road/errors.hpp"
#include "road/model.hpp"

#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace road {

/// Near-equal grid over an image. Cut k of n bands over L pixels is
/// floor(k * L / n), so band sizes differ by at most one pixel and the larger
/// bands sit at the end.
struct RegionPartition {
  int grid_h = 1;
  int grid_w = 1;
  int height = 0;
  int width = 0;
  std::vector<int> row_cuts;  // grid_h + 1 values, 0 .. height
  std::vector<int> col_cuts;  // grid_w + 1 values, 0 .. width

  int regions() const { return grid_h * grid_w; }
  /// Region index (row-major over the grid) of a full-image pixel.
  int region_of(int row, int col) const;
};

RegionPartition make_partition(int grid_h, int grid_w, int height, int width);

/// Flat feature-cell indices (i * fw + j) per region, in increasing order.
using RegionCells = std::vector<std::vector<Index>>;

/// Feature cell (i,j) of a crop at (crop_row, crop_col) maps to pixel
/// (crop_row + i*stride + stride/2, crop_col + j*stride + stride/2).
RegionCells split_by_region(int feat_h, int feat_w, int crop_row, int crop_col, int stride,
                            const RegionPartition& partition);

template <typename Scalar>
RegionCells split_by_region(const FeatureMap<Scalar>& fm, const RegionPartition& partition) {
  return split_by_region(static_cast<int>(fm.rows()), static_cast<int>(fm.cols()), fm.crop_row, fm.crop_col,
                         fm.feat_stride, partition);
}

/// Channel vectors routed to one region, with domain labels (0 source, 1 target).
template <typename Scalar>
struct RegionSamples {
  Var<Scalar> rows;  // [N,C]; invalid when empty
  std::vector<int> domains;
  int source = 0;
  int target = 0;

  bool empty() const { return domains.empty(); }
  bool both_domains() const { return source > 0 && target > 0; }
};

template <typename Scalar>
using RegionBatch = std::vector<RegionSamples<Scalar>>;

/// Routes every activation of every feature map to its region. Within a
/// region rows follow input order, then cell order.
template <typename Scalar>
RegionBatch<Scalar> build_region_batch(const std::vector<FeatureMap<Scalar>>& fms, const RegionPartition& partition) {
  RegionBatch<Scalar> batch(static_cast<std::size_t>(partition.regions()));
  std::vector<std::vector<Var<Scalar>>> blocks(batch.size());
  for (const auto& fm : fms) {
    const RegionCells cells = split_by_region(fm, partition);
    const int d = fm.domain == Domain::Source ? 0 : 1;
    for (std::size_t m = 0; m < cells.size(); ++m) {
      if (cells[m].empty()) continue;
      blocks[m].push_back(gather_cells(fm.features, cells[m]));
      batch[m].domains.insert(batch[m].domains.end(), cells[m].size(), d);
      (d == 0 ? batch[m].source : batch[m].target) += static_cast<int>(cells[m].size());
    }
  }
  for (std::size_t m = 0; m < batch.size(); ++m) {
    if (blocks[m].empty()) continue;
    batch[m].rows = blocks[m].size() == 1 ? blocks[m].front() : concat_rows(blocks[m]);
  }
  return batch;
}

/// Mean cross-entropy of head `region` on the samples. With `reverse` the
/// samples pass through grad_reverse first, so minimizing the result trains
/// the head and pushes the features the other way.
template <typename Scalar>
Var<Scalar> domain_classifier_loss(Graph<Scalar>& g, const RegionSamples<Scalar>& samples,
                                   DomainClassifierBank<Scalar>& bank, int region, bool reverse = true) {
  if (samples.empty()) throw ContractError("domain_classifier_loss on an empty region");
  auto in = reverse ? grad_reverse(samples.rows) : samples.rows;
  return softmax_cross_entropy(bank(g, region, in), samples.domains);
}

template <typename Scalar>
struct SpatialLoss {
  Var<Scalar> total;               // invalid when no region had both domains
  std::vector<double> per_region;  // NaN where the region was not scored
  int skipped_regions = 0;         // regions holding a single domain
  int non_empty_regions = 0;

  bool valid() const { return total.valid(); }
};

/// Sum over regions holding both domains of the region's classifier loss,
/// accumulated in region order.
template <typename Scalar>
SpatialLoss<Scalar> spatial_adaptation_loss(Graph<Scalar>& g, const RegionBatch<Scalar>& batch,
                                            DomainClassifierBank<Scalar>& bank, bool reverse = true) {
  if (static_cast<int>(batch.size()) != bank.size()) {
    throw ConfigError("region batch has " + std::to_string(batch.size()) + " regions but the bank has " +
                      std::to_string(bank.size()) + " heads");
  }
  SpatialLoss<Scalar> out;
  out.per_region.assign(batch.size(), std::numeric_limits<double>::quiet_NaN());
  std::vector<Var<Scalar>> terms;
  for (std::size_t m = 0; m < batch.size(); ++m) {
    if (batch[m].empty()) continue;
    ++out.non_empty_regions;
    if (!batch[m].both_domains()) {
      ++out.skipped_regions;
      continue;
    }
    auto loss = domain_classifier_loss(g, batch[m], bank, static_cast<int>(m), reverse);
    out.per_region[m] = static_cast<double>(loss.item());
    terms.push_back(loss);
  }
  if (!terms.empty()) {
    out.total = terms.size() == 1 ? terms.front() : weighted_sum(terms, std::vector<Scalar>(terms.size(), Scalar(1)));
  }
  return out;
}

/// Mean over positions of the per-location Euclidean distance. The teacher
/// side enters as a constant, so gradient reaches the student only.
template <typename Scalar>
Var<Scalar> distillation_loss(const FeatureMap<Scalar>& student, const FeatureMap<Scalar>& teacher) {
  if (student.features.shape() != teacher.features.shape()) {
    throw ShapeError("distillation_loss shape mismatch " + shape_string(student.features.shape()) + " vs " +
                     shape_string(teacher.features.shape()));
  }
  auto& g = student.features.graph();
  auto fixed = g.constant(teacher.features.shape(), teacher.features.value());
  return mean(l2_distance_map(student.features, fixed));
}

/// Pixel cross-entropy of [K,h,w] logits against source labels (255 ignored).
template <typename Scalar>
Var<Scalar> segmentation_loss(const Var<Scalar>& logits, std::span<const int> labels, Domain labels_domain) {
  if (labels_domain != Domain::Source) {
    throw ContractError("segmentation_loss received target-domain labels; target labels are evaluation-only");
  }
  detail::require_rank(logits.shape(), 3, "segmentation_loss logits");
  return softmax_cross_entropy(cells_to_rows(logits), labels, kIgnoreLabel);
}

struct LossReport {
  double seg = 0.0;
  double dist = 0.0;
  double spt = 0.0;
  double total = 0.0;
  std::vector<double> per_region;
  int non_empty_regions = 0;
  int skipped_regions = 0;
};

inline constexpr double kDefaultLambdaDist = 0.1;
inline constexpr double kDefaultLambdaSpt = 0.01;

/// total = seg + lambda_dist * dist + lambda_spt * spt.
LossReport road_loss(double seg, double dist, double spt, double lambda_dist = kDefaultLambdaDist,
                     double lambda_spt = kDefaultLambdaSpt);

/// Graph form of the joint objective; absent terms (invalid Vars) drop out.
template <typename Scalar>
Var<Scalar> road_loss(const Var<Scalar>& seg, const Var<Scalar>& dist, const Var<Scalar>& spt, double lambda_dist,
                      double lambda_spt) {
  if (lambda_dist < 0 || lambda_spt < 0) throw ConfigError("loss weights must be non-negative");
  std::vector<Var<Scalar>> terms{seg};
  std::vector<Scalar> weights{Scalar(1)};
  if (dist.valid()) {
    terms.push_back(dist);
    weights.push_back(static_cast<Scalar>(lambda_dist));
  }
  if (spt.valid()) {
    terms.push_back(spt);
    weights.push_back(static_cast<Scalar>(lambda_spt));
  }
  return weighted_sum(terms, weights);
}

}  // namespace road
