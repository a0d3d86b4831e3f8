#include "road/losses.hpp"

#include <algorithm>

namespace road {

namespace {

std::vector<int> cuts(int bands, int length) {
  std::vector<int> out(static_cast<std::size_t>(bands) + 1);
  for (int k = 0; k <= bands; ++k) {
    out[static_cast<std::size_t>(k)] =
        static_cast<int>(static_cast<long long>(k) * length / bands);
  }
  return out;
}

int band_of(const std::vector<int>& cut, int pos) {
  return static_cast<int>(std::upper_bound(cut.begin(), cut.end(), pos) - cut.begin()) - 1;
}

}  // namespace

int RegionPartition::region_of(int row, int col) const {
  if (row < 0 || row >= height || col < 0 || col >= width) {
    throw ContractError("pixel (" + std::to_string(row) + "," + std::to_string(col) + ") outside partition");
  }
  return band_of(row_cuts, row) * grid_w + band_of(col_cuts, col);
}

RegionPartition make_partition(int grid_h, int grid_w, int height, int width) {
  if (height < 1 || width < 1) throw ConfigError("partition image size must be positive");
  if (grid_h < 1 || grid_w < 1 || grid_h > height || grid_w > width) {
    throw ConfigError("grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) + " does not fit a " +
                      std::to_string(height) + "x" + std::to_string(width) + " image");
  }
  return {grid_h, grid_w, height, width, cuts(grid_h, height), cuts(grid_w, width)};
}

RegionCells split_by_region(int feat_h, int feat_w, int crop_row, int crop_col, int stride,
                            const RegionPartition& partition) {
  if (stride < 1 || feat_h < 1 || feat_w < 1) throw ContractError("split_by_region needs a positive feature grid");
  if (crop_row < 0 || crop_col < 0 || crop_row + feat_h * stride > partition.height ||
      crop_col + feat_w * stride > partition.width) {
    throw ContractError("crop at (" + std::to_string(crop_row) + "," + std::to_string(crop_col) + ") with extent " +
                        std::to_string(feat_h * stride) + "x" + std::to_string(feat_w * stride) +
                        " lies outside the " + std::to_string(partition.height) + "x" +
                        std::to_string(partition.width) + " image");
  }
  std::vector<int> col_band(static_cast<std::size_t>(feat_w));
  for (int j = 0; j < feat_w; ++j) col_band[j] = band_of(partition.col_cuts, crop_col + j * stride + stride / 2);
  RegionCells out(static_cast<std::size_t>(partition.regions()));
  for (int i = 0; i < feat_h; ++i) {
    const int rb = band_of(partition.row_cuts, crop_row + i * stride + stride / 2);
    for (int j = 0; j < feat_w; ++j) {
      out[static_cast<std::size_t>(rb * partition.grid_w + col_band[j])].push_back(static_cast<Index>(i) * feat_w + j);
    }
  }
  return out;
}

LossReport road_loss(double seg, double dist, double spt, double lambda_dist, double lambda_spt) {
  if (lambda_dist < 0 || lambda_spt < 0) throw ConfigError("loss weights must be non-negative");
  if (!std::isfinite(seg) || !std::isfinite(dist) || !std::isfinite(spt)) {
    throw ValidationError("road_loss terms must be finite");
  }
  LossReport r;
  r.seg = seg;
  r.dist = dist;
  r.spt = spt;
  r.total = seg + lambda_dist * dist + lambda_spt * spt;
  return r;
}

}  // namespace road
