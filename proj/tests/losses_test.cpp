#include "road/errors.hpp"
#include "road/losses.hpp"

#include "support/gradcheck.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace road;
using road::testing::random_tensor;

namespace {

// Independent region lookup: scan the cut list linearly.
int oracle_band(const std::vector<int>& cuts, int pos) {
  for (std::size_t k = 0; k + 1 < cuts.size(); ++k) {
    if (pos >= cuts[k] && pos < cuts[k + 1]) return static_cast<int>(k);
  }
  return -1;
}

// Brute force over every cell: locate the receptive-field center and bucket it.
RegionCells oracle_split(int fh, int fw, int row, int col, int stride, const RegionPartition& p) {
  RegionCells out(static_cast<std::size_t>(p.grid_h * p.grid_w));
  for (int i = 0; i < fh; ++i)
    for (int j = 0; j < fw; ++j) {
      const int y = row + i * stride + stride / 2;
      const int x = col + j * stride + stride / 2;
      const int m = oracle_band(p.row_cuts, y) * p.grid_w + oracle_band(p.col_cuts, x);
      out[static_cast<std::size_t>(m)].push_back(static_cast<Index>(i) * fw + j);
    }
  return out;
}

FeatureMap<double> feature_map(Graph<double>& g, Tensor<double>& t, int row, int col, int stride, Domain d) {
  return {g.leaf(t), row, col, stride, d};
}

void set_all(DomainClassifierBank<double>& bank, double value) {
  for (auto& p : bank.params()) p.tensor->data().setConstant(value);
}

}  // namespace

// ---------------------------------------------------------------- partition ---

TEST(Partition, SingleRegionCoversEverything) {
  const auto p = make_partition(1, 1, 37, 91);
  EXPECT_EQ(p.regions(), 1);
  for (int y = 0; y < 37; ++y)
    for (int x = 0; x < 91; ++x) ASSERT_EQ(p.region_of(y, x), 0);
}

TEST(Partition, ThreeByThreeOn129) {
  const auto p = make_partition(3, 3, 129, 129);
  EXPECT_EQ(p.row_cuts, (std::vector<int>{0, 43, 86, 129}));
  EXPECT_EQ(p.col_cuts, (std::vector<int>{0, 43, 86, 129}));
}

TEST(Partition, TwoByOneGivesTopAndBottomBands) {
  const auto p = make_partition(2, 1, 128, 128);
  EXPECT_EQ(p.row_cuts, (std::vector<int>{0, 64, 128}));
  EXPECT_EQ(p.region_of(63, 127), 0);
  EXPECT_EQ(p.region_of(64, 0), 1);
  EXPECT_EQ(p.region_of(127, 127), 1);
}

TEST(Partition, Errors) {
  EXPECT_THROW(make_partition(0, 1, 8, 8), ConfigError);
  EXPECT_THROW(make_partition(9, 1, 8, 8), ConfigError);
  EXPECT_THROW(make_partition(1, 9, 8, 8), ConfigError);
  const auto p = make_partition(2, 2, 8, 8);
  EXPECT_THROW(p.region_of(8, 0), ContractError);
  EXPECT_THROW(p.region_of(0, -1), ContractError);
}

TEST(Partition, InvariantsOnRandomSizes) {
  Rng rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const int h = static_cast<int>(rng.uniform_int(1, 300)), w = static_cast<int>(rng.uniform_int(1, 300));
    const int gh = static_cast<int>(rng.uniform_int(1, std::min(h, 12)));
    const int gw = static_cast<int>(rng.uniform_int(1, std::min(w, 12)));
    const auto p = make_partition(gh, gw, h, w);
    for (const auto* cuts : {&p.row_cuts, &p.col_cuts}) {
      const int length = cuts == &p.row_cuts ? h : w;
      ASSERT_EQ(cuts->front(), 0);
      ASSERT_EQ(cuts->back(), length);
      int lo = length, hi = 0;
      for (std::size_t k = 1; k < cuts->size(); ++k) {
        const int size = (*cuts)[k] - (*cuts)[k - 1];
        ASSERT_GT(size, 0);
        lo = std::min(lo, size);
        hi = std::max(hi, size);
      }
      ASSERT_LE(hi - lo, 1);
    }
    std::vector<long> counts(static_cast<std::size_t>(p.regions()), 0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) ++counts[static_cast<std::size_t>(p.region_of(y, x))];
    EXPECT_EQ(std::accumulate(counts.begin(), counts.end(), 0L), static_cast<long>(h) * w);
    for (long c : counts) EXPECT_GT(c, 0);
  }
}

// ------------------------------------------------------------------- split ---

TEST(SplitByRegion, OneRegionTakesAll) {
  const auto p = make_partition(1, 1, 64, 64);
  const auto cells = split_by_region(16, 16, 0, 0, 4, p);
  ASSERT_EQ(cells.size(), 1u);
  EXPECT_EQ(cells[0].size(), 256u);
}

TEST(SplitByRegion, SixteenBySixteenOnTwoByTwo) {
  const auto p = make_partition(2, 2, 64, 64);
  const auto cells = split_by_region(16, 16, 0, 0, 4, p);
  EXPECT_EQ(cells, oracle_split(16, 16, 0, 0, 4, p));
  EXPECT_EQ(cells[0].front(), 0);
  EXPECT_EQ(cells[3].back(), 255);
  for (const auto& c : cells) EXPECT_EQ(c.size(), 64u);
}

TEST(SplitByRegion, OffsetCropInLargeImage) {
  const auto p = make_partition(3, 3, 512, 512);
  const auto cells = split_by_region(16, 16, 100, 200, 8, p);
  EXPECT_EQ(cells, oracle_split(16, 16, 100, 200, 8, p));
}

TEST(SplitByRegion, RejectsCropOutsideImage) {
  const auto p = make_partition(2, 2, 64, 64);
  EXPECT_THROW(split_by_region(16, 16, 4, 0, 4, p), ContractError);
  EXPECT_THROW(split_by_region(16, 16, 0, -4, 4, p), ContractError);
}

TEST(SplitByRegion, MatchesOracleOnThousandConfigs) {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const int stride = static_cast<int>(rng.uniform_int(1, 8));
    const int fh = static_cast<int>(rng.uniform_int(1, 20)), fw = static_cast<int>(rng.uniform_int(1, 20));
    const int h = fh * stride + static_cast<int>(rng.uniform_int(0, 60));
    const int w = fw * stride + static_cast<int>(rng.uniform_int(0, 60));
    const int row = static_cast<int>(rng.uniform_int(0, h - fh * stride));
    const int col = static_cast<int>(rng.uniform_int(0, w - fw * stride));
    const auto p = make_partition(static_cast<int>(rng.uniform_int(1, std::min(h, 5))),
                                  static_cast<int>(rng.uniform_int(1, std::min(w, 5))), h, w);
    const auto cells = split_by_region(fh, fw, row, col, stride, p);
    ASSERT_EQ(cells, oracle_split(fh, fw, row, col, stride, p)) << "trial " << trial;
    std::size_t total = 0;
    for (const auto& c : cells) total += c.size();
    ASSERT_EQ(total, static_cast<std::size_t>(fh) * fw);
  }
}

TEST(RegionBatch, EveryActivationAppearsOnce) {
  Rng rng(5);
  Graph<double> g;
  auto a = random_tensor(rng, {3, 4, 4}), b = random_tensor(rng, {3, 4, 4});
  std::vector<FeatureMap<double>> fms{feature_map(g, a, 0, 0, 4, Domain::Source),
                                      feature_map(g, b, 16, 8, 4, Domain::Target)};
  const auto p = make_partition(2, 2, 32, 32);
  const auto batch = build_region_batch(fms, p);
  int rows = 0, source = 0, target = 0;
  std::vector<double> seen;
  for (const auto& r : batch) {
    if (r.empty()) continue;
    rows += static_cast<int>(r.rows.dim(0));
    source += r.source;
    target += r.target;
    ASSERT_EQ(static_cast<std::size_t>(r.rows.dim(0)), r.domains.size());
    for (Index i = 0; i < r.rows.size(); ++i) seen.push_back(r.rows.value()[i]);
  }
  EXPECT_EQ(rows, 32);
  EXPECT_EQ(source, 16);
  EXPECT_EQ(target, 16);
  std::vector<double> all;
  for (const auto* t : {&a, &b})
    for (Index i = 0; i < t->size(); ++i) all.push_back((*t)[i]);
  std::sort(seen.begin(), seen.end());
  std::sort(all.begin(), all.end());
  EXPECT_EQ(seen, all);
}

// ------------------------------------------------------------ distillation ---

TEST(Distillation, IdenticalMapsGiveZero) {
  Rng rng(1);
  Graph<double> g;
  auto s = random_tensor(rng, {4, 3, 3});
  Tensor<double> t = s;
  t.set_requires_grad(false);
  EXPECT_DOUBLE_EQ(distillation_loss(feature_map(g, s, 0, 0, 1, Domain::Target),
                                     feature_map(g, t, 0, 0, 1, Domain::Target))
                       .item(),
                   0.0);
}

TEST(Distillation, ThreeFourFive) {
  Graph<double> g;
  auto s = Tensor<double>::from({2, 1, 1}, {3, 4}, true);
  auto t = Tensor<double>::from({2, 1, 1}, {0, 0});
  EXPECT_DOUBLE_EQ(distillation_loss(feature_map(g, s, 0, 0, 1, Domain::Target),
                                     feature_map(g, t, 0, 0, 1, Domain::Target))
                       .item(),
                   5.0);
}

TEST(Distillation, MeanOverPositions) {
  Graph<double> g;
  auto s = Tensor<double>::from({2, 1, 2}, {3, 0, 4, 3}, true);
  auto t = Tensor<double>::from({2, 1, 2}, {0, 0, 0, 0});
  EXPECT_DOUBLE_EQ(distillation_loss(feature_map(g, s, 0, 0, 1, Domain::Target),
                                     feature_map(g, t, 0, 0, 1, Domain::Target))
                       .item(),
                   4.0);
}

TEST(Distillation, GradientReachesStudentOnly) {
  Rng rng(9);
  Graph<double> g;
  auto s = random_tensor(rng, {3, 2, 2});
  auto t = random_tensor(rng, {3, 2, 2});
  auto loss = distillation_loss(feature_map(g, s, 0, 0, 1, Domain::Target), feature_map(g, t, 0, 0, 1, Domain::Target));
  const auto grads = g.backward(loss);
  EXPECT_TRUE(grads.count(&s));
  EXPECT_FALSE(grads.count(&t));
}

TEST(Distillation, ShapeMismatch) {
  Rng rng(2);
  Graph<double> g;
  auto s = random_tensor(rng, {3, 2, 2});
  auto t = random_tensor(rng, {3, 2, 1});
  EXPECT_THROW(distillation_loss(feature_map(g, s, 0, 0, 1, Domain::Target), feature_map(g, t, 0, 0, 1, Domain::Target)),
               ShapeError);
}

TEST(Distillation, StepDecreasesLoss) {
  Rng rng(31);
  BackboneConfig cfg;
  cfg.widths = {4, 6, 8};
  StudentModel<double> student(cfg, 3, rng);
  TeacherModel<double> teacher(Backbone<double>(cfg, rng));
  auto crop = Crop<double>{random_tensor(rng, {3, 16, 16}, false), 0, 0, Domain::Target};
  auto eval = [&] {
    Graph<double> g;
    auto loss = distillation_loss(student.forward_features(g, crop), teacher.forward_features(g, crop));
    return std::make_pair(loss.item(), g.backward(loss));
  };
  auto [before, grads] = eval();
  for (auto& p : student.params()) {
    auto it = grads.find(p.tensor);
    if (it != grads.end()) p.tensor->data() -= 1e-4 * it->second;
  }
  EXPECT_LT(eval().first, before);
}

// ------------------------------------------------------- domain classifier ---

TEST(DomainClassifier, UniformHeadGivesLn2) {
  Rng rng(3);
  DomainClassifierBank<double> bank(1, 4, rng);
  set_all(bank, 0.0);
  Graph<double> g;
  auto x = random_tensor(rng, {4, 2, 3});
  auto batch = build_region_batch<double>({feature_map(g, x, 0, 0, 1, Domain::Source)}, make_partition(1, 1, 2, 3));
  EXPECT_NEAR(domain_classifier_loss(g, batch[0], bank, 0).item(), std::log(2.0), 1e-12);
}

TEST(DomainClassifier, SeparatedBatchGivesZero) {
  Rng rng(4);
  DomainClassifierBank<double> bank(1, 1, rng);
  set_all(bank, 0.0);
  auto params = bank.params();
  // hidden 0 = relu(x) votes target, hidden 1 = relu(-x) votes source
  (*params[0].tensor)[0] = 1.0;
  (*params[0].tensor)[1] = -1.0;
  (*params[2].tensor)[0 * 2 + 1] = 1000.0;
  (*params[2].tensor)[1 * 2 + 0] = 1000.0;
  Graph<double> g;
  auto s = Tensor<double>::from({1, 1, 2}, {-1, -2});
  auto t = Tensor<double>::from({1, 1, 2}, {1, 3});
  auto batch = build_region_batch<double>(
      {feature_map(g, s, 0, 0, 1, Domain::Source), feature_map(g, t, 0, 0, 1, Domain::Target)},
      make_partition(1, 1, 1, 2));
  EXPECT_NEAR(domain_classifier_loss(g, batch[0], bank, 0).item(), 0.0, 1e-12);
}

TEST(DomainClassifier, ReversalNegatesFeatureGradient) {
  Rng rng(6);
  DomainClassifierBank<double> bank(1, 5, rng);
  auto s = random_tensor(rng, {5, 3, 3});
  auto t = random_tensor(rng, {5, 3, 3});
  auto grads = [&](bool reverse) {
    Graph<double> g;
    auto batch = build_region_batch<double>(
        {feature_map(g, s, 0, 0, 1, Domain::Source), feature_map(g, t, 0, 0, 1, Domain::Target)},
        make_partition(1, 1, 3, 3));
    return g.backward(domain_classifier_loss(g, batch[0], bank, 0, reverse));
  };
  const auto with = grads(true), without = grads(false);
  for (const auto* x : {&s, &t}) {
    EXPECT_TRUE(with.at(x).isApprox(-without.at(x)));
    EXPECT_LT((with.at(x) + without.at(x)).abs().maxCoeff(), 1e-15);
  }
  for (const auto& p : bank.params()) EXPECT_EQ((with.at(p.tensor) - without.at(p.tensor)).abs().maxCoeff(), 0.0);
}

TEST(DomainClassifier, EmptyRegionIsAContractError) {
  Rng rng(7);
  DomainClassifierBank<double> bank(1, 2, rng);
  Graph<double> g;
  EXPECT_THROW(domain_classifier_loss(g, RegionSamples<double>{}, bank, 0), ContractError);
}

// --------------------------------------------------------- spatial loss ---

TEST(SpatialLoss, TwoUniformRegionsGiveTwoLn2) {
  Rng rng(8);
  DomainClassifierBank<double> bank(2, 3, rng);
  set_all(bank, 0.0);
  Graph<double> g;
  auto s = random_tensor(rng, {3, 2, 2});
  auto t = random_tensor(rng, {3, 2, 2});
  const auto p = make_partition(2, 1, 2, 2);
  auto batch = build_region_batch<double>(
      {feature_map(g, s, 0, 0, 1, Domain::Source), feature_map(g, t, 0, 0, 1, Domain::Target)}, p);
  auto loss = spatial_adaptation_loss(g, batch, bank);
  EXPECT_NEAR(loss.total.item(), 2 * std::log(2.0), 1e-12);
  EXPECT_EQ(loss.non_empty_regions, 2);
  EXPECT_EQ(loss.skipped_regions, 0);
}

TEST(SpatialLoss, SingleRegionEqualsPooledClassifierLoss) {
  Rng rng(10);
  DomainClassifierBank<double> bank(1, 4, rng);
  Graph<double> g;
  auto s = random_tensor(rng, {4, 4, 4});
  auto t = random_tensor(rng, {4, 4, 4});
  auto batch = build_region_batch<double>(
      {feature_map(g, s, 0, 0, 4, Domain::Source), feature_map(g, t, 0, 0, 4, Domain::Target)},
      make_partition(1, 1, 16, 16));
  const double spatial = spatial_adaptation_loss(g, batch, bank).total.item();
  const double pooled = domain_classifier_loss(g, batch[0], bank, 0).item();
  EXPECT_NEAR(spatial, pooled, 1e-12);
}

TEST(SpatialLoss, PermutationInvariantWithinRegion) {
  Rng rng(12);
  DomainClassifierBank<double> bank(1, 6, rng);
  const Index n = 40;
  auto rows = random_tensor(rng, {n, 6});
  std::vector<int> domains(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) domains[i] = static_cast<int>(i % 3 == 0);
  auto loss_for = [&](const std::vector<Index>& order) {
    Graph<double> g;
    Buffer<double> buf(rows.size());
    std::vector<int> d;
    for (Index i = 0; i < n; ++i) {
      for (Index c = 0; c < 6; ++c) buf[i * 6 + c] = rows[order[i] * 6 + c];
      d.push_back(domains[order[i]]);
    }
    RegionSamples<double> samples{g.constant({n, 6}, buf), d, 0, 0};
    for (int v : d) (v ? samples.target : samples.source)++;
    return spatial_adaptation_loss(g, RegionBatch<double>{samples}, bank).total.item();
  };
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const double base = loss_for(order);
  for (int trial = 0; trial < 20; ++trial) {
    for (Index i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);
    EXPECT_NEAR(loss_for(order), base, 1e-9);
  }
}

TEST(SpatialLoss, OneSidedRegionsAreSkippedAndCounted) {
  Rng rng(13);
  DomainClassifierBank<double> bank(4, 2, rng);
  Graph<double> g;
  auto s = random_tensor(rng, {2, 2, 4});  // covers the top band only
  auto t = random_tensor(rng, {2, 4, 4});  // covers everything
  const auto p = make_partition(2, 2, 4, 4);
  auto batch = build_region_batch<double>(
      {feature_map(g, s, 0, 0, 1, Domain::Source), feature_map(g, t, 0, 0, 1, Domain::Target)}, p);
  auto loss = spatial_adaptation_loss(g, batch, bank);
  EXPECT_EQ(loss.non_empty_regions, 4);
  EXPECT_EQ(loss.skipped_regions, 2);
  EXPECT_FALSE(std::isnan(loss.per_region[0]));
  EXPECT_TRUE(std::isnan(loss.per_region[2]));
  EXPECT_NEAR(loss.total.item(), loss.per_region[0] + loss.per_region[1], 1e-12);
}

TEST(SpatialLoss, NoMixedRegionLeavesTotalInvalid) {
  Rng rng(14);
  DomainClassifierBank<double> bank(1, 2, rng);
  Graph<double> g;
  auto s = random_tensor(rng, {2, 2, 2});
  auto batch = build_region_batch<double>({feature_map(g, s, 0, 0, 1, Domain::Source)}, make_partition(1, 1, 2, 2));
  auto loss = spatial_adaptation_loss(g, batch, bank);
  EXPECT_FALSE(loss.valid());
  EXPECT_EQ(loss.skipped_regions, 1);
}

TEST(SpatialLoss, BankSizeMustMatch) {
  Rng rng(15);
  DomainClassifierBank<double> bank(2, 2, rng);
  Graph<double> g;
  EXPECT_THROW(spatial_adaptation_loss(g, RegionBatch<double>(3), bank), ConfigError);
}

// The adversarial sign contract: on a fixed minibatch, a descent step on the
// spatial loss lowers the (un-reversed) classifier loss through the heads and
// raises it through the backbone.
TEST(SpatialLoss, AdversarialSignContract) {
  Rng rng(16);
  BackboneConfig cfg;
  cfg.widths = {4, 6, 8};
  StudentModel<double> student(cfg, 3, rng);
  DomainClassifierBank<double> bank(4, 8, rng);
  const auto p = make_partition(2, 2, 32, 32);
  std::vector<Crop<double>> crops;
  for (int i = 0; i < 4; ++i) {
    auto px = random_tensor(rng, {3, 16, 16}, false);
    if (i >= 2) px.data() = px.data() * 1.5 + 0.3;
    crops.push_back({px, 8 * (i % 3), 4 * i, i < 2 ? Domain::Source : Domain::Target});
  }
  auto classifier_loss = [&](bool reverse) {
    Graph<double> g;
    std::vector<FeatureMap<double>> fms;
    for (const auto& c : crops) fms.push_back(student.forward_features(g, c));
    auto batch = build_region_batch(fms, p);
    auto loss = spatial_adaptation_loss(g, batch, bank, reverse);
    return std::make_pair(loss.total.item(), g.backward(loss.total));
  };
  auto [before, grads] = classifier_loss(true);
  const double lr = 1e-3;
  auto step = [&](std::vector<NamedParam<double>> params, double sign) {
    for (auto& q : params) {
      auto it = grads.find(q.tensor);
      if (it != grads.end()) q.tensor->data() -= sign * lr * it->second;
    }
  };
  step(bank.params(), 1.0);
  const double heads_only = classifier_loss(false).first;
  EXPECT_LT(heads_only, before);
  step(bank.params(), -1.0);
  step(student.params(), 1.0);
  const double backbone_only = classifier_loss(false).first;
  EXPECT_GT(backbone_only, before);
}

// ------------------------------------------------------------ segmentation ---

TEST(SegmentationLoss, StronglyCorrectIsZero) {
  Graph<double> g;
  Buffer<double> buf = Buffer<double>::Zero(3 * 4);
  std::vector<int> labels{0, 1, 2, 1};
  for (int i = 0; i < 4; ++i) buf[labels[i] * 4 + i] = 100.0;
  auto logits = g.constant({3, 2, 2}, buf);
  EXPECT_NEAR(segmentation_loss(logits, labels, Domain::Source).item(), 0.0, 1e-12);
}

TEST(SegmentationLoss, UniformFiveClasses) {
  Graph<double> g;
  auto logits = g.constant({5, 2, 3}, Buffer<double>::Zero(30));
  std::vector<int> labels{0, 1, 2, 3, 4, 0};
  EXPECT_NEAR(segmentation_loss(logits, labels, Domain::Source).item(), std::log(5.0), 1e-12);
}

TEST(SegmentationLoss, AllIgnoredGivesZeroAndZeroGradient) {
  Rng rng(17);
  Graph<double> g;
  auto t = random_tensor(rng, {5, 2, 2});
  std::vector<int> labels(4, kIgnoreLabel);
  auto loss = segmentation_loss(g.leaf(t), labels, Domain::Source);
  EXPECT_EQ(loss.item(), 0.0);
  const auto grads = g.backward(loss);
  EXPECT_EQ(grads.at(&t).abs().maxCoeff(), 0.0);
}

TEST(SegmentationLoss, TargetLabelsAreRejected) {
  Graph<double> g;
  auto logits = g.constant({2, 1, 1}, Buffer<double>::Zero(2));
  std::vector<int> labels{0};
  EXPECT_THROW(segmentation_loss(logits, labels, Domain::Target), ContractError);
}

// --------------------------------------------------------------- road loss ---

TEST(RoadLoss, DefaultsExample) {
  const auto r = road_loss(1.0, 2.0, 3.0, 0.1, 0.01);
  EXPECT_NEAR(r.total, 1.23, 1e-12);
  EXPECT_DOUBLE_EQ(road_loss(1.0, 2.0, 3.0).total, r.total);
}

TEST(RoadLoss, DegenerateCases) {
  EXPECT_EQ(road_loss(0.7, 2.0, 3.0, 0.0, 0.0).total, 0.7);
  EXPECT_EQ(road_loss(0.7, 0.0, 0.0).total, 0.7);
  EXPECT_THROW(road_loss(1, 1, 1, -0.1, 0.01), ConfigError);
  EXPECT_THROW(road_loss(1, 1, 1, 0.1, -0.01), ConfigError);
  EXPECT_THROW(road_loss(std::nan(""), 1, 1), ValidationError);
}

TEST(RoadLoss, DoublingLambdaDoublesDistContribution) {
  Rng rng(18);
  for (int i = 0; i < 50; ++i) {
    const double seg = rng.uniform(0, 3), dist = rng.uniform(0, 10), spt = rng.uniform(0, 20);
    const double l1 = rng.uniform(0, 1), l2 = rng.uniform(0, 1);
    const double base = road_loss(seg, dist, spt, l1, l2).total - road_loss(seg, 0, spt, l1, l2).total;
    const double doubled = road_loss(seg, dist, spt, 2 * l1, l2).total - road_loss(seg, 0, spt, 2 * l1, l2).total;
    EXPECT_NEAR(doubled, 2 * base, 1e-12 * std::max(1.0, doubled));
  }
}

TEST(RoadLoss, GraphFormMatchesScalarForm) {
  Graph<double> g;
  auto seg = g.constant({1}, Buffer<double>::Constant(1, 1.0));
  auto dist = g.constant({1}, Buffer<double>::Constant(1, 2.0));
  auto spt = g.constant({1}, Buffer<double>::Constant(1, 3.0));
  EXPECT_NEAR(road_loss(seg, dist, spt, 0.1, 0.01).item(), 1.23, 1e-12);
  EXPECT_EQ(road_loss(seg, Var<double>{}, Var<double>{}, 0.1, 0.01).item(), 1.0);
}
