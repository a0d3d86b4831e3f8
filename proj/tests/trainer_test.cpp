#include "road/errors.hpp"
#include "road/trainer.hpp"

#include <gtest/gtest.h>

#include <unistd.h>

#include <cmath>
#include <fstream>
#include <sstream>

using namespace road;
namespace fs = std::filesystem;

namespace {

BackboneConfig tiny_backbone() {
  BackboneConfig b;
  b.widths = {4, 6, 8};
  return b;
}

std::vector<Scene> scenes(Style style, std::uint64_t first, int n, bool labels = true) {
  std::vector<Scene> out;
  for (int i = 0; i < n; ++i) {
    SceneConfig c;
    c.height = c.width = 32;
    c.style = style;
    c.seed = first + static_cast<std::uint64_t>(i);
    out.push_back(generate_scene(c));
    if (!labels) out.back().labels.labels.clear();
  }
  return out;
}

TrainData tiny_data(std::uint64_t target_first = 100) {
  TrainData d;
  d.source = scenes(Style::SourceSynthetic, 0, 6);
  d.target = scenes(Style::TargetReal, target_first, 6, false);
  d.val = scenes(Style::TargetReal, 500, 3);
  return d;
}

TrainConfig tiny_config(Variant v) {
  TrainConfig c;
  c.variant = v;
  c.backbone = tiny_backbone();
  c.crop = 16;
  c.batch = 4;
  c.source_patches = 2;
  c.iterations = 12;
  c.validate_every = 6;
  c.base_lr = 1e-3;
  return c;
}

TeacherModel<float> tiny_teacher() {
  Rng rng(77);
  return TeacherModel<float>(Backbone<float>(tiny_backbone(), rng));
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("road_trainer_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<float>> snapshot(StudentModel<float>& m) {
  std::vector<std::vector<float>> out;
  for (const auto& p : m.params()) out.emplace_back(p.tensor->data().data(), p.tensor->data().data() + p.tensor->size());
  return out;
}

}  // namespace

// ------------------------------------------------------------------ config ---

TEST(Variant, NamesRoundTrip) {
  for (Variant v : {Variant::NonAdapt, Variant::Dst, Variant::Spt, Variant::DstSpt, Variant::FrozenK,
                    Variant::SourceDistill}) {
    EXPECT_EQ(parse_variant(variant_name(v)), v);
  }
  EXPECT_THROW(parse_variant("road"), ConfigError);
}

TEST(Variant, TermFlags) {
  EXPECT_FALSE(uses_distillation(Variant::NonAdapt));
  EXPECT_FALSE(uses_spatial(Variant::NonAdapt));
  EXPECT_TRUE(uses_distillation(Variant::Dst));
  EXPECT_FALSE(uses_spatial(Variant::Dst));
  EXPECT_TRUE(uses_spatial(Variant::Spt));
  EXPECT_TRUE(uses_distillation(Variant::DstSpt) && uses_spatial(Variant::DstSpt));
  EXPECT_TRUE(uses_distillation(Variant::SourceDistill));
  EXPECT_FALSE(uses_target(Variant::SourceDistill));
  EXPECT_FALSE(uses_target(Variant::FrozenK));
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.target_patches(), 5);
  auto expect_bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  expect_bad([](TrainConfig& c) { c.source_patches = 11; });
  expect_bad([](TrainConfig& c) { c.source_patches = 10; });  // dst_spt needs target patches
  expect_bad([](TrainConfig& c) { c.lambda_dist = -1; });
  expect_bad([](TrainConfig& c) { c.crop = 62; });
  expect_bad([](TrainConfig& c) { c.iterations = 0; });
  expect_bad([](TrainConfig& c) { c.frozen_k = 4; });
  expect_bad([](TrainConfig& c) { c.grid_h = 0; });
  TrainConfig source_only;
  source_only.variant = Variant::NonAdapt;
  source_only.source_patches = 10;
  EXPECT_NO_THROW(source_only.validate());
}

TEST(TrainConfig, HashCoversEveryField) {
  const TrainConfig base;
  EXPECT_EQ(base.hash(), TrainConfig{}.hash());
  std::vector<TrainConfig> changed(6, base);
  changed[0].variant = Variant::Spt;
  changed[1].grid_w = 2;
  changed[2].lambda_spt = 0.02;
  changed[3].seed = 1;
  changed[4].backbone.dilations = {1, 2, 2};
  changed[5].head_lr_mult = 2;
  for (const auto& c : changed) EXPECT_NE(c.hash(), base.hash());
}

// -------------------------------------------------------------- schedule ---

TEST(PolyLr, Endpoints) {
  EXPECT_EQ(poly_lr(0, 2000, 2.5e-4, 0.9), 2.5e-4);
  EXPECT_EQ(poly_lr(2000, 2000, 2.5e-4, 0.9), 0.0);
}

TEST(PolyLr, Midpoint) {
  const double expected = 2.5e-4 * std::exp(0.9 * std::log(0.5));
  EXPECT_NEAR(poly_lr(1000, 2000, 2.5e-4, 0.9), expected, 1e-18);
  EXPECT_NEAR(poly_lr(1000, 2000, 2.5e-4, 0.9), 1.3398e-4, 1e-8);  // 1.33972e-4
}

TEST(PolyLr, Errors) {
  EXPECT_THROW(poly_lr(0, 0, 1.0, 0.9), ConfigError);
  EXPECT_THROW(poly_lr(5, 4, 1.0, 0.9), ConfigError);
}

// --------------------------------------------------------------- batches ---

TEST(SampleBatch, CompositionAndLabels) {
  TrainData data = tiny_data();
  TrainConfig c = tiny_config(Variant::DstSpt);
  c.batch = 10;
  c.source_patches = 5;
  Rng rng(1);
  const Batch b = sample_batch(data, c, rng);
  ASSERT_EQ(b.source.size(), 5u);
  ASSERT_EQ(b.target.size(), 5u);
  for (const auto& p : b.source) {
    EXPECT_EQ(p.crop.domain, Domain::Source);
    EXPECT_EQ(p.labels.size(), 16u * 16u);
  }
  for (const auto& p : b.target) {
    EXPECT_EQ(p.crop.domain, Domain::Target);
    EXPECT_TRUE(p.labels.empty());
  }
}

TEST(SampleBatch, OffsetsAlignToStride) {
  TrainData data = tiny_data();
  TrainConfig c = tiny_config(Variant::DstSpt);
  Rng rng(2);
  std::set<int> rows;
  for (int i = 0; i < 50; ++i) {
    for (const auto& p : sample_batch(data, c, rng).source) {
      EXPECT_EQ(p.crop.row % 4, 0);
      EXPECT_EQ(p.crop.col % 4, 0);
      EXPECT_LE(p.crop.row + 16, 32);
      rows.insert(p.crop.row);
    }
  }
  EXPECT_EQ(rows.size(), 5u);  // 0,4,...,16
}

TEST(SampleBatch, FullImageCropSitsAtOrigin) {
  TrainData data = tiny_data();
  TrainConfig c = tiny_config(Variant::DstSpt);
  c.crop = 32;
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    const Batch b = sample_batch(data, c, rng);
    for (const auto* group : {&b.source, &b.target})
      for (const auto& p : *group) {
        EXPECT_EQ(p.crop.row, 0);
        EXPECT_EQ(p.crop.col, 0);
      }
  }
}

TEST(SampleBatch, DeterministicForSeed) {
  TrainData data = tiny_data();
  TrainConfig c = tiny_config(Variant::DstSpt);
  Rng a(9), b(9);
  for (int i = 0; i < 5; ++i) {
    const Batch x = sample_batch(data, c, a), y = sample_batch(data, c, b);
    for (std::size_t k = 0; k < x.source.size(); ++k) {
      EXPECT_EQ(x.source[k].crop.row, y.source[k].crop.row);
      EXPECT_TRUE((x.source[k].crop.pixels.data() == y.source[k].crop.pixels.data()).all());
    }
  }
}

TEST(SampleBatch, CropLargerThanImage) {
  TrainData data = tiny_data();
  TrainConfig c = tiny_config(Variant::DstSpt);
  c.crop = 64;
  Rng rng(4);
  EXPECT_THROW(sample_batch(data, c, rng), ConfigError);
}

// ----------------------------------------------------------------- train ---

TEST(Train, NonAdaptLogsZeroAdaptationTerms) {
  const auto dir = fresh_dir("nonadapt");
  TrainOptions o;
  o.run_dir = dir;
  const auto r = train(tiny_config(Variant::NonAdapt), tiny_data(), tiny_teacher(), o);
  ASSERT_EQ(r.metrics.size(), 12u);
  for (const auto& m : r.metrics) {
    EXPECT_EQ(m.loss.dist, 0.0);
    EXPECT_EQ(m.loss.spt, 0.0);
    EXPECT_EQ(m.loss.total, m.loss.seg);
  }
  EXPECT_TRUE(r.completed);
  EXPECT_TRUE(fs::exists(dir / "final.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "eval.json"));
  fs::remove_all(dir);
}

TEST(Train, MetricsBookkeeping) {
  const auto dir = fresh_dir("bookkeeping");
  TrainOptions o;
  o.run_dir = dir;
  const TrainConfig c = tiny_config(Variant::DstSpt);
  const auto r = train(c, tiny_data(), tiny_teacher(), o);
  int last = -1;
  for (const auto& m : r.metrics) {
    EXPECT_GT(m.iteration, last);
    last = m.iteration;
    EXPECT_EQ(m.lr, poly_lr(m.iteration, c.iterations, c.base_lr, c.lr_power));
    const double recomputed = m.loss.seg + c.lambda_dist * m.loss.dist + c.lambda_spt * m.loss.spt;
    EXPECT_NEAR(m.loss.total, recomputed, 1e-9 * std::abs(recomputed));
    EXPECT_EQ(m.loss.per_region.size(), 9u);
    // the student starts as a copy of the teacher
    if (m.iteration == 0) {
      EXPECT_EQ(m.loss.dist, 0.0);
    } else {
      EXPECT_GT(m.loss.dist, 0.0);
    }
  }
  ASSERT_EQ(r.validation.size(), 2u);
  EXPECT_EQ(r.validation[0].first, 6);
  EXPECT_EQ(r.validation[1].first, 12);

  std::ifstream in(dir / "metrics.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "iteration,lr,seg,dist,spt,total,skipped_regions");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 12);
  fs::remove_all(dir);
}

TEST(Train, TeacherStaysFrozen) {
  const auto dir = fresh_dir("frozen_teacher");
  TeacherModel<float> teacher = tiny_teacher();
  const auto before = teacher.checksum();
  TrainOptions o;
  o.run_dir = dir;
  train(tiny_config(Variant::DstSpt), tiny_data(), teacher, o);
  EXPECT_EQ(teacher.checksum(), before);
  fs::remove_all(dir);
}

TEST(Train, RepeatedRunIsBitwiseIdentical) {
  const auto a = fresh_dir("repeat_a"), b = fresh_dir("repeat_b");
  TrainOptions o;
  o.run_dir = a;
  auto ra = train(tiny_config(Variant::DstSpt), tiny_data(), tiny_teacher(), o);
  o.run_dir = b;
  auto rb = train(tiny_config(Variant::DstSpt), tiny_data(), tiny_teacher(), o);
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  EXPECT_EQ(snapshot(ra.student), snapshot(rb.student));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const auto full = fresh_dir("resume_full"), split = fresh_dir("resume_split");
  const TrainConfig c = tiny_config(Variant::DstSpt);
  TrainOptions o;
  o.run_dir = full;
  auto whole = train(c, tiny_data(), tiny_teacher(), o);

  o.run_dir = split;
  o.stop_after = 5;
  auto first = train(c, tiny_data(), tiny_teacher(), o);
  EXPECT_FALSE(first.completed);
  ASSERT_TRUE(fs::exists(split / "checkpoint.ckpt"));
  // rows past the checkpoint and a torn row from a killed writer
  std::ofstream(split / "metrics.csv", std::ios::app) << "5,0.001,1,2,3,4,0\n6,0.00";
  o.stop_after.reset();
  o.resume_from = split / "checkpoint.ckpt";
  auto rest = train(c, tiny_data(), tiny_teacher(), o);
  EXPECT_TRUE(rest.completed);
  EXPECT_EQ(snapshot(rest.student), snapshot(whole.student));
  EXPECT_EQ(slurp(split / "metrics.csv"), slurp(full / "metrics.csv"));
  EXPECT_EQ(slurp(split / "validation.csv"), slurp(full / "validation.csv"));
  fs::remove_all(full);
  fs::remove_all(split);
}

TEST(Train, CheckpointForOtherConfigIsRejected) {
  const auto dir = fresh_dir("hash");
  TrainOptions o;
  o.run_dir = dir;
  o.stop_after = 2;
  train(tiny_config(Variant::DstSpt), tiny_data(), tiny_teacher(), o);
  TrainConfig other = tiny_config(Variant::DstSpt);
  other.lambda_dist = 0.2;
  o.stop_after.reset();
  o.resume_from = dir / "checkpoint.ckpt";
  EXPECT_THROW(train(other, tiny_data(), tiny_teacher(), o), ConfigError);
  fs::remove_all(dir);
}

TEST(Train, ZeroLambdasIgnoreTargetContent) {
  const auto a = fresh_dir("lambda0_a"), b = fresh_dir("lambda0_b");
  TrainConfig c = tiny_config(Variant::DstSpt);
  c.lambda_dist = 0.0;
  c.lambda_spt = 0.0;
  TrainOptions o;
  o.run_dir = a;
  auto ra = train(c, tiny_data(100), tiny_teacher(), o);
  o.run_dir = b;
  auto rb = train(c, tiny_data(900), tiny_teacher(), o);
  EXPECT_EQ(snapshot(ra.student), snapshot(rb.student));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Train, FrozenStagesDoNotMove) {
  const auto dir = fresh_dir("frozen_k");
  TrainConfig c = tiny_config(Variant::FrozenK);
  TeacherModel<float> teacher = tiny_teacher();
  TrainOptions o;
  o.run_dir = dir;
  auto r = train(c, tiny_data(), teacher, o);
  auto after = r.student.params();
  auto start = teacher.params();
  for (std::size_t i = 0; i < start.size(); ++i) {
    const bool frozen = after[i].name.rfind("backbone.stage0", 0) == 0 || after[i].name.rfind("backbone.stage1", 0) == 0;
    const bool same = (after[i].tensor->data() == start[i].tensor->data()).all();
    EXPECT_EQ(same, frozen) << after[i].name;
  }
  fs::remove_all(dir);
}

TEST(Train, DivergenceAbortsWithSnapshot) {
  const auto dir = fresh_dir("diverge");
  TrainConfig c = tiny_config(Variant::NonAdapt);
  c.base_lr = 1e8;
  TrainOptions o;
  o.run_dir = dir;
  EXPECT_THROW(train(c, tiny_data(), tiny_teacher(), o), DivergenceError);
  EXPECT_TRUE(fs::exists(dir / "diverged.ckpt"));
  fs::remove_all(dir);
}

TEST(Train, RejectsMismatchedTeacher) {
  const auto dir = fresh_dir("mismatch");
  Rng rng(1);
  TeacherModel<float> wrong(Backbone<float>(BackboneConfig{}, rng));
  TrainOptions o;
  o.run_dir = dir;
  EXPECT_THROW(train(tiny_config(Variant::Dst), tiny_data(), wrong, o), ConfigError);
  fs::remove_all(dir);
}

TEST(Teacher, SaveLoadRoundTrip) {
  const auto dir = fresh_dir("teacher");
  fs::create_directories(dir);
  TeacherModel<float> t = tiny_teacher();
  save_teacher(dir / "teacher.bin", t);
  TeacherModel<float> back = load_teacher(dir / "teacher.bin", tiny_backbone());
  EXPECT_EQ(back.checksum(), t.checksum());
  EXPECT_THROW(load_teacher(dir / "teacher.bin", BackboneConfig{}), IoError);
  fs::remove_all(dir);
}

// -------------------------------------------------------------- ablation ---

TEST(Suites, RunLists) {
  auto labels = [](Suite s) {
    std::vector<std::string> out;
    for (const auto& r : suite_runs(s)) out.push_back(r.label);
    return out;
  };
  EXPECT_EQ(labels(Suite::Table1), (std::vector<std::string>{"nonadapt", "dst", "spt", "dst_spt"}));
  EXPECT_EQ(labels(Suite::Fig5), (std::vector<std::string>{"bs", "fr", "sd", "td"}));
  EXPECT_EQ(labels(Suite::Fig6), (std::vector<std::string>{"1x1", "2x1", "2x2", "3x3"}));
  EXPECT_EQ(suite_runs(Suite::Fig5)[3].variant, Variant::Dst);
  EXPECT_EQ(parse_suite("fig6"), Suite::Fig6);
  EXPECT_THROW(parse_suite("fig7"), ConfigError);
}

TEST(Ablation, Table1BookkeepingAndCache) {
  const auto dir = fresh_dir("ablation");
  fs::create_directories(dir);
  TrainConfig base = tiny_config(Variant::DstSpt);
  base.iterations = 4;
  base.validate_every = 0;
  const TrainData data = tiny_data();
  std::vector<std::string> log;
  AblationOptions o{dir, 1, [&](const std::string& m) { log.push_back(m); }};
  const auto first = run_ablation(Suite::Table1, base, {0, 1, 2}, data, tiny_teacher(), o);
  ASSERT_EQ(first.rows.size(), 4u);
  for (const auto& row : first.rows) EXPECT_EQ(row.miou.size(), 3u);
  EXPECT_EQ(log.front(), "table1: 12 runs, 12 to train");
  EXPECT_TRUE(fs::exists(dir / "table1.csv"));
  const std::string csv = slurp(dir / "table1.csv");

  log.clear();
  const auto again = run_ablation(Suite::Table1, base, {0, 1, 2}, data, tiny_teacher(), o);
  EXPECT_EQ(log.front(), "table1: 12 runs, 0 to train");
  EXPECT_EQ(slurp(dir / "table1.csv"), csv);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(again.rows[i].miou, first.rows[i].miou);
  EXPECT_THROW(run_ablation(Suite::Table1, base, {}, data, tiny_teacher(), o), ConfigError);

  // a different teacher or dataset invalidates the cache
  log.clear();
  Rng rng(78);
  const TeacherModel<float> other(Backbone<float>(tiny_backbone(), rng));
  run_ablation(Suite::Table1, base, {0}, data, other, o);
  EXPECT_EQ(log.front(), "table1: 4 runs, 4 to train");
  log.clear();
  run_ablation(Suite::Table1, base, {0}, tiny_data(200), tiny_teacher(), o);
  EXPECT_EQ(log.front(), "table1: 4 runs, 4 to train");
  fs::remove_all(dir);
}

TEST(Ablation, ParallelJobsMatchSerial) {
  const auto serial = fresh_dir("serial"), parallel = fresh_dir("parallel");
  fs::create_directories(serial);
  fs::create_directories(parallel);
  TrainConfig base = tiny_config(Variant::DstSpt);
  base.iterations = 3;
  base.validate_every = 0;
  const TrainData data = tiny_data();
  const auto a = run_ablation(Suite::Fig6, base, {0}, data, tiny_teacher(), {serial, 1, {}});
  const auto b = run_ablation(Suite::Fig6, base, {0}, data, tiny_teacher(), {parallel, 2, {}});
  EXPECT_EQ(slurp(serial / "fig6.csv"), slurp(parallel / "fig6.csv"));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(a.rows[i].miou, b.rows[i].miou);
  fs::remove_all(serial);
  fs::remove_all(parallel);
}
