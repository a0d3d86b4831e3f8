#pragma once

#include "road/dataset.hpp"
#include "road/evaluator.hpp"
#include "road/losses.hpp"
#include "road/model.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace road {

enum class Variant { NonAdapt, Dst, Spt, DstSpt, FrozenK, SourceDistill };

const char* variant_name(Variant v);
Variant parse_variant(const std::string& name);  // ConfigError on unknown names

inline bool uses_distillation(Variant v) {
  return v == Variant::Dst || v == Variant::DstSpt || v == Variant::SourceDistill;
}
inline bool uses_spatial(Variant v) { return v == Variant::Spt || v == Variant::DstSpt; }
inline bool uses_target(Variant v) { return v == Variant::Dst || uses_spatial(v); }

struct TrainConfig {
  Variant variant = Variant::DstSpt;
  int grid_h = 3;
  int grid_w = 3;
  double lambda_dist = kDefaultLambdaDist;
  double lambda_spt = kDefaultLambdaSpt;
  double base_lr = 2.5e-4;
  double lr_power = 0.9;
  double momentum = 0.9;
  double head_lr_mult = 10.0;    // segmentation head
  double domain_lr_mult = 10.0;  // region classifier bank
  int batch = 10;
  int source_patches = 5;
  int crop = 64;
  int iterations = 2000;
  std::uint64_t seed = 0;
  int frozen_k = 2;
  int validate_every = 200;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  BackboneConfig backbone{};

  int target_patches() const { return batch - source_patches; }
  void validate() const;
  /// Canonical key=value text of every field; the checkpoint hash covers it.
  std::string canonical() const;
  std::uint64_t hash() const;
};

/// FNV-1a, 64 bit; `h` continues an earlier hash.
std::uint64_t fnv1a(const std::string& text, std::uint64_t h = 1469598103934665603ull);

/// In-memory training material. Target scenes carry no labels.
struct TrainData {
  std::vector<Scene> source;
  std::vector<Scene> target;
  std::vector<Scene> val;
  int num_classes = kMaxClasses;
};

/// Loads the three standard splits. Target-train is read without labels.
TrainData load_train_data(const DatasetManifest& manifest);

/// Hash of every scene and teacher parameter; ablation caches key on it.
std::uint64_t inputs_fingerprint(const TrainData& data, const TeacherModel<float>& pretrained);

struct Patch {
  Crop<float> crop;
  std::vector<int> labels;  // crop-sized, source patches only
};

struct Batch {
  std::vector<Patch> source;
  std::vector<Patch> target;
};

/// Uniform scenes and stride-aligned uniform offsets, source patches first.
Batch sample_batch(const TrainData& data, const TrainConfig& config, Rng& rng);

double poly_lr(int iter, int total, double base, double power);

struct MetricsRow {
  int iteration = 0;
  double lr = 0.0;
  LossReport loss;
};

struct TrainResult {
  StudentModel<float> student;
  std::vector<MetricsRow> metrics;
  std::vector<std::pair<int, double>> validation;  // (iteration, mIoU on target-val)
  IoUReport final_eval;
  std::filesystem::path last_checkpoint;
  bool completed = false;  // false when stopped early via stop_after
};

struct TrainOptions {
  std::filesystem::path run_dir;          // metrics.csv, validation.csv, checkpoints
  std::optional<std::filesystem::path> resume_from;
  std::optional<int> stop_after;          // stop once this many iterations are done
  bool evaluate_at_end = true;
  std::function<void(const MetricsRow&)> on_step;
};

/// The trainable state of a run.
struct TrainState {
  StudentModel<float> student;
  DomainClassifierBank<float> bank;
  int iteration = 0;
  Rng rng;
};

TrainState init_state(const TrainConfig& config, const TeacherModel<float>& pretrained, int num_classes);

/// Adds the step's graph loss terms; exposed for gradient sign checks.
struct StepGraph {
  Var<float> total;
  Var<float> seg;
  Var<float> dist;
  SpatialLoss<float> spatial;
  RegionBatch<float> regions;
  std::vector<FeatureMap<float>> features;
};

StepGraph build_step(Graph<float>& g, TrainState& state, TeacherModel<float>& teacher, const Batch& batch,
                     const TrainConfig& config, const RegionPartition& partition);

/// Trains from the pretrained backbone. The teacher is used for distillation
/// variants only; every variant starts its backbone from it.
TrainResult train(const TrainConfig& config, const TrainData& data, const TeacherModel<float>& pretrained,
                  const TrainOptions& options);

// Checkpoints: magic "ROAD", u32 version, u64 config hash, u64 iteration,
// tensor table (name, dtype, shape, little-endian payload), RNG blob.
void write_checkpoint(const std::filesystem::path& path, const TrainConfig& config, TrainState& state,
                      Sgd<float>& sgd);
void read_checkpoint(const std::filesystem::path& path, const TrainConfig& config, TrainState& state, Sgd<float>& sgd);

/// The state stored in a checkpoint written under `config`.
TrainState load_state(const std::filesystem::path& path, const TrainConfig& config, int num_classes);

void save_teacher(const std::filesystem::path& path, TeacherModel<float>& teacher);
TeacherModel<float> load_teacher(const std::filesystem::path& path, const BackboneConfig& config);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);

enum class Suite { Table1, Fig5, Fig6 };
const char* suite_name(Suite s);
Suite parse_suite(const std::string& name);

struct RunSpec {
  std::string label;
  Variant variant;
  int grid_h;
  int grid_w;
};

std::vector<RunSpec> suite_runs(Suite suite);

struct AblationOptions {
  std::filesystem::path out_dir;  // runs/<hash>/ cache plus the rendered tables
  int jobs = 1;                   // parallel child processes
  std::function<void(const std::string&)> log;
};

/// Runs every (run, seed) pair of the suite. Runs whose directory already
/// holds a result are reused, so suites sharing configurations train once.
AblationResult run_ablation(Suite suite, const TrainConfig& base, const std::vector<std::uint64_t>& seeds,
                            const TrainData& data, const TeacherModel<float>& pretrained,
                            const AblationOptions& options);

std::vector<std::string> class_names(int num_classes);

}  // namespace road
