// road: dataset generation, teacher pretraining, training, evaluation and
// ablation suites from one binary.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include "road/config.hpp"
#include "road/dataset.hpp"
#include "road/errors.hpp"
#include "road/evaluator.hpp"
#include "road/trainer.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace road;

namespace {

constexpr int kRuntimeFailure = 1;
constexpr int kUsageError = 2;

fs::path run_root() {
  const char* env = std::getenv("ROAD_RUN_DIR");
  return env && *env ? fs::path(env) : fs::path("runs");
}

struct Overrides {
  std::optional<std::string> config;
  std::optional<std::string> variant;
  std::optional<std::string> grid;
  std::optional<double> lambda1;
  std::optional<double> lambda2;
  std::optional<std::uint64_t> seed;
  std::optional<int> iters;

  void add_config(CLI::App& app) { app.add_option("--config", config, "key=value config file with [section] headers"); }

  // Suites choose variant, grid and seed per run themselves.
  void add_training(CLI::App& app, bool single_run) {
    if (single_run) {
      app.add_option("--variant", variant, "nonadapt, dst, spt, dst_spt, frozen_k or source_distill");
      app.add_option("--grid", grid, "region grid HxW, e.g. 3x3");
      app.add_option("--seed", seed, "training seed");
    }
    app.add_option("--lambda1", lambda1, "distillation weight");
    app.add_option("--lambda2", lambda2, "spatial adaptation weight");
    app.add_option("--iters", iters, "training iterations");
  }

  RunConfig resolve() const {
    RunConfig c = config ? load_run_config(*config) : RunConfig{};
    if (variant) set_value(c, "train", "variant", *variant);
    if (grid) set_value(c, "train", "grid", *grid);
    if (lambda1) c.train.lambda_dist = *lambda1;
    if (lambda2) c.train.lambda_spt = *lambda2;
    if (seed) c.train.seed = *seed;
    if (iters) c.train.iterations = *iters;
    c.pretrain.scene = c.scene;
    c.pretrain.backbone = c.train.backbone;
    return c;
  }
};

void require_parent(const fs::path& dir) {
  const fs::path parent = fs::absolute(dir).parent_path();
  if (!fs::is_directory(parent)) throw ConfigError("parent directory " + parent.string() + " does not exist");
}

void log(const std::string& line) { std::cerr << "[road] " << line << '\n'; }

TrainData load_data(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw ConfigError("no dataset at " + dir.string() + " (run generate first)");
  return load_train_data(read_manifest(dir));
}

TeacherModel<float> load_pretrained(const fs::path& path, const RunConfig& c) {
  if (!fs::exists(path)) throw ConfigError("no teacher at " + path.string() + " (run pretrain-teacher first)");
  return load_teacher(path, c.train.backbone);
}

int cmd_generate(const RunConfig& c, const fs::path& out) {
  require_parent(out);
  write_resolved_config(c, out);
  const auto manifest =
      generate_dataset(out, c.scene, default_splits(c.source_train, c.target_train, c.target_val));
  validate_manifest(manifest);
  std::cout << (out / "manifest.json").string() << '\n';
  return 0;
}

int cmd_pretrain(const RunConfig& c, const fs::path& out) {
  require_parent(out);
  write_resolved_config(c, out);
  log("pretraining teacher on " + std::to_string(c.pretrain.scenes) + " target-style scenes");
  PretrainResult r = pretrain_teacher(c.pretrain);
  save_teacher(out / "teacher.bin", r.teacher);
  std::ofstream report(out / "pretrain.csv");
  report << "epoch,loss\n";
  for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) report << e << ',' << r.epoch_loss[e] << '\n';
  report << "heldout_accuracy," << r.heldout_accuracy << '\n';
  log("held-out pixel accuracy " + std::to_string(r.heldout_accuracy));
  std::cout << (out / "teacher.bin").string() << '\n';
  return 0;
}

int cmd_train(const RunConfig& c, const fs::path& data_dir, const fs::path& teacher_path, const fs::path& out,
              const std::optional<std::string>& resume) {
  c.train.validate();
  require_parent(out);
  write_resolved_config(c, out);
  const TrainData data = load_data(data_dir);
  const TeacherModel<float> teacher = load_pretrained(teacher_path, c);
  TrainOptions options;
  options.run_dir = out;
  if (resume) options.resume_from = fs::path(*resume);
  options.on_step = [&](const MetricsRow& row) {
    if ((row.iteration + 1) % 100 == 0) {
      char line[160];
      std::snprintf(line, sizeof line, "iter %d lr %.3g seg %.4f dist %.4f spt %.4f", row.iteration + 1, row.lr,
                    row.loss.seg, row.loss.dist, row.loss.spt);
      log(line);
    }
  };
  const TrainResult r = train(c.train, data, teacher, options);
  log("target-val mIoU " + std::to_string(r.final_eval.mean));
  std::cout << out.string() << '\n';
  return 0;
}

int cmd_eval(const fs::path& run_dir, const std::optional<std::string>& checkpoint, const fs::path& data_dir,
             const std::string& split, const std::optional<std::string>& out) {
  const RunConfig c = load_run_config(run_dir / "resolved.ini");
  const fs::path ckpt = checkpoint ? fs::path(*checkpoint) : run_dir / "final.ckpt";
  if (!fs::exists(ckpt)) throw ConfigError("no checkpoint at " + ckpt.string());
  if (!fs::exists(data_dir / "manifest.json")) throw ConfigError("no dataset at " + data_dir.string());
  const DatasetManifest manifest = read_manifest(data_dir);
  const auto scenes = load_split(manifest, split, true);
  StudentModel<float> student = std::move(load_state(ckpt, c.train, manifest.scene.num_classes).student);
  const auto& first = scenes.front().image;
  const IoUReport report =
      evaluate_model(student, scenes, make_partition(c.train.grid_h, c.train.grid_w, first.height, first.width));
  const fs::path target = out ? fs::path(*out) : run_dir / "eval.json";
  write_eval_json(report, target, class_names(manifest.scene.num_classes));
  log(split + " mIoU " + std::to_string(report.mean));
  std::cout << target.string() << '\n';
  return 0;
}

int cmd_ablate(RunConfig c, const std::string& suite_text, const std::optional<std::string>& seeds,
               std::optional<int> jobs, const fs::path& data_dir, const fs::path& teacher_path, const fs::path& out) {
  const Suite suite = parse_suite(suite_text);
  if (seeds) c.seeds = parse_seeds(*seeds);
  if (jobs) c.jobs = *jobs;
  if (c.jobs < 1) throw ConfigError("--jobs must be at least 1");
  require_parent(out);
  write_resolved_config(c, out);
  const TrainData data = load_data(data_dir);
  const TeacherModel<float> teacher = load_pretrained(teacher_path, c);
  AblationOptions options;
  options.out_dir = out;
  options.jobs = c.jobs;
  options.log = log;
  const AblationResult result = run_ablation(suite, c.train, c.seeds, data, teacher, options);
  for (const auto& row : result.rows) {
    char line[160];
    std::snprintf(line, sizeof line, "%-16s median mIoU %.4f (min %.4f, max %.4f)", row.label.c_str(), row.median,
                  row.min, row.max);
    log(line);
  }
  std::cout << (out / (std::string(suite_name(suite)) + ".csv")).string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ROAD toy-scale domain adaptation for semantic segmentation"};
  app.require_subcommand(1);
  const fs::path root = run_root();
  // Defaults live under the run root and may be created; explicit --out
  // paths need an existing parent.
  auto defaulted = [&](const fs::path& out) {
    fs::create_directories(out.parent_path());
    return out;
  };

  Overrides gen_o, pre_o, train_o, ablate_o;
  std::optional<std::string> gen_out;
  auto* gen = app.add_subcommand("generate", "render the procedural dataset");
  gen_o.add_config(*gen);
  gen->add_option("--out", gen_out, "dataset directory (default: $ROAD_RUN_DIR/data)");

  std::optional<std::string> pre_out;
  auto* pre = app.add_subcommand("pretrain-teacher", "pretrain the target-style teacher backbone");
  pre_o.add_config(*pre);
  pre->add_option("--out", pre_out, "teacher directory (default: $ROAD_RUN_DIR/teacher)");

  std::string data_dir = (root / "data").string();
  std::string teacher = (root / "teacher" / "teacher.bin").string();
  std::optional<std::string> train_out, resume;
  auto* tr = app.add_subcommand("train", "train one configuration");
  train_o.add_config(*tr);
  train_o.add_training(*tr, true);
  tr->add_option("--data", data_dir, "dataset directory")->capture_default_str();
  tr->add_option("--teacher", teacher, "pretrained teacher file")->capture_default_str();
  tr->add_option("--out", train_out, "run directory");
  tr->add_option("--resume", resume, "checkpoint to resume from");

  std::string eval_run, eval_split = std::string(kTargetVal);
  std::optional<std::string> eval_ckpt, eval_out;
  auto* ev = app.add_subcommand("eval", "evaluate a trained run");
  ev->add_option("--run", eval_run, "run directory holding resolved.ini")->required();
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint (default: final.ckpt in the run)");
  ev->add_option("--data", data_dir, "dataset directory")->capture_default_str();
  ev->add_option("--split", eval_split, "labeled split to score")->capture_default_str();
  ev->add_option("--out", eval_out, "report path (default: eval.json in the run)");

  std::string suite;
  std::optional<std::string> seeds;
  std::optional<int> jobs;
  std::optional<std::string> ablate_out;
  auto* ab = app.add_subcommand("ablate", "run an ablation suite");
  ablate_o.add_config(*ab);
  ablate_o.add_training(*ab, false);
  ab->add_option("--suite", suite, "table1, fig5 or fig6")->required()->check(CLI::IsMember({"table1", "fig5", "fig6"}));
  ab->add_option("--seeds", seeds, "seed count N (seeds 0..N-1) or a comma list");
  ab->add_option("--jobs", jobs, "parallel child processes");
  ab->add_option("--data", data_dir, "dataset directory")->capture_default_str();
  ab->add_option("--teacher", teacher, "pretrained teacher file")->capture_default_str();
  ab->add_option("--out", ablate_out, "suite output directory (default: $ROAD_RUN_DIR/ablate)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageError;
  }

  try {
    if (*gen) return cmd_generate(gen_o.resolve(), gen_out ? fs::path(*gen_out) : defaulted(root / "data"));
    if (*pre) return cmd_pretrain(pre_o.resolve(), pre_out ? fs::path(*pre_out) : defaulted(root / "teacher"));
    if (*tr) {
      const RunConfig c = train_o.resolve();
      fs::path out;
      if (train_out) out = *train_out;
      else if (resume) out = fs::path(*resume).parent_path();
      else {
        out = defaulted(root / "train" / (std::string(variant_name(c.train.variant)) + "_" + std::to_string(c.train.grid_h) +
                                "x" + std::to_string(c.train.grid_w) + "_s" + std::to_string(c.train.seed)));
      }
      return cmd_train(c, data_dir, teacher, out, resume);
    }
    if (*ev) return cmd_eval(eval_run, eval_ckpt, data_dir, eval_split, eval_out);
    if (*ab) return cmd_ablate(ablate_o.resolve(), suite, seeds, jobs, data_dir, teacher,
                                ablate_out ? fs::path(*ablate_out) : defaulted(root / "ablate"));
  } catch (const ConfigError& e) {
    std::cerr << "road: config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const DivergenceError& e) {
    std::cerr << "road: " << e.what() << "\n  diagnostic checkpoint: " << e.snapshot() << '\n';
    return kRuntimeFailure;
  } catch (const std::exception& e) {
    std::cerr << "road: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return kUsageError;
}
