#include "road/trainer.hpp"

#include <json.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace road {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

// ---------------------------------------------------------------- config ---

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::NonAdapt: return "nonadapt";
    case Variant::Dst: return "dst";
    case Variant::Spt: return "spt";
    case Variant::DstSpt: return "dst_spt";
    case Variant::FrozenK: return "frozen_k";
    case Variant::SourceDistill: return "source_distill";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::NonAdapt, Variant::Dst, Variant::Spt, Variant::DstSpt, Variant::FrozenK,
                    Variant::SourceDistill}) {
    if (name == variant_name(v)) return v;
  }
  throw ConfigError("unknown variant '" + name + "'");
}

void TrainConfig::validate() const {
  backbone.validate();
  if (grid_h < 1 || grid_w < 1) throw ConfigError("grid dimensions must be >= 1");
  if (lambda_dist < 0 || lambda_spt < 0) throw ConfigError("loss weights must be non-negative");
  if (!(base_lr > 0) || !(lr_power >= 0) || momentum < 0 || momentum >= 1) {
    throw ConfigError("learning rate, power or momentum out of range");
  }
  if (!(head_lr_mult > 0) || !(domain_lr_mult > 0)) throw ConfigError("learning-rate multipliers must be positive");
  if (batch < 1 || source_patches < 1 || source_patches > batch) {
    throw ConfigError("batch must hold at least one source patch and no more source patches than patches");
  }
  if (uses_target(variant) && target_patches() < 1) throw ConfigError("variant needs target patches");
  if (crop < 1 || crop % backbone.total_stride() != 0) {
    throw ConfigError("crop size must be a positive multiple of the backbone stride");
  }
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (frozen_k < 0 || frozen_k > backbone.stages()) throw ConfigError("frozen_k outside [0, stages]");
  if (validate_every < 0 || checkpoint_every < 0) throw ConfigError("intervals must be non-negative");
}

namespace {

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string TrainConfig::canonical() const {
  std::ostringstream os;
  os << "variant=" << variant_name(variant) << '\n'
     << "grid=" << grid_h << 'x' << grid_w << '\n'
     << "lambda1=" << num(lambda_dist) << '\n'
     << "lambda2=" << num(lambda_spt) << '\n'
     << "base_lr=" << num(base_lr) << '\n'
     << "lr_power=" << num(lr_power) << '\n'
     << "momentum=" << num(momentum) << '\n'
     << "head_lr_mult=" << num(head_lr_mult) << '\n'
     << "domain_lr_mult=" << num(domain_lr_mult) << '\n'
     << "batch=" << batch << '\n'
     << "source_patches=" << source_patches << '\n'
     << "crop=" << crop << '\n'
     << "iterations=" << iterations << '\n'
     << "seed=" << seed << '\n'
     << "frozen_k=" << frozen_k << '\n'
     << "validate_every=" << validate_every << '\n'
     << "widths=" << join(backbone.widths) << '\n'
     << "dilations=" << join(backbone.dilations) << '\n'
     << "strides=" << join(backbone.strides) << '\n'
     << "kernel=" << backbone.kernel << '\n'
     << "convs_per_stage=" << backbone.convs_per_stage << '\n';
  return os.str();
}

std::uint64_t fnv1a(const std::string& text, std::uint64_t h) {
  for (unsigned char c : text) h = (h ^ c) * 1099511628211ull;
  return h;
}

namespace {

std::uint64_t fnv1a_bytes(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 1099511628211ull;
  return h;
}

}  // namespace

std::uint64_t inputs_fingerprint(const TrainData& data, const TeacherModel<float>& pretrained) {
  std::uint64_t h = fnv1a("road-inputs");
  for (const auto* split : {&data.source, &data.target, &data.val}) {
    h = fnv1a(std::to_string(split->size()), h);
    for (const auto& scene : *split) {
      h = fnv1a_bytes(scene.image.pixels.data(), scene.image.pixels.size(), h);
      h = fnv1a_bytes(scene.labels.labels.data(), scene.labels.labels.size(), h);
    }
  }
  TeacherModel<float> teacher = pretrained;
  for (const auto& p : teacher.params()) {
    h = fnv1a(p.name, h);
    h = fnv1a_bytes(p.tensor->data().data(), sizeof(float) * static_cast<std::size_t>(p.tensor->size()), h);
  }
  return h;
}

std::uint64_t TrainConfig::hash() const { return fnv1a(canonical()); }

// ------------------------------------------------------------------ data ---

TrainData load_train_data(const DatasetManifest& manifest) {
  TrainData d;
  d.source = load_split(manifest, kSourceTrain, true);
  d.target = load_split(manifest, kTargetTrain, false);
  d.val = load_split(manifest, kTargetVal, true);
  d.num_classes = manifest.scene.num_classes;
  return d;
}

Batch sample_batch(const TrainData& data, const TrainConfig& config, Rng& rng) {
  if (data.source.empty() || (config.target_patches() > 0 && data.target.empty())) {
    throw ConfigError("training splits must be non-empty");
  }
  const int stride = config.backbone.total_stride();
  auto draw = [&](const std::vector<Scene>& scenes, bool labeled) {
    const Scene& s = scenes[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(scenes.size()) - 1))];
    if (config.crop > s.image.height || config.crop > s.image.width) {
      throw ConfigError("crop " + std::to_string(config.crop) + " larger than the " + std::to_string(s.image.height) +
                        "x" + std::to_string(s.image.width) + " image");
    }
    const int row = stride * static_cast<int>(rng.uniform_int(0, (s.image.height - config.crop) / stride));
    const int col = stride * static_cast<int>(rng.uniform_int(0, (s.image.width - config.crop) / stride));
    Patch p{make_crop<float>(s.image, row, col, config.crop, config.crop, s.domain), {}};
    if (labeled) {
      p.labels.reserve(static_cast<std::size_t>(config.crop) * config.crop);
      for (int y = 0; y < config.crop; ++y)
        for (int x = 0; x < config.crop; ++x) p.labels.push_back(s.labels.at(row + y, col + x));
    }
    return p;
  };
  Batch b;
  for (int i = 0; i < config.source_patches; ++i) b.source.push_back(draw(data.source, true));
  for (int i = 0; i < config.target_patches(); ++i) b.target.push_back(draw(data.target, false));
  return b;
}

double poly_lr(int iter, int total, double base, double power) {
  if (total <= 0) throw ConfigError("poly_lr needs a positive iteration total");
  if (iter < 0 || iter > total) throw ConfigError("poly_lr iteration outside [0, total]");
  return base * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(total), power);
}

// ----------------------------------------------------------------- model ---

TrainState init_state(const TrainConfig& config, const TeacherModel<float>& pretrained, int num_classes) {
  Rng init(mix_seed(config.seed, 0x1417));
  TrainState s{StudentModel<float>(config.backbone, num_classes, init),
               DomainClassifierBank<float>(config.grid_h * config.grid_w, config.backbone.out_channels(), init), 0,
               Rng(mix_seed(config.seed, 0xBA7C))};
  s.student.backbone().copy_values_from(pretrained.backbone());
  if (config.variant == Variant::FrozenK) s.student.freeze_prefix(config.frozen_k);
  return s;
}

namespace {

std::vector<NamedParam<float>> trainable(TrainState& s, const TrainConfig& config) {
  auto params = s.student.params();
  for (auto& p : params) {
    if (p.name.starts_with("head.")) p.lr_mult = static_cast<float>(config.head_lr_mult);
    p.name = "student." + p.name;
  }
  if (uses_spatial(config.variant)) {
    for (auto p : s.bank.params()) {
      p.name = "bank." + p.name;
      p.lr_mult = static_cast<float>(config.domain_lr_mult);
      params.push_back(p);
    }
  }
  return params;
}

Var<float> average(const std::vector<Var<float>>& terms) {
  if (terms.size() == 1) return terms.front();
  return weighted_sum(terms, std::vector<float>(terms.size(), 1.0f / static_cast<float>(terms.size())));
}

}  // namespace

StepGraph build_step(Graph<float>& g, TrainState& state, TeacherModel<float>& teacher, const Batch& batch,
                     const TrainConfig& config, const RegionPartition& partition) {
  StepGraph step;
  std::vector<Var<float>> seg_terms;
  for (const auto& p : batch.source) {
    auto fm = state.student.forward_features(g, p.crop);
    auto logits = state.student.segment(g, fm, p.crop.pixels.dim(1), p.crop.pixels.dim(2));
    seg_terms.push_back(segmentation_loss(logits, p.labels, Domain::Source));
    step.features.push_back(fm);
  }
  step.seg = average(seg_terms);

  if (uses_target(config.variant)) {
    for (const auto& p : batch.target) step.features.push_back(state.student.forward_features(g, p.crop));
  }

  if (uses_distillation(config.variant)) {
    std::vector<Var<float>> dist_terms;
    const bool on_source = config.variant == Variant::SourceDistill;
    const auto& patches = on_source ? batch.source : batch.target;
    const std::size_t offset = on_source ? 0 : batch.source.size();
    for (std::size_t i = 0; i < patches.size(); ++i) {
      dist_terms.push_back(distillation_loss(step.features[offset + i], teacher.forward_features(g, patches[i].crop)));
    }
    step.dist = average(dist_terms);
  }

  if (uses_spatial(config.variant)) {
    step.regions = build_region_batch(step.features, partition);
    step.spatial = spatial_adaptation_loss(g, step.regions, state.bank);
  }
  step.total = road_loss(step.seg, step.dist, step.spatial.total, config.lambda_dist, config.lambda_spt);
  return step;
}

// ----------------------------------------------------------- checkpoints ---

namespace {

constexpr char kMagic[4] = {'R', 'O', 'A', 'D'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;

struct Entry {
  std::string name;
  Shape shape;
  const float* data;
};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is, const fs::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("truncated checkpoint " + path.string());
  return v;
}

void write_table(const fs::path& path, std::uint64_t hash, std::uint64_t iteration, const std::vector<Entry>& entries,
                 const std::string& rng_blob) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write " + tmp.string());
    os.write(kMagic, 4);
    put<std::uint32_t>(os, kCheckpointVersion);
    put<std::uint64_t>(os, hash);
    put<std::uint64_t>(os, iteration);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
      os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
      put<std::uint8_t>(os, kDtypeF32);
      put<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
      for (Index d : e.shape) put<std::uint64_t>(os, static_cast<std::uint64_t>(d));
      os.write(reinterpret_cast<const char*>(e.data), static_cast<std::streamsize>(shape_size(e.shape) * sizeof(float)));
    }
    put<std::uint32_t>(os, static_cast<std::uint32_t>(rng_blob.size()));
    os.write(rng_blob.data(), static_cast<std::streamsize>(rng_blob.size()));
    if (!os) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

struct Table {
  std::uint64_t hash = 0;
  std::uint64_t iteration = 0;
  std::map<std::string, std::pair<Shape, std::vector<float>>> tensors;
  std::string rng_blob;
};

Table read_table(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw IoError(path.string() + " is not a checkpoint");
  if (get<std::uint32_t>(is, path) != kCheckpointVersion) throw IoError("unsupported checkpoint version in " + path.string());
  Table t;
  t.hash = get<std::uint64_t>(is, path);
  t.iteration = get<std::uint64_t>(is, path);
  const auto count = get<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get<std::uint32_t>(is, path), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) throw IoError("truncated checkpoint " + path.string());
    if (get<std::uint8_t>(is, path) != kDtypeF32) throw IoError("unsupported dtype for " + name);
    Shape shape(get<std::uint32_t>(is, path));
    for (auto& d : shape) d = static_cast<Index>(get<std::uint64_t>(is, path));
    std::vector<float> data(static_cast<std::size_t>(shape_size(shape)));
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)))) {
      throw IoError("truncated checkpoint " + path.string());
    }
    t.tensors.emplace(std::move(name), std::make_pair(std::move(shape), std::move(data)));
  }
  t.rng_blob.resize(get<std::uint32_t>(is, path));
  if (!is.read(t.rng_blob.data(), static_cast<std::streamsize>(t.rng_blob.size()))) {
    throw IoError("truncated checkpoint " + path.string());
  }
  return t;
}

void restore(const Table& t, const std::string& name, const Shape& shape, float* dst, const fs::path& path) {
  auto it = t.tensors.find(name);
  if (it == t.tensors.end()) throw IoError("checkpoint " + path.string() + " lacks tensor " + name);
  if (it->second.first != shape) {
    throw IoError("tensor " + name + " has shape " + shape_string(it->second.first) + ", expected " + shape_string(shape));
  }
  std::copy(it->second.second.begin(), it->second.second.end(), dst);
}

}  // namespace

void write_checkpoint(const fs::path& path, const TrainConfig& config, TrainState& state, Sgd<float>& sgd) {
  std::vector<Entry> entries;
  const auto& params = sgd.params();
  for (const auto& p : params) entries.push_back({p.name, p.tensor->shape(), p.tensor->data().data()});
  for (std::size_t i = 0; i < params.size(); ++i) {
    entries.push_back({"velocity." + params[i].name, params[i].tensor->shape(), sgd.velocity()[i].data()});
  }
  write_table(path, config.hash(), static_cast<std::uint64_t>(state.iteration), entries, state.rng.state());
}

void read_checkpoint(const fs::path& path, const TrainConfig& config, TrainState& state, Sgd<float>& sgd) {
  const Table t = read_table(path);
  if (t.hash != config.hash()) throw ConfigError("checkpoint " + path.string() + " was written for a different config");
  const auto& params = sgd.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    restore(t, params[i].name, params[i].tensor->shape(), params[i].tensor->data().data(), path);
    restore(t, "velocity." + params[i].name, params[i].tensor->shape(), sgd.velocity()[i].data(), path);
  }
  state.iteration = static_cast<int>(t.iteration);
  state.rng.restore(t.rng_blob);
}

TrainState load_state(const fs::path& path, const TrainConfig& config, int num_classes) {
  Rng rng(0);
  TrainState state = init_state(config, TeacherModel<float>(Backbone<float>(config.backbone, rng)), num_classes);
  Sgd<float> sgd(trainable(state, config), static_cast<float>(config.momentum));
  read_checkpoint(path, config, state, sgd);
  return state;
}

void save_teacher(const fs::path& path, TeacherModel<float>& teacher) {
  std::vector<Entry> entries;
  for (const auto& p : teacher.params()) entries.push_back({p.name, p.tensor->shape(), p.tensor->data().data()});
  write_table(path, 0, 0, entries, "");
}

TeacherModel<float> load_teacher(const fs::path& path, const BackboneConfig& config) {
  const Table t = read_table(path);
  Rng unused(0);
  TeacherModel<float> teacher(Backbone<float>(config, unused));
  for (const auto& p : teacher.params()) restore(t, p.name, p.tensor->shape(), p.tensor->data().data(), path);
  if (t.tensors.size() != teacher.params().size()) throw IoError("teacher file " + path.string() + " has extra tensors");
  return teacher;
}

// --------------------------------------------------------------- metrics ---

namespace {

std::string metrics_line(const MetricsRow& r) {
  return std::to_string(r.iteration) + "," + num(r.lr) + "," + num(r.loss.seg) + "," + num(r.loss.dist) + "," +
         num(r.loss.spt) + "," + num(r.loss.total) + "," + std::to_string(r.loss.skipped_regions) + "\n";
}

constexpr const char* kMetricsHeader = "iteration,lr,seg,dist,spt,total,skipped_regions\n";
constexpr const char* kValidationHeader = "iteration,miou\n";

// Keeps the header and the rows whose leading iteration is below `limit`.
// Keeps complete rows below `limit`. A process killed mid-write can leave an
// unterminated last line; it is dropped.
void truncate_log(const fs::path& path, const char* header, int limit) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  in.close();
  const std::string text = ss.str();
  std::string kept = header;
  std::size_t pos = text.find('\n');
  while (pos != std::string::npos) {
    const std::size_t end = text.find('\n', pos + 1);
    if (end == std::string::npos) break;
    const std::string line = text.substr(pos + 1, end - pos - 1);
    pos = end;
    if (line.empty()) continue;
    int iteration = 0;
    const auto comma = line.find(',');
    auto [ptr, ec] = std::from_chars(line.data(), line.data() + comma, iteration);
    if (comma == std::string::npos || ec != std::errc{} || ptr != line.data() + comma) {
      throw IoError("corrupt log row in " + path.string() + ": " + line);
    }
    if (iteration < limit) kept += line + "\n";
  }
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  out << kept;
}

std::vector<MetricsRow> parse_metrics(const fs::path& path) {
  std::vector<MetricsRow> rows;
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[7];
    for (auto& s : f) std::getline(ss, s, ',');
    MetricsRow r;
    r.iteration = std::stoi(f[0]);
    r.lr = std::stod(f[1]);
    r.loss.seg = std::stod(f[2]);
    r.loss.dist = std::stod(f[3]);
    r.loss.spt = std::stod(f[4]);
    r.loss.total = std::stod(f[5]);
    r.loss.skipped_regions = std::stoi(f[6]);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace

void write_metrics_csv(const fs::path& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << kMetricsHeader;
  for (const auto& r : rows) out << metrics_line(r);
}

// ----------------------------------------------------------------- train ---

TrainResult train(const TrainConfig& config, const TrainData& data, const TeacherModel<float>& pretrained,
                  const TrainOptions& options) {
  config.validate();
  if (data.source.empty() || data.val.empty()) throw ConfigError("training needs source-train and target-val scenes");
  if (uses_target(config.variant) && data.target.empty()) throw ConfigError("variant needs target-train scenes");
  if (pretrained.backbone().config().widths != config.backbone.widths ||
      pretrained.backbone().config().convs_per_stage != config.backbone.convs_per_stage) {
    throw ConfigError("pretrained backbone does not match the configured architecture");
  }
  if (options.run_dir.empty()) throw ConfigError("training needs a run directory");
  fs::create_directories(options.run_dir);

  const int height = data.source.front().image.height, width = data.source.front().image.width;
  const RegionPartition partition = make_partition(config.grid_h, config.grid_w, height, width);
  TrainState state = init_state(config, pretrained, data.num_classes);
  TeacherModel<float> teacher = pretrained;
  Sgd<float> sgd(trainable(state, config), static_cast<float>(config.momentum));

  const fs::path metrics_path = options.run_dir / "metrics.csv";
  const fs::path validation_path = options.run_dir / "validation.csv";
  TrainResult result;
  if (options.resume_from) {
    read_checkpoint(*options.resume_from, config, state, sgd);
    truncate_log(metrics_path, kMetricsHeader, state.iteration);
    truncate_log(validation_path, kValidationHeader, state.iteration + 1);
    result.metrics = parse_metrics(metrics_path);
  } else {
    std::ofstream(metrics_path, std::ios::trunc) << kMetricsHeader;
    std::ofstream(validation_path, std::ios::trunc) << kValidationHeader;
  }
  std::ofstream metrics(metrics_path, std::ios::app);
  std::ofstream validation(validation_path, std::ios::app);
  if (!metrics || !validation) throw IoError("cannot open logs in " + options.run_dir.string());

  // Wall-clock time goes to its own file so metrics.csv stays reproducible.
  const auto started = std::chrono::steady_clock::now();
  const int first_iteration = state.iteration;
  auto checkpoint = [&](const fs::path& path) {
    write_checkpoint(path, config, state, sgd);
    result.last_checkpoint = path;
  };

  while (state.iteration < config.iterations) {
    if (options.stop_after && state.iteration >= *options.stop_after) break;
    const int it = state.iteration;
    const Batch batch = sample_batch(data, config, state.rng);
    Graph<float> g;
    StepGraph step = build_step(g, state, teacher, batch, config, partition);

    MetricsRow row;
    row.iteration = it;
    row.lr = poly_lr(it, config.iterations, config.base_lr, config.lr_power);
    const double seg = step.seg.item();
    const double dist = step.dist.valid() ? static_cast<double>(step.dist.item()) : 0.0;
    const double spt = step.spatial.valid() ? static_cast<double>(step.spatial.total.item()) : 0.0;
    if (!std::isfinite(seg) || !std::isfinite(dist) || !std::isfinite(spt) || !std::isfinite(step.total.item())) {
      const fs::path snap = options.run_dir / "diverged.ckpt";
      write_checkpoint(snap, config, state, sgd);
      throw DivergenceError("non-finite loss at iteration " + std::to_string(it) + " (seg " + num(seg) + ", dist " +
                                num(dist) + ", spt " + num(spt) + ")",
                            snap.string());
    }
    row.loss = road_loss(seg, dist, spt, config.lambda_dist, config.lambda_spt);
    row.loss.per_region = step.spatial.per_region;
    row.loss.non_empty_regions = step.spatial.non_empty_regions;
    row.loss.skipped_regions = step.spatial.skipped_regions;

    sgd.zero_grad();
    g.backward(step.total);
    sgd.step(static_cast<float>(row.lr));
    state.iteration = it + 1;

    metrics << metrics_line(row);
    metrics.flush();
    result.metrics.push_back(row);
    if (options.on_step) options.on_step(row);

    if (config.validate_every > 0 && state.iteration % config.validate_every == 0) {
      const double miou = evaluate_model(state.student, data.val).mean;
      result.validation.emplace_back(state.iteration, miou);
      validation << state.iteration << ',' << num(miou) << '\n';
      validation.flush();
    }
    if (config.checkpoint_every > 0 && state.iteration % config.checkpoint_every == 0) {
      checkpoint(options.run_dir / "checkpoint.ckpt");
    }
  }
  result.completed = state.iteration >= config.iterations;
  {
    const fs::path timing_path = options.run_dir / "timing.csv";
    const bool fresh = !fs::exists(timing_path);
    std::ofstream timing(timing_path, std::ios::app);
    if (fresh) timing << "first_iteration,last_iteration,seconds\n";
    timing << first_iteration << ',' << state.iteration << ','
           << std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count() << '\n';
  }
  checkpoint(options.run_dir / (result.completed ? "final.ckpt" : "checkpoint.ckpt"));
  if (result.completed && options.evaluate_at_end) {
    result.final_eval = evaluate_model(state.student, data.val, partition);
    write_eval_json(result.final_eval, options.run_dir / "eval.json", class_names(data.num_classes));
  }
  result.student = std::move(state.student);
  return result;
}

// -------------------------------------------------------------- ablation ---

const char* suite_name(Suite s) {
  switch (s) {
    case Suite::Table1: return "table1";
    case Suite::Fig5: return "fig5";
    case Suite::Fig6: return "fig6";
  }
  return "?";
}

Suite parse_suite(const std::string& name) {
  for (Suite s : {Suite::Table1, Suite::Fig5, Suite::Fig6}) {
    if (name == suite_name(s)) return s;
  }
  throw ConfigError("unknown suite '" + name + "' (expected table1, fig5 or fig6)");
}

std::vector<RunSpec> suite_runs(Suite suite) {
  switch (suite) {
    case Suite::Table1:
      return {{"nonadapt", Variant::NonAdapt, 0, 0},
              {"dst", Variant::Dst, 0, 0},
              {"spt", Variant::Spt, 0, 0},
              {"dst_spt", Variant::DstSpt, 0, 0}};
    case Suite::Fig5:
      return {{"bs", Variant::NonAdapt, 0, 0},
              {"fr", Variant::FrozenK, 0, 0},
              {"sd", Variant::SourceDistill, 0, 0},
              {"td", Variant::Dst, 0, 0}};
    case Suite::Fig6:
      return {{"1x1", Variant::DstSpt, 1, 1},
              {"2x1", Variant::DstSpt, 2, 1},
              {"2x2", Variant::DstSpt, 2, 2},
              {"3x3", Variant::DstSpt, 3, 3}};
  }
  return {};
}

std::vector<std::string> class_names(int num_classes) {
  std::vector<std::string> out;
  for (int c = 0; c < num_classes; ++c) out.emplace_back(class_name(c));
  return out;
}

namespace {

std::string hex(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// The cache key covers the config and the exact data and teacher.
struct CachedRun {
  TrainConfig config;
  std::uint64_t key;
  fs::path dir;
};

void write_result(const CachedRun& run, const TrainResult& r) {
  const TrainConfig& config = run.config;
  json j{{"key", hex(run.key)},
         {"config_hash", hex(config.hash())},
         {"variant", variant_name(config.variant)},
         {"grid", std::to_string(config.grid_h) + "x" + std::to_string(config.grid_w)},
         {"seed", config.seed},
         {"miou", r.final_eval.mean},
         {"per_class", r.final_eval.per_class},
         {"config", config.canonical()}};
  const fs::path tmp = run.dir / "result.json.tmp";
  std::ofstream(tmp) << j.dump(2) << '\n';
  fs::rename(tmp, run.dir / "result.json");
}

std::optional<json> read_result(const CachedRun& run) {
  std::ifstream in(run.dir / "result.json");
  if (!in) return std::nullopt;
  try {
    json j = json::parse(in);
    if (j.at("key").get<std::string>() != hex(run.key)) return std::nullopt;
    return j;
  } catch (const json::exception&) {
    return std::nullopt;
  }
}

void run_one(const CachedRun& run, const TrainData& data, const TeacherModel<float>& pretrained) {
  fs::create_directories(run.dir);
  std::ofstream(run.dir / "config.ini") << run.config.canonical();
  TrainOptions opts;
  opts.run_dir = run.dir;
  const TrainResult r = train(run.config, data, pretrained, opts);
  write_result(run, r);
}

}  // namespace

AblationResult run_ablation(Suite suite, const TrainConfig& base, const std::vector<std::uint64_t>& seeds,
                            const TrainData& data, const TeacherModel<float>& pretrained,
                            const AblationOptions& options) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  if (options.jobs < 1) throw ConfigError("--jobs must be >= 1");
  base.validate();
  fs::create_directories(options.out_dir / "runs");
  const std::uint64_t inputs = inputs_fingerprint(data, pretrained);

  struct Planned {
    RunSpec spec;
    CachedRun run;
  };
  std::vector<Planned> plan;
  for (const auto& spec : suite_runs(suite)) {
    for (auto seed : seeds) {
      TrainConfig cfg = base;
      cfg.variant = spec.variant;
      if (spec.grid_h > 0) {
        cfg.grid_h = spec.grid_h;
        cfg.grid_w = spec.grid_w;
      }
      cfg.seed = seed;
      const std::uint64_t key = fnv1a(cfg.canonical(), inputs);
      const std::string name = std::string(variant_name(cfg.variant)) + "_" + std::to_string(cfg.grid_h) + "x" +
                               std::to_string(cfg.grid_w) + "_s" + std::to_string(seed) + "_" + hex(key).substr(0, 8);
      plan.push_back({spec, {cfg, key, options.out_dir / "runs" / name}});
    }
  }

  std::vector<const CachedRun*> pending;
  for (const auto& p : plan) {
    if (read_result(p.run)) continue;
    if (std::none_of(pending.begin(), pending.end(), [&](const CachedRun* r) { return r->dir == p.run.dir; })) {
      pending.push_back(&p.run);
    }
  }
  if (options.log) {
    options.log(std::string(suite_name(suite)) + ": " + std::to_string(plan.size()) + " runs, " +
                std::to_string(pending.size()) + " to train");
  }

  if (options.jobs == 1) {
    for (const auto* run : pending) {
      if (options.log) options.log("training " + run->dir.filename().string());
      run_one(*run, data, pretrained);
    }
  } else {
    std::size_t next = 0;
    int active = 0;
    bool failed = false;
    while (next < pending.size() || active > 0) {
      while (active < options.jobs && next < pending.size() && !failed) {
        const CachedRun* run = pending[next++];
        if (options.log) options.log("training " + run->dir.filename().string());
        const pid_t pid = fork();
        if (pid < 0) throw IoError("fork failed");
        if (pid == 0) {
          int code = 0;
          try {
            run_one(*run, data, pretrained);
          } catch (const std::exception& e) {
            std::fprintf(stderr, "run %s failed: %s\n", run->dir.c_str(), e.what());
            code = 1;
          }
          std::fflush(nullptr);
          _exit(code);
        }
        ++active;
      }
      if (active == 0) break;
      int status = 0;
      if (wait(&status) > 0) {
        --active;
        if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) failed = true;
      }
    }
    if (failed) throw std::runtime_error("one or more ablation runs failed");
  }

  std::vector<RunSummary> runs;
  for (const auto& p : plan) {
    auto j = read_result(p.run);
    if (!j) throw std::runtime_error("missing result for " + p.run.dir.string());
    runs.push_back({p.spec.label, variant_name(p.run.config.variant), p.run.config.grid_h, p.run.config.grid_w,
                    p.run.config.seed, p.run.dir.string(), j->at("miou").get<double>(),
                    j->at("per_class").get<std::vector<double>>()});
  }
  AblationResult result = summarize(suite_name(suite), runs, base.canonical());
  render_tables(result, options.out_dir, class_names(data.num_classes));
  return result;
}

}  // namespace road
