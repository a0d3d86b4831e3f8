#include "road/dataset.hpp"

#include "road/errors.hpp"
#include "road/image_io.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>

namespace road {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string index_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d.png", index);
  return buf;
}

void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

json gap_to_json(const StyleGap& gap) {
  return {{"texture_amplitude", gap.texture_amplitude},
          {"color_shift", gap.color_shift},
          {"color_jitter", gap.color_jitter},
          {"vignette", gap.vignette}};
}

StyleGap gap_from_json(const json& j) {
  StyleGap gap;
  gap.texture_amplitude = j.at("texture_amplitude").get<double>();
  gap.color_shift = j.at("color_shift").get<std::array<double, 3>>();
  gap.color_jitter = j.at("color_jitter").get<double>();
  gap.vignette = j.at("vignette").get<double>();
  return gap;
}

}  // namespace

const SplitEntry& DatasetManifest::split(const std::string& name) const {
  for (const auto& s : splits) {
    if (s.name == name) return s;
  }
  throw ConfigError("dataset has no split named '" + name + "'");
}

int DatasetManifest::total_scenes() const {
  int n = 0;
  for (const auto& s : splits) n += s.count;
  return n;
}

fs::path DatasetManifest::image_path(const SplitEntry& split, int index) const {
  return root / split.name / "images" / index_name(index);
}

fs::path DatasetManifest::label_path(const SplitEntry& split, int index) const {
  return root / split.name / "labels" / index_name(index);
}

std::vector<SplitSpec> default_splits(int source_train, int target_train, int target_val) {
  return {
      {kSourceTrain, Style::SourceSynthetic, source_train, 0, false},
      {kTargetTrain, Style::TargetReal, target_train, 100000, true},
      {kTargetVal, Style::TargetReal, target_val, 200000, false},
  };
}

DatasetManifest generate_dataset(const fs::path& root, const SceneConfig& scene_template,
                                 const std::vector<SplitSpec>& splits) {
  scene_template.validate();
  if (splits.empty()) throw ConfigError("dataset needs at least one split");
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i].count <= 0) throw ConfigError("split '" + splits[i].name + "' must contain scenes");
    for (std::size_t j = 0; j < i; ++j) {
      if (splits[i].name == splits[j].name) throw ConfigError("duplicate split name '" + splits[i].name + "'");
      const auto a0 = splits[i].first_seed, a1 = a0 + static_cast<std::uint64_t>(splits[i].count);
      const auto b0 = splits[j].first_seed, b1 = b0 + static_cast<std::uint64_t>(splits[j].count);
      if (a0 < b1 && b0 < a1) {
        throw ConfigError("seed ranges of splits '" + splits[j].name + "' and '" + splits[i].name + "' overlap");
      }
    }
  }
  if (!root.parent_path().empty() && !fs::exists(root.parent_path())) {
    throw IoError("parent directory of " + root.string() + " does not exist");
  }

  DatasetManifest manifest;
  manifest.root = root;
  manifest.scene = scene_template;
  for (const auto& spec : splits) {
    SplitEntry entry{spec.name, style_domain(spec.style), spec.count, spec.first_seed,
                     spec.first_seed + static_cast<std::uint64_t>(spec.count) - 1, spec.labels_evaluation_only};
    make_dirs(root / spec.name / "images");
    make_dirs(root / spec.name / "labels");
    for (int i = 0; i < spec.count; ++i) {
      SceneConfig cfg = scene_template;
      cfg.style = spec.style;
      cfg.seed = spec.first_seed + static_cast<std::uint64_t>(i);
      const Scene scene = generate_scene(cfg);
      write_rgb_png(manifest.image_path(entry, i), scene.image);
      write_label_png(manifest.label_path(entry, i), scene.labels);
    }
    manifest.splits.push_back(entry);
  }
  write_manifest(manifest);
  return manifest;
}

void write_manifest(const DatasetManifest& manifest) {
  json splits = json::array();
  for (const auto& s : manifest.splits) {
    splits.push_back({{"name", s.name},
                      {"domain", domain_name(s.domain)},
                      {"count", s.count},
                      {"seeds", {s.first_seed, s.last_seed}},
                      {"labels", s.labels_evaluation_only ? "evaluation_only" : "train"}});
  }
  const auto& sc = manifest.scene;
  json doc{{"version", manifest.version},
           {"splits", splits},
           {"scene",
            {{"height", sc.height},
             {"width", sc.width},
             {"num_classes", sc.num_classes},
             {"layout_jitter", sc.layout_jitter},
             {"style_gap", gap_to_json(sc.gap)}}}};
  const fs::path path = manifest.root / "manifest.json";
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

DatasetManifest read_manifest(const fs::path& root) {
  const fs::path path = root / "manifest.json";
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("malformed manifest " + path.string() + ": " + e.what());
  }
  DatasetManifest m;
  m.root = root;
  try {
    m.version = doc.at("version").get<std::string>();
    for (const auto& s : doc.at("splits")) {
      SplitEntry e;
      e.name = s.at("name").get<std::string>();
      e.domain = s.at("domain").get<std::string>() == "source" ? Domain::Source : Domain::Target;
      e.count = s.at("count").get<int>();
      e.first_seed = s.at("seeds").at(0).get<std::uint64_t>();
      e.last_seed = s.at("seeds").at(1).get<std::uint64_t>();
      e.labels_evaluation_only = s.value("labels", std::string("train")) == "evaluation_only";
      m.splits.push_back(e);
    }
    if (doc.contains("scene")) {
      const auto& sc = doc.at("scene");
      m.scene.height = sc.at("height").get<int>();
      m.scene.width = sc.at("width").get<int>();
      m.scene.num_classes = sc.at("num_classes").get<int>();
      m.scene.layout_jitter = sc.at("layout_jitter").get<double>();
      m.scene.gap = gap_from_json(sc.at("style_gap"));
    }
  } catch (const json::exception& e) {
    throw ValidationError("malformed manifest " + path.string() + ": " + e.what());
  }
  return m;
}

void validate_manifest(const DatasetManifest& manifest) {
  for (const auto& split : manifest.splits) {
    for (int i = 0; i < split.count; ++i) {
      const fs::path image = manifest.image_path(split, i);
      const fs::path label = manifest.label_path(split, i);
      if (!fs::exists(image)) throw ValidationError("missing image file " + image.string());
      if (!fs::exists(label)) throw ValidationError("missing label file " + label.string());
      LabelMap decoded;
      try {
        decoded = read_label_png(label);
        (void)read_rgb_png(image);
      } catch (const IoError& e) {
        throw ValidationError(e.what());
      }
      const LabelMap again = decode_label_png(encode_label_png(decoded));
      if (again.labels != decoded.labels || again.width != decoded.width || again.height != decoded.height) {
        throw ValidationError("label round trip mismatch for " + label.string());
      }
    }
  }
}

std::vector<Scene> load_split(const DatasetManifest& manifest, const std::string& name, bool with_labels) {
  const SplitEntry& split = manifest.split(name);
  std::vector<Scene> scenes;
  scenes.reserve(static_cast<std::size_t>(split.count));
  for (int i = 0; i < split.count; ++i) {
    Scene s;
    s.image = read_rgb_png(manifest.image_path(split, i));
    if (with_labels) {
      s.labels = read_label_png(manifest.label_path(split, i));
    } else {
      s.labels = LabelMap{s.image.height, s.image.width, {}};
    }
    s.domain = split.domain;
    s.seed = split.first_seed + static_cast<std::uint64_t>(i);
    scenes.push_back(std::move(s));
  }
  return scenes;
}

}  // namespace road
