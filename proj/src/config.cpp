#include "road/config.hpp"

#include "road/errors.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace road {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

template <typename T>
T parse_number(const std::string& text, const std::string& what) {
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end || text.empty()) {
    throw ConfigError(what + ": cannot parse '" + text + "'");
  }
  return value;
}

double parse_double(const std::string& text, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw ConfigError(what + ": cannot parse '" + text + "'");
  return v;
}

std::vector<int> parse_ints(const std::string& text, const std::string& what) {
  std::vector<int> out;
  for (const auto& item : split(text, ',')) out.push_back(parse_number<int>(item, what));
  if (out.empty()) throw ConfigError(what + ": empty list");
  return out;
}

std::string ints(const std::vector<int>& v) {
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

std::pair<int, int> parse_grid(const std::string& text) {
  const auto x = text.find('x');
  auto bad = [&] { return ConfigError("grid must look like HxW with an ASCII 'x', got '" + text + "'"); };
  if (x == std::string::npos || text.find('x', x + 1) != std::string::npos) throw bad();
  const std::string h = text.substr(0, x), w = text.substr(x + 1);
  for (const auto* part : {&h, &w}) {
    if (part->empty() || part->find_first_not_of("0123456789") != std::string::npos) throw bad();
  }
  const int gh = parse_number<int>(h, "grid"), gw = parse_number<int>(w, "grid");
  if (gh < 1 || gw < 1) throw bad();
  return {gh, gw};
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  if (text.find(',') == std::string::npos) {
    const auto n = parse_number<std::uint64_t>(trim(text), "seeds");
    if (n == 0) throw ConfigError("seeds: need at least one");
    for (std::uint64_t s = 0; s < n; ++s) out.push_back(s);
    return out;
  }
  for (const auto& item : split(text, ',')) out.push_back(parse_number<std::uint64_t>(item, "seeds"));
  return out;
}

void set_value(RunConfig& c, const std::string& section, const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  const std::string what = section + "." + key;
  auto i = [&] { return parse_number<int>(v, what); };
  auto u = [&] { return parse_number<std::uint64_t>(v, what); };
  auto d = [&] { return parse_double(v, what); };
  auto unknown = [&] { return ConfigError("unknown config key '" + what + "'"); };

  if (section == "scene") {
    auto& s = c.scene;
    if (key == "height") s.height = i();
    else if (key == "width") s.width = i();
    else if (key == "num_classes") s.num_classes = i();
    else if (key == "layout_jitter") s.layout_jitter = d();
    else if (key == "texture_amplitude") s.gap.texture_amplitude = d();
    else if (key == "color_jitter") s.gap.color_jitter = d();
    else if (key == "vignette") s.gap.vignette = d();
    else if (key == "color_shift") {
      const auto parts = split(v, ',');
      if (parts.size() != 3) throw ConfigError(what + ": expected three comma-separated values");
      for (int k = 0; k < 3; ++k) s.gap.color_shift[k] = parse_double(parts[k], what);
    } else throw unknown();
  } else if (section == "dataset") {
    if (key == "source_train") c.source_train = i();
    else if (key == "target_train") c.target_train = i();
    else if (key == "target_val") c.target_val = i();
    else throw unknown();
  } else if (section == "model") {
    auto& b = c.train.backbone;
    if (key == "widths") b.widths = parse_ints(v, what);
    else if (key == "dilations") b.dilations = parse_ints(v, what);
    else if (key == "strides") b.strides = parse_ints(v, what);
    else if (key == "kernel") b.kernel = i();
    else if (key == "convs_per_stage") b.convs_per_stage = i();
    else throw unknown();
    c.pretrain.backbone = b;
  } else if (section == "pretrain") {
    auto& p = c.pretrain;
    if (key == "first_seed") p.first_seed = u();
    else if (key == "scenes") p.scenes = i();
    else if (key == "heldout_scenes") p.heldout_scenes = i();
    else if (key == "patches_per_scene") p.patches_per_scene = i();
    else if (key == "patch") p.patch = i();
    else if (key == "epochs") p.epochs = i();
    else if (key == "batch") p.batch = i();
    else if (key == "lr") p.lr = d();
    else if (key == "momentum") p.momentum = d();
    else if (key == "seed") p.seed = u();
    else throw unknown();
  } else if (section == "train") {
    auto& t = c.train;
    if (key == "variant") t.variant = parse_variant(v);
    else if (key == "grid") std::tie(t.grid_h, t.grid_w) = parse_grid(v);
    else if (key == "lambda1") t.lambda_dist = d();
    else if (key == "lambda2") t.lambda_spt = d();
    else if (key == "base_lr") t.base_lr = d();
    else if (key == "lr_power") t.lr_power = d();
    else if (key == "momentum") t.momentum = d();
    else if (key == "head_lr_mult") t.head_lr_mult = d();
    else if (key == "domain_lr_mult") t.domain_lr_mult = d();
    else if (key == "batch") t.batch = i();
    else if (key == "source_patches") t.source_patches = i();
    else if (key == "crop") t.crop = i();
    else if (key == "iterations") t.iterations = i();
    else if (key == "seed") t.seed = u();
    else if (key == "frozen_k") t.frozen_k = i();
    else if (key == "validate_every") t.validate_every = i();
    else if (key == "checkpoint_every") t.checkpoint_every = i();
    else throw unknown();
  } else if (section == "ablate") {
    if (key == "seeds") c.seeds = parse_seeds(v);
    else if (key == "jobs") c.jobs = i();
    else throw unknown();
  } else {
    throw ConfigError("unknown config section '[" + section + "]'");
  }
}

void apply_ini(RunConfig& config, const std::string& text, const std::string& origin) {
  std::stringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    line = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside any section");
    try {
      set_value(config, section, trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig c;
  apply_ini(c, ss.str(), path.string());
  return c;
}

std::string to_ini(const RunConfig& c) {
  std::ostringstream os;
  const auto& s = c.scene;
  os << "[scene]\n"
     << "height = " << s.height << "\nwidth = " << s.width << "\nnum_classes = " << s.num_classes
     << "\nlayout_jitter = " << num(s.layout_jitter) << "\ntexture_amplitude = " << num(s.gap.texture_amplitude)
     << "\ncolor_shift = " << num(s.gap.color_shift[0]) << "," << num(s.gap.color_shift[1]) << ","
     << num(s.gap.color_shift[2]) << "\ncolor_jitter = " << num(s.gap.color_jitter)
     << "\nvignette = " << num(s.gap.vignette) << "\n\n";
  os << "[dataset]\nsource_train = " << c.source_train << "\ntarget_train = " << c.target_train
     << "\ntarget_val = " << c.target_val << "\n\n";
  const auto& b = c.train.backbone;
  os << "[model]\nwidths = " << ints(b.widths) << "\ndilations = " << ints(b.dilations)
     << "\nstrides = " << ints(b.strides) << "\nkernel = " << b.kernel << "\nconvs_per_stage = " << b.convs_per_stage
     << "\n\n";
  const auto& p = c.pretrain;
  os << "[pretrain]\nfirst_seed = " << p.first_seed << "\nscenes = " << p.scenes
     << "\nheldout_scenes = " << p.heldout_scenes << "\npatches_per_scene = " << p.patches_per_scene
     << "\npatch = " << p.patch << "\nepochs = " << p.epochs << "\nbatch = " << p.batch << "\nlr = " << num(p.lr)
     << "\nmomentum = " << num(p.momentum) << "\nseed = " << p.seed << "\n\n";
  const auto& t = c.train;
  os << "[train]\nvariant = " << variant_name(t.variant) << "\ngrid = " << t.grid_h << "x" << t.grid_w
     << "\nlambda1 = " << num(t.lambda_dist) << "\nlambda2 = " << num(t.lambda_spt) << "\nbase_lr = " << num(t.base_lr)
     << "\nlr_power = " << num(t.lr_power) << "\nmomentum = " << num(t.momentum)
     << "\nhead_lr_mult = " << num(t.head_lr_mult) << "\ndomain_lr_mult = " << num(t.domain_lr_mult)
     << "\nbatch = " << t.batch << "\nsource_patches = " << t.source_patches << "\ncrop = " << t.crop
     << "\niterations = " << t.iterations << "\nseed = " << t.seed << "\nfrozen_k = " << t.frozen_k
     << "\nvalidate_every = " << t.validate_every << "\ncheckpoint_every = " << t.checkpoint_every << "\n\n";
  std::string seeds;
  for (std::size_t k = 0; k < c.seeds.size(); ++k) seeds += (k ? "," : "") + std::to_string(c.seeds[k]);
  if (c.seeds.size() == 1) seeds += ",";  // keep it a list, not a count
  os << "[ablate]\nseeds = " << seeds << "\njobs = " << c.jobs << "\n";
  return os.str();
}

void write_resolved_config(const RunConfig& config, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
  std::ofstream out(dir / "resolved.ini");
  if (!out) throw IoError("cannot write " + (dir / "resolved.ini").string());
  out << "# " << kCodeVersion << "\n" << to_ini(config);
}

}  // namespace road
