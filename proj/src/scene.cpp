#include "road/scene.hpp"

#include "road/errors.hpp"
#include "road/rng.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace road {

namespace {

struct Rgb {
  double r, g, b;
};

constexpr std::array<Rgb, kMaxClasses> kPalette{{
    {110, 160, 225},  // sky
    {150, 105, 85},   // building
    {95, 95, 100},    // road
    {190, 45, 45},    // vehicle
    {225, 205, 70},   // pole
}};

// Surface texture strength per class in the real-style rendering.
constexpr std::array<double, kMaxClasses> kTextureScale{0.3, 1.0, 1.0, 0.6, 0.5};

struct Layout {
  LabelMap labels;
  std::vector<std::int16_t> instance;  // instance id per pixel, -1 for stuff classes
  std::vector<float> shade;            // multiplicative luminance pattern, shared by both styles
  int horizon = 0;
  double vanish_x = 0;
};

struct Placement {
  double depth;
  int x0, y0, x1, y1;  // half-open box
  std::uint8_t cls;
};

int scaled(double value, int reference) { return static_cast<int>(std::lround(value * reference / 128.0)); }

Layout draw_layout(const SceneConfig& cfg, Rng& rng) {
  const int h = cfg.height, w = cfg.width;
  Layout out;
  out.labels = LabelMap{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, kSky)};
  out.instance.assign(static_cast<std::size_t>(h) * w, -1);
  out.shade.assign(static_cast<std::size_t>(h) * w, 1.0f);
  out.horizon = std::lround(0.4 * h + cfg.layout_jitter * rng.uniform(-1, 1) * 0.1 * h);
  out.vanish_x = w / 2.0 + cfg.layout_jitter * rng.uniform(-1, 1) * 0.08 * w;
  const int hz = out.horizon;
  const double vx = out.vanish_x;
  const bool has_road = cfg.num_classes > kRoad;

  auto half_width = [&](double y) { return (y - hz + 1.0) / static_cast<double>(h - hz) * 0.6 * w; };
  auto idx = [w](int y, int x) { return static_cast<std::size_t>(y) * w + x; };

  // Ground plane: road trapezoid towards the vanishing point, facades beside it.
  for (int y = hz; y < h; ++y) {
    const double hw = half_width(y);
    for (int x = 0; x < w; ++x) {
      const bool on_road = has_road && std::abs(x + 0.5 - vx) <= hw;
      out.labels.at(y, x) = on_road ? kRoad : kBuilding;
      if (!on_road && ((y - hz) % 6 >= 3) && (x % 6 >= 3)) out.shade[idx(y, x)] = 0.7f;
    }
  }
  // Dashed centre line, dash length growing with proximity.
  if (has_road) {
    for (int y = hz + 2; y < h; ++y) {
      const double hw = half_width(y);
      const int phase = static_cast<int>(std::floor(std::log(y - hz + 2.0) * 6.0));
      if (phase % 2) continue;
      const double lw = std::max(0.6, hw * 0.025);
      for (int x = 0; x < w; ++x) {
        if (std::abs(x + 0.5 - vx) <= lw) out.shade[idx(y, x)] = 1.9f;
      }
    }
  }

  // Skyline: blocks get taller away from the vanishing point.
  int x = 0;
  std::int16_t next_instance = 0;
  while (x < w) {
    const int bw = std::max(2, scaled(static_cast<double>(rng.uniform_int(6, 16)), w));
    const int x1 = std::min(w, x + bw);
    const double dist = std::min(1.0, std::abs((x + x1) / 2.0 - vx) / (w / 2.0));
    const bool gap = rng.uniform() < 0.15;
    const double height = hz * (0.12 + 0.8 * dist * rng.uniform(0.6, 1.0));
    const int top = std::max(0, hz - static_cast<int>(std::lround(height)));
    const int period = std::max(3, static_cast<int>(std::lround(2 + 4 * dist)));
    const std::int16_t id = next_instance++;
    if (!gap) {
      for (int y = top; y < hz; ++y) {
        for (int xx = x; xx < x1; ++xx) {
          out.labels.at(y, xx) = kBuilding;
          out.instance[idx(y, xx)] = id;
          const int ry = (y - top) % period, rx = (xx - x) % period;
          if (ry >= 1 && ry <= period / 2 && rx >= 1 && rx <= period / 2) out.shade[idx(y, xx)] = 0.65f;
        }
      }
    }
    x = x1;
  }

  std::vector<Placement> objects;
  if (cfg.num_classes > kVehicle) {
    const int count = static_cast<int>(rng.uniform_int(2, 6));
    for (int i = 0; i < count; ++i) {
      const double t = rng.uniform(0.06, 1.0);
      double offset;
      if (t > 0.3) {
        const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
        offset = side * rng.uniform(0.45, 0.95);
      } else {
        offset = rng.uniform(-0.6, 0.6);
      }
      const double yb = std::min<double>(h, hz + t * (h - hz));
      const double cx = vx + offset * half_width(yb);
      const int vw = std::max(2, static_cast<int>(std::lround(t * 0.32 * w)));
      const int vh = std::max(2, static_cast<int>(std::lround(t * 0.2 * w)));
      const int x0 = static_cast<int>(std::lround(cx - vw / 2.0));
      const int y1 = static_cast<int>(std::lround(yb));
      objects.push_back({t, x0, std::max(hz, y1 - vh), x0 + vw, y1, kVehicle});
    }
  }
  if (cfg.num_classes > kPole) {
    const int count = static_cast<int>(rng.uniform_int(1, 4));
    for (int i = 0; i < count; ++i) {
      const double t = rng.uniform(0.1, 1.0);
      const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
      const double yb = std::min<double>(h, hz + t * (h - hz));
      const double cx = vx + side * (half_width(yb) + 2.0 + t * 0.05 * w);
      const int pw = std::max(1, static_cast<int>(std::lround(t * 0.03 * w)));
      const int y1 = static_cast<int>(std::lround(yb));
      const int ph = std::min(y1 - hz, static_cast<int>(std::lround(t * 0.5 * (h - hz))) + 3);
      const int x0 = static_cast<int>(std::lround(cx - pw / 2.0));
      objects.push_back({t, x0, y1 - ph, x0 + pw, y1, kPole});
    }
  }
  // Far objects first so near ones occlude them.
  std::stable_sort(objects.begin(), objects.end(),
                   [](const Placement& a, const Placement& b) { return a.depth < b.depth; });
  for (const auto& obj : objects) {
    const int x0 = std::max(0, obj.x0), x1 = std::min(w, obj.x1);
    const int y0 = std::max(0, obj.y0), y1 = std::min(h, obj.y1);
    if (x0 >= x1 || y0 >= y1) continue;
    const std::int16_t id = next_instance++;
    const int full_h = obj.y1 - obj.y0;
    for (int y = y0; y < y1; ++y) {
      const double v = (y - obj.y0 + 0.5) / full_h;
      for (int xx = x0; xx < x1; ++xx) {
        out.labels.at(y, xx) = obj.cls;
        out.instance[idx(y, xx)] = id;
        float s = 1.0f;
        if (obj.cls == kVehicle) {
          if (v > 0.8) {
            s = 0.4f;
          } else if (v < 0.4) {
            s = 0.75f;
          }
        }
        out.shade[idx(y, xx)] = s;
      }
    }
  }
  return out;
}

// Smooth noise field in [-1,1]: a coarse lattice upsampled bilinearly.
std::vector<double> low_frequency_noise(Rng& rng, int h, int w, int cells) {
  std::vector<double> lattice(static_cast<std::size_t>(cells + 1) * (cells + 1));
  for (auto& v : lattice) v = rng.uniform(-1, 1);
  std::vector<double> out(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    const double fy = static_cast<double>(y) / h * cells;
    const int iy = std::min(cells - 1, static_cast<int>(fy));
    const double ty = fy - iy;
    for (int x = 0; x < w; ++x) {
      const double fx = static_cast<double>(x) / w * cells;
      const int ix = std::min(cells - 1, static_cast<int>(fx));
      const double tx = fx - ix;
      auto at = [&](int a, int b) { return lattice[static_cast<std::size_t>(a) * (cells + 1) + b]; };
      out[static_cast<std::size_t>(y) * w + x] = (1 - ty) * ((1 - tx) * at(iy, ix) + tx * at(iy, ix + 1)) +
                                                 ty * ((1 - tx) * at(iy + 1, ix) + tx * at(iy + 1, ix + 1));
    }
  }
  return out;
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

RgbImage render(const SceneConfig& cfg, const Layout& layout, Rng& rng) {
  const int h = cfg.height, w = cfg.width;
  RgbImage img{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w * 3)};

  // Per-instance base colours.
  const int instances = 1 + *std::max_element(layout.instance.begin(), layout.instance.end());
  std::vector<Rgb> instance_color(static_cast<std::size_t>(std::max(instances, 0)));
  for (auto& c : instance_color) c = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  const double sky_tint = rng.uniform(-8, 8);

  const bool real = cfg.style == Style::TargetReal;
  std::array<std::vector<double>, 3> smooth;
  for (auto& ch : smooth) ch = low_frequency_noise(rng, h, w, 8);

  std::array<double, 3> shift{0, 0, 0};
  if (real) {
    for (int c = 0; c < 3; ++c) shift[c] = cfg.gap.color_shift[c] + cfg.gap.color_jitter * rng.normal();
  }
  // Real-style texture: white noise blurred by a 2x2 box, per channel with a shared luminance part.
  std::vector<double> grain(static_cast<std::size_t>(h + 1) * (w + 1));
  for (auto& g : grain) g = rng.normal();

  const double cy = (h - 1) / 2.0, cxm = (w - 1) / 2.0;
  const double rmax2 = cy * cy + cxm * cxm;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const int cls = layout.labels.labels[i];
      Rgb base = kPalette[static_cast<std::size_t>(cls)];
      const int inst = layout.instance[i];
      if (inst >= 0) {
        const double spread = cls == kVehicle ? 25.0 : 12.0;
        const Rgb& j = instance_color[static_cast<std::size_t>(inst)];
        base = {base.r + spread * j.r, base.g + spread * j.g, base.b + spread * j.b};
      }
      if (cls == kSky) {
        const double lift = 25.0 * static_cast<double>(y) / std::max(1, layout.horizon) + sky_tint;
        base = {base.r + lift, base.g + lift, base.b + lift * 0.5};
      }
      const double s = layout.shade[i];
      std::array<double, 3> v{base.r * s, base.g * s, base.b * s};
      if (!real) {
        for (int c = 0; c < 3; ++c) v[c] += 6.0 * smooth[c][i];
      } else {
        const std::size_t gi = static_cast<std::size_t>(y) * (w + 1) + x;
        const double tex = 0.5 * (grain[gi] + grain[gi + 1] + grain[gi + w + 1] + grain[gi + w + 2]) / 2.0;
        const double amp = cfg.gap.texture_amplitude * kTextureScale[static_cast<std::size_t>(cls)];
        const double r2 = ((y - cy) * (y - cy) + (x - cxm) * (x - cxm)) / rmax2;
        const double vig = 1.0 - cfg.gap.vignette * r2;
        for (int c = 0; c < 3; ++c) v[c] = (v[c] + amp * tex + 3.0 * smooth[c][i] + shift[c]) * vig;
      }
      for (int c = 0; c < 3; ++c) img.pixels[i * 3 + c] = to_byte(v[c]);
    }
  }
  return img;
}

}  // namespace

const char* class_name(int class_id) {
  static constexpr const char* names[kMaxClasses] = {"sky", "building", "road", "vehicle", "pole"};
  if (class_id < 0 || class_id >= kMaxClasses) return "unknown";
  return names[class_id];
}

const char* domain_name(Domain domain) { return domain == Domain::Source ? "source" : "target"; }

Domain style_domain(Style style) { return style == Style::SourceSynthetic ? Domain::Source : Domain::Target; }

void SceneConfig::validate() const {
  if (height < 32 || width < 32) {
    throw ConfigError("scene image size must be at least 32x32, got " + std::to_string(height) + "x" +
                      std::to_string(width));
  }
  if (num_classes < 2 || num_classes > kMaxClasses) {
    throw ConfigError("num_classes must be in [2," + std::to_string(kMaxClasses) + "]");
  }
  if (layout_jitter < 0.0 || layout_jitter > 1.0) throw ConfigError("layout_jitter must be in [0,1]");
  if (gap.texture_amplitude < 0 || gap.color_jitter < 0 || gap.vignette < 0 || gap.vignette >= 1) {
    throw ConfigError("style gap amplitudes must be non-negative and vignette < 1");
  }
}

Scene generate_scene(const SceneConfig& config) {
  config.validate();
  // Deterministic rejection: redraw the layout from a derived stream until
  // the per-scene layout checks hold.
  Layout layout;
  for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
    Rng layout_rng(attempt == 0 ? mix_seed(config.seed, 0x1A7) : mix_seed(mix_seed(config.seed, 0x1A7), attempt));
    layout = draw_layout(config, layout_rng);
    if (validate_layout(layout.labels).ok()) break;
  }
  Rng render_rng(mix_seed(config.seed, config.style == Style::TargetReal ? 0x7A6 : 0x50C));
  Scene scene;
  scene.image = render(config, layout, render_rng);
  scene.labels = std::move(layout.labels);
  scene.domain = style_domain(config.style);
  scene.seed = config.seed;
  return scene;
}

InstanceStats& InstanceStats::operator+=(const InstanceStats& other) {
  center_area += other.center_area;
  center_count += other.center_count;
  outer_area += other.outer_area;
  outer_count += other.outer_count;
  return *this;
}

InstanceStats instance_stats(const LabelMap& labels) {
  const int h = labels.height, w = labels.width;
  std::vector<char> seen(labels.labels.size(), 0);
  std::vector<std::pair<int, int>> stack;
  InstanceStats stats;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto cls = labels.at(y, x);
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if ((cls != kVehicle && cls != kPole) || seen[i]) continue;
      long area = 0;
      double sum_x = 0;
      stack.assign(1, {y, x});
      seen[i] = 1;
      while (!stack.empty()) {
        auto [cy, cx] = stack.back();
        stack.pop_back();
        ++area;
        sum_x += cx;
        constexpr int dy[4] = {-1, 1, 0, 0};
        constexpr int dx[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int ny = cy + dy[k], nx = cx + dx[k];
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          const std::size_t j = static_cast<std::size_t>(ny) * w + nx;
          if (seen[j] || labels.labels[j] != cls) continue;
          seen[j] = 1;
          stack.emplace_back(ny, nx);
        }
      }
      const double centroid = sum_x / static_cast<double>(area) + 0.5;
      if (centroid >= w / 3.0 && centroid < 2.0 * w / 3.0) {
        stats.center_area += static_cast<double>(area);
        ++stats.center_count;
      } else {
        stats.outer_area += static_cast<double>(area);
        ++stats.outer_count;
      }
    }
  }
  return stats;
}

LayoutReport validate_layout(const LabelMap& labels) {
  LayoutReport report;
  const int h = labels.height, w = labels.width;
  const int band = h / 5;
  const auto hist = class_histogram(labels);
  int present = 0;
  for (long n : hist) present += n > 0 ? 1 : 0;
  report.instances = instance_stats(labels);
  if (present <= 1) {
    report.degenerate = true;
    return report;
  }
  for (int y = 0; y < band; ++y) {
    for (int x = 0; x < w; ++x) {
      if (labels.at(y, x) == kRoad) report.road_bottom = false;
      if (labels.at(h - 1 - y, x) == kSky) report.sky_top = false;
    }
  }
  const auto& s = report.instances;
  if (s.center_count > 0 && s.outer_count > 0) report.center_smaller = s.center_mean() < s.outer_mean();
  return report;
}

std::array<double, 3> channel_means(const RgbImage& image) {
  std::array<double, 3> sums{0, 0, 0};
  const std::size_t n = static_cast<std::size_t>(image.height) * image.width;
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) sums[c] += image.pixels[i * 3 + c];
  }
  for (auto& s : sums) s /= static_cast<double>(n);
  return sums;
}

std::array<long, kMaxClasses> class_histogram(const LabelMap& labels) {
  std::array<long, kMaxClasses> hist{};
  for (auto l : labels.labels) {
    if (l < kMaxClasses) ++hist[l];
  }
  return hist;
}

}  // namespace road
