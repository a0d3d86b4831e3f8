#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace road {

enum class Domain : std::uint8_t { Source = 0, Target = 1 };
enum class Style : std::uint8_t { SourceSynthetic, TargetReal };

inline constexpr std::uint8_t kIgnoreLabel = 255;
inline constexpr int kMaxClasses = 5;

// Class indices of the toy urban palette.
enum ClassId : std::uint8_t { kSky = 0, kBuilding = 1, kRoad = 2, kVehicle = 3, kPole = 4 };

const char* class_name(int class_id);
const char* domain_name(Domain domain);
Domain style_domain(Style style);

/// Appearance knobs separating the real-style rendering from the synthetic
/// one. All amplitudes are in 8-bit intensity units.
struct StyleGap {
  double texture_amplitude = 22.0;              // per-pixel surface texture
  std::array<double, 3> color_shift{36.0, -4.0, -18.0};  // global RGB offset
  double color_jitter = 6.0;                    // per-image spread of the offset
  double vignette = 0.35;                       // corner darkening fraction
};

struct SceneConfig {
  int height = 128;
  int width = 128;
  int num_classes = 5;
  Style style = Style::SourceSynthetic;
  std::uint64_t seed = 0;
  double layout_jitter = 0.5;
  StyleGap gap{};

  /// Throws ConfigError when any field is out of range.
  void validate() const;
};

struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // row-major HWC

  std::uint8_t at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;  // row-major HW

  std::uint8_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
};

struct Scene {
  RgbImage image;
  LabelMap labels;
  Domain domain = Domain::Source;
  std::uint64_t seed = 0;
};

/// Renders one scene. A pure function of the config: the label geometry
/// depends only on (seed, size, num_classes, layout_jitter), so matched seeds
/// give identical labels in both styles.
Scene generate_scene(const SceneConfig& config);

/// Sizes of connected vehicle/pole instances, bucketed by which third of the
/// image columns holds their centroid.
struct InstanceStats {
  double center_area = 0;
  long center_count = 0;
  double outer_area = 0;
  long outer_count = 0;

  double center_mean() const { return center_count ? center_area / static_cast<double>(center_count) : 0.0; }
  double outer_mean() const { return outer_count ? outer_area / static_cast<double>(outer_count) : 0.0; }
  InstanceStats& operator+=(const InstanceStats& other);
};

InstanceStats instance_stats(const LabelMap& labels);

struct LayoutReport {
  bool sky_top = true;         // bottom 20% of rows hold no sky
  bool road_bottom = true;     // top 20% of rows hold no road
  bool center_smaller = true;  // central instances smaller than outer ones (vacuous if either side is empty)
  bool degenerate = false;     // a single class covers the whole map
  InstanceStats instances;

  bool ok() const { return sky_top && road_bottom && center_smaller; }
};

LayoutReport validate_layout(const LabelMap& labels);
inline LayoutReport validate_layout(const Scene& scene) { return validate_layout(scene.labels); }

/// Per-channel mean intensity of an image, in [0,255].
std::array<double, 3> channel_means(const RgbImage& image);

/// Pixel count per class (index 0..kMaxClasses-1); ignore pixels are skipped.
std::array<long, kMaxClasses> class_histogram(const LabelMap& labels);

}  // namespace road
