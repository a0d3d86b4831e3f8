#pragma once

#include "road/autodiff/ops.hpp"
#include "road/errors.hpp"
#include "road/optim.hpp"
#include "road/rng.hpp"
#include "road/scene.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace road {

struct BackboneConfig {
  std::vector<int> widths{16, 32, 64};
  std::vector<int> dilations{1, 1, 2};
  std::vector<int> strides{2, 2, 1};
  int kernel = 3;
  int convs_per_stage = 2;  // the first conv of a stage carries its stride
  int in_channels = 3;

  int stages() const { return static_cast<int>(widths.size()); }
  int total_stride() const {
    int s = 1;
    for (int v : strides) s *= v;
    return s;
  }
  int out_channels() const { return widths.back(); }

  void validate() const {
    if (widths.empty() || widths.size() != dilations.size() || widths.size() != strides.size()) {
      throw ConfigError("backbone widths, dilations and strides must have one entry per stage");
    }
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("backbone kernel must be odd and positive");
    if (convs_per_stage < 1) throw ConfigError("backbone needs at least one conv per stage");
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (widths[i] < 1 || dilations[i] < 1 || strides[i] < 1) {
        throw ConfigError("backbone widths, dilations and strides must be positive");
      }
    }
  }
};

/// Region of a full image fed to a network, already normalized to [3,h,w].
template <typename Scalar>
struct Crop {
  Tensor<Scalar> pixels;
  int row = 0;
  int col = 0;
  Domain domain = Domain::Source;
};

/// Backbone activations of one crop plus the metadata the region splitter
/// needs to place them in the full image.
template <typename Scalar>
struct FeatureMap {
  Var<Scalar> features;  // [C, h/stride, w/stride]
  int crop_row = 0;
  int crop_col = 0;
  int feat_stride = 1;
  Domain domain = Domain::Source;

  Index channels() const { return features.dim(0); }
  Index rows() const { return features.dim(1); }
  Index cols() const { return features.dim(2); }
};

inline constexpr double kPixelMean = 128.0;
inline constexpr double kPixelScale = 64.0;

/// Copies an h x w window of an image into a normalized [3,h,w] tensor.
template <typename Scalar>
Crop<Scalar> make_crop(const RgbImage& image, int row, int col, int h, int w, Domain domain) {
  if (row < 0 || col < 0 || h < 1 || w < 1 || row + h > image.height || col + w > image.width) {
    throw ShapeError("crop " + std::to_string(h) + "x" + std::to_string(w) + " at (" + std::to_string(row) + "," +
                     std::to_string(col) + ") outside " + std::to_string(image.height) + "x" +
                     std::to_string(image.width) + " image");
  }
  Tensor<Scalar> t({3, h, w});
  auto& d = t.data();
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        d[(static_cast<Index>(c) * h + y) * w + x] =
            static_cast<Scalar>((image.at(row + y, col + x, c) - kPixelMean) / kPixelScale);
      }
  return {std::move(t), row, col, domain};
}

template <typename Scalar>
struct ConvLayer {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;
  Conv2dParams params;

  Var<Scalar> operator()(Graph<Scalar>& g, const Var<Scalar>& x) {
    return conv2d(x, g.leaf(weight), g.leaf(bias), params);
  }
};

/// He-normal weights, zero bias.
template <typename Scalar>
ConvLayer<Scalar> make_conv(Index out_c, Index in_c, Index k, Conv2dParams params, Rng& rng) {
  ConvLayer<Scalar> layer{Tensor<Scalar>({out_c, in_c, k, k}, true), Tensor<Scalar>({out_c}, true), params};
  const double std = std::sqrt(2.0 / static_cast<double>(in_c * k * k));
  for (Index i = 0; i < layer.weight.size(); ++i) layer.weight[i] = static_cast<Scalar>(std * rng.normal());
  return layer;
}

template <typename Scalar>
class Backbone {
 public:
  Backbone() = default;

  Backbone(BackboneConfig config, Rng& rng) : config_(std::move(config)) {
    config_.validate();
    Index in = config_.in_channels;
    stages_.resize(static_cast<std::size_t>(config_.stages()));
    for (int s = 0; s < config_.stages(); ++s) {
      const Index dil = config_.dilations[s];
      for (int l = 0; l < config_.convs_per_stage; ++l) {
        Conv2dParams p{l == 0 ? config_.strides[s] : 1, dil, dil * (config_.kernel / 2)};
        stages_[s].push_back(make_conv<Scalar>(config_.widths[s], in, config_.kernel, p, rng));
        in = config_.widths[s];
      }
    }
  }

  const BackboneConfig& config() const { return config_; }

  Var<Scalar> operator()(Graph<Scalar>& g, Var<Scalar> x) {
    for (auto& stage : stages_)
      for (auto& conv : stage) x = relu(conv(g, x));
    return x;
  }

  void params(const std::string& prefix, std::vector<NamedParam<Scalar>>& out) {
    for (std::size_t s = 0; s < stages_.size(); ++s)
      for (std::size_t l = 0; l < stages_[s].size(); ++l) {
        const std::string base = prefix + "stage" + std::to_string(s) + ".conv" + std::to_string(l) + ".";
        out.push_back({base + "weight", &stages_[s][l].weight});
        out.push_back({base + "bias", &stages_[s][l].bias});
      }
  }

  void set_stage_trainable(int stage, bool trainable) {
    for (auto& conv : stages_.at(static_cast<std::size_t>(stage))) {
      conv.weight.set_requires_grad(trainable);
      conv.bias.set_requires_grad(trainable);
    }
  }

  void set_trainable(bool trainable) {
    for (int s = 0; s < config_.stages(); ++s) set_stage_trainable(s, trainable);
  }

  /// Copies parameter values; trainability flags of this backbone are kept.
  void copy_values_from(const Backbone& other) {
    if (other.stages_.size() != stages_.size()) throw ShapeError("backbone stage count mismatch");
    for (std::size_t s = 0; s < stages_.size(); ++s)
      for (std::size_t l = 0; l < stages_[s].size(); ++l) {
        auto& dst = stages_[s][l];
        const auto& src = other.stages_[s][l];
        if (dst.weight.shape() != src.weight.shape()) throw ShapeError("backbone layer shape mismatch");
        dst.weight.data() = src.weight.data();
        dst.bias.data() = src.bias.data();
      }
  }

 private:
  BackboneConfig config_;
  std::vector<std::vector<ConvLayer<Scalar>>> stages_;
};

template <typename Scalar>
void check_crop_divisible(const Tensor<Scalar>& pixels, int stride) {
  if (pixels.rank() != 3 || pixels.dim(0) != 3) throw ShapeError("crop must be [3,h,w], got " + shape_string(pixels.shape()));
  if (pixels.dim(1) % stride != 0 || pixels.dim(2) % stride != 0) {
    throw ShapeError("crop " + shape_string(pixels.shape()) + " not divisible by stride " + std::to_string(stride));
  }
}

template <typename Scalar>
class StudentModel {
 public:
  StudentModel() = default;

  StudentModel(const BackboneConfig& config, int num_classes, Rng& rng)
      : backbone_(config, rng),
        head_(make_conv<Scalar>(num_classes, config.out_channels(), 1, {}, rng)),
        num_classes_(num_classes) {}

  Backbone<Scalar>& backbone() { return backbone_; }
  const Backbone<Scalar>& backbone() const { return backbone_; }
  int num_classes() const { return num_classes_; }
  int frozen_prefix_stages() const { return frozen_; }

  /// Excludes stages [0, k) from updates.
  void freeze_prefix(int k) {
    if (k < 0 || k > backbone_.config().stages()) {
      throw ConfigError("freeze_prefix: k=" + std::to_string(k) + " outside [0," +
                        std::to_string(backbone_.config().stages()) + "]");
    }
    frozen_ = k;
    for (int s = 0; s < backbone_.config().stages(); ++s) backbone_.set_stage_trainable(s, s >= k);
  }

  FeatureMap<Scalar> forward_features(Graph<Scalar>& g, const Crop<Scalar>& crop) {
    const int stride = backbone_.config().total_stride();
    check_crop_divisible(crop.pixels, stride);
    return {backbone_(g, g.constant(crop.pixels)), crop.row, crop.col, stride, crop.domain};
  }

  /// Logits at crop resolution from already computed features.
  Var<Scalar> segment(Graph<Scalar>& g, const FeatureMap<Scalar>& fm, Index h, Index w) {
    return upsample_bilinear(head_(g, fm.features), h, w);
  }

  Var<Scalar> forward_segmentation(Graph<Scalar>& g, const Crop<Scalar>& crop) {
    auto fm = forward_features(g, crop);
    return segment(g, fm, crop.pixels.dim(1), crop.pixels.dim(2));
  }

  std::vector<NamedParam<Scalar>> params() {
    std::vector<NamedParam<Scalar>> out;
    backbone_.params("backbone.", out);
    out.push_back({"head.weight", &head_.weight});
    out.push_back({"head.bias", &head_.bias});
    return out;
  }

 private:
  Backbone<Scalar> backbone_;
  ConvLayer<Scalar> head_;
  int num_classes_ = 0;
  int frozen_ = 0;
};

/// Frozen backbone fitted to the target style. Its parameters never require
/// gradients, so graphs through it carry no backward work.
template <typename Scalar>
class TeacherModel {
 public:
  TeacherModel() = default;
  explicit TeacherModel(Backbone<Scalar> backbone) : backbone_(std::move(backbone)) { backbone_.set_trainable(false); }

  const Backbone<Scalar>& backbone() const { return backbone_; }

  FeatureMap<Scalar> forward_features(Graph<Scalar>& g, const Crop<Scalar>& crop) {
    const int stride = backbone_.config().total_stride();
    check_crop_divisible(crop.pixels, stride);
    return {backbone_(g, g.constant(crop.pixels)), crop.row, crop.col, stride, crop.domain};
  }

  std::vector<NamedParam<Scalar>> params() {
    std::vector<NamedParam<Scalar>> out;
    backbone_.params("teacher.", out);
    return out;
  }

  /// FNV-1a over the raw parameter bytes.
  std::uint64_t checksum() {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& p : params()) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(p.tensor->data().data());
      for (std::size_t i = 0; i < static_cast<std::size_t>(p.tensor->size()) * sizeof(Scalar); ++i) {
        h = (h ^ bytes[i]) * 1099511628211ull;
      }
    }
    return h;
  }

 private:
  Backbone<Scalar> backbone_;
};

/// One two-layer perceptron per spatial region, applied to channel vectors.
template <typename Scalar>
class DomainClassifierBank {
 public:
  static constexpr Index kHidden = 32;

  DomainClassifierBank() = default;

  DomainClassifierBank(int regions, Index channels, Rng& rng) {
    if (regions < 1) throw ConfigError("classifier bank needs at least one region");
    for (int m = 0; m < regions; ++m) {
      Head h{Tensor<Scalar>({channels, kHidden}, true), Tensor<Scalar>({kHidden}, true),
             Tensor<Scalar>({kHidden, 2}, true), Tensor<Scalar>({2}, true)};
      he_init(h.w1, channels, rng);
      he_init(h.w2, kHidden, rng);
      heads_.push_back(std::move(h));
    }
  }

  int size() const { return static_cast<int>(heads_.size()); }

  /// rows [N,C] -> domain logits [N,2].
  Var<Scalar> operator()(Graph<Scalar>& g, int region, const Var<Scalar>& rows) {
    Head& h = heads_.at(static_cast<std::size_t>(region));
    return affine(relu(affine(rows, g.leaf(h.w1), g.leaf(h.b1))), g.leaf(h.w2), g.leaf(h.b2));
  }

  std::vector<NamedParam<Scalar>> params() {
    std::vector<NamedParam<Scalar>> out;
    for (std::size_t m = 0; m < heads_.size(); ++m) {
      const std::string base = "domain" + std::to_string(m) + ".";
      out.push_back({base + "w1", &heads_[m].w1});
      out.push_back({base + "b1", &heads_[m].b1});
      out.push_back({base + "w2", &heads_[m].w2});
      out.push_back({base + "b2", &heads_[m].b2});
    }
    return out;
  }

 private:
  struct Head {
    Tensor<Scalar> w1, b1, w2, b2;
  };

  static void he_init(Tensor<Scalar>& t, Index fan_in, Rng& rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(std * rng.normal());
  }

  std::vector<Head> heads_;
};

struct PretrainConfig {
  BackboneConfig backbone{};
  SceneConfig scene{};               // style is forced to the target style
  std::uint64_t first_seed = 300000;  // disjoint from the dataset splits
  int scenes = 200;
  int heldout_scenes = 30;
  int patches_per_scene = 8;
  int patch = 32;
  int epochs = 16;
  int batch = 32;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  TeacherModel<float> teacher;
  std::vector<double> epoch_loss;
  double heldout_accuracy = 0.0;
};

/// Trains a backbone to predict the dominant class of target-style patches
/// from pooled features, then freezes it.
PretrainResult pretrain_teacher(const PretrainConfig& config);

}  // namespace road
