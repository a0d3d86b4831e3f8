#include "road/model.hpp"

#include <algorithm>
#include <array>

namespace road {

namespace {

struct Patch {
  Crop<float> crop;
  int label = 0;
};

int dominant_class(const LabelMap& labels, int row, int col, int size, int num_classes) {
  std::array<int, 256> counts{};
  for (int y = row; y < row + size; ++y)
    for (int x = col; x < col + size; ++x) ++counts[labels.at(y, x)];
  return static_cast<int>(std::max_element(counts.begin(), counts.begin() + num_classes) - counts.begin());
}

std::vector<Patch> sample_patches(const PretrainConfig& cfg, std::uint64_t first_seed, int scenes, Rng& rng) {
  std::vector<Patch> out;
  for (int i = 0; i < scenes; ++i) {
    SceneConfig sc = cfg.scene;
    sc.style = Style::TargetReal;
    sc.seed = first_seed + static_cast<std::uint64_t>(i);
    const Scene scene = generate_scene(sc);
    for (int p = 0; p < cfg.patches_per_scene; ++p) {
      const int row = static_cast<int>(rng.uniform_int(0, scene.image.height - cfg.patch));
      const int col = static_cast<int>(rng.uniform_int(0, scene.image.width - cfg.patch));
      out.push_back({make_crop<float>(scene.image, row, col, cfg.patch, cfg.patch, Domain::Target),
                     dominant_class(scene.labels, row, col, cfg.patch, sc.num_classes)});
    }
  }
  return out;
}

struct ProxyNet {
  Backbone<float> backbone;
  Tensor<float> weight;
  Tensor<float> bias;

  Var<float> logits(Graph<float>& g, const Crop<float>& crop) {
    auto f = backbone(g, g.constant(crop.pixels));
    auto pooled = pool_avg2d(f, f.dim(1), f.dim(1));
    auto row = reshape(pooled, {1, f.dim(0)});
    return affine(row, g.leaf(weight), g.leaf(bias));
  }
};

}  // namespace

PretrainResult pretrain_teacher(const PretrainConfig& cfg) {
  if (cfg.scenes < 1 || cfg.patches_per_scene < 1) throw ConfigError("teacher pretraining corpus is empty");
  if (cfg.epochs < 1 || cfg.batch < 1) throw ConfigError("teacher pretraining needs epochs and batch >= 1");
  cfg.scene.validate();
  cfg.backbone.validate();
  if (cfg.patch % cfg.backbone.total_stride() != 0 || cfg.patch > cfg.scene.height || cfg.patch > cfg.scene.width) {
    throw ConfigError("teacher patch size must divide by the backbone stride and fit the scene");
  }

  Rng rng(mix_seed(cfg.seed, 0x7EAC));
  ProxyNet net{Backbone<float>(cfg.backbone, rng), Tensor<float>({cfg.backbone.out_channels(), cfg.scene.num_classes}, true),
               Tensor<float>({cfg.scene.num_classes}, true)};
  const double std = std::sqrt(1.0 / cfg.backbone.out_channels());
  for (Index i = 0; i < net.weight.size(); ++i) net.weight[i] = static_cast<float>(std * rng.normal());

  const auto train = sample_patches(cfg, cfg.first_seed, cfg.scenes, rng);
  const auto heldout =
      sample_patches(cfg, cfg.first_seed + static_cast<std::uint64_t>(cfg.scenes), cfg.heldout_scenes, rng);

  std::vector<NamedParam<float>> params;
  net.backbone.params("", params);
  params.push_back({"proxy.weight", &net.weight});
  params.push_back({"proxy.bias", &net.bias});
  Sgd<float> sgd(params, static_cast<float>(cfg.momentum));

  PretrainResult result;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t batches = (train.size() + static_cast<std::size_t>(cfg.batch) - 1) / static_cast<std::size_t>(cfg.batch);
  const std::size_t total_steps = batches * static_cast<std::size_t>(cfg.epochs);
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(i - 1)))]);
    }
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * static_cast<std::size_t>(cfg.batch);
      const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(cfg.batch));
      Graph<float> g;
      std::vector<Var<float>> rows;
      std::vector<int> labels;
      for (std::size_t i = lo; i < hi; ++i) {
        rows.push_back(net.logits(g, train[order[i]].crop));
        labels.push_back(train[order[i]].label);
      }
      auto loss = softmax_cross_entropy(concat_rows(rows), labels);
      sgd.zero_grad();
      g.backward(loss);
      const double progress = static_cast<double>(step++) / static_cast<double>(total_steps);
      sgd.step(static_cast<float>(cfg.lr * std::pow(1.0 - progress, 0.9)));
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(hi - lo);
      if (!std::isfinite(loss.item())) throw DivergenceError("teacher pretraining diverged", "epoch " + std::to_string(epoch));
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(train.size()));
  }

  int correct = 0;
  for (const auto& p : heldout) {
    Graph<float> g;
    const auto& v = net.logits(g, p.crop).value();
    Index arg = 0;
    v.maxCoeff(&arg);
    correct += static_cast<int>(arg) == p.label;
  }
  result.heldout_accuracy = heldout.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(heldout.size());
  result.teacher = TeacherModel<float>(std::move(net.backbone));
  return result;
}

}  // namespace road
