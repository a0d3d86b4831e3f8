#pragma once

#include "road/autodiff/tensor.hpp"

#include <string>
#include <vector>

namespace road {

template <typename Scalar>
struct NamedParam {
  std::string name;
  Tensor<Scalar>* tensor = nullptr;
  Scalar lr_mult = Scalar(1);
};

/// SGD with momentum in the form v = mu * v + lr * mult * g; w -= v. Parameters
/// whose tensor does not require a gradient are skipped entirely, which is
/// how frozen stages are kept bitwise fixed.
template <typename Scalar>
class Sgd {
 public:
  explicit Sgd(std::vector<NamedParam<Scalar>> params, Scalar momentum = Scalar(0.9))
      : params_(std::move(params)), momentum_(momentum) {
    for (const auto& p : params_) velocity_.push_back(Buffer<Scalar>::Zero(p.tensor->size()));
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor->zero_grad();
  }

  void step(Scalar lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<Scalar>& t = *params_[i].tensor;
      if (!t.requires_grad() || !t.has_grad()) continue;
      velocity_[i] = momentum_ * velocity_[i] + (lr * params_[i].lr_mult) * t.grad_buffer();
      t.data() -= velocity_[i];
    }
  }

  const std::vector<NamedParam<Scalar>>& params() const { return params_; }
  std::vector<Buffer<Scalar>>& velocity() { return velocity_; }
  const std::vector<Buffer<Scalar>>& velocity() const { return velocity_; }
  Scalar momentum() const { return momentum_; }

 private:
  std::vector<NamedParam<Scalar>> params_;
  std::vector<Buffer<Scalar>> velocity_;
  Scalar momentum_;
};

}  // namespace road
