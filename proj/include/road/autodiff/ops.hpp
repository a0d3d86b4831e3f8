#pragma once

#include "road/autodiff/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace road {

namespace detail {

template <typename Scalar>
void require_same_graph(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (&a.graph() != &b.graph()) throw ContractError("operands belong to different graphs");
}

inline void require_rank(const Shape& shape, std::size_t rank, const char* what) {
  if (shape.size() != rank) {
    throw ShapeError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                     shape_string(shape));
  }
}

struct ConvGeometry {
  Index in_channels, in_h, in_w;
  Index out_channels, kernel_h, kernel_w;
  Index stride, dilation, padding;
  Index out_h, out_w;

  Index patch_rows() const { return in_channels * kernel_h * kernel_w; }
  Index out_pixels() const { return out_h * out_w; }
  bool is_pointwise() const { return kernel_h == 1 && kernel_w == 1 && stride == 1 && padding == 0; }
};

template <typename Scalar>
RowMatrix<Scalar> im2col(const Scalar* input, const ConvGeometry& g) {
  RowMatrix<Scalar> cols = RowMatrix<Scalar>::Zero(g.patch_rows(), g.out_pixels());
  for (Index c = 0; c < g.in_channels; ++c) {
    const Scalar* plane = input + c * g.in_h * g.in_w;
    for (Index ki = 0; ki < g.kernel_h; ++ki) {
      for (Index kj = 0; kj < g.kernel_w; ++kj) {
        Scalar* row = cols.row((c * g.kernel_h + ki) * g.kernel_w + kj).data();
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy * g.stride - g.padding + ki * g.dilation;
          if (iy < 0 || iy >= g.in_h) continue;
          const Scalar* src = plane + iy * g.in_w;
          Scalar* dst = row + oy * g.out_w;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index ix = ox * g.stride - g.padding + kj * g.dilation;
            if (ix >= 0 && ix < g.in_w) dst[ox] = src[ix];
          }
        }
      }
    }
  }
  return cols;
}

template <typename Scalar>
void col2im(const RowMatrix<Scalar>& cols, const ConvGeometry& g, Scalar* input_grad) {
  for (Index c = 0; c < g.in_channels; ++c) {
    Scalar* plane = input_grad + c * g.in_h * g.in_w;
    for (Index ki = 0; ki < g.kernel_h; ++ki) {
      for (Index kj = 0; kj < g.kernel_w; ++kj) {
        const Scalar* row = cols.row((c * g.kernel_h + ki) * g.kernel_w + kj).data();
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy * g.stride - g.padding + ki * g.dilation;
          if (iy < 0 || iy >= g.in_h) continue;
          Scalar* dst = plane + iy * g.in_w;
          const Scalar* src = row + oy * g.out_w;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index ix = ox * g.stride - g.padding + kj * g.dilation;
            if (ix >= 0 && ix < g.in_w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// Corner-aligned linear interpolation weights, [out x in].
template <typename Scalar>
RowMatrix<Scalar> interpolation_matrix(Index in, Index out) {
  RowMatrix<Scalar> m = RowMatrix<Scalar>::Zero(out, in);
  for (Index i = 0; i < out; ++i) {
    if (in == 1 || out == 1) {
      m(i, 0) = Scalar(1);
      continue;
    }
    const double src = static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
    Index lo = static_cast<Index>(std::floor(src));
    lo = std::min(lo, in - 1);
    const double frac = src - static_cast<double>(lo);
    m(i, lo) += Scalar(1.0 - frac);
    if (lo + 1 < in) m(i, lo + 1) += Scalar(frac);
  }
  return m;
}

}  // namespace detail

struct Conv2dParams {
  Index stride = 1;
  Index dilation = 1;
  Index padding = 0;
};

/// 2-D convolution (cross-correlation) of a single [C_in,H,W] image with a
/// [C_out,C_in,kh,kw] kernel, lowered to one GEMM over an im2col buffer.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& kernel, const Var<Scalar>& bias,
                   Conv2dParams params = {}) {
  detail::require_same_graph(x, kernel);
  detail::require_same_graph(x, bias);
  if (params.stride < 1) throw ParameterError("conv2d stride must be >= 1");
  if (params.dilation < 1) throw ParameterError("conv2d dilation must be >= 1");
  if (params.padding < 0) throw ParameterError("conv2d padding must be >= 0");
  detail::require_rank(x.shape(), 3, "conv2d input");
  detail::require_rank(kernel.shape(), 4, "conv2d kernel");
  detail::require_rank(bias.shape(), 1, "conv2d bias");
  const auto& ks = kernel.shape();
  if (ks[1] != x.dim(0)) {
    throw ShapeError("conv2d channel mismatch: input " + shape_string(x.shape()) + " kernel " +
                     shape_string(ks));
  }
  if (bias.dim(0) != ks[0]) throw ShapeError("conv2d bias length must equal output channels");

  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), ks[0], ks[2], ks[3],
                         params.stride, params.dilation, params.padding, 0, 0};
  const Index span_h = g.dilation * (g.kernel_h - 1) + 1;
  const Index span_w = g.dilation * (g.kernel_w - 1) + 1;
  if (g.in_h + 2 * g.padding < span_h || g.in_w + 2 * g.padding < span_w) {
    throw ShapeError("conv2d input " + shape_string(x.shape()) + " smaller than dilated kernel extent");
  }
  g.out_h = (g.in_h + 2 * g.padding - span_h) / g.stride + 1;
  g.out_w = (g.in_w + 2 * g.padding - span_w) / g.stride + 1;

  auto cols = std::make_shared<RowMatrix<Scalar>>();
  if (g.is_pointwise()) {
    *cols = ConstRowMatrixMap<Scalar>(x.value().data(), g.in_channels, g.out_pixels());
  } else {
    *cols = detail::im2col(x.value().data(), g);
  }
  ConstRowMatrixMap<Scalar> w(kernel.value().data(), g.out_channels, g.patch_rows());
  Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> b(bias.value().data(), g.out_channels);

  Buffer<Scalar> out(g.out_channels * g.out_pixels());
  RowMatrixMap<Scalar> out_mat(out.data(), g.out_channels, g.out_pixels());
  out_mat.noalias() = w * (*cols);
  out_mat.colwise() += b;

  const auto xi = x.id(), wi = kernel.id(), bi = bias.id();
  return x.graph().record(
      OpKind::Conv2d, {g.out_channels, g.out_h, g.out_w}, std::move(out), {xi, wi, bi},
      [g, cols, xi, wi, bi](const Buffer<Scalar>& grad, Graph<Scalar>& graph) {
        ConstRowMatrixMap<Scalar> gout(grad.data(), g.out_channels, g.out_pixels());
        if (graph.needs_grad(wi)) {
          Buffer<Scalar> gw(g.out_channels * g.patch_rows());
          RowMatrixMap<Scalar>(gw.data(), g.out_channels, g.patch_rows()).noalias() = gout * cols->transpose();
          graph.accumulate(wi, gw);
        }
        if (graph.needs_grad(bi)) {
          Buffer<Scalar> gb = gout.rowwise().sum().array();
          graph.accumulate(bi, gb);
        }
        if (graph.needs_grad(xi)) {
          const auto& kv = graph.value(Var<Scalar>(&graph, wi));
          ConstRowMatrixMap<Scalar> w(kv.data(), g.out_channels, g.patch_rows());
          RowMatrix<Scalar> gcols = w.transpose() * gout;
          Buffer<Scalar> gx = Buffer<Scalar>::Zero(g.in_channels * g.in_h * g.in_w);
          if (g.is_pointwise()) {
            gx = Eigen::Map<const Buffer<Scalar>>(gcols.data(), gcols.size());
          } else {
            detail::col2im(gcols, g, gx.data());
          }
          graph.accumulate(xi, gx);
        }
      });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Buffer<Scalar> out = x.value().max(Scalar(0));
  const auto xi = x.id();
  return x.graph().record(OpKind::Relu, x.shape(), std::move(out), {xi},
                          [xi](const Buffer<Scalar>& grad, Graph<Scalar>& graph) {
                            const auto& xv = graph.value(Var<Scalar>(&graph, xi));
                            graph.accumulate(xi, (xv > Scalar(0)).select(grad, Scalar(0)));
                          });
}

/// x[N,D] * weight[D,K] + bias[K].
template <typename Scalar>
Var<Scalar> affine(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  detail::require_same_graph(x, weight);
  detail::require_same_graph(x, bias);
  detail::require_rank(x.shape(), 2, "affine input");
  detail::require_rank(weight.shape(), 2, "affine weight");
  detail::require_rank(bias.shape(), 1, "affine bias");
  const Index n = x.dim(0), d = x.dim(1), k = weight.dim(1);
  if (weight.dim(0) != d) {
    throw ShapeError("affine inner dimension mismatch: " + shape_string(x.shape()) + " x " +
                     shape_string(weight.shape()));
  }
  if (bias.dim(0) != k) throw ShapeError("affine bias length must equal output width");

  ConstRowMatrixMap<Scalar> xm(x.value().data(), n, d);
  ConstRowMatrixMap<Scalar> wm(weight.value().data(), d, k);
  Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> b(bias.value().data(), k);
  Buffer<Scalar> out(n * k);
  RowMatrixMap<Scalar> om(out.data(), n, k);
  om.noalias() = xm * wm;
  om.rowwise() += b;

  const auto xi = x.id(), wi = weight.id(), bi = bias.id();
  return x.graph().record(
      OpKind::Affine, {n, k}, std::move(out), {xi, wi, bi},
      [n, d, k, xi, wi, bi](const Buffer<Scalar>& grad, Graph<Scalar>& graph) {
        ConstRowMatrixMap<Scalar> g(grad.data(), n, k);
        if (graph.needs_grad(xi)) {
          ConstRowMatrixMap<Scalar> wm(graph.value(Var<Scalar>(&graph, wi)).data(), d, k);
          Buffer<Scalar> gx(n * d);
          RowMatrixMap<Scalar>(gx.data(), n, d).noalias() = g * wm.transpose();
          graph.accumulate(xi, gx);
        }
        if (graph.needs_grad(wi)) {
          ConstRowMatrixMap<Scalar> xm(graph.value(Var<Scalar>(&graph, xi)).data(), n, d);
          Buffer<Scalar> gw(d * k);
          RowMatrixMap<Scalar>(gw.data(), d, k).noalias() = xm.transpose() * g;
          graph.accumulate(wi, gw);
        }
        if (graph.needs_grad(bi)) {
          Buffer<Scalar> gb = g.colwise().sum().transpose().array();
          graph.accumulate(bi, gb);
        }
      });
}

/// Mean over non-ignored rows of -log softmax(logits)[label]. Returns 0 with
/// a zero gradient when every row is ignored.
template <typename Scalar>
Var<Scalar> softmax_cross_entropy(const Var<Scalar>& logits, std::span<const int> labels,
                                  int ignore_index = 255) {
  detail::require_rank(logits.shape(), 2, "softmax_cross_entropy logits");
  const Index n = logits.dim(0), k = logits.dim(1);
  if (n < 1) throw ShapeError("softmax_cross_entropy needs at least one row");
  if (static_cast<Index>(labels.size()) != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  for (int label : labels) {
    if (label != ignore_index && (label < 0 || label >= k)) {
      throw ValidationError("label " + std::to_string(label) + " outside [0," + std::to_string(k) + ")");
    }
  }

  ConstRowMatrixMap<Scalar> lm(logits.value().data(), n, k);
  // Row-wise softmax probabilities are kept for the backward pass.
  auto probs = std::make_shared<RowMatrix<Scalar>>(n, k);
  auto kept = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  double total = 0.0;
  Index count = 0;
  for (Index r = 0; r < n; ++r) {
    const Scalar m = lm.row(r).maxCoeff();
    auto e = (lm.row(r).array() - m).exp();
    const Scalar z = e.sum();
    probs->row(r) = e / z;
    const int label = (*kept)[r];
    if (label == ignore_index) continue;
    total += static_cast<double>(m + std::log(z) - lm(r, label));
    ++count;
  }
  Buffer<Scalar> out(1);
  out[0] = count > 0 ? static_cast<Scalar>(total / static_cast<double>(count)) : Scalar(0);

  const auto li = logits.id();
  return logits.graph().record(
      OpKind::SoftmaxCrossEntropy, {1}, std::move(out), {li},
      [n, k, count, probs, kept, ignore_index, li](const Buffer<Scalar>& grad, Graph<Scalar>& graph) {
        Buffer<Scalar> gl = Buffer<Scalar>::Zero(n * k);
        if (count > 0) {
          RowMatrixMap<Scalar> gm(gl.data(), n, k);
          const Scalar scale = grad[0] / static_cast<Scalar>(count);
          for (Index r = 0; r < n; ++r) {
            const int label = (*kept)[r];
            if (label == ignore_index) continue;
            gm.row(r) = probs->row(r) * scale;
            gm(r, label) -= scale;
          }
        }
        graph.accumulate(li, gl);
      });
}

template <typename Scalar>
Var<Scalar> softmax_cross_entropy(const Var<Scalar>& logits, const std::vector<int>& labels,
                                  int ignore_index = 255) {
  return softmax_cross_entropy(logits, std::span<const int>(labels), ignore_index);
}

/// Per-location Euclidean norm over channels of a[C,H,W] - b[C,H,W]. The
/// gradient is defined as zero where the distance is below 1e-12.
template <typename Scalar>
Var<Scalar> l2_distance_map(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_graph(a, b);
  detail::require_rank(a.shape(), 3, "l2_distance_map");
  if (a.shape() != b.shape()) {
    throw ShapeError("l2_distance_map shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  const Index c = a.dim(0), hw = a.dim(1) * a.dim(2);
  ConstRowMatrixMap<Scalar> am(a.value().data(), c, hw);
  ConstRowMatrixMap<Scalar> bm(b.value().data(), c, hw);
  Buffer<Scalar> out = (am - bm).colwise().norm().transpose().array();

  const auto ai = a.id(), bi = b.id();
  return a.graph().record(
      OpKind::L2DistanceMap, {a.dim(1), a.dim(2)}, std::move(out), {ai, bi},
      [c, hw, ai, bi](const Buffer<Scalar>& grad, Graph<Scalar>& graph) {
        ConstRowMatrixMap<Scalar> am(graph.value(Var<Scalar>(&graph, ai)).data(), c, hw);
        ConstRowMatrixMap<Scalar> bm(graph.value(Var<Scalar>(&graph, bi)).data(), c, hw);
        RowMatrix<Scalar> diff = am - bm;
        Eigen::Array<Scalar, 1, Eigen::Dynamic> d = diff.colwise().norm().array();
        Eigen::Array<Scalar, 1, Eigen::Dynamic> coef =
            (d < Scalar(1e-12)).select(Scalar(0), grad.transpose() / d);
        diff.array().rowwise() *= coef;
        Eigen::Map<const Buffer<Scalar>> flat(diff.data(), diff.size());
        graph.accumulate(ai, flat);
        if (graph.needs_grad(bi)) graph.accumulate(bi, -flat);
      });
}

/// Identity forward, negated gradient backward.
template <typename Scalar>
Var<Scalar> grad_reverse(const Var<Scalar>& x) {
  const auto xi = x.id();
  return x.graph().record(OpKind::GradReverse, x.shape(), x.value(), {xi},
                          [xi](const Buffer<Scalar>& grad, Graph<Scalar>& graph) {
                            graph.accumulate(xi, -grad);
                          });
}

template <typename Scalar>
Var<Scalar> pool_avg2d(const Var<Scalar>& x, Index window, Index stride) {
  detail::require_rank(x.shape(), 3, "pool_avg2d");
  if (window < 1 || stride < 1) throw ParameterError("pool_avg2d window and stride must be >= 1");
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h < window || w < window) {
    throw ShapeError("pool_avg2d window " + std::to_string(window) + " larger than input " +
                     shape_string(x.shape()));
  }
  const Index oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  const Scalar inv = Scalar(1) / static_cast<Scalar>(window * window);
  const auto& xv = x.value();
  Buffer<Scalar> out = Buffer<Scalar>::Zero(c * oh * ow);
  for (Index ch = 0; ch < c; ++ch) {
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        Scalar acc = 0;
        for (Index ky = 0; ky < window; ++ky) {
          for (Index kx = 0; kx < window; ++kx) {
            acc += xv[(ch * h + oy * stride + ky) * w + ox * stride + kx];
          }
        }
        out[(ch * oh + oy) * ow + ox] = acc * inv;
      }
    }
  }
  const auto xi = x.id();
  return x.graph().record(
      OpKind::PoolAvg2d, {c, oh, ow}, std::move(out), {xi},
      [c, h, w, oh, ow, window, stride, inv, xi](const Buffer<Scalar>& grad, Graph<Scalar>& graph) {
        Buffer<Scalar> gx = Buffer<Scalar>::Zero(c * h * w);
        for (Index ch = 0; ch < c; ++ch) {
          for (Index oy = 0; oy < oh; ++oy) {
            for (Index ox = 0; ox < ow; ++ox) {
              const Scalar g = grad[(ch * oh + oy) * ow + ox] * inv;
              for (Index ky = 0; ky < window; ++ky) {
                for (Index kx = 0; kx < window; ++kx) {
                  gx[(ch * h + oy * stride + ky) * w + ox * stride + kx] += g;
                }
              }
            }
          }
        }
        graph.accumulate(xi, gx);
      });
}

/// Corner-aligned bilinear upsampling of [C,h,w] to [C,out_h,out_w],
/// applied as out_c = Ry * x_c * Rx^T.
template <typename Scalar>
Var<Scalar> upsample_bilinear(const Var<Scalar>& x, Index out_h, Index out_w) {
  detail::require_rank(x.shape(), 3, "upsample_bilinear");
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (out_h < h || out_w < w) {
    throw ShapeError("upsample_bilinear target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                     " smaller than input " + shape_string(x.shape()));
  }
  auto ry = std::make_shared<RowMatrix<Scalar>>(detail::interpolation_matrix<Scalar>(h, out_h));
  auto rx = std::make_shared<RowMatrix<Scalar>>(detail::interpolation_matrix<Scalar>(w, out_w));
  Buffer<Scalar> out(c * out_h * out_w);
  const auto& xv = x.value();
  for (Index ch = 0; ch < c; ++ch) {
    ConstRowMatrixMap<Scalar> plane(xv.data() + ch * h * w, h, w);
    RowMatrixMap<Scalar>(out.data() + ch * out_h * out_w, out_h, out_w).noalias() =
        (*ry) * plane * rx->transpose();
  }
  const auto xi = x.id();
  return x.graph().record(
      OpKind::UpsampleBilinear, {c, out_h, out_w}, std::move(out), {xi},
      [c, h, w, out_h, out_w, ry, rx, xi](const Buffer<Scalar>& grad, Graph<Scalar>& graph) {
        Buffer<Scalar> gx(c * h * w);
        for (Index ch = 0; ch < c; ++ch) {
          ConstRowMatrixMap<Scalar> g(grad.data() + ch * out_h * out_w, out_h, out_w);
          RowMatrixMap<Scalar>(gx.data() + ch * h * w, h, w).noalias() = ry->transpose() * g * (*rx);
        }
        graph.accumulate(xi, gx);
      });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Buffer<Scalar> out(1);
  out[0] = x.value().sum();
  const auto xi = x.id();
  const Index n = x.size();
  return x.graph().record(OpKind::Sum, {1}, std::move(out), {xi},
                          [xi, n](const Buffer<Scalar>& grad, Graph<Scalar>& graph) {
                            graph.accumulate(xi, Buffer<Scalar>::Constant(n, grad[0]));
                          });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x) {
  Buffer<Scalar> out(1);
  out[0] = x.value().mean();
  const auto xi = x.id();
  const Index n = x.size();
  return x.graph().record(OpKind::Mean, {1}, std::move(out), {xi},
                          [xi, n](const Buffer<Scalar>& grad, Graph<Scalar>& graph) {
                            graph.accumulate(xi, Buffer<Scalar>::Constant(n, grad[0] / static_cast<Scalar>(n)));
                          });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar factor) {
  Buffer<Scalar> out = x.value() * factor;
  const auto xi = x.id();
  return x.graph().record(OpKind::Scale, x.shape(), std::move(out), {xi},
                          [xi, factor](const Buffer<Scalar>& grad, Graph<Scalar>& graph) {
                            graph.accumulate(xi, grad * factor);
                          });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_graph(a, b);
  if (a.shape() != b.shape()) {
    throw ShapeError("add shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Buffer<Scalar> out = a.value() + b.value();
  const auto ai = a.id(), bi = b.id();
  return a.graph().record(OpKind::Add, a.shape(), std::move(out), {ai, bi},
                          [ai, bi](const Buffer<Scalar>& grad, Graph<Scalar>& graph) {
                            graph.accumulate(ai, grad);
                            graph.accumulate(bi, grad);
                          });
}

/// sum_i weights[i] * terms[i]; all terms share a shape. Accumulates in
/// term order.
template <typename Scalar>
Var<Scalar> weighted_sum(const std::vector<Var<Scalar>>& terms, const std::vector<Scalar>& weights) {
  if (terms.empty() || terms.size() != weights.size()) {
    throw ShapeError("weighted_sum needs one weight per term and at least one term");
  }
  const Shape shape = terms.front().shape();
  Buffer<Scalar> out = Buffer<Scalar>::Zero(shape_size(shape));
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    detail::require_same_graph(terms.front(), terms[i]);
    if (terms[i].shape() != shape) throw ShapeError("weighted_sum terms must share a shape");
    out += weights[i] * terms[i].value();
    ids.push_back(terms[i].id());
  }
  return terms.front().graph().record(OpKind::WeightedSum, shape, std::move(out), ids,
                                      [ids, weights](const Buffer<Scalar>& grad, Graph<Scalar>& graph) {
                                        for (std::size_t i = 0; i < ids.size(); ++i) {
                                          graph.accumulate(ids[i], grad * weights[i]);
                                        }
                                      });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("cannot reshape " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  const auto xi = x.id();
  return x.graph().record(OpKind::Reshape, std::move(shape), x.value(), {xi},
                          [xi](const Buffer<Scalar>& grad, Graph<Scalar>& graph) {
                            graph.accumulate(xi, grad);
                          });
}

/// Selects channel vectors of x[C,H,W] at flat cell indices (row * W + col),
/// producing [N,C] with one row per requested cell.
template <typename Scalar>
Var<Scalar> gather_cells(const Var<Scalar>& x, std::vector<Index> cells) {
  detail::require_rank(x.shape(), 3, "gather_cells");
  const Index c = x.dim(0), hw = x.dim(1) * x.dim(2);
  for (Index cell : cells) {
    if (cell < 0 || cell >= hw) throw ShapeError("gather_cells index out of range");
  }
  const Index n = static_cast<Index>(cells.size());
  if (n == 0) throw ShapeError("gather_cells needs at least one cell");
  ConstRowMatrixMap<Scalar> xm(x.value().data(), c, hw);
  Buffer<Scalar> out(n * c);
  RowMatrixMap<Scalar> om(out.data(), n, c);
  for (Index r = 0; r < n; ++r) om.row(r) = xm.col(cells[r]).transpose();
  const auto xi = x.id();
  auto kept = std::make_shared<std::vector<Index>>(std::move(cells));
  return x.graph().record(OpKind::GatherCells, {n, c}, std::move(out), {xi},
                          [xi, c, hw, n, kept](const Buffer<Scalar>& grad, Graph<Scalar>& graph) {
                            Buffer<Scalar> gx = Buffer<Scalar>::Zero(c * hw);
                            RowMatrixMap<Scalar> gm(gx.data(), c, hw);
                            ConstRowMatrixMap<Scalar> g(grad.data(), n, c);
                            for (Index r = 0; r < n; ++r) gm.col((*kept)[r]) += g.row(r).transpose();
                            graph.accumulate(xi, gx);
                          });
}

/// All cells of x[C,H,W] as rows: [H*W, C].
template <typename Scalar>
Var<Scalar> cells_to_rows(const Var<Scalar>& x) {
  detail::require_rank(x.shape(), 3, "cells_to_rows");
  std::vector<Index> cells(static_cast<std::size_t>(x.dim(1) * x.dim(2)));
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<Index>(i);
  return gather_cells(x, std::move(cells));
}

/// Stacks [N_i,C] blocks into [sum N_i, C].
template <typename Scalar>
Var<Scalar> concat_rows(const std::vector<Var<Scalar>>& blocks) {
  if (blocks.empty()) throw ShapeError("concat_rows needs at least one block");
  const Index c = blocks.front().dim(1);
  Index rows = 0;
  std::vector<std::size_t> ids;
  std::vector<Index> sizes;
  for (const auto& b : blocks) {
    detail::require_same_graph(blocks.front(), b);
    detail::require_rank(b.shape(), 2, "concat_rows block");
    if (b.dim(1) != c) throw ShapeError("concat_rows blocks must share a column count");
    rows += b.dim(0);
    ids.push_back(b.id());
    sizes.push_back(b.size());
  }
  Buffer<Scalar> out(rows * c);
  Index offset = 0;
  for (const auto& b : blocks) {
    out.segment(offset, b.size()) = b.value();
    offset += b.size();
  }
  return blocks.front().graph().record(OpKind::ConcatRows, {rows, c}, std::move(out), ids,
                                       [ids, sizes](const Buffer<Scalar>& grad, Graph<Scalar>& graph) {
                                         Index off = 0;
                                         for (std::size_t i = 0; i < ids.size(); ++i) {
                                           graph.accumulate(ids[i], grad.segment(off, sizes[i]));
                                           off += sizes[i];
                                         }
                                       });
}

}  // namespace road
