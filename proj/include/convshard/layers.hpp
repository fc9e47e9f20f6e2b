#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "convshard/tensor.hpp"

namespace convshard {

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S>
using RowMajorMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Max pooling

/// Flat input offsets of each pooled maximum, tied to the shapes they were
/// recorded for.
struct PoolIndices {
  Shape4 input;
  Shape4 output;
  std::vector<std::size_t> argmax;
};

template <typename S>
struct PoolResult {
  BasicTensor4<S> output;
  PoolIndices indices;
};

/// Non-overlapping max pooling with window == stride. Ties resolve to the
/// first element of the block in row-major order.
template <typename S>
PoolResult<S> maxpool_forward(const BasicTensor4<S>& input, std::size_t window = 2,
                              std::size_t stride = 2) {
  if (window != stride || stride == 0)
    throw ConfigError("pooling needs window == stride >= 1, got window " + std::to_string(window) +
                      " stride " + std::to_string(stride));
  if (input.empty() || input.h() % stride != 0 || input.w() % stride != 0)
    throw DimensionError("pool input " + input.shape().to_string() + " not divisible by stride " +
                         std::to_string(stride));
  const Shape4 outShape{input.n(), input.c(), input.h() / stride, input.w() / stride};
  PoolResult<S> r{BasicTensor4<S>(outShape), {input.shape(), outShape, {}}};
  r.indices.argmax.resize(outShape.size());
  const S* in = input.data().data();
  S* out = r.output.data().data();
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < input.n() * input.c(); ++nc) {
    const std::size_t base = nc * input.h() * input.w();
    for (std::size_t oy = 0; oy < outShape.d2; ++oy)
      for (std::size_t ox = 0; ox < outShape.d3; ++ox, ++o) {
        std::size_t best = base + oy * stride * input.w() + ox * stride;
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = base + (oy * stride + dy) * input.w() + ox * stride + dx;
            if (in[idx] > in[best]) best = idx;
          }
        out[o] = in[best];
        r.indices.argmax[o] = best;
      }
  }
  return r;
}

/// Routes each output gradient to the position that won the forward max.
template <typename S>
BasicTensor4<S> maxpool_backward(const BasicTensor4<S>& gradOut, const PoolIndices& indices) {
  if (gradOut.shape() != indices.output || indices.argmax.size() != indices.output.size())
    throw ConsistencyError("pool indices recorded for output " + indices.output.to_string() +
                           " cannot route gradient " + gradOut.shape().to_string());
  BasicTensor4<S> grad(indices.input);
  const std::size_t limit = indices.input.size();
  for (std::size_t o = 0; o < indices.argmax.size(); ++o) {
    const std::size_t idx = indices.argmax[o];
    if (idx >= limit) throw ConsistencyError("pool index " + std::to_string(idx) + " out of range");
    grad.data()[idx] += gradOut.data()[o];
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Cross-channel local response normalization

struct LrnParams {
  std::size_t depth = 5;
  double alpha = 1e-4;
  double beta = 0.75;
  double bias = 2.0;

  void validate() const {
    if (depth == 0 || depth % 2 == 0)
      throw ConfigError("LRN depth must be odd and >= 1, got " + std::to_string(depth));
    if (!(bias > 0.0)) throw ConfigError("LRN bias must be > 0");
    if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ConfigError("LRN alpha and beta must be >= 0");
  }
};

namespace detail {

// bias + alpha * sum of squares over the channel window centred on c.
template <typename S>
BasicTensor4<S> lrn_scale(const BasicTensor4<S>& input, const LrnParams& p) {
  BasicTensor4<S> scale(input.shape());
  const std::size_t half = p.depth / 2, plane = input.h() * input.w();
  for (std::size_t n = 0; n < input.n(); ++n)
    for (std::size_t c = 0; c < input.c(); ++c) {
      const std::size_t lo = c >= half ? c - half : 0;
      const std::size_t hi = std::min(input.c() - 1, c + half);
      S* s = scale.plane(n, c);
      for (std::size_t cc = lo; cc <= hi; ++cc) {
        const S* x = input.plane(n, cc);
        for (std::size_t i = 0; i < plane; ++i) s[i] += x[i] * x[i];
      }
      for (std::size_t i = 0; i < plane; ++i) s[i] = S(p.bias) + S(p.alpha) * s[i];
    }
  return scale;
}

// scale^(-beta) through Eigen's vectorized log/exp.
template <typename S>
BasicTensor4<S> lrn_power(const BasicTensor4<S>& scale, const LrnParams& p) {
  BasicTensor4<S> out(scale.shape());
  out.array() = (S(-p.beta) * scale.array().log()).exp();
  return out;
}

}  // namespace detail

/// out = in / (bias + alpha * sum_window in^2)^beta
template <typename S>
BasicTensor4<S> lrn_forward(const BasicTensor4<S>& input, const LrnParams& p) {
  p.validate();
  BasicTensor4<S> out = detail::lrn_power(detail::lrn_scale(input, p), p);
  out.array() *= input.array();
  return out;
}

template <typename S>
BasicTensor4<S> lrn_backward(const BasicTensor4<S>& input, const BasicTensor4<S>& gradOut,
                             const LrnParams& p) {
  p.validate();
  if (input.shape() != gradOut.shape())
    throw DimensionError("LRN gradOut " + gradOut.shape().to_string() + " does not match input " +
                         input.shape().to_string());
  const BasicTensor4<S> scale = detail::lrn_scale(input, p);
  BasicTensor4<S> grad = detail::lrn_power(scale, p);
  // t = g * x * scale^(-beta-1), shared by every channel whose window covers c.
  BasicTensor4<S> t(input.shape());
  t.array() = gradOut.array() * input.array() * grad.array() / scale.array();
  grad.array() *= gradOut.array();

  const std::size_t half = p.depth / 2, plane = input.h() * input.w();
  const S k = S(2.0 * p.alpha * p.beta);
  std::vector<S> window(plane);
  for (std::size_t n = 0; n < input.n(); ++n)
    for (std::size_t c = 0; c < input.c(); ++c) {
      const std::size_t lo = c >= half ? c - half : 0;
      const std::size_t hi = std::min(input.c() - 1, c + half);
      std::fill(window.begin(), window.end(), S(0));
      for (std::size_t cc = lo; cc <= hi; ++cc) {
        const S* tc = t.plane(n, cc);
        for (std::size_t i = 0; i < plane; ++i) window[i] += tc[i];
      }
      const S* x = input.plane(n, c);
      S* g = grad.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) g[i] -= k * x[i] * window[i];
    }
  return grad;
}

// ---------------------------------------------------------------------------
// Fully connected

template <typename S>
using ConstSampleMap = Eigen::Map<const RowMajorMatrix<S>>;

/// View of a batch as an (n x c*h*w) matrix, one sample per row.
template <typename S>
ConstSampleMap<S> flatten(const BasicTensor4<S>& t) {
  return ConstSampleMap<S>(t.data().data(), t.n(), t.size() / t.n());
}

/// logits(n x out) = X W^T + 1 b^T
template <typename S>
Matrix<S> fc_forward(const BasicTensor4<S>& input, const Matrix<S>& weights,
                     const Vector<S>& bias) {
  if (input.empty() || static_cast<std::size_t>(weights.cols()) != input.size() / input.n() ||
      weights.rows() != bias.size())
    throw DimensionError("fc input " + input.shape().to_string() + " incompatible with weights " +
                         std::to_string(weights.rows()) + "x" + std::to_string(weights.cols()));
  Matrix<S> y = flatten(input) * weights.transpose();
  y.rowwise() += bias.transpose();
  return y;
}

template <typename S>
struct FcGradients {
  BasicTensor4<S> input;
  Matrix<S> weights;
  Vector<S> bias;
};

template <typename S>
FcGradients<S> fc_backward(const BasicTensor4<S>& input, const Matrix<S>& weights,
                           const Matrix<S>& gradOut) {
  if (gradOut.rows() != static_cast<Eigen::Index>(input.n()) || gradOut.cols() != weights.rows() ||
      static_cast<std::size_t>(weights.cols()) != input.size() / input.n())
    throw DimensionError("fc gradOut " + std::to_string(gradOut.rows()) + "x" +
                         std::to_string(gradOut.cols()) + " incompatible with input " +
                         input.shape().to_string());
  FcGradients<S> g;
  g.weights = gradOut.transpose() * flatten(input);
  g.bias = gradOut.colwise().sum().transpose();
  RowMajorMatrix<S> gx = gradOut * weights;
  g.input = BasicTensor4<S>(input.shape(), Eigen::Map<Vector<S>>(gx.data(), gx.size()));
  return g;
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy

template <typename S>
struct LossResult {
  S loss;
  Matrix<S> gradLogits;
};

/// Mean cross-entropy over the batch; gradient is (softmax - onehot) / n.
template <typename S>
LossResult<S> softmax_loss(const Matrix<S>& logits, std::span<const int> labels) {
  const Eigen::Index n = logits.rows(), k = logits.cols();
  if (static_cast<std::size_t>(n) != labels.size() || n == 0)
    throw DimensionError("softmax got " + std::to_string(n) + " rows for " +
                         std::to_string(labels.size()) + " labels");
  LossResult<S> r{S(0), Matrix<S>(n, k)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || label >= k)
      throw DataError("label " + std::to_string(label) + " outside [0, " + std::to_string(k) + ")");
    const S m = logits.row(i).maxCoeff();
    const Eigen::Array<S, 1, Eigen::Dynamic> e = (logits.row(i).array() - m).exp();
    const S z = e.sum();
    r.gradLogits.row(i) = (e / z).matrix();
    r.loss += std::log(z) - (logits(i, label) - m);
    r.gradLogits(i, label) -= S(1);
  }
  r.loss /= S(n);
  r.gradLogits /= S(n);
  return r;
}

// ---------------------------------------------------------------------------
// Plain SGD

/// p <- p - lr * g
template <typename Derived, typename OtherDerived>
void sgd_step(Eigen::DenseBase<Derived>& params, const Eigen::DenseBase<OtherDerived>& grads,
              typename Derived::Scalar lr) {
  if (params.rows() != grads.rows() || params.cols() != grads.cols())
    throw DimensionError("sgd parameter " + std::to_string(params.rows()) + "x" +
                         std::to_string(params.cols()) + " vs gradient " +
                         std::to_string(grads.rows()) + "x" + std::to_string(grads.cols()));
  params.derived().array() -= lr * grads.derived().array();
}

template <typename S>
void sgd_step(detail::Dense4<S>& params, const detail::Dense4<S>& grads, S lr) {
  if (params.shape() != grads.shape())
    throw DimensionError("sgd parameter " + params.shape().to_string() + " vs gradient " +
                         grads.shape().to_string());
  params.array() -= lr * grads.array();
}

}  // namespace convshard
