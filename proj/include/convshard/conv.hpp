#pragma once

#include <algorithm>
#include <cstddef>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "convshard/tensor.hpp"

namespace convshard {

namespace detail {

// c(rows x cols) += a(rows x inner) * b(inner x cols), all row-major.
//
// Every output element is reduced strictly in ascending `inner` order,
// starting from its current value, whatever tile handles it. A row of c
// therefore depends only on the matching row of a and on b, which is what
// makes kernel-partitioned results bitwise equal to the full product.
// Operands are packed into zero-padded panels so the micro-kernel reads
// both contiguously; padding lanes are computed and discarded.
inline constexpr std::size_t kGemmMR = 8;
inline constexpr std::size_t kGemmNR = 16;
inline constexpr std::size_t kGemmKC = 256;

template <typename S>
inline void gemm_micro(const S* __restrict ap, const S* __restrict bp, std::size_t kc,
                       S (&acc)[kGemmMR][kGemmNR]) {
  S r[kGemmMR][kGemmNR];
  for (std::size_t i = 0; i < kGemmMR; ++i)
    for (std::size_t t = 0; t < kGemmNR; ++t) r[i][t] = acc[i][t];
  for (std::size_t k = 0; k < kc; ++k) {
    const S* bk = bp + k * kGemmNR;
    const S* ak = ap + k * kGemmMR;
    for (std::size_t i = 0; i < kGemmMR; ++i) {
      const S av = ak[i];
      for (std::size_t t = 0; t < kGemmNR; ++t) r[i][t] += av * bk[t];
    }
  }
  for (std::size_t i = 0; i < kGemmMR; ++i)
    for (std::size_t t = 0; t < kGemmNR; ++t) acc[i][t] = r[i][t];
}

// Same arithmetic on Eigen packets. Multiply and add stay separate
// instructions so no fused rounding sneaks in.
template <>
inline void gemm_micro<double>(const double* __restrict ap, const double* __restrict bp,
                               std::size_t kc, double (&acc)[kGemmMR][kGemmNR]) {
  using Packet = Eigen::internal::packet_traits<double>::type;
  constexpr std::size_t L = sizeof(Packet) / sizeof(double);
  constexpr std::size_t NV = kGemmNR / L;
  static_assert(kGemmNR % L == 0);
  Packet r[kGemmMR][NV];
  for (std::size_t i = 0; i < kGemmMR; ++i)
    for (std::size_t q = 0; q < NV; ++q) r[i][q] = Eigen::internal::ploadu<Packet>(&acc[i][q * L]);
  for (std::size_t k = 0; k < kc; ++k) {
    Packet b[NV];
    for (std::size_t q = 0; q < NV; ++q)
      b[q] = Eigen::internal::ploadu<Packet>(bp + k * kGemmNR + q * L);
    const double* ak = ap + k * kGemmMR;
    for (std::size_t i = 0; i < kGemmMR; ++i) {
      const Packet av = Eigen::internal::pset1<Packet>(ak[i]);
      for (std::size_t q = 0; q < NV; ++q)
        r[i][q] = Eigen::internal::padd(r[i][q], Eigen::internal::pmul(av, b[q]));
    }
  }
  for (std::size_t i = 0; i < kGemmMR; ++i)
    for (std::size_t q = 0; q < NV; ++q) Eigen::internal::pstoreu(&acc[i][q * L], r[i][q]);
}

template <typename S>
void ordered_gemm(const S* a, std::size_t rows, std::size_t inner, const S* b, std::size_t cols,
                  S* c) {
  constexpr std::size_t MR = kGemmMR, NR = kGemmNR, KC = kGemmKC;
  if (rows == 0 || cols == 0 || inner == 0) return;
  const std::size_t rowPanels = (rows + MR - 1) / MR, colPanels = (cols + NR - 1) / NR;

  std::vector<S> bp(colPanels * NR * KC), ap(rowPanels * MR * KC);
  alignas(64) S acc[MR][NR];
  for (std::size_t k0 = 0; k0 < inner; k0 += KC) {
    const std::size_t kc = std::min(KC, inner - k0);
    for (std::size_t jp = 0; jp < colPanels; ++jp) {
      S* dst = bp.data() + jp * NR * kc;
      const std::size_t p0 = jp * NR, w = std::min(NR, cols - p0);
      for (std::size_t k = 0; k < kc; ++k)
        for (std::size_t t = 0; t < NR; ++t) dst[k * NR + t] = t < w ? b[(k0 + k) * cols + p0 + t] : S(0);
    }
    for (std::size_t ip = 0; ip < rowPanels; ++ip) {
      S* dst = ap.data() + ip * MR * kc;
      const std::size_t r0 = ip * MR, h = std::min(MR, rows - r0);
      for (std::size_t k = 0; k < kc; ++k)
        for (std::size_t i = 0; i < MR; ++i) dst[k * MR + i] = i < h ? a[(r0 + i) * inner + k0 + k] : S(0);
    }
    for (std::size_t jp = 0; jp < colPanels; ++jp) {
      const std::size_t p0 = jp * NR, w = std::min(NR, cols - p0);
      for (std::size_t ip = 0; ip < rowPanels; ++ip) {
        const std::size_t r0 = ip * MR, h = std::min(MR, rows - r0);
        for (std::size_t i = 0; i < MR; ++i)
          for (std::size_t t = 0; t < NR; ++t)
            acc[i][t] = i < h && t < w ? c[(r0 + i) * cols + p0 + t] : S(0);
        gemm_micro(ap.data() + ip * MR * kc, bp.data() + jp * NR * kc, kc, acc);
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t t = 0; t < w; ++t) c[(r0 + i) * cols + p0 + t] = acc[i][t];
      }
    }
  }
}

// Patch matrix of one sample: row q = (c, ky, kx), column p = (y, x).
template <typename S>
void im2col(const BasicTensor4<S>& in, std::size_t n, std::size_t kh, std::size_t kw,
            std::vector<S>& col) {
  const std::size_t ho = in.h() - kh + 1, wo = in.w() - kw + 1, P = ho * wo;
  col.resize(in.c() * kh * kw * P);
  S* dst = col.data();
  for (std::size_t c = 0; c < in.c(); ++c) {
    const S* src = in.plane(n, c);
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx)
        for (std::size_t y = 0; y < ho; ++y, dst += wo)
          std::copy_n(src + (y + ky) * in.w() + kx, wo, dst);
  }
}

// Transposed patch matrix: row p = (y, x), column q = (c, ky, kx).
template <typename S>
void im2row(const BasicTensor4<S>& in, std::size_t n, std::size_t kh, std::size_t kw,
            std::vector<S>& rows) {
  const std::size_t ho = in.h() - kh + 1, wo = in.w() - kw + 1, Q = in.c() * kh * kw;
  rows.resize(ho * wo * Q);
  for (std::size_t y = 0; y < ho; ++y)
    for (std::size_t x = 0; x < wo; ++x) {
      S* dst = rows.data() + (y * wo + x) * Q;
      for (std::size_t c = 0; c < in.c(); ++c) {
        const S* src = in.plane(n, c);
        for (std::size_t ky = 0; ky < kh; ++ky, dst += kw)
          std::copy_n(src + (y + ky) * in.w() + x, kw, dst);
      }
    }
}

template <typename S>
void check_conv_shapes(const BasicTensor4<S>& input, const BasicKernelBank<S>& kernels) {
  if (input.empty() || kernels.empty() || input.c() != kernels.in_channels() ||
      input.h() < kernels.kernel_h() || input.w() < kernels.kernel_w())
    throw DimensionError("conv input " + input.shape().to_string() + " incompatible with kernels " +
                         kernels.shape().to_string());
}

}  // namespace detail

/// Output shape of a valid, stride-1 cross-correlation.
inline Shape4 conv_output_shape(const Shape4& input, const Shape4& kernels) {
  return {input.d0, kernels.d0, input.d2 - kernels.d2 + 1, input.d3 - kernels.d3 + 1};
}

namespace detail {

// Maps [kBegin, kEnd) of sample n into dst, which holds (kEnd-kBegin)*P zeros.
template <typename S>
void forward_sample(const BasicTensor4<S>& input, const BasicKernelBank<S>& kernels,
                    std::size_t kBegin, std::size_t kEnd, std::size_t n, S* dst,
                    std::vector<S>& col) {
  const std::size_t Q = kernels.in_channels() * kernels.kernel_h() * kernels.kernel_w();
  const std::size_t P = (input.h() - kernels.kernel_h() + 1) * (input.w() - kernels.kernel_w() + 1);
  im2col(input, n, kernels.kernel_h(), kernels.kernel_w(), col);
  ordered_gemm(kernels.data().data() + kBegin * Q, kEnd - kBegin, Q, col.data(), P, dst);
}

// Accumulates into dst (J x C*kh*kw) the kernel gradient of one sample, where
// gradOut channels [gBegin, gBegin+J) belong to the J kernels.
template <typename S>
void backward_kernels_sample(const BasicTensor4<S>& input, const BasicTensor4<S>& gradOut,
                             std::size_t gBegin, std::size_t J, std::size_t kh, std::size_t kw,
                             std::size_t n, S* dst, std::vector<S>& rows) {
  const std::size_t Q = input.c() * kh * kw, P = gradOut.h() * gradOut.w();
  im2row(input, n, kh, kw, rows);
  ordered_gemm(gradOut.plane(n, gBegin), J, P, rows.data(), Q, dst);
}

// Kernel channels [cBegin, cEnd) transposed to (c, ky, kx) x j.
template <typename S>
std::vector<S> transpose_kernels(const BasicKernelBank<S>& kernels, std::size_t cBegin,
                                 std::size_t cEnd) {
  const std::size_t J = kernels.out_maps(), area = kernels.kernel_h() * kernels.kernel_w();
  const std::size_t Q = (cEnd - cBegin) * area;
  std::vector<S> kt(Q * J);
  for (std::size_t j = 0; j < J; ++j) {
    const S* src = kernels.plane(j, cBegin);
    for (std::size_t q = 0; q < Q; ++q) kt[q * J + j] = src[q];
  }
  return kt;
}

// Input gradient of sample n for the channels kt was built from. dst holds
// C*H*W zeros.
template <typename S>
void backward_data_sample(const std::vector<S>& kt, std::size_t C, std::size_t kh, std::size_t kw,
                          const BasicTensor4<S>& gradOut, std::size_t n, S* dst,
                          std::vector<S>& gcol) {
  const std::size_t J = gradOut.c(), ho = gradOut.h(), wo = gradOut.w(), P = ho * wo;
  const std::size_t Q = C * kh * kw, W = wo + kw - 1, plane = (ho + kh - 1) * W;
  gcol.assign(Q * P, S(0));
  ordered_gemm(kt.data(), Q, J, gradOut.plane(n, 0), P, gcol.data());
  const S* src = gcol.data();
  for (std::size_t c = 0; c < C; ++c) {
    S* base = dst + c * plane;
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx)
        for (std::size_t y = 0; y < ho; ++y, src += wo) {
          S* row = base + (y + ky) * W + kx;
          for (std::size_t x = 0; x < wo; ++x) row[x] += src[x];
        }
  }
}

template <typename S>
void check_backward_data_shapes(const BasicKernelBank<S>& kernels, const BasicTensor4<S>& gradOut) {
  if (kernels.empty() || gradOut.empty() || gradOut.c() != kernels.out_maps())
    throw DimensionError("gradOut " + gradOut.shape().to_string() + " incompatible with kernels " +
                         kernels.shape().to_string());
}

}  // namespace detail

/// Valid (no padding), stride-1 cross-correlation. Output map j depends only
/// on kernel j.
template <typename S>
BasicTensor4<S> conv2d_forward(const BasicTensor4<S>& input, const BasicKernelBank<S>& kernels) {
  detail::check_conv_shapes(input, kernels);
  BasicTensor4<S> out(conv_output_shape(input.shape(), kernels.shape()));
  std::vector<S> col;
  for (std::size_t n = 0; n < input.n(); ++n)
    detail::forward_sample(input, kernels, 0, kernels.out_maps(), n, out.plane(n, 0), col);
  return out;
}

/// Maps [kBegin, kEnd) written straight into channels [kBegin, kEnd) of
/// `out`, which must be zero there. Bitwise equal to the same channels of
/// conv2d_forward.
template <typename S>
void conv2d_forward_range(const BasicTensor4<S>& input, const BasicKernelBank<S>& kernels,
                          std::size_t kBegin, std::size_t kEnd, BasicTensor4<S>& out) {
  detail::check_conv_shapes(input, kernels);
  if (kBegin > kEnd || kEnd > kernels.out_maps() ||
      out.shape() != conv_output_shape(input.shape(), kernels.shape()))
    throw DimensionError("conv range [" + std::to_string(kBegin) + "," + std::to_string(kEnd) +
                         ") or output " + out.shape().to_string() + " does not fit kernels " +
                         kernels.shape().to_string());
  if (kBegin == kEnd) return;
  std::vector<S> col;
  for (std::size_t n = 0; n < input.n(); ++n)
    detail::forward_sample(input, kernels, kBegin, kEnd, n, out.plane(n, kBegin), col);
}

/// Gradient of the loss with respect to the kernels. Kernel j's gradient
/// reads only gradOut channel j, so any kernel partition reproduces it.
template <typename S>
BasicKernelBank<S> conv2d_backward_kernels(const BasicTensor4<S>& input,
                                           const BasicKernelBank<S>& kernels,
                                           const BasicTensor4<S>& gradOut) {
  detail::check_conv_shapes(input, kernels);
  if (gradOut.shape() != conv_output_shape(input.shape(), kernels.shape()))
    throw DimensionError("gradOut " + gradOut.shape().to_string() + " does not match conv output " +
                         conv_output_shape(input.shape(), kernels.shape()).to_string());
  BasicKernelBank<S> grad(kernels.shape());
  std::vector<S> rows;
  for (std::size_t n = 0; n < input.n(); ++n)
    detail::backward_kernels_sample(input, gradOut, 0, kernels.out_maps(), kernels.kernel_h(),
                                    kernels.kernel_w(), n, grad.data().data(), rows);
  return grad;
}

/// Gradients of kernels [kBegin, kEnd) written into the same rows of `grad`,
/// which must be zero there.
template <typename S>
void conv2d_backward_kernels_range(const BasicTensor4<S>& input, const BasicKernelBank<S>& kernels,
                                   const BasicTensor4<S>& gradOut, std::size_t kBegin,
                                   std::size_t kEnd, BasicKernelBank<S>& grad) {
  detail::check_conv_shapes(input, kernels);
  if (kBegin > kEnd || kEnd > kernels.out_maps() || grad.shape() != kernels.shape() ||
      gradOut.shape() != conv_output_shape(input.shape(), kernels.shape()))
    throw DimensionError("kernel-gradient range does not fit kernels " + kernels.shape().to_string());
  if (kBegin == kEnd) return;
  const std::size_t Q = kernels.in_channels() * kernels.kernel_h() * kernels.kernel_w();
  std::vector<S> rows;
  for (std::size_t n = 0; n < input.n(); ++n)
    detail::backward_kernels_sample(input, gradOut, kBegin, kEnd - kBegin, kernels.kernel_h(),
                                    kernels.kernel_w(), n, grad.data().data() + kBegin * Q, rows);
}

/// Gradient of the loss with respect to the input. Input channel c's gradient
/// reads only kernel channel c, so a partition over input channels
/// reproduces it.
template <typename S>
BasicTensor4<S> conv2d_backward_data(const BasicKernelBank<S>& kernels,
                                     const BasicTensor4<S>& gradOut) {
  detail::check_backward_data_shapes(kernels, gradOut);
  const std::size_t kh = kernels.kernel_h(), kw = kernels.kernel_w(), C = kernels.in_channels();
  BasicTensor4<S> grad(gradOut.n(), C, gradOut.h() + kh - 1, gradOut.w() + kw - 1);
  const auto kt = detail::transpose_kernels(kernels, 0, C);
  std::vector<S> gcol;
  for (std::size_t n = 0; n < gradOut.n(); ++n)
    detail::backward_data_sample(kt, C, kh, kw, gradOut, n, grad.plane(n, 0), gcol);
  return grad;
}

/// Input-gradient channels [cBegin, cEnd) written into the same channels of
/// `grad`, which must be zero there.
template <typename S>
void conv2d_backward_data_range(const BasicKernelBank<S>& kernels, const BasicTensor4<S>& gradOut,
                                std::size_t cBegin, std::size_t cEnd, BasicTensor4<S>& grad) {
  detail::check_backward_data_shapes(kernels, gradOut);
  const std::size_t kh = kernels.kernel_h(), kw = kernels.kernel_w();
  if (cBegin > cEnd || cEnd > kernels.in_channels() ||
      grad.shape() != Shape4{gradOut.n(), kernels.in_channels(), gradOut.h() + kh - 1,
                             gradOut.w() + kw - 1})
    throw DimensionError("input-gradient range does not fit " + grad.shape().to_string());
  if (cBegin == cEnd) return;
  const auto kt = detail::transpose_kernels(kernels, cBegin, cEnd);
  std::vector<S> gcol;
  for (std::size_t n = 0; n < gradOut.n(); ++n)
    detail::backward_data_sample(kt, cEnd - cBegin, kh, kw, gradOut, n, grad.plane(n, cBegin), gcol);
}

template <typename S>
struct ConvGradients {
  BasicTensor4<S> input;
  BasicKernelBank<S> kernels;
};

template <typename S>
ConvGradients<S> conv2d_backward(const BasicTensor4<S>& input, const BasicKernelBank<S>& kernels,
                                 const BasicTensor4<S>& gradOut) {
  auto gk = conv2d_backward_kernels(input, kernels, gradOut);
  auto gi = conv2d_backward_data(kernels, gradOut);
  return {std::move(gi), std::move(gk)};
}

}  // namespace convshard
