#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fewshot/tensor.hpp"

namespace fewshot {

namespace detail {

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using RowMatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
inline bool tracing(std::initializer_list<const Tensor<S>*> inputs) {
  if (Tape<S>::active() == nullptr) return false;
  for (const Tensor<S>* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Finalizes an op output: forward values must be finite, and traced outputs
// are tagged with the recording tape.
template <typename S>
inline Tensor<S> finish(const char* op, Shape shape, ArrayX<S> vals, bool traced) {
  if (!vals.allFinite()) throw Error(ErrCode::NonFinite, std::string(op) + ": non-finite value in output");
  Tensor<S> out = Tensor<S>::from_array(std::move(shape), std::move(vals), traced);
  if (traced) out.node()->tape_tag = Tape<S>::active();
  return out;
}

template <typename S>
inline void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw Error(ErrCode::ShapeMismatch,
                std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Patch rows ordered (c, ki, kj) row-major to match the kernel layout; cols
// is (C*kh*kw) x (Ho*Wo) stored row-major so each patch row is contiguous.
template <typename S>
void im2col(const S* in, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo,
            RowMatX<S>& cols) {
  cols.setZero(C * kh * kw, Ho * Wo);
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const int r = (c * kh + ki) * kw + kj;
        S* dst = cols.data() + static_cast<std::ptrdiff_t>(r) * (Ho * Wo);
        for (int ho = 0; ho < Ho; ++ho) {
          const int ih = ho * stride + ki - pad;
          if (ih < 0 || ih >= H) continue;
          const S* src = in + (static_cast<std::ptrdiff_t>(c) * H + ih) * W;
          if (stride == 1) {
            const int wo_lo = std::max(0, pad - kj);
            const int wo_hi = std::min(Wo, W + pad - kj);
            for (int wo = wo_lo; wo < wo_hi; ++wo) dst[ho * Wo + wo] = src[wo + kj - pad];
          } else {
            for (int wo = 0; wo < Wo; ++wo) {
              const int iw = wo * stride + kj - pad;
              if (iw >= 0 && iw < W) dst[ho * Wo + wo] = src[iw];
            }
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const RowMatX<S>& dcols, int C, int H, int W, int kh, int kw, int stride, int pad,
                int Ho, int Wo, S* din) {
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const int r = (c * kh + ki) * kw + kj;
        const S* src = dcols.data() + static_cast<std::ptrdiff_t>(r) * (Ho * Wo);
        for (int ho = 0; ho < Ho; ++ho) {
          const int ih = ho * stride + ki - pad;
          if (ih < 0 || ih >= H) continue;
          S* dst = din + (static_cast<std::ptrdiff_t>(c) * H + ih) * W;
          if (stride == 1) {
            const int wo_lo = std::max(0, pad - kj);
            const int wo_hi = std::min(Wo, W + pad - kj);
            for (int wo = wo_lo; wo < wo_hi; ++wo) dst[wo + kj - pad] += src[ho * Wo + wo];
          } else {
            for (int wo = 0; wo < Wo; ++wo) {
              const int iw = wo * stride + kj - pad;
              if (iw >= 0 && iw < W) dst[iw] += src[ho * Wo + wo];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

inline std::atomic<std::uint64_t>& cosine_degenerate_count() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}

// ---------------------------------------------------------------------------
// Convolution / pooling / resampling
// ---------------------------------------------------------------------------

// input [N,C,H,W] * kernel [F,C,kh,kw] + bias [F] -> [N,F,Ho,Wo]
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernel, const Tensor<S>& bias, int stride,
                 int padding) {
  if (input.rank() != 4 || kernel.rank() != 4 || bias.rank() != 1)
    throw Error(ErrCode::ShapeMismatch, "conv2d: expected input [N,C,H,W], kernel [F,C,kh,kw], bias [F]");
  const int N = input.extent(0), C = input.extent(1), H = input.extent(2), W = input.extent(3);
  const int F = kernel.extent(0), KC = kernel.extent(1), kh = kernel.extent(2), kw = kernel.extent(3);
  if (KC != C)
    throw Error(ErrCode::ShapeMismatch, "conv2d: kernel channels " + std::to_string(KC) +
                                            " do not match input channels " + std::to_string(C));
  if (bias.extent(0) != F) throw Error(ErrCode::ShapeMismatch, "conv2d: bias length must equal filter count");
  if (kh % 2 == 0 || kw % 2 == 0) throw Error(ErrCode::BadArgument, "conv2d: kernel extents must be odd");
  if (stride < 1 || padding < 0) throw Error(ErrCode::BadArgument, "conv2d: stride >= 1 and padding >= 0 required");
  const int Ho = (H + 2 * padding - kh) / stride + 1;
  const int Wo = (W + 2 * padding - kw) / stride + 1;
  if (H + 2 * padding - kh < 0 || W + 2 * padding - kw < 0 || Ho < 1 || Wo < 1)
    throw Error(ErrCode::ShapeMismatch, "conv2d: kernel larger than padded input");

  const int CKK = C * kh * kw;
  const int P = Ho * Wo;
  ArrayX<S> out(static_cast<Eigen::Index>(N) * F * P);
  Eigen::Map<const detail::RowMatX<S>> kmat(kernel.data(), F, CKK);
  Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> brow(bias.data(), F);
  detail::RowMatX<S> cols;
  for (int n = 0; n < N; ++n) {
    detail::im2col(input.data() + static_cast<std::ptrdiff_t>(n) * C * H * W, C, H, W, kh, kw, stride,
                   padding, Ho, Wo, cols);
    // out sample block is row-major [F][P]; viewed column-major it is [P, F]
    Eigen::Map<detail::MatX<S>> omat(out.data() + static_cast<std::ptrdiff_t>(n) * F * P, P, F);
    omat.noalias() = cols.transpose() * kmat.transpose();
    omat.rowwise() += brow;
  }

  const bool traced = detail::tracing<S>({&input, &kernel, &bias});
  Tensor<S> result = detail::finish("conv2d", {N, F, Ho, Wo}, std::move(out), traced);
  if (traced) {
    Tape<S>::active()->record([input, kernel, bias, result, N, C, H, W, F, kh, kw, stride, padding, Ho, Wo]() {
      auto out_node = result.node();
      if (!out_node->has_grad()) return;
      const int CKK = C * kh * kw;
      const int P = Ho * Wo;
      const S* gout = out_node->grad.data();
      detail::RowMatX<S> cols;
      const bool need_cols = input.requires_grad() || kernel.requires_grad();
      for (int n = 0; n < N; ++n) {
        Eigen::Map<const detail::MatX<S>> gmat(gout + static_cast<std::ptrdiff_t>(n) * F * P, P, F);
        if (bias.requires_grad()) {
          bias.node()->ensure_grad();
          Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> gb(bias.node()->grad.data(), F);
          gb += gmat.colwise().sum();
        }
        if (need_cols)
          detail::im2col(input.data() + static_cast<std::ptrdiff_t>(n) * C * H * W, C, H, W, kh, kw,
                         stride, padding, Ho, Wo, cols);
        if (kernel.requires_grad()) {
          kernel.node()->ensure_grad();
          Eigen::Map<detail::RowMatX<S>> gk(kernel.node()->grad.data(), F, CKK);
          gk.noalias() += gmat.transpose() * cols.transpose();
        }
        if (input.requires_grad()) {
          input.node()->ensure_grad();
          detail::RowMatX<S> dcols(CKK, P);
          Eigen::Map<const detail::RowMatX<S>> kmat(kernel.data(), F, CKK);
          dcols.noalias() = kmat.transpose() * gmat.transpose();
          detail::col2im_add(dcols, C, H, W, kh, kw, stride, padding, Ho, Wo,
                             input.node()->grad.data() + static_cast<std::ptrdiff_t>(n) * C * H * W);
        }
      }
    });
  }
  return result;
}

// 2x2 max pooling, stride 2. Ties route the gradient to the first window
// cell in row-major order.
template <typename S>
Tensor<S> maxpool2(const Tensor<S>& input) {
  if (input.rank() != 4) throw Error(ErrCode::ShapeMismatch, "maxpool2: expected [N,C,H,W]");
  const int N = input.extent(0), C = input.extent(1), H = input.extent(2), W = input.extent(3);
  if (H % 2 != 0 || W % 2 != 0)
    throw Error(ErrCode::ShapeMismatch, "maxpool2: spatial extents must be even, got " + shape_str(input.shape()));
  const int Ho = H / 2, Wo = W / 2;
  ArrayX<S> out(static_cast<Eigen::Index>(N) * C * Ho * Wo);
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(N) * C * Ho * Wo);
  const S* in = input.data();
  std::int64_t o = 0;
  for (int nc = 0; nc < N * C; ++nc) {
    const S* plane = in + static_cast<std::ptrdiff_t>(nc) * H * W;
    const std::int64_t base = static_cast<std::int64_t>(nc) * H * W;
    for (int ho = 0; ho < Ho; ++ho) {
      for (int wo = 0; wo < Wo; ++wo, ++o) {
        const int i0 = 2 * ho, j0 = 2 * wo;
        std::int64_t best_idx = i0 * W + j0;
        S best = plane[best_idx];
        const int cand[3] = {i0 * W + j0 + 1, (i0 + 1) * W + j0, (i0 + 1) * W + j0 + 1};
        for (int k = 0; k < 3; ++k) {
          if (plane[cand[k]] > best) {
            best = plane[cand[k]];
            best_idx = cand[k];
          }
        }
        out[o] = best;
        argmax[static_cast<std::size_t>(o)] = base + best_idx;
      }
    }
  }
  const bool traced = detail::tracing<S>({&input});
  Tensor<S> result = detail::finish("maxpool2", {N, C, Ho, Wo}, std::move(out), traced);
  if (traced) {
    Tape<S>::active()->record([input, result, argmax = std::move(argmax)]() {
      auto out_node = result.node();
      if (!out_node->has_grad() || !input.requires_grad()) return;
      input.node()->ensure_grad();
      S* gin = input.node()->grad.data();
      const S* gout = out_node->grad.data();
      for (std::size_t o = 0; o < argmax.size(); ++o) gin[argmax[o]] += gout[static_cast<Eigen::Index>(o)];
    });
  }
  return result;
}

// Nearest-neighbor 2x upsampling; backward sums the four child gradients.
template <typename S>
Tensor<S> upsample2(const Tensor<S>& input) {
  if (input.rank() != 4) throw Error(ErrCode::ShapeMismatch, "upsample2: expected [N,C,H,W]");
  const int N = input.extent(0), C = input.extent(1), H = input.extent(2), W = input.extent(3);
  const int Ho = 2 * H, Wo = 2 * W;
  ArrayX<S> out(static_cast<Eigen::Index>(N) * C * Ho * Wo);
  const S* in = input.data();
  for (int nc = 0; nc < N * C; ++nc) {
    const S* src = in + static_cast<std::ptrdiff_t>(nc) * H * W;
    S* dst = out.data() + static_cast<std::ptrdiff_t>(nc) * Ho * Wo;
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        const S v = src[i * W + j];
        dst[(2 * i) * Wo + 2 * j] = v;
        dst[(2 * i) * Wo + 2 * j + 1] = v;
        dst[(2 * i + 1) * Wo + 2 * j] = v;
        dst[(2 * i + 1) * Wo + 2 * j + 1] = v;
      }
    }
  }
  const bool traced = detail::tracing<S>({&input});
  Tensor<S> result = detail::finish("upsample2", {N, C, Ho, Wo}, std::move(out), traced);
  if (traced) {
    Tape<S>::active()->record([input, result, N, C, H, W]() {
      auto out_node = result.node();
      if (!out_node->has_grad() || !input.requires_grad()) return;
      input.node()->ensure_grad();
      const int Ho = 2 * H, Wo = 2 * W;
      S* gin = input.node()->grad.data();
      const S* gout = out_node->grad.data();
      for (int nc = 0; nc < N * C; ++nc) {
        S* dst = gin + static_cast<std::ptrdiff_t>(nc) * H * W;
        const S* src = gout + static_cast<std::ptrdiff_t>(nc) * Ho * Wo;
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j)
            dst[i * W + j] += src[(2 * i) * Wo + 2 * j] + src[(2 * i) * Wo + 2 * j + 1] +
                              src[(2 * i + 1) * Wo + 2 * j] + src[(2 * i + 1) * Wo + 2 * j + 1];
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  ArrayX<S> out = x.values().max(S(0));
  const bool traced = detail::tracing<S>({&x});
  Tensor<S> result = detail::finish("relu", x.shape(), std::move(out), traced);
  if (traced) {
    Tape<S>::active()->record([x, result]() {
      auto out_node = result.node();
      if (!out_node->has_grad() || !x.requires_grad()) return;
      x.node()->ensure_grad();
      x.node()->grad += (x.values() > S(0)).select(out_node->grad, ArrayX<S>::Zero(out_node->grad.size()));
    });
  }
  return result;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  ArrayX<S> out = (S(1) / (S(1) + (-x.values()).exp()));
  const bool traced = detail::tracing<S>({&x});
  Tensor<S> result = detail::finish("sigmoid", x.shape(), std::move(out), traced);
  if (traced) {
    Tape<S>::active()->record([x, result]() {
      auto out_node = result.node();
      if (!out_node->has_grad() || !x.requires_grad()) return;
      x.node()->ensure_grad();
      x.node()->grad += out_node->grad * out_node->values * (S(1) - out_node->values);
    });
  }
  return result;
}

// a*x + b with scalar constants a, b.
template <typename S>
Tensor<S> affine(const Tensor<S>& x, S a, S b) {
  ArrayX<S> out = a * x.values() + b;
  const bool traced = detail::tracing<S>({&x});
  Tensor<S> result = detail::finish("affine", x.shape(), std::move(out), traced);
  if (traced) {
    Tape<S>::active()->record([x, result, a]() {
      auto out_node = result.node();
      if (!out_node->has_grad() || !x.requires_grad()) return;
      x.node()->ensure_grad();
      x.node()->grad += a * out_node->grad;
    });
  }
  return result;
}

template <typename S>
Tensor<S> exp(const Tensor<S>& x) {
  ArrayX<S> out = x.values().exp();
  const bool traced = detail::tracing<S>({&x});
  Tensor<S> result = detail::finish("exp", x.shape(), std::move(out), traced);
  if (traced) {
    Tape<S>::active()->record([x, result]() {
      auto out_node = result.node();
      if (!out_node->has_grad() || !x.requires_grad()) return;
      x.node()->ensure_grad();
      x.node()->grad += out_node->grad * out_node->values;
    });
  }
  return result;
}

template <typename S>
Tensor<S> log(const Tensor<S>& x) {
  ArrayX<S> out = x.values().log();
  const bool traced = detail::tracing<S>({&x});
  Tensor<S> result = detail::finish("log", x.shape(), std::move(out), traced);
  if (traced) {
    Tape<S>::active()->record([x, result]() {
      auto out_node = result.node();
      if (!out_node->has_grad() || !x.requires_grad()) return;
      x.node()->ensure_grad();
      x.node()->grad += out_node->grad / x.values();
    });
  }
  return result;
}

// Gradient passes only strictly inside the interval.
template <typename S>
Tensor<S> clamp(const Tensor<S>& x, S lo, S hi) {
  if (!(lo < hi)) throw Error(ErrCode::BadArgument, "clamp: lo must be < hi");
  ArrayX<S> out = x.values().max(lo).min(hi);
  const bool traced = detail::tracing<S>({&x});
  Tensor<S> result = detail::finish("clamp", x.shape(), std::move(out), traced);
  if (traced) {
    Tape<S>::active()->record([x, result, lo, hi]() {
      auto out_node = result.node();
      if (!out_node->has_grad() || !x.requires_grad()) return;
      x.node()->ensure_grad();
      x.node()->grad += ((x.values() > lo) && (x.values() < hi))
                            .select(out_node->grad, ArrayX<S>::Zero(out_node->grad.size()));
    });
  }
  return result;
}

template <typename S>
Tensor<S> elementwise_add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("elementwise_add", a, b);
  ArrayX<S> out = a.values() + b.values();
  const bool traced = detail::tracing<S>({&a, &b});
  Tensor<S> result = detail::finish("elementwise_add", a.shape(), std::move(out), traced);
  if (traced) {
    Tape<S>::active()->record([a, b, result]() {
      auto out_node = result.node();
      if (!out_node->has_grad()) return;
      if (a.requires_grad()) {
        a.node()->ensure_grad();
        a.node()->grad += out_node->grad;
      }
      if (b.requires_grad()) {
        b.node()->ensure_grad();
        b.node()->grad += out_node->grad;
      }
    });
  }
  return result;
}

template <typename S>
Tensor<S> elementwise_sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("elementwise_sub", a, b);
  ArrayX<S> out = a.values() - b.values();
  const bool traced = detail::tracing<S>({&a, &b});
  Tensor<S> result = detail::finish("elementwise_sub", a.shape(), std::move(out), traced);
  if (traced) {
    Tape<S>::active()->record([a, b, result]() {
      auto out_node = result.node();
      if (!out_node->has_grad()) return;
      if (a.requires_grad()) {
        a.node()->ensure_grad();
        a.node()->grad += out_node->grad;
      }
      if (b.requires_grad()) {
        b.node()->ensure_grad();
        b.node()->grad -= out_node->grad;
      }
    });
  }
  return result;
}

// Same-shape product, or features [N,C,H,W] * mask [N,1,H,W] broadcast over
// channels (the only broadcast the engine allows).
template <typename S>
Tensor<S> elementwise_mul(const Tensor<S>& a, const Tensor<S>& b) {
  const bool broadcast =
      a.rank() == 4 && b.rank() == 4 && b.extent(1) == 1 && a.extent(1) != 1 && a.extent(0) == b.extent(0) &&
      a.extent(2) == b.extent(2) && a.extent(3) == b.extent(3);
  if (!broadcast) detail::require_same_shape("elementwise_mul", a, b);

  ArrayX<S> out(a.numel());
  if (!broadcast) {
    out = a.values() * b.values();
  } else {
    const int N = a.extent(0), C = a.extent(1), HW = a.extent(2) * a.extent(3);
    for (int n = 0; n < N; ++n) {
      auto mask = b.values().segment(static_cast<Eigen::Index>(n) * HW, HW);
      for (int c = 0; c < C; ++c) {
        const Eigen::Index off = (static_cast<Eigen::Index>(n) * C + c) * HW;
        out.segment(off, HW) = a.values().segment(off, HW) * mask;
      }
    }
  }
  const bool traced = detail::tracing<S>({&a, &b});
  Tensor<S> result = detail::finish("elementwise_mul", a.shape(), std::move(out), traced);
  if (traced) {
    Tape<S>::active()->record([a, b, result, broadcast]() {
      auto out_node = result.node();
      if (!out_node->has_grad()) return;
      if (!broadcast) {
        if (a.requires_grad()) {
          a.node()->ensure_grad();
          a.node()->grad += out_node->grad * b.values();
        }
        if (b.requires_grad()) {
          b.node()->ensure_grad();
          b.node()->grad += out_node->grad * a.values();
        }
      } else {
        const int N = a.extent(0), C = a.extent(1), HW = a.extent(2) * a.extent(3);
        if (a.requires_grad()) {
          a.node()->ensure_grad();
          for (int n = 0; n < N; ++n) {
            auto mask = b.values().segment(static_cast<Eigen::Index>(n) * HW, HW);
            for (int c = 0; c < C; ++c) {
              const Eigen::Index off = (static_cast<Eigen::Index>(n) * C + c) * HW;
              a.node()->grad.segment(off, HW) += out_node->grad.segment(off, HW) * mask;
            }
          }
        }
        if (b.requires_grad()) {
          b.node()->ensure_grad();
          for (int n = 0; n < N; ++n) {
            auto gm = b.node()->grad.segment(static_cast<Eigen::Index>(n) * HW, HW);
            for (int c = 0; c < C; ++c) {
              const Eigen::Index off = (static_cast<Eigen::Index>(n) * C + c) * HW;
              gm += out_node->grad.segment(off, HW) * a.values().segment(off, HW);
            }
          }
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.extent(0) != b.extent(0) || a.extent(2) != b.extent(2) ||
      a.extent(3) != b.extent(3))
    throw Error(ErrCode::ShapeMismatch, "concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int N = a.extent(0), Ca = a.extent(1), Cb = b.extent(1), HW = a.extent(2) * a.extent(3);
  ArrayX<S> out(a.numel() + b.numel());
  for (int n = 0; n < N; ++n) {
    out.segment(static_cast<Eigen::Index>(n) * (Ca + Cb) * HW, static_cast<Eigen::Index>(Ca) * HW) =
        a.values().segment(static_cast<Eigen::Index>(n) * Ca * HW, static_cast<Eigen::Index>(Ca) * HW);
    out.segment(static_cast<Eigen::Index>(n) * (Ca + Cb) * HW + Ca * HW, static_cast<Eigen::Index>(Cb) * HW) =
        b.values().segment(static_cast<Eigen::Index>(n) * Cb * HW, static_cast<Eigen::Index>(Cb) * HW);
  }
  const bool traced = detail::tracing<S>({&a, &b});
  Tensor<S> result = detail::finish("concat_channels", {N, Ca + Cb, a.extent(2), a.extent(3)}, std::move(out), traced);
  if (traced) {
    Tape<S>::active()->record([a, b, result, N, Ca, Cb, HW]() {
      auto out_node = result.node();
      if (!out_node->has_grad()) return;
      for (int n = 0; n < N; ++n) {
        const Eigen::Index base = static_cast<Eigen::Index>(n) * (Ca + Cb) * HW;
        if (a.requires_grad()) {
          a.node()->ensure_grad();
          a.node()->grad.segment(static_cast<Eigen::Index>(n) * Ca * HW, static_cast<Eigen::Index>(Ca) * HW) +=
              out_node->grad.segment(base, static_cast<Eigen::Index>(Ca) * HW);
        }
        if (b.requires_grad()) {
          b.node()->ensure_grad();
          b.node()->grad.segment(static_cast<Eigen::Index>(n) * Cb * HW, static_cast<Eigen::Index>(Cb) * HW) +=
              out_node->grad.segment(base + Ca * HW, static_cast<Eigen::Index>(Cb) * HW);
        }
      }
    });
  }
  return result;
}

// [N,C,H,W] -> [N,C] per-channel spatial mean.
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  if (x.rank() != 4) throw Error(ErrCode::ShapeMismatch, "global_avg_pool: expected [N,C,H,W]");
  const int N = x.extent(0), C = x.extent(1), HW = x.extent(2) * x.extent(3);
  ArrayX<S> out(static_cast<Eigen::Index>(N) * C);
  for (int nc = 0; nc < N * C; ++nc)
    out[nc] = x.values().segment(static_cast<Eigen::Index>(nc) * HW, HW).mean();
  const bool traced = detail::tracing<S>({&x});
  Tensor<S> result = detail::finish("global_avg_pool", {N, C}, std::move(out), traced);
  if (traced) {
    Tape<S>::active()->record([x, result, N, C, HW]() {
      auto out_node = result.node();
      if (!out_node->has_grad() || !x.requires_grad()) return;
      x.node()->ensure_grad();
      for (int nc = 0; nc < N * C; ++nc)
        x.node()->grad.segment(static_cast<Eigen::Index>(nc) * HW, HW) += out_node->grad[nc] / S(HW);
    });
  }
  return result;
}

// Identity values under a new shape with equal element count.
template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw Error(ErrCode::ShapeMismatch,
                "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  ArrayX<S> out = x.values();
  const bool traced = detail::tracing<S>({&x});
  Tensor<S> result = detail::finish("reshape", std::move(shape), std::move(out), traced);
  if (traced) {
    Tape<S>::active()->record([x, result]() {
      auto out_node = result.node();
      if (!out_node->has_grad() || !x.requires_grad()) return;
      x.node()->ensure_grad();
      x.node()->grad += out_node->grad;
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Reductions and scalar plumbing
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  ArrayX<S> out(1);
  out[0] = x.values().sum();
  const bool traced = detail::tracing<S>({&x});
  Tensor<S> result = detail::finish("sum", {1}, std::move(out), traced);
  if (traced) {
    Tape<S>::active()->record([x, result]() {
      auto out_node = result.node();
      if (!out_node->has_grad() || !x.requires_grad()) return;
      x.node()->ensure_grad();
      x.node()->grad += out_node->grad[0];
    });
  }
  return result;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  ArrayX<S> out(1);
  out[0] = x.values().mean();
  const bool traced = detail::tracing<S>({&x});
  Tensor<S> result = detail::finish("mean", {1}, std::move(out), traced);
  if (traced) {
    Tape<S>::active()->record([x, result]() {
      auto out_node = result.node();
      if (!out_node->has_grad() || !x.requires_grad()) return;
      x.node()->ensure_grad();
      x.node()->grad += out_node->grad[0] / S(x.numel());
    });
  }
  return result;
}

// Stacks K scalar tensors into a length-K vector.
template <typename S>
Tensor<S> stack(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw Error(ErrCode::BadArgument, "stack: empty input");
  ArrayX<S> out(static_cast<Eigen::Index>(parts.size()));
  bool any_grad = false;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].numel() != 1) throw Error(ErrCode::ShapeMismatch, "stack: all parts must be scalar");
    out[static_cast<Eigen::Index>(i)] = parts[i].values()[0];
    any_grad = any_grad || parts[i].requires_grad();
  }
  const bool traced = Tape<S>::active() != nullptr && any_grad;
  Tensor<S> result = detail::finish("stack", {static_cast<int>(parts.size())}, std::move(out), traced);
  if (traced) {
    Tape<S>::active()->record([parts, result]() {
      auto out_node = result.node();
      if (!out_node->has_grad()) return;
      for (std::size_t i = 0; i < parts.size(); ++i) {
        if (!parts[i].requires_grad()) continue;
        parts[i].node()->ensure_grad();
        parts[i].node()->grad[0] += out_node->grad[static_cast<Eigen::Index>(i)];
      }
    });
  }
  return result;
}

// Selects element i of a rank-1 tensor as a scalar.
template <typename S>
Tensor<S> pick(const Tensor<S>& x, int i) {
  if (x.rank() != 1) throw Error(ErrCode::ShapeMismatch, "pick: expected rank-1 tensor");
  if (i < 0 || i >= x.extent(0)) throw Error(ErrCode::BadArgument, "pick: index out of range");
  ArrayX<S> out(1);
  out[0] = x.values()[i];
  const bool traced = detail::tracing<S>({&x});
  Tensor<S> result = detail::finish("pick", {1}, std::move(out), traced);
  if (traced) {
    Tape<S>::active()->record([x, result, i]() {
      auto out_node = result.node();
      if (!out_node->has_grad() || !x.requires_grad()) return;
      x.node()->ensure_grad();
      x.node()->grad[i] += out_node->grad[0];
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Cosine similarity
// ---------------------------------------------------------------------------

// u.v / (||u|| ||v||) with norms clamped at 1e-8; the result is clamped to
// [-1, 1] before use. A clamped norm counts as a degenerate prototype.
template <typename S>
Tensor<S> cosine_similarity(const Tensor<S>& u, const Tensor<S>& v) {
  if (u.rank() != 1 || v.rank() != 1 || u.extent(0) != v.extent(0))
    throw Error(ErrCode::ShapeMismatch,
                "cosine_similarity: expected equal-length vectors, got " + shape_str(u.shape()) + " vs " +
                    shape_str(v.shape()));
  const S eps = S(1e-8);
  const S nu_raw = std::sqrt(u.values().square().sum());
  const S nv_raw = std::sqrt(v.values().square().sum());
  if (nu_raw < eps || nv_raw < eps) cosine_degenerate_count().fetch_add(1, std::memory_order_relaxed);
  const S nu = std::max(nu_raw, eps);
  const S nv = std::max(nv_raw, eps);
  const S dot = (u.values() * v.values()).sum();
  const S raw = dot / (nu * nv);
  ArrayX<S> out(1);
  out[0] = std::min(std::max(raw, S(-1)), S(1));
  const bool traced = detail::tracing<S>({&u, &v});
  Tensor<S> result = detail::finish("cosine_similarity", {1}, std::move(out), traced);
  if (traced) {
    const bool u_clamped = nu_raw < eps, v_clamped = nv_raw < eps;
    Tape<S>::active()->record([u, v, result, nu, nv, raw, u_clamped, v_clamped]() {
      auto out_node = result.node();
      if (!out_node->has_grad()) return;
      const S g = out_node->grad[0];
      if (u.requires_grad()) {
        u.node()->ensure_grad();
        u.node()->grad += g * (v.values() / (nu * nv));
        if (!u_clamped) u.node()->grad -= g * (raw / (nu * nu)) * u.values();
      }
      if (v.requires_grad()) {
        v.node()->ensure_grad();
        v.node()->grad += g * (u.values() / (nu * nv));
        if (!v_clamped) v.node()->grad -= g * (raw / (nv * nv)) * v.values();
      }
    });
  }
  return result;
}

}  // namespace fewshot
