#pragma once

#include <cmath>
#include <cstring>
#include <vector>

#include "burstiq/core/parallel.hpp"
#include "burstiq/numerics/blas.hpp"
#include "burstiq/numerics/ops.hpp"

// Network operators. conv2d and linear lower to GEMM; the batch axis of
// conv2d is split across the worker pool with per-frame GEMMs, so each
// frame's result is independent of its position in the batch.

namespace burstiq::numerics {

namespace detail {

struct ConvDims {
  std::size_t batch, in_ch, in_h, in_w;
  std::size_t out_ch, k;
  int stride, pad;
  std::size_t out_h, out_w;
};

template <typename T>
inline ConvDims conv_dims(const Tensor<T>& input, const Tensor<T>& kernel, int stride, int pad) {
  if (input.rank() != 4)
    throw ShapeError("conv2d: input must be NCHW, got " + shape_string(input.shape()));
  if (kernel.rank() != 4)
    throw ShapeError("conv2d: kernel must be OIKK, got " + shape_string(kernel.shape()));
  if (kernel.shape()[2] != kernel.shape()[3])
    throw ShapeError("conv2d: kernel axes 2 and 3 must match, got " +
                     shape_string(kernel.shape()));
  if (stride < 1) throw ShapeError("conv2d: stride must be positive");
  if (pad < 0) throw ShapeError("conv2d: padding must be non-negative");
  ConvDims d;
  d.batch = input.shape()[0];
  d.in_ch = input.shape()[1];
  d.in_h = input.shape()[2];
  d.in_w = input.shape()[3];
  d.out_ch = kernel.shape()[0];
  d.k = kernel.shape()[2];
  d.stride = stride;
  d.pad = pad;
  if (kernel.shape()[1] != d.in_ch)
    throw ShapeError("conv2d: input channel axis 1 has extent " + std::to_string(d.in_ch) +
                     " but kernel input axis 1 expects " + std::to_string(kernel.shape()[1]));
  if (d.in_h + 2 * pad < d.k || d.in_w + 2 * pad < d.k)
    throw ShapeError("conv2d: padded spatial extent " + std::to_string(d.in_h + 2 * pad) + "x" +
                     std::to_string(d.in_w + 2 * pad) + " smaller than kernel " +
                     std::to_string(d.k));
  d.out_h = (d.in_h + 2 * pad - d.k) / stride + 1;
  d.out_w = (d.in_w + 2 * pad - d.k) / stride + 1;
  return d;
}

// col is (in_ch*k*k) x (out_h*out_w), row-major.
template <typename T>
void im2col(const T* src, const ConvDims& d, T* col) {
  const std::size_t plane = d.in_h * d.in_w;
  const std::size_t ow = d.out_w;
  for (std::size_t c = 0; c < d.in_ch; ++c) {
    for (std::size_t ky = 0; ky < d.k; ++ky) {
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        T* row = col + ((c * d.k + ky) * d.k + kx) * (d.out_h * ow);
        for (std::size_t oy = 0; oy < d.out_h; ++oy) {
          const long iy = static_cast<long>(oy) * d.stride - d.pad + static_cast<long>(ky);
          T* dst = row + oy * ow;
          if (iy < 0 || iy >= static_cast<long>(d.in_h)) {
            std::memset(dst, 0, ow * sizeof(T));
            continue;
          }
          const T* srow = src + c * plane + static_cast<std::size_t>(iy) * d.in_w;
          if (d.stride == 1) {
            // contiguous middle, zero-filled rims
            const long shift = static_cast<long>(kx) - d.pad;  // ix = ox + shift
            const long lo = std::max<long>(0, -shift);
            const long hi = std::min<long>(ow, static_cast<long>(d.in_w) - shift);
            if (lo > 0) std::memset(dst, 0, static_cast<std::size_t>(lo) * sizeof(T));
            if (hi > lo)
              std::memcpy(dst + lo, srow + lo + shift, static_cast<std::size_t>(hi - lo) * sizeof(T));
            if (hi < static_cast<long>(ow))
              std::memset(dst + std::max<long>(hi, 0), 0,
                          static_cast<std::size_t>(static_cast<long>(ow) - std::max<long>(hi, 0)) * sizeof(T));
          } else {
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const long ix = static_cast<long>(ox) * d.stride - d.pad + static_cast<long>(kx);
              dst[ox] = (ix >= 0 && ix < static_cast<long>(d.in_w)) ? srow[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvDims& d, T* dst) {
  const std::size_t plane = d.in_h * d.in_w;
  for (std::size_t c = 0; c < d.in_ch; ++c) {
    for (std::size_t ky = 0; ky < d.k; ++ky) {
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        const T* row = col + ((c * d.k + ky) * d.k + kx) * (d.out_h * d.out_w);
        for (std::size_t oy = 0; oy < d.out_h; ++oy) {
          const long iy = static_cast<long>(oy) * d.stride - d.pad + static_cast<long>(ky);
          if (iy < 0 || iy >= static_cast<long>(d.in_h)) continue;
          T* drow = dst + c * plane + static_cast<std::size_t>(iy) * d.in_w;
          const T* srow = row + oy * d.out_w;
          for (std::size_t ox = 0; ox < d.out_w; ++ox) {
            const long ix = static_cast<long>(ox) * d.stride - d.pad + static_cast<long>(kx);
            if (ix >= 0 && ix < static_cast<long>(d.in_w)) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

template <typename T>
std::vector<T>& col_scratch(std::size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& input, const Tensor<T>& kernel, int stride = 1,
                 int padding = 0) {
  const auto d = detail::conv_dims(input, kernel, stride, padding);
  Tensor<T> out({d.batch, d.out_ch, d.out_h, d.out_w});

  const std::size_t ckk = d.in_ch * d.k * d.k;
  const std::size_t opix = d.out_h * d.out_w;
  const std::size_t in_frame = d.in_ch * d.in_h * d.in_w;
  const std::size_t out_frame = d.out_ch * opix;

  const T* in_ptr = input.values().data();
  const T* k_ptr = kernel.values().data();
  T* out_ptr = out.impl()->values.data();

  WorkerPool::instance().for_ranges(d.batch, [&](std::size_t lo, std::size_t hi) {
    auto& col = detail::col_scratch<T>(ckk * opix);
    for (std::size_t n = lo; n < hi; ++n) {
      detail::im2col(in_ptr + n * in_frame, d, col.data());
      detail::gemm(false, false, static_cast<int>(d.out_ch), static_cast<int>(opix),
                   static_cast<int>(ckk), T(1), k_ptr, static_cast<int>(ckk), col.data(),
                   static_cast<int>(opix), T(0), out_ptr + n * out_frame, static_cast<int>(opix));
    }
  });

  if (detail::want_grad(tape, {&input, &kernel})) {
    out.set_requires_grad(true);
    auto ii = input.impl(), ki = kernel.impl(), oi = out.impl();
    tape->record("conv2d", {input, kernel}, out, [ii, ki, oi, d, ckk, opix, in_frame, out_frame]() {
      const T* og = oi->grad.data();
      if (ki->requires_grad) {
        auto& kg = detail::ensure_grad(*ki);
        // per-worker partials, reduced in fixed worker order
        std::vector<std::vector<T>> partial(2);
        WorkerPool::instance().for_ranges(d.batch, [&](std::size_t lo, std::size_t hi) {
          const int widx = lo == 0 ? 0 : 1;
          partial[widx].assign(kg.size(), T(0));
          auto& col = detail::col_scratch<T>(ckk * opix);
          for (std::size_t n = lo; n < hi; ++n) {
            detail::im2col(ii->values.data() + n * in_frame, d, col.data());
            detail::gemm(false, true, static_cast<int>(d.out_ch), static_cast<int>(ckk),
                         static_cast<int>(opix), T(1), og + n * out_frame,
                         static_cast<int>(opix), col.data(), static_cast<int>(opix), T(1),
                         partial[widx].data(), static_cast<int>(ckk));
          }
        });
        for (const auto& p : partial)
          for (std::size_t i = 0; i < p.size(); ++i) kg[i] += p[i];
      }
      if (ii->requires_grad) {
        auto& ig = detail::ensure_grad(*ii);
        WorkerPool::instance().for_ranges(d.batch, [&](std::size_t lo, std::size_t hi) {
          auto& col = detail::col_scratch<T>(ckk * opix);
          for (std::size_t n = lo; n < hi; ++n) {
            detail::gemm(true, false, static_cast<int>(ckk), static_cast<int>(opix),
                         static_cast<int>(d.out_ch), T(1), ki->values.data(),
                         static_cast<int>(ckk), og + n * out_frame, static_cast<int>(opix), T(0),
                         col.data(), static_cast<int>(opix));
            detail::col2im_add(col.data(), d, ig.data() + n * in_frame);
          }
        });
      }
    });
  }
  return out;
}

// y = x * w^T + b  for x: N x K, w: M x K, b: M
template <typename T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2)
    throw ShapeError("linear: x and w must be rank 2, got " + shape_string(x.shape()) + " and " +
                     shape_string(w.shape()));
  const std::size_t n = x.extent(0), k = x.extent(1), m = w.extent(0);
  if (w.extent(1) != k)
    throw ShapeError("linear: x axis 1 extent " + std::to_string(k) +
                     " != weight axis 1 extent " + std::to_string(w.extent(1)));
  if (b.size() != m)
    throw ShapeError("linear: bias length " + std::to_string(b.size()) + " != weight rows " +
                     std::to_string(m));
  Tensor<T> out({n, m});
  detail::gemm(false, true, static_cast<int>(n), static_cast<int>(m), static_cast<int>(k), T(1),
               x.values().data(), static_cast<int>(k), w.values().data(), static_cast<int>(k),
               T(0), out.impl()->values.data(), static_cast<int>(m));
  auto& ov = out.impl()->values;
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) ov[i * m + j] += bv[j];

  if (detail::want_grad(tape, {&x, &w, &b})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), wi = w.impl(), bi = b.impl(), oi = out.impl();
    tape->record("linear", {x, w, b}, out, [xi, wi, bi, oi, n, m, k]() {
      const T* og = oi->grad.data();
      if (xi->requires_grad) {
        auto& g = detail::ensure_grad(*xi);
        detail::gemm(false, false, static_cast<int>(n), static_cast<int>(k), static_cast<int>(m),
                     T(1), og, static_cast<int>(m), wi->values.data(), static_cast<int>(k), T(1),
                     g.data(), static_cast<int>(k));
      }
      if (wi->requires_grad) {
        auto& g = detail::ensure_grad(*wi);
        detail::gemm(true, false, static_cast<int>(m), static_cast<int>(k), static_cast<int>(n),
                     T(1), og, static_cast<int>(m), xi->values.data(), static_cast<int>(k), T(1),
                     g.data(), static_cast<int>(k));
      }
      if (bi->requires_grad) {
        auto& g = detail::ensure_grad(*bi);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) g[j] += og[i * m + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(Tape<T>* tape, const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(x.rank()));
  for (std::size_t i = 0; i < x.values().size(); ++i)
    if (!std::isfinite(static_cast<double>(x.values()[i])))
      throw NumericError("softmax: non-finite input at flat index " + std::to_string(i));

  const std::size_t len = x.shape()[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.shape()[d];
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.shape()[d];

  Tensor<T> out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.impl()->values;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      T mx = xv[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      double sum = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(static_cast<double>(xv[base + j * inner] - mx));
        ov[base + j * inner] = static_cast<T>(e);
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (std::size_t j = 0; j < len; ++j)
        ov[base + j * inner] = static_cast<T>(static_cast<double>(ov[base + j * inner]) * inv);
    }
  }

  if (detail::want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    tape->record("softmax", {x}, out, [xi, oi, outer, inner, len]() {
      auto& g = detail::ensure_grad(*xi);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * len * inner + i;
          double dot = 0;
          for (std::size_t j = 0; j < len; ++j)
            dot += static_cast<double>(oi->grad[base + j * inner]) * oi->values[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t idx = base + j * inner;
            g[idx] += static_cast<T>(oi->values[idx] *
                                     (static_cast<double>(oi->grad[idx]) - dot));
          }
        }
      }
    });
  }
  return out;
}

// NCHW -> NC spatial mean
template <typename T>
Tensor<T> global_avg_pool(Tape<T>* tape, const Tensor<T>& x) {
  if (x.rank() != 4)
    throw ShapeError("global_avg_pool: input must be NCHW, got " + shape_string(x.shape()));
  return mean(tape, x, {2, 3});
}

// 2x spatial average-pool downsample
template <typename T>
Tensor<T> avg_pool2(Tape<T>* tape, const Tensor<T>& x) {
  if (x.rank() != 4)
    throw ShapeError("avg_pool2: input must be NCHW, got " + shape_string(x.shape()));
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (h % 2 || w % 2)
    throw ShapeError("avg_pool2: spatial axes must be even, got " + shape_string(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> out({n, c, oh, ow});
  const auto& xv = x.values();
  auto& ov = out.impl()->values;
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = xv.data() + p * h * w;
    T* dst = ov.data() + p * oh * ow;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xj = 0; xj < ow; ++xj) {
        const T* s = src + 2 * y * w + 2 * xj;
        dst[y * ow + xj] = static_cast<T>(
            (static_cast<double>(s[0]) + s[1] + s[w] + s[w + 1]) * 0.25);
      }
  }
  if (detail::want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    tape->record("avg_pool2", {x}, out, [xi, oi, n, c, h, w, oh, ow]() {
      auto& g = detail::ensure_grad(*xi);
      for (std::size_t p = 0; p < n * c; ++p) {
        T* dst = g.data() + p * h * w;
        const T* src = oi->grad.data() + p * oh * ow;
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t xj = 0; xj < ow; ++xj) {
            const T q = src[y * ow + xj] * T(0.25);
            T* d = dst + 2 * y * w + 2 * xj;
            d[0] += q;
            d[1] += q;
            d[w] += q;
            d[w + 1] += q;
          }
      }
    });
  }
  return out;
}

// Nearest-neighbour spatial resize of an NCHW tensor.
template <typename T>
Tensor<T> nearest_resize(Tape<T>* tape, const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 4)
    throw ShapeError("nearest_resize: input must be NCHW, got " + shape_string(x.shape()));
  if (out_h == 0 || out_w == 0) throw ShapeError("nearest_resize: zero output extent");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  std::vector<std::size_t> ymap(out_h), xmap(out_w);
  for (std::size_t y = 0; y < out_h; ++y) ymap[y] = std::min(h - 1, ((2 * y + 1) * h) / (2 * out_h));
  for (std::size_t xj = 0; xj < out_w; ++xj)
    xmap[xj] = std::min(w - 1, ((2 * xj + 1) * w) / (2 * out_w));

  Tensor<T> out({n, c, out_h, out_w});
  const auto& xv = x.values();
  auto& ov = out.impl()->values;
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = xv.data() + p * h * w;
    T* dst = ov.data() + p * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t xj = 0; xj < out_w; ++xj) dst[y * out_w + xj] = src[ymap[y] * w + xmap[xj]];
  }
  if (detail::want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    tape->record("nearest_resize", {x}, out, [xi, oi, n, c, h, w, out_h, out_w, ymap, xmap]() {
      auto& g = detail::ensure_grad(*xi);
      for (std::size_t p = 0; p < n * c; ++p) {
        T* dst = g.data() + p * h * w;
        const T* src = oi->grad.data() + p * out_h * out_w;
        for (std::size_t y = 0; y < out_h; ++y)
          for (std::size_t xj = 0; xj < out_w; ++xj)
            dst[ymap[y] * w + xmap[xj]] += src[y * out_w + xj];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest(Tape<T>* tape, const Tensor<T>& x, std::size_t factor) {
  if (factor == 0) throw ShapeError("upsample_nearest: zero factor");
  if (x.rank() != 4)
    throw ShapeError("upsample_nearest: input must be NCHW, got " + shape_string(x.shape()));
  return nearest_resize(tape, x, x.shape()[2] * factor, x.shape()[3] * factor);
}

// Mean element-wise Bernoulli KL divergence KL(t || s) with probabilities
// clamped to [eps, 1-eps] before the logs. Differentiable in both arguments;
// clamped entries get zero gradient so the analytic value matches finite
// differences of the clamped forward.
template <typename T>
Tensor<T> binary_kl_mean(Tape<T>* tape, const Tensor<T>& target, const Tensor<T>& pred) {
  if (target.shape() != pred.shape())
    throw ShapeError("binary_kl_mean: shape mismatch " + shape_string(target.shape()) + " vs " +
                     shape_string(pred.shape()));
  constexpr double kEps = 1e-7;
  const auto& tv = target.values();
  const auto& sv = pred.values();
  double acc = 0;
  for (std::size_t i = 0; i < tv.size(); ++i) {
    const double t = std::clamp(static_cast<double>(tv[i]), kEps, 1.0 - kEps);
    const double s = std::clamp(static_cast<double>(sv[i]), kEps, 1.0 - kEps);
    acc += t * std::log(t / s) + (1.0 - t) * std::log((1.0 - t) / (1.0 - s));
  }
  const double n = static_cast<double>(tv.size());
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / n));

  if (detail::want_grad(tape, {&target, &pred})) {
    out.set_requires_grad(true);
    auto ti = target.impl(), si = pred.impl(), oi = out.impl();
    tape->record("binary_kl_mean", {target, pred}, out, [ti, si, oi, n]() {
      const double go = static_cast<double>(oi->grad[0]) / n;
      for (std::size_t i = 0; i < ti->values.size(); ++i) {
        const double t_raw = static_cast<double>(ti->values[i]);
        const double s_raw = static_cast<double>(si->values[i]);
        const double t = std::clamp(t_raw, kEps, 1.0 - kEps);
        const double s = std::clamp(s_raw, kEps, 1.0 - kEps);
        if (si->requires_grad && s_raw > kEps && s_raw < 1.0 - kEps) {
          detail::ensure_grad(*si)[i] += static_cast<T>(go * (-t / s + (1.0 - t) / (1.0 - s)));
        }
        if (ti->requires_grad && t_raw > kEps && t_raw < 1.0 - kEps) {
          detail::ensure_grad(*ti)[i] +=
              static_cast<T>(go * (std::log(t / s) - std::log((1.0 - t) / (1.0 - s))));
        }
      }
    });
  }
  return out;
}

}  // namespace burstiq::numerics
