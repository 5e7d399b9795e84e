#pragma once

#include <algorithm>
#include <cstring>
#include <vector>

#include "burstiq/numerics/tape.hpp"
#include "burstiq/numerics/tensor.hpp"

// Elementwise, structural and reduction operators. Every op is pure: it
// returns a fresh tensor and, when a tape is supplied and an input requires
// gradients, records its backward closure on that tape. Passing tape=nullptr
// runs the op in inference mode.

namespace burstiq::numerics {

namespace detail {

template <typename T>
inline bool want_grad(Tape<T>* tape, std::initializer_list<const Tensor<T>*> inputs) {
  if (!tape) return false;
  for (const Tensor<T>* t : inputs)
    if ((*t).requires_grad()) return true;
  return false;
}

// Leading-axis broadcasting: the smaller operand's shape (leading 1s ignored)
// must be a suffix of the larger operand's shape.
struct Broadcast {
  std::size_t repeat;  // leading repetitions of the small operand
  std::size_t inner;   // elements in the small operand
  bool b_small;        // which side is broadcast
};

template <typename T>
inline Broadcast broadcast_plan(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  auto effective = [](const std::vector<std::size_t>& s) {
    std::size_t lead = 0;
    while (lead + 1 < s.size() && s[lead] == 1) ++lead;
    return std::vector<std::size_t>(s.begin() + lead, s.end());
  };
  const auto ea = effective(a.shape());
  const auto eb = effective(b.shape());
  auto is_suffix = [](const std::vector<std::size_t>& big, const std::vector<std::size_t>& small) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
  };
  if (a.size() >= b.size() && is_suffix(ea, eb))
    return {a.size() / b.size(), b.size(), true};
  if (b.size() > a.size() && is_suffix(eb, ea))
    return {b.size() / a.size(), a.size(), false};
  throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                   shape_string(b.shape()) + " do not broadcast on leading axes");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic

template <typename T, typename Fwd, typename BwdA, typename BwdB>
Tensor<T> binary_elementwise(const char* name, Tape<T>* tape, const Tensor<T>& a,
                             const Tensor<T>& b, Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
  const auto plan = detail::broadcast_plan(name, a, b);
  const Tensor<T>& big = plan.b_small ? a : b;
  const Tensor<T>& small = plan.b_small ? b : a;
  Tensor<T> out(big.shape());
  auto& ov = out.impl()->values;
  const auto& bv = big.values();
  const auto& sv = small.values();
  for (std::size_t r = 0; r < plan.repeat; ++r) {
    const std::size_t base = r * plan.inner;
    for (std::size_t i = 0; i < plan.inner; ++i) {
      const T x = plan.b_small ? bv[base + i] : sv[i];
      const T y = plan.b_small ? sv[i] : bv[base + i];
      ov[base + i] = fwd(x, y);
    }
  }
  if (detail::want_grad(tape, {&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    tape->record(name, {a, b}, out, [ai, bi, oi, plan, bwd_a, bwd_b]() {
      const auto& og = oi->grad;
      const bool bs = plan.b_small;
      auto* big_d = bs ? ai.get() : bi.get();
      auto* small_d = bs ? bi.get() : ai.get();
      if (big_d->requires_grad) {
        auto& g = detail::ensure_grad(*big_d);
        for (std::size_t r = 0; r < plan.repeat; ++r)
          for (std::size_t i = 0; i < plan.inner; ++i) {
            const std::size_t k = r * plan.inner + i;
            const T x = big_d->values[k];
            const T y = small_d->values[i];
            g[k] += og[k] * (bs ? bwd_a(x, y) : bwd_b(y, x));
          }
      }
      if (small_d->requires_grad) {
        auto& g = detail::ensure_grad(*small_d);
        for (std::size_t r = 0; r < plan.repeat; ++r)
          for (std::size_t i = 0; i < plan.inner; ++i) {
            const std::size_t k = r * plan.inner + i;
            const T x = big_d->values[k];
            const T y = small_d->values[i];
            g[i] += og[k] * (bs ? bwd_b(x, y) : bwd_a(y, x));
          }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise<T>(
      "add", tape, a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise<T>(
      "sub", tape, a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise<T>(
      "mul", tape, a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.impl()->values;
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  if (detail::want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    tape->record("relu", {x}, out, [xi, oi]() {
      auto& g = detail::ensure_grad(*xi);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xi->values[i] > T(0)) g[i] += oi->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, double c) {
  Tensor<T> out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.impl()->values;
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = static_cast<T>(c) * xv[i];
  if (detail::want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    tape->record("scale", {x}, out, [xi, oi, c]() {
      auto& g = detail::ensure_grad(*xi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<T>(c) * oi->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// structure

template <typename T>
Tensor<T> concat(Tape<T>* tape, const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const auto& first = xs.front().shape();
  if (axis >= first.size())
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(first.size()));
  std::size_t axis_total = 0;
  for (const auto& x : xs) {
    if (x.rank() != first.size())
      throw ShapeError("concat: rank mismatch " + shape_string(x.shape()) + " vs " +
                       shape_string(first));
    for (std::size_t d = 0; d < first.size(); ++d)
      if (d != axis && x.shape()[d] != first[d])
        throw ShapeError("concat: axis " + std::to_string(d) + " extent " +
                         std::to_string(x.shape()[d]) + " != " + std::to_string(first[d]));
    axis_total += x.shape()[axis];
  }
  std::vector<std::size_t> out_shape = first;
  out_shape[axis] = axis_total;
  Tensor<T> out(out_shape);

  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

  auto& ov = out.impl()->values;
  std::size_t offset = 0;  // in units of inner
  for (const auto& x : xs) {
    const std::size_t span = x.shape()[axis] * inner;
    const auto& xv = x.values();
    for (std::size_t o = 0; o < outer; ++o)
      std::memcpy(ov.data() + (o * axis_total * inner) + offset, xv.data() + o * span,
                  span * sizeof(T));
    offset += span;
  }

  bool grad = false;
  for (const auto& x : xs)
    if (tape && x.requires_grad()) grad = true;
  if (grad) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorData<T>>> impls;
    for (const auto& x : xs) impls.push_back(x.impl());
    auto oi = out.impl();
    tape->record("concat", xs, out, [impls, oi, outer, inner, axis_total]() {
      std::size_t offset = 0;
      for (auto& xi : impls) {
        const std::size_t span = xi->values.size() / outer;
        if (xi->requires_grad) {
          auto& g = detail::ensure_grad(*xi);
          for (std::size_t o = 0; o < outer; ++o) {
            const T* src = oi->grad.data() + o * axis_total * inner + offset;
            T* dst = g.data() + o * span;
            for (std::size_t i = 0; i < span; ++i) dst[i] += src[i];
          }
        }
        offset += span;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(Tape<T>* tape, const Tensor<T>& x, std::vector<std::size_t> new_shape) {
  if (shape_numel(new_shape) != x.size())
    throw ShapeError("reshape: " + shape_string(x.shape()) + " has " + std::to_string(x.size()) +
                     " elements, target " + shape_string(new_shape) + " has " +
                     std::to_string(shape_numel(new_shape)));
  Tensor<T> out(std::move(new_shape), x.values());
  if (detail::want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    tape->record("reshape", {x}, out, [xi, oi]() {
      auto& g = detail::ensure_grad(*xi);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
    });
  }
  return out;
}

// Frame t of a batched tensor, with the leading axis dropped.
template <typename T>
Tensor<T> take_frame(Tape<T>* tape, const Tensor<T>& x, std::size_t index) {
  if (x.rank() < 2) throw ShapeError("take_frame: needs rank >= 2, got " + shape_string(x.shape()));
  if (index >= x.extent(0))
    throw ShapeError("take_frame: index " + std::to_string(index) + " out of range for axis 0 (" +
                     std::to_string(x.extent(0)) + ")");
  std::vector<std::size_t> out_shape(x.shape().begin() + 1, x.shape().end());
  const std::size_t span = shape_numel(out_shape);
  std::vector<T> vals(x.values().begin() + index * span, x.values().begin() + (index + 1) * span);
  Tensor<T> out(std::move(out_shape), std::move(vals));
  if (detail::want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    tape->record("take_frame", {x}, out, [xi, oi, index, span]() {
      auto& g = detail::ensure_grad(*xi);
      for (std::size_t i = 0; i < span; ++i) g[index * span + i] += oi->grad[i];
    });
  }
  return out;
}

// n stacked copies along a new leading axis.
template <typename T>
Tensor<T> repeat_leading(Tape<T>* tape, const Tensor<T>& x, std::size_t n) {
  if (n == 0) throw ShapeError("repeat_leading: zero repetitions");
  std::vector<std::size_t> out_shape;
  out_shape.push_back(n);
  out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
  Tensor<T> out(out_shape);
  auto& ov = out.impl()->values;
  const auto& xv = x.values();
  for (std::size_t r = 0; r < n; ++r)
    std::memcpy(ov.data() + r * xv.size(), xv.data(), xv.size() * sizeof(T));
  if (detail::want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    tape->record("repeat_leading", {x}, out, [xi, oi, n]() {
      auto& g = detail::ensure_grad(*xi);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[r * g.size() + i];
    });
  }
  return out;
}

// y[i, :] = x[i, :] * s[i]  for x of shape N x D and s of shape N or N x 1.
template <typename T>
Tensor<T> row_scale(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& s) {
  if (x.rank() != 2) throw ShapeError("row_scale: x must be rank 2, got " + shape_string(x.shape()));
  if (s.size() != x.extent(0))
    throw ShapeError("row_scale: scale length " + std::to_string(s.size()) +
                     " != rows " + std::to_string(x.extent(0)));
  const std::size_t n = x.extent(0), d = x.extent(1);
  Tensor<T> out(x.shape());
  auto& ov = out.impl()->values;
  const auto& xv = x.values();
  const auto& sv = s.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) ov[i * d + j] = xv[i * d + j] * sv[i];
  if (detail::want_grad(tape, {&x, &s})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), si = s.impl(), oi = out.impl();
    tape->record("row_scale", {x, s}, out, [xi, si, oi, n, d]() {
      if (xi->requires_grad) {
        auto& g = detail::ensure_grad(*xi);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) g[i * d + j] += oi->grad[i * d + j] * si->values[i];
      }
      if (si->requires_grad) {
        auto& g = detail::ensure_grad(*si);
        for (std::size_t i = 0; i < n; ++i) {
          double acc = 0;
          for (std::size_t j = 0; j < d; ++j)
            acc += static_cast<double>(oi->grad[i * d + j]) * xi->values[i * d + j];
          g[i] += static_cast<T>(acc);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> mean(Tape<T>* tape, const Tensor<T>& x, std::vector<std::size_t> axes) {
  if (axes.empty()) throw ShapeError("mean: empty axis list");
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (std::size_t a : axes)
    if (a >= x.rank())
      throw ShapeError("mean: axis " + std::to_string(a) + " out of range for rank " +
                       std::to_string(x.rank()));

  std::vector<std::size_t> out_shape;
  std::vector<bool> reduced(x.rank(), false);
  for (std::size_t a : axes) reduced[a] = true;
  for (std::size_t d = 0; d < x.rank(); ++d)
    if (!reduced[d]) out_shape.push_back(x.shape()[d]);
  if (out_shape.empty()) out_shape.push_back(1);

  // per-input-axis stride into the output index (0 for reduced axes)
  std::vector<std::size_t> in_stride(x.rank(), 1), out_stride(x.rank(), 0);
  for (std::size_t d = x.rank(); d-- > 1;) in_stride[d - 1] = in_stride[d] * x.shape()[d];
  {
    std::size_t acc = 1;
    for (std::size_t d = x.rank(); d-- > 0;) {
      if (!reduced[d]) {
        out_stride[d] = acc;
        acc *= x.shape()[d];
      }
    }
  }
  std::size_t count = 1;
  for (std::size_t a : axes) count *= x.shape()[a];

  const std::size_t out_n = shape_numel(out_shape);
  std::vector<double> acc(out_n, 0.0);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    std::size_t rem = i, o = 0;
    for (std::size_t d = 0; d < x.rank(); ++d) {
      const std::size_t idx = rem / in_stride[d];
      rem -= idx * in_stride[d];
      o += idx * out_stride[d];
    }
    acc[o] += static_cast<double>(xv[i]);
  }
  Tensor<T> out(out_shape);
  auto& ov = out.impl()->values;
  for (std::size_t i = 0; i < out_n; ++i) ov[i] = static_cast<T>(acc[i] / count);

  if (detail::want_grad(tape, {&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    const auto rank = x.rank();
    tape->record("mean", {x}, out, [xi, oi, in_stride, out_stride, rank, count]() {
      auto& g = detail::ensure_grad(*xi);
      const T inv = static_cast<T>(1.0 / count);
      for (std::size_t i = 0; i < g.size(); ++i) {
        std::size_t rem = i, o = 0;
        for (std::size_t d = 0; d < rank; ++d) {
          const std::size_t idx = rem / in_stride[d];
          rem -= idx * in_stride[d];
          o += idx * out_stride[d];
        }
        g[i] += oi->grad[o] * inv;
      }
    });
  }
  return out;
}

}  // namespace burstiq::numerics
