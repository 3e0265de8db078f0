#pragma once

// Dense float tensors with a tape-based reverse-mode autodiff.
//
// A Tensor is a shared handle to a TensorImpl. Operations record a backward
// closure on the thread's active Tape whenever one of their inputs requires a
// gradient; Tape::backward replays the closures once each, in reverse order.
// Gradients accumulate, so shared subexpressions sum their contributions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <unordered_map>
#include <vector>

#ifdef __AVX512F__
#include <immintrin.h>
#endif

namespace depthart {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;

  std::span<float> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl>()) {
    if (numel_of(shape) != data.size())
      throw DimensionError("tensor: shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " elements");
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
  }

  static Tensor full(Shape shape, float value) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<float>(n, value));
  }

  static Tensor scalar(float value) { return Tensor({1}, {value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const float> data() const { return impl_->data; }
  // Parameters are mutated in place by optimizers; nothing else should.
  std::span<float> mutable_data() { return impl_->data; }

  float item() const {
    if (numel() != 1) throw DimensionError("item: tensor has " + std::to_string(numel()) + " elements");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<const float> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  Tensor detach() const { return Tensor(shape(), impl_->data); }

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

class Tape;

namespace detail {
inline thread_local Tape* active_tape = nullptr;
/// Transposed copies of tensor data, shared by the backward closures of one
/// Tape::backward call.
inline thread_local std::unordered_map<const void*, std::vector<float>>* transpose_cache = nullptr;
}  // namespace detail

class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const float> grad_out)>;

  void record(std::shared_ptr<TensorImpl> output, BackwardFn fn) {
    nodes_.push_back({std::move(output), std::move(fn)});
  }

  /// Seeds d(root)/d(root) = 1 and visits every recorded node once, newest
  /// first. Nodes whose output received no gradient are skipped.
  void backward(const Tensor& root) {
    if (root.numel() != 1) throw DimensionError("backward: root must be a scalar, got " + shape_str(root.shape()));
    auto g = root.impl()->grad_buffer();
    g[0] += 1.0f;
    std::unordered_map<const void*, std::vector<float>> cache;
    auto* prev = detail::transpose_cache;
    detail::transpose_cache = &cache;
    try {
      for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->output->grad.empty()) continue;
        it->backward(it->output->grad);
      }
    } catch (...) {
      detail::transpose_cache = prev;
      throw;
    }
    detail::transpose_cache = prev;
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

/// Makes `tape` the recording target for this thread while alive.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(detail::active_tape) { detail::active_tape = &tape; }
  ~TapeScope() { detail::active_tape = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

/// Suspends recording for this thread while alive.
class NoGradScope {
 public:
  NoGradScope() : prev_(detail::active_tape) { detail::active_tape = nullptr; }
  ~NoGradScope() { detail::active_tape = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

inline bool grad_enabled() { return detail::active_tape != nullptr; }

namespace detail {

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <typename MakeBackward>
Tensor finish(Shape shape, std::vector<float> data, std::initializer_list<const Tensor*> inputs,
              MakeBackward&& make_backward) {
  Tensor out(std::move(shape), std::move(data));
  if (should_record(inputs)) {
    out.set_requires_grad(true);
    active_tape->record(out.impl_ptr(), make_backward(out.impl_ptr()));
  }
  return out;
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

}  // namespace detail

namespace kernels {

/// C[M,N] = (accumulate ? C : 0) + op(A) * B[K,N], row-major, where op(A) is
/// A[M,K] or, with TransA, the transpose of a row-major A[K,M].
/// Every output element is reduced over k in ascending order with fused
/// multiply-adds, independent of M, so a row's result never depends on the
/// other rows in the call.
template <bool TransA>
inline void gemm_impl(const float* __restrict a, const float* __restrict b, float* __restrict c, std::size_t m,
                      std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) {
#ifdef __AVX512F__
    // Full 64-wide tiles start from zero in registers.
    for (std::size_t i = 0; i < m; ++i) std::fill(c + i * n + n / 64 * 64, c + (i + 1) * n, 0.0f);
    if (m % 4)
      for (std::size_t i = m / 4 * 4; i < m; ++i) std::fill(c + i * n, c + i * n + n / 64 * 64, 0.0f);
#else
    std::fill(c, c + m * n, 0.0f);
#endif
  }
  // a(i, p) for output row i and reduction index p.
  const std::size_t rs = TransA ? 1 : k, cs = TransA ? m : 1;
  constexpr std::size_t kTile = 64;
  for (std::size_t j0 = 0; j0 < n; j0 += kTile) {
    const std::size_t jn = std::min(kTile, n - j0);
    std::size_t i = 0;
#ifdef __AVX512F__
    if (jn == kTile) {
      for (; i + 4 <= m; i += 4) {
        __m512 acc[4][4];
        for (int r = 0; r < 4; ++r)
          for (int q = 0; q < 4; ++q)
            acc[r][q] = accumulate ? _mm512_loadu_ps(c + (i + r) * n + j0 + 16 * q) : _mm512_setzero_ps();
        const float* a0 = a + i * rs;
        for (std::size_t p = 0; p < k; ++p) {
          const float* ap = a0 + p * cs;
          const float* brow = b + p * n + j0;
          __m512 bv[4];
          for (int q = 0; q < 4; ++q) bv[q] = _mm512_loadu_ps(brow + 16 * q);
          for (int r = 0; r < 4; ++r) {
            const __m512 x = _mm512_set1_ps(ap[r * rs]);
            for (int q = 0; q < 4; ++q) acc[r][q] = _mm512_fmadd_ps(x, bv[q], acc[r][q]);
          }
        }
        for (int r = 0; r < 4; ++r)
          for (int q = 0; q < 4; ++q) _mm512_storeu_ps(c + (i + r) * n + j0 + 16 * q, acc[r][q]);
      }
    }
#endif
    for (; i + 4 <= m; i += 4) {
      float acc[4][kTile];
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < jn; ++j) acc[r][j] = c[(i + r) * n + j0 + j];
      const float* a0 = a + i * rs;
      for (std::size_t p = 0; p < k; ++p) {
        const float* ap = a0 + p * cs;
        const float x0 = ap[0], x1 = ap[rs], x2 = ap[2 * rs], x3 = ap[3 * rs];
        const float* brow = b + p * n + j0;
        if (jn == kTile) {
          for (std::size_t j = 0; j < kTile; ++j) {
            acc[0][j] = std::fma(x0, brow[j], acc[0][j]);
            acc[1][j] = std::fma(x1, brow[j], acc[1][j]);
            acc[2][j] = std::fma(x2, brow[j], acc[2][j]);
            acc[3][j] = std::fma(x3, brow[j], acc[3][j]);
          }
        } else {
          for (std::size_t j = 0; j < jn; ++j) {
            acc[0][j] = std::fma(x0, brow[j], acc[0][j]);
            acc[1][j] = std::fma(x1, brow[j], acc[1][j]);
            acc[2][j] = std::fma(x2, brow[j], acc[2][j]);
            acc[3][j] = std::fma(x3, brow[j], acc[3][j]);
          }
        }
      }
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < jn; ++j) c[(i + r) * n + j0 + j] = acc[r][j];
    }
    for (; i < m; ++i) {
      float acc[kTile];
      for (std::size_t j = 0; j < jn; ++j) acc[j] = c[i * n + j0 + j];
      const float* arow = a + i * rs;
      for (std::size_t p = 0; p < k; ++p) {
        const float x = arow[p * cs];
        const float* brow = b + p * n + j0;
        for (std::size_t j = 0; j < jn; ++j) acc[j] = std::fma(x, brow[j], acc[j]);
      }
      for (std::size_t j = 0; j < jn; ++j) c[i * n + j0 + j] = acc[j];
    }
  }
}

inline void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
                 bool accumulate) {
  gemm_impl<false>(a, b, c, m, k, n, accumulate);
}

/// C[M,N] (+)= A^T * B with A stored as row-major [K,M].
inline void gemm_at(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
                    bool accumulate) {
  gemm_impl<true>(a, b, c, m, k, n, accumulate);
}

inline std::vector<float> transpose(std::span<const float> x, std::size_t rows, std::size_t cols) {
  std::vector<float> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = x[i * cols + j];
  return t;
}

}  // namespace kernels

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::finish(a.shape(), std::move(out), {&a, &b}, [&](auto) {
    return [ai = a.impl_ptr(), bi = b.impl_ptr()](std::span<const float> g) {
      for (auto* t : {ai.get(), bi.get()}) {
        if (!t->requires_grad) continue;
        auto d = t->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
    };
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::finish(a.shape(), std::move(out), {&a, &b}, [&](auto) {
    return [ai = a.impl_ptr(), bi = b.impl_ptr()](std::span<const float> g) {
      if (ai->requires_grad) {
        auto d = ai->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (bi->requires_grad) {
        auto d = bi->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
      }
    };
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::finish(a.shape(), std::move(out), {&a, &b}, [&](auto) {
    return [ai = a.impl_ptr(), bi = b.impl_ptr()](std::span<const float> g) {
      if (ai->requires_grad) {
        auto d = ai->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        auto d = bi->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * ai->data[i];
      }
    };
  });
}

inline Tensor scale(const Tensor& a, float s) {
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return detail::finish(a.shape(), std::move(out), {&a}, [&](auto) {
    return [ai = a.impl_ptr(), s](std::span<const float> g) {
      auto d = ai->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * s;
    };
  });
}

/// tanh-approximated GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
  std::vector<float> out(x.numel()), th(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float v = x.data()[i];
    th[i] = 1.0f - 2.0f / (1.0f + std::exp(2.0f * kC * (v + 0.044715f * v * v * v)));
    out[i] = 0.5f * v * (1.0f + th[i]);
  }
  return detail::finish(x.shape(), std::move(out), {&x}, [&](auto) {
    return [xi = x.impl_ptr(), th = std::move(th)](std::span<const float> g) {
      auto d = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const float v = xi->data[i];
        const float du = kC * (1.0f + 3.0f * 0.044715f * v * v);
        d[i] += g[i] * (0.5f * (1.0f + th[i]) + 0.5f * v * (1.0f - th[i] * th[i]) * du);
      }
    };
  });
}

/// Forward value is `value`; the gradient passes to `x` unchanged.
inline Tensor straight_through(const Tensor& x, const Tensor& value) {
  detail::require(x.shape() == value.shape(), "straight_through: shape mismatch");
  std::vector<float> out(value.data().begin(), value.data().end());
  return detail::finish(x.shape(), std::move(out), {&x}, [&](auto) {
    return [xi = x.impl_ptr()](std::span<const float> g) {
      auto d = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    };
  });
}

// ------------------------------------------------------------------ reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (float v : x.data()) s += v;
  return detail::finish({1}, {static_cast<float>(s)}, {&x}, [&](auto) {
    return [xi = x.impl_ptr()](std::span<const float> g) {
      auto d = xi->grad_buffer();
      for (auto& v : d) v += g[0];
    };
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0f / static_cast<float>(x.numel())); }

/// mean((a - b)^2) over elements where `weights` (optional, same numel) is
/// nonzero; weighted entries count by their weight.
inline Tensor mse_loss(const Tensor& a, const Tensor& b, std::span<const float> weights = {}) {
  detail::require(a.numel() == b.numel(), "mse_loss: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  detail::require(weights.empty() || weights.size() == a.numel(), "mse_loss: weight size mismatch");
  double acc = 0.0, wsum = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double w = weights.empty() ? 1.0 : weights[i];
    const double d = static_cast<double>(a.data()[i]) - b.data()[i];
    acc += w * d * d;
    wsum += w;
  }
  detail::require(wsum > 0.0, "mse_loss: empty weight set");
  const float norm = static_cast<float>(1.0 / wsum);
  std::vector<float> w(weights.begin(), weights.end());
  return detail::finish({1}, {static_cast<float>(acc / wsum)}, {&a, &b}, [&](auto) {
    return [ai = a.impl_ptr(), bi = b.impl_ptr(), w = std::move(w), norm](std::span<const float> g) {
      const std::size_t n = ai->data.size();
      for (int side = 0; side < 2; ++side) {
        TensorImpl* t = side == 0 ? ai.get() : bi.get();
        if (!t->requires_grad) continue;
        const float sign = side == 0 ? 1.0f : -1.0f;
        auto d = t->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) {
          const float wi = w.empty() ? 1.0f : w[i];
          d[i] += sign * g[0] * 2.0f * wi * norm * (ai->data[i] - bi->data[i]);
        }
      }
    };
  });
}

// -------------------------------------------------------------------- shapes

inline Tensor reshape(const Tensor& x, Shape shape) {
  detail::require(numel_of(shape) == x.numel(),
                  "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<float> out(x.data().begin(), x.data().end());
  return detail::finish(std::move(shape), std::move(out), {&x}, [&](auto) {
    return [xi = x.impl_ptr()](std::span<const float> g) {
      auto d = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    };
  });
}

inline Tensor transpose(const Tensor& x) {
  detail::require(x.rank() == 2, "transpose: rank-2 tensor required, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  return detail::finish({c, r}, kernels::transpose(x.data(), r, c), {&x}, [&](auto) {
    return [xi = x.impl_ptr(), r, c](std::span<const float> g) {
      auto d = xi->grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g[j * r + i];
    };
  });
}

/// Concatenates rank-2 tensors along rows.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t cols = parts.front().dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2 && p.dim(1) == cols, "concat_rows: column mismatch " + shape_str(p.shape()));
    rows += p.dim(0);
  }
  std::vector<float> out;
  out.reserve(rows * cols);
  bool record = false;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    record = record || p.requires_grad();
  }
  Tensor result({rows, cols}, std::move(out));
  if (record && grad_enabled()) {
    result.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorImpl>> ins;
    for (const auto& p : parts) ins.push_back(p.impl_ptr());
    detail::active_tape->record(result.impl_ptr(), [ins = std::move(ins)](std::span<const float> g) {
      std::size_t off = 0;
      for (const auto& t : ins) {
        const std::size_t n = t->data.size();
        if (t->requires_grad) {
          auto d = t->grad_buffer();
          for (std::size_t i = 0; i < n; ++i) d[i] += g[off + i];
        }
        off += n;
      }
    });
  }
  return result;
}

inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require(x.rank() == 2 && begin <= end && end <= x.dim(0), "slice_rows: bad range");
  const std::size_t cols = x.dim(1);
  std::vector<float> out(x.data().begin() + begin * cols, x.data().begin() + end * cols);
  return detail::finish({end - begin, cols}, std::move(out), {&x}, [&](auto) {
    return [xi = x.impl_ptr(), off = begin * cols](std::span<const float> g) {
      auto d = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[off + i] += g[i];
    };
  });
}

// -------------------------------------------------------------------- linear

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<float> out(m * n);
  kernels::gemm(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  return detail::finish({m, n}, std::move(out), {&a, &b}, [&](auto) {
    return [ai = a.impl_ptr(), bi = b.impl_ptr(), m, k, n](std::span<const float> g) {
      if (ai->requires_grad) {
        std::vector<float> local;
        const std::vector<float>* bt = &local;
        if (detail::transpose_cache) {
          auto [it, fresh] = detail::transpose_cache->try_emplace(bi.get());
          if (fresh) it->second = kernels::transpose(bi->data, k, n);
          bt = &it->second;
        } else {
          local = kernels::transpose(bi->data, k, n);
        }
        kernels::gemm(g.data(), bt->data(), ai->grad_buffer().data(), m, n, k, true);
      }
      if (bi->requires_grad) kernels::gemm_at(ai->data.data(), g.data(), bi->grad_buffer().data(), k, m, n, true);
    };
  });
}

/// x[M,N] + bias[N] added to every row.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  detail::require(x.rank() == 2 && bias.numel() == x.dim(1),
                  "add_bias: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<float> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.data()[j];
  return detail::finish(x.shape(), std::move(out), {&x, &bias}, [&](auto) {
    return [xi = x.impl_ptr(), bi = bias.impl_ptr(), m, n](std::span<const float> g) {
      if (xi->requires_grad) {
        auto d = xi->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      if (bi->requires_grad) {
        auto d = bi->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) d[j] += g[i * n + j];
      }
    };
  });
}

inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_bias(matmul(x, weight), bias);
}

// ---------------------------------------------------------------- embeddings

inline Tensor embedding_lookup(const Tensor& table, std::span<const int> indices) {
  detail::require(table.rank() == 2, "embedding_lookup: table must be rank 2");
  const std::size_t v = table.dim(0), c = table.dim(1);
  std::vector<float> out(indices.size() * c);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int idx = indices[i];
    if (idx < 0 || static_cast<std::size_t>(idx) >= v)
      throw IndexError("embedding_lookup: index " + std::to_string(idx) + " outside [0, " + std::to_string(v) + ")");
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(idx * c), c, out.begin() + i * c);
  }
  std::vector<int> idx(indices.begin(), indices.end());
  return detail::finish({indices.size(), c}, std::move(out), {&table}, [&](auto) {
    return [ti = table.impl_ptr(), idx = std::move(idx), c](std::span<const float> g) {
      auto d = ti->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) d[static_cast<std::size_t>(idx[i]) * c + j] += g[i * c + j];
    };
  });
}

// --------------------------------------------------------------------- norms

/// Per-row normalization of x[M,N] followed by gamma*x + beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f) {
  detail::require(x.rank() == 2 && gamma.numel() == x.dim(1) && beta.numel() == x.dim(1),
                  "layer_norm: " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<float> out(m * n), xhat(m * n), rstd(m);
  for (std::size_t i = 0; i < m; ++i) {
    const float* row = x.data().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const float rs = static_cast<float>(1.0 / std::sqrt(var + eps));
    rstd[i] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      const float h = (row[j] - static_cast<float>(mu)) * rs;
      xhat[i * n + j] = h;
      out[i * n + j] = h * gamma.data()[j] + beta.data()[j];
    }
  }
  return detail::finish(x.shape(), std::move(out), {&x, &gamma, &beta}, [&](auto) {
    return [xi = x.impl_ptr(), gi = gamma.impl_ptr(), bi = beta.impl_ptr(), xhat = std::move(xhat),
            rstd = std::move(rstd), m, n](std::span<const float> g) {
      if (gi->requires_grad) {
        auto d = gi->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) d[j] += g[i * n + j] * xhat[i * n + j];
      }
      if (bi->requires_grad) {
        auto d = bi->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) d[j] += g[i * n + j];
      }
      if (xi->requires_grad) {
        auto d = xi->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          float mean_dh = 0.0f, mean_dh_h = 0.0f;
          for (std::size_t j = 0; j < n; ++j) {
            const float dh = g[i * n + j] * gi->data[j];
            mean_dh += dh;
            mean_dh_h += dh * xhat[i * n + j];
          }
          mean_dh /= static_cast<float>(n);
          mean_dh_h /= static_cast<float>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const float dh = g[i * n + j] * gi->data[j];
            d[i * n + j] += rstd[i] * (dh - mean_dh - xhat[i * n + j] * mean_dh_h);
          }
        }
      }
    };
  });
}

// ---------------------------------------------------------------------- loss

/// Mean over rows of -log softmax(logits)[i, targets[i]].
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets) {
  detail::require(logits.rank() == 2 && logits.dim(0) == targets.size(),
                  "softmax_cross_entropy: " + shape_str(logits.shape()) + " vs " +
                      std::to_string(targets.size()) + " targets");
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  std::vector<float> probs(n * v);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= v)
      throw IndexError("softmax_cross_entropy: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(v) + ")");
    const float* row = logits.data().data() + i * v;
    const float mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    const double lse = std::log(z) + mx;
    total += lse - row[t];
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] = static_cast<float>(std::exp(row[j] - lse));
  }
  std::vector<int> tg(targets.begin(), targets.end());
  return detail::finish({1}, {static_cast<float>(total / static_cast<double>(n))}, {&logits}, [&](auto) {
    return [li = logits.impl_ptr(), probs = std::move(probs), tg = std::move(tg), n, v](std::span<const float> g) {
      auto d = li->grad_buffer();
      const float s = g[0] / static_cast<float>(n);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < v; ++j) d[i * v + j] += s * probs[i * v + j];
        d[i * v + static_cast<std::size_t>(tg[i])] -= s;
      }
    };
  });
}

// ------------------------------------------------------------------- spatial

namespace detail {

struct LerpTap {
  std::size_t i0, i1;
  float w1;  // weight of i1; i0 gets 1 - w1
};

/// Align-corners sample positions. A single output sample sits at the input
/// center, where the align-corners ratio is undefined.
inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double src = out == 1 ? 0.5 * static_cast<double>(in - 1)
                                : static_cast<double>(o) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
    std::size_t i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, static_cast<float>(src - static_cast<double>(i0))};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of x[C,h,w] to [C,out_h,out_w] with the align-corners
/// convention.
inline Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  detail::require(x.rank() == 3 && out_h >= 1 && out_w >= 1 && x.dim(1) >= 1 && x.dim(2) >= 1,
                  "resize_bilinear: bad shape " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const auto ty = detail::lerp_taps(h, out_h);
  const auto tx = detail::lerp_taps(w, out_w);
  std::vector<float> out(c * out_h * out_w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const float* src = x.data().data() + ch * h * w;
    float* dst = out.data() + ch * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& py = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& px = tx[ox];
        const float a = src[py.i0 * w + px.i0], b = src[py.i0 * w + px.i1];
        const float c0 = src[py.i1 * w + px.i0], d = src[py.i1 * w + px.i1];
        const float top = a + px.w1 * (b - a);
        const float bot = c0 + px.w1 * (d - c0);
        dst[oy * out_w + ox] = top + py.w1 * (bot - top);
      }
    }
  }
  return detail::finish({c, out_h, out_w}, std::move(out), {&x}, [&](auto) {
    return [xi = x.impl_ptr(), ty, tx, c, h, w, out_h, out_w](std::span<const float> g) {
      auto d = xi->grad_buffer();
      for (std::size_t ch = 0; ch < c; ++ch) {
        float* dsrc = d.data() + ch * h * w;
        const float* gd = g.data() + ch * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto& py = ty[oy];
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto& px = tx[ox];
            const float gv = gd[oy * out_w + ox];
            const float gt = gv * (1.0f - py.w1), gb = gv * py.w1;
            dsrc[py.i0 * w + px.i0] += gt * (1.0f - px.w1);
            dsrc[py.i0 * w + px.i1] += gt * px.w1;
            dsrc[py.i1 * w + px.i0] += gb * (1.0f - px.w1);
            dsrc[py.i1 * w + px.i1] += gb * px.w1;
          }
        }
      }
    };
  });
}

/// 2-D cross-correlation: x[Cin,H,W], weight[Cout,Cin,kh,kw], bias[Cout].
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride = 1,
                     std::size_t pad = 0) {
  detail::require(x.rank() == 3 && weight.rank() == 4 && weight.dim(1) == x.dim(0) && bias.numel() == weight.dim(0) &&
                      stride >= 1,
                  "conv2d: input " + shape_str(x.shape()) + " weight " + shape_str(weight.shape()));
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  detail::require(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d: kernel larger than padded input");
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  const std::size_t kdim = cin * kh * kw, npix = oh * ow;

  // cols[kdim, npix]
  std::vector<float> cols(kdim * npix, 0.0f);
  const float* xs = x.data().data();
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx) {
        float* row = cols.data() + ((ci * kh + ky) * kw + kx) * npix;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            row[oy * ow + ox] = xs[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
          }
        }
      }

  std::vector<float> out(cout * npix);
  for (std::size_t co = 0; co < cout; ++co) std::fill_n(out.begin() + co * npix, npix, bias.data()[co]);
  kernels::gemm(weight.data().data(), cols.data(), out.data(), cout, kdim, npix, true);

  return detail::finish({cout, oh, ow}, std::move(out), {&x, &weight, &bias}, [&](auto) {
    return [xi = x.impl_ptr(), wi = weight.impl_ptr(), bi = bias.impl_ptr(), cols = std::move(cols), cin, h, w, cout,
            kh, kw, oh, ow, stride, pad, kdim, npix](std::span<const float> g) {
      if (bi->requires_grad) {
        auto d = bi->grad_buffer();
        for (std::size_t co = 0; co < cout; ++co)
          for (std::size_t p = 0; p < npix; ++p) d[co] += g[co * npix + p];
      }
      if (wi->requires_grad) {
        const auto colst = kernels::transpose(cols, kdim, npix);
        kernels::gemm(g.data(), colst.data(), wi->grad_buffer().data(), cout, npix, kdim, true);
      }
      if (xi->requires_grad) {
        const auto wt = kernels::transpose(wi->data, cout, kdim);
        std::vector<float> dcols(kdim * npix);
        kernels::gemm(wt.data(), g.data(), dcols.data(), kdim, cout, npix, false);
        auto d = xi->grad_buffer();
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const float* row = dcols.data() + ((ci * kh + ky) * kw + kx) * npix;
              for (std::size_t oy = 0; oy < oh; ++oy) {
                const std::ptrdiff_t iy =
                    static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t ox = 0; ox < ow; ++ox) {
                  const std::ptrdiff_t ix =
                      static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                  d[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] += row[oy * ow + ox];
                }
              }
            }
      }
    };
  });
}

// ----------------------------------------------------------------- attention

/// Multi-head scaled dot-product attention. q[Tq,D], k,v[Tk,D]; D splits into
/// `heads` contiguous slices. `allowed`, when given, is a row-major [Tq,Tk]
/// 0/1 mask; every query row must allow at least one key.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                        std::span<const std::uint8_t> allowed = {}) {
  detail::require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2 && k.shape() == v.shape() && q.dim(1) == k.dim(1) &&
                      heads >= 1 && q.dim(1) % heads == 0,
                  "attention: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) + " v " +
                      shape_str(v.shape()));
  const std::size_t tq = q.dim(0), tk = k.dim(0), dm = q.dim(1), dh = dm / heads;
  detail::require(allowed.empty() || allowed.size() == tq * tk, "attention: mask size mismatch");
  const float sc = 1.0f / std::sqrt(static_cast<float>(dh));

  // Column slice [rows, dh] of head hd, optionally transposed to [dh, rows].
  auto head_slice = [dm, dh](std::span<const float> x, std::size_t rows, std::size_t hd, bool transposed) {
    std::vector<float> out(rows * dh);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t e = 0; e < dh; ++e) {
        const float val = x[r * dm + hd * dh + e];
        if (transposed)
          out[e * rows + r] = val;
        else
          out[r * dh + e] = val;
      }
    return out;
  };

  std::vector<float> probs(heads * tq * tk, 0.0f);
  std::vector<float> out(tq * dm, 0.0f);
  std::vector<float> scores(tq * tk), oh(tq * dh);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    const auto qh = head_slice(q.data(), tq, hd, false);
    const auto kt = head_slice(k.data(), tk, hd, true);
    const auto vh = head_slice(v.data(), tk, hd, false);
    kernels::gemm(qh.data(), kt.data(), scores.data(), tq, dh, tk, false);
    float* p = probs.data() + hd * tq * tk;
    for (std::size_t i = 0; i < tq; ++i) {
      const float* s = scores.data() + i * tk;
      float mx = -std::numeric_limits<float>::infinity();
      bool any = false;
      for (std::size_t j = 0; j < tk; ++j)
        if (allowed.empty() || allowed[i * tk + j]) {
          mx = std::max(mx, s[j] * sc);
          any = true;
        }
      detail::require(any, "attention: query row with no allowed key");
      float* pr = p + i * tk;
      double z = 0.0;
      for (std::size_t j = 0; j < tk; ++j) {
        pr[j] = (allowed.empty() || allowed[i * tk + j]) ? std::exp(s[j] * sc - mx) : 0.0f;
        z += pr[j];
      }
      const float inv = static_cast<float>(1.0 / z);
      for (std::size_t j = 0; j < tk; ++j) pr[j] *= inv;
    }
    kernels::gemm(p, vh.data(), oh.data(), tq, tk, dh, false);
    for (std::size_t i = 0; i < tq; ++i)
      for (std::size_t e = 0; e < dh; ++e) out[i * dm + hd * dh + e] = oh[i * dh + e];
  }

  return detail::finish({tq, dm}, std::move(out), {&q, &k, &v}, [&](auto) {
    return [qi = q.impl_ptr(), ki = k.impl_ptr(), vi = v.impl_ptr(), probs = std::move(probs), head_slice, heads, tq,
            tk, dm, dh, sc](std::span<const float> g) {
      std::vector<float> dp(tq * tk), ds(tq * tk), dqh(tq * dh), dkh(tk * dh), dvh(tk * dh);
      for (std::size_t hd = 0; hd < heads; ++hd) {
        const float* p = probs.data() + hd * tq * tk;
        const auto goh = head_slice(g, tq, hd, false);
        const auto vt = head_slice(vi->data, tk, hd, true);
        kernels::gemm(goh.data(), vt.data(), dp.data(), tq, dh, tk, false);
        for (std::size_t i = 0; i < tq; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < tk; ++j) dot += static_cast<double>(p[i * tk + j]) * dp[i * tk + j];
          for (std::size_t j = 0; j < tk; ++j)
            ds[i * tk + j] = static_cast<float>(p[i * tk + j] * (dp[i * tk + j] - dot)) * sc;
        }
        if (vi->requires_grad) {
          kernels::gemm_at(p, goh.data(), dvh.data(), tk, tq, dh, false);
          auto d = vi->grad_buffer();
          for (std::size_t j = 0; j < tk; ++j)
            for (std::size_t e = 0; e < dh; ++e) d[j * dm + hd * dh + e] += dvh[j * dh + e];
        }
        if (qi->requires_grad) {
          const auto kh = head_slice(ki->data, tk, hd, false);
          kernels::gemm(ds.data(), kh.data(), dqh.data(), tq, tk, dh, false);
          auto d = qi->grad_buffer();
          for (std::size_t i = 0; i < tq; ++i)
            for (std::size_t e = 0; e < dh; ++e) d[i * dm + hd * dh + e] += dqh[i * dh + e];
        }
        if (ki->requires_grad) {
          const auto qh = head_slice(qi->data, tq, hd, false);
          kernels::gemm_at(ds.data(), qh.data(), dkh.data(), tk, tq, dh, false);
          auto d = ki->grad_buffer();
          for (std::size_t j = 0; j < tk; ++j)
            for (std::size_t e = 0; e < dh; ++e) d[j * dm + hd * dh + e] += dkh[j * dh + e];
        }
      }
    };
  });
}

}  // namespace depthart
