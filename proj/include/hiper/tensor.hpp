#pragma once

// Dense row-major float64 tensors with tape-based reverse-mode autodiff.
//
// Every op is a free function. When any input requires grad and recording is
// enabled, the op appends a node to the thread's Graph; backward() walks the
// graph in exact reverse append order and then clears it.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>

#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <vector>

#include "hiper/errors.hpp"
#include "hiper/random.hpp"

namespace hiper {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct TensorData {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty means absent
  bool requires_grad = false;

  std::vector<double>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

using DataPtr = std::shared_ptr<TensorData>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : p_(std::make_shared<detail::TensorData>()) {
    p_->data.assign(numel(shape), fill);
    p_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> values) : p_(std::make_shared<detail::TensorData>()) {
    if (numel(shape) != values.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    p_->shape = std::move(shape);
    p_->data = std::move(values);
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    auto n = numel(shape);
    return Tensor(std::move(shape), rng.normal_vector(n, stddev));
  }

  static Tensor from_impl(detail::DataPtr p) {
    Tensor t;
    t.p_ = std::move(p);
    return t;
  }

  bool defined() const { return static_cast<bool>(p_); }
  const detail::DataPtr& impl() const { return p_; }

  const Shape& shape() const { return p_->shape; }
  std::size_t rank() const { return p_->shape.size(); }
  std::size_t dim(std::size_t i) const { return p_->shape.at(i); }
  std::size_t size() const { return p_->data.size(); }

  std::span<double> data() { return p_->data; }
  std::span<const double> data() const { return p_->data; }
  const std::vector<double>& values() const { return p_->data; }
  double at(std::size_t i) const { return p_->data.at(i); }

  double item() const {
    if (size() != 1) throw ContractError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
    return p_->data[0];
  }

  bool requires_grad() const { return p_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    p_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return p_->grad.size() == p_->data.size() && !p_->data.empty(); }
  std::span<const double> grad() const { return p_->grad; }
  std::span<double> grad_mut() { return p_->grad_buffer(); }
  void zero_grad() {
    if (!p_->grad.empty()) std::fill(p_->grad.begin(), p_->grad.end(), 0.0);
  }
  void clear_grad() { p_->grad.clear(); }

  // Deep copy that does not require grad.
  Tensor clone() const { return Tensor(p_->shape, p_->data); }

  bool is_same(const Tensor& other) const { return p_ == other.p_; }

 private:
  detail::DataPtr p_;
};

enum class OpKind {
  add,
  sub,
  mul,
  scale,
  add_bias,
  matmul,
  transpose,
  conv2d,
  softmax,
  group_norm,
  silu,
  upsample,
  avg_pool,
  reshape,
  slice,
  concat,
  gather_columns,
  sum,
  mean,
  mse,
};

inline std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::add_bias: return "add_bias";
    case OpKind::matmul: return "matmul";
    case OpKind::transpose: return "transpose";
    case OpKind::conv2d: return "conv2d";
    case OpKind::softmax: return "softmax";
    case OpKind::group_norm: return "group_norm";
    case OpKind::silu: return "silu";
    case OpKind::upsample: return "upsample";
    case OpKind::avg_pool: return "avg_pool";
    case OpKind::reshape: return "reshape";
    case OpKind::slice: return "slice";
    case OpKind::concat: return "concat";
    case OpKind::gather_columns: return "gather_columns";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::mse: return "mse";
  }
  return "unknown";
}

// Append-only tape. One per thread.
class Graph {
 public:
  using BackwardFn = std::function<void(const std::vector<double>& grad_out)>;

  struct Node {
    OpKind kind;
    std::vector<detail::DataPtr> inputs;
    detail::DataPtr output;
    BackwardFn backward;
  };

  static Graph& current() {
    static const bool heap_tuned = keep_freed_buffers();
    (void)heap_tuned;
    thread_local Graph graph;
    return graph;
  }

  // Intermediate buffers are large and short-lived. Left to the defaults,
  // glibc maps each one fresh and hands it back on free, so every training
  // step pays page faults for all of them again.
  static bool keep_freed_buffers() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
    return true;
  }

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }
  std::span<const Node> nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

  void record(Node node) { nodes_.push_back(std::move(node)); }

 private:
  friend class NoGradGuard;
  std::vector<Node> nodes_;
  bool recording_ = true;
};

// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(Graph::current().recording_) { Graph::current().recording_ = false; }
  ~NoGradGuard() { Graph::current().recording_ = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

// Grad buffer of an input if it participates in differentiation, else nullptr.
inline std::vector<double>* grad_of(const DataPtr& p) {
  return p->requires_grad ? &p->grad_buffer() : nullptr;
}

inline Tensor finish(OpKind kind, Shape shape, std::vector<double> values, std::vector<DataPtr> inputs,
                     Graph::BackwardFn backward) {
  Tensor out(std::move(shape), std::move(values));
  auto& graph = Graph::current();
  bool any = std::any_of(inputs.begin(), inputs.end(), [](const DataPtr& p) { return p->requires_grad; });
  if (any && graph.recording()) {
    out.set_requires_grad(true);
    graph.record(Graph::Node{kind, std::move(inputs), out.impl(), std::move(backward)});
  }
  return out;
}

[[noreturn]] inline void shape_mismatch(OpKind kind, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op_name(kind)) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline void require_defined(OpKind kind, const Tensor& t) {
  if (!t.defined()) throw ContractError(std::string(op_name(kind)) + ": undefined tensor");
}

typedef double vec8 __attribute__((vector_size(64)));

// Register-blocked R x (8*V) tile of C += A * B over the full k extent, with
// element (r, p) of A at a[r * rs + p * ps].
template <int R, int V>
inline void gemm_tile(std::size_t n, std::size_t k, const double* __restrict a, std::size_t rs, std::size_t ps,
                      const double* __restrict b, double* __restrict c) {
  vec8 acc[R][V];
  for (int r = 0; r < R; ++r)
    for (int v = 0; v < V; ++v) std::memcpy(&acc[r][v], c + r * n + v * 8, sizeof(vec8));
  for (std::size_t p = 0; p < k; ++p) {
    vec8 bv[V];
    for (int v = 0; v < V; ++v) std::memcpy(&bv[v], b + p * n + v * 8, sizeof(vec8));
    const double* ap = a + p * ps;
    for (int r = 0; r < R; ++r) {
      const double av = ap[r * rs];
      for (int v = 0; v < V; ++v) acc[r][v] += av * bv[v];
    }
  }
  for (int r = 0; r < R; ++r)
    for (int v = 0; v < V; ++v) std::memcpy(c + r * n + v * 8, &acc[r][v], sizeof(vec8));
}

template <int R>
inline void gemm_column(std::size_t n, std::size_t k, const double* __restrict a, std::size_t rs, std::size_t ps,
                        const double* __restrict b, double* __restrict c) {
  double acc[R];
  for (int r = 0; r < R; ++r) acc[r] = c[r * n];
  for (std::size_t p = 0; p < k; ++p) {
    const double bv = b[p * n];
    for (int r = 0; r < R; ++r) acc[r] += a[r * rs + p * ps] * bv;
  }
  for (int r = 0; r < R; ++r) c[r * n] = acc[r];
}

template <int R>
inline void gemm_rows(std::size_t n, std::size_t k, const double* a, std::size_t rs, std::size_t ps, const double* b,
                      double* c) {
  std::size_t j = 0;
  for (; j + 16 <= n; j += 16) gemm_tile<R, 2>(n, k, a, rs, ps, b + j, c + j);
  for (; j + 8 <= n; j += 8) gemm_tile<R, 1>(n, k, a, rs, ps, b + j, c + j);
  for (; j < n; ++j) gemm_column<R>(n, k, a, rs, ps, b + j, c + j);
}

// C[m x n] += A * B with A's element (i, p) at a[i * rs + p * ps] and B, C
// row-major. Summation order over k is fixed, so results are bit-reproducible.
inline void gemm_strided(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t rs,
                         std::size_t ps, const double* b, double* c) {
  std::size_t i = 0;
  for (; i + 8 <= m; i += 8) gemm_rows<8>(n, k, a + i * rs, rs, ps, b, c + i * n);
  for (; i < m; ++i) gemm_rows<1>(n, k, a + i * rs, rs, ps, b, c + i * n);
}

// C[m x n] += A[m x k] * B[k x n], all row-major.
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  gemm_strided(m, n, k, a, k, 1, b, c);
}

inline std::vector<double> transposed(const double* a, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

// C[m x n] += A^T * B with A stored [k x m], B stored [k x n]
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  gemm_strided(m, n, k, a, 1, m, b, c);
}

// C[m x n] += A[m x k] * B^T with B stored [n x k]
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  auto bt = transposed(b, n, k);
  gemm_nn(m, n, k, a, bt.data(), c);
}

inline void add_into(std::vector<double>& dst, const std::vector<double>& src, double factor = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_defined(OpKind::add, a);
  detail::require_defined(OpKind::add, b);
  if (a.shape() != b.shape()) detail::shape_mismatch(OpKind::add, a.shape(), b.shape());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto pa = a.impl(), pb = b.impl();
  return detail::finish(OpKind::add, a.shape(), std::move(out), {pa, pb}, [pa, pb](const std::vector<double>& g) {
    if (auto* ga = detail::grad_of(pa)) detail::add_into(*ga, g);
    if (auto* gb = detail::grad_of(pb)) detail::add_into(*gb, g);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_defined(OpKind::sub, a);
  detail::require_defined(OpKind::sub, b);
  if (a.shape() != b.shape()) detail::shape_mismatch(OpKind::sub, a.shape(), b.shape());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto pa = a.impl(), pb = b.impl();
  return detail::finish(OpKind::sub, a.shape(), std::move(out), {pa, pb}, [pa, pb](const std::vector<double>& g) {
    if (auto* ga = detail::grad_of(pa)) detail::add_into(*ga, g);
    if (auto* gb = detail::grad_of(pb)) detail::add_into(*gb, g, -1.0);
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_defined(OpKind::mul, a);
  detail::require_defined(OpKind::mul, b);
  if (a.shape() != b.shape()) detail::shape_mismatch(OpKind::mul, a.shape(), b.shape());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto pa = a.impl(), pb = b.impl();
  return detail::finish(OpKind::mul, a.shape(), std::move(out), {pa, pb}, [pa, pb](const std::vector<double>& g) {
    if (auto* ga = detail::grad_of(pa))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * pb->data[i];
    if (auto* gb = detail::grad_of(pb))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * pa->data[i];
  });
}

inline Tensor scale(const Tensor& a, double s) {
  detail::require_defined(OpKind::scale, a);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  auto pa = a.impl();
  return detail::finish(OpKind::scale, a.shape(), std::move(out), {pa}, [pa, s](const std::vector<double>& g) {
    if (auto* ga = detail::grad_of(pa)) detail::add_into(*ga, g, s);
  });
}

// x[..., C] + bias[C], broadcast over all leading positions.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  detail::require_defined(OpKind::add_bias, x);
  detail::require_defined(OpKind::add_bias, bias);
  if (bias.rank() != 1 || x.rank() == 0 || x.shape().back() != bias.size())
    detail::shape_mismatch(OpKind::add_bias, x.shape(), bias.shape());
  const std::size_t c = bias.size();
  std::vector<double> out(x.size());
  const auto* xd = x.data().data();
  const auto* bd = bias.data().data();
  for (std::size_t p = 0; p < out.size(); p += c)
    for (std::size_t j = 0; j < c; ++j) out[p + j] = xd[p + j] + bd[j];
  auto px = x.impl(), pb = bias.impl();
  return detail::finish(OpKind::add_bias, x.shape(), std::move(out), {px, pb},
                        [px, pb, c](const std::vector<double>& g) {
                          if (auto* gx = detail::grad_of(px)) detail::add_into(*gx, g);
                          if (auto* gb = detail::grad_of(pb))
                            for (std::size_t p = 0; p < g.size(); p += c)
                              for (std::size_t j = 0; j < c; ++j) (*gb)[j] += g[p + j];
                        });
}

inline Tensor silu(const Tensor& x) {
  detail::require_defined(OpKind::silu, x);
  std::vector<double> out(x.size()), sig(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    sig[i] = 1.0 / (1.0 + std::exp(-v));
    out[i] = v * sig[i];
  }
  auto px = x.impl();
  return detail::finish(OpKind::silu, x.shape(), std::move(out), {px},
                        [px, sig = std::move(sig)](const std::vector<double>& g) {
                          if (auto* gx = detail::grad_of(px))
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              const double s = sig[i];
                              (*gx)[i] += g[i] * s * (1.0 + px->data[i] * (1.0 - s));
                            }
                        });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_defined(OpKind::matmul, a);
  detail::require_defined(OpKind::matmul, b);
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    detail::shape_mismatch(OpKind::matmul, a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
  auto pa = a.impl(), pb = b.impl();
  return detail::finish(OpKind::matmul, {m, n}, std::move(out), {pa, pb},
                        [pa, pb, m, n, k](const std::vector<double>& g) {
                          if (auto* ga = detail::grad_of(pa))
                            detail::gemm_nt(m, k, n, g.data(), pb->data.data(), ga->data());
                          if (auto* gb = detail::grad_of(pb))
                            detail::gemm_tn(k, n, m, pa->data.data(), g.data(), gb->data());
                        });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_defined(OpKind::transpose, a);
  if (a.rank() != 2) throw DimensionError("transpose: expected rank 2, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  auto out = detail::transposed(a.data().data(), r, c);
  auto pa = a.impl();
  return detail::finish(OpKind::transpose, {c, r}, std::move(out), {pa}, [pa, r, c](const std::vector<double>& g) {
    if (auto* ga = detail::grad_of(pa))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += g[j * r + i];
  });
}

// x: [H, W, Cin], w: [k, k, Cin, Cout], bias: [Cout]. Stride 1, zero padding k/2.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias) {
  detail::require_defined(OpKind::conv2d, x);
  detail::require_defined(OpKind::conv2d, w);
  detail::require_defined(OpKind::conv2d, bias);
  if (x.rank() != 3 || w.rank() != 4 || w.dim(0) != w.dim(1) || w.dim(0) % 2 == 0 || w.dim(2) != x.dim(2))
    detail::shape_mismatch(OpKind::conv2d, x.shape(), w.shape());
  if (bias.rank() != 1 || bias.dim(0) != w.dim(3)) detail::shape_mismatch(OpKind::conv2d, w.shape(), bias.shape());
  const std::size_t h = x.dim(0), wd = x.dim(1), cin = x.dim(2), k = w.dim(0), cout = w.dim(3);
  const std::size_t pad = k / 2, npix = h * wd, patch = k * k * cin;
  const auto* xd = x.data().data();

  std::vector<double> cols;
  if (k == 1) {
    cols.assign(xd, xd + x.size());
  } else {
    cols.assign(npix * patch, 0.0);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < wd; ++xx) {
        double* dst = cols.data() + (y * wd + xx) * patch;
        for (std::size_t ky = 0; ky < k; ++ky) {
          const auto sy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(pad);
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const auto sx = static_cast<std::ptrdiff_t>(xx + kx) - static_cast<std::ptrdiff_t>(pad);
            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(wd)) continue;
            const double* src = xd + (static_cast<std::size_t>(sy) * wd + static_cast<std::size_t>(sx)) * cin;
            std::copy(src, src + cin, dst + (ky * k + kx) * cin);
          }
        }
      }
  }

  std::vector<double> out(npix * cout);
  for (std::size_t p = 0; p < npix; ++p) std::copy(bias.data().begin(), bias.data().end(), out.begin() + p * cout);
  detail::gemm_nn(npix, cout, patch, cols.data(), w.data().data(), out.data());

  auto px = x.impl(), pw = w.impl(), pb = bias.impl();
  return detail::finish(
      OpKind::conv2d, {h, wd, cout}, std::move(out), {px, pw, pb},
      [px, pw, pb, cols = std::move(cols), h, wd, cin, k, cout, pad, npix, patch](const std::vector<double>& g) {
        if (auto* gb = detail::grad_of(pb))
          for (std::size_t p = 0; p < npix; ++p)
            for (std::size_t c = 0; c < cout; ++c) (*gb)[c] += g[p * cout + c];
        if (auto* gw = detail::grad_of(pw)) detail::gemm_tn(patch, cout, npix, cols.data(), g.data(), gw->data());
        if (auto* gx = detail::grad_of(px)) {
          if (k == 1) {
            detail::gemm_nt(npix, cin, cout, g.data(), pw->data.data(), gx->data());
            return;
          }
          std::vector<double> dcols(npix * patch, 0.0);
          detail::gemm_nt(npix, patch, cout, g.data(), pw->data.data(), dcols.data());
          for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < wd; ++xx) {
              const double* src = dcols.data() + (y * wd + xx) * patch;
              for (std::size_t ky = 0; ky < k; ++ky) {
                const auto sy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(pad);
                if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const auto sx = static_cast<std::ptrdiff_t>(xx + kx) - static_cast<std::ptrdiff_t>(pad);
                  if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(wd)) continue;
                  double* dst = gx->data() + (static_cast<std::size_t>(sy) * wd + static_cast<std::size_t>(sx)) * cin;
                  const double* s = src + (ky * k + kx) * cin;
                  for (std::size_t c = 0; c < cin; ++c) dst[c] += s[c];
                }
              }
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization and attention helpers

inline Tensor softmax(const Tensor& x) {
  detail::require_defined(OpKind::softmax, x);
  if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError("softmax: empty last axis " + shape_str(x.shape()));
  const std::size_t n = x.shape().back(), rows = x.size() / n;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  auto px = x.impl();
  auto y = out;
  return detail::finish(OpKind::softmax, x.shape(), std::move(out), {px},
                        [px, y = std::move(y), n, rows](const std::vector<double>& g) {
                          auto* gx = detail::grad_of(px);
                          if (!gx) return;
                          for (std::size_t r = 0; r < rows; ++r) {
                            const double* yr = y.data() + r * n;
                            const double* gr = g.data() + r * n;
                            double dot = 0.0;
                            for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
                            for (std::size_t j = 0; j < n; ++j) (*gx)[r * n + j] += yr[j] * (gr[j] - dot);
                          }
                        });
}

// Normalizes over (all leading positions) x (channels of one group); last axis is channels.
inline Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t groups,
                         double eps = 1e-5) {
  detail::require_defined(OpKind::group_norm, x);
  if (x.rank() == 0) throw DimensionError("group_norm: rank-0 input");
  const std::size_t c = x.shape().back();
  if (groups == 0 || c % groups != 0)
    throw DimensionError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                         std::to_string(groups) + " groups");
  if (gamma.shape() != Shape{c}) detail::shape_mismatch(OpKind::group_norm, x.shape(), gamma.shape());
  if (beta.shape() != Shape{c}) detail::shape_mismatch(OpKind::group_norm, x.shape(), beta.shape());
  const std::size_t npos = x.size() / c, cg = c / groups;
  const double count = static_cast<double>(npos * cg);
  const auto* xd = x.data().data();

  std::vector<double> xhat(x.size()), inv_std(groups), out(x.size());
  for (std::size_t gi = 0; gi < groups; ++gi) {
    double mu = 0.0;
    for (std::size_t p = 0; p < npos; ++p)
      for (std::size_t j = 0; j < cg; ++j) mu += xd[p * c + gi * cg + j];
    mu /= count;
    double var = 0.0;
    for (std::size_t p = 0; p < npos; ++p)
      for (std::size_t j = 0; j < cg; ++j) {
        const double d = xd[p * c + gi * cg + j] - mu;
        var += d * d;
      }
    var /= count;
    inv_std[gi] = 1.0 / std::sqrt(var + eps);
    for (std::size_t p = 0; p < npos; ++p)
      for (std::size_t j = 0; j < cg; ++j) {
        const std::size_t idx = p * c + gi * cg + j;
        xhat[idx] = (xd[idx] - mu) * inv_std[gi];
      }
  }
  const auto* gd = gamma.data().data();
  const auto* bd = beta.data().data();
  for (std::size_t p = 0; p < out.size(); p += c)
    for (std::size_t j = 0; j < c; ++j) out[p + j] = xhat[p + j] * gd[j] + bd[j];

  auto px = x.impl(), pg = gamma.impl(), pb = beta.impl();
  return detail::finish(
      OpKind::group_norm, x.shape(), std::move(out), {px, pg, pb},
      [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std), c, cg, npos, groups,
       count](const std::vector<double>& g) {
        if (auto* gb = detail::grad_of(pb))
          for (std::size_t p = 0; p < g.size(); p += c)
            for (std::size_t j = 0; j < c; ++j) (*gb)[j] += g[p + j];
        if (auto* gg = detail::grad_of(pg))
          for (std::size_t p = 0; p < g.size(); p += c)
            for (std::size_t j = 0; j < c; ++j) (*gg)[j] += g[p + j] * xhat[p + j];
        auto* gx = detail::grad_of(px);
        if (!gx) return;
        const auto& gam = pg->data;
        for (std::size_t gi = 0; gi < groups; ++gi) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t p = 0; p < npos; ++p)
            for (std::size_t j = 0; j < cg; ++j) {
              const std::size_t idx = p * c + gi * cg + j;
              const double d = g[idx] * gam[gi * cg + j];
              s1 += d;
              s2 += d * xhat[idx];
            }
          s1 /= count;
          s2 /= count;
          for (std::size_t p = 0; p < npos; ++p)
            for (std::size_t j = 0; j < cg; ++j) {
              const std::size_t idx = p * c + gi * cg + j;
              const double d = g[idx] * gam[gi * cg + j];
              (*gx)[idx] += inv_std[gi] * (d - s1 - xhat[idx] * s2);
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Resampling on [H, W, C]

namespace detail {

struct LerpTap {
  std::size_t lo, hi;
  double w_hi;
};

// Half-pixel-centred 2x linear interpolation taps, edges clamped.
inline std::vector<LerpTap> upsample_taps(std::size_t in) {
  std::vector<LerpTap> taps(2 * in);
  for (std::size_t o = 0; o < 2 * in; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

inline Tensor upsample2x(const Tensor& x) {
  detail::require_defined(OpKind::upsample, x);
  if (x.rank() != 3 || x.dim(0) == 0 || x.dim(1) == 0)
    throw DimensionError("upsample: expected [H,W,C], got " + shape_str(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  auto ty = detail::upsample_taps(h), tx = detail::upsample_taps(w);
  std::vector<double> out(4 * h * w * c);
  const auto* xd = x.data().data();
  for (std::size_t oy = 0; oy < 2 * h; ++oy)
    for (std::size_t ox = 0; ox < 2 * w; ++ox) {
      const auto& a = ty[oy];
      const auto& b = tx[ox];
      const double w00 = (1 - a.w_hi) * (1 - b.w_hi), w01 = (1 - a.w_hi) * b.w_hi;
      const double w10 = a.w_hi * (1 - b.w_hi), w11 = a.w_hi * b.w_hi;
      double* o = out.data() + (oy * 2 * w + ox) * c;
      const double* p00 = xd + (a.lo * w + b.lo) * c;
      const double* p01 = xd + (a.lo * w + b.hi) * c;
      const double* p10 = xd + (a.hi * w + b.lo) * c;
      const double* p11 = xd + (a.hi * w + b.hi) * c;
      for (std::size_t k = 0; k < c; ++k) o[k] = w00 * p00[k] + w01 * p01[k] + w10 * p10[k] + w11 * p11[k];
    }
  auto px = x.impl();
  return detail::finish(OpKind::upsample, {2 * h, 2 * w, c}, std::move(out), {px},
                        [px, ty = std::move(ty), tx = std::move(tx), h, w, c](const std::vector<double>& g) {
                          auto* gx = detail::grad_of(px);
                          if (!gx) return;
                          for (std::size_t oy = 0; oy < 2 * h; ++oy)
                            for (std::size_t ox = 0; ox < 2 * w; ++ox) {
                              const auto& a = ty[oy];
                              const auto& b = tx[ox];
                              const double w00 = (1 - a.w_hi) * (1 - b.w_hi), w01 = (1 - a.w_hi) * b.w_hi;
                              const double w10 = a.w_hi * (1 - b.w_hi), w11 = a.w_hi * b.w_hi;
                              const double* go = g.data() + (oy * 2 * w + ox) * c;
                              double* g00 = gx->data() + (a.lo * w + b.lo) * c;
                              double* g01 = gx->data() + (a.lo * w + b.hi) * c;
                              double* g10 = gx->data() + (a.hi * w + b.lo) * c;
                              double* g11 = gx->data() + (a.hi * w + b.hi) * c;
                              for (std::size_t k = 0; k < c; ++k) {
                                g00[k] += w00 * go[k];
                                g01[k] += w01 * go[k];
                                g10[k] += w10 * go[k];
                                g11[k] += w11 * go[k];
                              }
                            }
                        });
}

inline Tensor avg_pool2x(const Tensor& x) {
  detail::require_defined(OpKind::avg_pool, x);
  if (x.rank() != 3 || x.dim(0) % 2 != 0 || x.dim(1) % 2 != 0 || x.dim(0) == 0)
    throw DimensionError("avg_pool: expected [H,W,C] with even H and W, got " + shape_str(x.shape()));
  const std::size_t h = x.dim(0) / 2, w = x.dim(1) / 2, c = x.dim(2), win = x.dim(1);
  std::vector<double> out(h * w * c);
  const auto* xd = x.data().data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xx = 0; xx < w; ++xx)
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t base = ((2 * y) * win + 2 * xx) * c + k;
        out[(y * w + xx) * c + k] =
            0.25 * (xd[base] + xd[base + c] + xd[base + win * c] + xd[base + win * c + c]);
      }
  auto px = x.impl();
  return detail::finish(OpKind::avg_pool, {h, w, c}, std::move(out), {px},
                        [px, h, w, c, win](const std::vector<double>& g) {
                          auto* gx = detail::grad_of(px);
                          if (!gx) return;
                          for (std::size_t y = 0; y < h; ++y)
                            for (std::size_t xx = 0; xx < w; ++xx)
                              for (std::size_t k = 0; k < c; ++k) {
                                const double v = 0.25 * g[(y * w + xx) * c + k];
                                const std::size_t base = ((2 * y) * win + 2 * xx) * c + k;
                                (*gx)[base] += v;
                                (*gx)[base + c] += v;
                                (*gx)[base + win * c] += v;
                                (*gx)[base + win * c + c] += v;
                              }
                        });
}

// ---------------------------------------------------------------------------
// Shape manipulation (all copies)

inline Tensor reshape(const Tensor& x, Shape shape) {
  detail::require_defined(OpKind::reshape, x);
  if (numel(shape) != x.size()) detail::shape_mismatch(OpKind::reshape, x.shape(), shape);
  std::vector<double> out(x.data().begin(), x.data().end());
  auto px = x.impl();
  return detail::finish(OpKind::reshape, std::move(shape), std::move(out), {px},
                        [px](const std::vector<double>& g) {
                          if (auto* gx = detail::grad_of(px)) detail::add_into(*gx, g);
                        });
}

namespace detail {

struct AxisSplit {
  std::size_t outer, len, inner;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

// Elements [begin, end) along axis.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  detail::require_defined(OpKind::slice, x);
  if (axis >= x.rank()) throw DimensionError("slice: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  if (begin > end || end > x.dim(axis))
    throw IndexError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for axis of size " +
                     std::to_string(x.dim(axis)));
  auto sp = detail::split_at(x.shape(), axis);
  const std::size_t n = end - begin;
  Shape shape = x.shape();
  shape[axis] = n;
  std::vector<double> out(sp.outer * n * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    const double* src = x.data().data() + (o * sp.len + begin) * sp.inner;
    std::copy(src, src + n * sp.inner, out.begin() + static_cast<std::ptrdiff_t>(o * n * sp.inner));
  }
  auto px = x.impl();
  return detail::finish(OpKind::slice, std::move(shape), std::move(out), {px},
                        [px, sp, begin, n](const std::vector<double>& g) {
                          auto* gx = detail::grad_of(px);
                          if (!gx) return;
                          for (std::size_t o = 0; o < sp.outer; ++o) {
                            double* dst = gx->data() + (o * sp.len + begin) * sp.inner;
                            const double* src = g.data() + o * n * sp.inner;
                            for (std::size_t i = 0; i < n * sp.inner; ++i) dst[i] += src[i];
                          }
                        });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  for (const auto& p : parts) detail::require_defined(OpKind::concat, p);
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(ref));
  Shape shape = ref;
  shape[axis] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) detail::shape_mismatch(OpKind::concat, ref, p.shape());
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis && p.dim(i) != ref[i]) detail::shape_mismatch(OpKind::concat, ref, p.shape());
    lens.push_back(p.dim(axis));
    shape[axis] += p.dim(axis);
  }
  auto sp = detail::split_at(shape, axis);
  std::vector<double> out(numel(shape));
  std::vector<detail::DataPtr> inputs;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t n = lens[k];
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const double* src = parts[k].data().data() + o * n * sp.inner;
      std::copy(src, src + n * sp.inner, out.begin() + static_cast<std::ptrdiff_t>((o * sp.len + offset) * sp.inner));
    }
    offset += n;
    inputs.push_back(parts[k].impl());
  }
  auto captured = inputs;
  return detail::finish(OpKind::concat, std::move(shape), std::move(out), std::move(inputs),
                        [captured, lens, sp](const std::vector<double>& g) {
                          std::size_t off = 0;
                          for (std::size_t k = 0; k < captured.size(); ++k) {
                            const std::size_t n = lens[k];
                            if (auto* gp = detail::grad_of(captured[k]))
                              for (std::size_t o = 0; o < sp.outer; ++o) {
                                const double* src = g.data() + (o * sp.len + off) * sp.inner;
                                double* dst = gp->data() + o * n * sp.inner;
                                for (std::size_t i = 0; i < n * sp.inner; ++i) dst[i] += src[i];
                              }
                            off += n;
                          }
                        });
}

// table: [C, V]; returns [C, ids.size()] with column j = table[:, ids[j]].
inline Tensor gather_columns(const Tensor& table, const std::vector<std::size_t>& ids) {
  detail::require_defined(OpKind::gather_columns, table);
  if (table.rank() != 2) throw DimensionError("gather_columns: expected [C,V] table, got " + shape_str(table.shape()));
  const std::size_t c = table.dim(0), v = table.dim(1), m = ids.size();
  for (auto id : ids)
    if (id >= v) throw IndexError("gather_columns: id " + std::to_string(id) + " outside vocabulary of " + std::to_string(v));
  std::vector<double> out(c * m);
  for (std::size_t r = 0; r < c; ++r)
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] = table.data()[r * v + ids[j]];
  auto pt = table.impl();
  return detail::finish(OpKind::gather_columns, {c, m}, std::move(out), {pt},
                        [pt, ids, c, v, m](const std::vector<double>& g) {
                          auto* gt = detail::grad_of(pt);
                          if (!gt) return;
                          for (std::size_t r = 0; r < c; ++r)
                            for (std::size_t j = 0; j < m; ++j) (*gt)[r * v + ids[j]] += g[r * m + j];
                        });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  detail::require_defined(OpKind::sum, x);
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto px = x.impl();
  return detail::finish(OpKind::sum, {1}, {s}, {px}, [px](const std::vector<double>& g) {
    if (auto* gx = detail::grad_of(px))
      for (auto& v : *gx) v += g[0];
  });
}

inline Tensor mean(const Tensor& x) {
  detail::require_defined(OpKind::mean, x);
  if (x.size() == 0) throw DimensionError("mean: empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double n = static_cast<double>(x.size());
  auto px = x.impl();
  return detail::finish(OpKind::mean, {1}, {s / n}, {px}, [px, n](const std::vector<double>& g) {
    if (auto* gx = detail::grad_of(px))
      for (auto& v : *gx) v += g[0] / n;
  });
}

// mean((a - b)^2)
inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::require_defined(OpKind::mse, a);
  detail::require_defined(OpKind::mse, b);
  if (a.shape() != b.shape()) detail::shape_mismatch(OpKind::mse, a.shape(), b.shape());
  if (a.size() == 0) throw DimensionError("mse: empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    s += d * d;
  }
  const double n = static_cast<double>(a.size());
  auto pa = a.impl(), pb = b.impl();
  return detail::finish(OpKind::mse, {1}, {s / n}, {pa, pb}, [pa, pb, n](const std::vector<double>& g) {
    auto* ga = detail::grad_of(pa);
    auto* gb = detail::grad_of(pb);
    for (std::size_t i = 0; i < pa->data.size(); ++i) {
      const double d = 2.0 * (pa->data[i] - pb->data[i]) / n * g[0];
      if (ga) (*ga)[i] += d;
      if (gb) (*gb)[i] -= d;
    }
  });
}

// ---------------------------------------------------------------------------

// Reverse pass over the current thread's graph. Leaf gradients accumulate; the
// graph is consumed.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1 || loss.rank() != 1)
    throw ContractError("backward: loss must have shape [1], got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  auto& graph = Graph::current();
  if (graph.size() == 0) throw ContractError("backward: graph is empty");
  if (!loss.requires_grad()) throw ContractError("backward: loss does not depend on any tensor requiring grad");

  loss.impl()->grad_buffer()[0] += 1.0;
  auto nodes = graph.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    const auto& out = it->output;
    if (out->grad.size() != out->data.size() || out->data.empty()) continue;
    it->backward(out->grad);
  }
  for (const auto& node : nodes) node.output->grad.clear();
  graph.clear();
}

// x @ w + b for x: [P, in], w: [in, out], b: [out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_bias(matmul(x, w), b); }

}  // namespace hiper
