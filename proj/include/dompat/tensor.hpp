#ifndef DOMPAT_TENSOR_HPP
#define DOMPAT_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "dompat/common.hpp"

namespace dompat {

template <typename T>
class tape;

// ---------------------------------------------------------------------------
// tensor
// ---------------------------------------------------------------------------

/// Dense row-major n-d array. Copies share the underlying buffer; treat a
/// tensor as immutable once it has been handed to an op (ops never mutate
/// their inputs and may retain references for the backward pass).
///
/// A tensor participates in autodiff only after tape<T>::watch() attaches it
/// as a leaf, or when it is the output of an op over watched inputs. Leaves
/// own a grad buffer; intermediate gradients live on the tape.
template <typename T = float>
class tensor {
 public:
  tensor() = default;

  explicit tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(count_(shape_), T(0))) {}

  tensor(std::vector<std::size_t> shape, std::vector<T> values)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(values))) {
    if (count_(shape_) != data_->size()) {
      throw std::invalid_argument("tensor: shape does not match value count");
    }
  }

  static tensor full(std::vector<std::size_t> shape, T v) {
    tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
  }

  static tensor scalar(T v) { return tensor({1}, {v}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  bool empty() const { return size() == 0; }

  std::span<const T> data() const { return {data_->data(), data_->size()}; }
  std::span<T> data() { return {data_->data(), data_->size()}; }
  const std::shared_ptr<std::vector<T>>& shared_data() const { return data_; }

  /// Value of a one-element tensor.
  T item() const {
    if (size() != 1) throw std::invalid_argument("item(): tensor is not scalar");
    return (*data_)[0];
  }

  /// Deep copy (fresh buffer, no tape attachment).
  tensor clone() const {
    tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<T>>(*data_);
    return t;
  }

  bool requires_grad() const { return node_ >= 0; }
  tape<T>* tape_handle() const { return tape_; }
  int node_id() const { return node_; }

  /// Gradient buffer of a watched leaf (empty until backward has run).
  std::span<const T> grad() const {
    if (!grad_) return {};
    return {grad_->data(), grad_->size()};
  }

  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
  }

  // Used by tape/ops; not part of the everyday API.
  void bind_(tape<T>* tp, int node) {
    tape_ = tp;
    node_ = node;
  }
  void attach_grad_buffer_() {
    if (!grad_) grad_ = std::make_shared<std::vector<T>>(size(), T(0));
  }
  const std::shared_ptr<std::vector<T>>& grad_buffer_() const { return grad_; }

 private:
  static std::size_t count_(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) return 0;
      n *= d;
    }
    return shape.empty() ? 0 : n;
  }

  std::vector<std::size_t> shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::shared_ptr<std::vector<T>> grad_;
  tape<T>* tape_ = nullptr;
  int node_ = -1;
};

// ---------------------------------------------------------------------------
// tape
// ---------------------------------------------------------------------------

/// Append-only record of differentiable operations. Node inputs always
/// precede the node itself, so one reverse sweep visits each node exactly
/// once. Gradient buffers are allocated on first touch; nodes the loss does
/// not depend on are skipped.
///
/// A tape and its tensors are one single-threaded unit of work.
template <typename T>
class tape {
 public:
  using backward_fn = std::function<void(tape&, const std::vector<T>&)>;

  tape() = default;
  tape(const tape&) = delete;
  tape& operator=(const tape&) = delete;

  /// Register a leaf: allocates its grad buffer and records an accumulator
  /// node so downstream ops can reach it.
  void watch(tensor<T>& leaf) {
    leaf.attach_grad_buffer_();
    auto buf = leaf.grad_buffer_();
    const int id = record(leaf.size(), [buf](tape&, const std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) (*buf)[i] += g[i];
    });
    leaf.bind_(this, id);
  }

  /// Append a node. `fn` receives this node's accumulated output gradient
  /// and must push contributions into its input nodes via accumulate().
  int record(std::size_t out_size, backward_fn fn) {
    nodes_.push_back(node{std::vector<T>(), out_size, std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  /// Add `contrib` into the gradient of node `id`.
  void accumulate(int id, std::span<const T> contrib) {
    node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad.assign(n.out_size, T(0));
    for (std::size_t i = 0; i < contrib.size(); ++i) n.grad[i] += contrib[i];
  }

  std::vector<T>& grad_slot(int id, std::size_t out_size) {
    node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad.assign(out_size, T(0));
    return n.grad;
  }

  /// Reverse sweep seeded with d(loss)/d(loss) = 1.
  void backward_from(int loss_node) {
    node& ln = nodes_[static_cast<std::size_t>(loss_node)];
    if (ln.out_size != 1) throw std::invalid_argument("backward: loss is not scalar");
    if (ln.grad.empty()) ln.grad.assign(1, T(0));
    ln.grad[0] += T(1);
    for (int id = loss_node; id >= 0; --id) {
      node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct node {
    std::vector<T> grad;  // empty until a gradient reaches this node
    std::size_t out_size;
    backward_fn backward;
  };
  std::vector<node> nodes_;
};

// ---------------------------------------------------------------------------
// op plumbing
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
tape<T>* common_tape(const tensor<T>& a, const tensor<T>& b) {
  tape<T>* ta = a.tape_handle();
  tape<T>* tb = b.tape_handle();
  if (ta && tb && ta != tb) throw std::invalid_argument("op inputs live on different tapes");
  return ta ? ta : tb;
}

template <typename T>
void require_same_shape(const tensor<T>& a, const tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

inline bool is_scalar_shape(const std::vector<std::size_t>& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return !s.empty() && n == 1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

// Binary elementwise ops accept equal shapes, or a one-element tensor on
// either side (scalar-with-tensor); no other broadcasting.

namespace detail {

enum class ew_kind { add, sub, mul, div };

template <typename T>
tensor<T> elementwise_binary(ew_kind kind, const tensor<T>& a, const tensor<T>& b, const char* name) {
  const bool a_scalar = is_scalar_shape(a.shape());
  const bool b_scalar = is_scalar_shape(b.shape());
  if (!a_scalar && !b_scalar) require_same_shape(a, b, name);

  const auto& big_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
  const std::size_t n = a_scalar && !b_scalar ? b.size() : a.size();
  auto av = a.data();
  auto bv = b.data();

  if (kind == ew_kind::div) {
    for (std::size_t i = 0; i < b.size(); ++i) {
      if (bv[i] == T(0)) throw std::domain_error("div: division by zero");
    }
  }

  tensor<T> out(big_shape);
  auto ov = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    const T x = av[a_scalar ? 0 : i];
    const T y = bv[b_scalar ? 0 : i];
    switch (kind) {
      case ew_kind::add: ov[i] = x + y; break;
      case ew_kind::sub: ov[i] = x - y; break;
      case ew_kind::mul: ov[i] = x * y; break;
      case ew_kind::div: ov[i] = x / y; break;
    }
  }

  if (tape<T>* tp = common_tape(a, b)) {
    const int ia = a.node_id();
    const int ib = b.node_id();
    auto ad = a.shared_data();
    auto bd = b.shared_data();
    const int id = tp->record(n, [kind, ia, ib, ad, bd, a_scalar, b_scalar, n](tape<T>& t, const std::vector<T>& g) {
      if (ia >= 0) {
        std::vector<T> ga(a_scalar ? 1 : n, T(0));
        for (std::size_t i = 0; i < n; ++i) {
          T d{};
          switch (kind) {
            case ew_kind::add:
            case ew_kind::sub: d = g[i]; break;
            case ew_kind::mul: d = g[i] * (*bd)[b_scalar ? 0 : i]; break;
            case ew_kind::div: d = g[i] / (*bd)[b_scalar ? 0 : i]; break;
          }
          ga[a_scalar ? 0 : i] += d;
        }
        t.accumulate(ia, ga);
      }
      if (ib >= 0) {
        std::vector<T> gb(b_scalar ? 1 : n, T(0));
        for (std::size_t i = 0; i < n; ++i) {
          const T x = (*ad)[a_scalar ? 0 : i];
          const T y = (*bd)[b_scalar ? 0 : i];
          T d{};
          switch (kind) {
            case ew_kind::add: d = g[i]; break;
            case ew_kind::sub: d = -g[i]; break;
            case ew_kind::mul: d = g[i] * x; break;
            case ew_kind::div: d = -g[i] * x / (y * y); break;
          }
          gb[b_scalar ? 0 : i] += d;
        }
        t.accumulate(ib, gb);
      }
    });
    out.bind_(tp, id);
  }
  return out;
}

}  // namespace detail

template <typename T>
tensor<T> add(const tensor<T>& a, const tensor<T>& b) {
  return detail::elementwise_binary(detail::ew_kind::add, a, b, "add");
}
template <typename T>
tensor<T> sub(const tensor<T>& a, const tensor<T>& b) {
  return detail::elementwise_binary(detail::ew_kind::sub, a, b, "sub");
}
template <typename T>
tensor<T> mul(const tensor<T>& a, const tensor<T>& b) {
  return detail::elementwise_binary(detail::ew_kind::mul, a, b, "mul");
}
template <typename T>
tensor<T> div(const tensor<T>& a, const tensor<T>& b) {
  return detail::elementwise_binary(detail::ew_kind::div, a, b, "div");
}

/// max(x, 0). Subgradient at 0 is 0.
template <typename T>
tensor<T> relu(const tensor<T>& a) {
  tensor<T> out(a.shape());
  auto av = a.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) ov[i] = av[i] > T(0) ? av[i] : T(0);

  if (tape<T>* tp = a.tape_handle()) {
    const int ia = a.node_id();
    auto ad = a.shared_data();
    const int id = tp->record(a.size(), [ia, ad](tape<T>& t, const std::vector<T>& g) {
      std::vector<T> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = (*ad)[i] > T(0) ? g[i] : T(0);
      t.accumulate(ia, ga);
    });
    out.bind_(tp, id);
  }
  return out;
}

/// min(max(x, lo), hi). Gradient passes where lo <= x <= hi.
template <typename T>
tensor<T> clamp(const tensor<T>& a, T lo, T hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  tensor<T> out(a.shape());
  auto av = a.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) ov[i] = std::min(std::max(av[i], lo), hi);

  if (tape<T>* tp = a.tape_handle()) {
    const int ia = a.node_id();
    auto ad = a.shared_data();
    const int id = tp->record(a.size(), [ia, ad, lo, hi](tape<T>& t, const std::vector<T>& g) {
      std::vector<T> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T x = (*ad)[i];
        ga[i] = (x >= lo && x <= hi) ? g[i] : T(0);
      }
      t.accumulate(ia, ga);
    });
    out.bind_(tp, id);
  }
  return out;
}

/// Natural log; inputs must be strictly positive.
template <typename T>
tensor<T> log(const tensor<T>& a) {
  tensor<T> out(a.shape());
  auto av = a.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (av[i] <= T(0)) throw std::domain_error("log: nonpositive input");
    ov[i] = std::log(av[i]);
  }
  if (tape<T>* tp = a.tape_handle()) {
    const int ia = a.node_id();
    auto ad = a.shared_data();
    const int id = tp->record(a.size(), [ia, ad](tape<T>& t, const std::vector<T>& g) {
      std::vector<T> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] / (*ad)[i];
      t.accumulate(ia, ga);
    });
    out.bind_(tp, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

template <typename T>
tensor<T> matmul(const tensor<T>& a, const tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: rank-2 tensors required");
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) throw std::invalid_argument("matmul: inner dimensions disagree");

  tensor<T> out({m, n});
  auto av = a.data();
  auto bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T x = av[i * k + kk];
      if (x == T(0)) continue;
      const T* brow = &bv[kk * n];
      T* orow = &ov[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  }

  if (tape<T>* tp = detail::common_tape(a, b)) {
    const int ia = a.node_id();
    const int ib = b.node_id();
    auto ad = a.shared_data();
    auto bd = b.shared_data();
    const int id = tp->record(m * n, [=](tape<T>& t, const std::vector<T>& g) {
      if (ia >= 0) {  // dA = G * B^T
        std::vector<T> ga(m * k, T(0));
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t kk = 0; kk < k; ++kk) {
            T acc = 0;
            const T* grow = &g[i * n];
            const T* brow = &(*bd)[kk * n];
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[i * k + kk] = acc;
          }
        }
        t.accumulate(ia, ga);
      }
      if (ib >= 0) {  // dB = A^T * G
        std::vector<T> gb(k * n, T(0));
        for (std::size_t i = 0; i < m; ++i) {
          const T* grow = &g[i * n];
          for (std::size_t kk = 0; kk < k; ++kk) {
            const T x = (*ad)[i * k + kk];
            if (x == T(0)) continue;
            T* brow = &gb[kk * n];
            for (std::size_t j = 0; j < n; ++j) brow[j] += x * grow[j];
          }
        }
        t.accumulate(ib, gb);
      }
    });
    out.bind_(tp, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d (cross-correlation, zero padding)
// ---------------------------------------------------------------------------

namespace detail {

// Valid output range [lo, hi) along one axis for a fixed kernel offset, so
// the hot loops run without bounds checks.
inline void conv_axis_range(std::size_t in_dim, std::size_t out_dim, std::size_t stride,
                            std::ptrdiff_t pad, std::size_t koff, std::size_t& lo, std::size_t& hi) {
  // in = o*stride - pad + koff must lie in [0, in_dim)
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(stride);
  const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(koff) - pad;
  std::ptrdiff_t l = off < 0 ? (-off + s - 1) / s : 0;
  std::ptrdiff_t h = (static_cast<std::ptrdiff_t>(in_dim) - 1 - off) / s + 1;
  l = std::max<std::ptrdiff_t>(l, 0);
  h = std::min<std::ptrdiff_t>(h, static_cast<std::ptrdiff_t>(out_dim));
  lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(l, 0));
  hi = static_cast<std::size_t>(std::max<std::ptrdiff_t>(h, l));
}

}  // namespace detail

template <typename T>
tensor<T> conv2d(const tensor<T>& x, const tensor<T>& w, const tensor<T>& bias, std::size_t stride,
                 std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4) throw std::invalid_argument("conv2d: NCHW input and FCHW kernel required");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], wdt = x.shape()[3];
  const std::size_t f = w.shape()[0], wc = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
  if (wc != c) throw std::invalid_argument("conv2d: channel counts disagree");
  if (bias.size() != f) throw std::invalid_argument("conv2d: bias size must match filter count");
  if (kh > h + 2 * pad || kw > wdt + 2 * pad) throw std::invalid_argument("conv2d: kernel larger than padded input");
  const std::ptrdiff_t oh_s = static_cast<std::ptrdiff_t>((h + 2 * pad - kh) / stride) + 1;
  const std::ptrdiff_t ow_s = static_cast<std::ptrdiff_t>((wdt + 2 * pad - kw) / stride) + 1;
  if (oh_s <= 0 || ow_s <= 0) throw std::invalid_argument("conv2d: nonpositive output size");
  const std::size_t oh = static_cast<std::size_t>(oh_s), ow = static_cast<std::size_t>(ow_s);
  const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(pad);

  tensor<T> out({n, f, oh, ow});
  auto xv = x.data();
  auto wv = w.data();
  auto bv = bias.data();
  auto ov = out.data();

  for (std::size_t in = 0; in < n; ++in) {
    for (std::size_t fi = 0; fi < f; ++fi) {
      T* oplane = &ov[(in * f + fi) * oh * ow];
      std::fill(oplane, oplane + oh * ow, bv[fi]);
      for (std::size_t ci = 0; ci < c; ++ci) {
        const T* xplane = &xv[(in * c + ci) * h * wdt];
        for (std::size_t ki = 0; ki < kh; ++ki) {
          std::size_t olo, ohi;
          detail::conv_axis_range(h, oh, stride, p, ki, olo, ohi);
          for (std::size_t kj = 0; kj < kw; ++kj) {
            const T wval = wv[((fi * c + ci) * kh + ki) * kw + kj];
            if (wval == T(0)) continue;
            std::size_t wlo, whi;
            detail::conv_axis_range(wdt, ow, stride, p, kj, wlo, whi);
            for (std::size_t oi = olo; oi < ohi; ++oi) {
              const std::size_t ih = oi * stride + ki - pad;
              const T* xrow = &xplane[ih * wdt];
              T* orow = &oplane[oi * ow];
              for (std::size_t oj = wlo; oj < whi; ++oj) {
                orow[oj] += wval * xrow[oj * stride + kj - pad];
              }
            }
          }
        }
      }
    }
  }

  tape<T>* tp = detail::common_tape(x, w);
  if (!tp && bias.tape_handle()) tp = bias.tape_handle();
  if (tp) {
    const int ix = x.node_id(), iw = w.node_id(), ibias = bias.node_id();
    auto xd = x.shared_data();
    auto wd = w.shared_data();
    const int id = tp->record(n * f * oh * ow, [=](tape<T>& t, const std::vector<T>& g) {
      if (ibias >= 0) {
        std::vector<T> gb(f, T(0));
        for (std::size_t in = 0; in < n; ++in)
          for (std::size_t fi = 0; fi < f; ++fi) {
            const T* gplane = &g[(in * f + fi) * oh * ow];
            T acc = 0;
            for (std::size_t i = 0; i < oh * ow; ++i) acc += gplane[i];
            gb[fi] += acc;
          }
        t.accumulate(ibias, gb);
      }
      if (iw >= 0) {
        std::vector<T> gw(f * c * kh * kw, T(0));
        for (std::size_t in = 0; in < n; ++in) {
          for (std::size_t fi = 0; fi < f; ++fi) {
            const T* gplane = &g[(in * f + fi) * oh * ow];
            for (std::size_t ci = 0; ci < c; ++ci) {
              const T* xplane = &(*xd)[(in * c + ci) * h * wdt];
              for (std::size_t ki = 0; ki < kh; ++ki) {
                std::size_t olo, ohi;
                detail::conv_axis_range(h, oh, stride, p, ki, olo, ohi);
                for (std::size_t kj = 0; kj < kw; ++kj) {
                  std::size_t wlo, whi;
                  detail::conv_axis_range(wdt, ow, stride, p, kj, wlo, whi);
                  T acc = 0;
                  for (std::size_t oi = olo; oi < ohi; ++oi) {
                    const std::size_t ih = oi * stride + ki - pad;
                    const T* xrow = &xplane[ih * wdt];
                    const T* grow = &gplane[oi * ow];
                    for (std::size_t oj = wlo; oj < whi; ++oj) {
                      acc += grow[oj] * xrow[oj * stride + kj - pad];
                    }
                  }
                  gw[((fi * c + ci) * kh + ki) * kw + kj] += acc;
                }
              }
            }
          }
        }
        t.accumulate(iw, gw);
      }
      if (ix >= 0) {
        std::vector<T> gx(n * c * h * wdt, T(0));
        for (std::size_t in = 0; in < n; ++in) {
          for (std::size_t fi = 0; fi < f; ++fi) {
            const T* gplane = &g[(in * f + fi) * oh * ow];
            for (std::size_t ci = 0; ci < c; ++ci) {
              T* xgplane = &gx[(in * c + ci) * h * wdt];
              for (std::size_t ki = 0; ki < kh; ++ki) {
                std::size_t olo, ohi;
                detail::conv_axis_range(h, oh, stride, p, ki, olo, ohi);
                for (std::size_t kj = 0; kj < kw; ++kj) {
                  const T wval = (*wd)[((fi * c + ci) * kh + ki) * kw + kj];
                  if (wval == T(0)) continue;
                  std::size_t wlo, whi;
                  detail::conv_axis_range(wdt, ow, stride, p, kj, wlo, whi);
                  for (std::size_t oi = olo; oi < ohi; ++oi) {
                    const std::size_t ih = oi * stride + ki - pad;
                    T* xgrow = &xgplane[ih * wdt];
                    const T* grow = &gplane[oi * ow];
                    for (std::size_t oj = wlo; oj < whi; ++oj) {
                      xgrow[oj * stride + kj - pad] += wval * grow[oj];
                    }
                  }
                }
              }
            }
          }
        }
        t.accumulate(ix, gx);
      }
    });
    out.bind_(tp, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// maxpool2d
// ---------------------------------------------------------------------------

/// Window maxima over NCHW input, no padding. Backward routes the gradient
/// to the first maximal element of each window in row-major order.
template <typename T>
tensor<T> maxpool2d(const tensor<T>& x, std::size_t k, std::size_t stride) {
  if (x.rank() != 4) throw std::invalid_argument("maxpool2d: NCHW input required");
  if (k < 1 || stride < 1) throw std::invalid_argument("maxpool2d: k and stride must be >= 1");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (k > h || k > w) throw std::invalid_argument("maxpool2d: window larger than input");
  const std::size_t oh = (h - k) / stride + 1;
  const std::size_t ow = (w - k) / stride + 1;

  tensor<T> out({n, c, oh, ow});
  auto xv = x.data();
  auto ov = out.data();
  auto argmax = std::make_shared<std::vector<std::size_t>>(n * c * oh * ow);

  std::size_t oi = 0;
  for (std::size_t in = 0; in < n; ++in) {
    for (std::size_t ci = 0; ci < c; ++ci) {
      const T* plane = &xv[(in * c + ci) * h * w];
      for (std::size_t ph = 0; ph < oh; ++ph) {
        for (std::size_t pw = 0; pw < ow; ++pw, ++oi) {
          std::size_t best = (ph * stride) * w + pw * stride;
          T bestv = plane[best];
          for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
              const std::size_t idx = (ph * stride + ki) * w + pw * stride + kj;
              if (plane[idx] > bestv) {
                bestv = plane[idx];
                best = idx;
              }
            }
          }
          ov[oi] = bestv;
          (*argmax)[oi] = (in * c + ci) * h * w + best;
        }
      }
    }
  }

  if (tape<T>* tp = x.tape_handle()) {
    const int ix = x.node_id();
    const std::size_t in_size = x.size();
    const int id = tp->record(out.size(), [ix, argmax, in_size](tape<T>& t, const std::vector<T>& g) {
      std::vector<T> gx(in_size, T(0));
      for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
      t.accumulate(ix, gx);
    });
    out.bind_(tp, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
tensor<T> sum(const tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  tensor<T> out = tensor<T>::scalar(acc);
  if (tape<T>* tp = a.tape_handle()) {
    const int ia = a.node_id();
    const std::size_t n = a.size();
    const int id = tp->record(1, [ia, n](tape<T>& t, const std::vector<T>& g) {
      t.accumulate(ia, std::vector<T>(n, g[0]));
    });
    out.bind_(tp, id);
  }
  return out;
}

template <typename T>
tensor<T> mean(const tensor<T>& a) {
  if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
  T acc = 0;
  for (T v : a.data()) acc += v;
  const T inv = T(1) / static_cast<T>(a.size());
  tensor<T> out = tensor<T>::scalar(acc * inv);
  if (tape<T>* tp = a.tape_handle()) {
    const int ia = a.node_id();
    const std::size_t n = a.size();
    const int id = tp->record(1, [ia, n, inv](tape<T>& t, const std::vector<T>& g) {
      t.accumulate(ia, std::vector<T>(n, g[0] * inv));
    });
    out.bind_(tp, id);
  }
  return out;
}

/// Inner product of two flattened equal-length tensors.
template <typename T>
tensor<T> dot(const tensor<T>& a, const tensor<T>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
  auto av = a.data();
  auto bv = b.data();
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += av[i] * bv[i];
  tensor<T> out = tensor<T>::scalar(acc);
  if (tape<T>* tp = detail::common_tape(a, b)) {
    const int ia = a.node_id(), ib = b.node_id();
    auto ad = a.shared_data();
    auto bd = b.shared_data();
    const int id = tp->record(1, [ia, ib, ad, bd](tape<T>& t, const std::vector<T>& g) {
      if (ia >= 0) {
        std::vector<T> ga(bd->size());
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[0] * (*bd)[i];
        t.accumulate(ia, ga);
      }
      if (ib >= 0) {
        std::vector<T> gb(ad->size());
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = g[0] * (*ad)[i];
        t.accumulate(ib, gb);
      }
    });
    out.bind_(tp, id);
  }
  return out;
}

/// sqrt(sum of squares) over the flattened tensor. The backward direction
/// a/||a|| is stabilized with a 1e-12 shift so an exactly-zero input yields
/// a zero gradient instead of NaN.
template <typename T>
tensor<T> l2norm(const tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v * v;
  const T r = std::sqrt(acc);
  tensor<T> out = tensor<T>::scalar(r);
  if (tape<T>* tp = a.tape_handle()) {
    const int ia = a.node_id();
    auto ad = a.shared_data();
    const int id = tp->record(1, [ia, ad, r](tape<T>& t, const std::vector<T>& g) {
      const T denom = r + T(1e-12);
      std::vector<T> ga(ad->size());
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[0] * (*ad)[i] / denom;
      t.accumulate(ia, ga);
    });
    out.bind_(tp, id);
  }
  return out;
}

/// Softmax over the last axis, computed with max subtraction.
template <typename T>
tensor<T> softmax(const tensor<T>& a) {
  if (a.rank() < 1 || a.size() == 0) throw std::invalid_argument("softmax: nonempty tensor required");
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.size() / cols;
  tensor<T> out(a.shape());
  auto av = a.data();
  auto ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = &av[r * cols];
    T* o = &ov[r * cols];
    T mx = in[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
    T s = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      o[j] = std::exp(in[j] - mx);
      s += o[j];
    }
    for (std::size_t j = 0; j < cols; ++j) o[j] /= s;
  }
  if (tape<T>* tp = a.tape_handle()) {
    const int ia = a.node_id();
    auto od = out.shared_data();
    const int id = tp->record(a.size(), [ia, od, rows, cols](tape<T>& t, const std::vector<T>& g) {
      std::vector<T> ga(rows * cols);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = &(*od)[r * cols];
        const T* gr = &g[r * cols];
        T gy = 0;
        for (std::size_t j = 0; j < cols; ++j) gy += gr[j] * y[j];
        for (std::size_t j = 0; j < cols; ++j) ga[r * cols + j] = y[j] * (gr[j] - gy);
      }
      t.accumulate(ia, ga);
    });
    out.bind_(tp, id);
  }
  return out;
}

/// log(softmax) over the last axis, computed as x - (max + log sum exp) so
/// confident logits cannot underflow to log(0).
template <typename T>
tensor<T> log_softmax(const tensor<T>& a) {
  if (a.rank() < 1 || a.size() == 0) throw std::invalid_argument("log_softmax: nonempty tensor required");
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.size() / cols;
  tensor<T> out(a.shape());
  auto av = a.data();
  auto ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = &av[r * cols];
    T* o = &ov[r * cols];
    T mx = in[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
    T s = 0;
    for (std::size_t j = 0; j < cols; ++j) s += std::exp(in[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < cols; ++j) o[j] = in[j] - lse;
  }
  if (tape<T>* tp = a.tape_handle()) {
    const int ia = a.node_id();
    auto od = out.shared_data();
    const int id = tp->record(a.size(), [ia, od, rows, cols](tape<T>& t, const std::vector<T>& g) {
      // dx_j = g_j - softmax_j * sum(g)
      std::vector<T> ga(rows * cols);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* lo = &(*od)[r * cols];
        const T* gr = &g[r * cols];
        T gsum = 0;
        for (std::size_t j = 0; j < cols; ++j) gsum += gr[j];
        for (std::size_t j = 0; j < cols; ++j) {
          ga[r * cols + j] = gr[j] - std::exp(lo[j]) * gsum;
        }
      }
      t.accumulate(ia, ga);
    });
    out.bind_(tp, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops (view-style)
// ---------------------------------------------------------------------------

template <typename T>
tensor<T> reshape(const tensor<T>& a, std::vector<std::size_t> new_shape) {
  std::size_t n = new_shape.empty() ? 0 : 1;
  for (auto d : new_shape) n *= d;
  if (n != a.size()) throw std::invalid_argument("reshape: element count mismatch");
  tensor<T> out(std::move(new_shape), std::vector<T>(a.data().begin(), a.data().end()));
  if (tape<T>* tp = a.tape_handle()) {
    const int ia = a.node_id();
    const int id = tp->record(a.size(), [ia](tape<T>& t, const std::vector<T>& g) {
      t.accumulate(ia, g);
    });
    out.bind_(tp, id);
  }
  return out;
}

/// Row i of a rank-2 tensor as a rank-1 tensor.
template <typename T>
tensor<T> row(const tensor<T>& a, std::size_t i) {
  if (a.rank() != 2) throw std::invalid_argument("row: rank-2 tensor required");
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  if (i >= rows) throw std::invalid_argument("row: index out of range");
  auto av = a.data();
  tensor<T> out({cols}, std::vector<T>(av.begin() + static_cast<std::ptrdiff_t>(i * cols),
                                       av.begin() + static_cast<std::ptrdiff_t>((i + 1) * cols)));
  if (tape<T>* tp = a.tape_handle()) {
    const int ia = a.node_id();
    const int id = tp->record(cols, [ia, i, rows, cols](tape<T>& t, const std::vector<T>& g) {
      std::vector<T> ga(rows * cols, T(0));
      std::copy(g.begin(), g.end(), ga.begin() + static_cast<std::ptrdiff_t>(i * cols));
      t.accumulate(ia, ga);
    });
    out.bind_(tp, id);
  }
  return out;
}

/// Stack n copies of a along a new leading axis. Backward sums over copies.
template <typename T>
tensor<T> repeat_batch(const tensor<T>& a, std::size_t n) {
  if (n == 0) throw std::invalid_argument("repeat_batch: n must be positive");
  std::vector<std::size_t> shape;
  shape.push_back(n);
  shape.insert(shape.end(), a.shape().begin(), a.shape().end());
  tensor<T> out(shape);
  auto av = a.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(av.begin(), av.end(), ov.begin() + static_cast<std::ptrdiff_t>(i * a.size()));
  }
  if (tape<T>* tp = a.tape_handle()) {
    const int ia = a.node_id();
    const std::size_t sz = a.size();
    const int id = tp->record(n * sz, [ia, n, sz](tape<T>& t, const std::vector<T>& g) {
      std::vector<T> ga(sz, T(0));
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < sz; ++j) ga[j] += g[i * sz + j];
      t.accumulate(ia, ga);
    });
    out.bind_(tp, id);
  }
  return out;
}

/// x (N x K) plus a length-K vector added to every row.
template <typename T>
tensor<T> add_rowvec(const tensor<T>& x, const tensor<T>& b) {
  if (x.rank() != 2 || b.rank() != 1 || x.shape()[1] != b.shape()[0]) {
    throw std::invalid_argument("add_rowvec: x must be N x K and b length K");
  }
  const std::size_t n = x.shape()[0], k = x.shape()[1];
  tensor<T> out(x.shape());
  auto xv = x.data();
  auto bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) ov[i * k + j] = xv[i * k + j] + bv[j];
  if (tape<T>* tp = detail::common_tape(x, b)) {
    const int ix = x.node_id(), ib = b.node_id();
    const int id = tp->record(n * k, [ix, ib, n, k](tape<T>& t, const std::vector<T>& g) {
      if (ix >= 0) t.accumulate(ix, g);
      if (ib >= 0) {
        std::vector<T> gb(k, T(0));
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < k; ++j) gb[j] += g[i * k + j];
        t.accumulate(ib, gb);
      }
    });
    out.bind_(tp, id);
  }
  return out;
}

/// Per-channel (x - mean) / std over NCHW input; mean/std are constants.
template <typename T>
tensor<T> channel_affine(const tensor<T>& x, const std::vector<T>& mean_c, const std::vector<T>& std_c) {
  if (x.rank() != 4) throw std::invalid_argument("channel_affine: NCHW input required");
  const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  if (mean_c.size() != c || std_c.size() != c) {
    throw std::invalid_argument("channel_affine: per-channel constants must match channel count");
  }
  for (T s : std_c) {
    if (s == T(0)) throw std::domain_error("channel_affine: zero std");
  }
  tensor<T> out(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t in = 0; in < n; ++in) {
    for (std::size_t ci = 0; ci < c; ++ci) {
      const T m = mean_c[ci];
      const T inv = T(1) / std_c[ci];
      const T* src = &xv[(in * c + ci) * hw];
      T* dst = &ov[(in * c + ci) * hw];
      for (std::size_t i = 0; i < hw; ++i) dst[i] = (src[i] - m) * inv;
    }
  }
  if (tape<T>* tp = x.tape_handle()) {
    const int ix = x.node_id();
    auto stds = std::make_shared<std::vector<T>>(std_c);
    const int id = tp->record(x.size(), [ix, stds, n, c, hw](tape<T>& t, const std::vector<T>& g) {
      std::vector<T> gx(g.size());
      for (std::size_t in = 0; in < n; ++in)
        for (std::size_t ci = 0; ci < c; ++ci) {
          const T inv = T(1) / (*stds)[ci];
          for (std::size_t i = 0; i < hw; ++i) {
            const std::size_t idx = (in * c + ci) * hw + i;
            gx[idx] = g[idx] * inv;
          }
        }
      t.accumulate(ix, gx);
    });
    out.bind_(tp, id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// backward / gradient checking
// ---------------------------------------------------------------------------

/// Populate grad buffers of all watched leaves reachable from `loss`.
/// Gradients add up across calls and across multiple uses of a leaf.
template <typename T>
void backward(const tensor<T>& loss) {
  if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
  if (!loss.tape_handle()) throw std::invalid_argument("backward: loss is detached from any tape");
  loss.tape_handle()->backward_from(loss.node_id());
}

/// Central differences (fn(x + h e_i) - fn(x - h e_i)) / 2h per coordinate.
/// Verification oracle; fn must be deterministic.
template <typename T, typename Fn>
tensor<T> finite_diff_gradient(Fn&& fn, const tensor<T>& x, T h) {
  if (h <= T(0)) throw std::invalid_argument("finite_diff_gradient: h must be positive");
  tensor<T> g(x.shape());
  tensor<T> probe = x.clone();
  auto pv = probe.data();
  auto gv = g.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T keep = pv[i];
    pv[i] = keep + h;
    const T up = fn(static_cast<const tensor<T>&>(probe));
    pv[i] = keep - h;
    const T down = fn(static_cast<const tensor<T>&>(probe));
    pv[i] = keep;
    gv[i] = (up - down) / (2 * h);
  }
  return g;
}

}  // namespace dompat

#endif  // DOMPAT_TENSOR_HPP
