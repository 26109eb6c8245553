#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ach/common.hpp"

// Reverse-mode autodiff over dense row-major tensors.
//
// A Tape is single-use: record one forward pass, call backward() once, read
// gradients, throw it away. Tensors are immutable once created; ops allocate
// fresh outputs. A tensor with node >= 0 is attached to a tape and will
// receive a gradient buffer; tensors with no tape act as constants.

namespace ach {

using Shape = std::vector<std::int64_t>;

template <typename T>
class Tape;

template <typename T>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<T>> elems;
  Tape<T>* tape = nullptr;
  int node = -1;

  Tensor() = default;
  explicit Tensor(Shape s, Tape<T>* tp = nullptr)
      : shape(std::move(s)), tape(tp) {
    elems = std::make_shared<std::vector<T>>(
        static_cast<std::size_t>(count(shape)), T(0));
  }

  static Tensor from_values(Shape s, std::vector<T> v) {
    detail::require(count(s) == static_cast<std::int64_t>(v.size()),
                    "Tensor::from_values: size mismatch");
    Tensor t;
    t.shape = std::move(s);
    t.elems = std::make_shared<std::vector<T>>(std::move(v));
    return t;
  }

  static std::int64_t count(const Shape& s) {
    std::int64_t c = 1;
    for (auto d : s) c *= d;
    return c;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(elems->size()); }
  std::int64_t dim(std::size_t i) const { return shape.at(i); }
  T* data() { return elems->data(); }
  const T* data() const { return elems->data(); }
  T& operator[](std::int64_t i) { return (*elems)[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const {
    return (*elems)[static_cast<std::size_t>(i)];
  }
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  std::vector<T> grad;
  int last_node = -1;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)),
        grad(static_cast<std::size_t>(value.numel()), T(0)) {}

  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
class Tape {
 public:
  // Backward callback: receives the tape and the node's own id, reads
  // grad_buf(self) and accumulates into the parents' buffers.
  using BackFn = std::function<void(Tape<T>&, int)>;

  int record(std::int64_t numel, std::vector<int> parents, BackFn fn) {
    for (int p : parents)
      detail::require_state(p >= 0 && p < static_cast<int>(nodes_.size()),
                            "Tape::record: parent not on this tape");
    nodes_.push_back(Node{std::move(parents), std::move(fn), numel});
    grads_.emplace_back(static_cast<std::size_t>(numel), T(0));
    return static_cast<int>(nodes_.size()) - 1;
  }

  // Registers an input or parameter value as a differentiable leaf.
  Tensor<T> leaf(const Tensor<T>& value) {
    detail::require(value.elems != nullptr, "Tape::leaf: empty tensor");
    Tensor<T> t;
    t.shape = value.shape;
    t.elems = value.elems;
    t.tape = this;
    t.node = record(value.numel(), {}, nullptr);
    return t;
  }

  Tensor<T> leaf(Parameter<T>& p) {
    Tensor<T> t = leaf(p.value);
    p.last_node = t.node;
    return t;
  }

  void backward(const Tensor<T>& loss) {
    detail::require_state(loss.tape == this && loss.node >= 0,
                          "Tape::backward: tensor not recorded on this tape");
    detail::require(loss.numel() == 1, "Tape::backward: loss must be scalar");
    detail::require_state(!ran_backward_, "Tape::backward: tape already used");
    ran_backward_ = true;
    grads_[static_cast<std::size_t>(loss.node)][0] = T(1);
    for (int id = loss.node; id >= 0; --id) {
      auto& fn = nodes_[static_cast<std::size_t>(id)].back;
      if (fn) fn(*this, id);
    }
  }

  bool ran() const { return ran_backward_; }

  std::vector<T>& grad_buf(int node) {
    return grads_.at(static_cast<std::size_t>(node));
  }

  const std::vector<T>& grad(const Tensor<T>& t) const {
    detail::require_state(t.tape == this && t.node >= 0,
                          "Tape::grad: tensor not recorded on this tape");
    detail::require_state(ran_backward_, "Tape::grad: backward has not run");
    return grads_.at(static_cast<std::size_t>(t.node));
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<int> parents;
    BackFn back;
    std::int64_t numel;
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
  bool ran_backward_ = false;
};

// Adds the gradient accumulated on the parameter's most recent leaf node.
template <typename T>
void accumulate_grad(Tape<T>& tape, Parameter<T>& p) {
  detail::require_state(p.last_node >= 0,
                        "accumulate_grad: parameter was not bound this pass");
  detail::require_state(tape.ran(), "accumulate_grad: backward has not run");
  const auto& g = tape.grad_buf(p.last_node);
  for (std::size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
}

namespace detail {

template <typename T>
void check_all_finite(const Tensor<T>& t, const char* op) {
  if (!finite_checks()) return;
  for (const T& v : *t.elems) {
    if (!std::isfinite(static_cast<double>(v)))
      throw std::runtime_error(std::string(op) +
                               ": non-finite value in output");
  }
}

template <typename T>
Tape<T>* merge_tape(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.tape && b.tape)
    require(a.tape == b.tape, "operands recorded on different tapes");
  return a.tape ? a.tape : b.tape;
}

inline std::vector<int> live_parents(std::initializer_list<int> nodes) {
  std::vector<int> out;
  for (int n : nodes)
    if (n >= 0) out.push_back(n);
  return out;
}

}  // namespace detail

// ---- elementwise ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape == b.shape, "add: shape mismatch");
  Tape<T>* tape = detail::merge_tape(a, b);
  Tensor<T> out(a.shape, tape);
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
  if (tape) {
    out.node = tape->record(
        n, detail::live_parents({a.node, b.node}),
        [pa = a.node, pb = b.node, n](Tape<T>& tp, int self) {
          const auto& g = tp.grad_buf(self);
          if (pa >= 0) {
            auto& ga = tp.grad_buf(pa);
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
          }
          if (pb >= 0) {
            auto& gb = tp.grad_buf(pb);
            for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i];
          }
        });
  }
  detail::check_all_finite(out, "add");
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape == b.shape, "sub: shape mismatch");
  Tape<T>* tape = detail::merge_tape(a, b);
  Tensor<T> out(a.shape, tape);
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
  if (tape) {
    out.node = tape->record(
        n, detail::live_parents({a.node, b.node}),
        [pa = a.node, pb = b.node, n](Tape<T>& tp, int self) {
          const auto& g = tp.grad_buf(self);
          if (pa >= 0) {
            auto& ga = tp.grad_buf(pa);
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
          }
          if (pb >= 0) {
            auto& gb = tp.grad_buf(pb);
            for (std::int64_t i = 0; i < n; ++i) gb[i] -= g[i];
          }
        });
  }
  detail::check_all_finite(out, "sub");
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape == b.shape, "mul: shape mismatch");
  Tape<T>* tape = detail::merge_tape(a, b);
  Tensor<T> out(a.shape, tape);
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
  if (tape) {
    out.node = tape->record(
        n, detail::live_parents({a.node, b.node}),
        [pa = a.node, pb = b.node, va = a.elems, vb = b.elems,
         n](Tape<T>& tp, int self) {
          const auto& g = tp.grad_buf(self);
          if (pa >= 0) {
            auto& ga = tp.grad_buf(pa);
            for (std::int64_t i = 0; i < n; ++i)
              ga[i] += g[i] * (*vb)[static_cast<std::size_t>(i)];
          }
          if (pb >= 0) {
            auto& gb = tp.grad_buf(pb);
            for (std::int64_t i = 0; i < n; ++i)
              gb[i] += g[i] * (*va)[static_cast<std::size_t>(i)];
          }
        });
  }
  detail::check_all_finite(out, "mul");
  return out;
}

// |x|, with subgradient 0 at the kink.
template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  Tensor<T> out(a.shape, a.tape);
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] < T(0) ? -a[i] : a[i];
  if (a.tape) {
    out.node = a.tape->record(
        n, detail::live_parents({a.node}),
        [pa = a.node, va = a.elems, n](Tape<T>& tp, int self) {
          if (pa < 0) return;
          const auto& g = tp.grad_buf(self);
          auto& ga = tp.grad_buf(pa);
          for (std::int64_t i = 0; i < n; ++i) {
            const T v = (*va)[static_cast<std::size_t>(i)];
            if (v > T(0))
              ga[i] += g[i];
            else if (v < T(0))
              ga[i] -= g[i];
          }
        });
  }
  detail::check_all_finite(out, "abs");
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape, a.tape);
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = s * a[i];
  if (a.tape) {
    out.node = a.tape->record(n, detail::live_parents({a.node}),
                              [pa = a.node, s, n](Tape<T>& tp, int self) {
                                if (pa < 0) return;
                                const auto& g = tp.grad_buf(self);
                                auto& ga = tp.grad_buf(pa);
                                for (std::int64_t i = 0; i < n; ++i)
                                  ga[i] += s * g[i];
                              });
  }
  detail::check_all_finite(out, "scale");
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out(a.shape, a.tape);
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
  if (a.tape) {
    out.node = a.tape->record(
        n, detail::live_parents({a.node}),
        [pa = a.node, va = a.elems, n](Tape<T>& tp, int self) {
          if (pa < 0) return;
          const auto& g = tp.grad_buf(self);
          auto& ga = tp.grad_buf(pa);
          for (std::int64_t i = 0; i < n; ++i)
            if ((*va)[static_cast<std::size_t>(i)] > T(0)) ga[i] += g[i];
        });
  }
  detail::check_all_finite(out, "relu");
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out(Shape{1}, a.tape);
  const std::int64_t n = a.numel();
  T acc = T(0);
  for (std::int64_t i = 0; i < n; ++i) acc += a[i];
  out[0] = acc;
  if (a.tape) {
    out.node = a.tape->record(1, detail::live_parents({a.node}),
                              [pa = a.node, n](Tape<T>& tp, int self) {
                                if (pa < 0) return;
                                const T g = tp.grad_buf(self)[0];
                                auto& ga = tp.grad_buf(pa);
                                for (std::int64_t i = 0; i < n; ++i) ga[i] += g;
                              });
  }
  detail::check_all_finite(out, "sum");
  return out;
}

// [N, C] -> [C], mean over rows.
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& a) {
  detail::require(a.shape.size() == 2, "mean_rows: expected [N, C]");
  const std::int64_t rows = a.dim(0), cols = a.dim(1);
  Tensor<T> out(Shape{cols}, a.tape);
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t c = 0; c < cols; ++c) out[c] += a[r * cols + c];
  const T inv = T(1) / static_cast<T>(rows);
  for (std::int64_t c = 0; c < cols; ++c) out[c] *= inv;
  if (a.tape) {
    out.node = a.tape->record(
        cols, detail::live_parents({a.node}),
        [pa = a.node, rows, cols, inv](Tape<T>& tp, int self) {
          if (pa < 0) return;
          const auto& g = tp.grad_buf(self);
          auto& ga = tp.grad_buf(pa);
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t c = 0; c < cols; ++c)
              ga[r * cols + c] += g[c] * inv;
        });
  }
  detail::check_all_finite(out, "mean_rows");
  return out;
}

// ---- dense layers ----

// x: [N, Cin], w: [Cout, Cin], b: [Cout] -> [N, Cout]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require(x.shape.size() == 2 && w.shape.size() == 2 &&
                      b.shape.size() == 1,
                  "linear: bad ranks");
  const std::int64_t n = x.dim(0), cin = x.dim(1), cout = w.dim(0);
  detail::require(w.dim(1) == cin && b.dim(0) == cout,
                  "linear: shape mismatch");
  Tape<T>* tape = detail::merge_tape(x, w);
  if (!tape) tape = b.tape;
  Tensor<T> out(Shape{n, cout}, tape);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t o = 0; o < cout; ++o) {
      T acc = b[o];
      for (std::int64_t c = 0; c < cin; ++c)
        acc += x[i * cin + c] * w[o * cin + c];
      out[i * cout + o] = acc;
    }
  if (tape) {
    out.node = tape->record(
        out.numel(), detail::live_parents({x.node, w.node, b.node}),
        [px = x.node, pw = w.node, pb = b.node, vx = x.elems, vw = w.elems, n,
         cin, cout](Tape<T>& tp, int self) {
          const auto& g = tp.grad_buf(self);
          if (px >= 0) {
            auto& gx = tp.grad_buf(px);
            for (std::int64_t i = 0; i < n; ++i)
              for (std::int64_t o = 0; o < cout; ++o) {
                const T gv = g[i * cout + o];
                for (std::int64_t c = 0; c < cin; ++c)
                  gx[i * cin + c] += gv * (*vw)[static_cast<std::size_t>(o * cin + c)];
              }
          }
          if (pw >= 0) {
            auto& gw = tp.grad_buf(pw);
            for (std::int64_t i = 0; i < n; ++i)
              for (std::int64_t o = 0; o < cout; ++o) {
                const T gv = g[i * cout + o];
                for (std::int64_t c = 0; c < cin; ++c)
                  gw[o * cin + c] += gv * (*vx)[static_cast<std::size_t>(i * cin + c)];
              }
          }
          if (pb >= 0) {
            auto& gb = tp.grad_buf(pb);
            for (std::int64_t i = 0; i < n; ++i)
              for (std::int64_t o = 0; o < cout; ++o) gb[o] += g[i * cout + o];
          }
        });
  }
  detail::check_all_finite(out, "linear");
  return out;
}

// Inverted dropout; identity when training is off or p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, RngStream& rng, bool train) {
  detail::require(p >= 0.0 && p < 1.0, "dropout: p must be in [0, 1)");
  if (!train || p == 0.0) return x;
  const std::int64_t n = x.numel();
  auto mask = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n));
  const T keep_inv = static_cast<T>(1.0 / (1.0 - p));
  for (std::int64_t i = 0; i < n; ++i)
    (*mask)[static_cast<std::size_t>(i)] =
        rng.next_uniform() < p ? T(0) : keep_inv;
  Tensor<T> out(x.shape, x.tape);
  for (std::int64_t i = 0; i < n; ++i)
    out[i] = x[i] * (*mask)[static_cast<std::size_t>(i)];
  if (x.tape) {
    out.node = x.tape->record(
        n, detail::live_parents({x.node}),
        [px = x.node, mask, n](Tape<T>& tp, int self) {
          if (px < 0) return;
          const auto& g = tp.grad_buf(self);
          auto& gx = tp.grad_buf(px);
          for (std::int64_t i = 0; i < n; ++i)
            gx[i] += g[i] * (*mask)[static_cast<std::size_t>(i)];
        });
  }
  detail::check_all_finite(out, "dropout");
  return out;
}

// ---- convolutions ----

// x: [N, C, H, W], w: [Cout, C] -> [N, Cout, H, W]
template <typename T>
Tensor<T> pointwise_conv(const Tensor<T>& x, const Tensor<T>& w) {
  detail::require(x.shape.size() == 4 && w.shape.size() == 2,
                  "pointwise_conv: bad ranks");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::int64_t co = w.dim(0);
  detail::require(w.dim(1) == c, "pointwise_conv: channel mismatch");
  Tape<T>* tape = detail::merge_tape(x, w);
  Tensor<T> out(Shape{n, co, h, wd}, tape);
  const std::int64_t hw = h * wd;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t o = 0; o < co; ++o) {
      T* op = out.data() + (i * co + o) * hw;
      for (std::int64_t ci = 0; ci < c; ++ci) {
        const T wv = w[o * c + ci];
        if (wv == T(0)) continue;
        const T* xp = x.data() + (i * c + ci) * hw;
        for (std::int64_t s = 0; s < hw; ++s) op[s] += wv * xp[s];
      }
    }
  if (tape) {
    out.node = tape->record(
        out.numel(), detail::live_parents({x.node, w.node}),
        [px = x.node, pw = w.node, vx = x.elems, vw = w.elems, n, c, co,
         hw](Tape<T>& tp, int self) {
          const auto& g = tp.grad_buf(self);
          if (px >= 0) {
            auto& gx = tp.grad_buf(px);
            for (std::int64_t i = 0; i < n; ++i)
              for (std::int64_t o = 0; o < co; ++o) {
                const T* gp = g.data() + (i * co + o) * hw;
                for (std::int64_t ci = 0; ci < c; ++ci) {
                  const T wv = (*vw)[static_cast<std::size_t>(o * c + ci)];
                  if (wv == T(0)) continue;
                  T* xp = gx.data() + (i * c + ci) * hw;
                  for (std::int64_t s = 0; s < hw; ++s) xp[s] += wv * gp[s];
                }
              }
          }
          if (pw >= 0) {
            auto& gw = tp.grad_buf(pw);
            for (std::int64_t i = 0; i < n; ++i)
              for (std::int64_t o = 0; o < co; ++o) {
                const T* gp = g.data() + (i * co + o) * hw;
                for (std::int64_t ci = 0; ci < c; ++ci) {
                  const T* xp = (*vx).data() + (i * c + ci) * hw;
                  T acc = T(0);
                  for (std::int64_t s = 0; s < hw; ++s) acc += gp[s] * xp[s];
                  gw[o * c + ci] += acc;
                }
              }
          }
        });
  }
  detail::check_all_finite(out, "pointwise_conv");
  return out;
}

template <typename T>
Tensor<T> pointwise_conv(const Tensor<T>& x, const Tensor<T>& w,
                         const Tensor<T>& b) {
  detail::require(b.shape.size() == 1 && b.dim(0) == w.dim(0),
                  "pointwise_conv: bad bias shape");
  Tensor<T> y = pointwise_conv(x, w);
  // Broadcast-add the per-channel bias.
  const std::int64_t n = y.dim(0), co = y.dim(1), hw = y.dim(2) * y.dim(3);
  Tape<T>* tape = detail::merge_tape(y, b);
  Tensor<T> out(y.shape, tape);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t o = 0; o < co; ++o) {
      const T bv = b[o];
      const T* yp = y.data() + (i * co + o) * hw;
      T* op = out.data() + (i * co + o) * hw;
      for (std::int64_t s = 0; s < hw; ++s) op[s] = yp[s] + bv;
    }
  if (tape) {
    out.node = tape->record(
        out.numel(), detail::live_parents({y.node, b.node}),
        [py = y.node, pb = b.node, n, co, hw](Tape<T>& tp, int self) {
          const auto& g = tp.grad_buf(self);
          if (py >= 0) {
            auto& gy = tp.grad_buf(py);
            for (std::size_t i = 0; i < gy.size(); ++i) gy[i] += g[i];
          }
          if (pb >= 0) {
            auto& gb = tp.grad_buf(pb);
            for (std::int64_t i = 0; i < n; ++i)
              for (std::int64_t o = 0; o < co; ++o) {
                const T* gp = g.data() + (i * co + o) * hw;
                T acc = T(0);
                for (std::int64_t s = 0; s < hw; ++s) acc += gp[s];
                gb[o] += acc;
              }
          }
        });
  }
  detail::check_all_finite(out, "pointwise_conv");
  return out;
}

// x: [N, C, H, W], w: [C, k, k], odd k, zero padding k/2, stride 1 or 2.
// Output spatial extent is ceil(H / stride).
template <typename T>
Tensor<T> depthwise_conv(const Tensor<T>& x, const Tensor<T>& w,
                         std::int64_t stride) {
  detail::require(x.shape.size() == 4 && w.shape.size() == 3,
                  "depthwise_conv: bad ranks");
  detail::require(stride == 1 || stride == 2,
                  "depthwise_conv: stride must be 1 or 2");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::int64_t k = w.dim(1);
  detail::require(w.dim(0) == c && w.dim(2) == k,
                  "depthwise_conv: weight shape mismatch");
  detail::require(k >= 1 && k % 2 == 1, "depthwise_conv: kernel must be odd");
  const std::int64_t pad = k / 2;
  const std::int64_t ho = (h + 2 * pad - k) / stride + 1;
  const std::int64_t wo = (wd + 2 * pad - k) / stride + 1;
  Tape<T>* tape = detail::merge_tape(x, w);
  Tensor<T> out(Shape{n, c, ho, wo}, tape);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const T* xp = x.data() + (i * c + ci) * h * wd;
      const T* wp = w.data() + ci * k * k;
      T* op = out.data() + (i * c + ci) * ho * wo;
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          T acc = T(0);
          for (std::int64_t ky = 0; ky < k; ++ky) {
            const std::int64_t iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (std::int64_t kx = 0; kx < k; ++kx) {
              const std::int64_t ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= wd) continue;
              acc += wp[ky * k + kx] * xp[iy * wd + ix];
            }
          }
          op[oy * wo + ox] = acc;
        }
    }
  if (tape) {
    out.node = tape->record(
        out.numel(), detail::live_parents({x.node, w.node}),
        [px = x.node, pw = w.node, vx = x.elems, vw = w.elems, n, c, h, wd, k,
         pad, stride, ho, wo](Tape<T>& tp, int self) {
          const auto& g = tp.grad_buf(self);
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t ci = 0; ci < c; ++ci) {
              const T* gp = g.data() + (i * c + ci) * ho * wo;
              const T* xp = (*vx).data() + (i * c + ci) * h * wd;
              const T* wp = (*vw).data() + ci * k * k;
              T* gxp = px >= 0 ? tp.grad_buf(px).data() + (i * c + ci) * h * wd
                               : nullptr;
              T* gwp = pw >= 0 ? tp.grad_buf(pw).data() + ci * k * k : nullptr;
              for (std::int64_t oy = 0; oy < ho; ++oy)
                for (std::int64_t ox = 0; ox < wo; ++ox) {
                  const T gv = gp[oy * wo + ox];
                  if (gv == T(0)) continue;
                  for (std::int64_t ky = 0; ky < k; ++ky) {
                    const std::int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (std::int64_t kx = 0; kx < k; ++kx) {
                      const std::int64_t ix = ox * stride + kx - pad;
                      if (ix < 0 || ix >= wd) continue;
                      if (gxp) gxp[iy * wd + ix] += gv * wp[ky * k + kx];
                      if (gwp) gwp[ky * k + kx] += gv * xp[iy * wd + ix];
                    }
                  }
                }
            }
        });
  }
  detail::check_all_finite(out, "depthwise_conv");
  return out;
}

// [N, C, H, W] -> [N, C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require(x.shape.size() == 4, "global_avg_pool: expected 4-d input");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  detail::require(hw > 0, "global_avg_pool: empty spatial extent");
  Tape<T>* tape = x.tape;
  Tensor<T> out(Shape{n, c}, tape);
  const T inv = T(1) / static_cast<T>(hw);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const T* xp = x.data() + (i * c + ci) * hw;
      T acc = T(0);
      for (std::int64_t s = 0; s < hw; ++s) acc += xp[s];
      out[i * c + ci] = acc * inv;
    }
  if (tape) {
    out.node = tape->record(
        out.numel(), detail::live_parents({x.node}),
        [px = x.node, n, c, hw, inv](Tape<T>& tp, int self) {
          if (px < 0) return;
          const auto& g = tp.grad_buf(self);
          auto& gx = tp.grad_buf(px);
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t ci = 0; ci < c; ++ci) {
              const T gv = g[i * c + ci] * inv;
              T* xp = gx.data() + (i * c + ci) * hw;
              for (std::int64_t s = 0; s < hw; ++s) xp[s] += gv;
            }
        });
  }
  detail::check_all_finite(out, "global_avg_pool");
  return out;
}

// Same-size 1-d convolution along the channel axis with zero padding.
// v: [N, C], w: [k] (odd), b: [1] -> [N, C]
template <typename T>
Tensor<T> conv1d_same(const Tensor<T>& v, const Tensor<T>& w,
                      const Tensor<T>& b) {
  detail::require(v.shape.size() == 2 && w.shape.size() == 1 &&
                      b.shape.size() == 1 && b.dim(0) == 1,
                  "conv1d_same: bad shapes");
  const std::int64_t n = v.dim(0), c = v.dim(1), k = w.dim(0);
  detail::require(k >= 1 && k % 2 == 1, "conv1d_same: kernel must be odd");
  const std::int64_t pad = k / 2;
  Tape<T>* tape = detail::merge_tape(v, w);
  if (!tape) tape = b.tape;
  Tensor<T> out(Shape{n, c}, tape);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ci = 0; ci < c; ++ci) {
      T acc = b[0];
      for (std::int64_t j = 0; j < k; ++j) {
        const std::int64_t src = ci + j - pad;
        if (src < 0 || src >= c) continue;
        acc += w[j] * v[i * c + src];
      }
      out[i * c + ci] = acc;
    }
  if (tape) {
    out.node = tape->record(
        out.numel(), detail::live_parents({v.node, w.node, b.node}),
        [pv = v.node, pw = w.node, pb = b.node, vv = v.elems, vw = w.elems, n,
         c, k, pad](Tape<T>& tp, int self) {
          const auto& g = tp.grad_buf(self);
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t ci = 0; ci < c; ++ci) {
              const T gv = g[i * c + ci];
              if (pb >= 0) tp.grad_buf(pb)[0] += gv;
              for (std::int64_t j = 0; j < k; ++j) {
                const std::int64_t src = ci + j - pad;
                if (src < 0 || src >= c) continue;
                if (pv >= 0)
                  tp.grad_buf(pv)[i * c + src] +=
                      gv * (*vw)[static_cast<std::size_t>(j)];
                if (pw >= 0)
                  tp.grad_buf(pw)[j] +=
                      gv * (*vv)[static_cast<std::size_t>(i * c + src)];
              }
            }
        });
  }
  detail::check_all_finite(out, "conv1d_same");
  return out;
}

// ---- softmax / loss ----

// Softmax over the last axis, numerically stabilized.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  detail::require(!x.shape.empty(), "softmax: scalar input");
  const std::int64_t d = x.shape.back();
  const std::int64_t rows = x.numel() / d;
  Tensor<T> out(x.shape, x.tape);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xp = x.data() + r * d;
    T* op = out.data() + r * d;
    T mx = xp[0];
    for (std::int64_t i = 1; i < d; ++i) mx = std::max(mx, xp[i]);
    T z = T(0);
    for (std::int64_t i = 0; i < d; ++i) {
      op[i] = std::exp(xp[i] - mx);
      z += op[i];
    }
    const T inv = T(1) / z;
    for (std::int64_t i = 0; i < d; ++i) op[i] *= inv;
  }
  if (x.tape) {
    out.node = x.tape->record(
        out.numel(), detail::live_parents({x.node}),
        [px = x.node, vo = out.elems, rows, d](Tape<T>& tp, int self) {
          if (px < 0) return;
          const auto& g = tp.grad_buf(self);
          auto& gx = tp.grad_buf(px);
          for (std::int64_t r = 0; r < rows; ++r) {
            const T* p = (*vo).data() + r * d;
            const T* gp = g.data() + r * d;
            T dot = T(0);
            for (std::int64_t i = 0; i < d; ++i) dot += gp[i] * p[i];
            for (std::int64_t i = 0; i < d; ++i)
              gx[r * d + i] += p[i] * (gp[i] - dot);
          }
        });
  }
  detail::check_all_finite(out, "softmax");
  return out;
}

// Mean cross entropy of logits [N, K] against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits,
                        const std::vector<std::int64_t>& labels) {
  detail::require(logits.shape.size() == 2, "cross_entropy: expected [N, K]");
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  detail::require(static_cast<std::int64_t>(labels.size()) == n,
                  "cross_entropy: label count mismatch");
  for (auto y : labels)
    detail::require(y >= 0 && y < k, "cross_entropy: label out of range");
  Tensor<T> out(Shape{1}, logits.tape);
  auto probs = std::make_shared<std::vector<T>>(
      static_cast<std::size_t>(n * k));
  T loss = T(0);
  for (std::int64_t i = 0; i < n; ++i) {
    const T* xp = logits.data() + i * k;
    T mx = xp[0];
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, xp[j]);
    T z = T(0);
    for (std::int64_t j = 0; j < k; ++j) z += std::exp(xp[j] - mx);
    const T lse = mx + std::log(z);
    loss += lse - xp[labels[static_cast<std::size_t>(i)]];
    for (std::int64_t j = 0; j < k; ++j)
      (*probs)[static_cast<std::size_t>(i * k + j)] = std::exp(xp[j] - lse);
  }
  out[0] = loss / static_cast<T>(n);
  if (logits.tape) {
    out.node = logits.tape->record(
        1, detail::live_parents({logits.node}),
        [px = logits.node, probs, labels, n, k](Tape<T>& tp, int self) {
          if (px < 0) return;
          const T g = tp.grad_buf(self)[0] / static_cast<T>(n);
          auto& gx = tp.grad_buf(px);
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < k; ++j) {
              T v = (*probs)[static_cast<std::size_t>(i * k + j)];
              if (j == labels[static_cast<std::size_t>(i)]) v -= T(1);
              gx[i * k + j] += g * v;
            }
        });
  }
  detail::check_all_finite(out, "cross_entropy");
  return out;
}

// ---- channel plumbing ----

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape.size() == 4 && b.shape.size() == 4,
                  "concat_channels: expected 4-d inputs");
  detail::require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) &&
                      a.dim(3) == b.dim(3),
                  "concat_channels: shape mismatch");
  const std::int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1),
                     hw = a.dim(2) * a.dim(3);
  Tape<T>* tape = detail::merge_tape(a, b);
  Tensor<T> out(Shape{n, ca + cb, a.dim(2), a.dim(3)}, tape);
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(a.data() + i * ca * hw, ca * hw,
                out.data() + i * (ca + cb) * hw);
    std::copy_n(b.data() + i * cb * hw, cb * hw,
                out.data() + (i * (ca + cb) + ca) * hw);
  }
  if (tape) {
    out.node = tape->record(
        out.numel(), detail::live_parents({a.node, b.node}),
        [pa = a.node, pb = b.node, n, ca, cb, hw](Tape<T>& tp, int self) {
          const auto& g = tp.grad_buf(self);
          for (std::int64_t i = 0; i < n; ++i) {
            if (pa >= 0) {
              auto& ga = tp.grad_buf(pa);
              const T* gp = g.data() + i * (ca + cb) * hw;
              T* ap = ga.data() + i * ca * hw;
              for (std::int64_t s = 0; s < ca * hw; ++s) ap[s] += gp[s];
            }
            if (pb >= 0) {
              auto& gb = tp.grad_buf(pb);
              const T* gp = g.data() + (i * (ca + cb) + ca) * hw;
              T* bp = gb.data() + i * cb * hw;
              for (std::int64_t s = 0; s < cb * hw; ++s) bp[s] += gp[s];
            }
          }
        });
  }
  detail::check_all_finite(out, "concat_channels");
  return out;
}

// out[:, s] = x[:, idx[s]]; duplicate sources accumulate on backward.
template <typename T>
Tensor<T> gather_channels(const Tensor<T>& x,
                          const std::vector<std::int64_t>& idx) {
  detail::require(x.shape.size() == 4, "gather_channels: expected 4-d input");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (auto s : idx)
    detail::require(s >= 0 && s < c, "gather_channels: index out of range");
  const std::int64_t k = static_cast<std::int64_t>(idx.size());
  Tensor<T> out(Shape{n, k, x.dim(2), x.dim(3)}, x.tape);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t s = 0; s < k; ++s)
      std::copy_n(x.data() + (i * c + idx[static_cast<std::size_t>(s)]) * hw,
                  hw, out.data() + (i * k + s) * hw);
  if (x.tape) {
    out.node = x.tape->record(
        out.numel(), detail::live_parents({x.node}),
        [px = x.node, idx, n, c, k, hw](Tape<T>& tp, int self) {
          if (px < 0) return;
          const auto& g = tp.grad_buf(self);
          auto& gx = tp.grad_buf(px);
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t s = 0; s < k; ++s) {
              const T* gp = g.data() + (i * k + s) * hw;
              T* xp = gx.data() +
                      (i * c + idx[static_cast<std::size_t>(s)]) * hw;
              for (std::int64_t t = 0; t < hw; ++t) xp[t] += gp[t];
            }
        });
  }
  detail::check_all_finite(out, "gather_channels");
  return out;
}

// ---- batch norm ----

// Per-channel batch normalization with affine parameters and running stats.
// Accepts [N, C, H, W] or [N, C]. Running variance is the biased batch
// estimate, updated as running = (1 - momentum) * running + momentum * batch.
template <typename T>
class BatchNorm {
 public:
  BatchNorm(std::string name, std::int64_t channels, T eps = T(1e-5),
            T momentum = T(0.1))
      : gamma(name + ".gamma",
              Tensor<T>::from_values(
                  {channels},
                  std::vector<T>(static_cast<std::size_t>(channels), T(1)))),
        beta(name + ".beta", Tensor<T>({channels})),
        running_mean(static_cast<std::size_t>(channels), T(0)),
        running_var(static_cast<std::size_t>(channels), T(1)),
        eps_(eps), momentum_(momentum), channels_(channels) {}

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x, bool train) {
    detail::require(x.shape.size() == 4 || x.shape.size() == 2,
                    "BatchNorm: expected [N, C, H, W] or [N, C]");
    detail::require(x.dim(1) == channels_, "BatchNorm: channel mismatch");
    const std::int64_t n = x.dim(0), c = channels_;
    const std::int64_t hw = x.shape.size() == 4 ? x.dim(2) * x.dim(3) : 1;
    const std::int64_t m = n * hw;
    detail::require(m > 0, "BatchNorm: empty batch");

    Tensor<T> gt, bt;
    if (tape) {
      gt = tape->leaf(gamma);
      bt = tape->leaf(beta);
    } else {
      gt = gamma.value;
      bt = beta.value;
    }

    std::vector<T> mean(static_cast<std::size_t>(c), T(0));
    std::vector<T> var(static_cast<std::size_t>(c), T(0));
    if (train) {
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t ci = 0; ci < c; ++ci) {
          const T* xp = x.data() + (i * c + ci) * hw;
          T acc = T(0);
          for (std::int64_t s = 0; s < hw; ++s) acc += xp[s];
          mean[static_cast<std::size_t>(ci)] += acc;
        }
      for (auto& v : mean) v /= static_cast<T>(m);
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t ci = 0; ci < c; ++ci) {
          const T* xp = x.data() + (i * c + ci) * hw;
          const T mu = mean[static_cast<std::size_t>(ci)];
          T acc = T(0);
          for (std::int64_t s = 0; s < hw; ++s) {
            const T d = xp[s] - mu;
            acc += d * d;
          }
          var[static_cast<std::size_t>(ci)] += acc;
        }
      for (auto& v : var) v /= static_cast<T>(m);
      for (std::int64_t ci = 0; ci < c; ++ci) {
        const auto i = static_cast<std::size_t>(ci);
        running_mean[i] =
            (T(1) - momentum_) * running_mean[i] + momentum_ * mean[i];
        running_var[i] =
            (T(1) - momentum_) * running_var[i] + momentum_ * var[i];
      }
    } else {
      mean = running_mean;
      var = running_var;
    }

    auto inv_std = std::make_shared<std::vector<T>>(
        static_cast<std::size_t>(c));
    for (std::int64_t ci = 0; ci < c; ++ci)
      (*inv_std)[static_cast<std::size_t>(ci)] =
          T(1) / std::sqrt(var[static_cast<std::size_t>(ci)] + eps_);
    auto mean_sp = std::make_shared<std::vector<T>>(std::move(mean));

    Tensor<T> out(x.shape, tape);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t ci = 0; ci < c; ++ci) {
        const auto cs = static_cast<std::size_t>(ci);
        const T mu = (*mean_sp)[cs], is = (*inv_std)[cs];
        const T gv = gt[ci], bv = bt[ci];
        const T* xp = x.data() + (i * c + ci) * hw;
        T* op = out.data() + (i * c + ci) * hw;
        for (std::int64_t s = 0; s < hw; ++s)
          op[s] = (xp[s] - mu) * is * gv + bv;
      }

    if (tape) {
      out.node = tape->record(
          out.numel(),
          detail::live_parents({x.node, gt.node, bt.node}),
          [px = x.node, pg = gt.node, pb = bt.node, vx = x.elems,
           vg = gt.elems, mean_sp, inv_std, train, n, c, hw,
           m](Tape<T>& tp, int self) {
            const auto& g = tp.grad_buf(self);
            // gamma and beta.
            for (std::int64_t ci = 0; ci < c; ++ci) {
              const auto cs = static_cast<std::size_t>(ci);
              const T mu = (*mean_sp)[cs], is = (*inv_std)[cs];
              T dg = T(0), db = T(0);
              for (std::int64_t i = 0; i < n; ++i) {
                const T* gp = g.data() + (i * c + ci) * hw;
                const T* xp = (*vx).data() + (i * c + ci) * hw;
                for (std::int64_t s = 0; s < hw; ++s) {
                  dg += gp[s] * (xp[s] - mu) * is;
                  db += gp[s];
                }
              }
              if (pg >= 0) tp.grad_buf(pg)[cs] += dg;
              if (pb >= 0) tp.grad_buf(pb)[cs] += db;
              if (px < 0) continue;
              auto& gx = tp.grad_buf(px);
              const T gamma_v = (*vg)[cs];
              if (!train) {
                const T scale_v = gamma_v * is;
                for (std::int64_t i = 0; i < n; ++i) {
                  const T* gp = g.data() + (i * c + ci) * hw;
                  T* op = gx.data() + (i * c + ci) * hw;
                  for (std::int64_t s = 0; s < hw; ++s)
                    op[s] += gp[s] * scale_v;
                }
                continue;
              }
              // Train mode: batch statistics depend on x.
              // dxhat = g * gamma; sum1 = sum(dxhat), sum2 = sum(dxhat * xhat)
              T sum1 = T(0), sum2 = T(0);
              for (std::int64_t i = 0; i < n; ++i) {
                const T* gp = g.data() + (i * c + ci) * hw;
                const T* xp = (*vx).data() + (i * c + ci) * hw;
                for (std::int64_t s = 0; s < hw; ++s) {
                  const T dxhat = gp[s] * gamma_v;
                  sum1 += dxhat;
                  sum2 += dxhat * (xp[s] - mu) * is;
                }
              }
              const T inv_m = T(1) / static_cast<T>(m);
              for (std::int64_t i = 0; i < n; ++i) {
                const T* gp = g.data() + (i * c + ci) * hw;
                const T* xp = (*vx).data() + (i * c + ci) * hw;
                T* op = gx.data() + (i * c + ci) * hw;
                for (std::int64_t s = 0; s < hw; ++s) {
                  const T dxhat = gp[s] * gamma_v;
                  const T xhat = (xp[s] - mu) * is;
                  op[s] += is * (dxhat - inv_m * (sum1 + xhat * sum2));
                }
              }
            }
          });
    }
    detail::check_all_finite(out, "batch_norm");
    return out;
  }

  std::vector<Parameter<T>*> params() { return {&gamma, &beta}; }

  // Momentum 1.0 makes one training pass copy the batch statistics into the
  // running ones exactly; tests use this for train/eval path equivalence.
  void set_momentum(T m) { momentum_ = m; }

  Parameter<T> gamma, beta;
  std::vector<T> running_mean, running_var;

 private:
  T eps_;
  T momentum_;
  std::int64_t channels_;
};

// ---- optimizer ----

// SGD with classical momentum: v = mu * v + g; p -= lr * v.
template <typename T>
class Sgd {
 public:
  Sgd(T lr, T momentum) : lr_(lr), momentum_(momentum) {}

  void step(const std::vector<Parameter<T>*>& params) {
    for (Parameter<T>* p : params) {
      auto& v = velocity_[p];
      if (v.empty()) v.assign(p->grad.size(), T(0));
      detail::require(v.size() == p->grad.size(),
                      "Sgd::step: parameter size changed");
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = momentum_ * v[i] + p->grad[i];
        (*p->value.elems)[i] -= lr_ * v[i];
      }
    }
  }

  static void zero_grad(const std::vector<Parameter<T>*>& params) {
    for (Parameter<T>* p : params) p->zero_grad();
  }

  T lr() const { return lr_; }
  void set_lr(T lr) { lr_ = lr; }

 private:
  T lr_;
  T momentum_;
  std::unordered_map<Parameter<T>*, std::vector<T>> velocity_;
};

// ---- init helpers ----

template <typename T>
void fill_normal(Tensor<T>& t, RngStream& rng, double stddev) {
  for (auto& v : *t.elems) v = static_cast<T>(rng.next_normal() * stddev);
}

template <typename T>
void fill_uniform(Tensor<T>& t, RngStream& rng, double lo, double hi) {
  for (auto& v : *t.elems)
    v = static_cast<T>(lo + (hi - lo) * rng.next_uniform());
}

}  // namespace ach
