// Copyright (c) 2026 the lrc authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with tape-based reverse-mode autodiff. The graph is
// held implicitly: each op output keeps shared pointers to its parents plus a
// closure that scatters the output gradient into them. backward() walks the
// nodes once in reverse topological order. Graphs are rebuilt every step;
// only leaf tensors (weights, projections) outlive a step.

#pragma once

#include <algorithm>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lrc/common.hpp"

namespace lrc {

template <typename S>
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;  // empty until backward touches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::vector<S>& ensure_grad() {
      if (grad.empty()) grad.assign(value.size(), S(0));
      return grad;
    }
  };

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->value.assign(static_cast<size_t>(shape_numel(t.n_->shape)), S(0));
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, S fill, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.n_->value.begin(), t.n_->value.end(), fill);
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("from_data: " + shape_str(shape) + " does not hold " +
                       std::to_string(data.size()) + " values");
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(data);
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(S v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.n_->value) x = static_cast<S>(rng.normal() * stddev);
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t numel() const { return static_cast<int64_t>(n_->value.size()); }
  int64_t dim(size_t i) const { return n_->shape[i]; }
  size_t rank() const { return n_->shape.size(); }

  std::vector<S>& value() { return n_->value; }
  const std::vector<S>& value() const { return n_->value; }
  S* data() { return n_->value.data(); }
  const S* data() const { return n_->value.data(); }

  bool requires_grad() const { return n_ && n_->requires_grad; }
  void set_requires_grad(bool v) {
    if (n_->backward)
      throw ContractError("requires_grad can only be toggled on leaf tensors");
    n_->requires_grad = v;
  }

  bool has_grad() const { return n_ && !n_->grad.empty(); }
  const std::vector<S>& grad() const {
    if (!has_grad()) throw ContractError("gradient not computed for this tensor");
    return n_->grad;
  }
  std::vector<S>& mutable_grad() { return n_->ensure_grad(); }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), S(0));
  }

  // Detached copy: same values, no history, never requires grad.
  Tensor detach() const { return from_data(n_->shape, n_->value, false); }

  uintptr_t node_id() const { return reinterpret_cast<uintptr_t>(n_.get()); }
  bool same_storage(const Tensor& other) const { return n_ == other.n_; }

  S item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return n_->value[0];
  }

  bool all_finite() const {
    for (S v : n_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::shared_ptr<Node> node() const { return n_; }

  // Builds an op output. parents are recorded only when gradient can flow.
  static Tensor make_op(Shape shape, std::vector<S> data, std::vector<Tensor> parents,
                        std::function<void(Node&)> backward) {
    Tensor t = from_data(std::move(shape), std::move(data));
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    if (needs) {
      t.n_->requires_grad = true;
      t.n_->parents.reserve(parents.size());
      for (auto& p : parents) t.n_->parents.push_back(p.n_);
      t.n_->backward = std::move(backward);
    }
    return t;
  }

 private:
  std::shared_ptr<Node> n_;
};

namespace detail {

// C(m x n) += A(m x k) * B(k x n)
template <typename S>
void mm_nn_acc(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  parallel_for(m, std::max<int64_t>(1, (1 << 16) / std::max<int64_t>(1, k * n)),
               [=](int64_t r0, int64_t r1) {
                 for (int64_t i = r0; i < r1; ++i) {
                   S* crow = c + i * n;
                   const S* arow = a + i * k;
                   for (int64_t p = 0; p < k; ++p) {
                     S av = arow[p];
                     const S* brow = b + p * n;
                     for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
                   }
                 }
               });
}

// C(m x n) += A(m x k) * B(n x k)^T
template <typename S>
void mm_nt_acc(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  parallel_for(m, std::max<int64_t>(1, (1 << 16) / std::max<int64_t>(1, k * n)),
               [=](int64_t r0, int64_t r1) {
                 for (int64_t i = r0; i < r1; ++i) {
                   const S* arow = a + i * k;
                   S* crow = c + i * n;
                   for (int64_t j = 0; j < n; ++j) {
                     const S* brow = b + j * k;
                     S acc = S(0);
                     for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
                     crow[j] += acc;
                   }
                 }
               });
}

// C(m x n) += A(k x m)^T * B(k x n)
template <typename S>
void mm_tn_acc(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  parallel_for(m, std::max<int64_t>(1, (1 << 16) / std::max<int64_t>(1, k * n)),
               [=](int64_t r0, int64_t r1) {
                 for (int64_t i = r0; i < r1; ++i) {
                   S* crow = c + i * n;
                   for (int64_t p = 0; p < k; ++p) {
                     S av = a[p * m + i];
                     const S* brow = b + p * n;
                     for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
                   }
                 }
               });
}

template <typename S>
S stable_sigmoid(S x) {
  if (x >= S(0)) {
    S e = std::exp(-x);
    return S(1) / (S(1) + e);
  }
  S e = std::exp(x);
  return e / (S(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> out(a.value());
  const S* bp = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bp[i];
  using Node = typename Tensor<S>::Node;
  return Tensor<S>::make_op(a.shape(), std::move(out), {a, b}, [](Node& o) {
    for (int pi = 0; pi < 2; ++pi) {
      auto& p = *o.parents[pi];
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> out(a.value());
  const S* bp = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bp[i];
  using Node = typename Tensor<S>::Node;
  return Tensor<S>::make_op(a.shape(), std::move(out), {a, b}, [](Node& o) {
    if (o.parents[0]->requires_grad) {
      auto& g = o.parents[0]->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (o.parents[1]->requires_grad) {
      auto& g = o.parents[1]->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> out(a.value());
  const S* bp = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bp[i];
  using Node = typename Tensor<S>::Node;
  return Tensor<S>::make_op(a.shape(), std::move(out), {a, b}, [](Node& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pa.value[i];
    }
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  std::vector<S> out(a.value());
  for (auto& v : out) v *= c;
  using Node = typename Tensor<S>::Node;
  return Tensor<S>::make_op(a.shape(), std::move(out), {a}, [c](Node& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * c;
  });
}

template <typename S>
Tensor<S> silu(const Tensor<S>& x) {
  std::vector<S> out(x.value());
  for (auto& v : out) v = v * detail::stable_sigmoid(v);
  using Node = typename Tensor<S>::Node;
  return Tensor<S>::make_op(x.shape(), std::move(out), {x}, [](Node& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) {
      S xv = p.value[i];
      S sg = detail::stable_sigmoid(xv);
      g[i] += o.grad[i] * sg * (S(1) + xv * (S(1) - sg));
    }
  });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  S acc = S(0);
  for (S v : x.value()) acc += v;
  using Node = typename Tensor<S>::Node;
  return Tensor<S>::make_op({1}, {acc}, {x}, [](Node& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0];
  });
}

// Exp-normalization along `axis` with max subtraction. Negative axis counts
// from the back.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis = -1) {
  const auto& sh = x.shape();
  int r = static_cast<int>(sh.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(sh));
  int64_t len = sh[static_cast<size_t>(axis)];
  int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < r; ++i) inner *= sh[static_cast<size_t>(i)];
  for (int i = 0; i < axis; ++i) outer *= sh[static_cast<size_t>(i)];

  std::vector<S> out(x.value());
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      S* base = out.data() + o * len * inner + in;
      S mx = base[0];
      for (int64_t j = 1; j < len; ++j) mx = std::max(mx, base[j * inner]);
      S total = S(0);
      for (int64_t j = 0; j < len; ++j) {
        S e = std::exp(base[j * inner] - mx);
        base[j * inner] = e;
        total += e;
      }
      for (int64_t j = 0; j < len; ++j) base[j * inner] /= total;
    }
  }
  using Node = typename Tensor<S>::Node;
  return Tensor<S>::make_op(sh, std::move(out), {x},
                            [len, inner, outer](Node& o) {
                              auto& p = *o.parents[0];
                              if (!p.requires_grad) return;
                              auto& g = p.ensure_grad();
                              for (int64_t ou = 0; ou < outer; ++ou) {
                                for (int64_t in = 0; in < inner; ++in) {
                                  int64_t base = ou * len * inner + in;
                                  S dot = S(0);
                                  for (int64_t j = 0; j < len; ++j)
                                    dot += o.grad[base + j * inner] * o.value[base + j * inner];
                                  for (int64_t j = 0; j < len; ++j) {
                                    int64_t idx = base + j * inner;
                                    g[idx] += (o.grad[idx] - dot) * o.value[idx];
                                  }
                                }
                              }
                            });
}

// ---------------------------------------------------------------------------
// Matrix products. matmul computes A*B where A is [..., m, k] and B is [k, n];
// leading dimensions of A are treated as stacked rows. linear computes x*W^T
// for W stored [n, k], the layout every attention/FFN weight uses.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() < 2 || b.rank() != 2)
    throw ShapeError("matmul: need [...,m,k] x [k,n], got " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  int64_t k = a.shape().back();
  if (k != b.dim(0))
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  int64_t n = b.dim(1);
  int64_t rows = a.numel() / k;
  Shape out_shape(a.shape());
  out_shape.back() = n;

  std::vector<S> out(static_cast<size_t>(rows * n), S(0));
  detail::mm_nn_acc(a.data(), b.data(), out.data(), rows, k, n);

  using Node = typename Tensor<S>::Node;
  return Tensor<S>::make_op(std::move(out_shape), std::move(out), {a, b},
                            [rows, k, n](Node& o) {
                              auto& pa = *o.parents[0];
                              auto& pb = *o.parents[1];
                              if (pa.requires_grad)  // dA = dC * B^T
                                detail::mm_nt_acc(o.grad.data(), pb.value.data(),
                                                  pa.ensure_grad().data(), rows, n, k);
                              if (pb.requires_grad)  // dB = A^T * dC
                                detail::mm_tn_acc(pa.value.data(), o.grad.data(),
                                                  pb.ensure_grad().data(), k, rows, n);
                            });
}

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w) {
  if (x.rank() < 1 || w.rank() != 2)
    throw ShapeError("linear: need [...,k] x [n,k], got " + shape_str(x.shape()) + " x " +
                     shape_str(w.shape()));
  int64_t k = x.shape().back();
  if (k != w.dim(1))
    throw ShapeError("linear: inner dimensions disagree, " + shape_str(x.shape()) + " x " +
                     shape_str(w.shape()));
  int64_t n = w.dim(0);
  int64_t rows = x.numel() / k;
  Shape out_shape(x.shape());
  out_shape.back() = n;

  std::vector<S> out(static_cast<size_t>(rows * n), S(0));
  detail::mm_nt_acc(x.data(), w.data(), out.data(), rows, k, n);

  using Node = typename Tensor<S>::Node;
  return Tensor<S>::make_op(std::move(out_shape), std::move(out), {x, w},
                            [rows, k, n](Node& o) {
                              auto& px = *o.parents[0];
                              auto& pw = *o.parents[1];
                              if (px.requires_grad)  // dx = dy * W
                                detail::mm_nn_acc(o.grad.data(), pw.value.data(),
                                                  px.ensure_grad().data(), rows, n, k);
                              if (pw.requires_grad)  // dW = dy^T * x
                                detail::mm_tn_acc(o.grad.data(), px.value.data(),
                                                  pw.ensure_grad().data(), n, rows, k);
                            });
}

// ---------------------------------------------------------------------------
// backward: reverse-mode sweep from a scalar loss. Every reachable node is
// visited exactly once; gradients accumulate (sum) across fan-out. Leaves
// with requires_grad=false are left untouched.
// ---------------------------------------------------------------------------

template <typename S>
void backward(const Tensor<S>& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;  // constant: nothing depends on parameters

  using NodePtr = std::shared_ptr<typename Tensor<S>::Node>;
  std::vector<NodePtr> order;
  std::unordered_set<const void*> seen;
  // Iterative post-order DFS; order ends up topological (parents first).
  std::vector<std::pair<NodePtr, size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    NodePtr node = stack.back().first;
    size_t next = stack.back().second;
    if (next < node->parents.size()) {
      stack.back().second = next + 1;
      NodePtr child = node->parents[next];
      if (child->requires_grad && seen.insert(child.get()).second)
        stack.emplace_back(std::move(child), 0);
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad()[0] = S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto& node = **it;
    if (node.backward && !node.grad.empty()) node.backward(node);
  }
}

// ---------------------------------------------------------------------------
// grad_check: autodiff vs central finite differences, per parameter block.
// The callable must rebuild the graph from the current parameter values and
// return the scalar loss; it is run twice up front to reject nondeterminism.
// samples_per_block == 0 checks every entry.
// ---------------------------------------------------------------------------

struct GradCheckBlock {
  std::string name;
  double max_rel_err = 0.0;
  int checked = 0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::vector<GradCheckBlock> blocks;
  bool within(double tol) const { return max_rel_err <= tol; }
};

template <typename S, typename F>
GradCheckReport grad_check(F&& f, std::vector<std::pair<std::string, Tensor<S>>> params,
                           double step, int samples_per_block = 0, uint64_t seed = 0x5eed) {
  Tensor<S> l0 = f();
  if (l0.numel() != 1) throw ContractError("grad_check expects a scalar-valued function");
  Tensor<S> l1 = f();
  if (l0.value() != l1.value())
    throw ContractError("grad_check: function is not deterministic under re-evaluation");

  for (auto& [name, p] : params) p.zero_grad();
  backward(l0);

  std::vector<std::vector<S>> ad_grads;
  ad_grads.reserve(params.size());
  for (auto& [name, p] : params)
    ad_grads.push_back(p.has_grad() ? p.grad() : std::vector<S>(static_cast<size_t>(p.numel()), S(0)));

  Rng rng(seed);
  GradCheckReport report;
  for (size_t bi = 0; bi < params.size(); ++bi) {
    auto& [name, p] = params[bi];
    GradCheckBlock block{name, 0.0, 0};
    int64_t n = p.numel();
    std::vector<int64_t> idxs;
    if (samples_per_block <= 0 || samples_per_block >= n) {
      idxs.resize(static_cast<size_t>(n));
      std::iota(idxs.begin(), idxs.end(), 0);
    } else {
      std::unordered_set<int64_t> picked;
      while (static_cast<int>(picked.size()) < samples_per_block)
        picked.insert(static_cast<int64_t>(rng.below(static_cast<uint64_t>(n))));
      idxs.assign(picked.begin(), picked.end());
      std::sort(idxs.begin(), idxs.end());
    }
    for (int64_t i : idxs) {
      S saved = p.value()[static_cast<size_t>(i)];
      p.value()[static_cast<size_t>(i)] = saved + static_cast<S>(step);
      double fp = static_cast<double>(f().item());
      p.value()[static_cast<size_t>(i)] = saved - static_cast<S>(step);
      double fm = static_cast<double>(f().item());
      p.value()[static_cast<size_t>(i)] = saved;
      double fd = (fp - fm) / (2.0 * step);
      double ad = static_cast<double>(ad_grads[bi][static_cast<size_t>(i)]);
      double denom = std::max({std::abs(fd), std::abs(ad), 1e-8});
      double rel = std::abs(fd - ad) / denom;
      if (std::abs(fd) < 1e-8 && std::abs(ad) < 1e-8) rel = 0.0;
      block.max_rel_err = std::max(block.max_rel_err, rel);
      ++block.checked;
    }
    report.max_rel_err = std::max(report.max_rel_err, block.max_rel_err);
    report.blocks.push_back(std::move(block));
  }
  return report;
}

}  // namespace lrc
