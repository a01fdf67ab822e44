#pragma once

// Tape-based reverse-mode differentiation over the fixed op set the grounding
// model needs. A Graph owns every intermediate value of one forward pass;
// Var is a cheap handle into it.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mlground/error.hpp"
#include "mlground/ops.hpp"
#include "mlground/tensor.hpp"

namespace mlground {

template <typename Scalar>
struct Parameter {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  // Weight matrices take part in the l2 penalty; biases and mixing scalars
  // do not.
  bool regularized = false;
};

// Named trainable tensors in insertion order.
template <typename Scalar>
class ParamSet {
 public:
  Parameter<Scalar>& add(const std::string& name, Tensor<Scalar> value,
                         bool regularized) {
    if (params_.count(name)) {
      throw ValueError(detail::concat("duplicate parameter name '", name, "'"));
    }
    order_.push_back(name);
    Parameter<Scalar> p;
    p.grad = Tensor<Scalar>(value.shape());
    p.value = std::move(value);
    p.regularized = regularized;
    return params_.emplace(name, std::move(p)).first->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  Parameter<Scalar>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) {
      throw ValueError(detail::concat("unknown parameter '", name, "'"));
    }
    return it->second;
  }
  const Parameter<Scalar>& at(const std::string& name) const {
    return const_cast<ParamSet*>(this)->at(name);
  }

  const std::vector<std::string>& names() const { return order_; }
  std::size_t size() const { return order_.size(); }

  void zero_grad() {
    for (auto& [name, p] : params_) p.grad = Tensor<Scalar>(p.value.shape());
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params_) n += p.value.size();
    return n;
  }

  template <typename Other>
  ParamSet<Other> cast() const {
    ParamSet<Other> out;
    for (const auto& name : order_) {
      const auto& p = params_.at(name);
      out.add(name, p.value.template cast<Other>(), p.regularized);
    }
    return out;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.order_ != b.order_) return false;
    for (const auto& name : a.order_) {
      if (!(a.params_.at(name).value == b.params_.at(name).value)) return false;
    }
    return true;
  }

 private:
  std::vector<std::string> order_;
  std::map<std::string, Parameter<Scalar>> params_;
};

template <typename Scalar>
class Graph;

template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Graph<Scalar>* g, std::size_t id) : graph_(g), id_(id) {}

  const Tensor<Scalar>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  Graph<Scalar>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph<Scalar>* graph_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
class Graph {
 public:
  using Backprop = std::function<void(Graph&, std::size_t)>;

  // With record == false no backward closures are kept (inference mode).
  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<Scalar> constant(Tensor<Scalar> value) {
    return push(std::move(value), false, nullptr, nullptr);
  }

  Var<Scalar> param(Parameter<Scalar>& p) {
    return push(p.value, record_, &p, nullptr);
  }

  // Records an op result. `backprop` is only kept when a parent needs a
  // gradient.
  Var<Scalar> make(Tensor<Scalar> value, std::initializer_list<Var<Scalar>> parents,
                   Backprop backprop) {
    return make(std::move(value), std::vector<Var<Scalar>>(parents), std::move(backprop));
  }

  Var<Scalar> make(Tensor<Scalar> value, const std::vector<Var<Scalar>>& parents,
                   Backprop backprop) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || nodes_[p.id()].needs_grad;
    if (!value.all_finite()) throw ValueError("non-finite value produced in graph");
    return push(std::move(value), needs, nullptr, needs ? std::move(backprop) : nullptr);
  }

  const Tensor<Scalar>& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }
  const Tensor<Scalar>& grad(std::size_t id) const { return nodes_[id].grad; }

  // Gradient buffer of a node, allocated as zeros on first use.
  Tensor<Scalar>& grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<Scalar>(n.value.shape());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a scalar node; parameter gradients accumulate into
  // the bound Parameter::grad.
  void backward(const Var<Scalar>& loss) {
    if (loss.value().size() != 1) {
      throw ShapeError(detail::concat("backward() needs a scalar loss, got ",
                                      detail::shape_str(loss.shape())));
    }
    if (!record_) throw ValueError("backward() on a graph built without recording");
    grad_buffer(loss.id())[0] = Scalar(1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backprop) n.backprop(*this, i);
      if (n.param) {
        auto& g = n.param->grad;
        if (g.shape() != n.value.shape()) g = Tensor<Scalar>(n.value.shape());
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
      }
    }
  }

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool needs_grad = false;
    Parameter<Scalar>* param = nullptr;
    Backprop backprop;
  };

  Var<Scalar> push(Tensor<Scalar> value, bool needs, Parameter<Scalar>* param,
                   Backprop backprop) {
    nodes_.push_back(Node{std::move(value), {}, needs, param, std::move(backprop)});
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  bool record_;
  std::vector<Node> nodes_;
};

// Differentiable ops. All operands of one call must live in the same graph.
namespace ad {

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b, bool trans_a = false,
                   bool trans_b = false) {
  auto& g = a.graph();
  auto d = kernel::matmul_dims(a.value(), b.value(), trans_a, trans_b);
  Tensor<Scalar> out(d.out_shape);
  kernel::gemm_accumulate<Scalar>(trans_a, trans_b, d.m, d.n, d.k, a.value().data(),
                                  b.value().data(), out.data());
  const std::size_t ia = a.id(), ib = b.id();
  return g.make(std::move(out), {a, b}, [=](Graph<Scalar>& g, std::size_t self) {
    const auto& gy = g.grad(self);
    const auto& av = g.value(ia);
    const auto& bv = g.value(ib);
    if (g.needs_grad(ia)) {
      auto& ga = g.grad_buffer(ia);
      if (!trans_a) {
        // dA[m x k] = dC[m x n] * op(B)^T
        kernel::gemm_accumulate<Scalar>(false, !trans_b, d.m, d.k, d.n, gy.data(),
                                        bv.data(), ga.data());
      } else {
        // dA[k x m] = op(B)[k x n] * dC^T
        kernel::gemm_accumulate<Scalar>(trans_b, true, d.k, d.m, d.n, bv.data(),
                                        gy.data(), ga.data());
      }
    }
    if (g.needs_grad(ib)) {
      auto& gb = g.grad_buffer(ib);
      if (!trans_b) {
        // dB[k x n] = op(A)^T * dC
        kernel::gemm_accumulate<Scalar>(!trans_a, false, d.k, d.n, d.m, av.data(),
                                        gy.data(), gb.data());
      } else {
        // dB[n x k] = dC^T * op(A)
        kernel::gemm_accumulate<Scalar>(true, trans_a, d.n, d.k, d.m, gy.data(),
                                        av.data(), gb.data());
      }
    }
  });
}

// x[..., n] + b[n]
template <typename Scalar>
Var<Scalar> add_bias(const Var<Scalar>& x, const Var<Scalar>& b) {
  const std::size_t n = x.shape().back();
  if (b.value().size() != n || b.value().rank() != 1) {
    throw ShapeError(detail::concat("bias shape ", detail::shape_str(b.shape()),
                                    " does not fit ", detail::shape_str(x.shape())));
  }
  Tensor<Scalar> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i % n];
  const std::size_t ix = x.id(), ib = b.id();
  return x.graph().make(std::move(out), {x, b}, [=](Graph<Scalar>& g, std::size_t self) {
    const auto& gy = g.grad(self);
    if (g.needs_grad(ix)) {
      auto& gx = g.grad_buffer(ix);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    }
    if (g.needs_grad(ib)) {
      auto& gb = g.grad_buffer(ib);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i % n] += gy[i];
    }
  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(detail::concat("add shape mismatch: ", detail::shape_str(a.shape()),
                                    " vs ", detail::shape_str(b.shape())));
  }
  Tensor<Scalar> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().make(std::move(out), {a, b}, [=](Graph<Scalar>& g, std::size_t self) {
    const auto& gy = g.grad(self);
    for (std::size_t id : {ia, ib}) {
      if (!g.needs_grad(id)) continue;
      auto& gx = g.grad_buffer(id);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    }
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar c) {
  Tensor<Scalar> out = x.value();
  for (auto& v : out.storage()) v *= c;
  const std::size_t ix = x.id();
  return x.graph().make(std::move(out), {x}, [=](Graph<Scalar>& g, std::size_t self) {
    const auto& gy = g.grad(self);
    auto& gx = g.grad_buffer(ix);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += c * gy[i];
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Scalar acc = 0;
  for (Scalar v : x.value().data()) acc += v;
  const std::size_t ix = x.id();
  return x.graph().make(Tensor<Scalar>::scalar(acc), {x},
                        [=](Graph<Scalar>& g, std::size_t self) {
                          const Scalar gy = g.grad(self)[0];
                          auto& gx = g.grad_buffer(ix);
                          for (auto& v : gx.storage()) v += gy;
                        });
}

template <typename Scalar>
Var<Scalar> sum_squares(const Var<Scalar>& x) {
  Scalar acc = 0;
  for (Scalar v : x.value().data()) acc += v * v;
  const std::size_t ix = x.id();
  return x.graph().make(Tensor<Scalar>::scalar(acc), {x},
                        [=](Graph<Scalar>& g, std::size_t self) {
                          const Scalar gy = g.grad(self)[0];
                          const auto& xv = g.value(ix);
                          auto& gx = g.grad_buffer(ix);
                          for (std::size_t i = 0; i < gx.size(); ++i) {
                            gx[i] += Scalar(2) * xv[i] * gy;
                          }
                        });
}

template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& x, Scalar alpha) {
  Tensor<Scalar> out = mlground::leaky_relu(x.value(), alpha);
  const std::size_t ix = x.id();
  return x.graph().make(std::move(out), {x}, [=](Graph<Scalar>& g, std::size_t self) {
    const auto& gy = g.grad(self);
    const auto& xv = g.value(ix);
    auto& gx = g.grad_buffer(ix);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * leaky_relu_slope(xv[i], alpha);
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  return leaky_relu(x, Scalar(0));
}

template <typename Scalar>
Var<Scalar> l2_normalize(const Var<Scalar>& x) {
  Tensor<Scalar> out = mlground::l2_normalize(x.value());
  const std::size_t ix = x.id();
  return x.graph().make(std::move(out), {x}, [=](Graph<Scalar>& g, std::size_t self) {
    kernel::l2_normalize_backward(g.value(ix), g.value(self), g.grad(self),
                                  g.grad_buffer(ix));
  });
}

// Row-wise inner product of two m x d matrices -> [m].
template <typename Scalar>
Var<Scalar> rowdot(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape() != b.shape() || a.value().rank() != 2) {
    throw ShapeError(detail::concat("rowdot shape mismatch: ", detail::shape_str(a.shape()),
                                    " vs ", detail::shape_str(b.shape())));
  }
  const std::size_t m = a.value().dim(0), d = a.value().dim(1);
  Tensor<Scalar> out({m});
  for (std::size_t i = 0; i < m; ++i) {
    Scalar acc = 0;
    for (std::size_t j = 0; j < d; ++j) acc += a.value()[i * d + j] * b.value()[i * d + j];
    out[i] = acc;
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().make(std::move(out), {a, b}, [=](Graph<Scalar>& g, std::size_t self) {
    const auto& gy = g.grad(self);
    const std::size_t ids[2] = {ia, ib};
    for (int s = 0; s < 2; ++s) {
      if (!g.needs_grad(ids[s])) continue;
      const auto& other = g.value(ids[1 - s]);
      auto& gx = g.grad_buffer(ids[s]);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += gy[i] * other[i * d + j];
      }
    }
  });
}

// Stacks equally shaped tensors along a new trailing axis: L x [S] -> [S, L].
template <typename Scalar>
Var<Scalar> stack_last(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("stack_last of zero tensors");
  const Shape base = parts.front().shape();
  const std::size_t count = parts.size(), inner = parts.front().value().size();
  for (const auto& p : parts) {
    if (p.shape() != base) throw ShapeError("stack_last shape mismatch");
  }
  Shape shape = base;
  shape.push_back(count);
  Tensor<Scalar> out(shape);
  for (std::size_t l = 0; l < count; ++l) {
    for (std::size_t i = 0; i < inner; ++i) out[i * count + l] = parts[l].value()[i];
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return parts.front().graph().make(
      std::move(out), parts, [=](Graph<Scalar>& g, std::size_t self) {
        const auto& gy = g.grad(self);
        for (std::size_t l = 0; l < count; ++l) {
          if (!g.needs_grad(ids[l])) continue;
          auto& gx = g.grad_buffer(ids[l]);
          for (std::size_t i = 0; i < inner; ++i) gx[i] += gy[i * count + l];
        }
      });
}

// Collects scalar nodes into a tensor of the given shape (row-major).
template <typename Scalar>
Var<Scalar> gather_scalars(const std::vector<Var<Scalar>>& parts, Shape shape) {
  if (parts.size() != shape_numel(shape)) throw ShapeError("gather_scalars count mismatch");
  Tensor<Scalar> out(shape);
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    out[i] = parts[i].value().item();
    ids.push_back(parts[i].id());
  }
  return parts.front().graph().make(std::move(out), parts,
                                    [=](Graph<Scalar>& g, std::size_t self) {
                                      const auto& gy = g.grad(self);
                                      for (std::size_t i = 0; i < ids.size(); ++i) {
                                        if (g.needs_grad(ids[i])) g.grad_buffer(ids[i])[0] += gy[i];
                                      }
                                    });
}

// Max over the last axis. The gradient goes to the first maximal element.
template <typename Scalar>
Var<Scalar> max_last(const Var<Scalar>& x) {
  const std::size_t d = x.shape().back();
  const auto arg = argmax_last(x.value());
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  if (shape.empty()) shape = {1};
  Tensor<Scalar> out(shape);
  for (std::size_t r = 0; r < arg.size(); ++r) out[r] = x.value()[r * d + arg[r]];
  const std::size_t ix = x.id();
  return x.graph().make(std::move(out), {x}, [=](Graph<Scalar>& g, std::size_t self) {
    const auto& gy = g.grad(self);
    auto& gx = g.grad_buffer(ix);
    for (std::size_t r = 0; r < arg.size(); ++r) gx[r * d + arg[r]] += gy[r];
  });
}

template <typename Scalar>
Var<Scalar> logsumexp_scaled(const Var<Scalar>& r, Scalar gamma) {
  const Scalar v = mlground::logsumexp_scaled(r.value().data(), gamma);
  const std::size_t ir = r.id();
  return r.graph().make(Tensor<Scalar>::scalar(v), {r},
                        [=](Graph<Scalar>& g, std::size_t self) {
                          const Scalar gy = g.grad(self)[0];
                          const auto p = softmax_scaled(g.value(ir).data(), gamma);
                          auto& gr = g.grad_buffer(ir);
                          for (std::size_t i = 0; i < p.size(); ++i) gr[i] += gy * p[i];
                        });
}

// Column-wise softmax of a matrix (normalizes over rows).
template <typename Scalar>
Var<Scalar> softmax_rows(const Var<Scalar>& x) {
  Tensor<Scalar> out = mlground::softmax_rows(x.value());
  const std::size_t ix = x.id();
  return x.graph().make(std::move(out), {x}, [=](Graph<Scalar>& g, std::size_t self) {
    const auto& y = g.value(self);
    const auto& gy = g.grad(self);
    auto& gx = g.grad_buffer(ix);
    const std::size_t n = y.dim(0), t = y.dim(1);
    for (std::size_t j = 0; j < t; ++j) {
      Scalar dot = 0;
      for (std::size_t i = 0; i < n; ++i) dot += y.at(i, j) * gy.at(i, j);
      for (std::size_t i = 0; i < n; ++i) gx.at(i, j) += y.at(i, j) * (gy.at(i, j) - dot);
    }
  });
}

// sum_k w[k] * x[..., k, :] -> [..., E]
template <typename Scalar>
Var<Scalar> combine(const Var<Scalar>& weights, const Var<Scalar>& x) {
  const auto& xv = x.value();
  const std::size_t k = weights.value().size();
  if (weights.value().rank() != 1 || xv.rank() < 2 || xv.shape()[xv.rank() - 2] != k) {
    throw ShapeError(detail::concat("combine: ", k, " weights do not fit stack ",
                                    detail::shape_str(xv.shape())));
  }
  const std::size_t e = xv.shape().back();
  const std::size_t outer = xv.size() / (k * e);
  Shape shape(xv.shape().begin(), xv.shape().end() - 2);
  shape.push_back(e);
  Tensor<Scalar> out(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < k; ++j) {
      const Scalar w = weights.value()[j];
      for (std::size_t i = 0; i < e; ++i) out[o * e + i] += w * xv[(o * k + j) * e + i];
    }
  }
  const std::size_t iw = weights.id(), ix = x.id();
  return x.graph().make(std::move(out), {weights, x}, [=](Graph<Scalar>& g, std::size_t self) {
    const auto& gy = g.grad(self);
    const auto& xv = g.value(ix);
    const auto& wv = g.value(iw);
    if (g.needs_grad(iw)) {
      auto& gw = g.grad_buffer(iw);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < k; ++j) {
          Scalar acc = 0;
          for (std::size_t i = 0; i < e; ++i) acc += gy[o * e + i] * xv[(o * k + j) * e + i];
          gw[j] += acc;
        }
      }
    }
    if (g.needs_grad(ix)) {
      auto& gx = g.grad_buffer(ix);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < k; ++j) {
          for (std::size_t i = 0; i < e; ++i) gx[(o * k + j) * e + i] += wv[j] * gy[o * e + i];
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> bilinear_resize(const Var<Scalar>& x, std::size_t out_h, std::size_t out_w) {
  Tensor<Scalar> out = mlground::bilinear_resize(x.value(), out_h, out_w);
  const std::size_t ix = x.id();
  return x.graph().make(std::move(out), {x}, [=](Graph<Scalar>& g, std::size_t self) {
    kernel::bilinear_resize_backward(g.grad(self), g.grad_buffer(ix));
  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  Tensor<Scalar> out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return x.graph().make(std::move(out), {x}, [=](Graph<Scalar>& g, std::size_t self) {
    const auto& gy = g.grad(self);
    auto& gx = g.grad_buffer(ix);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

}  // namespace ad

}  // namespace mlground
