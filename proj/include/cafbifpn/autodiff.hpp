#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cafbifpn/conv.hpp"
#include "cafbifpn/tensor.hpp"

namespace cafbifpn {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

class Gradients;

/// Handed to backward closures; reads forward values and accumulates adjoints.
class GradientSink {
 public:
  GradientSink(const Tape& tape, std::vector<std::optional<Tensor>>& slots) : tape_(tape), slots_(slots) {}

  const Tensor& value(Var v) const;
  bool wants(Var v) const;
  void accumulate(Var v, const Tensor& grad);

 private:
  const Tape& tape_;
  std::vector<std::optional<Tensor>>& slots_;
};

using BackwardFn = std::function<void(const Tensor& grad_out, GradientSink& sink)>;

/// Piecewise-smoothness bookkeeping gathered while recording. Ops with kinks
/// (relu, clamps, bilinear cell choice, top-k selection) fold their discrete
/// branch choices into `branch_signature` so a finite-difference probe can tell
/// whether a perturbation crossed a kink.
struct TapeDiagnostics {
  std::uint64_t branch_signature = 0xcbf29ce484222325ULL;
  double min_relu_margin = std::numeric_limits<double>::infinity();
  double min_routing_margin = std::numeric_limits<double>::infinity();

  void note_branch(std::uint64_t v) {
    branch_signature ^= v + 0x9e3779b97f4a7c15ULL + (branch_signature << 6) + (branch_signature >> 2);
  }
};

/// Records operations for reverse-mode differentiation. Single writer; nodes
/// are appended in creation order, which is a topological order.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, nullptr, requires_grad, "leaf"});
    return {this, nodes_.size() - 1};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var record(std::string_view op, Tensor value, const std::vector<Var>& parents, BackwardFn backward) {
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(parents.size());
    for (Var p : parents) {
      check(p);
      ids.push_back(p.id);
      needs = needs || nodes_[p.id].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), std::move(ids), needs ? std::move(backward) : nullptr, needs,
                          std::string(op)});
    return {this, nodes_.size() - 1};
  }

  const Tensor& value(Var v) const {
    check(v);
    return nodes_[v.id].value;
  }

  bool requires_grad(Var v) const {
    check(v);
    return nodes_[v.id].requires_grad;
  }

  const std::string& op_name(Var v) const {
    check(v);
    return nodes_[v.id].op;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  TapeDiagnostics& diagnostics() noexcept { return diagnostics_; }
  const TapeDiagnostics& diagnostics() const noexcept { return diagnostics_; }

  /// Gradient of sum(seed * output) with respect to every node that requires it.
  Gradients backward(Var output, const Tensor& seed) const;

  void check(Var v) const {
    if (v.tape != this) throw GraphError("variable belongs to a different tape (detached node)");
    if (v.id >= nodes_.size()) throw GraphError("variable id " + std::to_string(v.id) + " not recorded on tape");
  }

 private:
  friend class GradientSink;

  struct Node {
    Tensor value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad;
    std::string op;
  };

  std::deque<Node> nodes_;  // stable references: value() stays valid while recording
  TapeDiagnostics diagnostics_;
};

class Gradients {
 public:
  Gradients(const Tape& tape, std::vector<std::optional<Tensor>> slots) : tape_(&tape), slots_(std::move(slots)) {}

  bool has(Var v) const {
    tape_->check(v);
    return slots_[v.id].has_value();
  }

  /// Gradient of `v`; zeros when no path connects `v` to the output.
  Tensor of(Var v) const {
    tape_->check(v);
    if (slots_[v.id]) return *slots_[v.id];
    return Tensor(tape_->value(v).dims());
  }

 private:
  const Tape* tape_;
  std::vector<std::optional<Tensor>> slots_;
};

inline const Tensor& GradientSink::value(Var v) const { return tape_.value(v); }

inline bool GradientSink::wants(Var v) const { return tape_.requires_grad(v); }

inline void GradientSink::accumulate(Var v, const Tensor& grad) {
  tape_.check(v);
  if (!tape_.nodes_[v.id].requires_grad) return;
  auto& slot = slots_[v.id];
  if (!slot) {
    if (grad.dims() != tape_.nodes_[v.id].value.dims()) {
      throw ShapeError("gradient dims " + to_string(grad.dims()) + " do not match value dims " +
                       to_string(tape_.nodes_[v.id].value.dims()) + " for op " + tape_.nodes_[v.id].op);
    }
    slot = grad;
    return;
  }
  *slot = add(*slot, grad);
}

inline Gradients Tape::backward(Var output, const Tensor& seed) const {
  check(output);
  if (seed.dims() != nodes_[output.id].value.dims()) {
    throw ShapeError("backward: seed dims " + to_string(seed.dims()) + " do not match output dims " +
                     to_string(nodes_[output.id].value.dims()));
  }
  std::vector<std::optional<Tensor>> slots(nodes_.size());
  GradientSink sink(*this, slots);
  if (nodes_[output.id].requires_grad) slots[output.id] = seed;
  for (std::size_t id = output.id + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!slots[id] || !n.backward) continue;
    n.backward(*slots[id], sink);
  }
  return Gradients(*this, std::move(slots));
}

/// Operations recorded on a tape. Each forwards to the pure kernel and
/// registers its adjoint.
namespace ad {

inline Var add(Var a, Var b) {
  Tape& t = *a.tape;
  return t.record("add", cafbifpn::add(t.value(a), t.value(b)), {a, b}, [a, b](const Tensor& g, GradientSink& s) {
    s.accumulate(a, g);
    s.accumulate(b, g);
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = *a.tape;
  return t.record("sub", cafbifpn::sub(t.value(a), t.value(b)), {a, b}, [a, b](const Tensor& g, GradientSink& s) {
    s.accumulate(a, g);
    if (s.wants(b)) s.accumulate(b, cafbifpn::scale(g, -1.0));
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = *a.tape;
  return t.record("mul", cafbifpn::mul(t.value(a), t.value(b)), {a, b}, [a, b](const Tensor& g, GradientSink& s) {
    if (s.wants(a)) s.accumulate(a, cafbifpn::mul(g, s.value(b)));
    if (s.wants(b)) s.accumulate(b, cafbifpn::mul(g, s.value(a)));
  });
}

inline Var scale(Var a, double factor) {
  Tape& t = *a.tape;
  return t.record("scale", cafbifpn::scale(t.value(a), factor), {a},
                  [a, factor](const Tensor& g, GradientSink& s) { s.accumulate(a, cafbifpn::scale(g, factor)); });
}

inline Var relu(Var a) {
  Tape& t = *a.tape;
  const Tensor& x = t.value(a);
  auto& diag = t.diagnostics();
  std::uint64_t word = 0;
  std::size_t bits = 0;
  for (double v : x.data()) {
    diag.min_relu_margin = std::min(diag.min_relu_margin, std::abs(v));
    word = (word << 1) | (v > 0.0 ? 1u : 0u);
    if (++bits == 64) {
      diag.note_branch(word);
      word = 0;
      bits = 0;
    }
  }
  diag.note_branch(word);
  return t.record("relu", cafbifpn::relu(x), {a}, [a](const Tensor& g, GradientSink& s) {
    Tensor d = g;
    const Tensor& xv = s.value(a);
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!(xv[i] > 0.0)) d[i] = 0.0;
    }
    s.accumulate(a, d);
  });
}

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  return t.record("matmul", cafbifpn::matmul(t.value(a), t.value(b)), {a, b}, [a, b](const Tensor& g, GradientSink& s) {
    if (s.wants(a)) s.accumulate(a, cafbifpn::matmul(g, permute(s.value(b), {1, 0})));
    if (s.wants(b)) s.accumulate(b, cafbifpn::matmul(permute(s.value(a), {1, 0}), g));
  });
}

/// [B,m,p] x [B,p,n] (or [B,n,p] when transpose_b). Adds m*p*n*B to
/// `mac_tally` when provided.
inline Var batched_matmul(Var a, Var b, bool transpose_b = false, std::uint64_t* mac_tally = nullptr) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  Tensor out = cafbifpn::batched_matmul(av, t.value(b), transpose_b);
  if (mac_tally) *mac_tally += static_cast<std::uint64_t>(av.dim(0) * av.dim(1) * av.dim(2) * out.dim(2));
  return t.record("batched_matmul", std::move(out), {a, b}, [a, b, transpose_b](const Tensor& g, GradientSink& s) {
    const Tensor& A = s.value(a);
    const Tensor& B = s.value(b);
    if (s.wants(a)) {
      // dA = g * B^T  (or g * B when B was read transposed)
      s.accumulate(a, transpose_b ? cafbifpn::batched_matmul(g, B, false) : cafbifpn::batched_matmul(g, B, true));
    }
    if (s.wants(b)) {
      const Tensor At = permute(A, {0, 2, 1});
      if (transpose_b) {
        // C = A B^T  =>  dB = g^T A
        s.accumulate(b, cafbifpn::batched_matmul(permute(g, {0, 2, 1}), A, false));
      } else {
        s.accumulate(b, cafbifpn::batched_matmul(At, g, false));
      }
    }
  });
}

inline Var softmax_lastdim(Var a) {
  Tape& t = *a.tape;
  const Var out{&t, t.size()};  // id the recorded node will receive
  return t.record("softmax", cafbifpn::softmax_lastdim(t.value(a)), {a}, [a, out](const Tensor& g, GradientSink& s) {
    const Tensor& yv = s.value(out);
    const std::size_t len = yv.dims().back();
    Tensor d(yv.dims());
    for (std::size_t r = 0; r < yv.size() / len; ++r) {
      double dot = 0.0;
      for (std::size_t i = 0; i < len; ++i) dot += g[r * len + i] * yv[r * len + i];
      for (std::size_t i = 0; i < len; ++i) d[r * len + i] = yv[r * len + i] * (g[r * len + i] - dot);
    }
    s.accumulate(a, d);
  });
}

inline Var reshape(Var a, Dims dims) {
  Tape& t = *a.tape;
  Dims original = t.value(a).dims();
  return t.record("reshape", cafbifpn::reshape(t.value(a), std::move(dims)), {a},
                  [a, original](const Tensor& g, GradientSink& s) { s.accumulate(a, cafbifpn::reshape(g, original)); });
}

inline Var permute(Var a, std::vector<std::size_t> perm) {
  Tape& t = *a.tape;
  Tensor out = cafbifpn::permute(t.value(a), perm);
  return t.record("permute", std::move(out), {a}, [a, perm](const Tensor& g, GradientSink& s) {
    s.accumulate(a, cafbifpn::permute(g, inverse_permutation(perm)));
  });
}

inline Var concat_axis(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat_axis: no inputs");
  Tape& t = *parts.front().tape;
  std::vector<Tensor> values;
  std::vector<std::size_t> extents;
  for (Var p : parts) {
    values.push_back(t.value(p));
    extents.push_back(values.back().dims().at(axis));
  }
  return t.record("concat", cafbifpn::concat_axis(values, axis), parts,
                  [parts, extents, axis](const Tensor& g, GradientSink& s) {
                    std::size_t start = 0;
                    for (std::size_t i = 0; i < parts.size(); ++i) {
                      if (s.wants(parts[i])) s.accumulate(parts[i], cafbifpn::slice(g, axis, start, extents[i]));
                      start += extents[i];
                    }
                  });
}

inline Var slice(Var a, std::size_t axis, std::size_t start, std::size_t length) {
  Tape& t = *a.tape;
  Dims full = t.value(a).dims();
  return t.record("slice", cafbifpn::slice(t.value(a), axis, start, length), {a},
                  [a, full, axis, start, length](const Tensor& g, GradientSink& s) {
                    const std::size_t outer = element_count(Dims(full.begin(), full.begin() + axis));
                    const std::size_t inner = element_count(Dims(full.begin() + axis + 1, full.end()));
                    Tensor d(full);
                    for (std::size_t o = 0; o < outer; ++o) {
                      for (std::size_t i = 0; i < length * inner; ++i) {
                        d[(o * full[axis] + start) * inner + i] = g[o * length * inner + i];
                      }
                    }
                    s.accumulate(a, d);
                  });
}

inline Var reduce_mean_axis(Var a, std::size_t axis) {
  Tape& t = *a.tape;
  Dims full = t.value(a).dims();
  return t.record("reduce_mean", cafbifpn::reduce_mean_axis(t.value(a), axis), {a},
                  [a, full, axis](const Tensor& g, GradientSink& s) {
                    const std::size_t outer = element_count(Dims(full.begin(), full.begin() + axis));
                    const std::size_t inner = element_count(Dims(full.begin() + axis + 1, full.end()));
                    const std::size_t len = full[axis];
                    Tensor d(full);
                    for (std::size_t o = 0; o < outer; ++o) {
                      for (std::size_t l = 0; l < len; ++l) {
                        for (std::size_t i = 0; i < inner; ++i) {
                          d[(o * len + l) * inner + i] = g[o * inner + i] / static_cast<double>(len);
                        }
                      }
                    }
                    s.accumulate(a, d);
                  });
}

/// Sum of all elements as a [1] tensor.
inline Var sum(Var a) {
  Tape& t = *a.tape;
  return t.record("sum", Tensor::scalar(cafbifpn::sum(t.value(a))), {a}, [a](const Tensor& g, GradientSink& s) {
    s.accumulate(a, Tensor::full(s.value(a).dims(), g[0]));
  });
}

// --- convolution -----------------------------------------------------------------

/// Conv2dParams whose weights and bias live on a tape.
struct ConvVars {
  Var weights;
  Var bias;
  std::size_t stride = 1;
  Padding padding{};
  std::size_t dilation = 1;

  Conv2dParams materialize(const Tape& t) const {
    return Conv2dParams{t.value(weights), t.value(bias), stride, padding, dilation};
  }
};

inline ConvVars bind(Tape& t, const Conv2dParams& p, bool requires_grad = true) {
  return ConvVars{t.leaf(p.weights, requires_grad), t.leaf(p.bias, requires_grad), p.stride, p.padding, p.dilation};
}

inline Var conv2d(Var x, const ConvVars& p) {
  Tape& t = *x.tape;
  Tensor out = cafbifpn::conv2d(t.value(x), p.materialize(t));
  return t.record("conv2d", std::move(out), {x, p.weights, p.bias}, [x, p](const Tensor& g, GradientSink& s) {
    auto grads = conv2d_backward(s.value(x), p.materialize(*x.tape), g);
    if (s.wants(x)) s.accumulate(x, grads.input);
    if (s.wants(p.weights)) s.accumulate(p.weights, grads.weights);
    if (s.wants(p.bias)) s.accumulate(p.bias, grads.bias);
  });
}

inline Var depthwise_conv2d(Var x, Var weights, std::size_t padding) {
  Tape& t = *x.tape;
  Tensor out = cafbifpn::depthwise_conv2d(t.value(x), t.value(weights), padding);
  return t.record("depthwise_conv2d", std::move(out), {x, weights},
                  [x, weights, padding](const Tensor& g, GradientSink& s) {
                    auto grads = depthwise_conv2d_backward(s.value(x), s.value(weights), padding, g);
                    if (s.wants(x)) s.accumulate(x, grads.input);
                    if (s.wants(weights)) s.accumulate(weights, grads.weights);
                  });
}

inline Var deformable_conv2d_with_offsets(Var x, Var offsets, const ConvVars& base) {
  Tape& t = *x.tape;
  const Conv2dParams bp = base.materialize(t);
  Tensor out = cafbifpn::deformable_conv2d_with_offsets(t.value(x), t.value(offsets), bp);
  // Which lattice cell each tap samples from is the discrete branch here.
  const Tensor& off = t.value(offsets);
  std::uint64_t acc = 0;
  for (std::size_t i = 0; i < off.size(); ++i) {
    acc = acc * 1099511628211ULL + static_cast<std::uint64_t>(static_cast<long long>(std::floor(off[i])));
  }
  t.diagnostics().note_branch(acc);
  return t.record("deformable_conv2d", std::move(out), {x, offsets, base.weights, base.bias},
                  [x, offsets, base](const Tensor& g, GradientSink& s) {
                    auto grads = deformable_conv2d_backward(s.value(x), s.value(offsets), base.materialize(*x.tape), g);
                    if (s.wants(x)) s.accumulate(x, grads.input);
                    if (s.wants(offsets)) s.accumulate(offsets, grads.offsets);
                    if (s.wants(base.weights)) s.accumulate(base.weights, grads.weights);
                    if (s.wants(base.bias)) s.accumulate(base.bias, grads.bias);
                  });
}

}  // namespace ad

/// Runs `fn` on a scratch tape and returns the value of the Var it produces.
template <typename Fn>
Tensor evaluate(Fn&& fn) {
  Tape tape;
  Var out = fn(tape);
  return tape.value(out);
}

}  // namespace cafbifpn
