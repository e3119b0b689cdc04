// Copyright 2026 The DAFed Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "dafed/autodiff.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dafed/rng.hpp"

namespace dafed::ad {

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{"const", std::move(value), {}, nullptr, false, {}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::param(const std::string& name, const Tensor& value) {
  nodes_.push_back(Node{"param", value, {}, nullptr, true, name});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(std::string_view op, Tensor value, std::vector<Var> inputs, BackwardFn fn) {
  Node node;
  node.op = op;
  node.value = std::move(value);
  for (const Var& v : inputs) {
    if (v.tape() != this) throw Error(std::string("input of ") + std::string(op) + " is on another tape");
    node.inputs.push_back(v.id());
    node.requires_grad = node.requires_grad || nodes_[v.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Tensor& Tape::grad_slot(int id) {
  Tensor& g = grads_[id];
  if (g.empty()) g = Tensor::zeros_like(nodes_[id].value);
  return g;
}

GradMap Tape::backward(Var loss) {
  if (loss.tape() != this) throw Error("backward: loss is on another tape");
  if (loss.value().size() != 1) {
    throw Error("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  grads_.assign(nodes_.size(), Tensor());
  grads_[loss.id()] = Tensor(loss.shape(), 1.0);
  for (int id = loss.id(); id >= 0; --id) {
    Node& node = nodes_[id];
    if (!node.requires_grad || !node.backward || grads_[id].empty()) continue;
    node.backward(*this, grads_[id], node.inputs);
  }
  GradMap out;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& node = nodes_[id];
    if (node.param_name.empty()) continue;
    Tensor g = grads_[id].empty() ? Tensor::zeros_like(node.value) : grads_[id];
    auto it = out.find(node.param_name);
    if (it == out.end()) {
      out.emplace(node.param_name, std::move(g));
    } else {
      it->second += g;
    }
  }
  grads_.clear();
  return out;
}

namespace {

[[noreturn]] void shape_error(std::string_view op, const Shape& a, const Shape& b) {
  throw Error(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_rank(std::string_view op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw Error(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                shape_str(t.shape()));
  }
}

// C (m x n) [+]= op(A) op(B) with op(A) m x k, op(B) k x n.
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, bool trans_a,
          const double* b, bool trans_b, double* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      double* ci = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a[i * k + p];
        if (av == 0.0) continue;
        const double* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* ai = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* bj = b + j * k;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
        c[i * n + j] += acc;
      }
    }
  } else if (trans_a && !trans_b) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* ap = a + p * m;
      const double* bp = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double av = ap[i];
        if (av == 0.0) continue;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        c[i * n + j] += acc;
      }
    }
  }
}

template <typename F>
Var unary(std::string_view op, Var x, F&& f, std::function<double(double, double)> dfdx) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  Tape* t = x.tape();
  return t->record(op, std::move(out), {x},
                   [dfdx = std::move(dfdx)](Tape& tape, const Tensor& g, std::span<const int> in) {
                     if (!tape.requires_grad(in[0])) return;
                     const Tensor& xv = tape.value(in[0]);
                     Tensor& gx = tape.grad_slot(in[0]);
                     for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xv[i], g[i]);
                   });
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank("matmul", av, 2);
  require_rank("matmul", bv, 2);
  if (av.dim(1) != bv.dim(0)) shape_error("matmul", av.shape(), bv.shape());
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  gemm(m, n, k, av.data(), false, bv.data(), false, out.data(), false);
  return a.tape()->record("matmul", std::move(out), {a, b},
                          [m, n, k](Tape& t, const Tensor& g, std::span<const int> in) {
                            if (t.requires_grad(in[0])) {
                              gemm(m, k, n, g.data(), false, t.value(in[1]).data(), true,
                                   t.grad_slot(in[0]).data(), true);
                            }
                            if (t.requires_grad(in[1])) {
                              gemm(k, n, m, t.value(in[0]).data(), true, g.data(), false,
                                   t.grad_slot(in[1]).data(), true);
                            }
                          });
}

Var bmm(Var a, Var b, bool transpose_b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank("bmm", av, 3);
  require_rank("bmm", bv, 3);
  const std::size_t batch = av.dim(0), m = av.dim(1), k = av.dim(2);
  const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
  const std::size_t bk = transpose_b ? bv.dim(2) : bv.dim(1);
  if (bv.dim(0) != batch || bk != k) shape_error("bmm", av.shape(), bv.shape());
  Tensor out({batch, m, n});
  for (std::size_t s = 0; s < batch; ++s) {
    gemm(m, n, k, av.data() + s * m * k, false, bv.data() + s * k * n, transpose_b,
         out.data() + s * m * n, false);
  }
  return a.tape()->record(
      "bmm", std::move(out), {a, b},
      [batch, m, n, k, transpose_b](Tape& t, const Tensor& g, std::span<const int> in) {
        const Tensor& av = t.value(in[0]);
        const Tensor& bv = t.value(in[1]);
        if (t.requires_grad(in[0])) {
          Tensor& ga = t.grad_slot(in[0]);
          // dA = dC op(B)^T
          for (std::size_t s = 0; s < batch; ++s) {
            gemm(m, k, n, g.data() + s * m * n, false, bv.data() + s * k * n, !transpose_b,
                 ga.data() + s * m * k, true);
          }
        }
        if (t.requires_grad(in[1])) {
          Tensor& gb = t.grad_slot(in[1]);
          for (std::size_t s = 0; s < batch; ++s) {
            if (transpose_b) {
              // B is [n,k]: dB = dC^T A
              gemm(n, k, m, g.data() + s * m * n, true, av.data() + s * m * k, false,
                   gb.data() + s * k * n, true);
            } else {
              gemm(k, n, m, av.data() + s * m * k, true, g.data() + s * m * n, false,
                   gb.data() + s * k * n, true);
            }
          }
        }
      });
}

Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() == bv.shape()) {
    Tensor out = av;
    out += bv;
    return a.tape()->record("add", std::move(out), {a, b},
                            [](Tape& t, const Tensor& g, std::span<const int> in) {
                              for (int i : in) {
                                if (t.requires_grad(i)) t.grad_slot(i) += g;
                              }
                            });
  }
  const std::size_t last = av.shape().back();
  if (bv.size() != last) shape_error("add", av.shape(), bv.shape());
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % last];
  return a.tape()->record("add_bias", std::move(out), {a, b},
                          [last](Tape& t, const Tensor& g, std::span<const int> in) {
                            if (t.requires_grad(in[0])) t.grad_slot(in[0]) += g;
                            if (t.requires_grad(in[1])) {
                              Tensor& gb = t.grad_slot(in[1]);
                              for (std::size_t i = 0; i < g.size(); ++i) gb[i % last] += g[i];
                            }
                          });
}

Var sub(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) shape_error("sub", av.shape(), bv.shape());
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape()->record("sub", std::move(out), {a, b},
                          [](Tape& t, const Tensor& g, std::span<const int> in) {
                            if (t.requires_grad(in[0])) t.grad_slot(in[0]) += g;
                            if (t.requires_grad(in[1])) {
                              Tensor& gb = t.grad_slot(in[1]);
                              for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                            }
                          });
}

Var mul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) shape_error("mul", av.shape(), bv.shape());
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape()->record("mul", std::move(out), {a, b},
                          [](Tape& t, const Tensor& g, std::span<const int> in) {
                            for (int side = 0; side < 2; ++side) {
                              if (!t.requires_grad(in[side])) continue;
                              const Tensor& other = t.value(in[1 - side]);
                              Tensor& gs = t.grad_slot(in[side]);
                              for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i] * other[i];
                            }
                          });
}

Var scale(Var x, double s) {
  return unary("scale", x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Var add_scalar(Var x, double s) {
  return unary("add_scalar", x, [s](double v) { return v + s; },
               [](double, double) { return 1.0; });
}

Var concat(const std::vector<Var>& xs, std::size_t axis) {
  if (xs.empty()) throw Error("concat: no inputs");
  const Shape& first = xs[0].shape();
  Shape out_shape = first;
  out_shape.at(axis) = 0;
  std::vector<std::size_t> extents;
  for (const Var& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != first.size()) shape_error("concat", first, s);
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) shape_error("concat", first, s);
    }
    extents.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const AxisSplit sp = split_axis(out_shape, axis);
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Tensor& xv = xs[i].value();
    const std::size_t chunk = extents[i] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(xv.data() + o * chunk, chunk,
                  out.data() + o * sp.extent * sp.inner + offset * sp.inner);
    }
    offset += extents[i];
  }
  return xs[0].tape()->record(
      "concat", std::move(out), xs,
      [sp, extents](Tape& t, const Tensor& g, std::span<const int> in) {
        std::size_t offset = 0;
        for (std::size_t i = 0; i < in.size(); ++i) {
          const std::size_t chunk = extents[i] * sp.inner;
          if (t.requires_grad(in[i])) {
            Tensor& gx = t.grad_slot(in[i]);
            for (std::size_t o = 0; o < sp.outer; ++o) {
              const double* src = g.data() + o * sp.extent * sp.inner + offset * sp.inner;
              double* dst = gx.data() + o * chunk;
              for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
            }
          }
          offset += extents[i];
        }
      });
}

Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length) {
  const Tensor& xv = x.value();
  const AxisSplit sp = split_axis(xv.shape(), axis);
  if (length == 0 || start + length > sp.extent) {
    throw Error("slice: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                ") out of bounds for " + shape_str(xv.shape()));
  }
  Shape out_shape = xv.shape();
  out_shape[axis] = length;
  Tensor out(out_shape);
  const std::size_t chunk = length * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(xv.data() + o * sp.extent * sp.inner + start * sp.inner, chunk,
                out.data() + o * chunk);
  }
  return x.tape()->record("slice", std::move(out), {x},
                          [sp, start, chunk](Tape& t, const Tensor& g, std::span<const int> in) {
                            if (!t.requires_grad(in[0])) return;
                            Tensor& gx = t.grad_slot(in[0]);
                            for (std::size_t o = 0; o < sp.outer; ++o) {
                              double* dst = gx.data() + o * sp.extent * sp.inner + start * sp.inner;
                              const double* src = g.data() + o * chunk;
                              for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
                            }
                          });
}

namespace {

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t d = 0; d < s.size(); ++d) {
    if (d != axis) out.push_back(s[d]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

Var reduce_sum(std::string_view op, Var x, std::size_t axis, double factor) {
  const Tensor& xv = x.value();
  const AxisSplit sp = split_axis(xv.shape(), axis);
  Tensor out(drop_axis(xv.shape(), axis));
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t e = 0; e < sp.extent; ++e) {
      const double* src = xv.data() + (o * sp.extent + e) * sp.inner;
      double* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  if (factor != 1.0) out *= factor;
  return x.tape()->record(op, std::move(out), {x},
                          [sp, factor](Tape& t, const Tensor& g, std::span<const int> in) {
                            if (!t.requires_grad(in[0])) return;
                            Tensor& gx = t.grad_slot(in[0]);
                            for (std::size_t o = 0; o < sp.outer; ++o) {
                              for (std::size_t e = 0; e < sp.extent; ++e) {
                                double* dst = gx.data() + (o * sp.extent + e) * sp.inner;
                                const double* src = g.data() + o * sp.inner;
                                for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += factor * src[i];
                              }
                            }
                          });
}

}  // namespace

Var sum(Var x, std::size_t axis) { return reduce_sum("sum", x, axis, 1.0); }

Var mean(Var x, std::size_t axis) {
  const std::size_t n = split_axis(x.shape(), axis).extent;
  return reduce_sum("mean", x, axis, 1.0 / static_cast<double>(n));
}

Var max(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  const AxisSplit sp = split_axis(xv.shape(), axis);
  Tensor out(drop_axis(xv.shape(), axis));
  std::vector<std::size_t> argmax(sp.outer * sp.inner, 0);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      double best_v = xv[o * sp.extent * sp.inner + i];
      for (std::size_t e = 1; e < sp.extent; ++e) {
        const double v = xv[(o * sp.extent + e) * sp.inner + i];
        if (v > best_v) {
          best_v = v;
          best = e;
        }
      }
      out[o * sp.inner + i] = best_v;
      argmax[o * sp.inner + i] = best;
    }
  }
  return x.tape()->record("max", std::move(out), {x},
                          [sp, argmax = std::move(argmax)](Tape& t, const Tensor& g,
                                                           std::span<const int> in) {
                            if (!t.requires_grad(in[0])) return;
                            Tensor& gx = t.grad_slot(in[0]);
                            for (std::size_t o = 0; o < sp.outer; ++o) {
                              for (std::size_t i = 0; i < sp.inner; ++i) {
                                const std::size_t e = argmax[o * sp.inner + i];
                                gx[(o * sp.extent + e) * sp.inner + i] += g[o * sp.inner + i];
                              }
                            }
                          });
}

Var sum_all(Var x) { return reduce_sum("sum_all", reshape(x, {x.value().size()}), 0, 1.0); }

Var mean_all(Var x) {
  const double n = static_cast<double>(x.value().size());
  return reduce_sum("mean_all", reshape(x, {x.value().size()}), 0, 1.0 / n);
}

Var relu(Var x) {
  return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(Var x, double slope) {
  return unary("leaky_relu", x, [slope](double v) { return v > 0.0 ? v : slope * v; },
               [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Var softmax(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (axis >= xv.rank()) throw Error("softmax: axis out of range for " + shape_str(xv.shape()));
  const AxisSplit sp = split_axis(xv.shape(), axis);
  Tensor out(xv.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      double mx = xv[base];
      for (std::size_t e = 1; e < sp.extent; ++e) mx = std::max(mx, xv[base + e * sp.inner]);
      double z = 0.0;
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const double v = std::exp(xv[base + e * sp.inner] - mx);
        out[base + e * sp.inner] = v;
        z += v;
      }
      for (std::size_t e = 0; e < sp.extent; ++e) out[base + e * sp.inner] /= z;
    }
  }
  Tape* tape = x.tape();
  const int self = static_cast<int>(tape->size());
  return tape->record("softmax", std::move(out), {x},
                      [sp, self](Tape& t, const Tensor& g, std::span<const int> in) {
                        if (!t.requires_grad(in[0])) return;
                        const Tensor& y = t.value(self);
                        Tensor& gx = t.grad_slot(in[0]);
                        for (std::size_t o = 0; o < sp.outer; ++o) {
                          for (std::size_t i = 0; i < sp.inner; ++i) {
                            const std::size_t base = o * sp.extent * sp.inner + i;
                            double dot = 0.0;
                            for (std::size_t e = 0; e < sp.extent; ++e) {
                              dot += g[base + e * sp.inner] * y[base + e * sp.inner];
                            }
                            for (std::size_t e = 0; e < sp.extent; ++e) {
                              const std::size_t k = base + e * sp.inner;
                              gx[k] += y[k] * (g[k] - dot);
                            }
                          }
                        }
                      });
}

Var log(Var x) {
  return unary("log", x, [](double v) { return std::log(v); },
               [](double v, double) { return 1.0 / v; });
}

Var exp(Var x) {
  return unary("exp", x, [](double v) { return std::exp(v); },
               [](double v, double) { return std::exp(v); });
}

Var abs(Var x) {
  return unary("abs", x, [](double v) { return std::fabs(v); },
               [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var clamp(Var x, double lo, double hi) {
  return unary("clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
               [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Var permute(Var x, const std::vector<std::size_t>& axes) {
  const Tensor& xv = x.value();
  const std::size_t r = xv.rank();
  if (axes.size() != r) throw Error("permute: axes do not match " + shape_str(xv.shape()));
  std::vector<bool> seen(r, false);
  for (auto a : axes) {
    if (a >= r || seen[a]) throw Error("permute: invalid axes for " + shape_str(xv.shape()));
    seen[a] = true;
  }
  Shape out_shape(r);
  for (std::size_t d = 0; d < r; ++d) out_shape[d] = xv.dim(axes[d]);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t d = r - 1; d > 0; --d) in_strides[d - 1] = in_strides[d] * xv.dim(d);
  // For each output element, its flat source index.
  std::vector<std::size_t> src(xv.size());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < xv.size(); ++flat) {
    std::size_t s = 0;
    for (std::size_t d = 0; d < r; ++d) s += idx[d] * in_strides[axes[d]];
    src[flat] = s;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  Tensor out(out_shape);
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = xv[src[i]];
  return x.tape()->record("permute", std::move(out), {x},
                          [src = std::move(src)](Tape& t, const Tensor& g, std::span<const int> in) {
                            if (!t.requires_grad(in[0])) return;
                            Tensor& gx = t.grad_slot(in[0]);
                            for (std::size_t i = 0; i < src.size(); ++i) gx[src[i]] += g[i];
                          });
}

Var transpose(Var x) {
  require_rank("transpose", x.value(), 2);
  return permute(x, {1, 0});
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape()->record("reshape", std::move(out), {x},
                          [](Tape& t, const Tensor& g, std::span<const int> in) {
                            if (!t.requires_grad(in[0])) return;
                            Tensor& gx = t.grad_slot(in[0]);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                          });
}

Var cosine_similarity(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank("cosine_similarity", av, 2);
  if (av.shape() != bv.shape()) shape_error("cosine_similarity", av.shape(), bv.shape());
  const std::size_t n = av.dim(0), d = av.dim(1);
  Tensor out({n});
  std::vector<double> na(n), nb(n);
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double x = av[i * d + j], y = bv[i * d + j];
      dot += x * y;
      sa += x * x;
      sb += y * y;
    }
    na[i] = std::sqrt(sa);
    nb[i] = std::sqrt(sb);
    if (na[i] < 1e-12 || nb[i] < 1e-12) {
      spdlog::debug("cosine_similarity: zero-norm row {}, similarity set to 0", i);
      out[i] = 0.0;
    } else {
      out[i] = dot / (na[i] * nb[i]);
    }
  }
  Tape* tape = a.tape();
  const int self = static_cast<int>(tape->size());
  return tape->record(
      "cosine_similarity", std::move(out), {a, b},
      [n, d, self, na = std::move(na), nb = std::move(nb)](Tape& t, const Tensor& g,
                                                           std::span<const int> in) {
        const Tensor& s = t.value(self);
        for (int side = 0; side < 2; ++side) {
          if (!t.requires_grad(in[side])) continue;
          const Tensor& self_v = t.value(in[side]);
          const Tensor& other_v = t.value(in[1 - side]);
          const auto& n_self = side == 0 ? na : nb;
          Tensor& gx = t.grad_slot(in[side]);
          for (std::size_t i = 0; i < n; ++i) {
            if (na[i] < 1e-12 || nb[i] < 1e-12) continue;
            const double inv = 1.0 / (na[i] * nb[i]);
            const double sn = s[i] / (n_self[i] * n_self[i]);
            for (std::size_t j = 0; j < d; ++j) {
              gx[i * d + j] += g[i] * (other_v[i * d + j] * inv - sn * self_v[i * d + j]);
            }
          }
        }
      });
}

Var gather_rows(Var x, std::span<const std::size_t> rows) {
  const Tensor& xv = x.value();
  require_rank("gather_rows", xv, 2);
  const std::size_t d = xv.dim(1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  if (idx.empty()) throw Error("gather_rows: empty index list");
  Tensor out({idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= xv.dim(0)) throw Error("gather_rows: row index out of range");
    std::copy_n(xv.data() + idx[i] * d, d, out.data() + i * d);
  }
  return x.tape()->record("gather_rows", std::move(out), {x},
                          [d, idx = std::move(idx)](Tape& t, const Tensor& g, std::span<const int> in) {
                            if (!t.requires_grad(in[0])) return;
                            Tensor& gx = t.grad_slot(in[0]);
                            for (std::size_t i = 0; i < idx.size(); ++i) {
                              for (std::size_t j = 0; j < d; ++j) gx[idx[i] * d + j] += g[i * d + j];
                            }
                          });
}

Var grad_reverse(Var x, double scale) {
  return x.tape()->record("grad_reverse", x.value(), {x},
                          [scale](Tape& t, const Tensor& g, std::span<const int> in) {
                            if (!t.requires_grad(in[0])) return;
                            Tensor& gx = t.grad_slot(in[0]);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= scale * g[i];
                          });
}

Var dropout(Var x, double rate, Mode mode, std::uint64_t stream,
            std::span<const std::uint64_t> group_keys) {
  if (rate < 0.0 || rate >= 1.0) throw Error("dropout: rate must be in [0, 1)");
  if (mode == Mode::kEval || rate == 0.0) return x;
  const Tensor& xv = x.value();
  const std::size_t groups = group_keys.size();
  if (groups == 0 || xv.size() % groups != 0) {
    throw Error("dropout: " + std::to_string(groups) + " groups do not divide " +
                shape_str(xv.shape()));
  }
  const std::size_t per_group = xv.size() / groups;
  const double keep_scale = 1.0 / (1.0 - rate);
  Tensor mask(xv.shape());
  for (std::size_t gi = 0; gi < groups; ++gi) {
    auto gen = make_stream({stream, group_keys[gi]});
    for (std::size_t j = 0; j < per_group; ++j) {
      mask[gi * per_group + j] = uniform01(gen) >= rate ? keep_scale : 0.0;
    }
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return x.tape()->record("dropout", std::move(out), {x},
                          [mask = std::move(mask)](Tape& t, const Tensor& g, std::span<const int> in) {
                            if (!t.requires_grad(in[0])) return;
                            Tensor& gx = t.grad_slot(in[0]);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
                          });
}

Var batch_norm(Var x, Var gamma, Var beta, const BatchNormStats& stats, Mode mode,
               BatchNormStats* stats_out, BatchNormOptions opts) {
  const Tensor& xv = x.value();
  require_rank("batch_norm", xv, 2);
  const std::size_t n = xv.dim(0), d = xv.dim(1);
  if (gamma.value().size() != d || beta.value().size() != d ||
      stats.running_mean.size() != d || stats.running_var.size() != d) {
    shape_error("batch_norm", xv.shape(), gamma.shape());
  }
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  std::vector<double> mu(d, 0.0), inv_std(d, 0.0);
  if (mode == Mode::kTrain) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) mu[j] += xv[i * d + j];
    }
    for (auto& m : mu) m /= static_cast<double>(n);
    std::vector<double> var(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        const double c = xv[i * d + j] - mu[j];
        var[j] += c * c;
      }
    }
    for (std::size_t j = 0; j < d; ++j) {
      var[j] /= static_cast<double>(n);
      inv_std[j] = 1.0 / std::sqrt(var[j] + opts.eps);
    }
    if (stats_out != nullptr) {
      BatchNormStats next{stats.running_mean, stats.running_var};
      for (std::size_t j = 0; j < d; ++j) {
        next.running_mean[j] = opts.momentum * stats.running_mean[j] + (1.0 - opts.momentum) * mu[j];
        next.running_var[j] = opts.momentum * stats.running_var[j] + (1.0 - opts.momentum) * var[j];
      }
      *stats_out = std::move(next);
    }
  } else {
    for (std::size_t j = 0; j < d; ++j) {
      mu[j] = stats.running_mean[j];
      inv_std[j] = 1.0 / std::sqrt(stats.running_var[j] + opts.eps);
    }
  }
  Tensor xhat(xv.shape());
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xv[i * d + j] - mu[j]) * inv_std[j];
      xhat[i * d + j] = h;
      out[i * d + j] = gv[j] * h + bv[j];
    }
  }
  const bool train = mode == Mode::kTrain;
  return x.tape()->record(
      "batch_norm", std::move(out), {x, gamma, beta},
      [n, d, train, inv_std = std::move(inv_std), xhat = std::move(xhat)](
          Tape& t, const Tensor& g, std::span<const int> in) {
        std::vector<double> sum_g(d, 0.0), sum_gx(d, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < d; ++j) {
            sum_g[j] += g[i * d + j];
            sum_gx[j] += g[i * d + j] * xhat[i * d + j];
          }
        }
        if (t.requires_grad(in[1])) {
          Tensor& gg = t.grad_slot(in[1]);
          for (std::size_t j = 0; j < d; ++j) gg[j] += sum_gx[j];
        }
        if (t.requires_grad(in[2])) {
          Tensor& gb = t.grad_slot(in[2]);
          for (std::size_t j = 0; j < d; ++j) gb[j] += sum_g[j];
        }
        if (!t.requires_grad(in[0])) return;
        const Tensor& gamma = t.value(in[1]);
        Tensor& gx = t.grad_slot(in[0]);
        const double nn = static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < d; ++j) {
            const double gi = g[i * d + j];
            if (train) {
              gx[i * d + j] += gamma[j] * inv_std[j] / nn *
                               (nn * gi - sum_g[j] - xhat[i * d + j] * sum_gx[j]);
            } else {
              gx[i * d + j] += gamma[j] * inv_std[j] * gi;
            }
          }
        }
      });
}

}  // namespace dafed::ad
