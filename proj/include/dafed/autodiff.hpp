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

#ifndef DAFED_AUTODIFF_HPP_
#define DAFED_AUTODIFF_HPP_

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dafed/tensor.hpp"

namespace dafed::ad {

enum class Mode { kTrain, kEval };

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

using GradMap = std::map<std::string, Tensor>;

/// Reverse-mode record. Nodes are appended in evaluation order, so the
/// node index is a topological order and backward walks it in reverse.
class Tape {
 public:
  using BackwardFn =
      std::function<void(Tape& tape, const Tensor& grad, std::span<const int> inputs)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf that receives a gradient under `name`. Binding a name twice sums
  /// both contributions.
  Var param(const std::string& name, const Tensor& value);

  Var record(std::string_view op, Tensor value, std::vector<Var> inputs, BackwardFn fn);

  const Tensor& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  std::string_view op(int id) const { return nodes_[id].op; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulator for `id`, zero-initialized on first access.
  Tensor& grad_slot(int id);

  /// d(loss)/d(param) for every param bound on this tape. Params that the
  /// loss does not reach get zeros. Throws if loss is not one element.
  GradMap backward(Var loss);

 private:
  struct Node {
    std::string_view op;
    Tensor value;
    std::vector<int> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    std::string param_name;
  };

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

// --- primitives ------------------------------------------------------------
// Shapes are checked eagerly; mismatches throw dafed::Error naming both shapes.

Var matmul(Var a, Var b);
/// Batched matmul: a [b,m,k] x b [b,k,n] (or b [b,n,k] with transpose_b).
Var bmm(Var a, Var b, bool transpose_b = false);
/// Elementwise sum. `b` may also be a bias whose size equals the last dim of `a`.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double s);
Var add_scalar(Var x, double s);
Var concat(const std::vector<Var>& xs, std::size_t axis);
Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length);
Var sum(Var x, std::size_t axis);
Var mean(Var x, std::size_t axis);
/// Ties route the gradient to the first maximal index.
Var max(Var x, std::size_t axis);
Var sum_all(Var x);
Var mean_all(Var x);
Var relu(Var x);
Var leaky_relu(Var x, double slope);
Var softmax(Var x, std::size_t axis);
Var log(Var x);
Var exp(Var x);
Var abs(Var x);
Var clamp(Var x, double lo, double hi);
Var permute(Var x, const std::vector<std::size_t>& axes);
Var transpose(Var x);
Var reshape(Var x, Shape shape);
/// Row-wise cosine similarity of two [n,d] tensors, giving [n]. A zero-norm
/// row yields similarity 0 with zero gradient.
Var cosine_similarity(Var a, Var b);
Var gather_rows(Var x, std::span<const std::size_t> rows);
/// Identity forward; backward multiplies the upstream gradient by -scale.
Var grad_reverse(Var x, double scale);

/// Inverted dropout. Rows of `x` are split evenly into one group per entry of
/// `group_keys`; each group's mask is drawn from stream (stream, key).
Var dropout(Var x, double rate, Mode mode, std::uint64_t stream,
            std::span<const std::uint64_t> group_keys);

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
};

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
};

/// Per-feature normalization over the rows of a [n,d] input. Train mode uses
/// batch statistics (biased variance) and, when `stats_out` is non-null,
/// writes the updated running statistics there. Eval mode uses `stats`.
Var batch_norm(Var x, Var gamma, Var beta, const BatchNormStats& stats, Mode mode,
               BatchNormStats* stats_out = nullptr, BatchNormOptions opts = {});

}  // namespace dafed::ad

#endif  // DAFED_AUTODIFF_HPP_
