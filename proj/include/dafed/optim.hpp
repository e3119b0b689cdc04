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

#ifndef DAFED_OPTIM_HPP_
#define DAFED_OPTIM_HPP_

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "dafed/autodiff.hpp"
#include "dafed/tensor.hpp"

namespace dafed {

using ad::GradMap;

/// Named model state. `params` are trained; `buffers` hold batch-norm
/// running statistics. std::map keeps iteration lexicographic by name.
struct ParamStore {
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> buffers;

  const Tensor& param(const std::string& name) const;
  const Tensor& buffer(const std::string& name) const;
  std::size_t num_scalars() const;

  friend bool operator==(const ParamStore&, const ParamStore&) = default;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments are keyed by parameter name and
/// created on first use.
class Adam {
 public:
  using Filter = std::function<bool(std::string_view name)>;

  explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

  /// Updates every parameter accepted by `owns` (all when empty). A missing
  /// gradient is treated as zero. Increments the step counter once.
  void step(ParamStore& store, const GradMap& grads, double lr, const Filter& owns = {});

  std::uint64_t steps() const { return steps_; }
  const std::map<std::string, Tensor>& first_moments() const { return m_; }
  const std::map<std::string, Tensor>& second_moments() const { return v_; }
  const AdamOptions& options() const { return opts_; }

 private:
  AdamOptions opts_;
  std::uint64_t steps_ = 0;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
};

struct LrSchedule {
  enum class Kind { kWarmupDecay, kDecay };
  Kind kind = Kind::kDecay;
  double base = 0.01;
  std::optional<std::size_t> warmup_rounds;  // 10% of the total when unset
  double decay_rate = 0.99;
};

/// Linear warm-up 0 -> base over warmup_rounds then geometric decay, or pure
/// geometric decay. Steps past `total` keep following the decay formula.
double lr_at(const LrSchedule& schedule, std::size_t step, std::size_t total);

struct GradCheckOptions {
  double h = 1e-5;
  /// Coordinates sampled per parameter tensor; 0 checks every coordinate.
  std::size_t coords_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t coords_checked = 0;
  bool nan = false;
  std::string nan_param;
  std::size_t nan_index = 0;

  bool passed(double tol) const { return !nan && max_rel_error < tol; }
};

/// Loss of the parameters; fills `grads` with the analytic gradient when non-null.
using LossFn = std::function<double(const ParamStore& params, GradMap* grads)>;

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
GradCheckResult grad_check(const LossFn& fn, const ParamStore& theta,
                           const GradCheckOptions& opts = {});

}  // namespace dafed

#endif  // DAFED_OPTIM_HPP_
