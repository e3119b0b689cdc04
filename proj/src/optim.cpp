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

#include "dafed/optim.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dafed/rng.hpp"

namespace dafed {

const Tensor& ParamStore::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw Error("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParamStore::buffer(const std::string& name) const {
  auto it = buffers.find(name);
  if (it == buffers.end()) throw Error("unknown buffer: " + name);
  return it->second;
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params) n += t.size();
  return n;
}

void Adam::step(ParamStore& store, const GradMap& grads, double lr, const Filter& owns) {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(opts_.beta1, t);
  const double bc2 = 1.0 - std::pow(opts_.beta2, t);
  for (auto& [name, p] : store.params) {
    if (owns && !owns(name)) continue;
    auto [mit, m_new] = m_.try_emplace(name, Tensor::zeros_like(p));
    auto [vit, v_new] = v_.try_emplace(name, Tensor::zeros_like(p));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    auto git = grads.find(name);
    const Tensor* g = git == grads.end() ? nullptr : &git->second;
    if (g == nullptr) {
      spdlog::debug("adam: no gradient for {}, using zero", name);
    } else if (g->shape() != p.shape()) {
      throw Error("adam: gradient shape " + shape_str(g->shape()) + " for " + name +
                  " does not match " + shape_str(p.shape()));
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * gi;
      v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + opts_.eps);
    }
  }
}

double lr_at(const LrSchedule& s, std::size_t step, std::size_t total) {
  switch (s.kind) {
    case LrSchedule::Kind::kWarmupDecay: {
      const std::size_t warmup = s.warmup_rounds.value_or(total / 10);
      if (step < warmup) return s.base * static_cast<double>(step) / static_cast<double>(warmup);
      return s.base * std::pow(s.decay_rate, static_cast<double>(step - warmup));
    }
    case LrSchedule::Kind::kDecay:
      return s.base * std::pow(s.decay_rate, static_cast<double>(step));
  }
  return s.base;
}

GradCheckResult grad_check(const LossFn& fn, const ParamStore& theta,
                           const GradCheckOptions& opts) {
  if (!(opts.h > 0.0)) throw Error("grad_check: step h must be positive");
  GradCheckResult result;
  GradMap analytic;
  const double base = fn(theta, &analytic);
  if (!std::isfinite(base)) {
    result.nan = true;
    result.nan_param = "<base loss>";
    return result;
  }
  ParamStore probe = theta;
  for (auto& [name, p] : probe.params) {
    std::vector<std::size_t> coords(p.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (opts.coords_per_param > 0 && coords.size() > opts.coords_per_param) {
      auto gen = make_stream({opts.seed, hash_id(name)});
      std::shuffle(coords.begin(), coords.end(), gen);
      coords.resize(opts.coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    auto git = analytic.find(name);
    for (std::size_t i : coords) {
      const double orig = p[i];
      p[i] = orig + opts.h;
      const double up = fn(probe, nullptr);
      p[i] = orig - opts.h;
      const double down = fn(probe, nullptr);
      p[i] = orig;
      ++result.coords_checked;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        result.nan = true;
        result.nan_param = name;
        result.nan_index = i;
        return result;
      }
      const double fd = (up - down) / (2.0 * opts.h);
      const double an = git == analytic.end() ? 0.0 : git->second[i];
      const double err = std::fabs(an - fd) / std::max(1.0, std::fabs(fd));
      if (err > result.max_rel_error || result.worst_param.empty()) {
        if (err >= result.max_rel_error) {
          result.max_rel_error = err;
          result.worst_param = name;
          result.worst_index = i;
        }
      }
    }
  }
  return result;
}

}  // namespace dafed
