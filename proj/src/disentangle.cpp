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

#include "dafed/disentangle.hpp"

#include <algorithm>
#include <numeric>

#include "dafed/rng.hpp"

namespace dafed::disentangle {

namespace {

ad::Var stack(ForwardContext& ctx, const ModelConfig& cfg, const std::string& p, ad::Var z) {
  ad::Var h = ad::relu(ctx.batch_norm(p + ".bn1", ctx.linear(p + ".fc1", z, false)));
  h = ctx.dropout(p + ".drop", h, cfg.dis_dropout);
  return ad::relu(ctx.batch_norm(p + ".bn2", ctx.linear(p + ".fc2", h, false)));
}

}  // namespace

ad::Var domain_invariant(ForwardContext& ctx, const ModelConfig& cfg, ad::Var z) {
  return stack(ctx, cfg, "dis.di", z);
}

Halves disentangle(ForwardContext& ctx, const ModelConfig& cfg, ad::Var z) {
  Halves h;
  h.f_di = domain_invariant(ctx, cfg, z);
  h.f_ds = cfg.use_rd ? stack(ctx, cfg, "dis.ds", z) : h.f_di;
  return h;
}

std::vector<std::size_t> marginal_permutation(std::size_t n, std::uint64_t stream) {
  if (n < 2) throw Error("marginal_permutation: need at least 2 samples");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  auto gen = make_stream({stream, tag(StreamTag::kMinePerm)});
  for (;;) {
    std::shuffle(perm.begin(), perm.end(), gen);
    if (n > 4) break;
    bool fixed = false;
    for (std::size_t i = 0; i < n; ++i) fixed = fixed || perm[i] == i;
    if (!fixed) break;
  }
  return perm;
}

ad::Var mine_statistics(ForwardContext& ctx, const ModelConfig& cfg, ad::Var pairs) {
  ad::Var h = ctx.batch_norm("mine.bn1", ctx.linear("mine.fc1", pairs, false));
  h = ad::leaky_relu(h, cfg.mine_slope);
  return ctx.linear("mine.fc2", h, true);
}

ad::Var dv_bound(ad::Var t_joint, ad::Var t_marginal) {
  const Tensor& tm = t_marginal.value();
  const double shift = *std::max_element(tm.values().begin(), tm.values().end());
  ad::Var log_mean_exp =
      ad::add_scalar(ad::log(ad::mean_all(ad::exp(ad::add_scalar(t_marginal, -shift)))), shift);
  return ad::sub(ad::mean_all(t_joint), log_mean_exp);
}

ad::Var mine_estimate(ForwardContext& ctx, const ModelConfig& cfg, ad::Var f_di, ad::Var f_ds,
                      std::span<const std::size_t> perm) {
  const std::size_t n = f_di.shape()[0];
  if (n < 2) throw Error("mine_estimate: batch must have at least 2 samples");
  if (perm.size() != n) throw Error("mine_estimate: permutation length does not match batch");
  ad::Var shuffled = ad::gather_rows(f_ds, perm);
  ad::Var joint, marginal;
  if (cfg.mine_input == MineInput::kSum) {
    joint = ad::add(f_di, f_ds);
    marginal = ad::add(f_di, shuffled);
  } else {
    joint = ad::concat({f_di, f_ds}, 1);
    marginal = ad::concat({f_di, shuffled}, 1);
  }
  ad::Var t = mine_statistics(ctx, cfg, ad::concat({joint, marginal}, 0));
  return dv_bound(ad::slice(t, 0, 0, n), ad::slice(t, 0, n, n));
}

}  // namespace dafed::disentangle
