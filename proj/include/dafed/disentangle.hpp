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

#ifndef DAFED_DISENTANGLE_HPP_
#define DAFED_DISENTANGLE_HPP_

#include <cstdint>
#include <span>
#include <vector>

#include "dafed/model.hpp"

namespace dafed::disentangle {

struct Halves {
  ad::Var f_di;  // domain-invariant, [B, dis_out]
  ad::Var f_ds;  // domain-specific, [B, dis_out]
};

/// Domain-invariant stack only (what the contrastive module re-evaluates).
ad::Var domain_invariant(ForwardContext& ctx, const ModelConfig& cfg, ad::Var z);

/// Two independent MLP stacks over Z. Without representation
/// disentanglement both halves are the domain-invariant output.
Halves disentangle(ForwardContext& ctx, const ModelConfig& cfg, ad::Var z);

/// Uniform permutation for the product-of-marginals pairing. For n <= 4 it
/// has no fixed points.
std::vector<std::size_t> marginal_permutation(std::size_t n, std::uint64_t stream);

/// Statistics network T(.) on a batch of pair encodings, [rows, mine_in] -> [rows, 1].
ad::Var mine_statistics(ForwardContext& ctx, const ModelConfig& cfg, ad::Var pairs);

/// mean(t_joint) - log(mean(exp(t_marginal))), the log term in shifted form.
ad::Var dv_bound(ad::Var t_joint, ad::Var t_marginal);

/// Donsker-Varadhan estimate with joint pairs (f_di[i], f_ds[i]) and
/// marginal pairs (f_di[i], f_ds[perm[i]]). Joint and marginal rows share
/// one pass through T so batch-norm statistics are common to both.
ad::Var mine_estimate(ForwardContext& ctx, const ModelConfig& cfg, ad::Var f_di, ad::Var f_ds,
                      std::span<const std::size_t> perm);

inline ad::Var mi_loss(ad::Var estimate) { return ad::abs(estimate); }
inline double mi_loss(double estimate) { return estimate < 0.0 ? -estimate : estimate; }

}  // namespace dafed::disentangle

#endif  // DAFED_DISENTANGLE_HPP_
