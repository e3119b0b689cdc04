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

#include "dafed/fusion.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>

namespace dafed::fusion {

namespace {

// [2B, D] -> [B * heads, 2, D / heads]
ad::Var split_heads(ad::Var x, std::size_t batch, std::size_t heads, std::size_t head_dim) {
  ad::Var t = ad::reshape(x, {batch, 2, heads, head_dim});
  t = ad::permute(t, {0, 2, 1, 3});
  return ad::reshape(t, {batch * heads, 2, head_dim});
}

ad::Var merge_heads(ad::Var x, std::size_t batch, std::size_t heads, std::size_t head_dim) {
  ad::Var t = ad::reshape(x, {batch, heads, 2, head_dim});
  t = ad::permute(t, {0, 2, 1, 3});
  return ad::reshape(t, {batch * 2, heads * head_dim});
}

}  // namespace

Fused fuse(ForwardContext& ctx, const ModelConfig& cfg, ad::Var f_di, ad::Var f_ds) {
  const std::size_t batch = f_di.shape()[0];
  const std::size_t dim = cfg.dis_out;
  const std::size_t head_dim = dim / cfg.heads;
  ad::Var tokens = ad::concat({ad::reshape(f_di, {batch, 1, dim}), ad::reshape(f_ds, {batch, 1, dim})}, 1);
  ad::Var flat = ad::reshape(tokens, {batch * 2, dim});
  ad::Var q = split_heads(ctx.linear("attn.q", flat, true), batch, cfg.heads, head_dim);
  ad::Var k = split_heads(ctx.linear("attn.k", flat, true), batch, cfg.heads, head_dim);
  ad::Var v = split_heads(ctx.linear("attn.v", flat, true), batch, cfg.heads, head_dim);
  ad::Var scores = ad::scale(ad::bmm(q, k, /*transpose_b=*/true),
                             1.0 / std::sqrt(static_cast<double>(head_dim)));
  Fused out;
  out.attention = ad::softmax(scores, 2);
  ad::Var attended = merge_heads(ad::bmm(out.attention, v), batch, cfg.heads, head_dim);
  out.features = ad::reshape(ctx.linear("attn.o", attended, true), {batch, 2 * dim});
  return out;
}

ad::Var classifier(ForwardContext& ctx, const ModelConfig& cfg, ad::Var fused) {
  ad::Var h = ad::relu(ctx.batch_norm("cls.bn1", ctx.linear("cls.fc1", fused, false)));
  h = ctx.dropout("cls.drop", h, cfg.cls_dropout);
  return ad::softmax(ctx.linear("cls.fc2", h, true), 1);
}

ad::Var domain_identifier(ForwardContext& ctx, const ModelConfig& cfg, ad::Var f_di,
                          double reverse_scale, bool reverse) {
  ad::Var x = reverse ? ad::grad_reverse(f_di, reverse_scale) : f_di;
  ad::Var h = ad::relu(ctx.batch_norm("di.bn1", ctx.linear("di.fc1", x, false)));
  h = ctx.dropout("di.drop", h, cfg.di_dropout);
  return ad::softmax(ctx.linear("di.fc2", h, true), 1);
}

ad::Var binary_cross_entropy(ad::Var p1, std::span<const int> targets) {
  const std::size_t n = p1.value().size();
  if (targets.size() != n) throw Error("binary_cross_entropy: target count does not match batch");
  ad::Tape& tape = *p1.tape();
  Tensor y({n}), not_y({n});
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] != 0 && targets[i] != 1) throw Error("binary_cross_entropy: targets must be 0/1");
    y[i] = targets[i];
    not_y[i] = 1.0 - targets[i];
  }
  ad::Var p = ad::clamp(ad::reshape(p1, {n}), kProbClamp, 1.0 - kProbClamp);
  ad::Var q = ad::add_scalar(ad::scale(p, -1.0), 1.0);
  ad::Var ll = ad::add(ad::mul(ad::log(p), tape.constant(std::move(y))),
                       ad::mul(ad::log(q), tape.constant(std::move(not_y))));
  return ad::scale(ad::mean_all(ll), -1.0);
}

ad::Var classify_loss(ad::Var probs, std::span<const int> labels) {
  return binary_cross_entropy(ad::slice(probs, 1, 1, 1), labels);
}

ad::Var domain_loss(ad::Var probs, std::span<const int> domains) {
  return binary_cross_entropy(ad::slice(probs, 1, 1, 1), domains);
}

double lambda_p(double p, double gamma) {
  if (p < 0.0 || p > 1.0) {
    spdlog::warn("lambda_p: progress {} outside [0, 1], clamped", p);
    p = std::clamp(p, 0.0, 1.0);
  }
  return 2.0 / (1.0 + std::exp(-gamma * p)) - 1.0;
}

LossCoefficients loss_coefficients(const LossWeights& w, SiteRole role) {
  return {role == SiteRole::kUnlabeledTarget ? 0.0 : 1.0, w.lambda1, w.lambda2, w.lambda_p};
}

double total_loss(const LossParts<double>& parts, const LossWeights& w, SiteRole role) {
  const auto k = loss_coefficients(w, role);
  return k.c * parts.c + k.mi * parts.mi + k.cl * parts.cl + k.di * parts.di;
}

ad::Var total_loss(ad::Tape& tape, const LossParts<std::optional<ad::Var>>& parts,
                   const LossWeights& w, SiteRole role) {
  const auto k = loss_coefficients(w, role);
  std::optional<ad::Var> acc;
  auto accumulate = [&](const std::optional<ad::Var>& part, double coef) {
    if (!part || coef == 0.0) return;
    ad::Var term = coef == 1.0 ? *part : ad::scale(*part, coef);
    acc = acc ? ad::add(*acc, term) : term;
  };
  accumulate(parts.c, k.c);
  accumulate(parts.mi, k.mi);
  accumulate(parts.cl, k.cl);
  accumulate(parts.di, k.di);
  return acc ? *acc : tape.constant(Tensor::scalar(0.0));
}

}  // namespace dafed::fusion
