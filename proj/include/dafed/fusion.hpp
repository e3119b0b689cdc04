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

#ifndef DAFED_FUSION_HPP_
#define DAFED_FUSION_HPP_

#include <optional>
#include <span>

#include "dafed/model.hpp"

// Attention fusion of the two halves, the label classifier, the domain
// identifier and the weighted objective.
namespace dafed::fusion {

inline constexpr double kProbClamp = 1e-12;

struct Fused {
  ad::Var features;   // [B, 2 * dis_out], the two attended tokens flattened
  ad::Var attention;  // [B * heads, 2, 2], softmax rows
};

/// Unmasked multi-head self-attention over the 2-token sequence (f_di, f_ds).
Fused fuse(ForwardContext& ctx, const ModelConfig& cfg, ad::Var f_di, ad::Var f_ds);

/// Class probabilities [B, 2].
ad::Var classifier(ForwardContext& ctx, const ModelConfig& cfg, ad::Var fused);

/// Domain probabilities [B, 2] (column 1 = target). When `reverse` is set the
/// input passes through a gradient-reversal layer of strength `reverse_scale`.
ad::Var domain_identifier(ForwardContext& ctx, const ModelConfig& cfg, ad::Var f_di,
                          double reverse_scale, bool reverse = true);

/// Mean of -[y log p + (1 - y) log(1 - p)] with p clamped into [1e-12, 1 - 1e-12].
ad::Var binary_cross_entropy(ad::Var p1, std::span<const int> targets);

/// Cross-entropy of the class-1 probability column against labels.
ad::Var classify_loss(ad::Var probs, std::span<const int> labels);
/// Same form against domain indicators (0 = source, 1 = target).
ad::Var domain_loss(ad::Var probs, std::span<const int> domains);

/// 2 / (1 + exp(-gamma p)) - 1, p clamped into [0, 1].
double lambda_p(double p, double gamma);

enum class SiteRole { kSource, kLabeledTarget, kUnlabeledTarget };

struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 0.1;
  double gamma = 10.0;
  double lambda_p = 0.0;
};

struct LossCoefficients {
  double c, mi, cl, di;
};

/// Unlabeled targets carry no classification term.
LossCoefficients loss_coefficients(const LossWeights& w, SiteRole role);

template <typename T>
struct LossParts {
  T c{}, mi{}, cl{}, di{};
};

double total_loss(const LossParts<double>& parts, const LossWeights& w, SiteRole role);

/// Var form; absent parts count as zero.
ad::Var total_loss(ad::Tape& tape, const LossParts<std::optional<ad::Var>>& parts,
                   const LossWeights& w, SiteRole role);

}  // namespace dafed::fusion

#endif  // DAFED_FUSION_HPP_
