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

#ifndef DAFED_EXPLAIN_HPP_
#define DAFED_EXPLAIN_HPP_

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dafed/data.hpp"
#include "dafed/model.hpp"

// Gradient-free saliency over GCN activations and its faithfulness metrics.
namespace dafed::explain {

enum class MaskTarget {
  kNodeFeatures,  // row i of X scaled by m[i]
  kAdjacency,     // A_ij scaled by m[i] m[j], then renormalized
};

struct SaliencyMap {
  std::vector<double> scores;  // one per ROI
  std::size_t layer = 0;       // 1-based GCN layer
  int cls = 0;
  std::string subject_id;
  std::size_t window = 0;
};

/// Output of GCN layer `layer` (1-based) for one graph in eval mode, [N, C_l].
Tensor activation_map(const ModelConfig& cfg, const ParamStore& theta, const data::FCGraph& g,
                      std::size_t layer);

/// Eval-mode probability of `cls` for each graph with its inputs masked by
/// the matching ROI mask.
std::vector<double> masked_scores(const ModelConfig& cfg, const ParamStore& theta,
                                  const data::FCGraph& g, std::span<const std::vector<double>> masks,
                                  int cls, MaskTarget target = MaskTarget::kNodeFeatures);

/// Column-wise min-max normalization to [0, 1]; constant columns give zeros.
std::vector<std::vector<double>> channel_masks(const Tensor& activation);

/// Score-weighted combination of channel masks. Weights are the softmax of
/// each mask's class-score gain over the all-zero mask.
SaliencyMap score_cam(const ModelConfig& cfg, const ParamStore& theta, const data::FCGraph& g,
                      std::size_t layer, int cls, MaskTarget target = MaskTarget::kNodeFeatures);

/// score_cam over a given activation map; `weights` receives the channel
/// weights when non-null.
SaliencyMap score_cam_from_activation(const ModelConfig& cfg, const ParamStore& theta,
                                      const data::FCGraph& g, const Tensor& activation,
                                      std::size_t layer, int cls, MaskTarget target,
                                      std::vector<double>* weights);

/// (1/N) sum max(0, Y_i - O_i) / Y_i * 100, samples with Y_i <= 0 skipped.
double average_drop(std::span<const double> clean, std::span<const double> masked);

/// Percentage of samples with O_i > Y_i.
double average_increase(std::span<const double> clean, std::span<const double> masked);

struct RoiScore {
  std::size_t roi = 0;
  double mean_score = 0.0;
};

/// ROIs by descending mean |score|; ties keep the lower index first.
std::vector<RoiScore> roi_ranking(std::span<const SaliencyMap> maps);
std::vector<RoiScore> roi_ranking(std::span<const std::vector<double>> scores);

/// First `k` entries of a ranking.
std::vector<RoiScore> top_k(std::span<const RoiScore> ranking, std::size_t k = 10);

struct Edge {
  std::size_t roi_a = 0;
  std::size_t roi_b = 0;
  double correlation = 0.0;
  double p_value = 1.0;
};

/// Two-tailed p-value of a Pearson r over n samples, from
/// t = r sqrt((n - 2) / (1 - r^2)) with n - 2 degrees of freedom.
double correlation_p_value(double r, std::size_t n);

struct EdgeOptions {
  std::size_t top_rois = 10;
  std::size_t max_edges = 10;
  double alpha = 0.05;
};

/// For every edge among the top-ranked ROIs, correlates the per-subject FC
/// value with the group label. Keeps p <= alpha and the `max_edges` largest |r|.
std::vector<Edge> significant_edges(std::span<const std::vector<double>> subject_scores,
                                    std::span<const Tensor> subject_fc, std::span<const int> groups,
                                    const EdgeOptions& opts = {});

void write_saliency_csv(const std::filesystem::path& path,
                        std::span<const std::vector<RoiScore>> per_layer_rankings,
                        std::span<const std::size_t> layers, int cls);
void write_edges_csv(const std::filesystem::path& path, std::span<const Edge> edges);

struct Faithfulness {
  double drop_saliency = 0.0;
  double drop_random = 0.0;
  double increase_saliency = 0.0;
  double increase_random = 0.0;
};

/// Masks each graph by its own saliency map and by a random permutation of
/// the same map (equal sparsity), scoring the predicted class.
Faithfulness faithfulness(const ModelConfig& cfg, const ParamStore& theta,
                          std::span<const data::FCGraph* const> graphs, std::size_t layer,
                          std::uint64_t seed, MaskTarget target = MaskTarget::kNodeFeatures);

}  // namespace dafed::explain

#endif  // DAFED_EXPLAIN_HPP_
