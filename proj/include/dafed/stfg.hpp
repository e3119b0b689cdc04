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

#ifndef DAFED_STFG_HPP_
#define DAFED_STFG_HPP_

#include <span>
#include <vector>

#include "dafed/data.hpp"
#include "dafed/model.hpp"

// Spatial-temporal feature generator: stacked GCN layers whose mean/max
// pooled outputs are concatenated into the embedding Z.
namespace dafed::stfg {

/// A batch of graphs laid out for the GCN: node features stacked to
/// [B*N, R] and normalized adjacencies to [B, N, N].
struct GraphBatch {
  Tensor features;
  Tensor adjacency;
  std::size_t batch = 0;
  std::size_t nodes = 0;
  std::vector<std::uint64_t> sample_keys;  // dropout group keys, one per graph
};

std::uint64_t sample_key(const data::FCGraph& g);
GraphBatch make_batch(std::span<const data::FCGraph* const> graphs);

/// Â H W for each graph in the batch; h is [B*N, d_in], adjacency [B, N, N].
ad::Var gcn_propagate(ad::Var h, ad::Var adjacency, ad::Var weight, std::size_t batch,
                      std::size_t nodes);

/// relu(bn(Â dropout(H) W)).
ad::Var gcn_layer(ForwardContext& ctx, const std::string& prefix, ad::Var h, ad::Var adjacency,
                  std::size_t batch, std::size_t nodes, double dropout);

/// [B*N, d] -> [B, 2d]: mean over nodes || max over nodes.
ad::Var jk_pool(ad::Var h, std::size_t batch, std::size_t nodes);

/// z(1) || ... || z(L) along features.
ad::Var jk_concat(const std::vector<ad::Var>& pools);

struct Output {
  ad::Var z;                         // [B, embed_dim]
  std::vector<ad::Var> activations;  // per GCN layer, [B*N, width]
};

Output forward(ForwardContext& ctx, const ModelConfig& cfg, const GraphBatch& batch);

}  // namespace dafed::stfg

#endif  // DAFED_STFG_HPP_
