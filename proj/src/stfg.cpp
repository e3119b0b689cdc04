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

#include "dafed/stfg.hpp"

#include <algorithm>

#include "dafed/rng.hpp"

namespace dafed::stfg {

std::uint64_t sample_key(const data::FCGraph& g) {
  return stream_seed({hash_id(g.site_id), hash_id(g.subject_id), g.window});
}

GraphBatch make_batch(std::span<const data::FCGraph* const> graphs) {
  if (graphs.empty()) throw Error("make_batch: empty batch");
  GraphBatch b;
  b.batch = graphs.size();
  b.nodes = graphs.front()->rois();
  const std::size_t n = b.nodes;
  b.features = Tensor({b.batch * n, n});
  b.adjacency = Tensor({b.batch, n, n});
  for (std::size_t i = 0; i < b.batch; ++i) {
    const data::FCGraph& g = *graphs[i];
    if (g.rois() != n) throw Error("make_batch: graphs with different ROI counts");
    std::copy_n(g.node_features.data(), n * n, b.features.data() + i * n * n);
    std::copy_n(g.norm_adjacency.data(), n * n, b.adjacency.data() + i * n * n);
    b.sample_keys.push_back(sample_key(g));
  }
  return b;
}

ad::Var gcn_propagate(ad::Var h, ad::Var adjacency, ad::Var weight, std::size_t batch,
                      std::size_t nodes) {
  const std::size_t d_in = h.shape()[1];
  const std::size_t d_out = weight.shape()[1];
  // Multiply by W first when it shrinks the width.
  if (d_out <= d_in) {
    ad::Var hw = ad::reshape(ad::matmul(h, weight), {batch, nodes, d_out});
    return ad::reshape(ad::bmm(adjacency, hw), {batch * nodes, d_out});
  }
  ad::Var ah = ad::bmm(adjacency, ad::reshape(h, {batch, nodes, d_in}));
  return ad::matmul(ad::reshape(ah, {batch * nodes, d_in}), weight);
}

ad::Var gcn_layer(ForwardContext& ctx, const std::string& prefix, ad::Var h, ad::Var adjacency,
                  std::size_t batch, std::size_t nodes, double dropout) {
  h = ctx.dropout(prefix, h, dropout);
  ad::Var y = gcn_propagate(h, adjacency, ctx.param(prefix + ".weight"), batch, nodes);
  return ad::relu(ctx.batch_norm(prefix + ".bn", y));
}

ad::Var jk_pool(ad::Var h, std::size_t batch, std::size_t nodes) {
  if (nodes == 0) throw Error("jk_pool: graph without nodes");
  const std::size_t d = h.shape()[1];
  ad::Var cube = ad::reshape(h, {batch, nodes, d});
  return ad::concat({ad::mean(cube, 1), ad::max(cube, 1)}, 1);
}

ad::Var jk_concat(const std::vector<ad::Var>& pools) {
  if (pools.size() == 1) return pools.front();
  return ad::concat(pools, 1);
}

Output forward(ForwardContext& ctx, const ModelConfig& cfg, const GraphBatch& batch) {
  Output out;
  ad::Var x = ctx.constant(batch.features);
  if (!cfg.use_stfg) {
    ad::Var flat = ad::reshape(x, {batch.batch, batch.nodes * batch.nodes});
    out.z = ad::relu(ctx.batch_norm("stfg.flat.bn", ctx.linear("stfg.flat", flat, false)));
    return out;
  }
  ad::Var adj = ctx.constant(batch.adjacency);
  std::vector<ad::Var> pools;
  ad::Var h = x;
  for (std::size_t l = 0; l < cfg.gcn_widths.size(); ++l) {
    h = gcn_layer(ctx, "stfg.gcn" + std::to_string(l + 1), h, adj, batch.batch, batch.nodes,
                  cfg.gcn_dropout[l]);
    out.activations.push_back(h);
    pools.push_back(jk_pool(h, batch.batch, batch.nodes));
  }
  out.z = jk_concat(pools);
  return out;
}

}  // namespace dafed::stfg
