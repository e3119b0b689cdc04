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

#include "dafed/model.hpp"

#include <cmath>
#include <numeric>

#include "dafed/rng.hpp"

namespace dafed {

std::size_t ModelConfig::embed_dim() const {
  return 2 * std::accumulate(gcn_widths.begin(), gcn_widths.end(), std::size_t{0});
}

void ModelConfig::validate() const {
  if (rois < 2) throw Error("model: rois must be >= 2");
  if (gcn_widths.empty()) throw Error("model: at least one GCN layer is required");
  if (gcn_dropout.size() != gcn_widths.size()) {
    throw Error("model: gcn_dropout needs one rate per GCN layer");
  }
  if (heads == 0 || dis_out % heads != 0) {
    throw Error("model: hidden width " + std::to_string(dis_out) + " not divisible by " +
                std::to_string(heads) + " heads");
  }
}

namespace {

void add_weight(ParamStore& s, const std::string& name, std::size_t in, std::size_t out,
                std::uint64_t seed) {
  auto gen = make_stream({seed, tag(StreamTag::kInit), hash_id(name)});
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  Tensor w({in, out});
  for (auto& v : w.values()) v = (2.0 * uniform01(gen) - 1.0) * limit;
  s.params[name] = std::move(w);
}

void add_bias(ParamStore& s, const std::string& name, std::size_t n) {
  s.params[name] = Tensor({n});
}

void add_bn(ParamStore& s, const std::string& prefix, std::size_t n) {
  s.params[prefix + ".gamma"] = Tensor({n}, 1.0);
  s.params[prefix + ".beta"] = Tensor({n});
  s.buffers[prefix + ".running_mean"] = Tensor({n});
  s.buffers[prefix + ".running_var"] = Tensor({n}, 1.0);
}

}  // namespace

ParamStore init_theta(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore s;
  if (cfg.use_stfg) {
    std::size_t in = cfg.rois;
    for (std::size_t l = 0; l < cfg.gcn_widths.size(); ++l) {
      const std::string p = "stfg.gcn" + std::to_string(l + 1);
      add_weight(s, p + ".weight", in, cfg.gcn_widths[l], seed);
      add_bn(s, p + ".bn", cfg.gcn_widths[l]);
      in = cfg.gcn_widths[l];
    }
  } else {
    add_weight(s, "stfg.flat.weight", cfg.rois * cfg.rois, cfg.embed_dim(), seed);
    add_bn(s, "stfg.flat.bn", cfg.embed_dim());
  }
  for (const char* stack : {"di", "ds"}) {
    if (!cfg.use_rd && std::string(stack) == "ds") continue;
    const std::string p = std::string("dis.") + stack;
    add_weight(s, p + ".fc1.weight", cfg.embed_dim(), cfg.dis_hidden, seed);
    add_bn(s, p + ".bn1", cfg.dis_hidden);
    add_weight(s, p + ".fc2.weight", cfg.dis_hidden, cfg.dis_out, seed);
    add_bn(s, p + ".bn2", cfg.dis_out);
  }
  for (const char* proj : {"q", "k", "v", "o"}) {
    const std::string p = std::string("attn.") + proj;
    add_weight(s, p + ".weight", cfg.dis_out, cfg.dis_out, seed);
    add_bias(s, p + ".bias", cfg.dis_out);
  }
  add_weight(s, "cls.fc1.weight", cfg.fused_dim(), cfg.cls_hidden, seed);
  add_bn(s, "cls.bn1", cfg.cls_hidden);
  add_weight(s, "cls.fc2.weight", cfg.cls_hidden, 2, seed);
  add_bias(s, "cls.fc2.bias", 2);
  add_weight(s, "di.fc1.weight", cfg.dis_out, cfg.di_hidden, seed);
  add_bn(s, "di.bn1", cfg.di_hidden);
  add_weight(s, "di.fc2.weight", cfg.di_hidden, 2, seed);
  add_bias(s, "di.fc2.bias", 2);
  if (cfg.use_rd) {
    add_weight(s, "mine.fc1.weight", cfg.mine_in(), cfg.mine_hidden, seed);
    add_bn(s, "mine.bn1", cfg.mine_hidden);
    add_weight(s, "mine.fc2.weight", cfg.mine_hidden, 1, seed);
    add_bias(s, "mine.fc2.bias", 1);
  }
  return s;
}

ad::Var ForwardContext::param(const std::string& name) {
  if (auto it = bound_.find(name); it != bound_.end()) return it->second;
  const Tensor& value = theta_.param(name);
  bool frozen = false;
  for (const auto& p : frozen_) frozen = frozen || name.starts_with(p);
  ad::Var v = frozen ? tape_.constant(value) : tape_.param(name, value);
  bound_.emplace(name, v);
  return v;
}

ad::Var ForwardContext::linear(const std::string& prefix, ad::Var x, bool bias) {
  ad::Var y = ad::matmul(x, param(prefix + ".weight"));
  if (bias) y = ad::add(y, param(prefix + ".bias"));
  return y;
}

ad::Var ForwardContext::batch_norm(const std::string& prefix, ad::Var x) {
  ad::BatchNormStats stats{theta_.buffer(prefix + ".running_mean"),
                           theta_.buffer(prefix + ".running_var")};
  ad::BatchNormStats updated;
  const bool write = training() && sink_ != nullptr;
  ad::Var y = ad::batch_norm(x, param(prefix + ".gamma"), param(prefix + ".beta"), stats, mode_,
                             write ? &updated : nullptr);
  if (write) {
    sink_->buffers[prefix + ".running_mean"] = std::move(updated.running_mean);
    sink_->buffers[prefix + ".running_var"] = std::move(updated.running_var);
  }
  return y;
}

ad::Var ForwardContext::dropout(const std::string& layer, ad::Var x, double rate) {
  if (!training() || rate == 0.0) return x;
  if (sample_keys_.empty()) throw Error("dropout in train mode needs per-sample keys");
  return ad::dropout(x, rate, mode_, stream_seed({dropout_stream_, hash_id(layer)}), sample_keys_);
}

}  // namespace dafed
