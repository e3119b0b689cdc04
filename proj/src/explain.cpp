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

#include "dafed/explain.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <fstream>
#include <numeric>

#include "dafed/disentangle.hpp"
#include "dafed/fusion.hpp"
#include "dafed/rng.hpp"
#include "dafed/stfg.hpp"

namespace dafed::explain {

namespace {

constexpr std::size_t kChunk = 128;

void check_layer(const ModelConfig& cfg, std::size_t layer) {
  if (!cfg.use_stfg) throw Error("saliency needs the GCN feature generator");
  if (layer < 1 || layer > cfg.gcn_widths.size()) {
    throw Error("layer " + std::to_string(layer) + " outside 1.." +
                std::to_string(cfg.gcn_widths.size()));
  }
}

void check_class(int cls) {
  if (cls != 0 && cls != 1) throw Error("class must be 0 or 1");
}

data::FCGraph apply_mask(const data::FCGraph& g, std::span<const double> m, MaskTarget target) {
  const std::size_t n = g.rois();
  if (m.size() != n) throw Error("mask length does not match ROI count");
  data::FCGraph out = g;
  if (target == MaskTarget::kNodeFeatures) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) out.node_features[i * n + j] *= m[i];
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) out.adjacency[i * n + j] *= m[i] * m[j];
    }
    out.norm_adjacency = data::normalized_adjacency(out.adjacency);
  }
  return out;
}

std::vector<double> class_probs(const ModelConfig& cfg, const ParamStore& theta,
                                std::span<const data::FCGraph> graphs, int cls) {
  std::vector<double> out;
  out.reserve(graphs.size());
  for (std::size_t start = 0; start < graphs.size(); start += kChunk) {
    const std::size_t len = std::min(kChunk, graphs.size() - start);
    std::vector<const data::FCGraph*> ptrs;
    for (std::size_t i = 0; i < len; ++i) ptrs.push_back(&graphs[start + i]);
    const auto batch = stfg::make_batch(ptrs);
    ad::Tape tape;
    ForwardContext ctx(tape, theta, ad::Mode::kEval);
    auto halves = disentangle::disentangle(ctx, cfg, stfg::forward(ctx, cfg, batch).z);
    auto probs = fusion::classifier(ctx, cfg, fusion::fuse(ctx, cfg, halves.f_di, halves.f_ds).features);
    for (std::size_t i = 0; i < len; ++i) out.push_back(probs.value().at(i, static_cast<std::size_t>(cls)));
  }
  return out;
}

}  // namespace

Tensor activation_map(const ModelConfig& cfg, const ParamStore& theta, const data::FCGraph& g,
                      std::size_t layer) {
  check_layer(cfg, layer);
  const data::FCGraph* ptr = &g;
  const auto batch = stfg::make_batch(std::span<const data::FCGraph* const>(&ptr, 1));
  ad::Tape tape;
  ForwardContext ctx(tape, theta, ad::Mode::kEval);
  return stfg::forward(ctx, cfg, batch).activations[layer - 1].value();
}

std::vector<double> masked_scores(const ModelConfig& cfg, const ParamStore& theta,
                                  const data::FCGraph& g, std::span<const std::vector<double>> masks,
                                  int cls, MaskTarget target) {
  check_class(cls);
  std::vector<data::FCGraph> graphs;
  graphs.reserve(masks.size());
  for (const auto& m : masks) graphs.push_back(apply_mask(g, m, target));
  return class_probs(cfg, theta, graphs, cls);
}

std::vector<std::vector<double>> channel_masks(const Tensor& activation) {
  if (activation.rank() != 2) throw Error("channel_masks: expected [nodes, channels]");
  const std::size_t n = activation.dim(0), c = activation.dim(1);
  std::vector<std::vector<double>> masks(c, std::vector<double>(n, 0.0));
  for (std::size_t k = 0; k < c; ++k) {
    double lo = activation.at(0, k), hi = lo;
    for (std::size_t i = 1; i < n; ++i) {
      lo = std::min(lo, activation.at(i, k));
      hi = std::max(hi, activation.at(i, k));
    }
    if (!(hi > lo)) continue;
    for (std::size_t i = 0; i < n; ++i) masks[k][i] = (activation.at(i, k) - lo) / (hi - lo);
  }
  return masks;
}

SaliencyMap score_cam_from_activation(const ModelConfig& cfg, const ParamStore& theta,
                                      const data::FCGraph& g, const Tensor& activation,
                                      std::size_t layer, int cls, MaskTarget target,
                                      std::vector<double>* weights) {
  check_class(cls);
  const std::size_t n = g.rois();
  auto masks = channel_masks(activation);
  if (masks.empty() || masks.front().size() != n) throw Error("activation map does not match graph");
  masks.emplace_back(n, 0.0);  // baseline
  const auto scores = masked_scores(cfg, theta, g, masks, cls, target);
  masks.pop_back();
  const double baseline = scores.back();

  const std::size_t c = masks.size();
  std::vector<double> w(c);
  double top = -INFINITY;
  for (std::size_t k = 0; k < c; ++k) {
    w[k] = scores[k] - baseline;
    top = std::max(top, w[k]);
  }
  double z = 0.0;
  for (double& v : w) z += (v = std::exp(v - top));
  for (double& v : w) v /= z;

  SaliencyMap out;
  out.scores.assign(n, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < n; ++i) out.scores[i] += w[k] * masks[k][i];
  }
  out.layer = layer;
  out.cls = cls;
  out.subject_id = g.subject_id;
  out.window = g.window;
  if (weights) *weights = std::move(w);
  return out;
}

SaliencyMap score_cam(const ModelConfig& cfg, const ParamStore& theta, const data::FCGraph& g,
                      std::size_t layer, int cls, MaskTarget target) {
  return score_cam_from_activation(cfg, theta, g, activation_map(cfg, theta, g, layer), layer, cls,
                                   target, nullptr);
}

double average_drop(std::span<const double> clean, std::span<const double> masked) {
  if (clean.size() != masked.size()) throw Error("average_drop: length mismatch");
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    if (!(clean[i] > 0.0)) {
      spdlog::warn("average_drop: sample {} has non-positive clean score {}, excluded", i, clean[i]);
      continue;
    }
    sum += std::max(0.0, clean[i] - masked[i]) / clean[i];
    ++used;
  }
  return used == 0 ? 0.0 : sum / static_cast<double>(used) * 100.0;
}

double average_increase(std::span<const double> clean, std::span<const double> masked) {
  if (clean.size() != masked.size()) throw Error("average_increase: length mismatch");
  if (clean.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) hits += clean[i] < masked[i];
  return static_cast<double>(hits) / static_cast<double>(clean.size()) * 100.0;
}

std::vector<RoiScore> roi_ranking(std::span<const std::vector<double>> scores) {
  if (scores.empty()) return {};
  const std::size_t r = scores.front().size();
  std::vector<RoiScore> out(r);
  for (std::size_t i = 0; i < r; ++i) out[i].roi = i;
  for (const auto& s : scores) {
    if (s.size() != r) throw Error("roi_ranking: maps with different ROI counts");
    for (std::size_t i = 0; i < r; ++i) out[i].mean_score += std::abs(s[i]);
  }
  for (auto& e : out) e.mean_score /= static_cast<double>(scores.size());
  std::stable_sort(out.begin(), out.end(),
                   [](const RoiScore& a, const RoiScore& b) { return a.mean_score > b.mean_score; });
  return out;
}

std::vector<RoiScore> roi_ranking(std::span<const SaliencyMap> maps) {
  std::vector<std::vector<double>> scores;
  scores.reserve(maps.size());
  for (const auto& m : maps) scores.push_back(m.scores);
  return roi_ranking(scores);
}

std::vector<RoiScore> top_k(std::span<const RoiScore> ranking, std::size_t k) {
  return {ranking.begin(), ranking.begin() + static_cast<std::ptrdiff_t>(std::min(k, ranking.size()))};
}

double correlation_p_value(double r, std::size_t n) {
  if (n < 3) throw Error("correlation_p_value: need at least 3 samples");
  if (std::abs(r) >= 1.0) return 0.0;
  const double df = static_cast<double>(n - 2);
  const double t = r * std::sqrt(df / (1.0 - r * r));
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

std::vector<Edge> significant_edges(std::span<const std::vector<double>> subject_scores,
                                    std::span<const Tensor> subject_fc, std::span<const int> groups,
                                    const EdgeOptions& opts) {
  const std::size_t s = groups.size();
  if (subject_scores.size() != s || subject_fc.size() != s) {
    throw Error("significant_edges: scores, FC and groups differ in length");
  }
  std::size_t ones = 0;
  for (int gval : groups) {
    if (gval != 0 && gval != 1) throw Error("significant_edges: groups must be 0/1");
    ones += gval == 1;
  }
  if (ones < 3 || s - ones < 3) throw Error("significant_edges: need at least 3 subjects per group");

  const auto ranking = roi_ranking(subject_scores);
  const auto top = top_k(ranking, opts.top_rois);
  const std::size_t r = subject_fc.front().dim(0);
  const double gm = static_cast<double>(ones) / static_cast<double>(s);

  std::vector<Edge> edges;
  for (std::size_t a = 0; a < top.size(); ++a) {
    for (std::size_t b = a + 1; b < top.size(); ++b) {
      const std::size_t i = std::min(top[a].roi, top[b].roi);
      const std::size_t j = std::max(top[a].roi, top[b].roi);
      std::vector<double> x(s);
      for (std::size_t k = 0; k < s; ++k) {
        if (subject_fc[k].dim(0) != r) throw Error("significant_edges: FC matrices differ in size");
        x[k] = subject_fc[k].at(i, j);
      }
      const double xm = mean(x);
      double sxy = 0.0, sxx = 0.0, syy = 0.0;
      for (std::size_t k = 0; k < s; ++k) {
        const double dx = x[k] - xm, dy = groups[k] - gm;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
      }
      if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x.front(); }) || !(sxx > 0.0)) {
        spdlog::debug("significant_edges: edge ({}, {}) is constant across subjects, excluded", i, j);
        continue;
      }
      const double corr = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
      const double p = correlation_p_value(corr, s);
      if (p <= opts.alpha) edges.push_back({i, j, corr, p});
    }
  }
  std::stable_sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
    return std::abs(a.correlation) > std::abs(b.correlation);
  });
  if (edges.size() > opts.max_edges) edges.resize(opts.max_edges);
  return edges;
}

void write_saliency_csv(const std::filesystem::path& path,
                        std::span<const std::vector<RoiScore>> per_layer_rankings,
                        std::span<const std::size_t> layers, int cls) {
  if (per_layer_rankings.size() != layers.size()) throw Error("write_saliency_csv: layer count mismatch");
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << "roi_index,layer,class,mean_score\n";
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (const auto& e : per_layer_rankings[l]) {
      out << e.roi << ',' << layers[l] << ',' << cls << ',' << e.mean_score << '\n';
    }
  }
}

void write_edges_csv(const std::filesystem::path& path, std::span<const Edge> edges) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << "roi_a,roi_b,correlation,p_value\n";
  for (const auto& e : edges) out << e.roi_a << ',' << e.roi_b << ',' << e.correlation << ',' << e.p_value << '\n';
}

Faithfulness faithfulness(const ModelConfig& cfg, const ParamStore& theta,
                          std::span<const data::FCGraph* const> graphs, std::size_t layer,
                          std::uint64_t seed, MaskTarget target) {
  std::vector<double> clean, by_saliency, by_random;
  for (const data::FCGraph* g : graphs) {
    const double p1 = class_probs(cfg, theta, std::span<const data::FCGraph>(g, 1), 1).front();
    const int cls = p1 > 0.5 ? 1 : 0;
    const SaliencyMap map = score_cam(cfg, theta, *g, layer, cls, target);
    std::vector<double> shuffled = map.scores;
    auto gen = make_stream({seed, tag(StreamTag::kRandomMask), stfg::sample_key(*g), layer});
    std::shuffle(shuffled.begin(), shuffled.end(), gen);
    const std::vector<std::vector<double>> masks{map.scores, shuffled};
    const auto scores = masked_scores(cfg, theta, *g, masks, cls, target);
    clean.push_back(cls == 1 ? p1 : 1.0 - p1);
    by_saliency.push_back(scores[0]);
    by_random.push_back(scores[1]);
  }
  return {average_drop(clean, by_saliency), average_drop(clean, by_random),
          average_increase(clean, by_saliency), average_increase(clean, by_random)};
}

}  // namespace dafed::explain
