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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>

#include "dafed/data.hpp"
#include "dafed/explain.hpp"
#include "dafed/fedsim.hpp"
#include "dafed/model.hpp"
#include "test_util.hpp"

namespace dafed::explain {
namespace {

using testing::random_tensor;

constexpr std::size_t kRois = 6;

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.rois = kRois;
  cfg.gcn_widths = {8, 6, 4, 4};
  cfg.dis_hidden = 12;
  cfg.dis_out = 8;
  cfg.heads = 2;
  cfg.cls_hidden = 10;
  cfg.di_hidden = 6;
  cfg.mine_hidden = 5;
  return cfg;
}

data::FCGraph graph(std::uint64_t seed) {
  const Tensor x = random_tensor({kRois + 14, kRois}, seed);
  auto g = data::build_graph(data::fisher_z_matrix(data::pearson_matrix(x)), 3);
  g.subject_id = "s" + std::to_string(seed);
  return g;
}

TEST(ScoreCam, ConstantChannelsGiveZeroSaliency) {
  const auto cfg = small_model();
  const auto theta = init_theta(cfg, 1);
  const auto g = graph(2);
  Tensor act({kRois, 4});
  for (double& v : act.values()) v = 3.0;
  std::vector<double> w;
  const auto map = score_cam_from_activation(cfg, theta, g, act, 2, 1, MaskTarget::kNodeFeatures, &w);
  for (double s : map.scores) EXPECT_EQ(s, 0.0);
  for (double v : w) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(ScoreCam, PlantedChannelRanksPlantedRoisFirst) {
  const auto cfg = small_model();
  const auto theta = init_theta(cfg, 3);
  const auto g = graph(4);
  Tensor act({kRois, 3});
  act.at(1, 0) = 2.0;
  act.at(4, 0) = 2.0;
  const auto map = score_cam_from_activation(cfg, theta, g, act, 1, 0, MaskTarget::kNodeFeatures, nullptr);
  const auto ranking = roi_ranking(std::vector<std::vector<double>>{map.scores});
  EXPECT_EQ(ranking[0].roi, 1u);
  EXPECT_EQ(ranking[1].roi, 4u);
  EXPECT_GT(ranking[1].mean_score, 0.0);
  EXPECT_EQ(ranking[2].mean_score, 0.0);
}

TEST(ScoreCam, MasksAreColumnMinMax) {
  const Tensor act = Tensor::matrix({{1, 5, 2}, {3, 5, -2}, {2, 5, 0}});
  const auto m = channel_masks(act);
  ASSERT_EQ(m.size(), 3u);
  EXPECT_EQ(m[0], (std::vector<double>{0.0, 1.0, 0.5}));
  EXPECT_EQ(m[1], (std::vector<double>{0.0, 0.0, 0.0}));
  EXPECT_EQ(m[2], (std::vector<double>{1.0, 0.0, 0.5}));
}

TEST(ScoreCam, ChannelWeightsSumToOne) {
  const auto cfg = small_model();
  const auto theta = init_theta(cfg, 5);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto g = graph(10 + s);
    for (std::size_t layer = 1; layer <= 4; ++layer) {
      std::vector<double> w;
      const auto act = activation_map(cfg, theta, g, layer);
      EXPECT_EQ(act.dim(0), kRois);
      EXPECT_EQ(act.dim(1), cfg.gcn_widths[layer - 1]);
      score_cam_from_activation(cfg, theta, g, act, layer, static_cast<int>(s % 2),
                                MaskTarget::kNodeFeatures, &w);
      EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
    }
  }
}

TEST(ScoreCam, WeightsAreSoftmaxOfScoreGain) {
  const auto cfg = small_model();
  const auto theta = init_theta(cfg, 6);
  const auto g = graph(7);
  const auto act = activation_map(cfg, theta, g, 3);
  std::vector<double> w;
  const auto map = score_cam_from_activation(cfg, theta, g, act, 3, 1, MaskTarget::kNodeFeatures, &w);

  auto masks = channel_masks(act);
  masks.emplace_back(kRois, 0.0);
  const auto scores = masked_scores(cfg, theta, g, masks, 1);
  double z = 0.0;
  for (std::size_t k = 0; k + 1 < scores.size(); ++k) z += std::exp(scores[k] - scores.back());
  std::vector<double> expected(kRois, 0.0);
  for (std::size_t k = 0; k + 1 < scores.size(); ++k) {
    const double wk = std::exp(scores[k] - scores.back()) / z;
    EXPECT_NEAR(w[k], wk, 1e-14);
    for (std::size_t i = 0; i < kRois; ++i) expected[i] += wk * masks[k][i];
  }
  for (std::size_t i = 0; i < kRois; ++i) EXPECT_NEAR(map.scores[i], expected[i], 1e-14);
}

TEST(ScoreCam, RejectsLayerAndClassOutOfRange) {
  const auto cfg = small_model();
  const auto theta = init_theta(cfg, 1);
  const auto g = graph(1);
  EXPECT_THROW(score_cam(cfg, theta, g, 0, 1), Error);
  EXPECT_THROW(score_cam(cfg, theta, g, 5, 1), Error);
  EXPECT_THROW(score_cam(cfg, theta, g, 1, 2), Error);
  EXPECT_NO_THROW(score_cam(cfg, theta, g, 4, 0));
}

TEST(ScoreCam, AdjacencyMaskingIsAvailable) {
  const auto cfg = small_model();
  const auto theta = init_theta(cfg, 2);
  const auto g = graph(3);
  const auto a = score_cam(cfg, theta, g, 2, 1, MaskTarget::kAdjacency);
  ASSERT_EQ(a.scores.size(), kRois);
  for (double s : a.scores) {
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0);
  }
}

TEST(ScoreCam, NoisyParametersSameWithOrWithoutOuterTape) {
  const auto cfg = small_model();
  const auto noisy = fed::add_noise(init_theta(cfg, 8), {0.01, 99});
  const auto g = graph(9);
  const auto plain = score_cam(cfg, noisy, g, 2, 1);

  ad::Tape tape;
  ForwardContext ctx(tape, noisy, ad::Mode::kTrain);
  auto w = ctx.param("stfg.gcn1.weight");
  auto busy = ad::sum_all(ad::mul(w, w));
  const auto inside = score_cam(cfg, noisy, g, 2, 1);
  tape.backward(busy);
  EXPECT_EQ(plain.scores, inside.scores);
  EXPECT_EQ(plain.subject_id, g.subject_id);
}

// --- faithfulness metrics ------------------------------------------------------------

TEST(AverageDrop, Cases) {
  const std::vector<double> y{0.9, 0.6, 0.7, 0.55};
  std::vector<double> half(y.size()), above(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    half[i] = y[i] / 2;
    above[i] = y[i] + 0.01;
  }
  EXPECT_EQ(average_drop(y, y), 0.0);
  EXPECT_NEAR(average_drop(y, half), 50.0, 1e-12);
  EXPECT_EQ(average_drop(y, above), 0.0);
}

TEST(AverageDrop, NonPositiveCleanScoresAreExcluded) {
  const std::vector<double> y{0.8, 0.0, -1.0, 0.5};
  const std::vector<double> o{0.4, 0.3, 0.2, 0.5};
  EXPECT_NEAR(average_drop(y, o), 25.0, 1e-12);
  EXPECT_THROW(average_drop(y, std::vector<double>{0.1}), Error);
}

TEST(AverageDrop, IsSampleCountInvariant) {
  const std::vector<double> y{0.9, 0.6}, o{0.3, 0.6};
  std::vector<double> yy, oo;
  for (int rep = 0; rep < 5; ++rep) {
    yy.insert(yy.end(), y.begin(), y.end());
    oo.insert(oo.end(), o.begin(), o.end());
  }
  EXPECT_NEAR(average_drop(y, o), average_drop(yy, oo), 1e-12);
}

TEST(AverageIncrease, Cases) {
  const std::vector<double> y{0.5, 0.6, 0.7, 0.8};
  EXPECT_EQ(average_increase(y, std::vector<double>{0.6, 0.7, 0.8, 0.9}), 100.0);
  EXPECT_EQ(average_increase(y, y), 0.0);
  EXPECT_EQ(average_increase(y, std::vector<double>{0.6, 0.6, 0.8, 0.1}), 50.0);
}

TEST(Faithfulness, ValuesArePercentages) {
  const auto cfg = small_model();
  const auto theta = init_theta(cfg, 4);
  std::vector<data::FCGraph> graphs;
  for (std::uint64_t s = 0; s < 6; ++s) graphs.push_back(graph(30 + s));
  std::vector<const data::FCGraph*> ptrs;
  for (const auto& g : graphs) ptrs.push_back(&g);
  const auto f = faithfulness(cfg, theta, ptrs, 2, 0);
  for (double v : {f.drop_saliency, f.drop_random, f.increase_saliency, f.increase_random}) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 100.0);
  }
  const auto again = faithfulness(cfg, theta, ptrs, 2, 0);
  EXPECT_EQ(f.drop_random, again.drop_random);
  EXPECT_EQ(f.drop_saliency, again.drop_saliency);
}

// --- ranking ---------------------------------------------------------------------------

TEST(RoiRanking, SingleMapKeepsItsOwnOrder) {
  const std::vector<std::vector<double>> maps{{0.1, 0.7, -0.9, 0.3}};
  const auto r = roi_ranking(maps);
  ASSERT_EQ(r.size(), 4u);
  EXPECT_EQ(r[0].roi, 2u);
  EXPECT_EQ(r[1].roi, 1u);
  EXPECT_EQ(r[2].roi, 3u);
  EXPECT_EQ(r[3].roi, 0u);
  EXPECT_EQ(r[0].mean_score, 0.9);
}

TEST(RoiRanking, TiesKeepLowerIndexFirst) {
  const std::vector<std::vector<double>> maps{{0.2, 0.8, 0.5}, {0.8, 0.2, 0.5}};
  const auto r = roi_ranking(maps);
  EXPECT_EQ(r[0].roi, 0u);
  EXPECT_EQ(r[1].roi, 1u);
  EXPECT_EQ(r[2].roi, 2u);
  EXPECT_EQ(r[0].mean_score, r[1].mean_score);
}

TEST(RoiRanking, MeanMatchesArithmetic) {
  std::vector<std::vector<double>> maps;
  for (std::uint64_t s = 0; s < 7; ++s) {
    const auto t = random_tensor({1, 9}, s);
    maps.emplace_back(t.values().begin(), t.values().end());
  }
  const auto r = roi_ranking(maps);
  for (const auto& e : r) {
    double sum = 0.0;
    for (const auto& m : maps) sum += std::abs(m[e.roi]);
    EXPECT_NEAR(e.mean_score, sum / 7.0, 1e-15);
  }
  for (std::size_t i = 1; i < r.size(); ++i) EXPECT_GE(r[i - 1].mean_score, r[i].mean_score);
  EXPECT_EQ(top_k(r, 4).size(), 4u);
  EXPECT_EQ(top_k(r).size(), 9u);
  EXPECT_THROW(roi_ranking(std::vector<std::vector<double>>{{1.0}, {1.0, 2.0}}), Error);
}

// --- edge significance -----------------------------------------------------------------

// Two-tailed Student-t tail by Simpson integration of the density.
double t_tail_oracle(double t, double df) {
  const double c = std::exp(std::lgamma((df + 1) / 2) - std::lgamma(df / 2)) / std::sqrt(df * std::numbers::pi);
  auto pdf = [&](double x) { return c * std::pow(1 + x * x / df, -(df + 1) / 2); };
  const int n = 20000;
  const double h = std::abs(t) / n;
  double s = pdf(0) + pdf(std::abs(t));
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4 : 2) * pdf(i * h);
  return 1.0 - 2.0 * s * h / 3.0;
}

TEST(Edges, PValueMatchesTDistribution) {
  for (auto [r, n] : {std::pair{0.5, 10}, {-0.3, 25}, {0.8, 6}, {0.05, 100}}) {
    const double t = r * std::sqrt((n - 2) / (1 - r * r));
    EXPECT_NEAR(correlation_p_value(r, n), t_tail_oracle(t, n - 2), 1e-10) << r << " " << n;
  }
  EXPECT_NEAR(correlation_p_value(0.0, 12), 1.0, 1e-15);
  EXPECT_THROW(correlation_p_value(0.1, 2), Error);
}

struct EdgeCase {
  std::vector<std::vector<double>> scores;
  std::vector<Tensor> fc;
  std::vector<int> groups{0, 0, 0, 0, 1, 1, 1, 1};
};

// Edge (0,1) tracks the group, (0,2) is weak, everything touching ROI 3 is constant.
EdgeCase edge_case() {
  EdgeCase c;
  const std::vector<double> weak{0.3, -0.1, 0.2, 0.5, 0.1, 0.4, -0.2, 0.3};
  const std::vector<double> jitter{0.01, -0.02, 0.03, 0.0, 0.02, -0.01, 0.0, 0.01};
  for (std::size_t k = 0; k < c.groups.size(); ++k) {
    Tensor f({4, 4});
    auto set = [&](std::size_t i, std::size_t j, double v) { f.at(i, j) = f.at(j, i) = v; };
    set(0, 1, 0.2 + 0.5 * c.groups[k] + jitter[k]);
    set(0, 2, weak[k]);
    set(1, 2, 0.1 * static_cast<double>(k % 3));
    set(0, 3, 0.4);
    set(1, 3, 0.4);
    set(2, 3, 0.4);
    c.fc.push_back(f);
    c.scores.push_back({0.9, 0.8, 0.7, 0.6});
  }
  return c;
}

double pearson(const std::vector<double>& x, const std::vector<int>& g) {
  const double n = static_cast<double>(x.size());
  const double xm = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double gm = std::accumulate(g.begin(), g.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - xm) * (g[i] - gm);
    sxx += (x[i] - xm) * (x[i] - xm);
    syy += (g[i] - gm) * (g[i] - gm);
  }
  return sxy / std::sqrt(sxx * syy);
}

TEST(Edges, KeepsSignificantEdgesOnly) {
  const auto c = edge_case();
  const auto edges = significant_edges(c.scores, c.fc, c.groups);
  ASSERT_EQ(edges.size(), 1u);
  EXPECT_EQ(edges[0].roi_a, 0u);
  EXPECT_EQ(edges[0].roi_b, 1u);
  std::vector<double> x;
  for (const auto& f : c.fc) x.push_back(f.at(0, 1));
  EXPECT_NEAR(edges[0].correlation, pearson(x, c.groups), 1e-12);
  EXPECT_NEAR(edges[0].p_value, correlation_p_value(pearson(x, c.groups), 8), 1e-12);

  EdgeOptions loose;
  loose.alpha = 1.0;
  const auto all = significant_edges(c.scores, c.fc, c.groups, loose);
  EXPECT_EQ(all.size(), 3u);  // the three edges touching ROI 3 are constant
  for (std::size_t i = 1; i < all.size(); ++i) {
    EXPECT_GE(std::abs(all[i - 1].correlation), std::abs(all[i].correlation));
  }
  loose.max_edges = 2;
  EXPECT_EQ(significant_edges(c.scores, c.fc, c.groups, loose).size(), 2u);
}

TEST(Edges, ThresholdIsInclusive) {
  const auto c = edge_case();
  EdgeOptions loose;
  loose.alpha = 1.0;
  const auto all = significant_edges(c.scores, c.fc, c.groups, loose);
  EdgeOptions exact;
  exact.alpha = all[1].p_value;
  const auto kept = significant_edges(c.scores, c.fc, c.groups, exact);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[1].p_value, exact.alpha);
  exact.alpha = std::nextafter(all[1].p_value, 0.0);
  EXPECT_EQ(significant_edges(c.scores, c.fc, c.groups, exact).size(), 1u);
}

TEST(Edges, ConstantFcGivesNoEdges) {
  auto c = edge_case();
  for (auto& f : c.fc) {
    for (double& v : f.values()) v = 0.25;
  }
  EdgeOptions loose;
  loose.alpha = 1.0;
  EXPECT_TRUE(significant_edges(c.scores, c.fc, c.groups, loose).empty());
}

TEST(Edges, NeedsThreeSubjectsPerGroup) {
  auto c = edge_case();
  c.groups = {0, 0, 0, 0, 0, 0, 1, 1};
  EXPECT_THROW(significant_edges(c.scores, c.fc, c.groups), Error);
}

// --- export ------------------------------------------------------------------------------

TEST(Export, SaliencyCsvHasOneRowPerRoiAndLayer) {
  const auto dir = std::filesystem::temp_directory_path() / "dafed_explain_test";
  std::filesystem::create_directories(dir);
  const std::vector<std::vector<RoiScore>> rankings{
      roi_ranking(std::vector<std::vector<double>>{{0.1, 0.2, 0.3}}),
      roi_ranking(std::vector<std::vector<double>>{{0.3, 0.2, 0.1}})};
  const std::vector<std::size_t> layers{1, 4};
  write_saliency_csv(dir / "s.csv", rankings, layers, 1);
  std::ifstream in(dir / "s.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "roi_index,layer,class,mean_score");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 6u);

  write_edges_csv(dir / "e.csv", std::vector<Edge>{{0, 1, 0.5, 0.01}});
  std::ifstream ein(dir / "e.csv");
  std::getline(ein, line);
  EXPECT_EQ(line, "roi_a,roi_b,correlation,p_value");
  std::getline(ein, line);
  EXPECT_EQ(line, "0,1,0.5,0.01");
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace dafed::explain
