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

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "dafed/data.hpp"
#include "test_util.hpp"

namespace dafed::data {
namespace {

namespace fs = std::filesystem;
using dafed::testing::random_tensor;

// Frames and window counts of the seven acquisition sites, window 20.
struct FrameCount {
  std::size_t frames;
  std::size_t windows;
};
constexpr FrameCount kSiteFrames[] = {{176, 157}, {296, 277}, {236, 217}, {116, 97},
                                      {187, 168}, {200, 181}, {190, 171}};

TEST(SlidingWindows, ReproducesAcquisitionWindowCounts) {
  for (const auto& fc : kSiteFrames) {
    const auto w = sliding_windows(fc.frames, 20, 1);
    EXPECT_EQ(w.size(), fc.windows) << "T=" << fc.frames;
    EXPECT_EQ(w.front(), (WindowRange{0, 20}));
    EXPECT_EQ(w.back(), (WindowRange{fc.frames - 20, fc.frames}));
  }
}

TEST(SlidingWindows, CountFormulaWithStride) {
  for (std::size_t t = 5; t < 60; ++t) {
    for (std::size_t w = 2; w <= t; w += 3) {
      for (std::size_t s = 1; s < 5; ++s) {
        EXPECT_EQ(sliding_windows(t, w, s).size(), (t - w) / s + 1);
      }
    }
  }
}

TEST(SlidingWindows, BoundaryAndErrors) {
  EXPECT_EQ(sliding_windows(20, 20, 1).size(), 1u);
  try {
    sliding_windows(19, 20, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("20"), std::string::npos) << e.what();
  }
  EXPECT_THROW(sliding_windows(30, 1, 1), Error);
  EXPECT_THROW(sliding_windows(30, 5, 0), Error);
}

// Textbook two-pass formula, one pair at a time.
double two_pass_pearson(const Tensor& x, std::size_t a, std::size_t b) {
  const std::size_t n = x.dim(0);
  double ma = 0, mb = 0;
  for (std::size_t t = 0; t < n; ++t) {
    ma += x.at(t, a);
    mb += x.at(t, b);
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t t = 0; t < n; ++t) {
    sab += (x.at(t, a) - ma) * (x.at(t, b) - mb);
    saa += (x.at(t, a) - ma) * (x.at(t, a) - ma);
    sbb += (x.at(t, b) - mb) * (x.at(t, b) - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

TEST(Pearson, MatchesTwoPassOracleOnRandomWindows) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const std::size_t r = 2 + seed % 6;
    const Tensor x = random_tensor({20, r}, seed, -3.0, 5.0);
    const Tensor c = pearson_matrix(x);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < r; ++j) {
        ASSERT_NEAR(c.at(i, j), two_pass_pearson(x, i, j), 1e-12) << seed;
        ASSERT_EQ(c.at(i, j), c.at(j, i));
      }
      ASSERT_EQ(c.at(i, i), 1.0);
    }
  }
}

TEST(Pearson, IdenticalAndNegatedColumns) {
  Tensor x = random_tensor({20, 3}, 4);
  for (std::size_t t = 0; t < 20; ++t) {
    x.at(t, 1) = x.at(t, 0);
    x.at(t, 2) = -x.at(t, 0);
  }
  const Tensor c = pearson_matrix(x);
  EXPECT_NEAR(c.at(0, 1), 1.0, 1e-15);
  EXPECT_NEAR(c.at(0, 2), -1.0, 1e-15);
  for (double v : c.values()) {
    EXPECT_LE(v, 1.0);
    EXPECT_GE(v, -1.0);
  }
}

TEST(Pearson, ZeroVarianceColumnIsReportedWithRoi) {
  Tensor x = random_tensor({20, 4}, 1);
  for (std::size_t t = 0; t < 20; ++t) x.at(t, 2) = 3.0;
  try {
    pearson_matrix(x);
    FAIL();
  } catch (const ZeroVarianceError& e) {
    EXPECT_EQ(e.roi(), 2u);
  }
}

TEST(FisherZ, KnownValues) {
  EXPECT_EQ(fisher_z(0.0), 0.0);
  EXPECT_NEAR(fisher_z(0.5), 0.5493061443340548, 1e-15);
  EXPECT_NEAR(fisher_z(1.0), 3.8002011672502, 1e-12);
  EXPECT_EQ(fisher_z(1.0), fisher_z(0.9995));
}

TEST(FisherZ, IsOddExactly) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    for (double r : random_tensor({20}, seed).values()) EXPECT_EQ(fisher_z(-r), -fisher_z(r));
  }
  EXPECT_EQ(fisher_z(-1.0), -fisher_z(1.0));
}

// Brute-force reference: for each row, rank off-diagonal |fc| with the lower
// column index winning ties, keep k, then symmetrize by max.
Tensor brute_force_adjacency(const Tensor& fc, std::size_t k) {
  const std::size_t r = fc.dim(0);
  Tensor a({r, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < r; ++j) {
      if (i == j) continue;
      std::size_t better = 0;
      for (std::size_t m = 0; m < r; ++m) {
        if (m == i || m == j) continue;
        const double am = std::abs(fc.at(i, m)), aj = std::abs(fc.at(i, j));
        if (am > aj || (am == aj && m < j)) ++better;
      }
      if (better < k) a.at(i, j) = std::abs(fc.at(i, j));
    }
  }
  Tensor s = a;
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < r; ++j) s.at(i, j) = std::max(a.at(i, j), a.at(j, i));
  }
  return s;
}

Tensor symmetric_fc(std::size_t r, std::uint64_t seed) {
  Tensor x = random_tensor({r + 10, r}, seed);
  return fisher_z_matrix(pearson_matrix(x));
}

TEST(BuildGraph, HandBuiltTopTwo) {
  // Strong pairs (0,1), (2,3), (4,5) at 0.9; second neighbors along a ring at 0.5.
  Tensor fc({6, 6}, 0.1);
  for (std::size_t i = 0; i < 6; ++i) fc.at(i, i) = fisher_z(1.0);
  auto set = [&](std::size_t i, std::size_t j, double v) { fc.at(i, j) = fc.at(j, i) = v; };
  set(0, 1, 0.9);
  set(2, 3, -0.9);
  set(4, 5, 0.9);
  set(1, 2, 0.5);
  set(3, 4, 0.5);
  set(5, 0, -0.5);
  const FCGraph g = build_graph(fc, 2);
  Tensor expected({6, 6});
  auto put = [&](std::size_t i, std::size_t j, double v) { expected.at(i, j) = expected.at(j, i) = v; };
  put(0, 1, 0.9);
  put(2, 3, 0.9);
  put(4, 5, 0.9);
  put(1, 2, 0.5);
  put(3, 4, 0.5);
  put(5, 0, 0.5);
  EXPECT_EQ(g.adjacency, expected);
  EXPECT_EQ(g.node_features, fc);
}

TEST(BuildGraph, MatchesBruteForceAndDegreeBounds) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const std::size_t r = 6 + seed % 10;
    const std::size_t k = 1 + seed % (r - 1);
    const Tensor fc = symmetric_fc(r, seed);
    const FCGraph g = build_graph(fc, k);
    EXPECT_EQ(g.adjacency, brute_force_adjacency(fc, k)) << seed;
    std::size_t total = 0;
    for (std::size_t i = 0; i < r; ++i) {
      std::size_t nz = 0;
      for (std::size_t j = 0; j < r; ++j) {
        EXPECT_EQ(g.adjacency.at(i, j), g.adjacency.at(j, i));
        EXPECT_GE(g.adjacency.at(i, j), 0.0);
        if (j != i) nz += g.adjacency.at(i, j) != 0.0;
      }
      EXPECT_EQ(g.adjacency.at(i, i), 0.0);
      EXPECT_GE(nz, k);
      total += nz;
    }
    // a hub row can be picked by many others, so 2k only bounds the mean degree
    EXPECT_LE(total, 2 * k * r);
  }
}

TEST(BuildGraph, TieBreakPrefersLowerIndex) {
  Tensor fc({4, 4}, 0.3);
  for (std::size_t i = 0; i < 4; ++i) fc.at(i, i) = fisher_z(1.0);
  const FCGraph g = build_graph(fc, 1);
  // all off-diagonal entries tie: row 0 keeps column 1, rows 1..3 keep column 0
  Tensor expected({4, 4});
  for (std::size_t i = 1; i < 4; ++i) expected.at(i, 0) = expected.at(0, i) = 0.3;
  EXPECT_EQ(g.adjacency, expected);
  EXPECT_EQ(brute_force_adjacency(fc, 1), g.adjacency);
}

TEST(BuildGraph, RejectsBadK) {
  const Tensor fc = symmetric_fc(5, 1);
  EXPECT_THROW(build_graph(fc, 0), Error);
  EXPECT_THROW(build_graph(fc, 5), Error);
}

TEST(BuildGraph, NormalizedAdjacencyIsSymmetricWithSelfLoops) {
  const FCGraph g = build_graph(symmetric_fc(8, 3), 3);
  const Tensor& n = g.norm_adjacency;
  for (std::size_t i = 0; i < 8; ++i) {
    double deg = 1.0;
    for (std::size_t j = 0; j < 8; ++j) deg += g.adjacency.at(i, j);
    EXPECT_NEAR(n.at(i, i), 1.0 / deg, 1e-14);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(n.at(i, j), n.at(j, i), 1e-15);
  }
}

const PipelineOptions kSmall{20, 1, 3};

SynthConfig small_config(double shift_b, double separation = 0.5) {
  SynthConfig cfg;
  cfg.separation = separation;
  cfg.sites = {SiteSpec{"a", 12, 0.5, 30, 10, 0.0, true}, SiteSpec{"b", 12, 0.5, 30, 10, shift_b, false}};
  return cfg;
}

TEST(Synth, SameSeedIsBitwiseIdentical) {
  const auto a = synth_multisite(small_config(0.8), kSmall, 5);
  const auto b = synth_multisite(small_config(0.8), kSmall, 5);
  ASSERT_EQ(a.size(), 2u);
  for (std::size_t s = 0; s < 2; ++s) {
    ASSERT_EQ(a[s].samples.size(), b[s].samples.size());
    for (std::size_t i = 0; i < a[s].samples.size(); ++i) {
      EXPECT_EQ(a[s].samples[i].node_features, b[s].samples[i].node_features);
      EXPECT_EQ(a[s].samples[i].adjacency, b[s].samples[i].adjacency);
    }
  }
  const auto c = synth_multisite(small_config(0.8), kSmall, 6);
  EXPECT_NE(a[0].samples[0].node_features, c[0].samples[0].node_features);
}

TEST(Synth, LabelsFollowSiteFlagAndWindowsPerSubject) {
  const auto sites = synth_multisite(small_config(0.8), kSmall, 1);
  EXPECT_TRUE(sites[0].labeled);
  EXPECT_FALSE(sites[1].labeled);
  for (const auto& g : sites[0].samples) EXPECT_TRUE(g.label.has_value());
  for (const auto& g : sites[1].samples) {
    EXPECT_FALSE(g.label.has_value());
    EXPECT_TRUE(g.truth.has_value());
  }
  EXPECT_EQ(sites[0].subjects.size(), 12u);
  for (const auto& [subject, idx] : sites[0].subjects) EXPECT_EQ(idx.size(), 11u) << subject;
  // node feature diagonal is the clipped transform of r = 1
  EXPECT_EQ(sites[0].samples[0].node_features.at(3, 3), fisher_z(1.0));
}

TEST(Synth, SiteMixingIsOrthogonalAndIdentityAtZero) {
  const Tensor m0 = site_mixing("x", 7, 0.0, 1);
  const Tensor m = site_mixing("x", 7, 1.3, 1);
  for (std::size_t i = 0; i < 7; ++i) {
    for (std::size_t j = 0; j < 7; ++j) {
      EXPECT_NEAR(m0.at(i, j), i == j ? 1.0 : 0.0, 1e-15);
      double dot = 0;
      for (std::size_t t = 0; t < 7; ++t) dot += m.at(t, i) * m.at(t, j);
      EXPECT_NEAR(dot, i == j ? 1.0 : 0.0, 1e-12);
    }
  }
}

TEST(Synth, ZeroShiftSitesShareADistribution) {
  SynthConfig cfg;
  cfg.sites = {SiteSpec{"a", 40, 0.5, 40, 8, 0.0, true}, SiteSpec{"b", 40, 0.5, 40, 8, 0.0, true}};
  const auto sites = synth_multisite(cfg, kSmall, 3);
  const std::size_t r = 8;
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = i + 1; j < r; ++j) {
      // one value per subject (its window mean) keeps the draws independent
      std::vector<double> va, vb;
      for (const auto* ds : {&sites[0], &sites[1]}) {
        for (const auto& [subject, idx] : ds->subjects) {
          double m = 0;
          for (auto k : idx) m += ds->samples[k].node_features.at(i, j);
          (ds == &sites[0] ? va : vb).push_back(m / idx.size());
        }
      }
      const double sd = std::sqrt((std::pow(stddev(va), 2) + std::pow(stddev(vb), 2)) / 2.0);
      EXPECT_LE(std::abs(mean(va) - mean(vb)), 3.0 * sd * std::sqrt(2.0 / va.size()) + 1e-12)
          << i << "," << j;
    }
  }
}

TEST(Synth, LinearProbeSeparatesClassesAtStrongSeparation) {
  SynthConfig cfg;
  cfg.separation = 0.8;
  cfg.sites = {SiteSpec{"a", 40, 0.5, 40, 16, 0.0, true}};
  const auto site = synth_multisite(cfg, kSmall, 0).front();
  const std::size_t r = site.rois();
  const std::size_t d = r * (r - 1) / 2;
  auto features = [&](const FCGraph& g) {
    std::vector<double> f;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = i + 1; j < r; ++j) f.push_back(g.node_features.at(i, j));
    return f;
  };
  // train on the first 30 subjects, test on the remaining 10
  std::vector<std::size_t> train, test;
  std::size_t n = 0;
  for (const auto& [subject, idx] : site.subjects) {
    auto& dst = n++ < 30 ? train : test;
    dst.insert(dst.end(), idx.begin(), idx.end());
  }
  std::vector<double> w(d, 0.0);
  double b = 0.0;
  for (int epoch = 0; epoch < 200; ++epoch) {
    std::vector<double> gw(d, 0.0);
    double gb = 0.0;
    for (auto k : train) {
      const auto f = features(site.samples[k]);
      double z = b;
      for (std::size_t q = 0; q < d; ++q) z += w[q] * f[q];
      const double err = 1.0 / (1.0 + std::exp(-z)) - *site.samples[k].label;
      for (std::size_t q = 0; q < d; ++q) gw[q] += err * f[q];
      gb += err;
    }
    for (std::size_t q = 0; q < d; ++q) w[q] -= 0.5 * gw[q] / train.size();
    b -= 0.5 * gb / train.size();
  }
  std::size_t correct = 0;
  for (auto k : test) {
    const auto f = features(site.samples[k]);
    double z = b;
    for (std::size_t q = 0; q < d; ++q) z += w[q] * f[q];
    correct += (z > 0 ? 1 : 0) == *site.samples[k].label;
  }
  EXPECT_GT(static_cast<double>(correct) / test.size(), 0.9);
}

TEST(Synth, RejectsInvalidConfig) {
  SynthConfig cfg = small_config(0.5);
  cfg.separation = 0.0;
  EXPECT_THROW(synth_multisite(cfg, kSmall, 0), Error);
  cfg = small_config(-0.1);
  EXPECT_THROW(synth_multisite(cfg, kSmall, 0), Error);
  cfg = small_config(0.5);
  cfg.sites[0].subjects = 0;
  EXPECT_THROW(synth_multisite(cfg, kSmall, 0), Error);
}

class CsvTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("dafed_csv_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path write(const std::string& name, const std::string& body) {
    std::ofstream(dir_ / name) << body;
    return dir_ / name;
  }
  std::string series(std::size_t t, std::size_t r, std::uint64_t seed) {
    const Tensor v = random_tensor({t, r}, seed);
    std::string s;
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < r; ++j) s += (j ? "," : "") + std::to_string(v.at(i, j));
      s += "\n";
    }
    return s;
  }
  fs::path dir_;
};

TEST_F(CsvTest, OneSubjectOneWindow) {
  write("s1.csv", series(20, 3, 1));
  const auto m = write("manifest.csv", "subject_id,site_id,label,path\ns1,siteA,1,s1.csv\n");
  const auto sites = ingest_csv(m, {20, 1, 1});
  ASSERT_EQ(sites.size(), 1u);
  EXPECT_EQ(sites[0].samples.size(), 1u);
  EXPECT_EQ(sites[0].samples[0].label, 1);
  EXPECT_TRUE(sites[0].labeled);
}

TEST_F(CsvTest, FullLengthSeriesGivesAcquisitionWindowCount) {
  write("s1.csv", series(176, 12, 2));
  const auto m = write("manifest.csv", "subject_id,site_id,label,path\ns1,nyu,0,s1.csv\n");
  EXPECT_EQ(ingest_csv(m, {20, 1, 5})[0].samples.size(), 157u);
}

TEST_F(CsvTest, EmptyLabelGoesToUnlabeledSite) {
  write("a.csv", series(25, 4, 3));
  write("b.csv", series(25, 4, 4));
  const auto m =
      write("manifest.csv", "subject_id,site_id,label,path\na,src,0,a.csv\nb,tgt,,b.csv\n");
  const auto sites = ingest_csv(m, {20, 1, 2});
  ASSERT_EQ(sites.size(), 2u);
  EXPECT_TRUE(sites[0].labeled);
  EXPECT_FALSE(sites[1].labeled);
  for (const auto& g : sites[1].samples) EXPECT_FALSE(g.label.has_value());
}

TEST_F(CsvTest, RaggedRowNamesFileAndLine) {
  write("bad.csv", "1,2,3\n4,5,6\n7,8\n");
  const auto m = write("manifest.csv", "subject_id,site_id,label,path\ns,a,0,bad.csv\n");
  try {
    ingest_csv(m, {2, 1, 1});
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("bad.csv:3"), std::string::npos) << msg;
  }
}

TEST_F(CsvTest, NonNumericCellNamesFileAndLine) {
  write("bad.csv", "1,2,3\n4,x,6\n");
  const auto m = write("manifest.csv", "subject_id,site_id,label,path\ns,a,0,bad.csv\n");
  try {
    ingest_csv(m, {2, 1, 1});
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("bad.csv:2"), std::string::npos) << msg;
  }
}

TEST_F(CsvTest, InconsistentRoiCountWithinSiteIsRejected) {
  write("a.csv", series(25, 4, 3));
  write("b.csv", series(25, 5, 4));
  const auto m =
      write("manifest.csv", "subject_id,site_id,label,path\na,s,0,a.csv\nb,s,1,b.csv\n");
  try {
    ingest_csv(m, {20, 1, 2});
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("manifest.csv:3"), std::string::npos) << msg;
  }
}

TEST_F(CsvTest, WriteReadRoundTripIsExact) {
  const Tensor v = random_tensor({13, 5}, 9, -1e3, 1e3);
  write_series_csv(dir_ / "rt.csv", v);
  EXPECT_EQ(read_series_csv(dir_ / "rt.csv"), v);
}

}  // namespace
}  // namespace dafed::data
