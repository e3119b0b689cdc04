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
#include <numeric>

#include "dafed/autodiff.hpp"
#include "dafed/optim.hpp"
#include "test_util.hpp"

namespace dafed {
namespace {

using testing::away_from_zero;
using testing::primitive_check;
using testing::random_tensor;

constexpr double kPrimitiveTol = 1e-6;

// --- tensor -------------------------------------------------------------------

TEST(Tensor, RejectsZeroDimensions) {
  EXPECT_THROW(Tensor({2, 0}), Error);
  EXPECT_THROW(Tensor({2}, std::vector<double>{1, 2, 3}), Error);
}

TEST(Tensor, MatrixLiteralIsRowMajor) {
  Tensor m = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(m.shape(), (Shape{2, 3}));
  EXPECT_EQ(m.at(1, 0), 4.0);
  EXPECT_EQ(m[2], 3.0);
}

// --- forward examples ---------------------------------------------------------------

TEST(Primitives, MatmulByIdentity) {
  ad::Tape tape;
  auto a = tape.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  auto i = tape.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  EXPECT_EQ(ad::matmul(a, i).value(), Tensor::matrix({{1, 2}, {3, 4}}));
}

TEST(Primitives, SoftmaxOfEqualLogits) {
  ad::Tape tape;
  auto s = ad::softmax(tape.constant(Tensor::matrix({{0, 0}})), 1);
  EXPECT_EQ(s.value(), Tensor::matrix({{0.5, 0.5}}));
}

TEST(Primitives, ShapeMismatchNamesBothShapes) {
  ad::Tape tape;
  auto a = tape.constant(Tensor({2, 3}));
  auto b = tape.constant(Tensor({4, 5}));
  try {
    ad::matmul(a, b);
    FAIL() << "expected a shape error";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,5]"), std::string::npos) << msg;
  }
}

TEST(Primitives, SoftmaxRowsAreDistributions) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ad::Tape tape;
    Tensor x = random_tensor({7, 9}, seed, -50.0, 50.0);
    auto s = ad::softmax(tape.constant(x), 1).value();
    for (std::size_t r = 0; r < 7; ++r) {
      double row = 0.0;
      for (std::size_t c = 0; c < 9; ++c) {
        EXPECT_GE(s.at(r, c), 0.0);
        row += s.at(r, c);
      }
      EXPECT_NEAR(row, 1.0, 1e-12);
    }
  }
}

TEST(Primitives, GradReverseIsIdentityForwardAndNegatesBackward) {
  const double lambda = 0.37;
  ad::Tape tape;
  Tensor x = random_tensor({3, 4}, 1);
  auto p = tape.param("x", x);
  auto y = ad::grad_reverse(p, lambda);
  EXPECT_EQ(y.value(), x);
  auto g = tape.backward(ad::sum_all(y));
  for (double v : g.at("x").values()) EXPECT_EQ(v, -lambda);
}

TEST(Primitives, CosineSimilarityOfZeroRowIsZero) {
  ad::Tape tape;
  auto a = tape.param("a", Tensor::matrix({{0, 0, 0}, {1, 2, 3}}));
  auto b = tape.constant(Tensor::matrix({{1, 1, 1}, {2, 4, 6}}));
  auto c = ad::cosine_similarity(a, b);
  EXPECT_EQ(c.value()[0], 0.0);
  EXPECT_NEAR(c.value()[1], 1.0, 1e-15);
  auto g = tape.backward(ad::sum_all(c));
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(g.at("a").at(0, j), 0.0);
}

TEST(Primitives, MaxTiesRouteToFirstIndex) {
  ad::Tape tape;
  auto x = tape.param("x", Tensor::matrix({{2, 2, 1}}));
  auto g = tape.backward(ad::sum_all(ad::max(x, 1)));
  EXPECT_EQ(g.at("x"), Tensor::matrix({{1, 0, 0}}));
}

// --- backward -------------------------------------------------------------------------

TEST(Backward, SumGivesOnes) {
  ad::Tape tape;
  auto p = tape.param("p", random_tensor({2, 3, 2}, 3));
  auto g = tape.backward(ad::sum_all(p));
  for (double v : g.at("p").values()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, SumOfSquares) {
  ad::Tape tape;
  auto p = tape.param("p", Tensor({3}, {1, 2, 3}));
  auto g = tape.backward(ad::sum_all(ad::mul(p, p)));
  EXPECT_EQ(g.at("p"), Tensor({3}, {2, 4, 6}));
}

TEST(Backward, UnreachedParamsGetZeros) {
  ad::Tape tape;
  auto p = tape.param("p", Tensor({2}, {1, 2}));
  tape.param("q", Tensor({3}, {1, 2, 3}));
  auto g = tape.backward(ad::sum_all(p));
  EXPECT_EQ(g.at("q"), Tensor({3}));
}

TEST(Backward, RejectsNonScalarLoss) {
  ad::Tape tape;
  auto p = tape.param("p", Tensor({2}, {1, 2}));
  EXPECT_THROW(tape.backward(p), Error);
}

TEST(Backward, ParamBoundTwiceAccumulates) {
  ad::Tape tape;
  auto a = tape.param("w", Tensor({2}, {1, 2}));
  auto b = tape.param("w", Tensor({2}, {1, 2}));
  auto g = tape.backward(ad::sum_all(ad::add(a, ad::scale(b, 3.0))));
  EXPECT_EQ(g.at("w"), Tensor({2}, {4, 4}));
}

// --- finite differences per primitive -------------------------------------------------

struct PrimitiveCase {
  std::string name;
  std::function<std::vector<Tensor>(std::uint64_t)> inputs;
  testing::Builder f;
};

std::vector<PrimitiveCase> primitive_cases() {
  using V = std::vector<ad::Var>;
  auto r = [](Shape s) { return [s](std::uint64_t seed) { return std::vector<Tensor>{random_tensor(s, seed)}; }; };
  auto r2 = [](Shape a, Shape b) {
    return [a, b](std::uint64_t seed) {
      return std::vector<Tensor>{random_tensor(a, seed), random_tensor(b, seed + 17)};
    };
  };
  auto nz = [](Shape s) { return [s](std::uint64_t seed) { return std::vector<Tensor>{away_from_zero(s, seed)}; }; };
  static const std::vector<std::size_t> rows{2, 0, 2, 3};
  return {
      {"matmul", r2({3, 4}, {4, 2}), [](ad::Tape&, const V& x) { return ad::matmul(x[0], x[1]); }},
      {"bmm", r2({2, 3, 4}, {2, 4, 5}), [](ad::Tape&, const V& x) { return ad::bmm(x[0], x[1]); }},
      {"bmm_t", r2({2, 3, 4}, {2, 5, 4}), [](ad::Tape&, const V& x) { return ad::bmm(x[0], x[1], true); }},
      {"add", r2({3, 4}, {3, 4}), [](ad::Tape&, const V& x) { return ad::add(x[0], x[1]); }},
      {"add_bias", r2({3, 4}, {4}), [](ad::Tape&, const V& x) { return ad::add(x[0], x[1]); }},
      {"sub", r2({3, 4}, {3, 4}), [](ad::Tape&, const V& x) { return ad::sub(x[0], x[1]); }},
      {"mul", r2({3, 4}, {3, 4}), [](ad::Tape&, const V& x) { return ad::mul(x[0], x[1]); }},
      {"scale", r({3, 4}), [](ad::Tape&, const V& x) { return ad::scale(x[0], -2.5); }},
      {"add_scalar", r({3, 4}), [](ad::Tape&, const V& x) { return ad::add_scalar(x[0], 0.75); }},
      {"concat0", r2({2, 3}, {4, 3}), [](ad::Tape&, const V& x) { return ad::concat({x[0], x[1]}, 0); }},
      {"concat1", r2({2, 3, 2}, {2, 1, 2}), [](ad::Tape&, const V& x) { return ad::concat({x[0], x[1]}, 1); }},
      {"slice", r({4, 5}), [](ad::Tape&, const V& x) { return ad::slice(x[0], 1, 1, 3); }},
      {"sum", r({3, 4, 2}), [](ad::Tape&, const V& x) { return ad::sum(x[0], 1); }},
      {"mean", r({3, 4, 2}), [](ad::Tape&, const V& x) { return ad::mean(x[0], 2); }},
      {"max", r({3, 4, 2}), [](ad::Tape&, const V& x) { return ad::max(x[0], 1); }},
      {"sum_all", r({3, 4}), [](ad::Tape&, const V& x) { return ad::sum_all(x[0]); }},
      {"mean_all", r({3, 4}), [](ad::Tape&, const V& x) { return ad::mean_all(x[0]); }},
      {"relu", nz({3, 4}), [](ad::Tape&, const V& x) { return ad::relu(x[0]); }},
      {"leaky_relu", nz({3, 4}), [](ad::Tape&, const V& x) { return ad::leaky_relu(x[0], 0.01); }},
      {"softmax0", r({3, 4}), [](ad::Tape&, const V& x) { return ad::softmax(x[0], 0); }},
      {"softmax1", r({3, 4}), [](ad::Tape&, const V& x) { return ad::softmax(x[0], 1); }},
      {"log", [](std::uint64_t s) { return std::vector<Tensor>{random_tensor({3, 4}, s, 0.2, 2.0)}; },
       [](ad::Tape&, const V& x) { return ad::log(x[0]); }},
      {"exp", r({3, 4}), [](ad::Tape&, const V& x) { return ad::exp(x[0]); }},
      {"abs", nz({3, 4}), [](ad::Tape&, const V& x) { return ad::abs(x[0]); }},
      {"clamp", nz({3, 4}), [](ad::Tape&, const V& x) { return ad::clamp(x[0], -0.5, 0.5); }},
      {"permute", r({2, 3, 4}), [](ad::Tape&, const V& x) { return ad::permute(x[0], {2, 0, 1}); }},
      {"transpose", r({3, 4}), [](ad::Tape&, const V& x) { return ad::transpose(x[0]); }},
      {"reshape", r({3, 4}), [](ad::Tape&, const V& x) { return ad::reshape(x[0], {2, 6}); }},
      {"cosine", r2({4, 5}, {4, 5}), [](ad::Tape&, const V& x) { return ad::cosine_similarity(x[0], x[1]); }},
      {"gather_rows", r({4, 3}), [](ad::Tape&, const V& x) { return ad::gather_rows(x[0], rows); }},
      {"grad_reverse_as_identity_times_sign", r({3, 4}),
       [](ad::Tape&, const V& x) { return ad::grad_reverse(ad::grad_reverse(x[0], 1.0), 1.0); }},
      {"batch_norm_train", [](std::uint64_t s) {
         return std::vector<Tensor>{random_tensor({4, 3}, s), random_tensor({3}, s + 1, 0.5, 1.5),
                                    random_tensor({3}, s + 2)};
       },
       [](ad::Tape&, const V& x) {
         ad::BatchNormStats st{Tensor({3}), Tensor({3}, 1.0)};
         return ad::batch_norm(x[0], x[1], x[2], st, ad::Mode::kTrain);
       }},
      {"batch_norm_eval", [](std::uint64_t s) {
         return std::vector<Tensor>{random_tensor({4, 3}, s), random_tensor({3}, s + 1, 0.5, 1.5),
                                    random_tensor({3}, s + 2)};
       },
       [](ad::Tape&, const V& x) {
         ad::BatchNormStats st{Tensor({3}, {0.1, -0.2, 0.3}), Tensor({3}, {0.5, 1.5, 2.0})};
         return ad::batch_norm(x[0], x[1], x[2], st, ad::Mode::kEval);
       }},
      {"dropout_train", r({4, 6}), [](ad::Tape&, const V& x) {
         const std::vector<std::uint64_t> keys{11, 12};
         return ad::dropout(x[0], 0.3, ad::Mode::kTrain, 99, keys);
       }},
  };
}

class PrimitiveGradient : public ::testing::TestWithParam<PrimitiveCase> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferencesAtRandomPoints) {
  const auto& c = GetParam();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto res = primitive_check(c.f, c.inputs(seed), seed);
    ASSERT_TRUE(res.passed(kPrimitiveTol))
        << c.name << " seed " << seed << ": error " << res.max_rel_error << " at " << res.worst_param
        << "[" << res.worst_index << "]";
  }
}

INSTANTIATE_TEST_SUITE_P(All, PrimitiveGradient, ::testing::ValuesIn(primitive_cases()),
                         [](const auto& info) { return info.param.name; });

TEST(Backward, ThreeLayerMlpMatchesFiniteDifferences) {
  ParamStore store;
  store.params["w1"] = random_tensor({5, 8}, 1);
  store.params["b1"] = random_tensor({8}, 2);
  store.params["w2"] = random_tensor({8, 6}, 3);
  store.params["w3"] = random_tensor({6, 2}, 4);
  const Tensor x = random_tensor({7, 5}, 5);
  LossFn fn = [&](const ParamStore& p, GradMap* grads) {
    ad::Tape tape;
    auto h = ad::add(ad::matmul(tape.constant(x), tape.param("w1", p.params.at("w1"))),
                     tape.param("b1", p.params.at("b1")));
    h = ad::leaky_relu(h, 0.1);
    h = ad::exp(ad::scale(ad::matmul(h, tape.param("w2", p.params.at("w2"))), 0.3));
    auto out = ad::softmax(ad::matmul(h, tape.param("w3", p.params.at("w3"))), 1);
    auto loss = ad::scale(ad::mean_all(ad::log(ad::slice(out, 1, 0, 1))), -1.0);
    if (grads) *grads = tape.backward(loss);
    return loss.value().item();
  };
  auto res = grad_check(fn, store);
  EXPECT_TRUE(res.passed(1e-6)) << res.max_rel_error << " at " << res.worst_param;
}

// --- dropout / batch norm modes ---------------------------------------------------------

TEST(Dropout, EvalModeIsIdentity) {
  ad::Tape tape;
  Tensor x = random_tensor({4, 3}, 2);
  const std::vector<std::uint64_t> keys{1};
  EXPECT_EQ(ad::dropout(tape.constant(x), 0.5, ad::Mode::kEval, 5, keys).value(), x);
}

TEST(Dropout, InvertedScalingAndDeterminism) {
  ad::Tape tape;
  Tensor x({200, 10}, 1.0);
  const std::vector<std::uint64_t> keys{3, 4};
  auto a = ad::dropout(tape.constant(x), 0.25, ad::Mode::kTrain, 5, keys).value();
  auto b = ad::dropout(tape.constant(x), 0.25, ad::Mode::kTrain, 5, keys).value();
  EXPECT_EQ(a, b);
  std::size_t kept = 0;
  for (double v : a.values()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-15) << v;
    kept += v != 0.0;
  }
  EXPECT_NEAR(static_cast<double>(kept) / 2000.0, 0.75, 0.03);
  auto c = ad::dropout(tape.constant(x), 0.25, ad::Mode::kTrain, 6, keys).value();
  EXPECT_NE(a, c);
}

TEST(Dropout, GroupMaskDependsOnlyOnItsKey) {
  ad::Tape tape;
  Tensor x({4, 5}, 1.0);
  const std::vector<std::uint64_t> ab{10, 20}, cb{30, 20};
  auto m1 = ad::dropout(tape.constant(x), 0.5, ad::Mode::kTrain, 1, ab).value();
  auto m2 = ad::dropout(tape.constant(x), 0.5, ad::Mode::kTrain, 1, cb).value();
  for (std::size_t i = 10; i < 20; ++i) EXPECT_EQ(m1[i], m2[i]);
}

TEST(BatchNorm, TrainModeUpdatesRunningStatsWithMomentum) {
  ad::Tape tape;
  Tensor x = Tensor::matrix({{1, 10}, {3, 10}, {5, 10}, {7, 10}});
  ad::BatchNormStats st{Tensor({2}, {1, 1}), Tensor({2}, {2, 2})};
  ad::BatchNormStats out;
  auto y = ad::batch_norm(tape.constant(x), tape.constant(Tensor({2}, 1.0)), tape.constant(Tensor({2})), st,
                          ad::Mode::kTrain, &out);
  // batch mean [4, 10], biased variance [5, 0]
  EXPECT_NEAR(out.running_mean[0], 0.9 * 1 + 0.1 * 4, 1e-15);
  EXPECT_NEAR(out.running_var[0], 0.9 * 2 + 0.1 * 5, 1e-15);
  EXPECT_NEAR(out.running_var[1], 0.9 * 2, 1e-15);
  EXPECT_NEAR(y.value().at(0, 0), (1 - 4) / std::sqrt(5 + 1e-5), 1e-12);
  EXPECT_NEAR(y.value().at(0, 1), 0.0, 1e-12);
}

TEST(BatchNorm, EvalModeUsesRunningStats) {
  ad::Tape tape;
  Tensor x = Tensor::matrix({{2, 3}});
  ad::BatchNormStats st{Tensor({2}, {1, -1}), Tensor({2}, {4, 1})};
  auto y = ad::batch_norm(tape.constant(x), tape.constant(Tensor({2}, {2, 1})), tape.constant(Tensor({2}, {0, 1})),
                          st, ad::Mode::kEval);
  EXPECT_NEAR(y.value()[0], 2 * (2 - 1) / std::sqrt(4 + 1e-5), 1e-12);
  EXPECT_NEAR(y.value()[1], (3 + 1) / std::sqrt(1 + 1e-5) + 1, 1e-12);
}

// --- optimizer ------------------------------------------------------------------------

TEST(Adam, ZeroGradientsLeaveParametersUnchanged) {
  ParamStore s;
  s.params["w"] = random_tensor({3, 3}, 1);
  const ParamStore before = s;
  Adam adam;
  GradMap g{{"w", Tensor({3, 3})}};
  for (int i = 0; i < 5; ++i) adam.step(s, g, 0.01);
  EXPECT_EQ(s, before);
  EXPECT_EQ(adam.steps(), 5u);
}

TEST(Adam, FirstStepOnScalar) {
  ParamStore s;
  s.params["theta"] = Tensor::scalar(0.0);
  Adam adam;
  adam.step(s, {{"theta", Tensor::scalar(1.0)}}, 0.001);
  // m_hat = 1, v_hat = 1, step = lr / (1 + eps)
  const double expected = -0.001 / (1.0 + 1e-8);
  EXPECT_NEAR(s.params["theta"].item(), expected, 1e-18);
  EXPECT_LT(s.params["theta"].item(), -0.000999999);
  EXPECT_GT(s.params["theta"].item(), -0.001);
}

TEST(Adam, IdenticalCallsAreBitwiseIdentical) {
  auto run = [] {
    ParamStore s;
    s.params["a"] = random_tensor({4}, 3);
    s.params["b"] = random_tensor({2, 2}, 4);
    Adam adam;
    for (std::uint64_t i = 0; i < 4; ++i) {
      adam.step(s, {{"a", random_tensor({4}, 10 + i)}, {"b", random_tensor({2, 2}, 20 + i)}}, 0.01);
    }
    return s;
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, MissingGradientCountsAsZeroAndFilterSkips) {
  ParamStore s;
  s.params["a"] = Tensor::scalar(1.0);
  s.params["b"] = Tensor::scalar(1.0);
  s.params["c"] = Tensor::scalar(1.0);
  Adam adam;
  adam.step(s, {{"a", Tensor::scalar(1.0)}, {"c", Tensor::scalar(1.0)}}, 0.1,
            [](std::string_view n) { return n != "c"; });
  EXPECT_LT(s.params["a"].item(), 1.0);
  EXPECT_EQ(s.params["b"].item(), 1.0);
  EXPECT_EQ(s.params["c"].item(), 1.0);
}

TEST(ParamStore, IteratesLexicographically) {
  ParamStore s;
  for (const char* n : {"zeta", "alpha", "mid", "alpha2"}) s.params[n] = Tensor::scalar(0);
  std::vector<std::string> names;
  for (const auto& [n, t] : s.params) names.push_back(n);
  EXPECT_EQ(names, (std::vector<std::string>{"alpha", "alpha2", "mid", "zeta"}));
}

TEST(LrSchedule, WarmupReachesBaseAtEndOfWarmup) {
  LrSchedule s{LrSchedule::Kind::kWarmupDecay, 1e-4, 10, 0.99};
  EXPECT_DOUBLE_EQ(lr_at(s, 10, 100), 1e-4);
  EXPECT_EQ(lr_at(s, 0, 100), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(s, 5, 100), 0.5e-4);
}

TEST(LrSchedule, DecayClosedForm) {
  LrSchedule s{LrSchedule::Kind::kDecay, 0.01, std::nullopt, 0.95};
  EXPECT_NEAR(lr_at(s, 2, 50), 0.009025, 1e-15);
  EXPECT_NEAR(lr_at(s, 80, 50), 0.01 * std::pow(0.95, 80), 1e-18);
}

TEST(LrSchedule, WarmupDefaultsToTenPercentOfRounds) {
  LrSchedule s{LrSchedule::Kind::kWarmupDecay, 0.02, std::nullopt, 0.99};
  EXPECT_DOUBLE_EQ(lr_at(s, 5, 50), 0.02);
  EXPECT_DOUBLE_EQ(lr_at(s, 4, 50), 0.02 * 4 / 5);
}

// --- grad_check ---------------------------------------------------------------------------

TEST(GradCheck, IdentitySumHasZeroError) {
  ParamStore s;
  s.params["p"] = random_tensor({3, 2}, 1);
  LossFn fn = [](const ParamStore& p, GradMap* g) {
    ad::Tape tape;
    auto loss = ad::sum_all(tape.param("p", p.params.at("p")));
    if (g) *g = tape.backward(loss);
    return loss.value().item();
  };
  auto res = grad_check(fn, s);
  EXPECT_LT(res.max_rel_error, 1e-9);
  EXPECT_EQ(res.coords_checked, 6u);
}

TEST(GradCheck, WrongGradientFailsAndNamesTheParameter) {
  ParamStore s;
  s.params["good"] = random_tensor({2}, 1);
  s.params["bad"] = random_tensor({2}, 2);
  LossFn fn = [](const ParamStore& p, GradMap* g) {
    ad::Tape tape;
    auto a = tape.param("good", p.params.at("good"));
    auto b = tape.param("bad", p.params.at("bad"));
    auto loss = ad::add(ad::sum_all(ad::mul(a, a)), ad::sum_all(ad::mul(b, b)));
    if (g) {
      *g = tape.backward(loss);
      g->at("bad") *= 0.5;
    }
    return loss.value().item();
  };
  auto res = grad_check(fn, s);
  EXPECT_FALSE(res.passed(1e-4));
  EXPECT_EQ(res.worst_param, "bad");
}

TEST(GradCheck, NanIsReportedWithCoordinate) {
  ParamStore s;
  s.params["p"] = Tensor({3}, {1.0, 1e-6, 2.0});  // the step h crosses zero at index 1
  LossFn fn = [](const ParamStore& p, GradMap* g) {
    ad::Tape tape;
    auto loss = ad::sum_all(ad::log(tape.param("p", p.params.at("p"))));
    if (g) *g = tape.backward(loss);
    return loss.value().item();
  };
  auto res = grad_check(fn, s);
  EXPECT_TRUE(res.nan);
  EXPECT_FALSE(res.passed(1.0));
  EXPECT_EQ(res.nan_param, "p");
  EXPECT_EQ(res.nan_index, 1u);
}

}  // namespace
}  // namespace dafed
