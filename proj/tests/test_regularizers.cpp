#include <gtest/gtest.h>

#include <map>

#include "oracles.hpp"
#include "support.hpp"
#include "tscil/core/errors.hpp"
#include "tscil/methods/regularizers.hpp"

using namespace tscil;
using namespace tscil::methods;
using tscil::testing::grad_check;
using tscil::testing::random_tensor;

namespace {

std::vector<std::vector<double>> rows(const Tensor& t) {
  std::vector<std::vector<double>> r(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t k = 0; k < t.dim(1); ++k) r[i][k] = t.data()[i * t.dim(1) + k];
  return r;
}

}  // namespace

TEST(SoftDtw, MatchesDynamicProgrammingOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.index(10), m = 1 + rng.index(10), d = 1 + rng.index(4);
    const Tensor a = random_tensor({n, d}, rng), b = random_tensor({m, d}, rng);
    const double gamma = rng.uniform(0.05, 2.0);
    const double want = oracle::soft_dtw(rows(a), rows(b), gamma);
    EXPECT_LE(std::abs(soft_dtw(a, b, gamma) - want), 1e-9 * std::max(1.0, std::abs(want)));
  }
}

TEST(SoftDtw, SymmetricAndBelowDtw) {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const Tensor a = random_tensor({6, 2}, rng), b = random_tensor({8, 2}, rng);
    EXPECT_NEAR(soft_dtw(a, b, 0.5), soft_dtw(b, a, 0.5), 1e-10);
    EXPECT_LE(soft_dtw(a, b, 0.5), dtw(a, b) + 1e-12);
    EXPECT_NEAR(dtw(a, b), oracle::dtw(rows(a), rows(b)), 1e-12);
  }
}

TEST(SoftDtw, ConvergesToDtwAsGammaShrinks) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = random_tensor({7, 3}, rng), b = random_tensor({5, 3}, rng);
    EXPECT_NEAR(soft_dtw(a, b, 1e-3), dtw(a, b), 1e-3);
  }
}

TEST(SoftDtw, RejectsBadInput) {
  const Tensor a({2, 2}, 0.0), b({2, 3}, 0.0);
  EXPECT_THROW(soft_dtw(a, b, 1.0), ContractError);
  EXPECT_THROW(soft_dtw(a, a, 0.0), ContractError);
}

TEST(SoftDtw, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = ag::parameter(random_tensor({1 + rng.index(6), 3}, rng));
    auto b = ag::parameter(random_tensor({1 + rng.index(6), 3}, rng));
    const double err = grad_check([](const std::vector<ag::Var>& p) { return soft_dtw(p[0], p[1], 0.7); }, {a, b});
    EXPECT_LT(err, 1e-3);
  }
}

TEST(SoftDtw, DivergenceIsNonNegativeAndZeroAtMatch) {
  Rng rng(5);
  const Tensor t = random_tensor({3, 4, 9}, rng);
  EXPECT_NEAR(soft_dtw_divergence_maps(ag::parameter(t), t, 1.0)->value[0], 0.0, 1e-10);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor s = random_tensor({3, 4, 9}, rng);
    EXPECT_GE(soft_dtw_divergence_maps(ag::parameter(s), t, 1.0)->value[0], -1e-10);
  }
}

TEST(SoftDtw, MapLossGradientsMatchFiniteDifferences) {
  Rng rng(6);
  const Tensor t = random_tensor({2, 3, 5}, rng);
  auto s = ag::parameter(random_tensor({2, 3, 5}, rng));
  EXPECT_LT(grad_check([&](const std::vector<ag::Var>& p) { return soft_dtw_maps(p[0], t, 0.5); }, {s}), 1e-3);
  EXPECT_LT(grad_check([&](const std::vector<ag::Var>& p) { return soft_dtw_divergence_maps(p[0], t, 0.5); }, {s}),
            1e-3);
}

TEST(ChannelNormalize, UnitNormPerStepAndGradient) {
  Rng rng(7);
  auto x = ag::parameter(random_tensor({2, 3, 4}, rng));
  const auto y = channel_normalize(x)->value;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t t = 0; t < 4; ++t) {
      double s = 0.0;
      for (std::size_t c = 0; c < 3; ++c) s += y.at(n, c, t) * y.at(n, c, t);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  const Tensor w = random_tensor({2, 3, 4}, rng);
  EXPECT_LT(grad_check([&](const std::vector<ag::Var>& p) { return ag::sum(ag::mul(channel_normalize(p[0]), ag::constant(w))); },
                       {x}),
            1e-4);
}

TEST(Lwf, GradientVanishesAtTeacher) {
  Rng rng(8);
  const Tensor teacher = random_tensor({4, 3}, rng);
  auto s = ag::parameter(teacher);
  ag::backward(lwf_loss(s, teacher, 2.0));
  double norm = 0.0;
  for (double g : s->grad.values()) norm += g * g;
  EXPECT_LE(std::sqrt(norm), 1e-8);
}

TEST(Lwf, ValueAndGradient) {
  // Single sample, T = 1: the loss is the cross-entropy against the teacher's softmax.
  const Tensor teacher({1, 2}, {0.0, std::log(3.0)});
  auto s = ag::parameter(Tensor({1, 2}, {0.0, 0.0}));
  EXPECT_NEAR(lwf_loss(s, teacher, 1.0)->value[0], std::log(2.0), 1e-12);
  // T^2 scaling.
  const Tensor t2({1, 2}, {0.0, 2.0 * std::log(3.0)});
  EXPECT_NEAR(lwf_loss(s, t2, 2.0)->value[0], 4.0 * std::log(2.0), 1e-12);
  Rng rng(9);
  auto x = ag::parameter(random_tensor({3, 4}, rng));
  const Tensor t = random_tensor({3, 4}, rng);
  EXPECT_LT(grad_check([&](const std::vector<ag::Var>& p) { return lwf_loss(p[0], t, 2.0); }, {x}), 1e-4);
}

TEST(Mas, IncrementMatchesAnalyticGradient) {
  // f(x) = W x gives d||f||^2/dW = 2 (W x) x^T.
  Rng rng(10);
  auto w = ag::parameter(random_tensor({2, 3}, rng));
  const std::vector<Tensor> xs{random_tensor({1, 3}, rng), random_tensor({1, 3}, rng)};
  const auto inc = mas_increment({w}, 2, [&](std::size_t i) { return ag::linear(ag::constant(xs[i]), w, nullptr); });
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t d = 0; d < 3; ++d) {
      double want = 0.0;
      for (const auto& x : xs) {
        double wx = 0.0;
        for (std::size_t k = 0; k < 3; ++k) wx += w->value.at(o, k) * x[k];
        want += std::abs(2.0 * wx * x[d]) / 2.0;
      }
      EXPECT_NEAR(inc[0].at(o, d), want, 1e-12);
    }
}

TEST(Mas, PenaltyZeroAtAnchorAndRunningMean) {
  Rng rng(11);
  auto w = ag::parameter(random_tensor({2, 2}, rng));
  ImportanceMap map;
  EXPECT_EQ(mas_penalty({w}, map, 1.0)->value[0], 0.0);
  mas_accumulate(map, {w}, {Tensor({2, 2}, 1.0)});
  EXPECT_NEAR(mas_penalty({w}, map, 3.0)->value[0], 0.0, 1e-15);
  mas_accumulate(map, {w}, {Tensor({2, 2}, 4.0)});
  EXPECT_DOUBLE_EQ(map.omega[0][0], 2.5);
  w->value[0] += 0.5;
  EXPECT_NEAR(mas_penalty({w}, map, 2.0)->value[0], 2.0 * 2.5 * 0.25, 1e-12);
  EXPECT_LT(grad_check([&](const std::vector<ag::Var>& p) { return mas_penalty(p, map, 2.0); }, {w}), 1e-6);
}

TEST(Mas, AlignPadsGrownHead) {
  auto w = ag::parameter(Tensor({2, 2}, 1.0));
  ImportanceMap map;
  mas_accumulate(map, {w}, {Tensor({2, 2}, 1.0)});
  auto grown = ag::parameter(Tensor({3, 2}, 5.0));
  map.align({grown});
  EXPECT_EQ(map.omega[0].shape(), (std::vector<std::size_t>{3, 2}));
  EXPECT_EQ(map.omega[0].at(2, 0), 0.0);
  EXPECT_EQ(map.anchor[0].at(0, 0), 1.0);
  EXPECT_EQ(map.anchor[0].at(2, 0), 5.0);
  EXPECT_THROW(map.align({ag::parameter(Tensor({3, 3}, 0.0))}), ContractError);
}

TEST(Dt2w, SelfDistillationLeavesOnlyTheLwfTerm) {
  model::BackboneConfig c;
  c.in_channels = 2;
  c.length = 16;
  c.filters = {4, 4};
  auto m = model::Model::build(c, {0, 1}, 3);
  Rng rng(12);
  const auto out = m.forward(random_tensor({3, 2, 16}, rng), false);
  Dt2wTerms terms;
  terms.all_blocks = true;
  const double loss = dt2w_loss(out, out, terms)->value[0];
  const double lwf = lwf_loss(out.logits, out.logits->value, terms.temperature)->value[0];
  EXPECT_NEAR(loss, terms.lambda_lwf * lwf, 1e-9);
}

TEST(Prototypes, BalancedSamplingAroundMeans) {
  PrototypeSet set;
  const Tensor f({4, 2}, {0.0, 0.0, 2.0, 2.0, 10.0, 10.0, 10.0, 12.0});
  set.add_from(f, {0, 0, 1, 1});
  ASSERT_EQ(set.classes, (std::vector<int>{0, 1}));
  EXPECT_EQ(set.means[1], (std::vector<double>{10.0, 11.0}));
  EXPECT_NEAR(set.radius[0], 1.0, 1e-12);
  Rng rng(13);
  const auto [x, y] = sample_prototypes(set, 7, rng);
  std::map<int, int> per;
  for (int l : y) ++per[l];
  EXPECT_EQ(per[0], 4);
  EXPECT_EQ(per[1], 3);
  EXPECT_EQ(x.dim(0), 7u);
}
