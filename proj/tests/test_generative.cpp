#include <gtest/gtest.h>

#include <set>

#include "support.hpp"
#include "tscil/data/loaders.hpp"
#include "tscil/methods/generative.hpp"

using namespace tscil;
using namespace tscil::methods;
using tscil::testing::random_tensor;

namespace {

VaeConfig tiny_vae() {
  VaeConfig c;
  c.widths = {4, 8, 8};
  c.latent = 3;
  c.epochs = 5;
  c.batch_size = 16;
  return c;
}

}  // namespace

TEST(Kl, ClosedFormMatchesMonteCarlo) {
  Rng rng(1);
  for (auto [mu, sigma] : {std::pair{0.0, 1.0}, {1.5, 0.5}, {-0.7, 2.0}}) {
    // KL = E_q[log q(z) - log p(z)].
    const std::size_t n = 200000;
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = rng.normal();
      const double z = mu + sigma * e;
      const double v = -std::log(sigma) - 0.5 * e * e + 0.5 * z * z;
      s += v;
      s2 += v * v;
    }
    const double mean = s / n, se = std::sqrt((s2 / n - mean * mean) / n);
    EXPECT_LE(std::abs(kl_closed_form(mu, sigma) - mean), 3.0 * se + 1e-12);
  }
  EXPECT_NEAR(kl_closed_form(0.0, 1.0), 0.0, 1e-15);
}

TEST(VaeLossTerms, HandValuesAndGradient) {
  auto recon = ag::parameter(Tensor({2, 1, 2}, {1.0, 0.0, 0.0, 2.0}));
  const Tensor target({2, 1, 2}, 0.0);
  auto mu = ag::parameter(Tensor({2, 1}, {1.0, 0.0}));
  auto lv = ag::parameter(Tensor({2, 1}, {0.0, 0.0}));
  const auto l = vae_loss_terms(recon, target, mu, lv, 2.0);
  EXPECT_NEAR(l.reconstruction->value[0], (1.0 + 4.0) / 2.0, 1e-12);
  EXPECT_NEAR(l.kl->value[0], kl_closed_form(1.0, 1.0) / 2.0, 1e-12);
  EXPECT_NEAR(l.total->value[0], 2.5 + 2.0 * 0.25, 1e-12);
  EXPECT_LT(tscil::testing::grad_check(
                [&](const std::vector<ag::Var>& p) { return vae_loss_terms(p[0], target, p[1], p[2], 0.5).total; },
                {recon, mu, lv}),
            1e-5);
}

TEST(Vae, ReconstructionShapeForAnyLength) {
  Rng rng(2);
  for (std::size_t len : {32u, 30u, 27u, 9u}) {
    auto v = Vae::build(2, len, tiny_vae(), 1);
    const auto out = v.forward(random_tensor({3, 2, len}, rng), rng);
    EXPECT_EQ(out.recon->value.shape(), (std::vector<std::size_t>{3, 2, len})) << len;
    EXPECT_EQ(out.mu->value.shape(), (std::vector<std::size_t>{3, 3}));
  }
}

TEST(Vae, ParameterGradientsMatchFiniteDifferences) {
  auto v = Vae::build(1, 12, tiny_vae(), 3);
  Rng rng(3);
  const Tensor x = random_tensor({2, 1, 12}, rng);
  auto params = v.parameters();
  const double err = tscil::testing::grad_check(
      [&](const std::vector<ag::Var>&) {
        Rng r(9);
        const auto out = v.forward(x, r, false);
        return vae_loss_terms(out.recon, x, out.mu, out.logvar, 1.0).total;
      },
      {params.front(), params.back()});
  EXPECT_LT(err, 1e-4);
}

TEST(Vae, StandardisationRoundTrip) {
  const auto raw = data::make_synthetic(tscil::testing::small_synthetic(2));
  auto v = Vae::build(raw.channels, raw.length, tiny_vae(), 1);
  v.set_standardisation(raw.samples);
  const Tensor x = data::to_batch(std::span(raw.samples).first(5));
  const Tensor back = v.destandardise(v.standardise(x));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back[i], x[i], 1e-9);
}

TEST(Vae, FitLowersLossAndGeneratesDeterministically) {
  const auto raw = data::make_synthetic(tscil::testing::small_synthetic(4));
  std::vector<data::SamplePtr> train(raw.samples.begin(), raw.samples.begin() + 120);
  std::vector<data::SamplePtr> val(raw.samples.begin() + 120, raw.samples.begin() + 150);
  auto v = Vae::build(raw.channels, raw.length, tiny_vae(), 1);
  v.set_standardisation(train);
  Rng r0(1);
  const double before = v.loss(data::to_batch(val), r0).total->value[0];
  Rng rng(5);
  v.fit(train, val, nullptr, rng);
  Rng r1(1);
  EXPECT_LT(v.loss(data::to_batch(val), r1).total->value[0], before);
  EXPECT_TRUE(v.trained());

  Rng a(7), b(7);
  const auto ga = v.generate(300, a), gb = v.generate(300, b);
  ASSERT_EQ(ga.size(), 300u);
  EXPECT_EQ(ga[0]->label, -1);
  EXPECT_EQ(ga[299]->values, gb[299]->values);
  EXPECT_EQ(ga[0]->channels, raw.channels);
}

TEST(Vae, CloneIsIndependent) {
  auto v = Vae::build(1, 8, tiny_vae(), 1);
  auto c = v.clone();
  c.parameters()[0]->value[0] += 1.0;
  EXPECT_NE(c.parameters()[0]->value[0], v.parameters()[0]->value[0]);
}

TEST(PseudoLabel, UsesKnownClasses) {
  const auto raw = data::make_synthetic(tscil::testing::small_synthetic(5));
  model::BackboneConfig bc;
  bc.in_channels = raw.channels;
  bc.length = raw.length;
  bc.filters = {4, 4};
  auto teacher = model::Model::build(bc, {4, 2}, 1);
  std::vector<data::SamplePtr> xs(raw.samples.begin(), raw.samples.begin() + 20);
  const auto labelled = pseudo_label(teacher, xs);
  ASSERT_EQ(labelled.size(), xs.size());
  const auto pred = teacher.predict(data::to_batch(xs));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    EXPECT_TRUE(labelled[i]->label == 4 || labelled[i]->label == 2);
    EXPECT_EQ(labelled[i]->label, pred[i]);
    EXPECT_EQ(labelled[i]->values, xs[i]->values);
  }
}
