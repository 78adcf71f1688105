#include <gtest/gtest.h>

#include <filesystem>

#include "support.hpp"
#include "tscil/core/archive.hpp"
#include "tscil/core/errors.hpp"
#include "tscil/core/optim.hpp"
#include "tscil/train/trainer.hpp"

using namespace tscil;
using tscil::testing::grad_check;
using tscil::testing::random_tensor;

namespace {

ag::Var weighted_sum(const ag::Var& y, std::uint64_t seed) {
  // A random linear functional so that every output entry matters.
  Rng rng(seed);
  return ag::sum(ag::mul(y, ag::constant(random_tensor(y->value.shape(), rng))));
}

}  // namespace

TEST(Rng, DerivedStreamsAreStableAndDistinct) {
  EXPECT_EQ(derive_seed(7, "a"), derive_seed(7, "a"));
  EXPECT_NE(derive_seed(7, "a"), derive_seed(7, "b"));
  EXPECT_NE(derive_seed(7, "a"), derive_seed(8, "a"));
  Rng a(3, "x"), b(3, "x");
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next(), b.next());
}

TEST(Tensor, ShapeAndIndexing) {
  Tensor t({2, 3, 4}, 1.5);
  EXPECT_EQ(t.size(), 24u);
  t.at(1, 2, 3) = 9.0;
  EXPECT_EQ(t[23], 9.0);
  EXPECT_EQ(t.reshaped({6, 4}).at(5, 3), 9.0);
}

TEST(Autograd, ElementwiseOpsMatchFiniteDifferences) {
  Rng rng(1);
  auto a = ag::parameter(random_tensor({3, 4}, rng));
  auto b = ag::parameter(random_tensor({3, 4}, rng));
  const double err = grad_check(
      [](const std::vector<ag::Var>& p) {
        return weighted_sum(ag::add(ag::mul(ag::exp(ag::scale(p[0], 0.3)), p[1]), ag::square(ag::sub(p[0], p[1]))), 11);
      },
      {a, b});
  EXPECT_LT(err, 1e-6);
}

TEST(Autograd, LinearAndSlicing) {
  Rng rng(2);
  auto x = ag::parameter(random_tensor({5, 4}, rng));
  auto w = ag::parameter(random_tensor({3, 4}, rng));
  auto b = ag::parameter(random_tensor({3}, rng));
  const double err = grad_check(
      [](const std::vector<ag::Var>& p) {
        const auto y = ag::linear(p[0], p[1], p[2]);
        return weighted_sum(ag::concat_rows({ag::slice_rows(y, 0, 2), ag::slice_rows(ag::slice_cols(y, 0, 3), 3, 5)}), 12);
      },
      {x, w, b});
  EXPECT_LT(err, 1e-6);
}

TEST(Autograd, Conv1dStridedPadded) {
  Rng rng(3);
  auto x = ag::parameter(random_tensor({2, 3, 9}, rng));
  auto w = ag::parameter(random_tensor({4, 3, 3}, rng));
  auto b = ag::parameter(random_tensor({4}, rng));
  const double err = grad_check(
      [](const std::vector<ag::Var>& p) { return weighted_sum(ag::conv1d(p[0], p[1], p[2], 2, 1), 13); }, {x, w, b});
  EXPECT_LT(err, 1e-6);
  EXPECT_EQ(ag::conv1d(x, w, b, 2, 1)->value.dim(2), 5u);
}

TEST(Autograd, ConvTransposeInvertsConvLength) {
  Rng rng(4);
  auto x = ag::parameter(random_tensor({2, 4, 5}, rng));
  auto w = ag::parameter(random_tensor({4, 3, 3}, rng));
  auto b = ag::parameter(random_tensor({3}, rng));
  // 5 -> 9 with stride 2, padding 1 and no output padding; 10 with one.
  EXPECT_EQ(ag::conv_transpose1d(x, w, b, 2, 1, 0)->value.dim(2), 9u);
  EXPECT_EQ(ag::conv_transpose1d(x, w, b, 2, 1, 1)->value.dim(2), 10u);
  const double err = grad_check(
      [](const std::vector<ag::Var>& p) { return weighted_sum(ag::conv_transpose1d(p[0], p[1], p[2], 2, 1, 1), 14); },
      {x, w, b});
  EXPECT_LT(err, 1e-6);
}

TEST(Autograd, ConvTransposeIsAdjointOfConv) {
  // <conv(x), y> == <x, conv_transpose(y)> for matching weights and no bias.
  Rng rng(5);
  const Tensor x = random_tensor({1, 2, 8}, rng), y = random_tensor({1, 3, 4}, rng), w = random_tensor({3, 2, 3}, rng);
  const Tensor cx = ag::conv1d(ag::constant(x), ag::constant(w), nullptr, 2, 1)->value;
  const Tensor ty = ag::conv_transpose1d(ag::constant(y), ag::constant(w), nullptr, 2, 1, 1)->value;
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * ty[i];
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(Autograd, NormalisationLayers) {
  Rng rng(6);
  auto x = ag::parameter(random_tensor({3, 2, 6}, rng));
  auto g = ag::parameter(random_tensor({2}, rng));
  auto b = ag::parameter(random_tensor({2}, rng));
  EXPECT_LT(grad_check([](const std::vector<ag::Var>& p) { return weighted_sum(ag::layer_norm_cl(p[0], p[1], p[2], 1e-5), 15); },
                       {x, g, b}),
            1e-5);
  EXPECT_LT(grad_check([](const std::vector<ag::Var>& p) { return weighted_sum(ag::instance_norm(p[0], 1e-5), 16); }, {x}),
            1e-5);
  ag::RunningStats stats{Tensor({2}, 0.0), Tensor({2}, 1.0)};
  EXPECT_LT(grad_check(
                [&](const std::vector<ag::Var>& p) {
                  ag::RunningStats s = stats;
                  return weighted_sum(ag::batch_norm1d(p[0], p[1], p[2], s, true, 0.1, 1e-5), 17);
                },
                {x, g, b}),
            1e-5);
}

TEST(Autograd, LayerNormOutputIsStandardisedPerSample) {
  Rng rng(7);
  auto y = ag::layer_norm_cl(ag::constant(random_tensor({2, 3, 10}, rng, 4.0)), ag::constant(Tensor({3}, 1.0)),
                             ag::constant(Tensor({3}, 0.0)), 1e-5);
  for (std::size_t n = 0; n < 2; ++n) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < 30; ++i) m += y->value[n * 30 + i] / 30.0;
    for (std::size_t i = 0; i < 30; ++i) v += std::pow(y->value[n * 30 + i] - m, 2) / 30.0;
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(v, 1.0, 1e-3);
  }
}

TEST(Autograd, LossesMatchFiniteDifferences) {
  Rng rng(8);
  auto logits = ag::parameter(random_tensor({4, 3}, rng));
  const std::vector<std::size_t> targets{0, 2, 1, 2};
  EXPECT_LT(grad_check([&](const std::vector<ag::Var>& p) { return ag::cross_entropy(p[0], targets); }, {logits}), 1e-6);
  EXPECT_LT(grad_check([&](const std::vector<ag::Var>& p) { return ag::bce_with_logits(p[0], targets); }, {logits}), 1e-6);
  const Tensor probs = ag::softmax_rows(random_tensor({4, 3}, rng), 2.0);
  EXPECT_LT(grad_check([&](const std::vector<ag::Var>& p) { return ag::soft_cross_entropy(p[0], probs, 2.0); }, {logits}),
            1e-6);
  auto w = ag::parameter(random_tensor({3, 5}, rng));
  auto x = ag::parameter(random_tensor({4, 5}, rng));
  auto eta = ag::parameter(Tensor::scalar(0.5));
  EXPECT_LT(grad_check([](const std::vector<ag::Var>& p) { return weighted_sum(ag::cosine_logits(p[0], p[1], p[2]), 18); },
                       {x, w, eta}),
            1e-6);
}

TEST(Autograd, CrossEntropyValue) {
  // logits [0, ln 3] with target 1: -log(3 / 4).
  auto l = ag::constant(Tensor({1, 2}, {0.0, std::log(3.0)}));
  const std::vector<std::size_t> t{1};
  EXPECT_NEAR(ag::cross_entropy(l, t)->value[0], -std::log(0.75), 1e-12);
}

TEST(Autograd, PoolingAndTimeMean) {
  Rng rng(9);
  auto x = ag::parameter(random_tensor({2, 3, 8}, rng));
  EXPECT_LT(grad_check([](const std::vector<ag::Var>& p) { return weighted_sum(ag::max_pool1d(p[0], 2), 19); }, {x}), 1e-6);
  EXPECT_LT(grad_check([](const std::vector<ag::Var>& p) { return weighted_sum(ag::mean_over_time(p[0]), 20); }, {x}), 1e-6);
}

TEST(Autograd, NoGradBuildsNoGraph) {
  auto p = ag::parameter(Tensor({2}, 1.0));
  ag::NoGradGuard g;
  auto y = ag::square(p);
  EXPECT_TRUE(y->parents.empty());
}

TEST(Adam, MinimisesQuadratic) {
  auto p = ag::parameter(Tensor({2}, {3.0, -2.0}));
  Adam opt({p}, 0.1);
  for (int i = 0; i < 500; ++i) {
    opt.zero_grad();
    ag::backward(ag::sum(ag::square(p)));
    opt.step();
  }
  EXPECT_NEAR(p->value[0], 0.0, 1e-2);
  EXPECT_NEAR(p->value[1], 0.0, 1e-2);
}

TEST(Archive, RoundTripsArraysAndMeta) {
  const auto path = std::filesystem::temp_directory_path() / "tscil_test_archive.bin";
  Archive a;
  a.meta = {{"kind", "test"}, {"n", 3}};
  a.arrays["x"] = ArchiveArray::from_f64({2, 2}, {1.0, 2.0, 3.0, 4.5});
  a.arrays["y"] = ArchiveArray::from_i32({3}, {-1, 0, 7});
  a.arrays["z"] = ArchiveArray::from_f32({1}, {0.25f});
  write_archive(path, a);
  const auto b = read_archive(path);
  EXPECT_EQ(b.meta["kind"], "test");
  EXPECT_EQ(b.array("x").as_f64(), (std::vector<double>{1.0, 2.0, 3.0, 4.5}));
  EXPECT_EQ(b.array("y").as_i32(), (std::vector<std::int32_t>{-1, 0, 7}));
  EXPECT_EQ(b.array("z").as_f32()[0], 0.25f);
  EXPECT_EQ(read_archive_header(path)["n"], 3);
  std::filesystem::remove(path);
}

TEST(Archive, RejectsCorruptFiles) {
  const auto path = std::filesystem::temp_directory_path() / "tscil_test_corrupt.bin";
  write_text_atomic(path, "not an archive");
  EXPECT_THROW(read_archive(path), ArchiveError);
  std::filesystem::remove(path);
}

TEST(Scheduler, StepDecayIsRepeated) {
  const auto f = train::make_scheduler(train::Scheduler::step10, 1.0, 100);
  EXPECT_DOUBLE_EQ(f(1), 1.0);
  EXPECT_DOUBLE_EQ(f(10), 1.0);
  EXPECT_NEAR(f(11), 0.1, 1e-15);
  EXPECT_NEAR(f(21), 0.01, 1e-15);
  const auto g = train::make_scheduler(train::Scheduler::step15, 1.0, 100);
  EXPECT_DOUBLE_EQ(g(15), 1.0);
  EXPECT_NEAR(g(16), 0.1, 1e-15);
}

TEST(Scheduler, OneCycleWarmsUpThenAnneals) {
  const auto f = train::make_scheduler(train::Scheduler::one_cycle, 1e-2, 101);
  EXPECT_NEAR(f(1), 1e-2 / 25.0, 1e-15);
  EXPECT_NEAR(f(31), 1e-2, 1e-12);  // peak at 30% of the run
  EXPECT_NEAR(f(101), 1e-2 / 25.0 / 1e4, 1e-15);
  for (int e = 2; e <= 31; ++e) EXPECT_GE(f(e), f(e - 1));
  for (int e = 32; e <= 101; ++e) EXPECT_LE(f(e), f(e - 1));
}

TEST(Scheduler, ParseRejectsUnknown) {
  EXPECT_EQ(train::parse_scheduler("step10"), train::Scheduler::step10);
  EXPECT_THROW(train::parse_scheduler("cosine"), ConfigError);
}
