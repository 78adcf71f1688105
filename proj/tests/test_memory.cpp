#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

#include <boost/math/distributions/chi_squared.hpp>

#include "oracles.hpp"
#include "support.hpp"
#include "tscil/core/errors.hpp"
#include "tscil/memory/buffer.hpp"
#include "tscil/memory/selection.hpp"

using namespace tscil;
using namespace tscil::memory;
using tscil::testing::random_tensor;

namespace {

data::SamplePtr make_sample(int label, std::optional<int> subject = std::nullopt, float v = 0.0f) {
  auto s = std::make_shared<data::TimeSeriesSample>();
  s->channels = 1;
  s->length = 2;
  s->values = {v, -v};
  s->label = label;
  s->subject = subject;
  return s;
}

// Features are the sample values themselves.
Tensor value_features(const std::vector<data::SamplePtr>& xs) {
  Tensor f({xs.size(), 2});
  for (std::size_t i = 0; i < xs.size(); ++i) {
    f.data()[2 * i] = xs[i]->values[0];
    f.data()[2 * i + 1] = xs[i]->values[1] * 0.5;
  }
  return f;
}

}  // namespace

TEST(Reservoir, KeepsEverythingUntilFull) {
  MemoryBuffer b(5);
  Rng rng(1);
  std::vector<data::SamplePtr> xs;
  for (int i = 0; i < 4; ++i) xs.push_back(make_sample(i));
  b.reservoir_update(xs, rng);
  EXPECT_EQ(b.size(), 4u);
  EXPECT_EQ(b.seen_count(), 4u);
  for (int i = 0; i < 4; ++i) xs.push_back(make_sample(i));
  b.reservoir_update(std::span(xs).subspan(4), rng);
  EXPECT_EQ(b.size(), 5u);
  EXPECT_EQ(b.seen_count(), 8u);
}

TEST(Reservoir, ZeroCapacityStoresNothing) {
  MemoryBuffer b(0);
  Rng rng(2);
  std::vector<data::SamplePtr> xs{make_sample(0), make_sample(1)};
  b.reservoir_update(xs, rng);
  EXPECT_TRUE(b.empty());
  EXPECT_TRUE(random_retrieve(b, 4, rng).empty());
}

TEST(Reservoir, RetentionIsUniform) {
  const std::size_t n = 200, M = 20, streams = 3000;
  std::vector<data::SamplePtr> xs;
  for (std::size_t i = 0; i < n; ++i) xs.push_back(make_sample(static_cast<int>(i)));
  std::vector<double> counts(n, 0.0);
  Rng rng(3);
  for (std::size_t s = 0; s < streams; ++s) {
    MemoryBuffer b(M);
    for (std::size_t i = 0; i < n; i += 10) b.reservoir_update(std::span(xs).subspan(i, 10), rng);
    for (const auto& e : b.entries()) counts[static_cast<std::size_t>(e.sample->label)] += 1.0;
  }
  const double expected = static_cast<double>(streams * M) / n;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  const double p = boost::math::cdf(boost::math::complement(boost::math::chi_squared(n - 1.0), chi2));
  EXPECT_GT(p, 0.01);
}

TEST(Reservoir, StoresLogitsWithEntries) {
  MemoryBuffer b(3);
  Rng rng(4);
  std::vector<data::SamplePtr> xs{make_sample(0), make_sample(1)};
  const std::vector<std::vector<double>> logits{{1.0, 2.0}, {3.0, 4.0}};
  b.reservoir_update(xs, rng, &logits);
  ASSERT_TRUE(b.entry(1).stored_logits.has_value());
  EXPECT_EQ(*b.entry(1).stored_logits, logits[1]);
}

TEST(Reservoir, SubjectRestrictedOnlyStoresAllowedSubjects) {
  MemoryBuffer b(50);
  Rng rng(5);
  std::vector<data::SamplePtr> xs;
  for (int i = 0; i < 100; ++i) xs.push_back(make_sample(i % 3, i % 5));
  b.subject_restricted_update(xs, {1, 3}, rng);
  EXPECT_EQ(b.size(), 40u);
  for (const auto& e : b.entries()) EXPECT_TRUE(*e.sample->subject == 1 || *e.sample->subject == 3);
}

TEST(Budget, FractionOfTrainingSize) {
  EXPECT_EQ(budget_from_fraction(100, 0.01), 1u);
  EXPECT_EQ(budget_from_fraction(7352, 0.05), 367u);
  EXPECT_EQ(budget_from_fraction(100, 0.01, 6), 6u);
  EXPECT_THROW(budget_from_fraction(100, 0.0), ConfigError);
  EXPECT_THROW(budget_from_fraction(100, 1.5), ConfigError);
}

TEST(Selection, HerdingMatchesBruteForce) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.index(12), m = 1 + rng.index(5), d = 1 + rng.index(4);
    const Tensor f = random_tensor({n, d}, rng);
    EXPECT_EQ(herding_select(f, m), oracle::herding(f, m));
  }
}

TEST(Selection, FastIcarlMatchesSortedDistances) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.index(12), m = 1 + rng.index(5), d = 1 + rng.index(4);
    const Tensor f = random_tensor({n, d}, rng);
    EXPECT_EQ(fasticarl_select(f, m), oracle::closest_to_mean(f, m));
  }
}

TEST(Selection, HerdingFirstPickIsClosestToMean) {
  const Tensor f({4, 1}, {0.0, 10.0, 4.0, 6.0});
  // Mean 5; rows 2 and 3 tie at distance 1, the lower index wins.
  EXPECT_EQ(herding_select(f, 1), (std::vector<std::size_t>{2}));
  EXPECT_EQ(herding_select(f, 2), (std::vector<std::size_t>{2, 3}));
}

TEST(Selection, ClopsAndTopKOrdering) {
  const std::vector<double> s{0.5, 0.9, 0.5, 0.1};
  EXPECT_EQ(clops_select(s, 3), (std::vector<std::size_t>{1, 0, 2}));
  const std::vector<std::size_t> keys{7, 3, 2, 1};
  EXPECT_EQ(top_k(s, keys, 2), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(top_k(s, keys, 10).size(), 4u);
}

TEST(Shapley, RecursionMatchesCoalitionEnumeration) {
  Rng rng(8);
  for (std::size_t k : {1u, 3u}) {
    for (int trial = 0; trial < 60; ++trial) {
      const std::size_t n = 1 + rng.index(8), d = 1 + rng.index(3);
      const Tensor train = random_tensor({n, d}, rng);
      std::vector<int> labels(n);
      for (int& l : labels) l = static_cast<int>(rng.index(3));
      const Tensor test = random_tensor({d}, rng);
      const int y = static_cast<int>(rng.index(3));
      const auto fast = knn_shapley(train, labels, test.values(), y, k);
      const auto exact = oracle::shapley(train, labels, test.values(), y, k);
      ASSERT_EQ(fast.size(), n);
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        EXPECT_NEAR(fast[i], exact[i], 1e-9);
        total += fast[i];
      }
      std::vector<std::size_t> all(n);
      std::iota(all.begin(), all.end(), 0);
      EXPECT_NEAR(total, knn_utility(train, labels, all, test.values(), y, k), 1e-9);
    }
  }
}

TEST(Shapley, UtilityMatchesOracle) {
  Rng rng(9);
  const Tensor train = random_tensor({6, 2}, rng);
  const std::vector<int> labels{0, 1, 0, 1, 0, 1};
  const Tensor test = random_tensor({2}, rng);
  const std::vector<std::size_t> subset{0, 2, 3};
  EXPECT_NEAR(knn_utility(train, labels, subset, test.values(), 0, 3),
              oracle::knn_utility(train, labels, 0b1101, test.values(), 0, 3), 1e-12);
}

TEST(Aser, ScoresAreCooperativeMinusAdversarial) {
  Rng rng(10);
  const Tensor cand = random_tensor({5, 2}, rng), evals = random_tensor({3, 2}, rng), batch = random_tensor({2, 2}, rng);
  const std::vector<int> cl{0, 1, 0, 1, 2}, el{0, 1, 2}, bl{1, 0};
  const auto s = aser_scores(cand, cl, evals, el, batch, bl, 2, true);
  auto point = [&](const Tensor& t, std::size_t i) { return std::vector<double>(t.data() + 2 * i, t.data() + 2 * i + 2); };
  std::vector<double> expect(5, 0.0);
  for (std::size_t e = 0; e < 3; ++e) {
    const auto v = knn_shapley(cand, cl, point(evals, e), el[e], 2);
    for (std::size_t i = 0; i < 5; ++i) expect[i] += v[i] / 3.0;
  }
  for (std::size_t b = 0; b < 2; ++b) {
    const auto v = knn_shapley(cand, cl, point(batch, b), bl[b], 2);
    for (std::size_t i = 0; i < 5; ++i) expect[i] -= v[i] / 2.0;
  }
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(s[i], expect[i], 1e-12);
}

TEST(Aser, SmallBufferReturnsEverything) {
  MemoryBuffer b(4);
  Rng rng(11);
  std::vector<data::SamplePtr> xs{make_sample(0, std::nullopt, 1.0f)};
  b.reservoir_update(xs, rng);
  const Tensor bf({1, 2}, {0.0, 0.0});
  const std::vector<int> bl{1};
  EXPECT_EQ(aser_retrieve(b, 3, value_features, bf, bl, {}, rng), (std::vector<std::size_t>{0}));
}

TEST(Aser, RetrievesDistinctEntries) {
  MemoryBuffer b(40);
  Rng rng(12);
  std::vector<data::SamplePtr> xs;
  for (int i = 0; i < 40; ++i) xs.push_back(make_sample(i % 4, std::nullopt, static_cast<float>(rng.normal() + i % 4)));
  b.reservoir_update(xs, rng);
  const Tensor bf = random_tensor({4, 2}, rng);
  const std::vector<int> bl{0, 1, 2, 3};
  AserConfig cfg;
  cfg.max_eval_points = 10;
  const auto idx = aser_retrieve(b, 8, value_features, bf, bl, cfg, rng);
  EXPECT_EQ(idx.size(), 8u);
  EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 8u);
}

TEST(Retrieval, RandomWithAndWithoutReplacement) {
  MemoryBuffer b(10);
  Rng rng(13);
  std::vector<data::SamplePtr> xs;
  for (int i = 0; i < 10; ++i) xs.push_back(make_sample(i));
  b.reservoir_update(xs, rng);
  const auto idx = random_retrieve(b, 6, rng);
  EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 6u);
  EXPECT_EQ(random_retrieve(b, 15, rng).size(), 15u);
}

TEST(Retrieval, SubjectBalancedQuotas) {
  MemoryBuffer b(40);
  Rng rng(14);
  std::vector<data::SamplePtr> xs;
  for (int i = 0; i < 40; ++i) xs.push_back(make_sample(i % 2, i % 4));
  b.reservoir_update(xs, rng);
  std::vector<double> freq(4, 0.0);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t k = 1 + rng.index(12);
    const auto idx = subject_balanced_retrieve(b, k, rng);
    ASSERT_EQ(idx.size(), k);
    std::vector<std::size_t> per(4, 0);
    for (auto i : idx) ++per[static_cast<std::size_t>(*b.entry(i).sample->subject)];
    const auto [lo, hi] = std::minmax_element(per.begin(), per.end());
    EXPECT_LE(*hi - *lo, 1u);
    for (std::size_t s = 0; s < 4; ++s) freq[s] += static_cast<double>(per[s]) / static_cast<double>(k);
  }
  for (double f : freq) EXPECT_NEAR(f / 2000.0, 0.25, 0.03);
}

TEST(Retrieval, SubjectBalancedFallsBackWithoutSubjects) {
  MemoryBuffer b(4);
  Rng rng(15);
  std::vector<data::SamplePtr> xs{make_sample(0), make_sample(1, 2)};
  b.reservoir_update(xs, rng);
  EXPECT_EQ(subject_balanced_retrieve(b, 2, rng).size(), 2u);
}

TEST(QuotaPolicies, HerdingKeepsQuotaPerClass) {
  MemoryBuffer b(6);
  Rng rng(16);
  std::vector<data::SamplePtr> t1, t2;
  for (int i = 0; i < 10; ++i) t1.push_back(make_sample(i % 2, std::nullopt, static_cast<float>(rng.normal())));
  for (int i = 0; i < 10; ++i) t2.push_back(make_sample(2 + i % 2, std::nullopt, static_cast<float>(rng.normal())));
  herding_update(b, t1, value_features, 2);
  EXPECT_EQ(b.size(), 6u);
  std::vector<data::SamplePtr> first_class0;
  for (const auto& e : b.entries())
    if (e.sample->label == 0) first_class0.push_back(e.sample);
  herding_update(b, t2, value_features, 4);
  std::map<int, std::size_t> per;
  for (const auto& e : b.entries()) ++per[e.sample->label];
  for (int c = 0; c < 4; ++c) EXPECT_EQ(per[c], 1u);
  // Truncation keeps the earliest selections.
  for (const auto& e : b.entries())
    if (e.sample->label == 0) {
      EXPECT_EQ(e.sample, first_class0.front());
    }
}

TEST(QuotaPolicies, FastIcarlAndClops) {
  MemoryBuffer f(4), c(4);
  Rng rng(17);
  std::vector<data::SamplePtr> xs;
  std::vector<double> scores;
  for (int i = 0; i < 8; ++i) {
    xs.push_back(make_sample(i % 2, std::nullopt, static_cast<float>(i)));
    scores.push_back(static_cast<double>(i));
  }
  fasticarl_update(f, xs, value_features, 2);
  EXPECT_EQ(f.size(), 4u);
  clops_update(c, xs, scores, 2, rng);
  ASSERT_EQ(c.size(), 4u);
  std::set<float> kept;
  for (const auto& e : c.entries()) kept.insert(e.sample->values[0]);
  EXPECT_EQ(kept, (std::set<float>{4.0f, 5.0f, 6.0f, 7.0f}));
  MemoryBuffer fallback(4);
  clops_update(fallback, xs, {}, 2, rng);
  EXPECT_EQ(fallback.size(), 4u);
}

TEST(Snapshot, WritesArchive) {
  MemoryBuffer b(3);
  Rng rng(18);
  std::vector<data::SamplePtr> xs{make_sample(0, 1), make_sample(1, 2)};
  b.reservoir_update(xs, rng);
  const auto path = std::filesystem::temp_directory_path() / "tscil_buffer.bin";
  save_buffer_snapshot(path, b, {"reservoir", "random"});
  EXPECT_GT(std::filesystem::file_size(path), 0u);
  std::filesystem::remove(path);
}
