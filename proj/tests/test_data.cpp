#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "support.hpp"
#include "tscil/core/errors.hpp"
#include "tscil/data/cache.hpp"
#include "tscil/data/loaders.hpp"
#include "tscil/data/preprocess.hpp"
#include "tscil/data/stream.hpp"
#include "tscil/memory/buffer.hpp"

using namespace tscil;
using namespace tscil::data;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("tscil_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  for (const auto& l : lines) out << l << "\n";
}

// Miniature UCI-HAR tree: 6 classes x 2 subjects x 1 window per split.
fs::path make_mini_uci_har() {
  const auto root = fresh_dir("mini_uci") / "UCI HAR Dataset";
  const char* signals[] = {"body_acc_x", "body_acc_y", "body_acc_z", "body_gyro_x", "body_gyro_y",
                           "body_gyro_z", "total_acc_x", "total_acc_y", "total_acc_z"};
  for (const std::string part : {"train", "test"}) {
    std::vector<std::string> labels, subjects;
    for (int c = 1; c <= 6; ++c) {
      for (int s : {1, 2}) {
        labels.push_back(std::to_string(c));
        subjects.push_back(std::to_string(s));
      }
    }
    write_lines(root / part / ("y_" + part + ".txt"), labels);
    write_lines(root / part / ("subject_" + part + ".txt"), subjects);
    for (int k = 0; k < 9; ++k) {
      std::vector<std::string> rows;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        std::string row;
        for (int t = 0; t < 128; ++t) row += " " + std::to_string(0.01 * (k + 1) * t + static_cast<double>(i));
        rows.push_back(row);
      }
      write_lines(root / part / "Inertial Signals" / (std::string(signals[k]) + "_" + part + ".txt"), rows);
    }
  }
  return root.parent_path();
}

}  // namespace

TEST(Synthetic, DeterministicAndBalanced) {
  const auto cfg = tscil::testing::small_synthetic(3);
  const auto a = make_synthetic(cfg), b = make_synthetic(cfg);
  ASSERT_EQ(a.samples.size(), b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) EXPECT_EQ(a.samples[i]->values, b.samples[i]->values);
  EXPECT_EQ(a.count(Split::train), 6u * 3 * 10);
  EXPECT_EQ(a.count(Split::test), 6u * 3 * 4);
  EXPECT_NO_THROW(a.validate());
  EXPECT_EQ(a.subjects().size(), 3u);
}

TEST(Stream, TwoClassesPerTaskDisjointAndComplete) {
  const auto d = make_synthetic(tscil::testing::small_synthetic());
  const auto s = make_task_stream(d, 2, 11);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_NO_THROW(check_stream(s));
  std::set<int> seen;
  for (const auto& t : s.tasks) {
    ASSERT_EQ(t.class_set.size(), 2u);
    for (int c : t.class_set) EXPECT_TRUE(seen.insert(c).second);
    for (const auto* part : {&t.train, &t.val, &t.test}) {
      for (const auto& x : *part) EXPECT_TRUE(t.contains(x->label));
    }
    EXPECT_EQ(t.test.size(), 2u * 3 * 4);
  }
  EXPECT_EQ(seen.size(), 6u);
}

TEST(Stream, ClassOrderDependsOnSeedOnly) {
  const auto d = make_synthetic(tscil::testing::small_synthetic());
  EXPECT_EQ(make_task_stream(d, 2, 5).class_order, make_task_stream(d, 2, 5).class_order);
  bool differs = false;
  for (std::uint64_t s = 1; s < 10 && !differs; ++s) {
    differs = make_task_stream(d, 2, s).class_order != make_task_stream(d, 2, 0).class_order;
  }
  EXPECT_TRUE(differs);
}

TEST(Stream, ValidationSplitIsStratifiedTenPercent) {
  const auto d = make_synthetic(tscil::testing::small_synthetic());
  const auto s = make_task_stream(d, 2, 1, 0.1);
  for (const auto& t : s.tasks) {
    std::map<int, int> val, train;
    for (const auto& x : t.val) ++val[x->label];
    for (const auto& x : t.train) ++train[x->label];
    for (int c : t.class_set) {
      EXPECT_EQ(val[c], 3);  // round(0.1 * 30)
      EXPECT_EQ(train[c], 27);
    }
  }
}

TEST(Stream, DropsTailClassesThatDoNotFillATask) {
  auto cfg = tscil::testing::small_synthetic();
  cfg.classes = 7;
  const auto s = make_task_stream(make_synthetic(cfg), 2, 0);
  EXPECT_EQ(s.size(), 3u);
  EXPECT_EQ(s.class_order.size(), 6u);
}

TEST(Stream, ValidationStreamSplit) {
  auto cfg = tscil::testing::small_synthetic();
  cfg.classes = 14;
  const auto full = make_task_stream(make_synthetic(cfg), 2, 0);
  const auto [val, exp] = split_validation_stream(full, 3);
  EXPECT_EQ(val.size(), 3u);
  EXPECT_EQ(exp.size(), 4u);
  EXPECT_EQ(exp.tasks[0].index, 0u);
  std::set<int> a(val.class_order.begin(), val.class_order.end());
  for (int c : exp.class_order) EXPECT_FALSE(a.count(c));
  const auto small = make_task_stream(make_synthetic(tscil::testing::small_synthetic()), 2, 0);
  EXPECT_THROW(split_validation_stream(small, 3), ProtocolError);
}

TEST(Budget, FractionOfTrainingData) {
  EXPECT_EQ(memory::budget_from_fraction(100, 0.01), 1u);
  EXPECT_EQ(memory::budget_from_fraction(7352, 0.05), 367u);
  EXPECT_EQ(memory::budget_from_fraction(1000, 1.0), 1000u);
  EXPECT_EQ(memory::budget_from_fraction(10, 0.01, 4), 4u);
  EXPECT_THROW(memory::budget_from_fraction(10, 0.0), ConfigError);
  EXPECT_THROW(memory::budget_from_fraction(10, 1.5), ConfigError);
}

TEST(Preprocess, DecimateAveragesBlocks) {
  Recording r;
  r.channels = 1;
  r.rate_hz = 8;
  r.values = {1, 3, 5, 7, 9};
  const auto d = decimate(r, 2);
  EXPECT_EQ(d.values, (std::vector<float>{2, 6}));
  EXPECT_DOUBLE_EQ(d.rate_hz, 4.0);
}

TEST(Preprocess, WindowsDiscardTail) {
  Recording r;
  r.channels = 2;
  r.label = 4;
  r.subject = 9;
  for (int c = 0; c < 2; ++c) {
    for (int t = 0; t < 10; ++t) r.values.push_back(static_cast<float>(100 * c + t));
  }
  const auto w = sliding_windows(r, 4);
  ASSERT_EQ(w.size(), 2u);
  EXPECT_EQ(w[1].at(0, 0), 4.0f);
  EXPECT_EQ(w[1].at(1, 3), 107.0f);
  EXPECT_EQ(w[0].label, 4);
  EXPECT_EQ(*w[0].subject, 9);
}

TEST(Preprocess, SubjectStratifiedSplitKeepsEverySubjectOnBothSides) {
  std::vector<SamplePtr> samples;
  for (int c = 0; c < 3; ++c) {
    for (int s = 0; s < 4; ++s) {
      for (int k = 0; k < 8; ++k) {
        auto x = std::make_shared<TimeSeriesSample>();
        x->label = c;
        x->subject = s;
        samples.push_back(x);
      }
    }
  }
  const auto split = subject_stratified_split(samples, 0.25, 1);
  std::map<std::pair<int, int>, std::pair<int, int>> counts;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& c = counts[{samples[i]->label, *samples[i]->subject}];
    (split[i] == Split::train ? c.first : c.second)++;
  }
  for (const auto& [key, c] : counts) {
    EXPECT_GE(c.first, 1);
    EXPECT_GE(c.second, 1);
  }
  std::size_t test = std::count(split.begin(), split.end(), Split::test);
  EXPECT_EQ(test, 24u);
}

TEST(Loaders, CanonicalNames) {
  EXPECT_EQ(canonical_dataset_id("UCI-HAR"), "uci-har");
  EXPECT_EQ(canonical_dataset_id("uci_har"), "uci-har");
  EXPECT_EQ(canonical_dataset_id("UWave"), "uwave");
  EXPECT_THROW(canonical_dataset_id("mnist"), ConfigError);
}

TEST(Loaders, MissingFilesRaiseLoadErrorWithLayout) {
  const auto empty = fresh_dir("empty_root");
  try {
    load_dataset("uci-har", empty);
    FAIL() << "expected LoadError";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("Inertial Signals"), std::string::npos);
  }
  EXPECT_THROW(load_dataset("uwave", empty), LoadError);
  EXPECT_THROW(load_dataset("dsa", empty), LoadError);
}

TEST(Loaders, MiniatureUciHarParsesChannelOrderAndLabels) {
  const auto root = make_mini_uci_har();
  const auto d = load_dataset("uci-har", root);
  EXPECT_EQ(d.channels, 9u);
  EXPECT_EQ(d.length, 128u);
  EXPECT_EQ(d.count(Split::train), 12u);
  EXPECT_EQ(d.classes(), (std::vector<int>{0, 1, 2, 3, 4, 5}));
  // Channel k at time t holds 0.01 * (k + 1) * t + row index.
  const auto& s = d.samples[3];
  EXPECT_NEAR(s->at(4, 10), 0.01 * 5 * 10 + 3, 1e-5);
  EXPECT_EQ(*s->subject, 2);
}

TEST(Loaders, CacheRoundTripIsExact) {
  const auto root = make_mini_uci_har();
  LoadOptions opts;
  opts.cache_dir = fresh_dir("cache");
  const auto first = load_dataset("uci-har", root, opts);
  EXPECT_TRUE(fs::exists(cache_file(*opts.cache_dir, "uci-har", preprocessing_hash("uci-har", opts))));
  fs::remove_all(root);  // the second load must come from the cache
  const auto second = load_dataset("uci-har", root, opts);
  ASSERT_EQ(first.samples.size(), second.samples.size());
  for (std::size_t i = 0; i < first.samples.size(); ++i) {
    EXPECT_EQ(first.samples[i]->values, second.samples[i]->values);
    EXPECT_EQ(first.samples[i]->label, second.samples[i]->label);
    EXPECT_EQ(first.split[i], second.split[i]);
  }
}

TEST(Loaders, WrongShapeIsRejected) {
  const auto root = fresh_dir("bad_uwave");
  for (char axis : {'X', 'Y', 'Z'}) {
    for (const std::string part : {"TRAIN", "TEST"}) {
      std::vector<std::string> rows;
      for (int c = 1; c <= 8; ++c) rows.push_back(std::to_string(c) + " 0.1 0.2 0.3");  // length 3, not 315
      write_lines(root / (std::string("UWaveGestureLibrary") + axis + "_" + part + ".tsv"), rows);
    }
  }
  EXPECT_THROW(load_dataset("uwave", root), ValidationError);
}

TEST(Dataset, ValidateRejectsNonFinite) {
  auto d = make_synthetic(tscil::testing::small_synthetic());
  auto bad = std::make_shared<TimeSeriesSample>(*d.samples[0]);
  bad->values[0] = std::numeric_limits<float>::quiet_NaN();
  d.samples[0] = bad;
  EXPECT_THROW(d.validate(), ValidationError);
}

TEST(Dataset, ToBatchStacksChannelMajor) {
  const auto d = make_synthetic(tscil::testing::small_synthetic());
  const std::vector<SamplePtr> two{d.samples[0], d.samples[5]};
  const auto t = to_batch(two);
  EXPECT_EQ(t.shape(), (std::vector<std::size_t>{2, 2, 32}));
  EXPECT_FLOAT_EQ(static_cast<float>(t.at(1, 1, 7)), d.samples[5]->at(1, 7));
}
