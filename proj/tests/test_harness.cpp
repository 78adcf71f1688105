#include <gtest/gtest.h>

#include <sys/wait.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "support.hpp"
#include "tscil/core/errors.hpp"
#include "tscil/eval/config.hpp"
#include "tscil/eval/experiment.hpp"

using namespace tscil;
using namespace tscil::eval;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("tscil_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig tiny(const fs::path& out, const std::string& method = "er") {
  ExperimentConfig c;
  c.method = method;
  c.synthetic = tscil::testing::small_synthetic();
  c.filters = {8, 16};
  c.train.epochs = 2;
  c.train.batch_size = 16;
  c.seeds = 2;
  c.output = out;
  c.generator.widths = {4, 8};
  c.generator.epochs = 2;
  c.sample_sheets = false;
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(TSCIL_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, YamlRoundTrip) {
  auto c = tiny("out", "lwf");
  c.params = {{"lambda", 2.0}};
  c.grid.axes = {{"temperature", {1.0, 2.0}}, {"learning_rate", {0.01}}};
  c.protocol = Protocol::a;
  c.internal_norm = model::InternalNorm::batch;
  c.input_norm = model::InputNorm::instance;
  const auto r = ExperimentConfig::from_yaml(c.to_yaml());
  EXPECT_EQ(r.method, "lwf");
  EXPECT_EQ(r.params, c.params);
  EXPECT_EQ(r.protocol, Protocol::a);
  EXPECT_EQ(r.internal_norm, model::InternalNorm::batch);
  EXPECT_EQ(r.input_norm, model::InputNorm::instance);
  EXPECT_EQ(r.filters, c.filters);
  EXPECT_EQ(r.train.epochs, 2);
  EXPECT_EQ(r.synthetic.classes, 6);
  EXPECT_EQ(r.grid.points(), c.grid.points());
  EXPECT_EQ(r.to_yaml(), c.to_yaml());
}

TEST(Config, UnknownKeysAreRejectedAtEveryLevel) {
  EXPECT_THROW(ExperimentConfig::from_yaml("methd: er\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_yaml("train:\n  epoch: 3\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_yaml("normalization:\n  inner: layer\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_yaml("generator:\n  width: [4]\n"), ConfigError);
  EXPECT_NO_THROW(ExperimentConfig::from_yaml("method: mas\nparams:\n  lambda: 0.5\n").validate());
}

TEST(Config, ValidationCatchesBadCombinations) {
  auto c = tiny("out", "nope");
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny("out", "lwf");
  c.params = {{"der_alpha", 0.1}};
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny("out", "lwf");
  c.classifier = model::HeadKind::ncm;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny("out", "er");
  c.protocol = Protocol::b;
  EXPECT_THROW(c.validate(), ConfigError);
  c.grid.axes = {{"learning_rate", {}}};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, EveryMethodValidates) {
  for (const auto& m : method_names()) EXPECT_NO_THROW(tiny("out", m).validate()) << m;
}

TEST(Grid, CartesianOrderFirstAxisSlowest) {
  Grid g;
  g.axes = {{"a", {1, 2}}, {"b", {"x", "y", "z"}}};
  const auto pts = g.points();
  ASSERT_EQ(pts.size(), 6u);
  EXPECT_EQ(pts[0], (nlohmann::json{{"a", 1}, {"b", "x"}}));
  EXPECT_EQ(pts[1], (nlohmann::json{{"a", 1}, {"b", "y"}}));
  EXPECT_EQ(pts[3], (nlohmann::json{{"a", 2}, {"b", "x"}}));
  Grid one;
  one.axes = {{"a", {5}}};
  EXPECT_EQ(one.points().size(), 1u);
  EXPECT_EQ(Grid{}.points().size(), 1u);
}

TEST(Tuning, SelectBestPrefersEarliestTie) {
  EXPECT_EQ(select_best({0.5, 0.9, 0.9, 0.1}), 1u);
  EXPECT_EQ(select_best({0.3}), 0u);
}

TEST(Tuning, ApplyHyperRoutesKeys) {
  auto c = apply_hyper(tiny("out", "gr"), {{"learning_rate", 0.5}, {"scheduler", "step10"}, {"generator_epochs", 7},
                                           {"latent", 3}, {"beta", 0.5}});
  EXPECT_EQ(c.train.learning_rate, 0.5);
  EXPECT_EQ(c.train.scheduler, train::Scheduler::step10);
  EXPECT_EQ(c.generator.epochs, 7);
  EXPECT_EQ(c.generator.latent, 3u);
  auto l = apply_hyper(tiny("out", "lwf"), {{"lambda", 3.0}});
  EXPECT_EQ(l.params["lambda"], 3.0);
}

TEST(Tuning, ProtocolAScoresEveryGridPoint) {
  auto c = tiny("out", "naive");
  c.grid.axes = {{"learning_rate", {0.01, 0.001}}};
  c.protocol = Protocol::a;
  const auto raw = data::make_synthetic(c.synthetic);
  const auto stream = data::make_task_stream(raw, 2, 1);
  const auto r = tune_protocol_a(stream, c, raw.channels, raw.length);
  ASSERT_EQ(r.records.size(), 2u);
  EXPECT_EQ(r.best, r.records[r.best_index].hyper);
  for (const auto& rec : r.records) EXPECT_GE(rec.score, r.records[r.best_index].score - 1.0);
  EXPECT_GE(r.records[r.best_index].score, r.records[1 - r.best_index].score);

  auto big = c;
  big.synthetic.classes = 10;
  const auto raw10 = data::make_synthetic(big.synthetic);
  EXPECT_THROW(tune_protocol_a(data::make_task_stream(raw10, 2, 1), c, raw10.channels, raw10.length), ProtocolError);
}

TEST(Tuning, ProtocolBUsesValidationRuns) {
  auto c = tiny("out", "naive");
  c.synthetic.classes = 10;
  c.grid.axes = {{"learning_rate", {0.01}}};
  c.protocol = Protocol::b;
  c.n_val_runs = 2;
  const auto raw = data::make_synthetic(c.synthetic);
  const auto [val, exp] = data::split_validation_stream(data::make_task_stream(raw, 2, 1), 3);
  const auto r = tune_protocol_b(val, c, raw.channels, raw.length);
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_EQ(r.records[0].scores.size(), 2u);
  EXPECT_EQ(r.best_index, 0u);
}

TEST(Experiment, DeterministicArtefacts) {
  const auto a = scratch("det_a"), b = scratch("det_b");
  const auto ra = run_experiment(tiny(a));
  const auto rb = run_experiment(tiny(b));
  ASSERT_TRUE(ra.all_ok());
  ASSERT_TRUE(rb.all_ok());
  for (const char* seed : {"seed_0", "seed_1"}) {
    const auto pa = ra.dir / seed, pb = rb.dir / seed;
    for (const char* f : {"accuracy_matrix.csv", "metrics.json", "train_log.jsonl", "config.yaml"}) {
      EXPECT_TRUE(fs::exists(pa / f)) << f;
    }
    EXPECT_EQ(slurp(pa / "accuracy_matrix.csv"), slurp(pb / "accuracy_matrix.csv"));
  }
  EXPECT_NE(slurp(ra.dir / "seed_0" / "accuracy_matrix.csv"), slurp(ra.dir / "seed_1" / "accuracy_matrix.csv"));
  const auto report = nlohmann::json::parse(slurp(ra.dir / "report.json"));
  EXPECT_EQ(report["metrics"]["runs"], 2);
  EXPECT_FALSE(report["metrics"]["A_T"]["ci95"].is_null());
  EXPECT_TRUE(fs::exists(ra.dir / "environment.json"));
  EXPECT_TRUE(fs::exists(ra.dir / "accuracy_curve.svg"));
  const auto order0 = nlohmann::json::parse(slurp(ra.dir / "seed_0" / "metrics.json"))["class_order"];
  const auto order1 = nlohmann::json::parse(slurp(ra.dir / "seed_1" / "metrics.json"))["class_order"];
  EXPECT_NE(order0, order1);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Experiment, ThreadedRunsMatchSerialRuns) {
  const auto a = scratch("par_a"), b = scratch("par_b");
  auto ca = tiny(a), cb = tiny(b);
  cb.workers = 2;
  const auto ra = run_experiment(ca), rb = run_experiment(cb);
  for (const char* seed : {"seed_0", "seed_1"}) {
    EXPECT_EQ(slurp(ra.dir / seed / "accuracy_matrix.csv"), slurp(rb.dir / seed / "accuracy_matrix.csv"));
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Experiment, DivergingRunsAreRecordedAsFailures) {
  const auto out = scratch("fail");
  auto c = tiny(out, "naive");
  c.train.learning_rate = std::numeric_limits<double>::infinity();
  const auto r = run_experiment(c);
  EXPECT_FALSE(r.all_ok());
  EXPECT_EQ(r.report.failures, 2u);
  const auto m = nlohmann::json::parse(slurp(r.dir / "seed_0" / "metrics.json"));
  EXPECT_EQ(m["status"], "failed");
  EXPECT_FALSE(m["error"].get<std::string>().empty());
  fs::remove_all(out);
}

TEST(Experiment, OfflineProducesJointMatrix) {
  const auto out = scratch("offline");
  auto c = tiny(out, "offline");
  c.seeds = 1;
  const auto r = run_experiment(c);
  ASSERT_TRUE(r.all_ok());
  EXPECT_TRUE(r.seeds[0].matrix->is_joint());
  EXPECT_FALSE(r.seeds[0].metrics->F_T.has_value());
  fs::remove_all(out);
}

TEST(Experiment, ProtocolViolationAborts) {
  const auto out = scratch("protocol");
  auto c = tiny(out, "naive");
  c.synthetic.classes = 10;
  c.grid.axes = {{"learning_rate", {0.01}}};
  c.protocol = Protocol::a;
  EXPECT_THROW(run_experiment(c), ProtocolError);
  fs::remove_all(out);
}

TEST(Report, TabulatesEveryMethod) {
  const auto out = scratch("report");
  auto c = tiny(out, "naive");
  c.seeds = 1;
  run_experiment(c);
  c.method = "er";
  run_experiment(c);
  const auto md = write_report(out, ReportFormat::md, true);
  EXPECT_NE(md.find("naive"), std::string::npos);
  EXPECT_NE(md.find("er"), std::string::npos);
  EXPECT_TRUE(fs::exists(out / "report.md"));
  EXPECT_TRUE(fs::exists(out / "plots" / "synthetic_accuracy_curves.svg"));
  const auto csv = write_report(out, ReportFormat::csv, false);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  fs::remove_all(out);
}

TEST(Ablation, ClassifierSweepWritesCombinedReport) {
  const auto out = scratch("ablation");
  auto c = tiny(out, "er");
  c.seeds = 1;
  c.train.epochs = 1;
  const auto pts = ablation_sweep(AblationKind::classifier, c);
  ASSERT_EQ(pts.size(), 4u);
  EXPECT_TRUE(fs::exists(out / "ablation_classifier" / "ablation_report.json"));
  EXPECT_TRUE(fs::exists(out / "ablation_classifier" / "ablation_classifier.svg"));
  EXPECT_THROW(ablation_sweep(AblationKind::memory_budget, tiny(out, "lwf")), ConfigError);
  fs::remove_all(out);
}

TEST(Pool, RunsEveryJobAndRethrows) {
  std::atomic<int> sum{0};
  run_pool(10, 3, [&](std::size_t i) { sum += static_cast<int>(i); });
  EXPECT_EQ(sum.load(), 45);
  EXPECT_THROW(run_pool(4, 2, [](std::size_t i) {
                 if (i == 2) throw std::runtime_error("boom");
               }),
               std::runtime_error);
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch("cli");
  {
    std::ofstream(dir / "bad.yaml") << "method: er\nbogus: 1\n";
    auto c = tiny(dir / "results", "naive");
    c.seeds = 1;
    std::ofstream(dir / "good.yaml") << c.to_yaml();
    auto p = c;
    p.synthetic.classes = 10;
    p.grid.axes = {{"learning_rate", {0.01}}};
    p.protocol = Protocol::a;
    std::ofstream(dir / "protocol.yaml") << p.to_yaml();
  }
  EXPECT_EQ(run_cli("run --config " + (dir / "bad.yaml").string()), 2);
  EXPECT_EQ(run_cli("run --config " + (dir / "protocol.yaml").string()), 2);
  EXPECT_EQ(run_cli("run --config " + (dir / "good.yaml").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "results" / "synthetic" / "naive" / "report.json"));
  EXPECT_EQ(run_cli("report --out " + (dir / "results").string()), 0);
  EXPECT_EQ(run_cli("datasets list"), 0);
  EXPECT_EQ(run_cli("datasets prepare uci-har --root " + (dir / "missing").string()), 1);
  EXPECT_NE(run_cli("frobnicate"), 0);
  fs::remove_all(dir);
}

TEST(Config, ShippedConfigsValidate) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(fs::path(TSCIL_SOURCE_DIR) / "configs")) {
    if (e.path().extension() != ".yaml") continue;
    EXPECT_NO_THROW(ExperimentConfig::load(e.path()).validate()) << e.path();
    ++n;
  }
  EXPECT_GE(n, 4u);
}
