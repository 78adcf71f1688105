#include "tscil/eval/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <Eigen/Core>
#include <boost/version.hpp>
#include <spdlog/spdlog.h>
#include <yaml-cpp/yaml.h>

#include "tscil/core/archive.hpp"
#include "tscil/core/errors.hpp"
#include "tscil/eval/plots.hpp"
#include "tscil/memory/buffer.hpp"
#include "tscil/methods/generative.hpp"
#include "tscil/methods/regularizers.hpp"
#include "tscil/methods/replay.hpp"

namespace tscil::eval {
namespace {

double num(const Hyper& params, const char* key, double fallback) {
  return params.contains(key) ? params.at(key).get<double>() : fallback;
}

bool flag(const Hyper& params, const char* key, bool fallback) {
  if (!params.contains(key)) return fallback;
  const auto& v = params.at(key);
  return v.is_boolean() ? v.get<bool>() : v.get<double>() != 0.0;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::string seed_name(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

nlohmann::json environment_manifest() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::ostringstream ts;
  ts << std::put_time(std::gmtime(&now), "%Y-%m-%dT%H:%M:%SZ");
  return {{"created_utc", ts.str()},
          {"compiler", __VERSION__},
          {"cplusplus", __cplusplus},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"boost", BOOST_LIB_VERSION},
          {"spdlog", std::to_string(SPDLOG_VER_MAJOR) + "." + std::to_string(SPDLOG_VER_MINOR) + "." +
                         std::to_string(SPDLOG_VER_PATCH)},
          {"hardware_threads", std::thread::hardware_concurrency()}};
}

data::RawDataset load_for(const ExperimentConfig& cfg) {
  data::LoadOptions opts;
  opts.synthetic = cfg.synthetic;
  opts.split_seed = cfg.base_seed;
  opts.cache_dir = cfg.cache_dir;
  return data::load_dataset(cfg.dataset, cfg.data_root, opts);
}

void write_curve_plot(const std::filesystem::path& path, const std::string& title,
                      const std::vector<std::pair<std::string, std::vector<Summary>>>& curves) {
  LineChart chart;
  chart.title = title;
  chart.x_label = "tasks learned";
  chart.y_label = "average accuracy A_i";
  for (const auto& [label, curve] : curves) {
    Series s;
    s.label = label;
    for (std::size_t i = 0; i < curve.size(); ++i) {
      s.x.push_back(static_cast<double>(i + 1));
      s.y.push_back(curve[i].mean);
      s.err.push_back(curve[i].ci95.value_or(0.0));
    }
    chart.series.push_back(std::move(s));
  }
  write_svg(path, render_svg(chart));
}

std::vector<Summary> curve_from_json(const nlohmann::json& j) {
  std::vector<Summary> out;
  if (!j.contains("A_curve")) return out;
  for (const auto& e : j.at("A_curve")) {
    Summary s;
    s.mean = e.at("mean").get<double>();
    if (e.contains("ci95") && !e.at("ci95").is_null()) s.ci95 = e.at("ci95").get<double>();
    out.push_back(s);
  }
  return out;
}

}  // namespace

model::BackboneConfig backbone_for(const ExperimentConfig& cfg, std::size_t channels, std::size_t length) {
  const std::string id = data::canonical_dataset_id(cfg.dataset);
  auto b = model::default_backbone(id, channels, length);
  if (cfg.input_norm) b.input_norm = *cfg.input_norm;
  if (cfg.dropout) b.dropout = *cfg.dropout;
  b.internal_norm = cfg.internal_norm;
  b.head = cfg.classifier;
  b.filters = cfg.filters;
  b.validate();
  return b;
}

std::unique_ptr<train::MethodPlugin> make_plugin(const ExperimentConfig& cfg, const data::TaskStream& stream,
                                                 std::size_t channels, std::size_t length, std::uint64_t seed,
                                                 const std::optional<std::filesystem::path>& artifact_dir) {
  const auto& p = cfg.params;
  const std::string& m = cfg.method;
  if (m == "offline") return nullptr;
  if (m == "naive") return std::make_unique<train::NaivePlugin>();
  if (m == "lwf") return std::make_unique<methods::LwfPlugin>(methods::LwfParams{num(p, "lambda", 1.0), num(p, "temperature", 2.0)});
  if (m == "mas") {
    return std::make_unique<methods::MasPlugin>(
        methods::MasParams{num(p, "lambda", 1.0), static_cast<std::size_t>(num(p, "max_samples", 256))});
  }
  if (m == "dt2w") {
    methods::Dt2wParams d;
    d.terms.lambda_kd = num(p, "lambda_kd", d.terms.lambda_kd);
    d.terms.lambda_lwf = num(p, "lambda_lwf", d.terms.lambda_lwf);
    d.terms.gamma = num(p, "gamma", d.terms.gamma);
    d.terms.temperature = num(p, "temperature", d.terms.temperature);
    d.terms.all_blocks = flag(p, "all_blocks", false);
    d.prototype_weight = num(p, "prototype_weight", d.prototype_weight);
    d.seed = seed;
    return std::make_unique<methods::Dt2wPlugin>(d);
  }
  if (m == "gr") {
    methods::GrParams g;
    g.vae = cfg.generator;
    g.seed = seed;
    if (cfg.sample_sheets && artifact_dir) g.sheet_dir = *artifact_dir;
    return std::make_unique<methods::GrPlugin>(g, channels, length);
  }
  if (methods::is_replay_kind(m)) {
    methods::ReplayParams r;
    r.capacity = memory::budget_from_fraction(stream, cfg.memory_budget);
    r.der_alpha = num(p, "der_alpha", r.der_alpha);
    r.aser.neighbours = static_cast<std::size_t>(num(p, "aser_neighbours", static_cast<double>(r.aser.neighbours)));
    r.aser.max_eval_points =
        static_cast<std::size_t>(num(p, "aser_eval_points", static_cast<double>(r.aser.max_eval_points)));
    r.aser.max_candidates =
        static_cast<std::size_t>(num(p, "aser_candidates", static_cast<double>(r.aser.max_candidates)));
    r.aser.mean_variant = flag(p, "aser_mean_variant", false);
    r.restricted_subject_count =
        static_cast<std::size_t>(num(p, "restricted_subjects", static_cast<double>(r.restricted_subject_count)));
    r.seed = seed;
    return std::make_unique<methods::ReplayPlugin>(methods::method_assembly(m), r);
  }
  throw ConfigError("unknown method '" + m + "'");
}

train::StreamResult run_on_stream(const ExperimentConfig& cfg_in, const data::TaskStream& stream, std::size_t channels,
                                  std::size_t length, std::uint64_t seed, train::RunLog* log,
                                  const std::optional<std::filesystem::path>& artifact_dir) {
  const ExperimentConfig cfg = apply_hyper(cfg_in, cfg_in.params);
  train::TrainConfig tc = cfg.train;
  tc.seed = seed;
  auto model = model::Model::build(backbone_for(cfg, channels, length), {}, derive_seed(seed, "run/model"));
  if (cfg.method == "offline") return train::run_offline(stream, model, tc, log);
  auto plugin = make_plugin(cfg, stream, channels, length, seed, artifact_dir);
  if (auto* gr = dynamic_cast<methods::GrPlugin*>(plugin.get())) gr->set_log(log);
  return train::run_stream(stream, model, *plugin, tc, log);
}

nlohmann::json TuneResult::to_json() const {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : records) recs.push_back({{"hyper", r.hyper}, {"scores", r.scores}, {"score", r.score}});
  return {{"best", best}, {"best_index", best_index}, {"records", recs}};
}

std::size_t select_best(const std::vector<double>& scores) {
  if (scores.empty()) throw ConfigError("empty hyperparameter grid");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

namespace {

TuneResult tune(const std::vector<Hyper>& points, const std::function<std::vector<double>(const Hyper&)>& score_fn,
                train::RunLog* log, const char* protocol) {
  if (points.empty()) throw ConfigError("empty hyperparameter grid");
  TuneResult result;
  std::vector<double> scores;
  for (const auto& h : points) {
    TuneRecord rec;
    rec.hyper = h;
    rec.scores = score_fn(h);
    rec.score = mean_of(rec.scores);
    scores.push_back(rec.score);
    if (log) log->event({{"event", "tune"}, {"protocol", protocol}, {"hyper", h}, {"score", rec.score}});
    result.records.push_back(std::move(rec));
  }
  result.best_index = select_best(scores);
  result.best = points[result.best_index];
  return result;
}

}  // namespace

TuneResult tune_protocol_a(const data::TaskStream& stream, const ExperimentConfig& cfg, std::size_t channels,
                           std::size_t length, train::RunLog* log) {
  if (stream.size() > 4) {
    throw ProtocolError("tuning protocol a needs a stream of at most 4 tasks, got " + std::to_string(stream.size()));
  }
  return tune(
      cfg.grid.points(),
      [&](const Hyper& h) {
        ExperimentConfig c = cfg;
        c.params.update(h);
        c.sample_sheets = false;
        const auto r = run_on_stream(c, stream, channels, length, derive_seed(stream.seed, "tune/a"));
        return std::vector<double>{mean_of(r.final_val_accuracy)};
      },
      log, "a");
}

TuneResult tune_protocol_b(const data::TaskStream& val_stream, const ExperimentConfig& cfg, std::size_t channels,
                           std::size_t length, train::RunLog* log) {
  return tune(
      cfg.grid.points(),
      [&](const Hyper& h) {
        ExperimentConfig c = cfg;
        c.params.update(h);
        c.sample_sheets = false;
        std::vector<double> scores;
        for (std::size_t r = 0; r < cfg.n_val_runs; ++r) {
          const auto res = run_on_stream(c, val_stream, channels, length,
                                         derive_seed(val_stream.seed, "tune/b/" + std::to_string(r)));
          scores.push_back(compute_metrics(res.matrix).A_T);
        }
        return scores;
      },
      log, "b");
}

bool ExperimentResult::all_ok() const {
  return std::all_of(seeds.begin(), seeds.end(), [](const SeedOutcome& s) { return s.ok; });
}

std::vector<std::uint64_t> experiment_seeds(const ExperimentConfig& cfg) {
  std::vector<std::uint64_t> out;
  for (int i = 0; i < cfg.seeds; ++i) out.push_back(cfg.base_seed + static_cast<std::uint64_t>(i));
  return out;
}

void run_pool(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& job) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> threads;
    for (std::size_t w = 0; w < workers; ++w) {
      threads.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            job(i);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
          }
        }
      });
    }
  }
  if (first_error) std::rethrow_exception(first_error);
}

namespace {

struct Streams {
  data::TaskStream experiment;
  std::optional<data::TaskStream> validation;
};

Streams streams_for(const ExperimentConfig& cfg, const data::RawDataset& ds, std::uint64_t seed) {
  auto full = data::make_task_stream(ds, cfg.classes_per_task, seed, cfg.val_fraction);
  if (cfg.protocol != Protocol::b) return {std::move(full), std::nullopt};
  auto [val, exp] = data::split_validation_stream(full, cfg.val_tasks);
  return {std::move(exp), std::move(val)};
}

std::optional<TuneResult> tune_for(const ExperimentConfig& cfg, const Streams& s, const data::RawDataset& ds,
                                   train::RunLog* log) {
  switch (cfg.protocol) {
    case Protocol::none: return std::nullopt;
    case Protocol::a: return tune_protocol_a(s.experiment, cfg, ds.channels, ds.length, log);
    case Protocol::b: return tune_protocol_b(*s.validation, cfg, ds.channels, ds.length, log);
  }
  return std::nullopt;
}

std::filesystem::path method_dir(const ExperimentConfig& cfg) {
  return cfg.output / data::canonical_dataset_id(cfg.dataset) / cfg.method;
}

}  // namespace

std::vector<TuneResult> run_tuning(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.protocol == Protocol::none) throw ConfigError("tuning needs protocol a or b");
  const auto ds = load_for(cfg);
  const auto seeds = experiment_seeds(cfg);
  std::vector<TuneResult> out(seeds.size());
  const auto dir = method_dir(cfg);
  run_pool(seeds.size(), cfg.workers, [&](std::size_t i) {
    const auto seed_dir = dir / seed_name(seeds[i]);
    std::filesystem::create_directories(seed_dir);
    std::filesystem::remove(seed_dir / "tune_log.jsonl");
    train::RunLog log(seed_dir / "tune_log.jsonl");
    out[i] = *tune_for(cfg, streams_for(cfg, ds, seeds[i]), ds, &log);
    write_text_atomic(seed_dir / "tuning.json", out[i].to_json().dump(2) + "\n");
  });
  return out;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto ds = load_for(cfg);
  ExperimentResult result;
  result.dir = method_dir(cfg);
  std::filesystem::create_directories(result.dir);
  const auto seeds = experiment_seeds(cfg);
  result.seeds.resize(seeds.size());
  spdlog::info("{} on {}: {} seed(s), protocol {}", cfg.method, ds.name, seeds.size(), to_string(cfg.protocol));

  run_pool(seeds.size(), cfg.workers, [&](std::size_t i) {
    SeedOutcome& out = result.seeds[i];
    out.seed = seeds[i];
    out.dir = result.dir / seed_name(seeds[i]);
    std::filesystem::create_directories(out.dir);
    std::filesystem::remove(out.dir / "train_log.jsonl");
    try {
      train::RunLog log(out.dir / "train_log.jsonl");
      const auto streams = streams_for(cfg, ds, out.seed);
      ExperimentConfig run_cfg = cfg;
      out.tuning = tune_for(cfg, streams, ds, &log);
      if (out.tuning) run_cfg.params.update(out.tuning->best);
      write_text_atomic(out.dir / "config.yaml", run_cfg.to_yaml());
      const auto r = run_on_stream(run_cfg, streams.experiment, ds.channels, ds.length, out.seed, &log, out.dir);
      out.matrix = r.matrix;
      out.metrics = compute_metrics(r.matrix);
      out.ok = true;
      write_text_atomic(out.dir / "accuracy_matrix.csv", r.matrix.to_csv());
      nlohmann::json j = {{"status", "ok"},
                          {"seed", out.seed},
                          {"metrics", out.metrics->to_json()},
                          {"class_order", streams.experiment.class_order},
                          {"final_val_accuracy", r.final_val_accuracy}};
      if (out.tuning) j["tuning"] = out.tuning->to_json();
      write_text_atomic(out.dir / "metrics.json", j.dump(2) + "\n");
      spdlog::info("{} seed {}: A_T = {:.4f}", cfg.method, out.seed, out.metrics->A_T);
    } catch (const ConfigError&) {
      throw;
    } catch (const ProtocolError&) {
      throw;
    } catch (const std::exception& e) {
      out.error = e.what();
      spdlog::error("{} seed {} failed: {}", cfg.method, out.seed, out.error);
      write_text_atomic(out.dir / "metrics.json",
                        nlohmann::json{{"status", "failed"}, {"seed", out.seed}, {"error", out.error}}.dump(2) + "\n");
    }
  });

  std::vector<RunMetrics> ok;
  nlohmann::json seed_status = nlohmann::json::array();
  for (const auto& s : result.seeds) {
    if (s.ok) ok.push_back(*s.metrics);
    seed_status.push_back({{"seed", s.seed}, {"status", s.ok ? "ok" : "failed"}, {"error", s.error}});
  }
  const std::size_t failures = result.seeds.size() - ok.size();
  if (failures > 0) {
    spdlog::warn("{} of {} runs failed; the aggregate covers the {} successful run(s)", failures,
                 result.seeds.size(), ok.size());
  }
  result.report = ok.empty() ? MetricsReport{} : aggregate(ok, failures);
  result.report.failures = failures;
  nlohmann::json report = {{"dataset", data::canonical_dataset_id(cfg.dataset)},
                           {"method", cfg.method},
                           {"classifier", model::to_string(cfg.classifier)},
                           {"internal_norm", model::to_string(cfg.internal_norm)},
                           {"memory_budget", cfg.memory_budget},
                           {"protocol", to_string(cfg.protocol)},
                           {"interval", "95% Student-t over seeds"},
                           {"seeds", seed_status},
                           {"metrics", result.report.to_json()}};
  if (cfg.protocol == Protocol::a) {
    report["tuning_score"] = "mean of per-task final validation accuracies";
  } else if (cfg.protocol == Protocol::b) {
    report["tuning_score"] = "mean final average accuracy over validation-stream runs";
  }
  write_text_atomic(result.dir / "report.json", report.dump(2) + "\n");
  write_text_atomic(result.dir / "environment.json", environment_manifest().dump(2) + "\n");
  write_text_atomic(result.dir / "config.yaml", cfg.to_yaml());
  if (!ok.empty()) {
    write_curve_plot(result.dir / "accuracy_curve.svg", cfg.method + " on " + ds.name,
                     {{cfg.method, result.report.A_curve}});
  }
  return result;
}

AblationKind parse_ablation(const std::string& s) {
  if (s == "memory_budget" || s == "memory") return AblationKind::memory_budget;
  if (s == "classifier") return AblationKind::classifier;
  if (s == "normalization" || s == "normalisation") return AblationKind::normalization;
  throw ConfigError("unknown ablation '" + s + "' (memory_budget, classifier, normalization)");
}

std::string to_string(AblationKind k) {
  switch (k) {
    case AblationKind::memory_budget: return "memory_budget";
    case AblationKind::classifier: return "classifier";
    case AblationKind::normalization: return "normalization";
  }
  return "?";
}

std::vector<AblationPoint> ablation_sweep(AblationKind kind, const ExperimentConfig& base) {
  base.validate();
  std::vector<std::pair<std::string, ExperimentConfig>> variants;
  const auto root = base.output / ("ablation_" + to_string(kind));
  switch (kind) {
    case AblationKind::memory_budget:
      if (!methods::is_replay_kind(base.method)) {
        throw ConfigError("memory_budget sweep needs a memory-based method, not '" + base.method + "'");
      }
      for (double b : {0.01, 0.05, 0.1, 0.2, 1.0}) {
        ExperimentConfig c = base;
        c.memory_budget = b;
        variants.emplace_back(fmt(b, 2), c);
      }
      break;
    case AblationKind::classifier:
      for (auto h : {model::HeadKind::softmax_ce, model::HeadKind::sigmoid_bce, model::HeadKind::split_cosine,
                     model::HeadKind::ncm}) {
        ExperimentConfig c = base;
        c.classifier = h;
        variants.emplace_back(model::to_string(h), c);
      }
      break;
    case AblationKind::normalization:
      for (auto n : {model::InternalNorm::batch, model::InternalNorm::layer}) {
        ExperimentConfig c = base;
        c.internal_norm = n;
        variants.emplace_back(model::to_string(n), c);
      }
      break;
  }
  for (auto& [value, c] : variants) {
    c.output = root / value;
    c.validate();
  }
  std::vector<AblationPoint> points;
  for (const auto& [value, c] : variants) points.push_back({value, run_experiment(c)});

  nlohmann::json combined = nlohmann::json::array();
  Series series;
  series.label = base.method;
  std::ostringstream md;
  md << "| " << to_string(kind) << " | A_T | F_T | A_cur | runs | failed |\n|---|---|---|---|---|---|\n";
  auto cell = [](const std::optional<Summary>& s) {
    if (!s) return std::string("-");
    return fmt(s->mean) + (s->ci95 ? " ± " + fmt(*s->ci95) : "");
  };
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& r = points[i].result.report;
    combined.push_back({{"value", points[i].value}, {"metrics", r.to_json()}});
    md << "| " << points[i].value << " | " << cell(r.A_T) << " | " << cell(r.F_T) << " | " << cell(r.A_cur) << " | "
       << r.runs << " | " << r.failures << " |\n";
    if (r.A_T) {
      series.x.push_back(kind == AblationKind::memory_budget ? std::stod(points[i].value) * 100.0
                                                             : static_cast<double>(i + 1));
      series.y.push_back(r.A_T->mean);
      series.err.push_back(r.A_T->ci95.value_or(0.0));
    }
  }
  std::filesystem::create_directories(root);
  write_text_atomic(root / "ablation_report.json",
                    nlohmann::json{{"kind", to_string(kind)}, {"method", base.method}, {"points", combined}}.dump(2) +
                        "\n");
  write_text_atomic(root / "ablation_report.md", md.str());
  LineChart chart;
  chart.title = base.method + ": A_T vs " + to_string(kind);
  chart.y_label = "A_T";
  if (kind == AblationKind::memory_budget) {
    chart.x_label = "memory budget (% of training data)";
    chart.log_x = true;
  } else {
    std::string legend;
    for (std::size_t i = 0; i < points.size(); ++i) {
      legend += (i ? ", " : "") + std::to_string(i + 1) + " = " + points[i].value;
    }
    chart.x_label = legend;
  }
  chart.series.push_back(std::move(series));
  write_svg(root / ("ablation_" + to_string(kind) + ".svg"), render_svg(chart));
  return points;
}

std::string write_report(const std::filesystem::path& out, ReportFormat format, bool plots) {
  if (!std::filesystem::exists(out)) throw ConfigError("no results directory " + out.string());
  struct Row {
    std::string variant;
    nlohmann::json report;
  };
  std::vector<Row> rows;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(out)) {
    if (entry.path().filename() != "report.json") continue;
    std::ifstream in(entry.path());
    Row r;
    r.report = nlohmann::json::parse(in);
    r.variant = std::filesystem::relative(entry.path().parent_path(), out).generic_string();
    rows.push_back(std::move(r));
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.variant < b.variant; });

  auto cell = [&](const nlohmann::json& m, const char* key) -> std::string {
    if (!m.contains(key) || m.at(key).is_null()) return format == ReportFormat::csv ? "," : "-";
    const auto& s = m.at(key);
    const std::string mean = fmt(s.at("mean").get<double>());
    const std::string ci = s.contains("ci95") && !s.at("ci95").is_null() ? fmt(s.at("ci95").get<double>()) : "";
    if (format == ReportFormat::csv) return mean + "," + ci;
    return ci.empty() ? mean : mean + " ± " + ci;
  };
  std::ostringstream table;
  if (format == ReportFormat::md) {
    table << "| run | dataset | method | A_T | F_T | A_cur | runs | failed |\n|---|---|---|---|---|---|---|---|\n";
  } else {
    table << "run,dataset,method,A_T,A_T_ci95,F_T,F_T_ci95,A_cur,A_cur_ci95,runs,failed\n";
  }
  for (const auto& r : rows) {
    const auto& m = r.report.at("metrics");
    const auto runs = m.value("runs", 0), failed = m.value("failures", 0);
    const auto dataset = r.report.value("dataset", ""), method = r.report.value("method", "");
    if (format == ReportFormat::md) {
      table << "| " << r.variant << " | " << dataset << " | " << method << " | " << cell(m, "A_T") << " | "
            << cell(m, "F_T") << " | " << cell(m, "A_cur") << " | " << runs << " | " << failed << " |\n";
    } else {
      table << r.variant << "," << dataset << "," << method << "," << cell(m, "A_T") << "," << cell(m, "F_T") << ","
            << cell(m, "A_cur") << "," << runs << "," << failed << "\n";
    }
  }
  if (format == ReportFormat::md) table << "\nIntervals are 95% Student-t half-widths over seeds.\n";
  write_text_atomic(out / (format == ReportFormat::md ? "report.md" : "report.csv"), table.str());

  if (plots) {
    std::map<std::string, std::vector<std::pair<std::string, std::vector<Summary>>>> by_dataset;
    for (const auto& r : rows) {
      auto curve = curve_from_json(r.report.at("metrics"));
      if (!curve.empty()) by_dataset[r.report.value("dataset", "unknown")].emplace_back(r.variant, std::move(curve));
    }
    std::filesystem::create_directories(out / "plots");
    for (const auto& [dataset, curves] : by_dataset) {
      write_curve_plot(out / "plots" / (dataset + "_accuracy_curves.svg"), "Average accuracy on " + dataset, curves);
    }
  }
  return table.str();
}

}  // namespace tscil::eval
