#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tscil/data/stream.hpp"
#include "tscil/eval/config.hpp"
#include "tscil/eval/metrics.hpp"
#include "tscil/train/trainer.hpp"

namespace tscil::eval {

/// Backbone for the dataset shape with the config's normalisation,
/// classifier and width overrides.
model::BackboneConfig backbone_for(const ExperimentConfig& cfg, std::size_t channels, std::size_t length);

/// Builds the method plugin; `nullptr` for offline (joint training).
std::unique_ptr<train::MethodPlugin> make_plugin(const ExperimentConfig& cfg, const data::TaskStream& stream,
                                                 std::size_t channels, std::size_t length, std::uint64_t seed,
                                                 const std::optional<std::filesystem::path>& artifact_dir = {});

/// One stream run with a freshly initialised model.
train::StreamResult run_on_stream(const ExperimentConfig& cfg, const data::TaskStream& stream, std::size_t channels,
                                  std::size_t length, std::uint64_t seed, train::RunLog* log = nullptr,
                                  const std::optional<std::filesystem::path>& artifact_dir = {});

struct TuneRecord {
  Hyper hyper;
  std::vector<double> scores;  // one per validation run
  double score = 0.0;
};

struct TuneResult {
  Hyper best;
  std::size_t best_index = 0;
  std::vector<TuneRecord> records;

  nlohmann::json to_json() const;
};

/// Index of the highest score; ties go to the earliest.
std::size_t select_best(const std::vector<double>& scores);

/// Grid search on the experiment stream itself, scored by the mean final
/// validation accuracy across all tasks. Streams of at most 4 tasks only.
TuneResult tune_protocol_a(const data::TaskStream& stream, const ExperimentConfig& cfg, std::size_t channels,
                           std::size_t length, train::RunLog* log = nullptr);

/// Grid search on a held-out validation stream, scored by the mean final
/// average accuracy over `cfg.n_val_runs` seeded runs.
TuneResult tune_protocol_b(const data::TaskStream& val_stream, const ExperimentConfig& cfg, std::size_t channels,
                           std::size_t length, train::RunLog* log = nullptr);

struct SeedOutcome {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::optional<RunMetrics> metrics;
  std::optional<AccuracyMatrix> matrix;
  std::optional<TuneResult> tuning;
  std::filesystem::path dir;
};

struct ExperimentResult {
  MetricsReport report;
  std::vector<SeedOutcome> seeds;
  std::filesystem::path dir;  // <out>/<dataset>/<method>

  bool all_ok() const;
};

/// Seeds used for a config: base_seed, base_seed + 1, ...
std::vector<std::uint64_t> experiment_seeds(const ExperimentConfig& cfg);

/// Per seed: a new class order, tuning per protocol, the experiment-stream
/// run and its artefacts; then the aggregate report. Failed seeds are
/// recorded with their error and excluded from the aggregate.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

/// Only the tuning stage, for every seed; returns the per-seed results.
std::vector<TuneResult> run_tuning(const ExperimentConfig& cfg);

enum class AblationKind { memory_budget, classifier, normalization };
AblationKind parse_ablation(const std::string& s);
std::string to_string(AblationKind k);

struct AblationPoint {
  std::string value;
  ExperimentResult result;
};

/// Runs the base config once per swept value and writes a combined report
/// and an A_T-versus-value plot under <out>/ablation_<kind>/.
std::vector<AblationPoint> ablation_sweep(AblationKind kind, const ExperimentConfig& base);

/// Runs `n` jobs on up to `workers` threads.
void run_pool(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& job);

enum class ReportFormat { md, csv };

/// Collects every report.json under `out` into a table; with `plots`,
/// also writes one A_i curve plot per dataset. Returns the table text.
std::string write_report(const std::filesystem::path& out, ReportFormat format, bool plots);

}  // namespace tscil::eval
