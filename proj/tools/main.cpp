// Command-line front end: run, tune, ablate, report, datasets.
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "tscil/core/errors.hpp"
#include "tscil/data/loaders.hpp"
#include "tscil/eval/experiment.hpp"

namespace {

enum Exit { kOk = 0, kRunFailure = 1, kConfigError = 2 };

struct Overrides {
  std::optional<int> seeds;
  std::optional<std::string> out;
  std::optional<std::string> data_root;
  std::optional<std::size_t> workers;
  std::optional<int> epochs;
};

tscil::eval::ExperimentConfig load_config(const std::string& path, const Overrides& o) {
  auto cfg = tscil::eval::ExperimentConfig::load(path);
  if (o.seeds) cfg.seeds = *o.seeds;
  if (o.out) cfg.output = *o.out;
  if (o.data_root) cfg.data_root = *o.data_root;
  if (o.workers) cfg.workers = *o.workers;
  if (o.epochs) cfg.train.epochs = *o.epochs;
  cfg.validate();
  return cfg;
}

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seeds", o.seeds, "Number of seeds");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--data-root", o.data_root, "Dataset root directory");
  cmd->add_option("--workers", o.workers, "Parallel runs");
  cmd->add_option("--epochs", o.epochs, "Epochs per task");
}

void print_report(const tscil::eval::ExperimentResult& r) {
  const auto& m = r.report;
  auto show = [](const char* name, const std::optional<tscil::eval::Summary>& s) {
    if (!s) {
      std::cout << "  " << name << ": -\n";
      return;
    }
    std::cout << "  " << name << ": " << s->mean;
    if (s->ci95) std::cout << " ± " << *s->ci95;
    std::cout << "\n";
  };
  std::cout << r.dir.string() << " (" << m.runs << " ok, " << m.failures << " failed)\n";
  show("A_T", m.A_T);
  show("F_T", m.F_T);
  show("A_cur", m.A_cur);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-incremental learning for time series: experiments, tuning, ablations and reports"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  std::string config_path;
  Overrides overrides;

  auto* run = app.add_subcommand("run", "Run an experiment over all seeds");
  run->add_option("--config", config_path, "Experiment config (YAML)")->required()->check(CLI::ExistingFile);
  add_overrides(run, overrides);

  std::string protocol;
  auto* tune = app.add_subcommand("tune", "Hyperparameter search only");
  tune->add_option("--config", config_path, "Experiment config (YAML)")->required()->check(CLI::ExistingFile);
  tune->add_option("--protocol", protocol, "Tuning protocol")->required()->check(CLI::IsMember({"a", "b"}));
  add_overrides(tune, overrides);

  std::string kind;
  auto* ablate = app.add_subcommand("ablate", "Sweep one axis of the config");
  ablate->add_option("--kind", kind, "Swept axis")
      ->required()
      ->check(CLI::IsMember({"memory_budget", "classifier", "normalization"}));
  ablate->add_option("--config", config_path, "Base experiment config (YAML)")->required()->check(CLI::ExistingFile);
  add_overrides(ablate, overrides);

  std::string report_out, format = "md";
  bool plots = false;
  auto* report = app.add_subcommand("report", "Tabulate every report.json under a results directory");
  report->add_option("--out", report_out, "Results directory")->required();
  report->add_option("--format", format, "Table format")->check(CLI::IsMember({"md", "csv"}));
  report->add_flag("--plots", plots, "Also write accuracy-curve plots");

  auto* datasets = app.add_subcommand("datasets", "List or prepare datasets");
  datasets->require_subcommand(1);
  auto* list = datasets->add_subcommand("list", "Known datasets and their expected layout");
  std::string ds_name, ds_root, ds_cache;
  auto* prepare = datasets->add_subcommand("prepare", "Load, validate and cache a dataset");
  prepare->add_option("name", ds_name, "Dataset name")->required();
  prepare->add_option("--root", ds_root, "Dataset root directory")->required();
  prepare->add_option("--cache", ds_cache, "Cache directory (default: <root>/.tscil-cache)");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (*run) {
      const auto result = tscil::eval::run_experiment(load_config(config_path, overrides));
      print_report(result);
      return result.all_ok() ? kOk : kRunFailure;
    }
    if (*tune) {
      auto cfg = load_config(config_path, overrides);
      cfg.protocol = tscil::eval::parse_protocol(protocol);
      cfg.validate();
      const auto seeds = tscil::eval::experiment_seeds(cfg);
      const auto results = tscil::eval::run_tuning(cfg);
      for (std::size_t i = 0; i < results.size(); ++i) {
        std::cout << "seed " << seeds[i] << ": best " << results[i].best.dump() << " (score "
                  << results[i].records[results[i].best_index].score << ")\n";
      }
      return kOk;
    }
    if (*ablate) {
      const auto points =
          tscil::eval::ablation_sweep(tscil::eval::parse_ablation(kind), load_config(config_path, overrides));
      bool ok = true;
      for (const auto& p : points) {
        std::cout << "[" << p.value << "] ";
        print_report(p.result);
        ok = ok && p.result.all_ok();
      }
      return ok ? kOk : kRunFailure;
    }
    if (*report) {
      std::cout << tscil::eval::write_report(report_out, format == "csv" ? tscil::eval::ReportFormat::csv
                                                                          : tscil::eval::ReportFormat::md,
                                             plots);
      return kOk;
    }
    if (*list) {
      for (const auto& d : tscil::data::known_datasets()) {
        std::cout << d.id << "  (" << d.display_name << ")  C=" << d.channels << " L=" << d.length
                  << " train=" << d.train_size << " test=" << d.test_size << " classes=" << d.classes
                  << " tasks=" << d.experiment_tasks << "\n    layout: " << d.layout << "\n";
      }
      std::cout << "synthetic  (generated in memory, no files needed)\n";
      return kOk;
    }
    if (*prepare) {
      tscil::data::LoadOptions opts;
      opts.cache_dir = ds_cache.empty() ? std::filesystem::path(ds_root) / ".tscil-cache"
                                        : std::filesystem::path(ds_cache);
      const auto ds = tscil::data::load_dataset(ds_name, ds_root, opts);
      std::cout << ds.name << ": " << ds.count(tscil::data::Split::train) << " train / "
                << ds.count(tscil::data::Split::test) << " test samples, C=" << ds.channels << " L=" << ds.length
                << ", cached under " << opts.cache_dir->string() << " (hash "
                << tscil::data::preprocessing_hash(tscil::data::canonical_dataset_id(ds_name), opts) << ")\n";
      return kOk;
    }
  } catch (const tscil::ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kConfigError;
  } catch (const tscil::ProtocolError& e) {
    spdlog::error("config error: {}", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kRunFailure;
  }
  return kOk;
}
