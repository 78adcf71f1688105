#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tscil/data/loaders.hpp"
#include "tscil/methods/generative.hpp"
#include "tscil/model/backbone.hpp"
#include "tscil/train/trainer.hpp"

namespace tscil::eval {

enum class Protocol { none, a, b };
Protocol parse_protocol(const std::string& s);
std::string to_string(Protocol p);

/// One hyperparameter assignment, e.g. {"lambda": 1.0, "scheduler": "step10"}.
using Hyper = nlohmann::json;

/// Ordered axes; the cartesian product enumerates the first axis slowest.
struct Grid {
  std::vector<std::pair<std::string, std::vector<nlohmann::json>>> axes;

  bool empty() const { return axes.empty(); }
  std::vector<Hyper> points() const;
};

struct ExperimentConfig {
  std::string dataset = "synthetic";
  std::filesystem::path data_root = "data";
  std::optional<std::filesystem::path> cache_dir;
  std::string method = "er";

  std::optional<model::InputNorm> input_norm;  // unset: per-dataset default
  model::InternalNorm internal_norm = model::InternalNorm::layer;
  model::HeadKind classifier = model::HeadKind::softmax_ce;
  std::optional<double> dropout;               // unset: per-dataset default
  std::vector<std::size_t> filters{32, 64, 128, 256};

  double memory_budget = 0.05;  // fraction of the stream's training data
  Protocol protocol = Protocol::none;
  Grid grid;
  Hyper params = nlohmann::json::object();
  std::size_t n_val_runs = 2;
  std::size_t val_tasks = 3;

  int seeds = 5;
  std::uint64_t base_seed = 0;
  std::filesystem::path output = "results";
  std::size_t workers = 1;

  int classes_per_task = 2;
  double val_fraction = 0.1;
  train::TrainConfig train;
  methods::VaeConfig generator;
  data::SyntheticConfig synthetic;
  bool sample_sheets = true;

  /// Throws ConfigError for unknown method names, hyperparameters the
  /// method does not take, or combinations that cannot run.
  void validate() const;
  std::string to_yaml() const;
  static ExperimentConfig from_yaml(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
};

/// All method names accepted by the harness.
const std::vector<std::string>& method_names();
/// Hyperparameter keys a method accepts in `params` or `grid`.
std::vector<std::string> hyper_keys(const std::string& method);

/// Copy of `cfg` with the assignment applied to its training or method fields.
ExperimentConfig apply_hyper(ExperimentConfig cfg, const Hyper& hyper);

}  // namespace tscil::eval
