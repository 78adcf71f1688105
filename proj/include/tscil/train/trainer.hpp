#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tscil/data/stream.hpp"
#include "tscil/eval/metrics.hpp"
#include "tscil/model/backbone.hpp"

namespace tscil::train {

enum class Scheduler { step10, step15, one_cycle };
Scheduler parse_scheduler(const std::string& s);
std::string to_string(Scheduler s);

struct TrainConfig {
  int epochs = 100;
  double learning_rate = 1e-3;
  std::size_t batch_size = 64;
  Scheduler scheduler = Scheduler::step15;
  /// Unset means the method's default (20 for replay and GR, 5 otherwise).
  std::optional<int> patience;
  std::uint64_t seed = 0;
  /// Evaluation chunk size; no effect on results.
  std::size_t eval_chunk = 256;

  void validate() const;
  nlohmann::json to_json() const;
};

/// Learning rate for a 1-based epoch. step10/step15 multiply by 0.1 every
/// 10/15 epochs; one_cycle warms up for 30% of the budget from lr/25 to lr
/// and then cosine-anneals to lr/25/1e4.
std::function<double(int)> make_scheduler(Scheduler kind, double base_lr, int epochs);

/// Append-only JSON-lines log, safe to share between threads.
class RunLog {
 public:
  RunLog() = default;
  explicit RunLog(const std::filesystem::path& path);
  void event(nlohmann::json record);
  const std::vector<nlohmann::json>& records() const { return records_; }

 private:
  std::unique_ptr<std::ofstream> out_;
  std::vector<nlohmann::json> records_;
  std::mutex mutex_;
};

class EarlyStopper {
 public:
  explicit EarlyStopper(int patience);

  /// Records one epoch's validation loss; returns true when training should stop.
  bool update(double val_loss, const model::Model& model, int epoch);
  /// Copies the best snapshot's state into `model`.
  void restore(model::Model& model) const;

  int patience() const { return patience_; }
  double best_val_loss() const { return best_val_loss_; }
  int best_epoch() const { return best_epoch_; }
  int epochs_since_best() const { return epochs_since_best_; }
  bool has_snapshot() const { return best_snapshot_.has_value(); }

 private:
  int patience_;
  double best_val_loss_;
  int best_epoch_ = 0;
  int epochs_since_best_ = 0;
  std::optional<model::Model> best_snapshot_;
};

/// One optimisation step's samples. The first n_new entries come from the
/// current task (their positions in task.train are new_indices); plugins may
/// append replayed or generated samples after them.
struct StepBatch {
  std::vector<data::SamplePtr> samples;
  std::size_t n_new = 0;
  std::vector<std::size_t> new_indices;
  /// Plugin-defined handles for the appended samples (e.g. buffer slots).
  std::vector<std::size_t> replay_handles;
};

struct StepContext {
  model::Model& model;
  const data::Task& task;
  const StepBatch& batch;
  const Tensor& inputs;  // raw [N x C x L]
  const model::ForwardResult& output;
  const std::vector<double>& per_sample_loss;
  int epoch;
};

class MethodPlugin {
 public:
  virtual ~MethodPlugin() = default;
  virtual std::string name() const = 0;
  virtual int default_patience() const { return 5; }
  /// Number of batch slots reserved for replayed samples in the coming task.
  virtual std::size_t replay_slots(std::size_t /*batch_size*/) const { return 0; }

  virtual void augment_batch(model::Model& /*model*/, const data::Task& /*task*/, StepBatch& /*batch*/) {}
  /// Extra loss term added to the classification loss (nullptr for none).
  virtual ag::Var augment_loss(const StepContext& /*ctx*/) { return nullptr; }
  /// Runs once per task with the restored best parameters.
  virtual void end_task(model::Model& /*model*/, const data::Task& /*task*/, const TrainConfig& /*cfg*/) {}
};

class NaivePlugin : public MethodPlugin {
 public:
  std::string name() const override { return "naive"; }
};

struct TaskResult {
  std::size_t task = 0;
  int epochs_run = 0;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  bool early_stopped = false;
  std::vector<double> step_losses;
};

struct StreamResult {
  eval::AccuracyMatrix matrix;
  std::vector<TaskResult> tasks;
  /// Accuracy on each task's validation split after the final task.
  std::vector<double> final_val_accuracy;
};

TaskResult train_task(model::Model& model, const data::Task& task, MethodPlugin& plugin,
                      const TrainConfig& cfg, RunLog* log = nullptr);

/// Mean classification loss over samples in evaluation mode.
double evaluate_loss(model::Model& model, const std::vector<data::SamplePtr>& samples, std::size_t chunk = 256);
/// Top-1 accuracy over all known classes.
double evaluate_accuracy(model::Model& model, const std::vector<data::SamplePtr>& samples, std::size_t chunk = 256);

StreamResult run_stream(const data::TaskStream& stream, model::Model& model, MethodPlugin& plugin,
                        const TrainConfig& cfg, RunLog* log = nullptr);

/// Joint training on the union of all tasks; returns a single-row matrix.
StreamResult run_offline(const data::TaskStream& stream, model::Model& model, const TrainConfig& cfg,
                         RunLog* log = nullptr);

}  // namespace tscil::train
