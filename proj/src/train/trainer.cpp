#include "tscil/train/trainer.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "tscil/core/errors.hpp"
#include "tscil/core/optim.hpp"

namespace tscil::train {

Scheduler parse_scheduler(const std::string& s) {
  if (s == "step10") return Scheduler::step10;
  if (s == "step15") return Scheduler::step15;
  if (s == "one_cycle" || s == "onecycle") return Scheduler::one_cycle;
  throw ConfigError("unknown scheduler '" + s + "' (step10, step15, one_cycle)");
}

std::string to_string(Scheduler s) {
  switch (s) {
    case Scheduler::step10: return "step10";
    case Scheduler::step15: return "step15";
    case Scheduler::one_cycle: return "one_cycle";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
  if (patience && *patience < 1) throw ConfigError("patience must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j = {{"epochs", epochs},
                      {"learning_rate", learning_rate},
                      {"batch_size", batch_size},
                      {"scheduler", to_string(scheduler)},
                      {"seed", seed}};
  j["patience"] = patience ? nlohmann::json(*patience) : nlohmann::json(nullptr);
  return j;
}

std::function<double(int)> make_scheduler(Scheduler kind, double base_lr, int epochs) {
  switch (kind) {
    case Scheduler::step10:
    case Scheduler::step15: {
      const int step = kind == Scheduler::step10 ? 10 : 15;
      return [=](int epoch) { return base_lr * std::pow(0.1, (std::max(epoch, 1) - 1) / step); };
    }
    case Scheduler::one_cycle: {
      const double initial = base_lr / 25.0, final_lr = initial / 1e4, warm = 0.3;
      return [=](int epoch) {
        const double pct = epochs > 1 ? static_cast<double>(std::max(epoch, 1) - 1) / (epochs - 1) : 0.0;
        if (pct <= warm) {
          return initial + (base_lr - initial) * (1.0 - std::cos(std::numbers::pi * pct / warm)) / 2.0;
        }
        const double p = (pct - warm) / (1.0 - warm);
        return final_lr + (base_lr - final_lr) * (1.0 + std::cos(std::numbers::pi * p)) / 2.0;
      };
    }
  }
  throw ConfigError("unknown scheduler");
}

RunLog::RunLog(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_ = std::make_unique<std::ofstream>(path, std::ios::app);
  if (!*out_) throw std::runtime_error("cannot open log " + path.string());
}

void RunLog::event(nlohmann::json record) {
  std::lock_guard lock(mutex_);
  if (out_) *out_ << record.dump() << "\n" << std::flush;
  records_.push_back(std::move(record));
}

EarlyStopper::EarlyStopper(int patience)
    : patience_(patience), best_val_loss_(std::numeric_limits<double>::infinity()) {
  if (patience < 1) throw ConfigError("patience must be >= 1");
}

bool EarlyStopper::update(double val_loss, const model::Model& model, int epoch) {
  if (val_loss < best_val_loss_ || !best_snapshot_) {
    best_val_loss_ = val_loss;
    best_epoch_ = epoch;
    epochs_since_best_ = 0;
    best_snapshot_ = model.clone();
    return false;
  }
  ++epochs_since_best_;
  return epochs_since_best_ >= patience_;
}

void EarlyStopper::restore(model::Model& model) const {
  if (best_snapshot_) model.assign_from(*best_snapshot_);
}

namespace {

Tensor gather_inputs(const std::vector<data::SamplePtr>& samples, std::size_t begin, std::size_t end) {
  return data::to_batch(std::span<const data::SamplePtr>(samples.data() + begin, end - begin));
}

std::vector<int> labels_of(const std::vector<data::SamplePtr>& samples, std::size_t begin, std::size_t end) {
  std::vector<int> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(samples[i]->label);
  return out;
}

}  // namespace

double evaluate_loss(model::Model& model, const std::vector<data::SamplePtr>& samples, std::size_t chunk) {
  if (samples.empty()) return 0.0;
  ag::NoGradGuard guard;
  double total = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const std::size_t end = std::min(samples.size(), start + chunk);
    const auto out = model.forward(gather_inputs(samples, start, end), false);
    const auto labels = labels_of(samples, start, end);
    const auto targets = model.targets(labels);
    total += model.training_loss(out, targets)->value[0] * static_cast<double>(end - start);
  }
  return total / static_cast<double>(samples.size());
}

double evaluate_accuracy(model::Model& model, const std::vector<data::SamplePtr>& samples, std::size_t chunk) {
  if (samples.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const std::size_t end = std::min(samples.size(), start + chunk);
    const auto pred = model.predict(gather_inputs(samples, start, end), chunk);
    for (std::size_t i = start; i < end; ++i) correct += pred[i - start] == samples[i]->label;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

TaskResult train_task(model::Model& model, const data::Task& task, MethodPlugin& plugin,
                      const TrainConfig& cfg, RunLog* log) {
  cfg.validate();
  for (int c : task.class_set) model.class_index(c);  // head must already cover the task
  if (task.train.empty()) throw ContractError("task " + std::to_string(task.index) + " has no training data");

  TaskResult result;
  result.task = task.index;
  Adam optimizer(model.parameters(), cfg.learning_rate);
  const auto lr_at = make_scheduler(cfg.scheduler, cfg.learning_rate, cfg.epochs);
  EarlyStopper stopper(cfg.patience.value_or(plugin.default_patience()));
  Rng order_rng(cfg.seed, "trainer/order/" + std::to_string(task.index));
  const std::size_t slots = std::min(plugin.replay_slots(cfg.batch_size), cfg.batch_size - 1);
  const std::size_t n_new = cfg.batch_size - slots;

  std::vector<std::size_t> order(task.train.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch);
    optimizer.set_lr(lr);
    std::iota(order.begin(), order.end(), std::size_t{0});
    order_rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += n_new) {
      StepBatch batch;
      const std::size_t end = std::min(order.size(), start + n_new);
      for (std::size_t i = start; i < end; ++i) {
        batch.new_indices.push_back(order[i]);
        batch.samples.push_back(task.train[order[i]]);
      }
      batch.n_new = batch.samples.size();
      plugin.augment_batch(model, task, batch);

      const Tensor x = data::to_batch(batch.samples);
      std::vector<int> labels;
      for (const auto& s : batch.samples) labels.push_back(s->label);
      const auto targets = model.targets(labels);
      const auto out = model.forward(x, true);
      std::vector<double> per_sample;
      ag::Var loss = model.training_loss(out, targets, &per_sample);
      StepContext ctx{model, task, batch, x, out, per_sample, epoch};
      if (ag::Var extra = plugin.augment_loss(ctx)) loss = ag::add(loss, extra);

      const double value = loss->value[0];
      if (!std::isfinite(value)) {
        std::ostringstream msg;
        msg << "non-finite loss in method " << plugin.name() << " at task " << task.index << ", epoch " << epoch
            << ", step " << steps << " (lr " << lr << ")";
        if (log) log->event({{"event", "diverged"}, {"task", task.index}, {"epoch", epoch}, {"lr", lr}});
        throw TrainingError(msg.str());
      }
      optimizer.zero_grad();
      ag::backward(loss);
      optimizer.step();
      result.step_losses.push_back(value);
      epoch_loss += value;
      ++steps;
    }
    const double val_loss =
        task.val.empty() ? epoch_loss / static_cast<double>(steps) : evaluate_loss(model, task.val, cfg.eval_chunk);
    const bool stop = stopper.update(val_loss, model, epoch);
    result.epochs_run = epoch;
    if (log) {
      log->event({{"event", "epoch"},
                  {"method", plugin.name()},
                  {"task", task.index},
                  {"epoch", epoch},
                  {"train_loss", epoch_loss / static_cast<double>(steps)},
                  {"val_loss", val_loss},
                  {"lr", lr}});
    }
    if (stop) {
      result.early_stopped = true;
      if (log) {
        log->event({{"event", "early_stop"}, {"task", task.index}, {"epoch", epoch},
                    {"best_epoch", stopper.best_epoch()}, {"best_val_loss", stopper.best_val_loss()}});
      }
      break;
    }
  }
  stopper.restore(model);
  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best_val_loss();
  plugin.end_task(model, task, cfg);
  return result;
}

StreamResult run_stream(const data::TaskStream& stream, model::Model& model, MethodPlugin& plugin,
                        const TrainConfig& cfg, RunLog* log) {
  StreamResult result;
  result.matrix = eval::AccuracyMatrix(stream.size());
  for (std::size_t t = 0; t < stream.size(); ++t) {
    const auto& task = stream.tasks[t];
    model.expand_head(task.class_set);
    result.tasks.push_back(train_task(model, task, plugin, cfg, log));
    for (std::size_t j = 0; j <= t; ++j) {
      result.matrix.set(t, j, evaluate_accuracy(model, stream.tasks[j].test, cfg.eval_chunk));
    }
    if (log) log->event({{"event", "evaluate"}, {"task", t}, {"row", result.matrix.row(t)}});
  }
  for (const auto& task : stream.tasks) {
    result.final_val_accuracy.push_back(evaluate_accuracy(model, task.val, cfg.eval_chunk));
  }
  return result;
}

StreamResult run_offline(const data::TaskStream& stream, model::Model& model, const TrainConfig& cfg,
                         RunLog* log) {
  data::Task joint;
  for (const auto& task : stream.tasks) {
    joint.class_set.insert(joint.class_set.end(), task.class_set.begin(), task.class_set.end());
    joint.train.insert(joint.train.end(), task.train.begin(), task.train.end());
    joint.val.insert(joint.val.end(), task.val.begin(), task.val.end());
    joint.test.insert(joint.test.end(), task.test.begin(), task.test.end());
  }
  model.expand_head(joint.class_set);
  NaivePlugin naive;
  StreamResult result;
  result.tasks.push_back(train_task(model, joint, naive, cfg, log));
  std::vector<double> row;
  for (const auto& task : stream.tasks) row.push_back(evaluate_accuracy(model, task.test, cfg.eval_chunk));
  result.matrix = eval::AccuracyMatrix::joint(row);
  for (const auto& task : stream.tasks) {
    result.final_val_accuracy.push_back(evaluate_accuracy(model, task.val, cfg.eval_chunk));
  }
  if (log) log->event({{"event", "evaluate"}, {"task", stream.size() - 1}, {"row", row}, {"joint", true}});
  return result;
}

}  // namespace tscil::train
