#include "tscil/data/stream.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include <spdlog/spdlog.h>

#include "tscil/core/errors.hpp"
#include "tscil/core/rng.hpp"

namespace tscil::data {

bool Task::contains(int label) const {
  return std::find(class_set.begin(), class_set.end(), label) != class_set.end();
}

std::vector<int> TaskStream::classes() const {
  std::vector<int> out;
  for (const auto& t : tasks) out.insert(out.end(), t.class_set.begin(), t.class_set.end());
  return out;
}

std::size_t TaskStream::train_size() const {
  std::size_t n = 0;
  for (const auto& t : tasks) n += t.train.size();
  return n;
}

TaskStream make_task_stream(const RawDataset& dataset, int classes_per_task, std::uint64_t seed,
                            double val_fraction) {
  std::vector<int> classes = dataset.classes();
  const int n_classes = static_cast<int>(classes.size());
  if (classes_per_task <= 0 || classes_per_task > n_classes) {
    throw ConfigError("classes_per_task must lie in [1, " + std::to_string(n_classes) + "], got " +
                      std::to_string(classes_per_task));
  }
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
    throw ConfigError("val_fraction must lie in [0, 1)");
  }
  Rng order_rng(seed, "stream/class_order");
  order_rng.shuffle(classes.begin(), classes.end());
  const int n_tasks = n_classes / classes_per_task;
  const int kept = n_tasks * classes_per_task;
  if (kept < n_classes) {
    spdlog::warn("{}: {} classes do not split into tasks of {}; dropping {} tail classes", dataset.name,
                 n_classes, classes_per_task, n_classes - kept);
  }
  classes.resize(static_cast<std::size_t>(kept));

  std::map<int, std::vector<SamplePtr>> train_by_class, test_by_class;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    auto& bucket = dataset.split[i] == Split::train ? train_by_class : test_by_class;
    bucket[dataset.samples[i]->label].push_back(dataset.samples[i]);
  }

  TaskStream stream;
  stream.seed = seed;
  stream.class_order = classes;
  Rng split_rng(seed, "stream/val_split");
  for (int t = 0; t < n_tasks; ++t) {
    Task task;
    task.index = static_cast<std::size_t>(t);
    for (int k = 0; k < classes_per_task; ++k) {
      const int c = classes[static_cast<std::size_t>(t * classes_per_task + k)];
      task.class_set.push_back(c);
      auto pool = train_by_class[c];
      split_rng.shuffle(pool.begin(), pool.end());
      std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(pool.size())));
      if (val_fraction > 0.0 && n_val == 0 && pool.size() >= 2) n_val = 1;
      task.val.insert(task.val.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_val));
      task.train.insert(task.train.end(), pool.begin() + static_cast<std::ptrdiff_t>(n_val), pool.end());
      const auto& test = test_by_class[c];
      task.test.insert(task.test.end(), test.begin(), test.end());
    }
    split_rng.shuffle(task.train.begin(), task.train.end());
    stream.tasks.push_back(std::move(task));
  }
  check_stream(stream);
  return stream;
}

std::pair<TaskStream, TaskStream> split_validation_stream(const TaskStream& stream, std::size_t n_val) {
  if (stream.size() <= 4 || stream.size() <= n_val) {
    throw ProtocolError("stream has " + std::to_string(stream.size()) +
                        " tasks; a separate validation stream needs more than 4 (use protocol A)");
  }
  TaskStream val, exp;
  val.seed = exp.seed = stream.seed;
  for (std::size_t i = 0; i < stream.size(); ++i) {
    Task t = stream.tasks[i];
    TaskStream& target = i < n_val ? val : exp;
    t.index = target.tasks.size();
    target.class_order.insert(target.class_order.end(), t.class_set.begin(), t.class_set.end());
    target.tasks.push_back(std::move(t));
  }
  return {std::move(val), std::move(exp)};
}

void check_stream(const TaskStream& stream) {
  std::set<int> seen;
  for (const auto& t : stream.tasks) {
    if (t.class_set.size() != stream.tasks.front().class_set.size()) {
      throw ContractError("tasks have unequal class counts");
    }
    for (int c : t.class_set) {
      if (!seen.insert(c).second) throw ContractError("class " + std::to_string(c) + " appears in two tasks");
    }
    for (const auto* part : {&t.train, &t.val, &t.test}) {
      for (const auto& s : *part) {
        if (!t.contains(s->label)) throw ContractError("sample label outside its task's class set");
      }
    }
  }
}

}  // namespace tscil::data
