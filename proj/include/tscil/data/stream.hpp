#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "tscil/data/dataset.hpp"

namespace tscil::data {

struct Task {
  std::size_t index = 0;
  std::vector<int> class_set;  // in stream order
  std::vector<SamplePtr> train;
  std::vector<SamplePtr> val;
  std::vector<SamplePtr> test;

  bool contains(int label) const;
};

struct TaskStream {
  std::vector<Task> tasks;
  std::vector<int> class_order;  // classes actually allotted to tasks
  std::uint64_t seed = 0;

  std::size_t size() const { return tasks.size(); }
  std::vector<int> classes() const;
  std::size_t train_size() const;
};

/// Shuffles the class order with `seed`, drops the tail classes that do not
/// fill a whole task and assigns consecutive groups to tasks. Each task's
/// training data is split val:train = val_fraction:(1 - val_fraction),
/// stratified by class.
TaskStream make_task_stream(const RawDataset& dataset, int classes_per_task, std::uint64_t seed,
                            double val_fraction = 0.1);

/// First n_val tasks become the validation stream, the rest the experiment
/// stream (re-indexed from 0). Throws ProtocolError when the stream has at
/// most four tasks or not more than n_val.
std::pair<TaskStream, TaskStream> split_validation_stream(const TaskStream& stream,
                                                          std::size_t n_val = 3);

/// Checks disjointness, equal class counts and label membership.
void check_stream(const TaskStream& stream);

}  // namespace tscil::data
