#include "tscil/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "tscil/core/errors.hpp"

namespace tscil::data {

std::vector<int> RawDataset::classes() const {
  std::set<int> s;
  for (const auto& x : samples) s.insert(x->label);
  return {s.begin(), s.end()};
}

std::vector<int> RawDataset::subjects() const {
  std::set<int> s;
  for (const auto& x : samples) {
    if (x->subject) s.insert(*x->subject);
  }
  return {s.begin(), s.end()};
}

std::size_t RawDataset::count(Split s) const {
  return static_cast<std::size_t>(std::count(split.begin(), split.end(), s));
}

std::vector<SamplePtr> RawDataset::partition(Split s) const {
  std::vector<SamplePtr> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (split[i] == s) out.push_back(samples[i]);
  }
  return out;
}

void RawDataset::validate(double max_class_ratio) const {
  if (split.size() != samples.size()) {
    throw ValidationError(name + ": split flags do not cover every sample");
  }
  std::map<int, std::size_t> train_counts;
  std::set<int> test_classes;
  std::set<int> train_subjects, test_subjects;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = *samples[i];
    if (s.channels != channels || s.length != length || s.values.size() != channels * length) {
      throw ValidationError(name + ": sample " + std::to_string(i) + " has shape " +
                            std::to_string(s.channels) + "x" + std::to_string(s.length) +
                            ", expected " + std::to_string(channels) + "x" +
                            std::to_string(length));
    }
    if (!std::all_of(s.values.begin(), s.values.end(), [](float v) { return std::isfinite(v); })) {
      throw ValidationError(name + ": sample " + std::to_string(i) + " contains NaN/Inf");
    }
    if (split[i] == Split::train) {
      ++train_counts[s.label];
      if (s.subject) train_subjects.insert(*s.subject);
    } else {
      test_classes.insert(s.label);
      if (s.subject) test_subjects.insert(*s.subject);
    }
  }
  if (train_counts.empty()) throw ValidationError(name + ": empty train split");
  std::size_t lo = SIZE_MAX, hi = 0;
  for (const auto& [c, n] : train_counts) {
    lo = std::min(lo, n);
    hi = std::max(hi, n);
    if (!test_classes.count(c)) {
      throw ValidationError(name + ": class " + std::to_string(c) + " missing from test split");
    }
  }
  if (static_cast<double>(hi) > max_class_ratio * static_cast<double>(lo)) {
    throw ValidationError(name + ": train classes are imbalanced (" + std::to_string(hi) + " vs " +
                          std::to_string(lo) + ")");
  }
  for (int s : train_subjects) {
    if (!test_subjects.count(s)) {
      throw ValidationError(name + ": subject " + std::to_string(s) + " missing from test split");
    }
  }
}

Tensor to_batch(std::span<const SamplePtr> samples) {
  if (samples.empty()) return Tensor({0, 0, 0});
  const std::size_t c = samples.front()->channels, l = samples.front()->length;
  Tensor out({samples.size(), c, l});
  double* dst = out.data();
  for (const auto& s : samples) {
    if (s->channels != c || s->length != l) throw ValidationError("to_batch: mixed sample shapes");
    for (float v : s->values) *dst++ = v;
  }
  return out;
}

}  // namespace tscil::data
