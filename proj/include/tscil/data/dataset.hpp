#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tscil/core/tensor.hpp"

namespace tscil::data {

/// One labelled multichannel series, stored channel-major as 32-bit floats.
struct TimeSeriesSample {
  std::size_t channels = 0;
  std::size_t length = 0;
  std::vector<float> values;
  int label = 0;
  std::optional<int> subject;

  float at(std::size_t c, std::size_t t) const { return values[c * length + t]; }
};

using SamplePtr = std::shared_ptr<const TimeSeriesSample>;

enum class Split : std::uint8_t { train = 0, test = 1 };

struct RawDataset {
  std::string name;
  std::size_t channels = 0;
  std::size_t length = 0;
  int class_count = 0;
  std::vector<SamplePtr> samples;
  std::vector<Split> split;

  std::vector<int> classes() const;
  std::vector<int> subjects() const;
  std::size_t count(Split s) const;
  std::vector<SamplePtr> partition(Split s) const;

  /// Checks shapes, finiteness, class balance of the train split and that
  /// both splits contain every class (and every subject when subjects are
  /// recorded). Throws ValidationError.
  void validate(double max_class_ratio = 1.5) const;
};

/// Stacks samples into an [N x C x L] tensor.
Tensor to_batch(std::span<const SamplePtr> samples);

}  // namespace tscil::data
