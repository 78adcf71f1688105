#pragma once

#include <cstdint>
#include <vector>

#include "tscil/data/dataset.hpp"

namespace tscil::data {

/// A continuous multichannel recording of one (subject, class) pair.
struct Recording {
  int subject = 0;
  int label = 0;
  std::size_t channels = 0;
  double rate_hz = 0.0;
  std::vector<float> values;  // channels x steps, channel-major

  std::size_t steps() const { return channels ? values.size() / channels : 0; }
};

struct PreprocessResult {
  std::vector<SamplePtr> samples;
  std::vector<Split> split;
  std::size_t warnings = 0;  // recordings too short to yield a window
};

/// Downsamples by an integer factor, averaging each block of `factor` steps.
/// Trailing steps that do not fill a block are dropped.
Recording decimate(const Recording& rec, std::size_t factor);

/// Cuts a recording into non-overlapping windows of `window` steps; the tail
/// shorter than one window is discarded.
std::vector<TimeSeriesSample> sliding_windows(const Recording& rec, std::size_t window);

/// Per-class train/test assignment where each subject contributes to both
/// sides: within a class, test samples are taken round-robin over subjects
/// (each subject keeps at least one training sample) until the class's test
/// count reaches round(n * test_fraction).
std::vector<Split> subject_stratified_split(const std::vector<SamplePtr>& samples,
                                            double test_fraction, std::uint64_t seed);

/// 2048 Hz sEMG -> 256 Hz, 0.5 s (128-step) windows, 3:1 subject-stratified split.
PreprocessResult preprocess_grabmyo(const std::vector<Recording>& recordings, std::uint64_t seed);

/// 20 Hz accelerometer -> 200-step (10 s) windows, 3:1 subject-stratified split.
PreprocessResult preprocess_wisdm(const std::vector<Recording>& recordings, std::uint64_t seed);

}  // namespace tscil::data
