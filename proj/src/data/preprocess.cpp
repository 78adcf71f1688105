#include "tscil/data/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <spdlog/spdlog.h>

#include "tscil/core/errors.hpp"
#include "tscil/core/rng.hpp"

namespace tscil::data {
namespace {

constexpr double kGrabMyoRate = 2048.0;
constexpr std::size_t kGrabMyoFactor = 8;
constexpr std::size_t kGrabMyoWindow = 128;
constexpr std::size_t kWisdmWindow = 200;
constexpr double kTestFraction = 0.25;

PreprocessResult windows_and_split(const std::vector<Recording>& recordings, std::size_t window,
                                   std::size_t decimation, std::uint64_t seed, const char* tag) {
  PreprocessResult result;
  for (const auto& rec : recordings) {
    const Recording r = decimation > 1 ? decimate(rec, decimation) : rec;
    auto windows = sliding_windows(r, window);
    if (windows.empty()) {
      ++result.warnings;
      continue;
    }
    for (auto& w : windows) result.samples.push_back(std::make_shared<TimeSeriesSample>(std::move(w)));
  }
  if (result.warnings) {
    spdlog::warn("{}: skipped {} recording(s) shorter than one {}-step window", tag,
                 result.warnings, window);
  }
  result.split = subject_stratified_split(result.samples, kTestFraction, seed);
  return result;
}

}  // namespace

Recording decimate(const Recording& rec, std::size_t factor) {
  if (factor == 0) throw ContractError("decimate: factor must be positive");
  Recording out = rec;
  out.rate_hz = rec.rate_hz / static_cast<double>(factor);
  const std::size_t steps = rec.steps() / factor;
  out.values.assign(rec.channels * steps, 0.0f);
  for (std::size_t c = 0; c < rec.channels; ++c) {
    const float* src = rec.values.data() + c * rec.steps();
    for (std::size_t t = 0; t < steps; ++t) {
      double s = 0.0;
      for (std::size_t j = 0; j < factor; ++j) s += src[t * factor + j];
      out.values[c * steps + t] = static_cast<float>(s / static_cast<double>(factor));
    }
  }
  return out;
}

std::vector<TimeSeriesSample> sliding_windows(const Recording& rec, std::size_t window) {
  if (window == 0) throw ContractError("sliding_windows: window must be positive");
  const std::size_t steps = rec.steps();
  const std::size_t count = steps / window;
  std::vector<TimeSeriesSample> out;
  out.reserve(count);
  for (std::size_t w = 0; w < count; ++w) {
    TimeSeriesSample s;
    s.channels = rec.channels;
    s.length = window;
    s.label = rec.label;
    s.subject = rec.subject;
    s.values.resize(rec.channels * window);
    for (std::size_t c = 0; c < rec.channels; ++c) {
      std::copy_n(rec.values.data() + c * steps + w * window, window,
                  s.values.data() + c * window);
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Split> subject_stratified_split(const std::vector<SamplePtr>& samples,
                                            double test_fraction, std::uint64_t seed) {
  std::vector<Split> split(samples.size(), Split::train);
  // class -> subject -> sample indices
  std::map<int, std::map<int, std::vector<std::size_t>>> groups;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    groups[samples[i]->label][samples[i]->subject.value_or(-1)].push_back(i);
  }
  Rng rng(seed, "subject_split");
  for (auto& [label, by_subject] : groups) {
    std::size_t total = 0;
    for (auto& [subject, idx] : by_subject) {
      rng.shuffle(idx.begin(), idx.end());
      total += idx.size();
    }
    const auto target =
        static_cast<std::size_t>(std::llround(static_cast<double>(total) * test_fraction));
    std::size_t taken = 0;
    std::size_t round = 0;
    bool progressed = true;
    while (taken < target && progressed) {
      progressed = false;
      for (auto& [subject, idx] : by_subject) {
        if (taken >= target) break;
        // keep at least one training sample for every subject
        if (round + 1 < idx.size()) {
          split[idx[round]] = Split::test;
          ++taken;
          progressed = true;
        }
      }
      ++round;
    }
  }
  return split;
}

PreprocessResult preprocess_grabmyo(const std::vector<Recording>& recordings, std::uint64_t seed) {
  for (const auto& r : recordings) {
    if (std::abs(r.rate_hz - kGrabMyoRate) > 1e-9) {
      throw ValidationError("GRABMyo recordings must be sampled at 2048 Hz");
    }
  }
  return windows_and_split(recordings, kGrabMyoWindow, kGrabMyoFactor, seed, "grabmyo");
}

PreprocessResult preprocess_wisdm(const std::vector<Recording>& recordings, std::uint64_t seed) {
  for (const auto& r : recordings) {
    if (r.channels != 3) throw ValidationError("WISDM phone accelerometer streams have 3 channels");
  }
  return windows_and_split(recordings, kWisdmWindow, 1, seed, "wisdm");
}

}  // namespace tscil::data
