#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tscil/core/rng.hpp"
#include "tscil/data/stream.hpp"

namespace tscil::memory {

struct BufferEntry {
  data::SamplePtr sample;
  std::optional<std::vector<double>> stored_logits;
  std::optional<double> score;
  std::uint64_t insertion_index = 0;
};

class MemoryBuffer {
 public:
  explicit MemoryBuffer(std::size_t capacity = 0) : capacity_(capacity) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::uint64_t seen_count() const { return seen_; }
  const std::vector<BufferEntry>& entries() const { return entries_; }
  const BufferEntry& entry(std::size_t i) const { return entries_.at(i); }

  /// Reservoir sampling over the items of `batch`; `logits`, when given, is
  /// stored alongside each inserted item.
  void reservoir_update(std::span<const data::SamplePtr> batch, Rng& rng,
                        const std::vector<std::vector<double>>* logits = nullptr);

  /// Reservoir sampling restricted to samples whose subject is allowed.
  void subject_restricted_update(std::span<const data::SamplePtr> batch, const std::set<int>& allowed, Rng& rng,
                                 const std::vector<std::vector<double>>* logits = nullptr);

  /// Keeps at most `quota` entries per class, the earliest in list order.
  void truncate_per_class(std::size_t quota);
  /// Appends entries (in the given order) for one class.
  void append(std::vector<BufferEntry> entries);
  std::uint64_t next_insertion_index() { return next_index_++; }

  std::vector<int> classes() const;

 private:
  std::size_t capacity_;
  std::vector<BufferEntry> entries_;
  std::uint64_t seen_ = 0;
  std::uint64_t next_index_ = 0;
};

/// floor(pct * train_size), raised to `min_classes` when that many samples
/// exist. Throws ConfigError for pct outside (0, 1].
std::size_t budget_from_fraction(std::size_t train_size, double pct, std::size_t min_classes = 0);
/// Budget over a stream's training data (train and validation parts of
/// every task), at least one slot per class.
std::size_t budget_from_fraction(const data::TaskStream& stream, double pct);

/// Features for a list of samples, one row each.
using FeatureFn = std::function<Tensor(const std::vector<data::SamplePtr>&)>;

/// Class-quota policies: quota m = floor(M / classes_seen); old classes are
/// truncated to their first m entries, then each class of `task_samples`
/// receives m exemplars.
void herding_update(MemoryBuffer& buffer, const std::vector<data::SamplePtr>& task_samples,
                    const FeatureFn& features, std::size_t classes_seen);
void fasticarl_update(MemoryBuffer& buffer, const std::vector<data::SamplePtr>& task_samples,
                      const FeatureFn& features, std::size_t classes_seen);
/// `scores` aligned with task_samples. Empty scores fall back to reservoir
/// sampling with a warning.
void clops_update(MemoryBuffer& buffer, const std::vector<data::SamplePtr>& task_samples,
                  std::span<const double> scores, std::size_t classes_seen, Rng& rng);

/// k entry indices drawn uniformly without replacement, or with replacement
/// when fewer than k entries exist. Empty buffer gives an empty batch.
std::vector<std::size_t> random_retrieve(const MemoryBuffer& buffer, std::size_t k, Rng& rng);

/// Per-subject quotas as equal as possible: floor(k / S) each, and the k mod S
/// extra draws go to consecutive subjects starting at a random offset.
/// Falls back to random_retrieve when any entry lacks a subject.
std::vector<std::size_t> subject_balanced_retrieve(const MemoryBuffer& buffer, std::size_t k, Rng& rng);

struct AserConfig {
  std::size_t neighbours = 5;
  std::size_t max_eval_points = 64;
  std::size_t max_candidates = 128;
  bool mean_variant = false;
};

/// ASER retrieval: buffer entries are split at random into candidates and
/// evaluation points; candidates are ranked by aser_scores against the
/// evaluation points and the incoming batch, and the top k returned (ties by
/// insertion index). Returns every index when the buffer holds at most k.
std::vector<std::size_t> aser_retrieve(const MemoryBuffer& buffer, std::size_t k, const FeatureFn& features,
                                       const Tensor& batch_features, std::span<const int> batch_labels,
                                       const AserConfig& cfg, Rng& rng);

/// Binary archive of entries with manifest {M, seen_count, policies}.
void save_buffer_snapshot(const std::filesystem::path& path, const MemoryBuffer& buffer,
                          const std::vector<std::string>& policies);

}  // namespace tscil::memory
