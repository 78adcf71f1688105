#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tscil/data/dataset.hpp"

namespace tscil::data {

/// Class-conditioned sums of sinusoids with subject-specific amplitude, tempo,
/// phase and additive offsets plus Gaussian noise.
struct SyntheticConfig {
  int classes = 6;
  int subjects = 4;
  std::size_t channels = 3;
  std::size_t length = 64;
  int train_per_class_subject = 20;
  int test_per_class_subject = 8;
  double noise = 0.3;
  /// Strength of the subject-specific distortion; 0 makes subjects identical.
  double subject_shift = 0.3;
  std::uint64_t seed = 0;
};

struct DatasetInfo {
  std::string id;
  std::string display_name;
  std::size_t channels;
  std::size_t length;
  std::size_t train_size;
  std::size_t test_size;
  int classes;
  int experiment_tasks;
  std::string layout;
};

/// Real datasets with their published shapes and expected root layout.
const std::vector<DatasetInfo>& known_datasets();

/// Normalises user spellings ("UCI-HAR", "uci_har", ...) to the canonical id.
/// Throws ConfigError for unknown names.
std::string canonical_dataset_id(std::string_view name);

struct LoadOptions {
  SyntheticConfig synthetic;
  /// Seed for the train/test assignment of datasets without a published split.
  std::uint64_t split_seed = 0;
  /// When set, preprocessed samples are cached here keyed by preprocessing hash.
  std::optional<std::filesystem::path> cache_dir;
};

RawDataset make_synthetic(const SyntheticConfig& cfg);

/// Loads (or synthesises) a dataset and validates it against its published
/// shape. Throws LoadError when files are missing and ValidationError when
/// their contents disagree with the expected shape.
RawDataset load_dataset(std::string_view name, const std::filesystem::path& root,
                        const LoadOptions& options = {});

/// Hash of everything that determines the preprocessed output.
std::string preprocessing_hash(std::string_view id, const LoadOptions& options);

}  // namespace tscil::data
