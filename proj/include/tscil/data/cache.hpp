#pragma once

#include <filesystem>
#include <string>

#include "tscil/data/dataset.hpp"

namespace tscil::data {

/// Columnar binary cache: labels/subjects/split as i32 arrays and sample
/// values as one f32 array, behind a JSON header
/// {dataset, C, L, n, class_count, preprocessing_hash}.
void save_dataset_cache(const std::filesystem::path& path, const RawDataset& dataset,
                        const std::string& preprocessing_hash);
RawDataset load_dataset_cache(const std::filesystem::path& path);

std::filesystem::path cache_file(const std::filesystem::path& dir, const std::string& dataset,
                                 const std::string& preprocessing_hash);

}  // namespace tscil::data
