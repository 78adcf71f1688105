#pragma once

// Single-file named-array archive:
//
//   "TSCILARC" | u32 version | u64 header_len | JSON header | payload
//
// The JSON header carries caller metadata plus an "arrays" list of
// {name, dtype, shape, offset, bytes}; offsets are relative to the payload
// start. All numbers are little-endian. Writes go to a temporary file that is
// renamed into place, so readers never observe a partial archive.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace tscil {

enum class DType { f32, f64, i32, i64, u8 };

struct ArchiveArray {
  DType dtype = DType::f64;
  std::vector<std::size_t> shape;
  std::vector<std::uint8_t> bytes;

  static ArchiveArray from_f64(std::vector<std::size_t> shape, const std::vector<double>& v);
  static ArchiveArray from_f32(std::vector<std::size_t> shape, const std::vector<float>& v);
  static ArchiveArray from_i32(std::vector<std::size_t> shape, const std::vector<std::int32_t>& v);
  static ArchiveArray from_i64(std::vector<std::size_t> shape, const std::vector<std::int64_t>& v);

  std::vector<double> as_f64() const;
  std::vector<float> as_f32() const;
  std::vector<std::int32_t> as_i32() const;
  std::vector<std::int64_t> as_i64() const;
};

struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, ArchiveArray> arrays;

  const ArchiveArray& array(const std::string& name) const;
};

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);
/// Reads only the JSON header.
nlohmann::json read_archive_header(const std::filesystem::path& path);

/// Writes text to path via a temporary file and rename.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace tscil
