#include "tscil/core/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace tscil {
namespace {

constexpr char kMagic[8] = {'T', 'S', 'C', 'I', 'L', 'A', 'R', 'C'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "archive encoding assumes a little-endian host");

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32:
    case DType::i32:
      return 4;
    case DType::f64:
    case DType::i64:
      return 8;
    case DType::u8:
      return 1;
  }
  return 1;
}

const char* dtype_name(DType t) {
  switch (t) {
    case DType::f32:
      return "f32";
    case DType::f64:
      return "f64";
    case DType::i32:
      return "i32";
    case DType::i64:
      return "i64";
    case DType::u8:
      return "u8";
  }
  return "?";
}

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  if (s == "i32") return DType::i32;
  if (s == "i64") return DType::i64;
  if (s == "u8") return DType::u8;
  throw ArchiveError("unknown dtype '" + s + "'");
}

template <typename T>
ArchiveArray pack(DType dtype, std::vector<std::size_t> shape, const std::vector<T>& v) {
  ArchiveArray a;
  a.dtype = dtype;
  a.shape = std::move(shape);
  a.bytes.resize(v.size() * sizeof(T));
  if (!v.empty()) std::memcpy(a.bytes.data(), v.data(), a.bytes.size());
  return a;
}

template <typename T>
std::vector<T> unpack(const ArchiveArray& a, DType expected) {
  if (a.dtype != expected) {
    throw ArchiveError(std::string("array dtype is ") + dtype_name(a.dtype) + ", expected " +
                       dtype_name(expected));
  }
  std::vector<T> v(a.bytes.size() / sizeof(T));
  if (!v.empty()) std::memcpy(v.data(), a.bytes.data(), a.bytes.size());
  return v;
}

std::pair<nlohmann::json, std::uint64_t> read_header(std::ifstream& in,
                                                     const std::filesystem::path& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) {
    throw ArchiveError("not a tscil archive: " + path.string());
  }
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || version != kVersion) throw ArchiveError("unsupported archive version");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ArchiveError("truncated archive header: " + path.string());
  return {nlohmann::json::parse(text), 8 + sizeof(version) + sizeof(len) + len};
}

}  // namespace

ArchiveArray ArchiveArray::from_f64(std::vector<std::size_t> shape, const std::vector<double>& v) {
  return pack(DType::f64, std::move(shape), v);
}
ArchiveArray ArchiveArray::from_f32(std::vector<std::size_t> shape, const std::vector<float>& v) {
  return pack(DType::f32, std::move(shape), v);
}
ArchiveArray ArchiveArray::from_i32(std::vector<std::size_t> shape,
                                    const std::vector<std::int32_t>& v) {
  return pack(DType::i32, std::move(shape), v);
}
ArchiveArray ArchiveArray::from_i64(std::vector<std::size_t> shape,
                                    const std::vector<std::int64_t>& v) {
  return pack(DType::i64, std::move(shape), v);
}
std::vector<double> ArchiveArray::as_f64() const { return unpack<double>(*this, DType::f64); }
std::vector<float> ArchiveArray::as_f32() const { return unpack<float>(*this, DType::f32); }
std::vector<std::int32_t> ArchiveArray::as_i32() const {
  return unpack<std::int32_t>(*this, DType::i32);
}
std::vector<std::int64_t> ArchiveArray::as_i64() const {
  return unpack<std::int64_t>(*this, DType::i64);
}

const ArchiveArray& Archive::array(const std::string& name) const {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw ArchiveError("archive has no array '" + name + "'");
  return it->second;
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  nlohmann::json header = archive.meta;
  header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, a] : archive.arrays) {
    header["arrays"].push_back({{"name", name},
                                {"dtype", dtype_name(a.dtype)},
                                {"shape", a.shape},
                                {"offset", offset},
                                {"bytes", a.bytes.size()}});
    offset += a.bytes.size();
  }
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArchiveError("cannot open for writing: " + tmp.string());
    const std::uint64_t len = text.size();
    out.write(kMagic, 8);
    out.write(reinterpret_cast<const char*>(&kVersion), sizeof(kVersion));
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, a] : archive.arrays) {
      out.write(reinterpret_cast<const char*>(a.bytes.data()),
                static_cast<std::streamsize>(a.bytes.size()));
    }
    if (!out) throw ArchiveError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

nlohmann::json read_archive_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError("cannot open archive: " + path.string());
  return read_header(in, path).first;
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError("cannot open archive: " + path.string());
  auto [header, payload_start] = read_header(in, path);
  Archive archive;
  for (const auto& entry : header.at("arrays")) {
    ArchiveArray a;
    a.dtype = parse_dtype(entry.at("dtype").get<std::string>());
    a.shape = entry.at("shape").get<std::vector<std::size_t>>();
    const auto bytes = entry.at("bytes").get<std::uint64_t>();
    std::size_t expected = dtype_size(a.dtype);
    for (auto d : a.shape) expected *= d;
    if (expected != bytes) throw ArchiveError("array size does not match its shape");
    a.bytes.resize(bytes);
    in.seekg(static_cast<std::streamoff>(payload_start + entry.at("offset").get<std::uint64_t>()));
    in.read(reinterpret_cast<char*>(a.bytes.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw ArchiveError("truncated archive payload: " + path.string());
    archive.arrays.emplace(entry.at("name").get<std::string>(), std::move(a));
  }
  header.erase("arrays");
  archive.meta = std::move(header);
  return archive;
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
    out << text;
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace tscil
