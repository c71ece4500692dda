#ifndef CMDQ_TENSOR_IO_HPP
#define CMDQ_TENSOR_IO_HPP

// Container file layout (all integers little-endian):
//
//   "CMDQ" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | payload
//
// The manifest maps each tensor name to {dtype, shape, offset, length}; offsets
// are relative to the payload start and the byte ranges tile the payload in
// name order with no gaps. A free-form "attributes" object rides along.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cmdq/error.hpp"
#include "cmdq/half.hpp"
#include "cmdq/matrix.hpp"

namespace cmdq {

inline constexpr std::array<char, 4> kContainerMagic = {'C', 'M', 'D', 'Q'};
inline constexpr std::uint32_t kContainerVersion = 1;

enum class DType { f32, f16, u32, i32 };

constexpr std::size_t dtype_size(DType t) noexcept { return t == DType::f16 ? 2 : 4; }

constexpr std::string_view dtype_name(DType t) noexcept {
  switch (t) {
    case DType::f32: return "f32";
    case DType::f16: return "f16";
    case DType::u32: return "u32";
    case DType::i32: return "i32";
  }
  return "?";
}

inline DType parse_dtype(std::string_view s) {
  if (s == "f32") return DType::f32;
  if (s == "f16") return DType::f16;
  if (s == "u32") return DType::u32;
  if (s == "i32") return DType::i32;
  throw FormatError("unknown dtype '" + std::string(s) + "'");
}

namespace detail {

inline void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, std::size_t width) {
  for (std::size_t b = 0; b < width; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

inline std::uint64_t get_le(const std::uint8_t* p, std::size_t width) {
  std::uint64_t v = 0;
  for (std::size_t b = 0; b < width; ++b) v |= static_cast<std::uint64_t>(p[b]) << (8 * b);
  return v;
}

}  // namespace detail

/// A typed 1-D or 2-D tensor held as its little-endian byte image.
class Tensor {
 public:
  Tensor() = default;

  Tensor(DType dtype, std::vector<std::uint64_t> shape, std::vector<std::uint8_t> bytes)
      : dtype_(dtype), shape_(std::move(shape)), bytes_(std::move(bytes)) {
    detail::require(shape_.size() == 1 || shape_.size() == 2,
                    "tensors must be 1-D or 2-D");
    detail::require(bytes_.size() == element_count() * dtype_size(dtype_),
                    "tensor byte length does not match its shape");
  }

  static Tensor f32(const DenseMatrix& m) {
    std::vector<std::uint8_t> b;
    b.reserve(m.size() * 4);
    for (const float v : m.values()) detail::put_le(b, std::bit_cast<std::uint32_t>(v), 4);
    return {DType::f32, {m.rows(), m.cols()}, std::move(b)};
  }

  static Tensor f32_vector(std::span<const float> v) {
    std::vector<std::uint8_t> b;
    b.reserve(v.size() * 4);
    for (const float x : v) detail::put_le(b, std::bit_cast<std::uint32_t>(x), 4);
    return {DType::f32, {v.size()}, std::move(b)};
  }

  /// Narrows to binary16.
  static Tensor f16(const DenseMatrix& m) {
    std::vector<std::uint8_t> b;
    b.reserve(m.size() * 2);
    for (const float v : m.values()) detail::put_le(b, f32_to_f16(v), 2);
    return {DType::f16, {m.rows(), m.cols()}, std::move(b)};
  }

  static Tensor f16_bits(const Matrix<std::uint16_t>& m) {
    std::vector<std::uint8_t> b;
    b.reserve(m.size() * 2);
    for (const auto v : m.values()) detail::put_le(b, v, 2);
    return {DType::f16, {m.rows(), m.cols()}, std::move(b)};
  }

  static Tensor u32(const IntGrid& m) {
    std::vector<std::uint8_t> b;
    b.reserve(m.size() * 4);
    for (const auto v : m.values()) detail::put_le(b, v, 4);
    return {DType::u32, {m.rows(), m.cols()}, std::move(b)};
  }

  static Tensor i32_vector(std::span<const std::int32_t> v) {
    std::vector<std::uint8_t> b;
    b.reserve(v.size() * 4);
    for (const auto x : v) detail::put_le(b, static_cast<std::uint32_t>(x), 4);
    return {DType::i32, {v.size()}, std::move(b)};
  }

  DType dtype() const noexcept { return dtype_; }
  const std::vector<std::uint64_t>& shape() const noexcept { return shape_; }
  const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }

  std::size_t element_count() const noexcept {
    std::size_t n = 1;
    for (const auto d : shape_) n *= static_cast<std::size_t>(d);
    return n;
  }

  std::size_t rows() const noexcept { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

  /// f32 or f16 contents widened to f32; 1-D tensors come back as a single row.
  DenseMatrix to_dense() const {
    std::vector<float> out(element_count());
    if (dtype_ == DType::f32) {
      for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(&bytes_[4 * i], 4)));
    } else if (dtype_ == DType::f16) {
      for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = f16_to_f32(static_cast<std::uint16_t>(detail::get_le(&bytes_[2 * i], 2)));
    } else {
      throw FormatError("expected a floating-point tensor, got " + std::string(dtype_name(dtype_)));
    }
    return DenseMatrix(rows(), cols(), std::move(out));
  }

  Matrix<std::uint16_t> to_f16_bits() const {
    expect(DType::f16);
    std::vector<std::uint16_t> out(element_count());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = static_cast<std::uint16_t>(detail::get_le(&bytes_[2 * i], 2));
    return {rows(), cols(), std::move(out)};
  }

  IntGrid to_u32() const {
    expect(DType::u32);
    std::vector<std::uint32_t> out(element_count());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = static_cast<std::uint32_t>(detail::get_le(&bytes_[4 * i], 4));
    return {rows(), cols(), std::move(out)};
  }

  std::vector<std::int32_t> to_i32() const {
    expect(DType::i32);
    std::vector<std::int32_t> out(element_count());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = static_cast<std::int32_t>(static_cast<std::uint32_t>(detail::get_le(&bytes_[4 * i], 4)));
    return out;
  }

  std::vector<float> to_f32_vector() const { return to_dense().vector(); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void expect(DType t) const {
    if (dtype_ != t)
      throw FormatError("expected dtype " + std::string(dtype_name(t)) + ", got " +
                        std::string(dtype_name(dtype_)));
  }

  DType dtype_ = DType::f32;
  std::vector<std::uint64_t> shape_ = {0};
  std::vector<std::uint8_t> bytes_;
};

/// Named tensors plus free-form JSON attributes.
struct Container {
  std::map<std::string, Tensor> tensors;
  nlohmann::json attributes = nlohmann::json::object();

  void add(const std::string& name, Tensor t) {
    detail::require(!name.empty(), "tensor name must be non-empty");
    if (!tensors.emplace(name, std::move(t)).second)
      throw InvariantError("duplicate tensor name '" + name + "'");
  }

  const Tensor& at(const std::string& name) const {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("container has no tensor '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return tensors.count(name) != 0; }

  friend bool operator==(const Container&, const Container&) = default;
};

inline std::vector<std::uint8_t> encode_container(const Container& c) {
  nlohmann::json entries = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    entries[name] = {{"dtype", dtype_name(t.dtype())},
                     {"shape", t.shape()},
                     {"offset", offset},
                     {"length", t.bytes().size()}};
    offset += t.bytes().size();
  }
  const nlohmann::json manifest = {{"tensors", entries}, {"attributes", c.attributes}};
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out;
  out.reserve(16 + text.size() + offset);
  out.insert(out.end(), kContainerMagic.begin(), kContainerMagic.end());
  detail::put_le(out, kContainerVersion, 4);
  detail::put_le(out, text.size(), 8);
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, t] : c.tensors) out.insert(out.end(), t.bytes().begin(), t.bytes().end());
  return out;
}

inline Container decode_container(std::span<const std::uint8_t> buf) {
  constexpr std::size_t header = 16;
  if (buf.size() < 4 || !std::equal(kContainerMagic.begin(), kContainerMagic.end(), buf.begin()))
    throw FormatError("bad magic: not a CMDQ container");
  if (buf.size() < header) throw FormatError("truncated header");
  const auto version = static_cast<std::uint32_t>(detail::get_le(&buf[4], 4));
  if (version != kContainerVersion)
    throw FormatError("unsupported container version " + std::to_string(version));
  const std::uint64_t manifest_len = detail::get_le(&buf[8], 8);
  if (manifest_len > buf.size() - header) throw FormatError("truncated manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(buf.begin() + header,
                                     buf.begin() + header + static_cast<std::ptrdiff_t>(manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }

  const auto payload = buf.subspan(header + manifest_len);
  Container out;
  struct Range {
    std::uint64_t offset, length;
    std::string name;
  };
  std::vector<Range> ranges;
  try {
    if (!manifest.is_object() || !manifest.contains("tensors") || !manifest["tensors"].is_object())
      throw FormatError("malformed manifest: missing tensors object");
    if (manifest.contains("attributes")) out.attributes = manifest["attributes"];
    for (const auto& [name, e] : manifest["tensors"].items()) {
      const DType dtype = parse_dtype(e.at("dtype").get<std::string>());
      auto shape = e.at("shape").get<std::vector<std::uint64_t>>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      const auto length = e.at("length").get<std::uint64_t>();
      if (shape.empty() || shape.size() > 2)
        throw FormatError("tensor '" + name + "' must be 1-D or 2-D");
      std::uint64_t count = 1;
      for (const auto d : shape) {
        if (d > payload.size()) throw FormatError("tensor '" + name + "' has an implausible shape");
        count *= d;
      }
      if (count * dtype_size(dtype) != length)
        throw FormatError("tensor '" + name + "' length disagrees with its shape");
      if (offset > payload.size() || length > payload.size() - offset)
        throw FormatError("truncated payload: tensor '" + name + "' runs past end of file");
      ranges.push_back({offset, length, name});
      std::vector<std::uint8_t> bytes(payload.begin() + static_cast<std::ptrdiff_t>(offset),
                                      payload.begin() + static_cast<std::ptrdiff_t>(offset + length));
      out.tensors.emplace(name, Tensor(dtype, std::move(shape), std::move(bytes)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  } catch (const InvariantError& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }

  std::sort(ranges.begin(), ranges.end(),
            [](const Range& a, const Range& b) { return a.offset < b.offset; });
  std::uint64_t cursor = 0;
  for (const auto& r : ranges) {
    if (r.offset != cursor)
      throw FormatError("manifest byte ranges overlap or leave a gap at '" + r.name + "'");
    cursor += r.length;
  }
  if (cursor != payload.size()) throw FormatError("payload has trailing bytes");
  return out;
}

inline void write_container(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode_container(c);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("write failed for '" + path.string() + "'");
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline Container read_container(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_container(bytes);
}

}  // namespace cmdq

#endif  // CMDQ_TENSOR_IO_HPP
