#pragma once

// DTF tensor files:
//   8-byte magic "DABDUTF1"
//   u64 little-endian header length, then that many bytes of UTF-8 JSON
//   raw little-endian f64 payload, row-major
//
// A single-tensor header is {"shape":[...],"dtype":"f64"}. A container header
// carries "tensors":[{"name":..,"shape":[..]}, ...] and the payloads follow in
// that order. Extra header keys are preserved as metadata.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dabdu/tensor.hpp"

namespace dabdu::dtf {

inline constexpr std::string_view kMagic = "DABDUTF1";

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Container {
  nlohmann::json header;
  std::vector<NamedTensor> tensors;
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline std::uint64_t get_u64(std::string_view bytes, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
  return v;
}

inline Shape parse_shape(const nlohmann::json& j, std::size_t offset) {
  if (!j.is_array()) throw FormatError("DTF shape is not an array", offset);
  Shape shape;
  for (const auto& e : j) {
    if (!e.is_number_unsigned() || e.get<std::uint64_t>() == 0) {
      throw FormatError("DTF shape extents must be positive integers", offset);
    }
    shape.push_back(e.get<std::size_t>());
  }
  return shape;
}

inline std::string encode(const nlohmann::json& header, std::span<const Tensor> tensors) {
  std::string out(kMagic);
  const std::string text = header.dump();
  put_u64(out, text.size());
  out += text;
  for (const auto& t : tensors) {
    for (double v : t.values()) put_f64(out, v);
  }
  return out;
}

struct Decoded {
  nlohmann::json header;
  std::size_t payload_offset;
};

inline Decoded decode_header(std::string_view bytes) {
  if (bytes.size() < kMagic.size() || bytes.substr(0, kMagic.size()) != kMagic) {
    throw FormatError("missing DTF magic", 0);
  }
  std::size_t at = kMagic.size();
  if (bytes.size() < at + 8) throw FormatError("truncated DTF header length", bytes.size());
  const std::uint64_t len = get_u64(bytes, at);
  at += 8;
  if (len > bytes.size() - at) throw FormatError("truncated DTF header", bytes.size());
  nlohmann::json header = nlohmann::json::parse(bytes.substr(at, len), nullptr, false);
  if (header.is_discarded() || !header.is_object()) throw FormatError("DTF header is not a JSON object", at);
  if (header.value("dtype", std::string{}) != "f64") throw FormatError("DTF dtype must be f64", at);
  return {std::move(header), at + static_cast<std::size_t>(len)};
}

inline Tensor read_payload(std::string_view bytes, std::size_t& at, Shape shape) {
  const std::size_t count = numel(shape);
  if ((bytes.size() - at) / 8 < count) {
    throw FormatError("truncated DTF payload: need " + std::to_string(count) + " values", bytes.size());
  }
  std::vector<double> values(count);
  for (auto& v : values) {
    v = std::bit_cast<double>(get_u64(bytes, at));
    at += 8;
  }
  return Tensor(std::move(shape), std::move(values));
}

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void spit(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace detail

inline std::string encode_tensor(const Tensor& t) {
  nlohmann::json header{{"shape", t.shape()}, {"dtype", "f64"}};
  return detail::encode(header, std::span<const Tensor>(&t, 1));
}

inline Tensor decode_tensor(std::string_view bytes) {
  auto [header, at] = detail::decode_header(bytes);
  if (!header.contains("shape")) throw FormatError("DTF header has no shape", kMagic.size() + 8);
  Tensor t = detail::read_payload(bytes, at, detail::parse_shape(header["shape"], kMagic.size() + 8));
  if (at != bytes.size()) throw FormatError("trailing bytes after DTF payload", at);
  return t;
}

inline std::string encode_container(std::span<const NamedTensor> entries, nlohmann::json metadata = nlohmann::json::object()) {
  nlohmann::json header = std::move(metadata);
  header["dtype"] = "f64";
  header["tensors"] = nlohmann::json::array();
  std::vector<Tensor> tensors;
  for (const auto& e : entries) {
    header["tensors"].push_back({{"name", e.name}, {"shape", e.tensor.shape()}});
    tensors.push_back(e.tensor);
  }
  return detail::encode(header, tensors);
}

inline Container decode_container(std::string_view bytes) {
  auto [header, at] = detail::decode_header(bytes);
  const std::size_t header_at = kMagic.size() + 8;
  if (!header.contains("tensors") || !header["tensors"].is_array()) {
    throw FormatError("DTF container header has no tensor list", header_at);
  }
  Container c;
  for (const auto& entry : header["tensors"]) {
    if (!entry.is_object() || !entry.contains("name") || !entry["name"].is_string() || !entry.contains("shape")) {
      throw FormatError("malformed DTF container entry", header_at);
    }
    auto t = detail::read_payload(bytes, at, detail::parse_shape(entry["shape"], header_at));
    c.tensors.push_back({entry["name"].get<std::string>(), std::move(t)});
  }
  if (at != bytes.size()) throw FormatError("trailing bytes after DTF payload", at);
  header.erase("tensors");
  c.header = std::move(header);
  return c;
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) { detail::spit(path, encode_tensor(t)); }

inline Tensor read_tensor(const std::filesystem::path& path) { return decode_tensor(detail::slurp(path)); }

inline void write_container(const std::filesystem::path& path, std::span<const NamedTensor> entries,
                            nlohmann::json metadata = nlohmann::json::object()) {
  detail::spit(path, encode_container(entries, std::move(metadata)));
}

inline Container read_container(const std::filesystem::path& path) { return decode_container(detail::slurp(path)); }

}  // namespace dabdu::dtf
