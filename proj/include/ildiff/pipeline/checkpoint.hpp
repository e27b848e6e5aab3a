#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <zlib.h>

#include <json.hpp>

#include "ildiff/core/nn.hpp"
#include "ildiff/image_io.hpp"

namespace ildiff::pipeline {

// File layout: "ILDC", version byte, u32 LE header length, JSON header, then
// the tensor payloads (little endian) at the offsets listed in the header.
inline constexpr char kCheckpointMagic[4] = {'I', 'L', 'D', 'C'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

template <typename T>
constexpr const char* dtype_tag() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

struct TensorRecord {
  std::string name;
  std::string dtype;  // "f32" | "f64"
  Shape shape;
  bool frozen = false;
  std::string bytes;  // little-endian payload
};

struct Checkpoint {
  std::string fingerprint;
  int stage = 0;
  long long step = 0;
  double val_metric = 0.0;
  nlohmann::ordered_json metadata = nlohmann::ordered_json::object();
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline std::uint32_t crc32_of(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

template <typename T>
std::string encode_values(const Tensor<T>& t) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  std::string out;
  out.reserve(t.size() * sizeof(T));
  for (T v : t.values()) put_le(out, std::bit_cast<Bits>(v));
  return out;
}

template <typename T>
Tensor<T> decode_values(const TensorRecord& r) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  if (r.dtype != dtype_tag<T>()) throw StateError("tensor " + r.name + " has dtype " + r.dtype);
  const std::size_t n = shape_numel(r.shape);
  if (r.bytes.size() != n * sizeof(T)) throw StateError("tensor " + r.name + ": payload size mismatch");
  std::vector<T> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = std::bit_cast<T>(get_le<Bits>(r.bytes.data() + i * sizeof(T)));
  return Tensor<T>(r.shape, std::move(v));
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  nlohmann::ordered_json h;
  h["fingerprint"] = ck.fingerprint;
  h["stage"] = ck.stage;
  h["step"] = ck.step;
  h["val_metric"] = ck.val_metric;
  h["metadata"] = ck.metadata;
  auto& list = h["tensors"] = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ck.tensors) {
    list.push_back({{"name", t.name},
                    {"dtype", t.dtype},
                    {"shape", t.shape},
                    {"offset", offset},
                    {"nbytes", t.bytes.size()},
                    {"crc32", crc32_of(t.bytes)},
                    {"frozen", t.frozen}});
    offset += t.bytes.size();
  }
  const std::string header = h.dump();
  std::string out(kCheckpointMagic, 4);
  out.push_back(static_cast<char>(kCheckpointVersion));
  detail::put_le(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  for (const auto& t : ck.tensors) out += t.bytes;
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& b, const std::string& what = "checkpoint") {
  if (b.size() < 9 || std::memcmp(b.data(), kCheckpointMagic, 4) != 0) throw StateError(what + ": not an ILDC checkpoint");
  if (static_cast<std::uint8_t>(b[4]) != kCheckpointVersion)
    throw StateError(what + ": unsupported checkpoint version " + std::to_string(static_cast<int>(b[4])));
  const std::uint32_t hlen = detail::get_le<std::uint32_t>(b.data() + 5);
  if (b.size() < 9ull + hlen) throw StateError(what + ": truncated header");
  Checkpoint ck;
  std::size_t payload = 9ull + hlen;
  try {
    const auto h = nlohmann::ordered_json::parse(b.substr(9, hlen));
    ck.fingerprint = h.at("fingerprint").get<std::string>();
    ck.stage = h.at("stage").get<int>();
    ck.step = h.at("step").get<long long>();
    ck.val_metric = h.at("val_metric").get<double>();
    ck.metadata = h.at("metadata");
    for (const auto& e : h.at("tensors")) {
      TensorRecord r;
      r.name = e.at("name").get<std::string>();
      r.dtype = e.at("dtype").get<std::string>();
      r.shape = e.at("shape").get<Shape>();
      r.frozen = e.at("frozen").get<bool>();
      const auto off = e.at("offset").get<std::uint64_t>(), n = e.at("nbytes").get<std::uint64_t>();
      if (payload + off + n > b.size()) throw StateError(what + ": tensor " + r.name + " runs past end of file");
      r.bytes = b.substr(payload + off, n);
      if (crc32_of(r.bytes) != e.at("crc32").get<std::uint32_t>())
        throw StateError(what + ": checksum mismatch in tensor " + r.name);
      ck.tensors.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw StateError(what + ": malformed header: " + e.what());
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  // Write-then-rename so an interrupted save never clobbers the last good file.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  io::detail::write_file(tmp, encode_checkpoint(ck));
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw StateError("checkpoint not found: " + path.string());
  return decode_checkpoint(io::detail::read_file(path), path.string());
}

// Loads and checks the config fingerprint.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_fingerprint) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.fingerprint != expected_fingerprint)
    throw StateError(path.string() + ": config fingerprint " + ck.fingerprint + " does not match " + expected_fingerprint);
  return ck;
}

template <typename T>
std::vector<TensorRecord> snapshot_tensors(const nn::ParameterSet<T>& ps) {
  std::vector<TensorRecord> out;
  for (const auto& e : ps.entries())
    out.push_back({e.name, dtype_tag<T>(), e.var.shape(), e.frozen, detail::encode_values(e.var.value())});
  return out;
}

// Copies every checkpoint tensor into the parameter set (names and shapes
// must match exactly) and restores the frozen flags.
template <typename T>
void restore_tensors(nn::ParameterSet<T>& ps, const Checkpoint& ck) {
  for (auto& e : ps.entries()) {
    const TensorRecord* r = ck.find(e.name);
    if (!r) throw StateError("checkpoint lacks tensor " + e.name);
    if (r->shape != e.var.shape())
      throw StateError("tensor " + e.name + ": checkpoint shape " + shape_str(r->shape) + " vs model " +
                       shape_str(e.var.shape()));
    e.var.mutable_value() = detail::decode_values<T>(*r);
    e.frozen = r->frozen;
    e.var.set_requires_grad(!r->frozen);
  }
  if (ck.tensors.size() != ps.entries().size()) throw StateError("checkpoint has tensors the model does not define");
}

}  // namespace ildiff::pipeline
