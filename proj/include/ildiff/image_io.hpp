#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "ildiff/image.hpp"

namespace ildiff::io {

static_assert(std::endian::native == std::endian::little, "raw float I/O assumes a little-endian host");

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failure on " + path.string());
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failure on " + path.string());
}

// Next whitespace-delimited PNM header token, skipping '#' comments.
inline std::string pnm_token(const std::string& s, std::size_t& pos) {
  for (;;) {
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    if (pos < s.size() && s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  const std::size_t start = pos;
  while (pos < s.size() && !std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
  return s.substr(start, pos - start);
}

inline std::uint32_t get_u32(const std::string& b, std::size_t off) {
  std::uint32_t v;
  std::memcpy(&v, b.data() + off, 4);
  return v;
}

}  // namespace detail

inline constexpr std::array<char, 4> kRawMagic{'I', 'L', 'D', '1'};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Raw float grid: "ILD1", u32 height, u32 width, row-major f32 payload.
inline std::string encode_raw(const RealGrid& g) {
  std::string out(kRawMagic.begin(), kRawMagic.end());
  const std::uint32_t h = static_cast<std::uint32_t>(g.height), w = static_cast<std::uint32_t>(g.width);
  out.append(reinterpret_cast<const char*>(&h), 4);
  out.append(reinterpret_cast<const char*>(&w), 4);
  for (double v : g.values) {
    const float f = static_cast<float>(v);
    out.append(reinterpret_cast<const char*>(&f), 4);
  }
  return out;
}

inline RealGrid decode_raw(const std::string& b, const std::string& what = "raw grid") {
  if (b.size() < 12 || std::memcmp(b.data(), kRawMagic.data(), 4) != 0) throw FormatError(what + ": missing ILD1 magic");
  const std::uint32_t h = detail::get_u32(b, 4), w = detail::get_u32(b, 8);
  const std::size_t n = static_cast<std::size_t>(h) * w;
  if (b.size() != 12 + 4 * n) throw FormatError(what + ": payload size does not match header");
  RealGrid g(static_cast<int>(h), static_cast<int>(w));
  for (std::size_t i = 0; i < n; ++i) {
    float f;
    std::memcpy(&f, b.data() + 12 + 4 * i, 4);
    g.values[i] = f;
  }
  return g;
}

inline void save_raw(const RealGrid& g, const std::filesystem::path& path) { detail::write_file(path, encode_raw(g)); }
inline RealGrid load_raw(const std::filesystem::path& path) { return decode_raw(detail::read_file(path), path.string()); }

// 8-bit binary PGM (P5). Stored byte = round(v * 255).
inline void save_image(const UltrasoundImage& image, const std::filesystem::path& path) {
  std::string out = "P5\n" + std::to_string(image.width()) + " " + std::to_string(image.height()) + "\n255\n";
  out.reserve(out.size() + image.pixels().size());
  for (double v : image.pixels()) out.push_back(static_cast<char>(to_byte(v)));
  detail::write_file(path, out);
}

// Min-max normalized 8-bit rendering of an arbitrary grid, for inspection.
inline void save_grid_preview(const RealGrid& g, const std::filesystem::path& path) {
  double lo = g.values.empty() ? 0.0 : g.values[0], hi = lo;
  for (double v : g.values) lo = std::min(lo, v), hi = std::max(hi, v);
  const double span = hi > lo ? hi - lo : 1.0;
  std::vector<double> norm(g.values.size());
  for (std::size_t i = 0; i < norm.size(); ++i) norm[i] = (g.values[i] - lo) / span;
  std::string out = "P5\n" + std::to_string(g.width) + " " + std::to_string(g.height) + "\n255\n";
  for (double v : norm) out.push_back(static_cast<char>(to_byte(v)));
  detail::write_file(path, out);
}

inline UltrasoundImage decode_pgm(const std::string& b, const std::string& what) {
  std::size_t pos = 0;
  const std::string magic = detail::pnm_token(b, pos);
  if (magic == "P3" || magic == "P6") throw FormatError(what + ": colour raster, expected grayscale");
  if (magic != "P5") throw FormatError(what + ": not a binary grayscale PGM");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(detail::pnm_token(b, pos));
    h = std::stoi(detail::pnm_token(b, pos));
    maxval = std::stoi(detail::pnm_token(b, pos));
  } catch (const std::exception&) {
    throw FormatError(what + ": malformed PGM header");
  }
  if (maxval != 255) throw FormatError(what + ": only 8-bit PGM supported");
  ++pos;  // single whitespace byte after maxval
  const std::size_t n = static_cast<std::size_t>(w) * h;
  if (w <= 0 || h <= 0 || b.size() < pos + n) throw FormatError(what + ": truncated PGM payload");
  std::vector<double> px(n);
  for (std::size_t i = 0; i < n; ++i) px[i] = static_cast<unsigned char>(b[pos + i]) / 255.0;
  return UltrasoundImage(h, w, std::move(px));
}

// Loads an 8-bit grayscale PGM or an ILD1 raw grid (detected by magic).
inline UltrasoundImage load_image(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file(path);
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kRawMagic.data(), 4) == 0) {
    RealGrid g = decode_raw(bytes, path.string());
    for (double v : g.values)
      if (!(v >= 0.0 && v <= 1.0)) throw FormatError(path.string() + ": raw image pixel outside [0,1]");
    return UltrasoundImage(g.height, g.width, std::move(g.values));
  }
  return decode_pgm(bytes, path.string());
}

// Writes raw floats for ".ild", an 8-bit PGM otherwise.
inline void save_any(const UltrasoundImage& image, const std::filesystem::path& path) {
  if (path.extension() == ".ild")
    save_raw(image.grid(), path);
  else
    save_image(image, path);
}

}  // namespace ildiff::io
