#pragma once

// Binary PPM (P6) and PGM (P5) with maxval 255. Values are quantized as
// round(v * 255).

#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <string_view>

#include "canet/data/image.hpp"

namespace canet {

class PnmParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::uint8_t quantize(double v) {
  if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("pixel value outside [0, 1]: " + std::to_string(v));
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

inline double dequantize(std::uint8_t b) { return static_cast<double>(b) / 255.0; }

namespace detail {

inline std::string encode_pnm(const Image& im, std::size_t channels, const char* magic) {
  if (im.channels != channels) {
    throw std::invalid_argument(std::string(magic) + " needs " + std::to_string(channels) + " channel(s), image has " +
                                std::to_string(im.channels));
  }
  std::string out = std::string(magic) + "\n" + std::to_string(im.width) + " " + std::to_string(im.height) + "\n255\n";
  out.reserve(out.size() + im.data.size());
  for (double v : im.data) out.push_back(static_cast<char>(quantize(v)));
  return out;
}

inline Image decode_pnm(std::string_view bytes, std::size_t channels, std::string_view magic) {
  if (bytes.size() < 2 || bytes.substr(0, 2) != magic) {
    throw PnmParseError("bad magic: expected " + std::string(magic));
  }
  std::size_t pos = 2;
  auto read_uint = [&](const char* what) -> std::size_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 24)) throw PnmParseError(std::string("header field too large: ") + what);
      ++pos;
    }
    if (pos == start) throw PnmParseError(std::string("malformed header: missing ") + what);
    return v;
  };
  const std::size_t w = read_uint("width");
  const std::size_t h = read_uint("height");
  const std::size_t maxval = read_uint("maxval");
  if (w == 0 || h == 0) throw PnmParseError("malformed dimensions " + std::to_string(w) + "x" + std::to_string(h));
  if (maxval != 255) throw PnmParseError("unsupported maxval " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw PnmParseError("malformed header: no separator before payload");
  }
  ++pos;
  const std::size_t expected = w * h * channels;
  const std::size_t actual = bytes.size() - pos;
  if (actual != expected) {
    throw PnmParseError("payload size mismatch: expected " + std::to_string(expected) + " bytes, got " +
                        std::to_string(actual));
  }
  Image im(h, w, channels);
  for (std::size_t i = 0; i < expected; ++i) im.data[i] = dequantize(static_cast<std::uint8_t>(bytes[pos + i]));
  return im;
}

}  // namespace detail

inline std::string encode_ppm(const Image& im) { return detail::encode_pnm(im, 3, "P6"); }
inline std::string encode_pgm(const Image& im) { return detail::encode_pnm(im, 1, "P5"); }
inline Image decode_ppm(std::string_view bytes) { return detail::decode_pnm(bytes, 3, "P6"); }
inline Image decode_pgm(std::string_view bytes) { return detail::decode_pnm(bytes, 1, "P5"); }

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline Image read_ppm(const std::filesystem::path& p) {
  try {
    return decode_ppm(read_file(p));
  } catch (const PnmParseError& e) {
    throw PnmParseError(p.string() + ": " + e.what());
  }
}

inline Image read_pgm(const std::filesystem::path& p) {
  try {
    return decode_pgm(read_file(p));
  } catch (const PnmParseError& e) {
    throw PnmParseError(p.string() + ": " + e.what());
  }
}

inline void write_ppm(const std::filesystem::path& p, const Image& im) { write_file(p, encode_ppm(im)); }
inline void write_pgm(const std::filesystem::path& p, const Image& im) { write_file(p, encode_pgm(im)); }

}  // namespace canet
