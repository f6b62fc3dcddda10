#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mbp/common.hpp"
#include "mbp/tensor.hpp"

// Minimal PNG codec on top of zlib: 8-bit RGB out, 8-bit gray/RGB/RGBA in,
// no interlacing, no palettes. Enough for the dataset layout this project
// reads and writes.

namespace mbp::png {

namespace detail {

inline void put_be32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

inline uint32_t get_be32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

inline void write_chunk(std::vector<uint8_t>& out, const char type[4],
                        const std::vector<uint8_t>& payload) {
  put_be32(out, static_cast<uint32_t>(payload.size()));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const uint32_t crc = ::crc32(0, out.data() + start, static_cast<uInt>(out.size() - start));
  put_be32(out, crc);
}

inline int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace detail

constexpr uint8_t kSignature[8] = {137, 80, 78, 71, 13, 10, 26, 10};

// Quantizes to 8-bit with round-half-up after clamping to [0,1].
template <typename T>
inline std::vector<uint8_t> encode_rgb8(const Tensor<T>& frame) {
  if (frame.shape().rank != 3 || frame.shape()[0] != 3)
    throw ContractError("png: expected a 3xHxW frame, got " + frame.shape().str());
  const int h = frame.shape()[1], w = frame.shape()[2];

  std::vector<uint8_t> raw(static_cast<size_t>(h) * (1 + 3 * w));
  for (int y = 0; y < h; ++y) {
    uint8_t* row = raw.data() + static_cast<size_t>(y) * (1 + 3 * w);
    row[0] = 0;  // filter: none
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = clamp01(static_cast<double>(frame.at(c, y, x)));
        row[1 + 3 * x + c] = static_cast<uint8_t>(v * 255.0 + 0.5);
      }
  }

  uLongf bound = ::compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> compressed(bound);
  if (::compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw IoError("png: deflate failed");
  compressed.resize(bound);

  std::vector<uint8_t> out(kSignature, kSignature + 8);
  std::vector<uint8_t> ihdr;
  detail::put_be32(ihdr, static_cast<uint32_t>(w));
  detail::put_be32(ihdr, static_cast<uint32_t>(h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: truecolor
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // interlace
  detail::write_chunk(out, "IHDR", ihdr);
  detail::write_chunk(out, "IDAT", compressed);
  detail::write_chunk(out, "IEND", {});
  return out;
}

template <typename T>
inline void write_rgb8(const std::string& path, const Tensor<T>& frame) {
  const std::vector<uint8_t> bytes = encode_rgb8(frame);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("png: cannot open " + path + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("png: short write to " + path);
}

template <typename T>
inline Tensor<T> decode(const std::vector<uint8_t>& bytes, const std::string& origin = "png") {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kSignature, 8) != 0)
    throw IoError(origin + ": not a PNG file");

  uint32_t w = 0, h = 0;
  int bit_depth = 0, color_type = 0, interlace = 0;
  std::vector<uint8_t> idat;
  size_t pos = 8;
  bool saw_end = false;
  while (pos + 12 <= bytes.size()) {
    const uint32_t len = detail::get_be32(&bytes[pos]);
    if (pos + 12 + len > bytes.size()) throw IoError(origin + ": truncated chunk");
    const char* type = reinterpret_cast<const char*>(&bytes[pos + 4]);
    const uint8_t* payload = &bytes[pos + 8];
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw IoError(origin + ": bad IHDR");
      w = detail::get_be32(payload);
      h = detail::get_be32(payload + 4);
      bit_depth = payload[8];
      color_type = payload[9];
      interlace = payload[12];
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_end = true;
      break;
    }
    pos += 12 + len;
  }
  if (w == 0 || h == 0 || !saw_end) throw IoError(origin + ": missing IHDR or IEND");
  if (bit_depth != 8) throw IoError(origin + ": only 8-bit PNGs are supported");
  if (interlace != 0) throw IoError(origin + ": interlaced PNGs are not supported");
  int channels;
  switch (color_type) {
    case 0: channels = 1; break;
    case 2: channels = 3; break;
    case 6: channels = 4; break;
    default:
      throw IoError(origin + ": unsupported color type " + std::to_string(color_type));
  }

  const size_t stride = static_cast<size_t>(w) * channels;
  std::vector<uint8_t> raw(static_cast<size_t>(h) * (stride + 1));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  const int zrc = ::uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size()));
  if (zrc != Z_OK || raw_len != raw.size()) throw IoError(origin + ": inflate failed");

  // undo per-row filters in place
  std::vector<uint8_t> prev(stride, 0);
  for (uint32_t y = 0; y < h; ++y) {
    uint8_t* row = raw.data() + static_cast<size_t>(y) * (stride + 1);
    const uint8_t filter = row[0];
    uint8_t* cur = row + 1;
    for (size_t i = 0; i < stride; ++i) {
      const int left = i >= static_cast<size_t>(channels) ? cur[i - channels] : 0;
      const int up = prev[i];
      const int ul = i >= static_cast<size_t>(channels) ? prev[i - channels] : 0;
      int v = cur[i];
      switch (filter) {
        case 0: break;
        case 1: v += left; break;
        case 2: v += up; break;
        case 3: v += (left + up) / 2; break;
        case 4: v += detail::paeth(left, up, ul); break;
        default:
          throw IoError(origin + ": unknown filter " + std::to_string(filter));
      }
      cur[i] = static_cast<uint8_t>(v);
    }
    std::memcpy(prev.data(), cur, stride);
  }

  Tensor<T> out(Shape{3, static_cast<int>(h), static_cast<int>(w)});
  for (uint32_t y = 0; y < h; ++y) {
    const uint8_t* cur = raw.data() + static_cast<size_t>(y) * (stride + 1) + 1;
    for (uint32_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const int src = channels == 1 ? 0 : c;
        out.at(c, static_cast<int>(y), static_cast<int>(x)) =
            static_cast<T>(cur[x * channels + src] / 255.0);
      }
  }
  return out;
}

template <typename T>
inline Tensor<T> read(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("png: cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode<T>(bytes, path);
}

}  // namespace mbp::png
