#pragma once

// Minimal PNG writer/reader over zlib: 8-bit grayscale or RGB, non-interlaced.
// Writes filter type 0 scanlines; reads all five standard filters.

#include <zlib.h>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace sgen::png {

struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;                 // 1 (gray) or 3 (RGB)
  std::vector<uint8_t> pixels;      // row-major, interleaved
};

namespace detail {

inline void put_u32be(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

inline uint32_t get_u32be(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

inline void append_chunk(std::vector<uint8_t>& out, const char type[4],
                         const std::vector<uint8_t>& data) {
  put_u32be(out, static_cast<uint32_t>(data.size()));
  size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  uint32_t crc = static_cast<uint32_t>(
      ::crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start)));
  put_u32be(out, crc);
}

inline uint8_t paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return static_cast<uint8_t>(a);
  if (pb <= pc) return static_cast<uint8_t>(b);
  return static_cast<uint8_t>(c);
}

}  // namespace detail

inline std::vector<uint8_t> encode(const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw std::invalid_argument("png: channels must be 1 or 3");
  if (img.width <= 0 || img.height <= 0) throw std::invalid_argument("png: empty image");
  size_t row = static_cast<size_t>(img.width) * img.channels;
  if (img.pixels.size() != row * img.height) throw std::invalid_argument("png: pixel count mismatch");

  // Raw scanlines, each prefixed with filter byte 0.
  std::vector<uint8_t> raw((row + 1) * img.height);
  for (int y = 0; y < img.height; ++y) {
    raw[y * (row + 1)] = 0;
    std::memcpy(raw.data() + y * (row + 1) + 1, img.pixels.data() + y * row, row);
  }

  uLongf zcap = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> zdata(zcap);
  if (compress2(zdata.data(), &zcap, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("png: deflate failed");
  zdata.resize(zcap);

  std::vector<uint8_t> out = {137, 80, 78, 71, 13, 10, 26, 10};
  std::vector<uint8_t> ihdr;
  detail::put_u32be(ihdr, static_cast<uint32_t>(img.width));
  detail::put_u32be(ihdr, static_cast<uint32_t>(img.height));
  ihdr.push_back(8);                                      // bit depth
  ihdr.push_back(img.channels == 1 ? 0 : 2);             // color type
  ihdr.push_back(0);                                      // compression
  ihdr.push_back(0);                                      // filter method
  ihdr.push_back(0);                                      // no interlace
  detail::append_chunk(out, "IHDR", ihdr);
  detail::append_chunk(out, "IDAT", zdata);
  detail::append_chunk(out, "IEND", {});
  return out;
}

inline Image decode(const std::vector<uint8_t>& bytes) {
  static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
    throw std::runtime_error("png: bad signature");

  Image img;
  std::vector<uint8_t> zdata;
  bool saw_ihdr = false, saw_iend = false;
  size_t pos = 8;
  while (pos + 8 <= bytes.size() && !saw_iend) {
    uint32_t len = detail::get_u32be(bytes.data() + pos);
    if (pos + 12 + len > bytes.size()) throw std::runtime_error("png: truncated chunk");
    const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
    const uint8_t* data = bytes.data() + pos + 8;
    uint32_t stored_crc = detail::get_u32be(data + len);
    uint32_t crc = static_cast<uint32_t>(::crc32(0L, bytes.data() + pos + 4, len + 4));
    if (crc != stored_crc) throw std::runtime_error("png: chunk crc mismatch");

    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw std::runtime_error("png: bad IHDR");
      img.width = static_cast<int>(detail::get_u32be(data));
      img.height = static_cast<int>(detail::get_u32be(data + 4));
      int depth = data[8], color = data[9], interlace = data[12];
      if (depth != 8) throw std::runtime_error("png: only 8-bit supported");
      if (color == 0) img.channels = 1;
      else if (color == 2) img.channels = 3;
      else throw std::runtime_error("png: only grayscale/RGB supported");
      if (interlace != 0) throw std::runtime_error("png: interlacing not supported");
      saw_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      zdata.insert(zdata.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_iend = true;
    }
    pos += 12 + len;
  }
  if (!saw_ihdr || !saw_iend || zdata.empty()) throw std::runtime_error("png: missing chunks");

  size_t row = static_cast<size_t>(img.width) * img.channels;
  std::vector<uint8_t> raw((row + 1) * img.height);
  uLongf rawlen = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &rawlen, zdata.data(), static_cast<uLong>(zdata.size())) != Z_OK ||
      rawlen != raw.size())
    throw std::runtime_error("png: inflate failed");

  img.pixels.assign(row * img.height, 0);
  int bpp = img.channels;  // bytes per pixel at depth 8
  for (int y = 0; y < img.height; ++y) {
    uint8_t filter = raw[y * (row + 1)];
    const uint8_t* src = raw.data() + y * (row + 1) + 1;
    uint8_t* cur = img.pixels.data() + y * row;
    const uint8_t* up = y > 0 ? img.pixels.data() + (y - 1) * row : nullptr;
    for (size_t x = 0; x < row; ++x) {
      int a = x >= static_cast<size_t>(bpp) ? cur[x - bpp] : 0;
      int b = up ? up[x] : 0;
      int c = (up && x >= static_cast<size_t>(bpp)) ? up[x - bpp] : 0;
      int v;
      switch (filter) {
        case 0: v = src[x]; break;
        case 1: v = src[x] + a; break;
        case 2: v = src[x] + b; break;
        case 3: v = src[x] + (a + b) / 2; break;
        case 4: v = src[x] + detail::paeth(a, b, c); break;
        default: throw std::runtime_error("png: unknown filter");
      }
      cur[x] = static_cast<uint8_t>(v & 0xff);
    }
  }
  return img;
}

inline void write_file(const std::string& path, const Image& img) {
  std::vector<uint8_t> bytes = encode(img);
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("png: cannot open for write: " + path);
  size_t n = std::fwrite(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  if (n != bytes.size()) throw std::runtime_error("png: short write: " + path);
}

inline Image read_file(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("png: cannot open for read: " + path);
  std::fseek(f, 0, SEEK_END);
  long sz = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  std::vector<uint8_t> bytes(static_cast<size_t>(sz));
  size_t n = std::fread(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  if (n != bytes.size()) throw std::runtime_error("png: short read: " + path);
  return decode(bytes);
}

}  // namespace sgen::png
