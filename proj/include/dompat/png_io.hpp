#ifndef DOMPAT_PNG_IO_HPP
#define DOMPAT_PNG_IO_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "dompat/common.hpp"

namespace dompat {

// Minimal 8-bit PNG writer: zlib handles deflate and CRC32, we assemble the
// chunks. channels: 1 = grayscale, 3 = RGB. `pixels` is row-major,
// interleaved, length w*h*channels.
inline void write_png8(const std::string& path, std::size_t w, std::size_t h, std::size_t channels,
                       const std::vector<unsigned char>& pixels) {
  if (channels != 1 && channels != 3) throw std::invalid_argument("write_png8: 1 or 3 channels required");
  if (pixels.size() != w * h * channels) throw std::invalid_argument("write_png8: pixel buffer size mismatch");

  // Filtered scanlines: filter byte 0 before each row.
  std::vector<unsigned char> raw;
  raw.reserve(h * (1 + w * channels));
  for (std::size_t r = 0; r < h; ++r) {
    raw.push_back(0);
    raw.insert(raw.end(), pixels.begin() + static_cast<std::ptrdiff_t>(r * w * channels),
               pixels.begin() + static_cast<std::ptrdiff_t>((r + 1) * w * channels));
  }

  uLongf zcap = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> zdata(zcap);
  if (compress2(zdata.data(), &zcap, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK) {
    throw io_error(io_errc::write_failed, "write_png8: deflate failed");
  }
  zdata.resize(zcap);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error(io_errc::open_failed, "cannot open '" + path + "' for writing");

  auto wr_be = [&out](std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  auto chunk = [&out, &wr_be](const char type[4], const std::vector<unsigned char>& payload) {
    wr_be(static_cast<std::uint32_t>(payload.size()));
    out.write(type, 4);
    if (!payload.empty()) out.write(reinterpret_cast<const char*>(payload.data()),
                                    static_cast<std::streamsize>(payload.size()));
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(type), 4);
    if (!payload.empty()) crc = crc32(crc, payload.data(), static_cast<uInt>(payload.size()));
    wr_be(static_cast<std::uint32_t>(crc));
  };

  static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  out.write(reinterpret_cast<const char*>(sig), 8);

  std::vector<unsigned char> ihdr(13);
  const std::uint32_t wu = static_cast<std::uint32_t>(w), hu = static_cast<std::uint32_t>(h);
  ihdr[0] = static_cast<unsigned char>(wu >> 24);
  ihdr[1] = static_cast<unsigned char>(wu >> 16);
  ihdr[2] = static_cast<unsigned char>(wu >> 8);
  ihdr[3] = static_cast<unsigned char>(wu);
  ihdr[4] = static_cast<unsigned char>(hu >> 24);
  ihdr[5] = static_cast<unsigned char>(hu >> 16);
  ihdr[6] = static_cast<unsigned char>(hu >> 8);
  ihdr[7] = static_cast<unsigned char>(hu);
  ihdr[8] = 8;                                         // bit depth
  ihdr[9] = channels == 1 ? 0 : 2;                     // color type: gray / truecolor
  ihdr[10] = ihdr[11] = ihdr[12] = 0;                  // compression, filter, interlace
  chunk("IHDR", ihdr);
  chunk("IDAT", zdata);
  chunk("IEND", {});
  if (!out) throw io_error(io_errc::write_failed, "write failed for '" + path + "'");
}

}  // namespace dompat

#endif  // DOMPAT_PNG_IO_HPP
