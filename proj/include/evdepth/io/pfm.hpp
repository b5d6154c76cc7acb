#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "evdepth/core/error.hpp"
#include "evdepth/depth/depth_map.hpp"

namespace evdepth {

// Grayscale PFM ("Pf"), scale -1.0 (little-endian), scanlines bottom-to-top.
// Invalid pixels are stored as 0, which the reader maps back to mask=0.
template <typename T>
void write_pfm(const DepthMap<T>& map, const std::string& path) {
  std::string buf;
  buf += "Pf\n";
  buf += std::to_string(map.width) + " " + std::to_string(map.height) + "\n";
  buf += "-1.0\n";
  const size_t row_bytes = static_cast<size_t>(map.width) * 4;
  std::vector<float> row(static_cast<size_t>(map.width));
  for (int y = map.height - 1; y >= 0; --y) {
    for (int x = 0; x < map.width; ++x)
      row[static_cast<size_t>(x)] =
          map.mask[static_cast<size_t>(y) * map.width + x]
              ? static_cast<float>(map.at(y, x))
              : 0.0f;
    const char* bytes = reinterpret_cast<const char*>(row.data());
    buf.append(bytes, row_bytes);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write PFM file: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing PFM file: " + path);
}

template <typename T>
DepthMap<T> read_pfm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open PFM file: " + path);
  std::string magic;
  in >> magic;
  if (magic != "Pf")
    throw IoError(path + ": expected grayscale PFM magic 'Pf', got '" + magic +
                  "'");
  int w = 0, h = 0;
  double scale = 0.0;
  in >> w >> h >> scale;
  if (!in || w <= 0 || h <= 0 || scale == 0.0)
    throw IoError(path + ": malformed PFM header");
  in.get();  // single whitespace byte before the raster
  if (scale > 0.0)
    throw IoError(path + ": big-endian PFM is not supported");
  DepthMap<T> map(w, h);
  std::vector<float> row(static_cast<size_t>(w));
  for (int y = h - 1; y >= 0; --y) {
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(static_cast<size_t>(w) * 4));
    if (!in) throw IoError(path + ": truncated PFM raster");
    for (int x = 0; x < w; ++x) {
      const float v = row[static_cast<size_t>(x)];
      const size_t i = static_cast<size_t>(y) * w + x;
      map.values[i] = static_cast<T>(v);
      map.mask[i] = std::isfinite(v) && v > 0.0f;
    }
  }
  return map;
}

}  // namespace evdepth
