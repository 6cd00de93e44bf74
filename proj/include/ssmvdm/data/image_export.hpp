#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ssmvdm/core/tensor.hpp"

namespace ssmvdm {

// [-1, 1] -> [0, 255], round half up: -1 -> 0, 0 -> 128, 1 -> 255.
inline std::uint8_t quantize_unit(float v) {
  const double c = std::clamp(static_cast<double>(v), -1.0, 1.0);
  return static_cast<std::uint8_t>(std::floor((c + 1.0) * 127.5 + 0.5));
}

// One binary PGM (1 channel) or PPM (3 channels) per frame, named
// frame_0000.pgm and so on. Returns the written paths in frame order.
inline std::vector<std::string> export_frames_pgm(const Tensor<float>& video,
                                                  const std::string& dir) {
  if (video.rank() != 4) throw DataError("export_frames: expected (L, C, H, W)");
  const Index L = video.extent(0), C = video.extent(1), H = video.extent(2), W = video.extent(3);
  if (C != 1 && C != 3)
    throw DataError("export_frames: " + std::to_string(C) + " channels unsupported, need 1 or 3");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory '" + dir + "'");
  std::vector<std::string> paths;
  for (Index k = 0; k < L; ++k) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04d.%s", static_cast<int>(k), C == 1 ? "pgm" : "ppm");
    const std::string path = (fs::path(dir) / name).string();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open '" + path + "' for writing");
    os << (C == 1 ? "P5" : "P6") << "\n" << W << " " << H << "\n255\n";
    std::vector<std::uint8_t> row(static_cast<std::size_t>(W * C));
    for (Index r = 0; r < H; ++r) {
      for (Index c = 0; c < W; ++c)
        for (Index ch = 0; ch < C; ++ch)
          row[static_cast<std::size_t>(c * C + ch)] =
              quantize_unit(video[((k * C + ch) * H + r) * W + c]);
      os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!os) throw DataError("failed writing '" + path + "'");
    paths.push_back(path);
  }
  return paths;
}

}  // namespace ssmvdm
