#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ssmvdm/core/tensor.hpp"

namespace ssmvdm {

// Clip container: "VVID", u16 version, then frames/channels/height/width as
// u32 little-endian, then frame-major f32 samples in [-1, 1]. In memory a
// clip is a rank-4 (L, C, H, W) float tensor.

constexpr char kVideoMagic[4] = {'V', 'V', 'I', 'D'};
constexpr std::uint16_t kVideoVersion = 1;

inline void write_video(const std::string& path, const Tensor<float>& video) {
  if (video.rank() != 4) throw DataError("write_video: expected (L, C, H, W), got " +
                                         shape_str(video.shape()));
  const float lo = video.flat().minCoeff(), hi = video.flat().maxCoeff();
  if (!(lo >= -1.0f && hi <= 1.0f))
    throw DataError("write_video: values must lie in [-1, 1], found " +
                    std::to_string(lo < -1.0f ? lo : hi));
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os.write(kVideoMagic, 4);
  const std::uint16_t version = kVideoVersion;
  os.write(reinterpret_cast<const char*>(&version), 2);
  for (Index axis = 0; axis < 4; ++axis) {
    const std::uint32_t v = static_cast<std::uint32_t>(video.extent(axis));
    os.write(reinterpret_cast<const char*>(&v), 4);
  }
  os.write(reinterpret_cast<const char*>(video.data()),
           static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(video.numel())));
  os.flush();
  if (!os) throw DataError("failed writing '" + path + "'");
}

inline Tensor<float> read_video(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open video '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kVideoMagic, 4) != 0)
    throw DataError("'" + path + "' is not a video file");
  std::uint16_t version = 0;
  is.read(reinterpret_cast<char*>(&version), 2);
  if (!is || version != kVideoVersion)
    throw DataError("'" + path + "' has unsupported video version " + std::to_string(version));
  std::uint32_t ext[4];
  is.read(reinterpret_cast<char*>(ext), 16);
  if (!is) throw DataError("'" + path + "': truncated header");
  for (std::uint32_t e : ext)
    if (e == 0) throw DataError("'" + path + "': zero extent in header");
  Tensor<float> video = Tensor<float>::empty(
      {static_cast<Index>(ext[0]), static_cast<Index>(ext[1]), static_cast<Index>(ext[2]),
       static_cast<Index>(ext[3])});
  const std::size_t want = sizeof(float) * static_cast<std::size_t>(video.numel());
  is.read(reinterpret_cast<char*>(video.data()), static_cast<std::streamsize>(want));
  const std::size_t got = static_cast<std::size_t>(is.gcount());
  if (got != want)
    throw DataError("'" + path + "': truncated payload, expected " + std::to_string(want) +
                    " bytes, got " + std::to_string(got));
  const float lo = video.flat().minCoeff(), hi = video.flat().maxCoeff();
  if (!(lo >= -1.0f && hi <= 1.0f))
    throw DataError("'" + path + "': payload values outside [-1, 1]");
  return video;
}

// Dataset directory: flat .vvid files plus a manifest listing them one per
// line as "<filename> <seed>". Missing manifest falls back to a sorted scan.
inline std::vector<std::string> list_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("dataset directory '" + dir + "' does not exist");
  std::vector<std::string> files;
  const fs::path manifest = fs::path(dir) / "manifest.txt";
  if (fs::exists(manifest)) {
    std::ifstream is(manifest);
    std::string line;
    while (std::getline(is, line)) {
      const auto sp = line.find(' ');
      const std::string name = sp == std::string::npos ? line : line.substr(0, sp);
      if (!name.empty()) files.push_back((fs::path(dir) / name).string());
    }
  } else {
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".vvid") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
  }
  if (files.empty()) throw DataError("dataset directory '" + dir + "' lists no videos");
  return files;
}

}  // namespace ssmvdm
