#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ssmvdm/data/image_export.hpp"
#include "ssmvdm/data/synth.hpp"
#include "ssmvdm/data/video_file.hpp"

using namespace ssmvdm;

namespace {

SynthSpec tiny_spec() {
  SynthSpec s;
  s.frames = 6;
  s.resolution = 16;
  s.min_size = 3;
  s.max_size = 5;
  return s;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("video write/read round trip is bit-identical") {
  Rng rng(1);
  auto v = gen_bouncing_shape(tiny_spec(), rng);
  const std::string path = "/tmp/clip_rt.vvid";
  write_video(path, v);
  auto back = read_video(path);
  REQUIRE(back.shape() == v.shape());
  for (Index i = 0; i < v.numel(); ++i) REQUIRE(back[i] == v[i]);
  write_video(path + ".b", back);
  CHECK(slurp(path) == slurp(path + ".b"));
  std::remove(path.c_str());
  std::remove((path + ".b").c_str());
}

TEST_CASE("video writer rejects out-of-range values") {
  auto v = Tensor<float>::zeros({2, 1, 4, 4});
  v[3] = 1.5f;
  CHECK_THROWS_AS(write_video("/tmp/clip_bad.vvid", v), DataError);
}

TEST_CASE("video reader flags junk and truncation") {
  CHECK_THROWS_AS(read_video("/tmp/no_such_clip.vvid"), DataError);
  const std::string path = "/tmp/clip_trunc.vvid";
  {
    std::ofstream os(path, std::ios::binary);
    os << "JPEG nope";
  }
  CHECK_THROWS_AS(read_video(path), DataError);
  Rng rng(2);
  write_video(path, gen_bouncing_shape(tiny_spec(), rng));
  auto bytes = slurp(path);
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 101));
  }
  try {
    read_video(path);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    // message names expected vs actual payload byte counts
    CHECK(std::string(e.what()).find("expected") != std::string::npos);
    CHECK(std::string(e.what()).find("got") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("still shape gives identical frames") {
  SynthSpec s = tiny_spec();
  auto v = render_bouncing_clip(s, 4.0, 5.3, 2.7, 0.0, 0.0);
  const Index frame = 16 * 16;
  for (Index k = 1; k < s.frames; ++k)
    for (Index i = 0; i < frame; ++i) CHECK(v[k * frame + i] == v[i]);
}

TEST_CASE("unit horizontal velocity shifts the frame one pixel right") {
  SynthSpec s = tiny_spec();
  s.frames = 2;
  auto v = render_bouncing_clip(s, 4.0, 3.0, 6.0, 1.0, 0.0);
  for (Index r = 0; r < 16; ++r)
    for (Index c = 1; c < 16; ++c)
      CHECK(v[16 * 16 + r * 16 + c] == v[r * 16 + c - 1]);
}

TEST_CASE("covered area is conserved across bounces") {
  SynthSpec s = tiny_spec();
  s.frames = 64;  // long horizon, many wall hits
  s.max_speed = 3;
  Rng rng(3);
  const double size = 4.37;
  auto v = render_bouncing_clip(s, size, 1.0, 9.0, 2.6, -1.9);
  const Index frame = 16 * 16;
  for (Index k = 0; k < s.frames; ++k) {
    double mass = 0;
    for (Index i = 0; i < frame; ++i) mass += (v[k * frame + i] + 1.0) / 2.0;
    CHECK(mass == doctest::Approx(size * size).epsilon(1e-6));
  }
}

TEST_CASE("shape values stay in range and the generator is seed-deterministic") {
  SynthSpec s = tiny_spec();
  Rng a(42), b(42), c(43);
  auto va = gen_bouncing_shape(s, a);
  auto vb = gen_bouncing_shape(s, b);
  auto vc = gen_bouncing_shape(s, c);
  CHECK(va.flat().minCoeff() >= -1.0f);
  CHECK(va.flat().maxCoeff() <= 1.0f);
  bool same = true, diff = false;
  for (Index i = 0; i < va.numel(); ++i) {
    same = same && va[i] == vb[i];
    diff = diff || va[i] != vc[i];
  }
  CHECK(same);
  CHECK(diff);
}

TEST_CASE("synth spec validation") {
  SynthSpec s = tiny_spec();
  s.frames = 1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = tiny_spec();
  s.max_size = 20;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = tiny_spec();
  s.resolution = 4;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK_THROWS_AS(parse_synth_kind("brownian"), ConfigError);
  CHECK(parse_synth_kind("mirrored_sequence") == SynthKind::mirrored_sequence);
}

TEST_CASE("mirrored sequence pairs frames with their exact mirror") {
  SynthSpec s = tiny_spec();
  s.kind = SynthKind::mirrored_sequence;
  s.frames = 8;
  Rng rng(4);
  auto v = gen_mirrored_sequence(s, rng);
  const Index R = 16, frame = R * R;
  for (Index k = 0; k < 8; ++k)
    for (Index r = 0; r < R; ++r)
      for (Index c = 0; c < R; ++c)
        CHECK(v[k * frame + r * R + c] == v[(7 - k) * frame + r * R + (R - 1 - c)]);

  // correlation between a frame and its flipped partner is exactly 1
  for (Index k = 0; k < 4; ++k) {
    double sxy = 0, sxx = 0, syy = 0, sx = 0, sy = 0;
    for (Index r = 0; r < R; ++r)
      for (Index c = 0; c < R; ++c) {
        const double x = v[k * frame + r * R + c];
        const double y = v[(7 - k) * frame + r * R + (R - 1 - c)];
        sx += x, sy += y, sxx += x * x, syy += y * y, sxy += x * y;
      }
    const double n = frame;
    const double cov = sxy / n - (sx / n) * (sy / n);
    const double vx = sxx / n - (sx / n) * (sx / n), vy = syy / n - (sy / n) * (sy / n);
    CHECK(cov / std::sqrt(vx * vy) == doctest::Approx(1.0).epsilon(1e-12));
  }

  s.frames = 7;
  CHECK_THROWS_AS(gen_mirrored_sequence(s, rng), ConfigError);
  s.frames = 2;
  auto v2 = gen_mirrored_sequence(s, rng);
  for (Index r = 0; r < R; ++r)
    for (Index c = 0; c < R; ++c) CHECK(v2[r * R + c] == v2[frame + r * R + (R - 1 - c)]);
}

TEST_CASE("frame export quantization endpoints") {
  CHECK(quantize_unit(-1.0f) == 0);
  CHECK(quantize_unit(1.0f) == 255);
  CHECK(quantize_unit(0.0f) == 128);  // half rounds up
  CHECK(quantize_unit(-2.0f) == 0);
  CHECK(quantize_unit(2.0f) == 255);
  for (int b = 0; b <= 255; ++b) {
    const float v = static_cast<float>(b) / 255.0f * 2.0f - 1.0f;
    CHECK(quantize_unit(v) == b);  // round trip within one quantization step
  }
}

TEST_CASE("export writes one image per frame") {
  Rng rng(5);
  auto v = gen_bouncing_shape(tiny_spec(), rng);
  const std::string dir = "/tmp/frames_x";
  auto paths = export_frames_pgm(v, dir);
  REQUIRE(paths.size() == 6);
  auto head = slurp(paths[0]);
  CHECK(head.substr(0, 3) == "P5\n");
  CHECK(head.size() > 256);  // header + 16x16 payload
  auto bad = Tensor<float>::zeros({2, 2, 4, 4});
  CHECK_THROWS_AS(export_frames_pgm(bad, dir), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("dataset listing prefers the manifest") {
  namespace fs = std::filesystem;
  const std::string dir = "/tmp/ds_list";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Rng rng(6);
  auto v = gen_bouncing_shape(tiny_spec(), rng);
  write_video(dir + "/b.vvid", v);
  write_video(dir + "/a.vvid", v);
  {
    std::ofstream os(dir + "/manifest.txt");
    os << "b.vvid 123\n" << "a.vvid 456\n";
  }
  auto files = list_dataset(dir);
  REQUIRE(files.size() == 2);
  CHECK(files[0].find("b.vvid") != std::string::npos);
  CHECK(files[1].find("a.vvid") != std::string::npos);
  fs::remove_all(dir);
  CHECK_THROWS_AS(list_dataset(dir), DataError);
}
