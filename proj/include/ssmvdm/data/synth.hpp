#pragma once

#include <cmath>
#include <string>

#include "ssmvdm/core/rng.hpp"
#include "ssmvdm/core/tensor.hpp"

namespace ssmvdm {

enum class SynthKind { bouncing_shape, mirrored_sequence };

inline std::string synth_kind_name(SynthKind k) {
  return k == SynthKind::bouncing_shape ? "bouncing_shape" : "mirrored_sequence";
}

inline SynthKind parse_synth_kind(const std::string& s) {
  if (s == "bouncing_shape") return SynthKind::bouncing_shape;
  if (s == "mirrored_sequence") return SynthKind::mirrored_sequence;
  throw ConfigError("synth kind must be bouncing_shape or mirrored_sequence; got '" + s + "'");
}

struct SynthSpec {
  SynthKind kind = SynthKind::bouncing_shape;
  Index frames = 8;
  Index resolution = 16;
  Index channels = 1;
  double min_size = 3, max_size = 6;    // square side, pixels
  double min_speed = 0.5, max_speed = 2;  // per-axis displacement per frame
  std::uint64_t seed = 0;

  void validate() const {
    if (frames < 2) throw ConfigError("synth: need at least 2 frames");
    if (resolution < 8) throw ConfigError("synth: resolution must be at least 8");
    if (channels != 1 && channels != 3) throw ConfigError("synth: channels must be 1 or 3");
    if (!(min_size > 0) || min_size > max_size) throw ConfigError("synth: bad size range");
    if (max_size > static_cast<double>(resolution))
      throw ConfigError("synth: shape larger than the frame");
    if (min_speed < 0 || min_speed > max_speed) throw ConfigError("synth: bad speed range");
  }
};

namespace detail {

// Position after k frames of elastic bouncing on [0, m]: triangle wave of the
// free-flight position.
inline double bounce_coord(double start, double v, Index k, double m) {
  if (m <= 0) return 0;
  double p = std::fmod(start + v * static_cast<double>(k), 2 * m);
  if (p < 0) p += 2 * m;
  return p <= m ? p : 2 * m - p;
}

inline double overlap(double lo, double hi, double a, double b) {
  return std::max(0.0, std::min(hi, b) - std::max(lo, a));
}

}  // namespace detail

// One frame per row of motion; the square covers [x, x+size] x [y, y+size]
// and each pixel gets the covered area, so edges come out antialiased and
// the total mass stays size^2 in every frame.
inline Tensor<float> render_bouncing_clip(const SynthSpec& spec, double size, double x0, double y0,
                                          double vx, double vy) {
  // lighter than SynthSpec::validate so half-length intermediate clips render
  if (spec.frames < 1 || spec.resolution < 1) throw ConfigError("render: bad clip extents");
  if (!(size > 0) || size > static_cast<double>(spec.resolution))
    throw ConfigError("render: shape larger than the frame");
  const Index L = spec.frames, C = spec.channels, R = spec.resolution;
  const double m = static_cast<double>(R) - size;
  Tensor<float> video = Tensor<float>::full({L, C, R, R}, -1.0f);
  for (Index k = 0; k < L; ++k) {
    const double x = detail::bounce_coord(x0, vx, k, m);
    const double y = detail::bounce_coord(y0, vy, k, m);
    for (Index r = 0; r < R; ++r) {
      const double oy = detail::overlap(static_cast<double>(r), static_cast<double>(r + 1), y,
                                        y + size);
      if (oy == 0) continue;
      for (Index c = 0; c < R; ++c) {
        const double ox = detail::overlap(static_cast<double>(c), static_cast<double>(c + 1), x,
                                          x + size);
        if (ox == 0) continue;
        const float v = static_cast<float>(-1.0 + 2.0 * ox * oy);
        for (Index ch = 0; ch < C; ++ch) video[((k * C + ch) * R + r) * R + c] = v;
      }
    }
  }
  return video;
}

inline Tensor<float> gen_bouncing_shape(const SynthSpec& spec, Rng& rng) {
  spec.validate();
  const double size = rng.uniform_double(spec.min_size, spec.max_size);
  const double m = static_cast<double>(spec.resolution) - size;
  const double x0 = rng.uniform_double(0, m), y0 = rng.uniform_double(0, m);
  auto speed = [&] {
    const double v = rng.uniform_double(spec.min_speed, spec.max_speed);
    return rng.uniform_below(2) == 0 ? v : -v;
  };
  return render_bouncing_clip(spec, size, x0, y0, speed(), speed());
}

// First half is a bouncing clip; frame L-1-k is the horizontal mirror of
// frame k, so late frames are fully determined by early ones.
inline Tensor<float> gen_mirrored_sequence(const SynthSpec& spec, Rng& rng) {
  spec.validate();
  if (spec.frames % 2 != 0) throw ConfigError("mirrored sequence needs an even frame count");
  SynthSpec half = spec;
  half.frames = spec.frames / 2;
  const double size = rng.uniform_double(spec.min_size, spec.max_size);
  const double m = static_cast<double>(spec.resolution) - size;
  const double x0 = rng.uniform_double(0, m), y0 = rng.uniform_double(0, m);
  auto speed = [&] {
    const double v = rng.uniform_double(spec.min_speed, spec.max_speed);
    return rng.uniform_below(2) == 0 ? v : -v;
  };
  const double vx = speed(), vy = speed();
  Tensor<float> head = render_bouncing_clip(half, size, x0, y0, vx, vy);
  const Index L = spec.frames, C = spec.channels, R = spec.resolution;
  Tensor<float> video = Tensor<float>::empty({L, C, R, R});
  const Index frame = C * R * R;
  for (Index k = 0; k < L / 2; ++k) {
    std::copy_n(head.data() + k * frame, frame, video.data() + k * frame);
    float* dst = video.data() + (L - 1 - k) * frame;
    for (Index ch = 0; ch < C; ++ch)
      for (Index r = 0; r < R; ++r)
        for (Index c = 0; c < R; ++c)
          dst[(ch * R + r) * R + c] = head[((k * C + ch) * R + r) * R + (R - 1 - c)];
  }
  return video;
}

inline Tensor<float> gen_synth_video(const SynthSpec& spec, Rng& rng) {
  return spec.kind == SynthKind::bouncing_shape ? gen_bouncing_shape(spec, rng)
                                                : gen_mirrored_sequence(spec, rng);
}

}  // namespace ssmvdm
