#pragma once

#include <algorithm>
#include <array>
#include <string>

#include "ssmvdm/core/errors.hpp"
#include "ssmvdm/core/tensor.hpp"

namespace ssmvdm {

// Which layer mixes information across frames at each resolution.
enum class TemporalKind { ssm_bidirectional, ssm_unidirectional, attention, none };

inline std::string temporal_kind_name(TemporalKind k) {
  switch (k) {
    case TemporalKind::ssm_bidirectional: return "ssm_bidirectional";
    case TemporalKind::ssm_unidirectional: return "ssm_unidirectional";
    case TemporalKind::attention: return "attention";
    case TemporalKind::none: return "none";
  }
  throw ConfigError("unknown temporal kind");
}

inline TemporalKind parse_temporal_kind(const std::string& s) {
  if (s == "ssm_bidirectional") return TemporalKind::ssm_bidirectional;
  if (s == "ssm_unidirectional") return TemporalKind::ssm_unidirectional;
  if (s == "attention") return TemporalKind::attention;
  if (s == "none") return TemporalKind::none;
  throw ConfigError("temporal kind must be one of ssm_bidirectional, ssm_unidirectional, "
                    "attention, none; got '" + s + "'");
}

struct UNetConfig {
  Index in_channels = 1;
  Index base = 32;                     // stage widths are base * mult[i]
  std::array<Index, 4> mult{1, 2, 4, 8};
  TemporalKind temporal = TemporalKind::ssm_bidirectional;
  bool exact_zoh = false;
  Index frames = 8;                    // default clip length for data and sampling
  Index height = 16, width = 16;

  Index channels(int stage) const { return base * mult[static_cast<std::size_t>(stage)]; }
  Index heads() const { return std::max<Index>(1, base / 8); }
  Index temb_dim() const { return 4 * base; }

  // Three downsamplings, GroupNorm over 8 channel groups everywhere.
  void validate() const {
    if (in_channels < 1) throw ConfigError("unet: in_channels must be positive");
    if (base < 8 || base % 8 != 0) throw ConfigError("unet: base must be a positive multiple of 8");
    for (Index m : mult)
      if (m < 1) throw ConfigError("unet: multipliers must be positive");
    if (frames < 1) throw ConfigError("unet: frames must be positive");
    if (height < 8 || height % 8 != 0 || width < 8 || width % 8 != 0)
      throw ConfigError("unet: height and width must be multiples of 8");
  }
};

}  // namespace ssmvdm
