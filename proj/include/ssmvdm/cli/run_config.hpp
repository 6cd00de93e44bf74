#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ssmvdm/core/errors.hpp"
#include "ssmvdm/data/synth.hpp"
#include "ssmvdm/unet/config.hpp"

namespace ssmvdm {

// Everything a run needs, read from a flat key=value file.  One struct
// serves all subcommands; each command reads the slice it cares about.
struct RunConfig {
  std::string dataset_dir = "data";
  SynthKind synth_kind = SynthKind::bouncing_shape;
  std::int64_t n_videos = 16;
  Index L = 8;
  Index resolution = 16;
  Index channels = 1;

  TemporalKind temporal_kind = TemporalKind::ssm_bidirectional;
  Index base_channels = 32;
  std::array<Index, 4> multipliers{1, 2, 4, 8};
  bool exact_zoh = false;

  Index T = 256;
  double beta_start = 1e-4, beta_end = 0.02;
  double lr = 1e-5;
  double lr_final = -1;  // < 0 keeps lr constant; otherwise linear anneal to this
  Index batch = 8;
  std::int64_t steps = 500;
  std::int64_t ckpt_every = 500;
  double ema_decay = 0.9999;
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  std::vector<Index> bench_lengths{64, 128, 256, 512};
  Index bench_groups = 64;
  Index bench_channels = 64;
  int bench_reps = 3;
  std::size_t mem_limit_mb = 0;  // bench allocation budget, 0 = unlimited

  UNetConfig unet_config() const {
    UNetConfig u;
    u.in_channels = channels;
    u.base = base_channels;
    u.mult = multipliers;
    u.temporal = temporal_kind;
    u.exact_zoh = exact_zoh;
    u.frames = L;
    u.height = resolution;
    u.width = resolution;
    return u;
  }

  void validate() const {
    if (n_videos < 0) throw ConfigError("config: n_videos must be non-negative");
    if (L < 1) throw ConfigError("config: L must be positive");
    if (resolution < 1) throw ConfigError("config: resolution must be positive");
    if (channels != 1 && channels != 3) throw ConfigError("config: channels must be 1 or 3");
    for (Index m : multipliers)
      if (m < 1) throw ConfigError("config: multipliers must be positive");
    if (T < 1) throw ConfigError("config: T must be positive");
    if (!(beta_start > 0) || beta_start > beta_end || beta_end >= 1)
      throw ConfigError("config: need 0 < beta_start <= beta_end < 1");
    if (!(lr > 0)) throw ConfigError("config: lr must be positive");
    if (lr_final >= 0 && lr_final > lr)
      throw ConfigError("config: lr_final must not exceed lr");
    if (batch < 1) throw ConfigError("config: batch must be positive");
    if (steps < 0) throw ConfigError("config: steps must be non-negative");
    if (ckpt_every < 1) throw ConfigError("config: ckpt_every must be positive");
    if (ema_decay < 0 || ema_decay >= 1) throw ConfigError("config: ema_decay must lie in [0, 1)");
    if (bench_lengths.empty()) throw ConfigError("config: bench_lengths must not be empty");
    for (Index l : bench_lengths)
      if (l < 1) throw ConfigError("config: bench lengths must be positive");
    if (bench_groups < 1 || bench_channels < 1)
      throw ConfigError("config: bench_groups and bench_channels must be positive");
    if (bench_reps < 1) throw ConfigError("config: bench_reps must be positive");
  }
};

namespace detail {

inline std::string cfg_trim(const std::string& s) {
  const std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::int64_t cfg_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const std::int64_t x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' needs an integer, got '" + v + "'");
  }
}

inline std::uint64_t cfg_u64(const std::string& key, const std::string& v) {
  const std::int64_t x = cfg_int(key, v);
  if (x < 0) throw ConfigError("config: key '" + key + "' must be non-negative, got '" + v + "'");
  return static_cast<std::uint64_t>(x);
}

inline double cfg_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' needs a number, got '" + v + "'");
  }
}

inline bool cfg_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError("config: key '" + key + "' needs 0/1/true/false, got '" + v + "'");
}

inline std::vector<Index> cfg_index_list(const std::string& key, const std::string& v) {
  std::vector<Index> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(cfg_int(key, cfg_trim(item)));
  if (out.empty()) throw ConfigError("config: key '" + key + "' needs a comma-separated list");
  return out;
}

}  // namespace detail

inline void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
  using namespace detail;
  if (key == "dataset_dir") cfg.dataset_dir = value;
  else if (key == "synth_kind") cfg.synth_kind = parse_synth_kind(value);
  else if (key == "n_videos") cfg.n_videos = cfg_int(key, value);
  else if (key == "L") cfg.L = cfg_int(key, value);
  else if (key == "resolution") cfg.resolution = cfg_int(key, value);
  else if (key == "channels") cfg.channels = cfg_int(key, value);
  else if (key == "temporal_kind") cfg.temporal_kind = parse_temporal_kind(value);
  else if (key == "base_channels") cfg.base_channels = cfg_int(key, value);
  else if (key == "multipliers") {
    const auto list = cfg_index_list(key, value);
    if (list.size() != 4)
      throw ConfigError("config: multipliers needs exactly 4 entries, got " +
                        std::to_string(list.size()));
    std::copy(list.begin(), list.end(), cfg.multipliers.begin());
  } else if (key == "exact_zoh") cfg.exact_zoh = cfg_bool(key, value);
  else if (key == "T") cfg.T = cfg_int(key, value);
  else if (key == "beta_start") cfg.beta_start = cfg_real(key, value);
  else if (key == "beta_end") cfg.beta_end = cfg_real(key, value);
  else if (key == "lr") cfg.lr = cfg_real(key, value);
  else if (key == "lr_final") cfg.lr_final = cfg_real(key, value);
  else if (key == "batch") cfg.batch = cfg_int(key, value);
  else if (key == "steps") cfg.steps = cfg_int(key, value);
  else if (key == "ckpt_every") cfg.ckpt_every = cfg_int(key, value);
  else if (key == "ema_decay") cfg.ema_decay = cfg_real(key, value);
  else if (key == "seed") cfg.seed = cfg_u64(key, value);
  else if (key == "out_dir") cfg.out_dir = value;
  else if (key == "bench_lengths") cfg.bench_lengths = cfg_index_list(key, value);
  else if (key == "bench_groups") cfg.bench_groups = cfg_int(key, value);
  else if (key == "bench_channels") cfg.bench_channels = cfg_int(key, value);
  else if (key == "bench_reps") cfg.bench_reps = static_cast<int>(cfg_int(key, value));
  else if (key == "mem_limit_mb") cfg.mem_limit_mb = cfg_u64(key, value);
  else throw ConfigError("config: unknown key '" + key + "'");
}

// Lines of `key = value`; blank lines and #-comments skipped; every key at
// most once so a stale duplicate can never silently win.
inline RunConfig parse_run_config(std::istream& in) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::cfg_trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + " is not key=value: '" + t +
                        "'");
    const std::string key = detail::cfg_trim(t.substr(0, eq));
    const std::string value = detail::cfg_trim(t.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config: line " + std::to_string(lineno) + " has an empty key");
    if (!seen.insert(key).second)
      throw ConfigError("config: duplicate key '" + key + "'");
    apply_config_entry(cfg, key, value);
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  return parse_run_config(in);
}

}  // namespace ssmvdm
