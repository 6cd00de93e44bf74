#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "ssmvdm/core/errors.hpp"
#include "ssmvdm/core/memory.hpp"
#include "ssmvdm/core/rng.hpp"
#include "ssmvdm/unet/unet.hpp"

namespace ssmvdm {

// One measured point of the layer-scaling sweep.  `failed` marks a length
// where the forward blew through the allocation budget; peak_bytes and
// wall_ns are only meaningful when it is false.
struct BenchRecord {
  TemporalKind layer = TemporalKind::none;
  Index L = 0;
  Index groups = 0;
  Index channels = 0;
  bool failed = false;
  std::size_t peak_bytes = 0;
  std::uint64_t wall_ns = 0;
};

// Times one temporal-layer forward on a (groups, L, channels) batch in eval
// mode.  Parameters and the input are allocated before the trace opens, so
// peak_bytes counts only tensors the forward itself materializes; that makes
// the peak a pure function of the shapes and identical across runs.  wall_ns
// is the median of `reps` timed passes (lower median for even reps).  A
// nonzero byte_limit arms the trace budget; breaching it raises a
// CapacityError tagged with the offending L.
inline BenchRecord measure_layer(TemporalKind kind, Index L, Index groups, Index channels,
                                 int reps = 3, std::size_t byte_limit = 0) {
  if (kind == TemporalKind::none)
    throw ConfigError("bench: temporal kind 'none' has nothing to measure");
  if (L < 1 || groups < 1 || channels < 1)
    throw ConfigError("bench: L, groups and channels must be positive");
  if (reps < 1) throw ConfigError("bench: reps must be positive");

  Rng rng(0x5eedULL);
  const Index heads = std::max<Index>(1, channels / 8);
  const TemporalLayerParams<float> params =
      make_temporal_layer<float>(rng.fork(temporal_kind_name(kind)), channels, kind, heads, false);
  Rng rin = rng.fork("input");
  const Tensor<float> x = gaussian_sample<float>(rin, {groups, L, channels});

  NoGradGuard eval;
  (void)temporal_layer_forward(params, make_const(x));  // warm-up, untraced

  BenchRecord rec;
  rec.layer = kind;
  rec.L = L;
  rec.groups = groups;
  rec.channels = channels;

  std::vector<std::uint64_t> walls;
  walls.reserve(static_cast<std::size_t>(reps));
  for (int r = 0; r < reps; ++r) {
    try {
      ScopedMemoryTrace trace(byte_limit);
      const auto t0 = std::chrono::steady_clock::now();
      Var<float> y = temporal_layer_forward(params, make_const(x));
      const auto t1 = std::chrono::steady_clock::now();
      rec.peak_bytes = trace.peak_bytes();
      walls.push_back(static_cast<std::uint64_t>(
          std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
    } catch (const CapacityError& e) {
      throw CapacityError(e.what(), L);
    }
  }
  std::sort(walls.begin(), walls.end());
  rec.wall_ns = walls[(walls.size() - 1) / 2];
  return rec;
}

// Least-squares slope of log(peak_bytes) against log(L).  Failed rows are
// skipped; at least four distinct lengths must survive or the fit is refused
// (three points cannot distinguish a power law from mere growth).
inline double fit_scaling_exponent(const std::vector<BenchRecord>& records) {
  std::vector<double> xs, ys;
  std::set<Index> lengths;
  for (const BenchRecord& r : records) {
    if (r.failed) continue;
    if (r.L < 1 || r.peak_bytes == 0)
      throw DataError("bench: cannot fit a record with L=" + std::to_string(r.L) +
                      ", peak_bytes=" + std::to_string(r.peak_bytes));
    lengths.insert(r.L);
    xs.push_back(std::log(static_cast<double>(r.L)));
    ys.push_back(std::log(static_cast<double>(r.peak_bytes)));
  }
  if (lengths.size() < 4)
    throw ConfigError("bench: exponent fit needs at least 4 distinct lengths, got " +
                      std::to_string(lengths.size()));
  const double n = static_cast<double>(xs.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  return sxy / sxx;
}

inline constexpr const char* kBenchCsvHeader = "layer,L,groups,channels,peak_bytes,wall_ns";

// Failed rows keep the schema: the two measurement columns hold "failed".
inline void write_bench_csv(const std::vector<BenchRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("bench: cannot open " + path + " for writing");
  out << kBenchCsvHeader << "\n";
  for (const BenchRecord& r : records) {
    out << temporal_kind_name(r.layer) << "," << r.L << "," << r.groups << "," << r.channels
        << ",";
    if (r.failed)
      out << "failed,failed";
    else
      out << r.peak_bytes << "," << r.wall_ns;
    out << "\n";
  }
  if (!out.flush()) throw DataError("bench: write to " + path + " failed");
}

namespace detail {

inline std::uint64_t bench_parse_u64(const std::string& field, const std::string& what) {
  if (field.empty() || field.find_first_not_of("0123456789") != std::string::npos)
    throw DataError("bench csv: bad " + what + " '" + field + "'");
  return std::stoull(field);
}

}  // namespace detail

inline std::vector<BenchRecord> parse_bench_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("bench: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != kBenchCsvHeader)
    throw DataError("bench csv: expected header '" + std::string(kBenchCsvHeader) + "', got '" +
                    line + "'");
  std::vector<BenchRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t pos = 0;
    while (true) {
      const std::size_t comma = line.find(',', pos);
      fields.push_back(line.substr(pos, comma == std::string::npos ? comma : comma - pos));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (fields.size() != 6)
      throw DataError("bench csv: expected 6 fields, got " + std::to_string(fields.size()) +
                      " in '" + line + "'");
    BenchRecord r;
    r.layer = parse_temporal_kind(fields[0]);
    r.L = static_cast<Index>(detail::bench_parse_u64(fields[1], "L"));
    r.groups = static_cast<Index>(detail::bench_parse_u64(fields[2], "groups"));
    r.channels = static_cast<Index>(detail::bench_parse_u64(fields[3], "channels"));
    if (fields[4] == "failed" || fields[5] == "failed") {
      if (fields[4] != fields[5])
        throw DataError("bench csv: half-failed row '" + line + "'");
      r.failed = true;
    } else {
      r.peak_bytes = detail::bench_parse_u64(fields[4], "peak_bytes");
      r.wall_ns = detail::bench_parse_u64(fields[5], "wall_ns");
    }
    records.push_back(r);
  }
  return records;
}

}  // namespace ssmvdm
