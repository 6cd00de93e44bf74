#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "ssmvdm/core/optim.hpp"
#include "ssmvdm/unet/unet.hpp"

namespace ssmvdm {

// Training snapshot: model weights plus whatever optimizer and averaging
// state existed, as written to disk. Field order mirrors the file format.
struct TrainCheckpoint {
  UNetConfig cfg;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  // The forward-process schedule the weights were trained under; sampling
  // from a checkpoint alone must reproduce it.
  std::int64_t T = 256;
  double beta_start = 1e-4, beta_end = 0.02;
  std::vector<std::pair<std::string, Tensor<float>>> params;

  bool has_ema = false;
  double ema_decay = 0;
  std::vector<Tensor<float>> ema;

  bool has_adam = false;
  double adam_lr = 0, adam_beta1 = 0, adam_beta2 = 0, adam_eps = 0;
  std::uint64_t adam_step = 0;
  std::vector<Tensor<float>> adam_m, adam_v;
};

namespace detail {

inline void ck_write(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void ck_read(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!is) throw DataError("truncated checkpoint");
}

template <typename T>
void put(std::ostream& os, T v) {
  ck_write(os, &v, sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v;
  ck_read(is, &v, sizeof(T));
  return v;
}

inline void put_tensor_data(std::ostream& os, const Tensor<float>& t) {
  ck_write(os, t.data(), sizeof(float) * static_cast<std::size_t>(t.numel()));
}

inline Tensor<float> get_tensor_data(std::istream& is, const Shape& shape) {
  Tensor<float> t = Tensor<float>::empty(shape);
  ck_read(is, t.data(), sizeof(float) * static_cast<std::size_t>(t.numel()));
  return t;
}

}  // namespace detail

constexpr char kCheckpointMagic[4] = {'V', 'D', 'M', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const TrainCheckpoint& ck) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  using namespace detail;
  ck_write(os, kCheckpointMagic, 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::int64_t>(os, ck.cfg.in_channels);
  put<std::int64_t>(os, ck.cfg.base);
  for (Index m : ck.cfg.mult) put<std::int64_t>(os, m);
  put<std::int64_t>(os, ck.cfg.frames);
  put<std::int64_t>(os, ck.cfg.height);
  put<std::int64_t>(os, ck.cfg.width);
  put<std::uint8_t>(os, static_cast<std::uint8_t>(ck.cfg.temporal));
  put<std::uint8_t>(os, ck.cfg.exact_zoh ? 1 : 0);
  put<std::uint64_t>(os, ck.step);
  put<std::uint64_t>(os, ck.seed);
  put<std::int64_t>(os, ck.T);
  put<double>(os, ck.beta_start);
  put<double>(os, ck.beta_end);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& [name, t] : ck.params) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    ck_write(os, name.data(), name.size());
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) put<std::int64_t>(os, d);
    put_tensor_data(os, t);
  }
  put<std::uint8_t>(os, ck.has_ema ? 1 : 0);
  if (ck.has_ema) {
    put<double>(os, ck.ema_decay);
    for (const Tensor<float>& t : ck.ema) put_tensor_data(os, t);
  }
  put<std::uint8_t>(os, ck.has_adam ? 1 : 0);
  if (ck.has_adam) {
    put<double>(os, ck.adam_lr);
    put<double>(os, ck.adam_beta1);
    put<double>(os, ck.adam_beta2);
    put<double>(os, ck.adam_eps);
    put<std::uint64_t>(os, ck.adam_step);
    for (const Tensor<float>& t : ck.adam_m) put_tensor_data(os, t);
    for (const Tensor<float>& t : ck.adam_v) put_tensor_data(os, t);
  }
  os.flush();
  if (!os) throw DataError("failed writing checkpoint '" + path + "'");
}

inline TrainCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint '" + path + "'");
  using namespace detail;
  char magic[4];
  ck_read(is, magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw DataError("'" + path + "' is not a checkpoint file");
  const auto version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  TrainCheckpoint ck;
  ck.cfg.in_channels = get<std::int64_t>(is);
  ck.cfg.base = get<std::int64_t>(is);
  for (Index& m : ck.cfg.mult) m = get<std::int64_t>(is);
  ck.cfg.frames = get<std::int64_t>(is);
  ck.cfg.height = get<std::int64_t>(is);
  ck.cfg.width = get<std::int64_t>(is);
  const auto kind = get<std::uint8_t>(is);
  if (kind > 3) throw DataError("checkpoint has unknown temporal kind");
  ck.cfg.temporal = static_cast<TemporalKind>(kind);
  ck.cfg.exact_zoh = get<std::uint8_t>(is) != 0;
  ck.step = get<std::uint64_t>(is);
  ck.seed = get<std::uint64_t>(is);
  ck.T = get<std::int64_t>(is);
  ck.beta_start = get<double>(is);
  ck.beta_end = get<double>(is);
  if (ck.T < 1 || !(ck.beta_start > 0) || ck.beta_start > ck.beta_end || ck.beta_end >= 1)
    throw DataError("checkpoint has an invalid noise schedule");
  const auto nparams = get<std::uint32_t>(is);
  ck.params.reserve(nparams);
  for (std::uint32_t i = 0; i < nparams; ++i) {
    const auto len = get<std::uint32_t>(is);
    std::string name(len, '\0');
    ck_read(is, name.data(), len);
    const auto rank = get<std::uint32_t>(is);
    if (rank == 0 || rank > 8) throw DataError("checkpoint tensor has invalid rank");
    Shape shape(rank);
    for (Index& d : shape) {
      d = get<std::int64_t>(is);
      if (d < 1) throw DataError("checkpoint tensor has invalid extent");
    }
    ck.params.emplace_back(std::move(name), get_tensor_data(is, shape));
  }
  ck.has_ema = get<std::uint8_t>(is) != 0;
  if (ck.has_ema) {
    ck.ema_decay = get<double>(is);
    for (const auto& [name, t] : ck.params) ck.ema.push_back(get_tensor_data(is, t.shape()));
  }
  ck.has_adam = get<std::uint8_t>(is) != 0;
  if (ck.has_adam) {
    ck.adam_lr = get<double>(is);
    ck.adam_beta1 = get<double>(is);
    ck.adam_beta2 = get<double>(is);
    ck.adam_eps = get<double>(is);
    ck.adam_step = get<std::uint64_t>(is);
    for (const auto& [name, t] : ck.params) ck.adam_m.push_back(get_tensor_data(is, t.shape()));
    for (const auto& [name, t] : ck.params) ck.adam_v.push_back(get_tensor_data(is, t.shape()));
  }
  return ck;
}

inline TrainCheckpoint snapshot_checkpoint(const UNetParams<float>& unet,
                                           const OptimizerState<float>* opt,
                                           const EmaState<float>* ema, std::uint64_t step,
                                           std::uint64_t seed, std::int64_t T = 256,
                                           double beta_start = 1e-4, double beta_end = 0.02) {
  TrainCheckpoint ck;
  ck.cfg = unet.cfg;
  ck.step = step;
  ck.seed = seed;
  ck.T = T;
  ck.beta_start = beta_start;
  ck.beta_end = beta_end;
  std::vector<std::pair<std::string, Var<float>>> named;
  unet.named_parameters(named);
  for (auto& [name, v] : named) ck.params.emplace_back(name, v.value().clone());
  if (ema) {
    ck.has_ema = true;
    ck.ema_decay = ema->decay;
    for (const Tensor<float>& t : ema->shadow) ck.ema.push_back(t.clone());
  }
  if (opt) {
    ck.has_adam = true;
    ck.adam_lr = opt->lr;
    ck.adam_beta1 = opt->beta1;
    ck.adam_beta2 = opt->beta2;
    ck.adam_eps = opt->eps;
    ck.adam_step = opt->step;
    for (const Tensor<float>& t : opt->m) ck.adam_m.push_back(t.clone());
    for (const Tensor<float>& t : opt->v) ck.adam_v.push_back(t.clone());
  }
  return ck;
}

// Rebuild a model from a loaded snapshot. Stored names and shapes must match
// what the stored config produces, otherwise the file does not describe this
// architecture.
inline UNetParams<float> unet_from_checkpoint(const TrainCheckpoint& ck) {
  UNetParams<float> unet = make_unet<float>(Rng(ck.seed), ck.cfg);
  std::vector<std::pair<std::string, Var<float>>> named;
  unet.named_parameters(named);
  if (named.size() != ck.params.size())
    throw DataError("checkpoint parameter count does not match its config");
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (named[i].first != ck.params[i].first)
      throw DataError("checkpoint parameter '" + ck.params[i].first + "' does not match '" +
                      named[i].first + "'");
    if (!named[i].second.value().same_shape(ck.params[i].second))
      throw DataError("checkpoint parameter '" + ck.params[i].first + "' has the wrong shape");
    named[i].second.value() = ck.params[i].second.clone();
  }
  return unet;
}

}  // namespace ssmvdm
