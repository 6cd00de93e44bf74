#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "ssmvdm/bench/bench.hpp"
#include "ssmvdm/cli/run_config.hpp"
#include "ssmvdm/core/gradcheck.hpp"
#include "ssmvdm/core/optim.hpp"
#include "ssmvdm/data/image_export.hpp"
#include "ssmvdm/data/synth.hpp"
#include "ssmvdm/data/video_file.hpp"
#include "ssmvdm/diffusion/ddpm.hpp"
#include "ssmvdm/unet/checkpoint.hpp"
#include "ssmvdm/unet/unet.hpp"

namespace ssmvdm {

// Writes n_videos clips plus a manifest of "<filename> <seed>" lines.  Each
// clip draws from its own forked stream, so the dataset is a pure function
// of (config, seed) regardless of generation order.
inline std::string cmd_gen_data(const RunConfig& cfg, bool force) {
  cfg.validate();
  if (cfg.n_videos < 1) throw ConfigError("gen-data: n_videos must be positive");
  namespace fs = std::filesystem;
  const fs::path dir(cfg.dataset_dir);
  if (fs::exists(dir) && !fs::is_empty(dir) && !force)
    throw DataError("gen-data: '" + cfg.dataset_dir +
                    "' already has content (pass --force to overwrite)");
  fs::create_directories(dir);

  SynthSpec spec;
  spec.kind = cfg.synth_kind;
  spec.frames = cfg.L;
  spec.resolution = cfg.resolution;
  spec.channels = cfg.channels;

  std::ofstream manifest(dir / "manifest.txt", std::ios::trunc);
  if (!manifest) throw DataError("gen-data: cannot write manifest in '" + cfg.dataset_dir + "'");
  const Rng base = Rng(cfg.seed).fork("gen-data");
  for (std::int64_t i = 0; i < cfg.n_videos; ++i) {
    Rng vr = base.fork(static_cast<std::uint64_t>(i));
    spec.seed = vr.seed();
    char name[32];
    std::snprintf(name, sizeof name, "clip_%04lld.vvid", static_cast<long long>(i));
    write_video((dir / name).string(), gen_synth_video(spec, vr));
    manifest << name << " " << spec.seed << "\n";
  }
  if (!manifest.flush()) throw DataError("gen-data: failed writing manifest");
  return cfg.dataset_dir;
}

struct TrainResult {
  std::string checkpoint_path;
  std::string loss_log_path;
  std::int64_t final_step = 0;
  double final_loss = 0;
  double smoothed_loss = 0;  // exponential average of logged losses, weight 0.9
};

namespace detail {

inline std::vector<Tensor<float>> load_training_videos(const RunConfig& cfg) {
  const std::vector<std::string> files = list_dataset(cfg.dataset_dir);
  const Shape want{cfg.L, cfg.channels, cfg.resolution, cfg.resolution};
  std::vector<Tensor<float>> videos;
  videos.reserve(files.size());
  for (const std::string& f : files) {
    Tensor<float> v = read_video(f);
    if (!(v.shape() == want))
      throw DataError("train: '" + f + "' has shape " + shape_str(v.shape()) +
                      " but the config expects " + shape_str(want));
    videos.push_back(std::move(v));
  }
  return videos;
}

// Batch for one step, drawn from a stream forked off (seed, step): video
// picks first, then timesteps, then noise.  Resuming at step k replays the
// exact batches a straight run would have seen.
inline DiffusionBatch<float> draw_batch(const RunConfig& cfg,
                                        const std::vector<Tensor<float>>& videos,
                                        std::int64_t step) {
  Rng r = Rng(cfg.seed).fork("train").fork(static_cast<std::uint64_t>(step));
  DiffusionBatch<float> b;
  b.x0 = Tensor<float>::empty({cfg.batch, cfg.L, cfg.channels, cfg.resolution, cfg.resolution});
  const Index per = b.x0.numel() / cfg.batch;
  for (Index i = 0; i < cfg.batch; ++i) {
    const Tensor<float>& v = videos[static_cast<std::size_t>(r.uniform_below(videos.size()))];
    std::copy_n(v.data(), per, b.x0.data() + i * per);
  }
  b.t.resize(static_cast<std::size_t>(cfg.batch));
  for (Index i = 0; i < cfg.batch; ++i)
    b.t[static_cast<std::size_t>(i)] = 1 + static_cast<Index>(r.uniform_below(
                                               static_cast<std::uint64_t>(cfg.T)));
  b.eps = gaussian_sample<float>(r, b.x0.shape());
  return b;
}

}  // namespace detail

// Noise-prediction training: corrupt a batch, regress the noise, Adam step,
// EMA update.  Checkpoints land in out_dir every ckpt_every steps and at the
// end; losses go to out_dir/loss.csv as "step,loss" rows.
inline TrainResult cmd_train(const RunConfig& cfg, const std::string& resume_path = "",
                             std::ostream* progress = nullptr) {
  cfg.validate();
  const UNetConfig ucfg = cfg.unet_config();
  ucfg.validate();
  const std::vector<Tensor<float>> videos = detail::load_training_videos(cfg);
  const NoiseSchedule<float> sched = make_noise_schedule<float>(
      cfg.T, static_cast<float>(cfg.beta_start), static_cast<float>(cfg.beta_end));

  UNetParams<float> unet;
  std::int64_t start_step = 0;
  TrainCheckpoint ck;
  bool resumed = false;
  if (resume_path.empty()) {
    unet = make_unet<float>(Rng(cfg.seed), ucfg);
  } else {
    ck = load_checkpoint(resume_path);
    const UNetConfig& c = ck.cfg;
    if (c.in_channels != ucfg.in_channels || c.base != ucfg.base || c.mult != ucfg.mult ||
        c.temporal != ucfg.temporal || c.exact_zoh != ucfg.exact_zoh ||
        c.frames != ucfg.frames || c.height != ucfg.height || c.width != ucfg.width)
      throw DataError("resume: checkpoint architecture differs from the run config");
    if (ck.T != cfg.T || ck.beta_start != cfg.beta_start || ck.beta_end != cfg.beta_end)
      throw DataError("resume: checkpoint noise schedule differs from the run config");
    if (ck.seed != cfg.seed)
      throw DataError("resume: checkpoint seed " + std::to_string(ck.seed) +
                      " differs from config seed " + std::to_string(cfg.seed));
    unet = unet_from_checkpoint(ck);
    start_step = static_cast<std::int64_t>(ck.step);
    resumed = true;
    if (start_step >= cfg.steps)
      throw ConfigError("resume: checkpoint is already at step " + std::to_string(start_step) +
                        " of " + std::to_string(cfg.steps));
  }

  std::vector<Var<float>> vars = unet.parameters();
  std::vector<Tensor<float>> params;
  params.reserve(vars.size());
  for (Var<float>& v : vars) params.push_back(v.value());

  OptimizerState<float> opt;
  if (resumed && ck.has_adam) {
    opt = OptimizerState<float>::init(params, static_cast<float>(ck.adam_lr));
    opt.beta1 = static_cast<float>(ck.adam_beta1);
    opt.beta2 = static_cast<float>(ck.adam_beta2);
    opt.eps = static_cast<float>(ck.adam_eps);
    opt.step = static_cast<std::int64_t>(ck.adam_step);
    for (std::size_t i = 0; i < params.size(); ++i) {
      opt.m[i] = ck.adam_m[i].clone();
      opt.v[i] = ck.adam_v[i].clone();
    }
  } else {
    opt = OptimizerState<float>::init(params, static_cast<float>(cfg.lr));
  }

  EmaState<float> ema;
  if (resumed && ck.has_ema) {
    ema.decay = static_cast<float>(ck.ema_decay);
    for (const Tensor<float>& t : ck.ema) ema.shadow.push_back(t.clone());
  } else {
    ema = EmaState<float>::init(params, static_cast<float>(cfg.ema_decay));
  }

  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  const std::string loss_path = (fs::path(cfg.out_dir) / "loss.csv").string();
  std::ofstream loss_log(loss_path, std::ios::trunc);
  if (!loss_log) throw DataError("train: cannot open '" + loss_path + "' for writing");
  loss_log << "step,loss\n" << std::setprecision(9);

  UNetModel<float> model{&unet};
  TrainResult res;
  res.loss_log_path = loss_path;
  double smoothed = -1;

  if (start_step == 0) {
    // Pre-update evaluation: with a zero-initialized head this sits near the
    // variance of the target noise, i.e. close to 1.
    const DiffusionBatch<float> b = detail::draw_batch(cfg, videos, 0);
    NoGradGuard ng;
    const double l0 = static_cast<double>(eps_loss(model, b, sched).value().item());
    loss_log << 0 << "," << l0 << "\n";
    loss_log.flush();
    smoothed = l0;
    res.final_loss = l0;
  }

  std::int64_t last_saved = -1;
  auto save_at = [&](std::int64_t step) {
    char nm[32];
    std::snprintf(nm, sizeof nm, "ckpt_%06lld.vdmc", static_cast<long long>(step));
    res.checkpoint_path = (fs::path(cfg.out_dir) / nm).string();
    save_checkpoint(res.checkpoint_path,
                    snapshot_checkpoint(unet, &opt, &ema, static_cast<std::uint64_t>(step),
                                        cfg.seed, cfg.T, cfg.beta_start, cfg.beta_end));
    last_saved = step;
  };

  for (std::int64_t step = start_step + 1; step <= cfg.steps; ++step) {
    if (cfg.lr_final >= 0)
      // linear anneal keyed to the absolute step, so resumed runs follow the
      // same ramp as straight ones
      opt.lr = static_cast<float>(cfg.lr + (cfg.lr_final - cfg.lr) *
                                               static_cast<double>(step) /
                                               static_cast<double>(cfg.steps));
    const DiffusionBatch<float> b = detail::draw_batch(cfg, videos, step);
    Var<float> loss = eps_loss(model, b, sched);
    const double lv = static_cast<double>(loss.value().item());
    backward(loss);
    std::vector<Tensor<float>> grads;
    grads.reserve(vars.size());
    for (Var<float>& v : vars) grads.push_back(v.grad());
    adam_step(params, grads, opt);
    ema_update(ema, params);
    for (Var<float>& v : vars) v.zero_grad();

    smoothed = smoothed < 0 ? lv : 0.9 * smoothed + 0.1 * lv;
    loss_log << step << "," << lv << "\n";
    loss_log.flush();
    if (progress && (step % 50 == 0 || step == cfg.steps))
      *progress << "step " << step << " loss " << lv << " smoothed " << smoothed << std::endl;
    if (step % cfg.ckpt_every == 0) save_at(step);
    res.final_loss = lv;
  }
  if (last_saved != cfg.steps) save_at(cfg.steps);

  res.final_step = cfg.steps;
  res.smoothed_loss = smoothed;
  return res;
}

// Ancestral sampling from a checkpoint, preferring its EMA weights.  Each
// video gets its own derived stream, a .vvid file, and a directory of
// quantized frame images.
inline std::vector<std::string> cmd_sample(const std::string& ckpt_path, Index count,
                                           std::uint64_t seed, const std::string& out_dir,
                                           std::ostream* progress = nullptr) {
  if (count < 1) throw ConfigError("sample: count must be positive");
  const TrainCheckpoint ck = load_checkpoint(ckpt_path);
  UNetParams<float> unet = unet_from_checkpoint(ck);
  if (ck.has_ema) {
    std::vector<Var<float>> vars = unet.parameters();
    for (std::size_t i = 0; i < vars.size(); ++i) vars[i].value() = ck.ema[i].clone();
  }
  const NoiseSchedule<float> sched = make_noise_schedule<float>(
      ck.T, static_cast<float>(ck.beta_start), static_cast<float>(ck.beta_end));
  const UNetConfig& c = ck.cfg;

  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  UNetModel<float> model{&unet};
  std::vector<std::string> paths;
  for (Index i = 0; i < count; ++i) {
    Rng ri = Rng(seed).fork("sample").fork(static_cast<std::uint64_t>(i));
    const Tensor<float> x = sample(model, sched, {1, c.frames, c.in_channels, c.height, c.width},
                                   ri);
    Tensor<float> video = Tensor<float>::empty({c.frames, c.in_channels, c.height, c.width});
    std::copy_n(x.data(), x.numel(), video.data());
    char nm[32];
    std::snprintf(nm, sizeof nm, "sample_%03lld", static_cast<long long>(i));
    const std::string vp = (fs::path(out_dir) / (std::string(nm) + ".vvid")).string();
    write_video(vp, video);
    export_frames_pgm(video, (fs::path(out_dir) / (std::string(nm) + "_frames")).string());
    paths.push_back(vp);
    if (progress) *progress << "wrote " << vp << std::endl;
  }
  return paths;
}

struct BenchSummary {
  std::vector<BenchRecord> records;
  double attention_exponent = 0;
  double ssm_exponent = 0;
  std::string csv_path;
};

// Sweeps both layer kinds over the configured length grid, writes the CSV,
// then fits one exponent per kind.  Lengths that blow the memory budget
// become failure rows; the CSV is written before fitting so a sweep that
// cannot be fitted still leaves its measurements behind.
inline BenchSummary cmd_bench(const RunConfig& cfg, std::ostream& out) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  BenchSummary s;
  s.csv_path = (fs::path(cfg.out_dir) / "bench.csv").string();
  const std::size_t limit = cfg.mem_limit_mb << 20;
  const TemporalKind kinds[2] = {TemporalKind::attention, TemporalKind::ssm_bidirectional};
  for (TemporalKind kind : kinds) {
    for (Index L : cfg.bench_lengths) {
      try {
        const BenchRecord r =
            measure_layer(kind, L, cfg.bench_groups, cfg.bench_channels, cfg.bench_reps, limit);
        out << temporal_kind_name(kind) << " L=" << L << " peak_bytes=" << r.peak_bytes
            << " wall_ns=" << r.wall_ns << "\n";
        s.records.push_back(r);
      } catch (const CapacityError& e) {
        BenchRecord r;
        r.layer = kind;
        r.L = L;
        r.groups = cfg.bench_groups;
        r.channels = cfg.bench_channels;
        r.failed = true;
        out << temporal_kind_name(kind) << " L=" << L << " failed: " << e.what() << "\n";
        s.records.push_back(r);
      }
    }
  }
  write_bench_csv(s.records, s.csv_path);
  for (TemporalKind kind : kinds) {
    std::vector<BenchRecord> mine;
    for (const BenchRecord& r : s.records)
      if (r.layer == kind) mine.push_back(r);
    const double e = fit_scaling_exponent(mine);
    (kind == TemporalKind::attention ? s.attention_exponent : s.ssm_exponent) = e;
    out << temporal_kind_name(kind) << " exponent " << std::fixed << std::setprecision(3) << e
        << std::defaultfloat << "\n";
  }
  return s;
}

struct GradcheckResult {
  std::string layer;
  double max_rel_err = 0;
  bool pass = false;
};

inline constexpr double kGradcheckTol = 1e-4;

namespace detail {

inline void gc_randomize(Var<double>& v, const Rng& rng, double lo, double hi) {
  Rng r = rng;
  v.value() = uniform_sample<double>(r, v.value().shape(), lo, hi);
}

}  // namespace detail

// Central-difference audit of every trainable layer at tiny double-precision
// extents.  Layers whose output projections start at zero get those
// projections randomized first, otherwise the identity shortcut would make
// the comparison vacuous.  `corrupt_layer` skews one analytic gradient of
// the named layer so a harness can confirm a broken backward is caught.
inline std::vector<GradcheckResult> run_gradchecks(const std::string& corrupt_layer = "") {
  std::vector<GradcheckResult> results;
  auto check = [&](const std::string& name, std::vector<Var<double>> params, auto make_loss) {
    const double bias = name == corrupt_layer ? 0.25 : 0.0;
    GradcheckResult r;
    r.layer = name;
    r.max_rel_err = max_grad_rel_err<double>(params, make_loss, 1e-5, bias);
    r.pass = r.max_rel_err < kGradcheckTol;
    results.push_back(r);
  };

  {
    Rng rng(901);
    auto p = make_mamba_block<double>(rng, 2, false);
    detail::gc_randomize(p.out_proj_w, rng.fork("wo"), -0.3, 0.3);
    Rng rx = rng.fork("x");
    const Tensor<double> x = gaussian_sample<double>(rx, {2, 3, 2});
    check("ssm_block", p.parameters(), [p, x] {
      return mean_all(square(mamba_block_forward(p, make_const(x), ScanDirection::forward)));
    });
  }
  {
    Rng rng(902);
    auto p = make_mamba_block<double>(rng, 2, true);
    detail::gc_randomize(p.out_proj_w, rng.fork("wo"), -0.3, 0.3);
    Rng rx = rng.fork("x");
    const Tensor<double> x = gaussian_sample<double>(rx, {2, 3, 2});
    check("ssm_block_bidirectional", p.parameters(),
          [p, x] { return mean_all(square(bidirectional_mamba_forward(p, make_const(x)))); });
  }
  {
    Rng rng(903);
    auto p = make_temporal_attention<double>(rng, 4, 1);
    detail::gc_randomize(p.wo, rng.fork("wo"), -0.3, 0.3);
    Rng rx = rng.fork("x");
    const Tensor<double> x = gaussian_sample<double>(rx, {2, 3, 4});
    check("temporal_attention", p.parameters(),
          [p, x] { return mean_all(square(temporal_attention_forward(p, make_const(x)))); });
  }
  {
    Rng rng(904);
    auto p = make_spatial_attention<double>(rng, 8, 1);
    detail::gc_randomize(p.wo, rng.fork("wo"), -0.3, 0.3);
    Rng rx = rng.fork("x");
    const Tensor<double> x = gaussian_sample<double>(rx, {1, 8, 2, 2});
    check("spatial_linear_attention", p.parameters(),
          [p, x] { return mean_all(square(spatial_attention_forward(p, make_const(x)))); });
  }
  {
    Rng rng(905);
    auto p = make_res_block<double>(rng, 8, 8, 8);
    detail::gc_randomize(p.conv2_w, rng.fork("conv2"), -0.1, 0.1);
    Rng rx = rng.fork("x"), rt = rng.fork("temb");
    const Tensor<double> x = gaussian_sample<double>(rx, {2, 8, 2, 2});
    const Tensor<double> temb = gaussian_sample<double>(rt, {2, 8});
    std::vector<std::pair<std::string, Var<double>>> named;
    p.named_parameters("", named);
    std::vector<Var<double>> params;
    for (auto& [n, v] : named) params.push_back(v);
    check("residual_conv_block", params, [p, x, temb] {
      return mean_all(square(res_block_forward(p, make_const(x), make_const(temb))));
    });
  }
  {
    Rng rng(906);
    Var<double> w1 = make_param(uniform_sample<double>(rng, {32, 8}, -0.35, 0.35));
    Var<double> b1 = make_param(uniform_sample<double>(rng, {32}, -0.35, 0.35));
    Var<double> w2 = make_param(uniform_sample<double>(rng, {32, 32}, -0.35, 0.35));
    Var<double> b2 = make_param(uniform_sample<double>(rng, {32}, -0.35, 0.35));
    const Tensor<double> sinu = sinusoidal_time_embedding<double>({3, 7}, 2, 8);
    check("time_embedding_mlp", {w1, b1, w2, b2}, [=] {
      return mean_all(square(linear(silu(linear(make_const(sinu), w1, b1)), w2, b2)));
    });
  }
  return results;
}

inline int cmd_gradcheck(std::ostream& out, const std::string& corrupt_layer = "") {
  const std::vector<GradcheckResult> results = run_gradchecks(corrupt_layer);
  bool all = true;
  for (const GradcheckResult& r : results) {
    out << r.layer << ": max rel err " << r.max_rel_err << " -> " << (r.pass ? "pass" : "FAIL")
        << "\n";
    all = all && r.pass;
  }
  out << (all ? "gradcheck: all layers pass" : "gradcheck: failures detected") << std::endl;
  return all ? 0 : 1;
}

}  // namespace ssmvdm
