#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>

#include "ssmvdm/cli/commands.hpp"

namespace {

// All kernels are single-threaded by design, so the cap is honored by
// construction; a set but malformed value is still a config error.
void check_threads_env() {
  const char* tv = std::getenv("SSMVDM_THREADS");
  if (!tv) return;
  char* end = nullptr;
  const long n = std::strtol(tv, &end, 10);
  if (end == tv || *end != '\0' || n < 1)
    throw ssmvdm::ConfigError("SSMVDM_THREADS must be a positive integer, got '" +
                              std::string(tv) + "'");
}

// --config/--seed shared by the config-driven subcommands; the seed override
// only applies when the flag was actually given.
struct Common {
  std::string config_path;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;

  void attach(CLI::App* sub) {
    sub->add_option("--config", config_path, "run config file, key=value lines");
    seed_opt = sub->add_option("--seed", seed, "override the config seed");
  }

  ssmvdm::RunConfig config() const {
    ssmvdm::RunConfig cfg =
        config_path.empty() ? ssmvdm::RunConfig{} : ssmvdm::load_run_config(config_path);
    if (seed_opt->count() > 0) cfg.seed = seed;
    return cfg;
  }
};

int run(int argc, char** argv) {
  check_threads_env();

  CLI::App app{"desk-scale video diffusion with swappable temporal layers"};
  app.require_subcommand(1);
  int rc = 0;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic .vvid dataset plus manifest");
  Common gen_c;
  gen_c.attach(gen);
  bool force = false;
  gen->add_flag("--force", force, "overwrite a non-empty dataset directory");
  gen->callback([&] {
    const std::string dir = ssmvdm::cmd_gen_data(gen_c.config(), force);
    std::cout << "dataset written to " << dir << std::endl;
  });

  auto* train = app.add_subcommand("train", "train a denoiser on a .vvid dataset");
  Common train_c;
  train_c.attach(train);
  std::string resume;
  train->add_option("--resume", resume, "checkpoint to continue from");
  train->callback([&] {
    const ssmvdm::TrainResult res = ssmvdm::cmd_train(train_c.config(), resume, &std::cout);
    std::cout << "final checkpoint " << res.checkpoint_path << "\n"
              << "loss log " << res.loss_log_path << "\n"
              << "final loss " << res.final_loss << " smoothed " << res.smoothed_loss
              << std::endl;
  });

  auto* smp = app.add_subcommand("sample", "generate videos from a checkpoint");
  std::string ckpt, sample_out = "samples";
  std::int64_t count = 2;
  std::uint64_t sample_seed = 0;
  smp->add_option("--ckpt", ckpt, "checkpoint file")->required();
  smp->add_option("--count", count, "number of videos");
  smp->add_option("--seed", sample_seed, "sampling seed");
  smp->add_option("--out", sample_out, "output directory");
  smp->callback([&] {
    const auto paths = ssmvdm::cmd_sample(ckpt, count, sample_seed, sample_out, &std::cout);
    std::cout << paths.size() << " videos written" << std::endl;
  });

  auto* bench = app.add_subcommand("bench", "sweep temporal layers over sequence lengths");
  Common bench_c;
  bench_c.attach(bench);
  bench->callback([&] {
    const ssmvdm::BenchSummary s = ssmvdm::cmd_bench(bench_c.config(), std::cout);
    std::cout << "csv " << s.csv_path << std::endl;
  });

  auto* gc = app.add_subcommand("gradcheck", "finite-difference audit of every layer's backward");
  std::string corrupt;
  gc->add_option("--corrupt", corrupt,
                 "skew one analytic gradient of the named layer (detector self-test)");
  gc->callback([&] { rc = ssmvdm::cmd_gradcheck(std::cout, corrupt); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ssmvdm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const ssmvdm::DataError& e) {
    std::cerr << "data error: " << e.what() << std::endl;
    return 3;
  } catch (const ssmvdm::CapacityError& e) {
    std::cerr << "capacity error: " << e.what() << std::endl;
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
