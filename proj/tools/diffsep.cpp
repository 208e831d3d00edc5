// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// diffsep: train, separate, eval, schedule, make-toy, rerun.

#include <iostream>

#include <CLI11.hpp>

#include "cli.hpp"

using namespace diffsep;
namespace fs = std::filesystem;

namespace {

// Values that may come from the command line, a config file or a default.
struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
};

void add_common(CLI::App* cmd, Common& c, bool with_jobs = true) {
  cmd->add_option("--config", c.config, "INI config file; flags override its values")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Random seed (default: config file, then DIFFSEP_SEED, then 0)");
  if (with_jobs) cmd->add_option("--jobs", c.jobs, "Worker threads")->check(CLI::PositiveNumber);
}

cli::ConfigFile load_config(const Common& c) { return c.config.empty() ? cli::ConfigFile{} : cli::read_config(c.config); }

std::uint64_t resolve_seed(const Common& c, const cli::ConfigFile& file, const std::string& section,
                           std::uint64_t from_file) {
  if (c.seed) return *c.seed;
  if (cli::file_sets(file, section, "seed")) return from_file;
  return cli::env_seed();
}

template <typename T>
void override(const std::optional<T>& flag, T& field) {
  if (flag) field = *flag;
}

// Flags shared by separate and eval.
struct SamplerFlags {
  std::optional<std::size_t> steps;
  std::optional<double> rho;
  std::optional<std::string> sampler;
  std::string checkpoint;
  std::string weights = "ema";

  void add(CLI::App* cmd, bool checkpoint_required) {
    cmd->add_option("--steps", steps, "Sampling steps (default 7)")->check(CLI::PositiveNumber);
    cmd->add_option("--rho", rho, "Schedule exponent rho (default 2)")->check(CLI::PositiveNumber);
    cmd->add_option("--sampler", sampler, "euler or heun")->check(CLI::IsMember({"euler", "heun"}));
    auto* ck = cmd->add_option("--checkpoint", checkpoint, "Trained checkpoint")->check(CLI::ExistingFile);
    if (checkpoint_required) ck->required();
    cmd->add_option("--weights", weights, "ema or raw network weights")->check(CLI::IsMember({"ema", "raw"}));
  }

  // The checkpoint's sigma_data unless the config file sets one.
  separate::SeparationParams resolve(const Common& c, const cli::ConfigFile& file) const {
    separate::SeparationParams p;
    if (!checkpoint.empty() && !cli::file_sets(file, "separate", "sigma_data"))
      p.sigma_data = train::load_checkpoint(checkpoint).config.sigma_data;
    p = cli::apply_separate_config(p, file);
    override(steps, p.steps);
    override(rho, p.rho);
    override(sampler, p.sampler);
    p.seed = resolve_seed(c, file, "separate", p.seed);
    p.validate();
    return p;
  }
};

void report(const cli::RunManifest& m) {
  for (const auto& a : m.artifacts) std::cout << "wrote " << a << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-based vocal separation on complex spectrograms."};
  app.set_version_flag("--version", DIFFSEP_VERSION);
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  // train
  Common train_common;
  std::string profile = "desk", model_name = "tiny";
  cli::TrainJob train_job;
  std::optional<std::size_t> total_steps, batch_size;
  std::optional<double> lr;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a MUSDB-layout dataset");
  add_common(train_cmd, train_common, false);
  train_cmd->add_option("--data", train_job.data, "Dataset root")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--profile", profile, "Training profile")->check(CLI::IsMember({"desk", "paper"}));
  train_cmd->add_option("--model", model_name, "Model size")->check(CLI::IsMember({"tiny", "paper"}));
  train_cmd->add_option("--checkpoint", train_job.checkpoint, "Checkpoint path");
  train_cmd->add_option("--total-steps", total_steps, "Number of optimizer steps")->check(CLI::PositiveNumber);
  train_cmd->add_option("--batch-size", batch_size)->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr", lr, "Peak learning rate")->check(CLI::PositiveNumber);
  train_cmd->add_flag("--resume", train_job.resume, "Continue from an existing checkpoint");
  train_cmd->add_option("--log-every", train_job.log_every, "Print the mean loss every N steps (0: never)");

  // separate
  Common sep_common;
  SamplerFlags sep_flags;
  cli::SeparateJob sep_job;
  bool accompaniment = false;
  auto* sep_cmd = app.add_subcommand("separate", "Extract vocals from a 44.1 kHz stereo WAV");
  add_common(sep_cmd, sep_common);
  sep_cmd->add_option("input", sep_job.input, "Mixture WAV")->required()->check(CLI::ExistingFile);
  sep_flags.add(sep_cmd, true);
  sep_cmd->add_flag("--accompaniment", accompaniment, "Also write mixture minus vocals");

  // eval
  Common eval_common;
  SamplerFlags eval_flags;
  cli::EvalJob eval_job;
  auto* eval_cmd = app.add_subcommand("eval", "Score vocals cSDR over a dataset, optionally as a (rho, steps) grid");
  add_common(eval_cmd, eval_common);
  eval_cmd->add_option("--data", eval_job.data, "Dataset root")->required()->check(CLI::ExistingDirectory);
  eval_flags.add(eval_cmd, false);
  eval_cmd->add_option("--rho-list", eval_job.rhos, "Comma-separated rho values")->delimiter(',');
  eval_cmd->add_option("--steps-list", eval_job.steps, "Comma-separated step counts")->delimiter(',');
  eval_cmd->add_flag("--oracle", eval_job.oracle, "Use the ground-truth oracle instead of a network");
  eval_cmd->add_option("--out", eval_job.out, "Report directory");

  // schedule
  std::size_t sched_n = 7;
  double sched_rho = 2.0, sched_min = 0.002, sched_max = 80.0;
  auto* sched_cmd = app.add_subcommand("schedule", "Print the sampling noise levels");
  sched_cmd->add_option("--n", sched_n, "Number of steps");
  sched_cmd->add_option("--rho", sched_rho);
  sched_cmd->add_option("--sigma-min", sched_min);
  sched_cmd->add_option("--sigma-max", sched_max);

  // make-toy
  cli::ToyJob toy_job;
  std::optional<std::uint64_t> toy_seed;
  auto* toy_cmd = app.add_subcommand("make-toy", "Write a synthetic four-stem dataset");
  toy_cmd->add_option("--tracks", toy_job.tracks, "Number of tracks");
  toy_cmd->add_option("--seconds", toy_job.seconds, "Track length")->check(CLI::PositiveNumber);
  toy_cmd->add_option("--seed", toy_seed, "Random seed (default: DIFFSEP_SEED, then 0)");
  toy_cmd->add_option("--out", toy_job.out, "Output directory");

  // rerun
  std::string manifest_path;
  auto* rerun_cmd = app.add_subcommand("rerun", "Run the job recorded in a manifest again");
  rerun_cmd->add_option("manifest", manifest_path)->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      const auto file = load_config(train_common);
      cli::check_sections(file, {"train", "sigma", "augment", "model"});
      auto cfg = cli::apply_train_config(train::TrainConfig::named(profile), file);
      override(total_steps, cfg.total_steps);
      override(batch_size, cfg.batch_size);
      override(lr, cfg.lr_init);
      // a short smoke run keeps a proportional warmup unless the file sets one
      if (total_steps && !cli::file_sets(file, "train", "warmup_steps") && cfg.warmup_steps >= cfg.total_steps)
        cfg.warmup_steps = cfg.total_steps / 10;
      cfg.seed = resolve_seed(train_common, file, "train", cfg.seed);
      train_job.config = cfg;
      train_job.model = cli::apply_model_config(cli::model_named(model_name), file);
      report(cli::run_train(train_job, std::cout));
    } else if (*sep_cmd) {
      const auto file = load_config(sep_common);
      cli::check_sections(file, {"separate"});
      sep_job.params = sep_flags.resolve(sep_common, file);
      sep_job.params.emit_accompaniment = accompaniment;
      sep_job.checkpoint = sep_flags.checkpoint;
      sep_job.weights = sep_flags.weights;
      sep_job.jobs = sep_common.jobs;
      report(cli::run_separate(sep_job));
    } else if (*eval_cmd) {
      const auto file = load_config(eval_common);
      cli::check_sections(file, {"separate"});
      eval_job.params = eval_flags.resolve(eval_common, file);
      eval_job.checkpoint = eval_flags.checkpoint;
      eval_job.weights = eval_flags.weights;
      eval_job.jobs = eval_common.jobs;
      report(cli::run_eval(eval_job, std::cout));
    } else if (*sched_cmd) {
      std::cout << cli::format_schedule(diffusion::karras_schedule(sched_n, sched_min, sched_max, sched_rho));
    } else if (*toy_cmd) {
      toy_job.seed = toy_seed ? *toy_seed : cli::env_seed();
      report(cli::run_make_toy(toy_job));
    } else if (*rerun_cmd) {
      report(cli::rerun(cli::read_manifest(manifest_path), std::cout));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
