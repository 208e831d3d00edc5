// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Subcommand jobs for the diffsep tool, config files and run manifests.
//
// Precedence, lowest first: built-in defaults (profile), config file, command
// line flags. A seed not given by either falls back to DIFFSEP_SEED, then 0.

#pragma once

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "diffsep/eval.hpp"
#include "diffsep/train.hpp"

#ifndef DIFFSEP_VERSION
#define DIFFSEP_VERSION "dev"
#endif

namespace diffsep::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline model::ModelConfig model_named(const std::string& name) {
  if (name == "tiny") return model::ModelConfig::tiny();
  if (name == "paper") return model::ModelConfig::paper();
  throw Error("unknown model '" + name + "' (expected tiny or paper)");
}

// ---------------------------------------------------------------------------
// Config files: INI sections [train], [sigma], [augment], [model], [separate].

using ConfigFile = boost::property_tree::ptree;

inline ConfigFile read_config(const fs::path& path) {
  if (!fs::exists(path)) throw Error("config file " + path.string() + " does not exist");
  ConfigFile tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw Error("config file " + path.string() + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  for (const auto& [key, node] : tree)
    if (node.empty() && !node.data().empty()) throw Error("config file: key '" + key + "' is outside any section");
  return tree;
}

namespace detail {

inline std::string join_keys(const json& obj, const std::vector<std::string>& skip = {}) {
  std::string out;
  for (const auto& [k, v] : obj.items()) {
    if (std::find(skip.begin(), skip.end(), k) != skip.end()) continue;
    out += (out.empty() ? "" : ", ") + k;
  }
  return out;
}

inline double parse_double(const std::string& text, const std::string& what) {
  double v = 0.0;
  const auto* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || p != end) throw Error(what + ": '" + text + "' is not a number");
  return v;
}

inline std::uint64_t parse_count(const std::string& text, const std::string& what) {
  std::uint64_t v = 0;
  const auto* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || p != end) throw Error(what + ": '" + text + "' is not a non-negative integer");
  return v;
}

// Converts `text` to the JSON type already held by `slot`.
inline json coerce(const json& slot, const std::string& text, const std::string& what) {
  if (slot.is_boolean()) {
    if (text == "true" || text == "1" || text == "yes") return true;
    if (text == "false" || text == "0" || text == "no") return false;
    throw Error(what + ": '" + text + "' is not a boolean");
  }
  if (slot.is_number_unsigned() || slot.is_number_integer()) return parse_count(text, what);
  if (slot.is_number()) return parse_double(text, what);
  if (slot.is_array()) {
    json arr = json::array();
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) arr.push_back(parse_count(item, what));
    return arr;
  }
  return text;
}

}  // namespace detail

// Overwrites the fields of `target` named in `section`. Keys listed in `skip`
// are not settable from this section.
inline void apply_section(json& target, const ConfigFile& file, const std::string& section,
                          const std::vector<std::string>& skip = {}) {
  auto node = file.get_child_optional(section);
  if (!node) return;
  for (const auto& [key, value] : *node) {
    const bool known = target.contains(key) && std::find(skip.begin(), skip.end(), key) == skip.end();
    if (!known)
      throw Error("unknown config key '" + key + "' in [" + section + "]; valid keys: " + detail::join_keys(target, skip));
    target[key] = detail::coerce(target[key], value.data(), "[" + section + "] " + key);
  }
}

inline void check_sections(const ConfigFile& file, const std::vector<std::string>& allowed) {
  for (const auto& [name, node] : file)
    if (std::find(allowed.begin(), allowed.end(), name) == allowed.end()) {
      std::string list;
      for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
      throw Error("unknown config section [" + name + "]; valid sections: " + list);
    }
}

inline bool file_sets(const ConfigFile& file, const std::string& section, const std::string& key) {
  auto node = file.get_child_optional(section);
  return node && node->get_child_optional(key);
}

inline train::TrainConfig apply_train_config(train::TrainConfig cfg, const ConfigFile& file) {
  json j = cfg;
  apply_section(j, file, "train", {"sigma", "augment"});
  apply_section(j["sigma"], file, "sigma");
  apply_section(j["augment"], file, "augment");
  cfg = j.get<train::TrainConfig>();
  return cfg;
}

inline model::ModelConfig apply_model_config(model::ModelConfig cfg, const ConfigFile& file) {
  json j = cfg;
  apply_section(j, file, "model");
  return j.get<model::ModelConfig>();
}

inline separate::SeparationParams apply_separate_config(separate::SeparationParams p, const ConfigFile& file) {
  json j = p;
  apply_section(j, file, "separate");
  return j.get<separate::SeparationParams>();
}

// DIFFSEP_SEED, or 0 when unset.
inline std::uint64_t env_seed() {
  const char* s = std::getenv("DIFFSEP_SEED");
  if (!s || !*s) return 0;
  return detail::parse_count(s, "DIFFSEP_SEED");
}

// ---------------------------------------------------------------------------
// Manifests.

struct RunManifest {
  std::string subcommand;
  json config;  // the fully resolved job
  std::uint64_t seed = 0;
  std::vector<std::string> artifacts;
  std::string version = DIFFSEP_VERSION;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(RunManifest, subcommand, config, seed, artifacts, version)

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

inline void write_manifest(const RunManifest& m, const fs::path& path) { write_text(path, json(m).dump(2) + "\n"); }

inline RunManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  try {
    return json::parse(in).get<RunManifest>();
  } catch (const json::exception& e) {
    throw Error("manifest " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Jobs. Each is fully resolved before it runs, and is what the manifest stores.

struct TrainJob {
  train::TrainConfig config = train::TrainConfig::desk();
  model::ModelConfig model = model::ModelConfig::tiny();
  std::string data;
  std::string checkpoint = "diffsep.ckpt";
  bool resume = false;
  std::size_t log_every = 50;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TrainJob, config, model, data, checkpoint, resume, log_every)

inline fs::path manifest_path_for(const fs::path& artifact) { return artifact.string() + ".manifest.json"; }

inline RunManifest run_train(const TrainJob& job, std::ostream& log) {
  job.config.validate();
  job.model.validate();
  auto scan = data::scan_dataset(job.data);
  for (const auto& w : scan.warnings) log << "warning: skipped " << w << "\n";

  train::TrainState state;
  if (job.resume && fs::exists(job.checkpoint)) {
    state = train::load_checkpoint(job.checkpoint);
    if (!(state.model_config == job.model) || json(state.config) != json(job.config))
      throw Error("checkpoint " + job.checkpoint + " was written with a different configuration");
    log << "resuming at step " << state.step << "\n";
  } else {
    state = train::init_state(job.config, job.model);
  }

  const fs::path manifest = manifest_path_for(job.checkpoint);
  RunManifest m{"train", json(job), job.config.seed, {job.checkpoint, manifest.string()}};
  double acc = 0.0;
  std::size_t n = 0;
  train::RunOptions opt;
  opt.checkpoint = job.checkpoint;
  opt.on_step = [&](std::size_t step, const train::StepResult& r) {
    acc += r.loss;
    ++n;
    if (job.log_every && (step % job.log_every == 0 || step == job.config.total_steps)) {
      char line[128];
      std::snprintf(line, sizeof line, "step %zu loss %.5f grad_norm %.4f lr %.3e\n", step, acc / n, r.grad_norm, r.lr);
      log << line << std::flush;
      acc = 0.0;
      n = 0;
    }
  };
  log << "training " << scan.tracks.size() << " tracks, steps " << state.step << ".." << job.config.total_steps << "\n";
  train::run_training(state, scan.tracks, opt);
  if (!fs::exists(job.checkpoint)) train::save_checkpoint(state, job.checkpoint);
  write_manifest(m, manifest);
  return m;
}

struct SeparateJob {
  separate::SeparationParams params;
  std::string input;
  std::string checkpoint;
  std::string weights = "ema";  // ema or raw
  std::size_t jobs = 1;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(SeparateJob, params, input, checkpoint, weights, jobs)

// song.wav -> song.vocals.wav
inline fs::path output_path(const fs::path& input, const std::string& tag) {
  fs::path p = input;
  p.replace_extension(tag + ".wav");
  return p;
}

inline model::UNet<float> network_from(const train::TrainState& s, const std::string& weights) {
  if (weights == "ema") return train::ema_network(s);
  if (weights == "raw") {
    model::UNet<float> net(s.model_config, s.config.seed);
    auto& dst = net.parameters().vars();
    const auto& src = s.net->parameters().vars();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i].mutable_value() = src[i].value();
    return net;
  }
  throw Error("unknown weights '" + weights + "' (expected ema or raw)");
}

inline RunManifest run_separate(const SeparateJob& job) {
  job.params.validate();
  const auto state = train::load_checkpoint(job.checkpoint);
  const auto net = network_from(state, job.weights);
  const auto mixture = dsp::read_wav(job.input);
  auto result = separate::separate_track(job.params, net, mixture, job.jobs);

  const fs::path vocals = output_path(job.input, ".vocals");
  const fs::path manifest = output_path(job.input, ".separate").replace_extension(".manifest.json");
  RunManifest m{"separate", json(job), job.params.seed, {vocals.string()}};
  dsp::write_wav(vocals, result.vocals);
  if (result.accompaniment) {
    const fs::path accomp = output_path(job.input, ".accomp");
    dsp::write_wav(accomp, *result.accompaniment);
    m.artifacts.push_back(accomp.string());
  }
  m.artifacts.push_back(manifest.string());
  write_manifest(m, manifest);
  return m;
}

struct EvalJob {
  separate::SeparationParams params;
  std::vector<double> rhos;
  std::vector<std::size_t> steps;
  std::string data;
  std::string checkpoint;  // empty with oracle
  std::string weights = "ema";
  bool oracle = false;     // score the oracle denoiser instead of a network
  std::string out = "eval";
  std::size_t jobs = 1;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(EvalJob, params, rhos, steps, data, checkpoint, weights, oracle, out, jobs)

inline std::string cell_name(double rho, std::size_t steps) {
  return "rho" + metrics::format_db(rho) + "_steps" + std::to_string(steps);
}

inline RunManifest run_eval(const EvalJob& job, std::ostream& log) {
  job.params.validate();
  if (!job.oracle && job.checkpoint.empty()) throw Error("eval: a checkpoint is required unless --oracle is given");
  auto scan = data::scan_dataset(job.data);
  for (const auto& w : scan.warnings) log << "warning: skipped " << w << "\n";

  std::optional<model::UNet<float>> net;
  if (!job.oracle) net.emplace(network_from(train::load_checkpoint(job.checkpoint), job.weights));
  const double sigma_data = job.params.sigma_data;
  std::function<separate::DenoiserProvider(const data::Track&)> provider;
  if (job.oracle)
    provider = [](const data::Track& t) { return separate::oracle_provider(t.vocals()); };
  else
    provider = [&](const data::Track&) { return separate::network_provider(*net, sigma_data); };

  const auto cells = eval::sweep(scan.tracks, job.params, job.rhos, job.steps, provider, job.jobs);
  const fs::path out = job.out;
  RunManifest m{"eval", json(job), job.params.seed, {}};
  for (const auto& c : cells) {
    const auto base = out / cell_name(c.rho, c.steps);
    write_text(base.string() + ".csv", c.report.table());
    write_text(base.string() + ".txt", c.report.summary());
    m.artifacts.push_back(base.string() + ".csv");
    m.artifacts.push_back(base.string() + ".txt");
    log << "rho " << metrics::format_db(c.rho) << " steps " << c.steps << " csdr_db " << metrics::format_db(c.report.csdr)
        << "\n";
  }
  write_text(out / "sweep.csv", eval::sweep_table(cells));
  m.artifacts.push_back((out / "sweep.csv").string());
  m.artifacts.push_back((out / "manifest.json").string());
  write_manifest(m, out / "manifest.json");
  return m;
}

struct ToyJob {
  std::size_t tracks = 8;
  double seconds = 12.0;
  std::uint64_t seed = 0;
  std::string out = "toy";
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ToyJob, tracks, seconds, seed, out)

inline RunManifest run_make_toy(const ToyJob& job) {
  if (job.tracks == 0) throw Error("make-toy: --tracks must be at least 1");
  auto tracks = data::synth_toy_dataset(job.tracks, job.seconds, job.seed);
  try {
    fs::create_directories(job.out);
  } catch (const fs::filesystem_error& e) {
    throw Error("make-toy: cannot create " + job.out + ": " + e.code().message());
  }
  data::write_dataset(tracks, job.out);
  RunManifest m{"make-toy", json(job), job.seed, {}};
  for (const auto& t : tracks)
    for (const auto& s : data::stem_names()) m.artifacts.push_back((fs::path(job.out) / t.id / (s + ".wav")).string());
  const fs::path manifest = fs::path(job.out) / "manifest.json";
  m.artifacts.push_back(manifest.string());
  write_manifest(m, manifest);
  return m;
}

// sigma_0 .. sigma_N, one per line, 9 significant digits.
inline std::string format_schedule(const diffusion::NoiseSchedule& s) {
  std::string out;
  char buf[32];
  for (double v : s.sigmas) {
    std::snprintf(buf, sizeof buf, "%.9g\n", v);
    out += buf;
  }
  return out;
}

// Runs the job recorded in a manifest again.
inline RunManifest rerun(const RunManifest& m, std::ostream& log) {
  if (m.subcommand == "train") return run_train(m.config.get<TrainJob>(), log);
  if (m.subcommand == "separate") return run_separate(m.config.get<SeparateJob>());
  if (m.subcommand == "eval") return run_eval(m.config.get<EvalJob>(), log);
  if (m.subcommand == "make-toy") return run_make_toy(m.config.get<ToyJob>());
  throw Error("manifest names unknown subcommand '" + m.subcommand + "'");
}

}  // namespace diffsep::cli
