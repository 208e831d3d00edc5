// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Dataset evaluation runs and (rho, steps) sweeps.

#pragma once

#include <sstream>

#include "diffsep/data.hpp"
#include "diffsep/metrics.hpp"
#include "diffsep/separate.hpp"

namespace diffsep::eval {

struct EvalReport {
  separate::SeparationParams params;
  std::vector<metrics::TrackScore> tracks;  // in dataset order
  double csdr = 0.0;

  std::string table() const { return metrics::score_table(tracks); }

  std::string summary() const {
    std::ostringstream out;
    out << "tracks: " << tracks.size() << "\n"
        << "steps: " << params.steps << "\n"
        << "rho: " << metrics::format_db(params.rho) << "\n"
        << "sampler: " << params.sampler << "\n"
        << "seed: " << params.seed << "\n"
        << "csdr_db: " << metrics::format_db(csdr) << "\n";
    return out.str();
  }
};

// Separates every track with the provider returned by `make_provider` and
// scores the vocals estimate.
inline EvalReport eval_run(const std::vector<data::Track>& tracks, const separate::SeparationParams& params,
                           const std::function<separate::DenoiserProvider(const data::Track&)>& make_provider,
                           std::size_t jobs = 1) {
  if (tracks.empty()) throw Error("eval: empty dataset");
  EvalReport r{params, {}, 0.0};
  separate::SeparationParams p = params;
  p.emit_accompaniment = false;
  for (const auto& t : tracks) {
    auto est = separate::separate_track(p, make_provider(t), t.mixture, jobs);
    r.tracks.push_back(metrics::csdr_track(t.vocals(), est.vocals, t.id));
  }
  r.csdr = metrics::csdr_dataset(r.tracks);
  return r;
}

inline EvalReport eval_run(const std::vector<data::Track>& tracks, const separate::SeparationParams& params,
                           const model::UNet<float>& net, std::size_t jobs = 1) {
  return eval_run(tracks, params, [&](const data::Track&) { return separate::network_provider(net, params.sigma_data); },
                  jobs);
}

// The mixture itself used as the vocals estimate.
inline double mixture_baseline(const std::vector<data::Track>& tracks) {
  std::vector<metrics::TrackScore> s;
  for (const auto& t : tracks) s.push_back(metrics::csdr_track(t.vocals(), t.mixture, t.id));
  return metrics::csdr_dataset(s);
}

struct SweepCell {
  double rho;
  std::size_t steps;
  EvalReport report;
};

// rho,steps,csdr_db
inline std::string sweep_table(const std::vector<SweepCell>& cells) {
  std::ostringstream out;
  out << "rho,steps,csdr_db\n";
  for (const auto& c : cells) out << metrics::format_db(c.rho) << ',' << c.steps << ',' << metrics::format_db(c.report.csdr) << '\n';
  return out.str();
}

// Runs every (rho, steps) cell in row-major order (rho outer). Empty lists
// fall back to the value in `base`.
inline std::vector<SweepCell> sweep(const std::vector<data::Track>& tracks, const separate::SeparationParams& base,
                                    std::vector<double> rhos, std::vector<std::size_t> steps,
                                    const std::function<separate::DenoiserProvider(const data::Track&)>& make_provider,
                                    std::size_t jobs = 1) {
  if (rhos.empty()) rhos = {base.rho};
  if (steps.empty()) steps = {base.steps};
  std::vector<SweepCell> cells;
  for (double rho : rhos)
    for (std::size_t n : steps) {
      separate::SeparationParams p = base;
      p.rho = rho;
      p.steps = n;
      cells.push_back({rho, n, eval_run(tracks, p, make_provider, jobs)});
    }
  return cells;
}

}  // namespace diffsep::eval
