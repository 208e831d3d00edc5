// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Whole-track inference: normalize, chunk, sample every chunk, overlap-add.

#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <thread>

#include <json.hpp>

#include "diffsep/diffusion.hpp"
#include "diffsep/dsp/chunking.hpp"
#include "diffsep/dsp/spectral.hpp"
#include "diffsep/model.hpp"

namespace diffsep::separate {

struct SeparationParams {
  std::size_t steps = 7;
  double rho = 2.0;
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double sigma_data = 0.5;
  std::string sampler = "euler";
  std::uint64_t seed = 0;
  double chunk_seconds = 6.0;
  double overlap = 0.25;
  bool emit_accompaniment = false;

  void validate() const {
    auto fail = [](const std::string& m) { return Error("separation params: " + m); };
    if (steps == 0) throw fail("steps must be positive");
    if (!(rho > 0.0)) throw fail("rho must be positive");
    if (!(sigma_min > 0.0 && sigma_min < sigma_max)) throw fail("require 0 < sigma_min < sigma_max");
    if (!(sigma_data > 0.0)) throw fail("sigma_data must be positive");
    if (!(chunk_seconds > 0.0)) throw fail("chunk_seconds must be positive");
    if (!(overlap >= 0.0 && overlap < 1.0)) throw fail("overlap must lie in [0, 1)");
    diffusion::parse_sampler(sampler);
  }
  diffusion::NoiseSchedule schedule() const {
    return diffusion::karras_schedule(steps, sigma_min, sigma_max, rho);
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(SeparationParams, steps, rho, sigma_min, sigma_max, sigma_data, sampler, seed,
                                   chunk_seconds, overlap, emit_accompaniment)

// What a denoiser provider learns about the chunk it serves.
struct ChunkContext {
  std::size_t index = 0;
  std::size_t offset = 0;  // in samples, within the track
  std::size_t length = 0;  // chunk length in samples (the last chunk is zero-padded)
  double track_gain = 1.0; // the track was divided by this before chunking
};

// Creates the denoiser for one chunk. Called from worker threads when jobs > 1.
using DenoiserProvider = std::function<std::unique_ptr<diffusion::Denoiser<float>>(const ChunkContext&)>;

inline DenoiserProvider network_provider(const model::UNet<float>& net, double sigma_data = 0.5) {
  return [&net, sigma_data](const ChunkContext&) {
    return std::make_unique<diffusion::NetworkDenoiser<float>>(net, sigma_data);
  };
}

// Test seam: every chunk is "denoised" to the true vocals of that chunk in
// network coordinates, bypassing any network.
inline DenoiserProvider oracle_provider(const dsp::StereoWaveform& vocals, const dsp::FeatureConfig& features = {}) {
  return [vocals, features](const ChunkContext& ctx) {
    dsp::StereoWaveform piece = dsp::apply_gain(dsp::slice(vocals, ctx.offset, ctx.length), 1.0 / ctx.track_gain);
    return std::make_unique<diffusion::OracleDenoiser<float>>(dsp::encode(piece, features).values);
  };
}

struct SeparationResult {
  dsp::StereoWaveform vocals;
  std::optional<dsp::StereoWaveform> accompaniment;
};

namespace detail {

inline bool all_finite(const Tensor<float>& t) {
  for (float v : t.values())
    if (!std::isfinite(v)) return false;
  return true;
}

// acc = mix - voc, nudged by ulps where needed so that voc + acc == mix
// holds exactly in float. If no such acc exists for a sample, the vocal
// sample is moved instead.
inline dsp::StereoWaveform subtract_exact(const dsp::StereoWaveform& mix, dsp::StereoWaveform& voc) {
  dsp::StereoWaveform acc(mix.length(), mix.sample_rate);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < mix.length(); ++i) {
      const float m = mix(c, i);
      float v = voc(c, i);
      float a = m - v;
      for (int tries = 0; v + a != m && tries < 8; ++tries) {
        a = std::nextafter(a, (v + a < m) ? INFINITY : -INFINITY);
      }
      if (v + a != m) {
        // Give up on v: a = m and v = 0 always sum exactly.
        a = m;
        v = 0.0f;
        voc(c, i) = v;
      }
      acc(c, i) = a;
    }
  return acc;
}

}  // namespace detail

// Separates one chunk already in normalized track units.
inline dsp::StereoWaveform separate_chunk(const SeparationParams& p, diffusion::Denoiser<float>& den,
                                          const dsp::StereoWaveform& piece, std::size_t chunk_index,
                                          const dsp::FeatureConfig& features = {}) {
  dsp::BandSplitTensor cond = dsp::encode(piece, features);
  Rng rng = Rng::stream(p.seed, "sampler", chunk_index);
  Tensor<float> x = diffusion::sample(den, cond.values, p.schedule(), rng, diffusion::parse_sampler(p.sampler));
  if (!detail::all_finite(x)) throw Error("separate: sampler produced non-finite values in chunk " + std::to_string(chunk_index));
  dsp::BandSplitTensor est = cond;
  est.values = std::move(x);
  return dsp::decode(est, piece.length(), features);
}

// Whole-track normalization by the mixture peak, chunks processed on up to
// `jobs` threads, ordered overlap-add, gain restored.
inline SeparationResult separate_track(const SeparationParams& p, const DenoiserProvider& provider,
                                       const dsp::StereoWaveform& mixture, std::size_t jobs = 1,
                                       const dsp::FeatureConfig& features = {}) {
  p.validate();
  if (mixture.sample_rate != dsp::kSampleRate)
    throw Error("separate: expected " + std::to_string(dsp::kSampleRate) + " Hz input, got " +
                std::to_string(mixture.sample_rate) + " Hz");
  if (mixture.length() == 0) throw Error("separate: empty input");
  const double peak = dsp::peak(mixture);
  const double gain = peak > 0.0 ? peak : 1.0;
  const dsp::StereoWaveform norm = dsp::apply_gain(mixture, 1.0 / gain);
  const dsp::Chunks chunks = dsp::chunk(norm, p.chunk_seconds, p.overlap);
  const std::size_t K = chunks.pieces.size();

  std::vector<dsp::StereoWaveform> out(K);
  std::vector<std::exception_ptr> errors(K);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t k; (k = next.fetch_add(1)) < K;) {
      try {
        auto den = provider(ChunkContext{k, chunks.offsets[k], chunks.chunk_length, gain});
        out[k] = separate_chunk(p, *den, chunks.pieces[k], k, features);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(jobs, 1, K);
  if (n_threads == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  SeparationResult r{dsp::apply_gain(dsp::overlap_add(out, chunks.offsets, chunks.total_length), gain), std::nullopt};
  r.vocals.sample_rate = mixture.sample_rate;
  if (p.emit_accompaniment) r.accompaniment = detail::subtract_exact(mixture, r.vocals);
  return r;
}

inline SeparationResult separate_track(const SeparationParams& p, const model::UNet<float>& net,
                                       const dsp::StereoWaveform& mixture, std::size_t jobs = 1) {
  return separate_track(p, network_provider(net, p.sigma_data), mixture, jobs);
}

}  // namespace diffsep::separate
