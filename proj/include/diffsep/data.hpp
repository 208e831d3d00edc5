// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Four-stem tracks, excerpt sampling with augmentation, and the synthetic toy
// dataset used for desk-scale runs.

#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffsep/dsp/wav.hpp"
#include "diffsep/rng.hpp"

namespace diffsep::data {

using dsp::StereoWaveform;

inline const std::array<std::string, 4>& stem_names() {
  static const std::array<std::string, 4> names{"vocals", "bass", "drums", "other"};
  return names;
}

// Sum of stems in the fixed stem order.
inline StereoWaveform sum_stems(const std::map<std::string, StereoWaveform>& stems) {
  StereoWaveform mix(stems.at("vocals").length());
  for (const auto& name : stem_names()) mix.samples += stems.at(name).samples;
  return mix;
}

struct Track {
  std::string id;
  std::map<std::string, StereoWaveform> stems;
  StereoWaveform mixture;

  std::size_t length() const { return mixture.length(); }
  const StereoWaveform& vocals() const { return stems.at("vocals"); }
};

inline Track make_track(std::string id, std::map<std::string, StereoWaveform> stems) {
  for (const auto& name : stem_names())
    if (!stems.count(name)) throw Error("track " + id + ": missing stem " + name);
  const std::size_t n = stems.at("vocals").length();
  for (const auto& [name, w] : stems)
    if (w.length() != n) throw Error("track " + id + ": stem " + name + " has a different length");
  Track t{std::move(id), std::move(stems), {}};
  t.mixture = sum_stems(t.stems);
  return t;
}

struct DatasetScan {
  std::vector<Track> tracks;
  std::vector<std::string> warnings;
};

// Every subdirectory of root with vocals/bass/drums/other.wav becomes a track,
// in name order. Incomplete or unreadable folders are skipped with a warning.
inline DatasetScan scan_dataset(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw Error("dataset root " + root.string() + " is not a directory");
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());

  DatasetScan scan;
  for (const auto& dir : dirs) {
    try {
      std::map<std::string, StereoWaveform> stems;
      for (const auto& name : stem_names()) {
        const auto file = dir / (name + ".wav");
        if (!std::filesystem::exists(file)) throw Error("missing " + name + ".wav");
        stems[name] = dsp::read_wav(file);
      }
      scan.tracks.push_back(make_track(dir.filename().string(), std::move(stems)));
    } catch (const Error& e) {
      scan.warnings.push_back(dir.filename().string() + ": " + e.what());
    }
  }
  if (scan.tracks.empty()) throw Error("no valid tracks under " + root.string());
  return scan;
}

inline void write_dataset(const std::vector<Track>& tracks, const std::filesystem::path& root) {
  for (const auto& t : tracks) {
    const auto dir = root / t.id;
    std::filesystem::create_directories(dir);
    for (const auto& name : stem_names()) dsp::write_wav(dir / (name + ".wav"), t.stems.at(name));
  }
}

struct AugmentConfig {
  double p_mix = 0.5;         // stems drawn from independent tracks and offsets
  double gain_db = 6.0;       // per-stem gain uniform in [-gain_db, gain_db]
  double p_gain = 1.0;
  double p_polarity = 0.5;    // per stem
  double p_swap = 0.5;        // left/right swap, per stem
  double p_pitch = 0.3;       // whole excerpt
  double pitch_semitones = 2.0;

  static AugmentConfig none() { return {0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0}; }
  bool operator==(const AugmentConfig&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(AugmentConfig, p_mix, gain_db, p_gain, p_polarity, p_swap, p_pitch,
                                   pitch_semitones)

struct StemDraw {
  std::size_t track = 0;
  std::size_t offset = 0;
  double gain = 1.0;
  bool inverted = false;
  bool swapped = false;
};

// What the augmentation chain did, for inspection and tests.
struct AugmentLog {
  std::map<std::string, StemDraw> stems;
  double pitch_ratio = 1.0;  // > 1 raises pitch
  bool mixed = false;
};

struct ExcerptPair {
  StereoWaveform mixture;
  StereoWaveform target;  // vocals
  AugmentLog log;
};

namespace detail {

// Reads n output samples starting at offset, stepping through the source at
// `ratio` samples per output sample with linear interpolation.
inline StereoWaveform resample_read(const StereoWaveform& src, std::size_t offset, std::size_t n, double ratio) {
  if (ratio == 1.0) return dsp::slice(src, offset, n);
  StereoWaveform out(n, src.sample_rate);
  for (std::size_t i = 0; i < n; ++i) {
    const double pos = offset + i * ratio;
    const auto j = static_cast<std::size_t>(pos);
    const double frac = pos - j;
    for (std::size_t c = 0; c < 2; ++c) {
      const double a = j < src.length() ? src(c, j) : 0.0;
      const double b = j + 1 < src.length() ? src(c, j + 1) : 0.0;
      out(c, i) = static_cast<float>(a + frac * (b - a));
    }
  }
  return out;
}

}  // namespace detail

// Draws one training excerpt of duration_s seconds. The mixture is rebuilt
// from the augmented stems, so mixture == sum of stems always holds.
inline ExcerptPair sample_excerpt(const std::vector<Track>& tracks, double duration_s, const AugmentConfig& aug,
                                  Rng& rng) {
  const auto n = static_cast<std::size_t>(std::llround(duration_s * dsp::kSampleRate));
  if (n == 0) throw Error("sample_excerpt: duration must be positive");
  AugmentLog log;
  if (aug.p_pitch > 0.0 && rng.bernoulli(aug.p_pitch))
    log.pitch_ratio = std::pow(2.0, rng.uniform(-aug.pitch_semitones, aug.pitch_semitones) / 12.0);
  // Source samples consumed by one excerpt; tracks too short for a stretched
  // read fall back to no pitch shift.
  auto span_for = [n](double ratio) { return static_cast<std::size_t>(std::ceil((n - 1) * ratio)) + 1; };
  auto eligible_for = [&](std::size_t span) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < tracks.size(); ++i)
      if (tracks[i].length() >= span) out.push_back(i);
    return out;
  };
  std::size_t span = span_for(log.pitch_ratio);
  std::vector<std::size_t> eligible = eligible_for(span);
  if (eligible.empty() && log.pitch_ratio != 1.0) {
    log.pitch_ratio = 1.0;
    span = n;
    eligible = eligible_for(span);
  }
  if (eligible.empty())
    throw Error("sample_excerpt: no track is at least " + std::to_string(duration_s) + " s long");

  auto draw_position = [&](StemDraw& d) {
    d.track = eligible[rng.index(eligible.size())];
    d.offset = rng.index(tracks[d.track].length() - span + 1);
  };
  StemDraw shared;
  draw_position(shared);
  log.mixed = aug.p_mix > 0.0 && rng.bernoulli(aug.p_mix);

  std::map<std::string, StereoWaveform> stems;
  for (const auto& name : stem_names()) {
    StemDraw d = shared;
    if (log.mixed) draw_position(d);
    if (aug.p_gain > 0.0 && rng.bernoulli(aug.p_gain))
      d.gain = std::pow(10.0, rng.uniform(-aug.gain_db, aug.gain_db) / 20.0);
    d.inverted = aug.p_polarity > 0.0 && rng.bernoulli(aug.p_polarity);
    d.swapped = aug.p_swap > 0.0 && rng.bernoulli(aug.p_swap);

    StereoWaveform w = detail::resample_read(tracks[d.track].stems.at(name), d.offset, n, log.pitch_ratio);
    const double g = d.inverted ? -d.gain : d.gain;
    if (g != 1.0)
      for (auto& v : w.samples.values()) v = static_cast<float>(v * g);
    if (d.swapped)
      for (std::size_t i = 0; i < n; ++i) std::swap(w(0, i), w(1, i));
    stems[name] = std::move(w);
    log.stems[name] = d;
  }
  ExcerptPair pair{sum_stems(stems), std::move(stems.at("vocals")), std::move(log)};
  return pair;
}

// ---------------------------------------------------------------------------
// Toy stems.

namespace detail {

// RBJ biquad, direct form I.
class Biquad {
 public:
  static Biquad lowpass(double hz, double q) { return make(hz, q, 0); }
  static Biquad highpass(double hz, double q) { return make(hz, q, 1); }
  static Biquad bandpass(double hz, double q) { return make(hz, q, 2); }

  double operator()(double x) {
    const double y = b0_ * x + b1_ * x1_ + b2_ * x2_ - a1_ * y1_ - a2_ * y2_;
    x2_ = x1_;
    x1_ = x;
    y2_ = y1_;
    y1_ = y;
    return y;
  }

 private:
  static Biquad make(double hz, double q, int kind) {
    const double w = 2.0 * std::numbers::pi * hz / dsp::kSampleRate;
    const double alpha = std::sin(w) / (2.0 * q), cw = std::cos(w);
    double b0, b1, b2;
    if (kind == 0) {
      b0 = (1 - cw) / 2, b1 = 1 - cw, b2 = (1 - cw) / 2;
    } else if (kind == 1) {
      b0 = (1 + cw) / 2, b1 = -(1 + cw), b2 = (1 + cw) / 2;
    } else {
      b0 = alpha, b1 = 0.0, b2 = -alpha;
    }
    const double a0 = 1 + alpha;
    Biquad f;
    f.b0_ = b0 / a0, f.b1_ = b1 / a0, f.b2_ = b2 / a0;
    f.a1_ = -2 * cw / a0, f.a2_ = (1 - alpha) / a0;
    return f;
  }
  double b0_ = 1, b1_ = 0, b2_ = 0, a1_ = 0, a2_ = 0;
  double x1_ = 0, x2_ = 0, y1_ = 0, y2_ = 0;
};

inline void scale_to_rms(std::vector<double>& x, double rms) {
  double s = 0;
  for (double v : x) s += v * v;
  const double cur = std::sqrt(s / std::max<std::size_t>(1, x.size()));
  if (cur > 0)
    for (double& v : x) v *= rms / cur;
}

// RMS target, then pulled down if the peak would exceed `peak`.
inline void scale_to_level(std::vector<double>& x, double rms, double peak = 0.45) {
  scale_to_rms(x, rms);
  double m = 0;
  for (double v : x) m = std::max(m, std::abs(v));
  if (m > peak)
    for (double& v : x) v *= peak / m;
}

inline StereoWaveform to_stereo(const std::vector<double>& mono, double pan) {
  StereoWaveform w(mono.size());
  const double l = std::cos(pan * std::numbers::pi / 2), r = std::sin(pan * std::numbers::pi / 2);
  for (std::size_t i = 0; i < mono.size(); ++i) {
    w(0, i) = static_cast<float>(mono[i] * l * std::numbers::sqrt2);
    w(1, i) = static_cast<float>(mono[i] * r * std::numbers::sqrt2);
  }
  return w;
}

// Sung-like notes: harmonic tone complexes with vibrato and glides between
// randomly chosen pitches, with short rests.
inline std::vector<double> toy_vocals(std::size_t n, Rng& rng) {
  const double sr = dsp::kSampleRate;
  std::vector<double> out(n, 0.0);
  const double vib_rate = rng.uniform(4.5, 6.5), vib_depth = rng.uniform(0.2, 0.5);  // semitones
  double f_prev = rng.uniform(160.0, 350.0);
  std::size_t pos = 0;
  double phase = 0.0;
  while (pos < n) {
    const auto len = static_cast<std::size_t>(rng.uniform(0.25, 0.7) * sr);
    const auto rest = rng.bernoulli(0.25) ? static_cast<std::size_t>(rng.uniform(0.05, 0.3) * sr) : 0;
    const double f_target = std::clamp(f_prev * std::pow(2.0, rng.uniform(-5.0, 5.0) / 12.0), 150.0, 420.0);
    const double bright = rng.uniform(1.2, 2.0);  // harmonic rolloff exponent
    for (std::size_t i = 0; i < len && pos + i < n; ++i) {
      const double t = i / sr;
      const double glide = std::min(1.0, t / 0.06);
      const double f0 = (f_prev + (f_target - f_prev) * glide) *
                        std::pow(2.0, vib_depth * std::sin(2 * std::numbers::pi * vib_rate * (pos + i) / sr) / 12.0);
      phase += 2 * std::numbers::pi * f0 / sr;
      const double env = std::min({1.0, t / 0.03, (len - i) / (0.05 * sr)});
      double v = 0.0;
      for (int k = 1; k * f0 < 5000.0; ++k) v += std::sin(k * phase) / std::pow(k, bright);
      out[pos + i] = env * v;
    }
    f_prev = f_target;
    pos += len + rest;
  }
  scale_to_level(out, 0.1);
  return out;
}

// Low-passed sine sweeps between bass notes.
inline std::vector<double> toy_bass(std::size_t n, Rng& rng) {
  const double sr = dsp::kSampleRate;
  std::vector<double> out(n, 0.0);
  Biquad lp = Biquad::lowpass(300.0, 0.707);
  double phase = 0.0, f = rng.uniform(45.0, 90.0);
  std::size_t pos = 0;
  while (pos < n) {
    const auto len = static_cast<std::size_t>(rng.uniform(0.3, 1.0) * sr);
    const double f_end = std::clamp(f * std::pow(2.0, rng.uniform(-7.0, 7.0) / 12.0), 40.0, 130.0);
    for (std::size_t i = 0; i < len && pos + i < n; ++i) {
      const double fi = f + (f_end - f) * i / len;
      phase += 2 * std::numbers::pi * fi / sr;
      const double env = std::min(1.0, (len - i) / (0.02 * sr));
      out[pos + i] = env * (std::sin(phase) + 0.3 * std::sin(2 * phase));
    }
    f = f_end;
    pos += len;
  }
  for (double& v : out) v = lp(v);
  scale_to_level(out, 0.08);
  return out;
}

// Click trains on a beat grid: kicks through a low resonator, hats through a
// high-pass, snares through a band-pass.
inline std::vector<double> toy_drums(std::size_t n, Rng& rng) {
  const double sr = dsp::kSampleRate;
  const double beat = 60.0 / rng.uniform(90.0, 140.0) * sr / 2;  // eighth notes
  std::vector<double> kick(n, 0.0), hat(n, 0.0), snare(n, 0.0);
  for (std::size_t k = 0; k * beat < n; ++k) {
    const auto at = static_cast<std::size_t>(k * beat);
    if (k % 4 == 0 || rng.bernoulli(0.1)) kick[at] = 1.0;
    if (k % 4 == 2) snare[at] = 1.0;
    hat[at] = rng.uniform(0.4, 1.0);
  }
  Biquad kf = Biquad::bandpass(60.0, 8.0), hf = Biquad::highpass(7000.0, 0.707), sf = Biquad::bandpass(1800.0, 2.0);
  Rng noise = rng;
  std::vector<double> out(n, 0.0);
  double hat_env = 0.0, snare_env = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    hat_env = std::max(hat_env * 0.9990, hat[i]);
    snare_env = std::max(snare_env * 0.9995, snare[i]);
    const double w = noise.normal();
    out[i] = 40.0 * kf(kick[i]) + 0.3 * hf(w * hat_env) + 0.8 * sf(w * snare_env);
  }
  scale_to_level(out, 0.08);
  return out;
}

// Band-pass noise with a slow amplitude drift.
inline std::vector<double> toy_other(std::size_t n, Rng& rng) {
  const double sr = dsp::kSampleRate;
  Biquad bp = Biquad::bandpass(rng.uniform(600.0, 2500.0), rng.uniform(0.5, 1.5));
  const double rate = rng.uniform(0.1, 0.5), depth = rng.uniform(0.2, 0.6);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = bp(rng.normal()) * (1.0 + depth * std::sin(2 * std::numbers::pi * rate * i / sr));
  scale_to_level(out, 0.05);
  return out;
}

}  // namespace detail

// Deterministic synthetic four-stem tracks named toy_000, toy_001, ...
inline std::vector<Track> synth_toy_dataset(std::size_t n_tracks, double duration_s, std::uint64_t seed) {
  if (n_tracks == 0) throw Error("synth_toy_dataset: need at least one track");
  if (!(duration_s > 0.0)) throw Error("synth_toy_dataset: duration must be positive");
  const auto n = static_cast<std::size_t>(std::llround(duration_s * dsp::kSampleRate));
  std::vector<Track> tracks;
  for (std::size_t k = 0; k < n_tracks; ++k) {
    Rng rng = Rng::stream(seed, "toy", k);
    std::map<std::string, StereoWaveform> stems;
    stems["vocals"] = detail::to_stereo(detail::toy_vocals(n, rng), rng.uniform(0.4, 0.6));
    stems["bass"] = detail::to_stereo(detail::toy_bass(n, rng), 0.5);
    stems["drums"] = detail::to_stereo(detail::toy_drums(n, rng), rng.uniform(0.3, 0.7));
    stems["other"] = detail::to_stereo(detail::toy_other(n, rng), rng.uniform(0.2, 0.8));
    char id[32];
    std::snprintf(id, sizeof id, "toy_%03zu", k);
    tracks.push_back(make_track(id, std::move(stems)));
  }
  return tracks;
}

}  // namespace diffsep::data
