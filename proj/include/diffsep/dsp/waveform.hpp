// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cmath>
#include <cstddef>

#include "diffsep/tensor.hpp"

namespace diffsep::dsp {

inline constexpr int kSampleRate = 44100;

// Two-channel audio, samples laid out [2, n].
struct StereoWaveform {
  Tensor<float> samples;
  int sample_rate = kSampleRate;
  // Divisor applied by peak normalization; 1 when none was applied.
  double peak_gain = 1.0;

  StereoWaveform() : samples({2, 0}) {}
  explicit StereoWaveform(std::size_t n, int rate = kSampleRate)
      : samples({2, n}), sample_rate(rate) {}
  StereoWaveform(Tensor<float> s, int rate) : samples(std::move(s)), sample_rate(rate) {
    if (samples.rank() != 2 || samples.dim(0) != 2) throw Error("waveform must be [2, n]");
  }

  std::size_t length() const { return samples.dim(1); }
  double seconds() const { return static_cast<double>(length()) / sample_rate; }
  float* channel(std::size_t c) { return samples.data() + c * length(); }
  const float* channel(std::size_t c) const { return samples.data() + c * length(); }
  float& operator()(std::size_t c, std::size_t i) { return samples[c * length() + i]; }
  float operator()(std::size_t c, std::size_t i) const { return samples[c * length() + i]; }
};

inline double peak(const StereoWaveform& w) { return max_abs(w.samples); }

// Divides by max |x|. All-zero input comes back unchanged with gain 1.
inline StereoWaveform peak_normalize(const StereoWaveform& wave) {
  if (wave.length() == 0) throw Error("peak_normalize: empty waveform");
  StereoWaveform out = wave;
  const double p = peak(wave);
  if (p == 0.0) {
    out.peak_gain = 1.0;
    return out;
  }
  for (auto& v : out.samples.values()) v = static_cast<float>(v / p);
  out.peak_gain = p;
  return out;
}

// Multiplies by a gain, e.g. to undo peak normalization.
inline StereoWaveform apply_gain(const StereoWaveform& wave, double gain) {
  StereoWaveform out = wave;
  for (auto& v : out.samples.values()) v = static_cast<float>(v * gain);
  out.peak_gain = 1.0;
  return out;
}

// Samples [offset, offset + n) with zero fill past the end.
inline StereoWaveform slice(const StereoWaveform& wave, std::size_t offset, std::size_t n) {
  StereoWaveform out(n, wave.sample_rate);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < n && offset + i < wave.length(); ++i)
      out(c, i) = wave(c, offset + i);
  return out;
}

}  // namespace diffsep::dsp
