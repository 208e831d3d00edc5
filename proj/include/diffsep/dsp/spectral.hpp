// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Amplitude compression, real/imag channel stacking and band splitting:
// the path from a complex spectrogram to the diffusion state space.

#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "diffsep/dsp/stft.hpp"

namespace diffsep::dsp {

struct CompressionParams {
  double alpha = 0.667;
  double beta = 0.065;
};

// c -> beta * |c|^alpha * exp(i angle(c)); zero stays zero.
inline ComplexSpectrogram compress(const ComplexSpectrogram& spec, const CompressionParams& p = {}) {
  if (!(p.alpha > 0.0 && p.beta > 0.0)) throw Error("compress: alpha and beta must be positive");
  ComplexSpectrogram out = spec;
  for (auto& c : out.bins.values()) {
    const double re = c.real(), im = c.imag();
    const double mag = std::hypot(re, im);
    if (mag == 0.0) {
      c = Complex(0.0f, 0.0f);
      continue;
    }
    const double k = p.beta * std::pow(mag, p.alpha) / mag;
    c = Complex(static_cast<float>(re * k), static_cast<float>(im * k));
  }
  return out;
}

// Inverse of compress(): c = (|c~| / beta)^(1/alpha) * exp(i angle(c~)).
inline ComplexSpectrogram expand(const ComplexSpectrogram& spec, const CompressionParams& p = {}) {
  if (!(p.alpha > 0.0 && p.beta > 0.0)) throw Error("expand: alpha and beta must be positive");
  ComplexSpectrogram out = spec;
  for (auto& c : out.bins.values()) {
    const double re = c.real(), im = c.imag();
    const double mag = std::hypot(re, im);
    if (mag == 0.0) {
      c = Complex(0.0f, 0.0f);
      continue;
    }
    const double k = std::pow(mag / p.beta, 1.0 / p.alpha) / mag;
    c = Complex(static_cast<float>(re * k), static_cast<float>(im * k));
  }
  return out;
}

inline const std::array<std::string, 4>& stereo_channel_layout() {
  static const std::array<std::string, 4> names{"L-re", "L-im", "R-re", "R-im"};
  return names;
}

// Real tensor [C, F, T] with one name per channel.
struct ChannelStack {
  Tensor<float> values;
  std::vector<std::string> layout;
  StftConfig config;
};

// [2, F, T] complex -> [4, F, T] real in the order L-re, L-im, R-re, R-im.
inline ChannelStack to_channels(const ComplexSpectrogram& spec) {
  const std::size_t F = spec.n_bins(), T = spec.n_frames();
  ChannelStack out{Tensor<float>({4, F, T}), {}, spec.config};
  out.layout.assign(stereo_channel_layout().begin(), stereo_channel_layout().end());
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t t = 0; t < T; ++t) {
        const Complex v = spec.bins.at(c, f, t);
        out.values.at(2 * c, f, t) = v.real();
        out.values.at(2 * c + 1, f, t) = v.imag();
      }
  return out;
}

inline ComplexSpectrogram from_channels(const ChannelStack& stack) {
  if (stack.values.rank() != 3 || stack.values.dim(0) != 4)
    throw Error("from_channels: expected a 4-channel stack");
  const std::size_t F = stack.values.dim(1), T = stack.values.dim(2);
  ComplexSpectrogram spec{Tensor<Complex>({2, F, T}), stack.config};
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t t = 0; t < T; ++t)
        spec.bins.at(c, f, t) = Complex(stack.values.at(2 * c, f, t), stack.values.at(2 * c + 1, f, t));
  return spec;
}

// Frequency bands stacked as channel groups: channel b * C + c holds band b
// of input channel c. Bins above f_trunc (the Nyquist bin at defaults) are
// dropped and come back as zeros from band_merge().
struct BandSplitTensor {
  Tensor<float> values;  // [C * n_splits, f_trunc / n_splits, T]
  std::size_t n_splits = 1;
  std::size_t f_trunc = 0;
  std::size_t f_full = 0;
  std::vector<std::string> layout;  // layout of the merged stack
  StftConfig config;
};

inline BandSplitTensor band_split(const ChannelStack& x, std::size_t n_splits) {
  if (n_splits == 0) throw Error("band_split: n_splits must be positive");
  const std::size_t C = x.values.dim(0), F = x.values.dim(1), T = x.values.dim(2);
  const std::size_t f_trunc = F - F % n_splits;
  if (f_trunc == 0 || f_trunc % n_splits != 0)
    throw Error("band_split: " + std::to_string(F) + " bins cannot be split into " +
                std::to_string(n_splits) + " bands");
  const std::size_t band = f_trunc / n_splits;
  BandSplitTensor out{Tensor<float>({C * n_splits, band, T}), n_splits, f_trunc, F, x.layout, x.config};
  for (std::size_t b = 0; b < n_splits; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t f = 0; f < band; ++f)
        std::copy_n(&x.values.at(c, b * band + f, 0), T, &out.values.at(b * C + c, f, 0));
  return out;
}

inline ChannelStack band_merge(const BandSplitTensor& x) {
  const auto& v = x.values;
  if (v.rank() != 3 || x.n_splits == 0 || v.dim(0) % x.n_splits != 0 ||
      v.dim(1) * x.n_splits != x.f_trunc || x.f_full < x.f_trunc)
    throw Error("band_merge: metadata does not match tensor shape " + shape_string(v.shape()));
  const std::size_t C = v.dim(0) / x.n_splits, band = v.dim(1), T = v.dim(2);
  ChannelStack out{Tensor<float>({C, x.f_full, T}), x.layout, x.config};
  for (std::size_t b = 0; b < x.n_splits; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t f = 0; f < band; ++f)
        std::copy_n(&v.at(b * C + c, f, 0), T, &out.values.at(c, b * band + f, 0));
  return out;
}

struct FeatureConfig {
  StftConfig stft;
  CompressionParams compression;
  std::size_t n_splits = 4;
};

// Waveform (already normalized) -> compressed, band-split diffusion state.
inline BandSplitTensor encode(const StereoWaveform& wave, const FeatureConfig& cfg = {}) {
  return band_split(to_channels(compress(stft(wave, cfg.stft), cfg.compression)), cfg.n_splits);
}

// Inverse of encode(), trimmed to n_samples.
inline StereoWaveform decode(const BandSplitTensor& x, std::size_t n_samples, const FeatureConfig& cfg = {}) {
  return istft(expand(from_channels(band_merge(x)), cfg.compression), n_samples);
}

}  // namespace diffsep::dsp
