// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <map>
#include <mutex>
#include <numbers>
#include <vector>

#include "diffsep/dsp/waveform.hpp"

namespace diffsep::dsp {

using Complex = std::complex<float>;

struct StftConfig {
  std::size_t window_size = 2048;
  std::size_t hop = 1024;

  std::size_t bins() const { return window_size / 2 + 1; }
  std::size_t frames(std::size_t n_samples) const { return (n_samples + hop - 1) / hop; }
  bool operator==(const StftConfig&) const = default;
};

// Complex STFT, bins laid out [2, F, T].
struct ComplexSpectrogram {
  Tensor<Complex> bins;
  StftConfig config;

  std::size_t n_bins() const { return bins.dim(1); }
  std::size_t n_frames() const { return bins.dim(2); }
};

namespace detail {

// FFTW plans are created once per size under a lock; execution with the
// new-array interface is thread-safe.
class FftPlans {
 public:
  static FftPlans& instance() {
    static FftPlans plans;
    return plans;
  }
  fftw_plan forward(std::size_t n) { return get(n, true); }
  fftw_plan inverse(std::size_t n) { return get(n, false); }

 private:
  fftw_plan get(std::size_t n, bool fwd) {
    std::lock_guard lock(mutex_);
    auto& slot = (fwd ? forward_ : inverse_)[n];
    if (!slot) {
      std::vector<double> real(n);
      std::vector<fftw_complex> cplx(n / 2 + 1);
      const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
      slot = fwd ? fftw_plan_dft_r2c_1d(static_cast<int>(n), real.data(), cplx.data(), flags)
                 : fftw_plan_dft_c2r_1d(static_cast<int>(n), cplx.data(), real.data(), flags);
    }
    return slot;
  }
  std::mutex mutex_;
  std::map<std::size_t, fftw_plan> forward_, inverse_;
};

// Periodic Hann window.
inline std::vector<double> hann(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

inline long reflect(long i, long n) {
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

}  // namespace detail

// Hann-windowed STFT with centred frames and reflect padding.
// T = ceil(n / hop) frames, F = window/2 + 1 bins.
inline ComplexSpectrogram stft(const StereoWaveform& wave, const StftConfig& cfg = {}) {
  const std::size_t n = wave.length();
  if (n < cfg.window_size) throw Error("stft: input too short");
  const std::size_t F = cfg.bins(), T = cfg.frames(n);
  const long pad = static_cast<long>(cfg.window_size / 2);
  const auto window = detail::hann(cfg.window_size);
  fftw_plan plan = detail::FftPlans::instance().forward(cfg.window_size);

  ComplexSpectrogram spec{Tensor<Complex>({2, F, T}), cfg};
  std::vector<double> frame(cfg.window_size);
  std::vector<fftw_complex> out(F);
  for (std::size_t c = 0; c < 2; ++c) {
    const float* x = wave.channel(c);
    for (std::size_t t = 0; t < T; ++t) {
      const long start = static_cast<long>(t * cfg.hop) - pad;
      for (std::size_t i = 0; i < cfg.window_size; ++i) {
        const long j = start + static_cast<long>(i);
        frame[i] = x[detail::reflect(j, static_cast<long>(n))] * window[i];
      }
      fftw_execute_dft_r2c(plan, frame.data(), out.data());
      for (std::size_t f = 0; f < F; ++f)
        spec.bins.at(c, f, t) = Complex(static_cast<float>(out[f][0]), static_cast<float>(out[f][1]));
    }
  }
  return spec;
}

// Weighted overlap-add inverse of stft(); output trimmed to n_samples.
inline StereoWaveform istft(const ComplexSpectrogram& spec, std::size_t n_samples) {
  const StftConfig& cfg = spec.config;
  if (spec.bins.rank() != 3 || spec.bins.dim(0) != 2 || spec.n_bins() != cfg.bins())
    throw Error("istft: spectrogram does not match its window metadata");
  const std::size_t T = spec.n_frames();
  if (cfg.frames(n_samples) != T) throw Error("istft: frame count does not match n_samples");
  const std::size_t N = cfg.window_size, F = cfg.bins();
  const std::size_t pad = N / 2;
  const auto window = detail::hann(N);
  fftw_plan plan = detail::FftPlans::instance().inverse(N);

  const std::size_t total = (T - 1) * cfg.hop + N;
  std::vector<double> envelope(total, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < N; ++i) envelope[t * cfg.hop + i] += window[i] * window[i];

  StereoWaveform wave(n_samples);
  std::vector<fftw_complex> in(F);
  std::vector<double> frame(N), acc(total);
  for (std::size_t c = 0; c < 2; ++c) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t f = 0; f < F; ++f) {
        const Complex v = spec.bins.at(c, f, t);
        in[f][0] = v.real();
        in[f][1] = (f == 0 || f == F - 1) ? 0.0 : v.imag();
      }
      fftw_execute_dft_c2r(plan, in.data(), frame.data());
      for (std::size_t i = 0; i < N; ++i) acc[t * cfg.hop + i] += frame[i] / N * window[i];
    }
    float* y = wave.channel(c);
    for (std::size_t i = 0; i < n_samples; ++i) {
      const double e = envelope[i + pad];
      y[i] = e > 1e-11 ? static_cast<float>(acc[i + pad] / e) : 0.0f;
    }
  }
  return wave;
}

}  // namespace diffsep::dsp
