// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Small helpers shared by the test binaries.

#pragma once

#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>

#include "diffsep/dsp/waveform.hpp"
#include "diffsep/rng.hpp"

namespace diffsep::testing {

inline dsp::StereoWaveform noise_wave(std::size_t n, std::uint64_t seed, double scale = 0.3) {
  dsp::StereoWaveform w(n);
  Rng rng(seed);
  rng.fill_normal(w.samples, scale);
  return w;
}

inline dsp::StereoWaveform sine_wave(std::size_t n, double hz, double amp = 1.0) {
  dsp::StereoWaveform w(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float v = static_cast<float>(amp * std::sin(2.0 * std::numbers::pi * hz * i / dsp::kSampleRate));
    w(0, i) = v;
    w(1, i) = v;
  }
  return w;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("diffsep_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace diffsep::testing
