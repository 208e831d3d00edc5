// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Energy-ratio SDR, chunked per-track scores and dataset aggregation.

#pragma once

#include <algorithm>
#include <cmath>
#include <charconv>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "diffsep/dsp/waveform.hpp"

namespace diffsep::metrics {

inline constexpr double kSdrClamp = 80.0;

// 10 log10(sum ref^2 / sum (ref - est)^2) over both channels, clamped to
// [-80, 80]. Returns nullopt for an all-zero reference.
inline std::optional<double> sdr_or_silent(const float* ref, const float* est, std::size_t n) {
  long double num = 0.0L, den = 0.0L;
  for (std::size_t i = 0; i < n; ++i) {
    const long double r = ref[i], e = r - est[i];
    num += r * r;
    den += e * e;
  }
  if (num == 0.0L) return std::nullopt;
  if (den == 0.0L) return kSdrClamp;
  return std::clamp(static_cast<double>(10.0L * std::log10(num / den)), -kSdrClamp, kSdrClamp);
}

inline double sdr(const dsp::StereoWaveform& ref, const dsp::StereoWaveform& est) {
  if (ref.length() != est.length())
    throw Error("sdr: reference has " + std::to_string(ref.length()) + " samples, estimate " +
                std::to_string(est.length()));
  auto v = sdr_or_silent(ref.samples.data(), est.samples.data(), ref.samples.size());
  if (!v) throw Error("sdr: reference is silent");
  return *v;
}

// Median with the mean of the two central values for even counts.
inline double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct TrackScore {
  std::string id;
  std::vector<double> chunk_sdr;  // scored chunks in time order
  std::size_t silent_chunks = 0;
  double csdr = 0.0;
};

// 1-second non-overlapping chunks, trailing partial chunk dropped, silent
// reference chunks skipped, median of the rest.
inline TrackScore csdr_track(const dsp::StereoWaveform& ref, const dsp::StereoWaveform& est,
                             const std::string& id = "", std::size_t chunk = dsp::kSampleRate) {
  if (ref.length() != est.length())
    throw Error("csdr: reference has " + std::to_string(ref.length()) + " samples, estimate " +
                std::to_string(est.length()));
  const std::size_t n_chunks = ref.length() / chunk;
  if (n_chunks == 0) throw Error("csdr: track " + id + " is shorter than one chunk");
  TrackScore s{id, {}, 0, 0.0};
  std::vector<float> r(2 * chunk), e(2 * chunk);
  for (std::size_t k = 0; k < n_chunks; ++k) {
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < chunk; ++i) {
        r[c * chunk + i] = ref(c, k * chunk + i);
        e[c * chunk + i] = est(c, k * chunk + i);
      }
    if (auto v = sdr_or_silent(r.data(), e.data(), r.size()))
      s.chunk_sdr.push_back(*v);
    else
      ++s.silent_chunks;
  }
  if (s.chunk_sdr.empty()) throw Error("csdr: track " + id + " has no non-silent reference chunk");
  s.csdr = median(s.chunk_sdr);
  return s;
}

inline double csdr_dataset(const std::vector<TrackScore>& scores) {
  if (scores.empty()) throw Error("csdr_dataset: no tracks");
  std::vector<double> v;
  for (const auto& s : scores) v.push_back(s.csdr);
  return median(std::move(v));
}

// Shortest decimal that reads back to the same double.
inline std::string format_db(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// track,csdr_db,chunks_scored
inline std::string score_table(const std::vector<TrackScore>& scores) {
  std::ostringstream out;
  out << "track,csdr_db,chunks_scored\n";
  for (const auto& s : scores) out << s.id << ',' << format_db(s.csdr) << ',' << s.chunk_sdr.size() << '\n';
  return out.str();
}

}  // namespace diffsep::metrics
