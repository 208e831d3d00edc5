// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cmath>
#include <vector>

#include "diffsep/dsp/waveform.hpp"

namespace diffsep::dsp {

struct Chunks {
  std::vector<StereoWaveform> pieces;
  std::vector<std::size_t> offsets;
  std::size_t chunk_length = 0;
  std::size_t total_length = 0;
};

// Fixed-length chunks advancing by chunk_length * (1 - overlap). The last
// chunk is zero-padded to full length.
inline Chunks chunk(const StereoWaveform& wave, double chunk_seconds, double overlap) {
  if (!(chunk_seconds > 0.0)) throw Error("chunk: chunk length must be positive");
  if (!(overlap >= 0.0 && overlap < 1.0)) throw Error("chunk: overlap must be in [0, 1)");
  Chunks out;
  out.chunk_length = static_cast<std::size_t>(std::llround(chunk_seconds * wave.sample_rate));
  out.total_length = wave.length();
  const auto hop = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(out.chunk_length * (1.0 - overlap))));
  for (std::size_t off = 0;; off += hop) {
    out.offsets.push_back(off);
    out.pieces.push_back(slice(wave, off, out.chunk_length));
    if (off + out.chunk_length >= wave.length()) break;
  }
  return out;
}

// Reassembles chunks. Where chunks overlap they are cross-faded with linear
// ramps; weights are renormalized so they sum to one at every sample.
inline StereoWaveform overlap_add(const std::vector<StereoWaveform>& pieces,
                                  const std::vector<std::size_t>& offsets, std::size_t total) {
  if (pieces.empty() || pieces.size() != offsets.size()) throw Error("overlap_add: no chunks");
  const std::size_t K = pieces.size();
  std::vector<double> acc0(total, 0.0), acc1(total, 0.0), wsum(total, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    const std::size_t len = pieces[k].length();
    const std::size_t begin = offsets[k];
    // Overlap spans shared with the neighbours.
    const std::size_t fade_in =
        k > 0 && offsets[k - 1] + pieces[k - 1].length() > begin
            ? offsets[k - 1] + pieces[k - 1].length() - begin : 0;
    const std::size_t fade_out =
        k + 1 < K && begin + len > offsets[k + 1] ? begin + len - offsets[k + 1] : 0;
    for (std::size_t i = 0; i < len && begin + i < total; ++i) {
      double w = 1.0;
      if (i < fade_in) w *= (i + 0.5) / fade_in;
      if (fade_out > 0 && i >= len - fade_out) w *= (len - i - 0.5) / fade_out;
      acc0[begin + i] += w * pieces[k](0, i);
      acc1[begin + i] += w * pieces[k](1, i);
      wsum[begin + i] += w;
    }
  }
  StereoWaveform out(total, pieces.front().sample_rate);
  for (std::size_t i = 0; i < total; ++i) {
    if (wsum[i] <= 0.0) throw Error("overlap_add: sample " + std::to_string(i) + " not covered");
    out(0, i) = static_cast<float>(acc0[i] / wsum[i]);
    out(1, i) = static_cast<float>(acc1[i] / wsum[i]);
  }
  return out;
}

inline StereoWaveform overlap_add(const Chunks& chunks) {
  return overlap_add(chunks.pieces, chunks.offsets, chunks.total_length);
}

}  // namespace diffsep::dsp
