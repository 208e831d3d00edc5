// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "diffsep/metrics.hpp"
#include "support.hpp"

using namespace diffsep;
using namespace diffsep::metrics;
using Catch::Matchers::ContainsSubstring;

namespace {

// Small integers times a power of two, so 9/10 of every sample is exact.
dsp::StereoWaveform integer_wave(std::size_t n, std::uint64_t seed) {
  dsp::StereoWaveform w(n);
  Rng rng(seed);
  for (auto& v : w.samples.values()) v = static_cast<float>(10 * (1 + static_cast<int>(rng.index(50)))) / 1024.0f;
  return w;
}

dsp::StereoWaveform scaled(const dsp::StereoWaveform& w, float k) {
  auto out = w;
  for (auto& v : out.samples.values()) v *= k;
  return out;
}

}  // namespace

TEST_CASE("sdr reference values", "[metrics]") {
  const auto ref = integer_wave(1000, 1);
  CHECK(sdr(ref, ref) == kSdrClamp);

  auto est = ref;
  for (auto& v : est.samples.values()) v = v / 10.0f * 9.0f;  // exact: v is a multiple of 10/1024
  CHECK(sdr(ref, est) == 20.0);

  CHECK(sdr(ref, scaled(ref, -1.0f)) == 10.0 * std::log10(0.25));
  CHECK_THAT(sdr(ref, scaled(ref, -1.0f)), Catch::Matchers::WithinAbs(-6.0206, 5e-5));

  CHECK(sdr(ref, scaled(ref, 1e6f)) == -kSdrClamp);
  CHECK_THROWS_WITH(sdr(dsp::StereoWaveform(10), ref), ContainsSubstring("samples"));
  CHECK_THROWS_WITH(sdr(dsp::StereoWaveform(1000), ref), ContainsSubstring("silent"));
}

TEST_CASE("sdr properties", "[metrics]") {
  const auto ref = testing::noise_wave(4000, 2);
  const auto noise = testing::noise_wave(4000, 3, 0.05);
  auto est = ref;
  est.samples += noise.samples;
  // joint positive scaling
  CHECK_THAT(sdr(scaled(ref, 4.0f), scaled(est, 4.0f)), Catch::Matchers::WithinAbs(sdr(ref, est), 1e-9));
  // more noise, lower score
  double prev = kSdrClamp + 1;
  for (float level : {0.001f, 0.01f, 0.1f, 1.0f}) {
    auto e = ref;
    for (std::size_t i = 0; i < e.samples.size(); ++i) e.samples[i] += level * noise.samples[i];
    const double s = sdr(ref, e);
    CHECK(s < prev);
    prev = s;
  }
}

TEST_CASE("median conventions", "[metrics]") {
  CHECK(median({3.0, 5.0, 100.0}) == 5.0);
  CHECK(median({100.0, 3.0, 5.0}) == 5.0);
  CHECK(median({8.0, 9.0, 11.0, 20.0}) == 10.0);
  CHECK(median({7.5}) == 7.5);
  CHECK_THROWS_AS(median({}), Error);

  auto track = [](double v) { return TrackScore{"t", {v}, 0, v}; };
  CHECK(csdr_dataset({track(8.0), track(10.0), track(12.0)}) == 10.0);
  CHECK(csdr_dataset({track(8.0), track(9.0), track(11.0), track(20.0)}) == 10.0);
  CHECK(csdr_dataset({track(4.25)}) == 4.25);
  CHECK_THROWS_AS(csdr_dataset({}), Error);
}

TEST_CASE("chunked track score", "[metrics]") {
  const std::size_t sec = dsp::kSampleRate;
  const auto ref = integer_wave(3 * sec, 4);

  SECTION("identity hits the clamp") {
    auto s = csdr_track(ref, ref, "a");
    CHECK(s.csdr == kSdrClamp);
    CHECK(s.chunk_sdr.size() == 3);
  }
  SECTION("per-chunk scores and median") {
    // chunk 0: 0.9 ref (20 dB), chunk 1: exact (80 dB), chunk 2: -ref (-6.02 dB)
    auto est = ref;
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < sec; ++i) {
        est(c, i) = ref(c, i) / 10.0f * 9.0f;
        est(c, 2 * sec + i) = -ref(c, 2 * sec + i);
      }
    auto s = csdr_track(ref, est, "b");
    REQUIRE(s.chunk_sdr.size() == 3);
    CHECK(s.chunk_sdr[0] == 20.0);
    CHECK(s.chunk_sdr[1] == kSdrClamp);
    CHECK(s.chunk_sdr[2] == 10.0 * std::log10(0.25));
    CHECK(s.csdr == 20.0);

    // permuting chunks (both signals alike) keeps the median
    auto rotate = [&](const dsp::StereoWaveform& w) {
      dsp::StereoWaveform out(w.length());
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < w.length(); ++i) out(c, (i + sec) % w.length()) = w(c, i);
      return out;
    };
    CHECK(csdr_track(rotate(ref), rotate(est)).csdr == s.csdr);
  }
  SECTION("partial chunk dropped") {
    auto r = dsp::slice(ref, 0, sec * 5 / 2);
    CHECK(csdr_track(r, r).chunk_sdr.size() == 2);
    CHECK_THROWS_WITH(csdr_track(dsp::slice(ref, 0, sec - 1), dsp::slice(ref, 0, sec - 1)),
                      ContainsSubstring("shorter"));
  }
  SECTION("silent reference chunks are excluded") {
    auto r = ref;
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = sec; i < 2 * sec; ++i) r(c, i) = 0.0f;
    auto s = csdr_track(r, ref);
    CHECK(s.chunk_sdr.size() == 2);
    CHECK(s.silent_chunks == 1);
    CHECK_THROWS_WITH(csdr_track(dsp::StereoWaveform(2 * sec), dsp::slice(ref, 0, 2 * sec)),
                      ContainsSubstring("no non-silent"));
  }
}

TEST_CASE("score table format", "[metrics]") {
  std::vector<TrackScore> s{{"x", {1.0, 2.0}, 0, 1.5}, {"y", {80.0}, 2, 80.0}};
  CHECK(score_table(s) == "track,csdr_db,chunks_scored\nx,1.5,2\ny,80,1\n");
  CHECK(format_db(0.1) == "0.1");
  CHECK(std::stod(format_db(1.0 / 3.0)) == 1.0 / 3.0);
}
