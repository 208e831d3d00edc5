// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <catch_amalgamated.hpp>

#include <cmath>

#include "diffsep/data.hpp"
#include "diffsep/dsp/stft.hpp"
#include "support.hpp"

using namespace diffsep;
using namespace diffsep::data;
using Catch::Matchers::ContainsSubstring;

namespace {

const std::vector<Track>& toy() {
  static const auto tracks = synth_toy_dataset(3, 4.0, 11);
  return tracks;
}

double max_abs_diff(const dsp::StereoWaveform& a, const dsp::StereoWaveform& b) {
  return max_abs(a.samples - b.samples);
}

}  // namespace

TEST_CASE("toy dataset is deterministic and consistent", "[data][toy]") {
  auto again = synth_toy_dataset(3, 4.0, 11);
  REQUIRE(again.size() == 3);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(again[k].id == toy()[k].id);
    for (const auto& name : stem_names()) CHECK(again[k].stems.at(name).samples == toy()[k].stems.at(name).samples);
    CHECK(again[k].length() == 4 * 44100);
    // mixture is the float sum of stems in stem order, so it matches exactly
    CHECK(again[k].mixture.samples == sum_stems(again[k].stems).samples);
  }
  CHECK(toy()[0].id == "toy_000");
  CHECK_FALSE(synth_toy_dataset(1, 4.0, 12)[0].vocals().samples == toy()[0].vocals().samples);
  CHECK_THROWS_AS(synth_toy_dataset(0, 1.0, 1), Error);
}

TEST_CASE("toy stems are finite, non-silent and below full scale", "[data][toy]") {
  for (const auto& t : toy())
    for (const auto& [name, w] : t.stems) {
      INFO(t.id << " " << name);
      for (float v : w.samples.values()) REQUIRE(std::isfinite(v));
      CHECK(dsp::peak(w) > 0.01);
      CHECK(dsp::peak(w) < 1.0);
    }
}

TEST_CASE("toy vocals keep most energy below 4 kHz", "[data][toy]") {
  // Integrate the power spectrum of the whole vocal stem.
  for (const auto& t : toy()) {
    auto spec = dsp::stft(t.vocals());
    const std::size_t cut = static_cast<std::size_t>(std::ceil(4000.0 * 2048 / 44100));
    double low = 0, high = 0;
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t f = 0; f < spec.n_bins(); ++f)
        for (std::size_t k = 0; k < spec.n_frames(); ++k) (f >= cut ? high : low) += std::norm(spec.bins.at(c, f, k));
    CHECK(high / (low + high) < 0.10);
  }
}

TEST_CASE("scan dataset", "[data][scan]") {
  auto root = testing::scratch_dir("scan");
  write_dataset({toy()[0], toy()[1]}, root);
  std::filesystem::create_directories(root / "incomplete");
  dsp::write_wav(root / "incomplete" / "vocals.wav", toy()[0].vocals());

  auto scan = scan_dataset(root);
  REQUIRE(scan.tracks.size() == 2);
  REQUIRE(scan.warnings.size() == 1);
  CHECK_THAT(scan.warnings[0], ContainsSubstring("incomplete"));
  CHECK(scan.tracks[0].id == "toy_000");
  CHECK(scan.tracks[1].vocals().samples == toy()[1].vocals().samples);
  CHECK(scan.tracks[1].mixture.samples == toy()[1].mixture.samples);

  SECTION("mismatched stem lengths are skipped") {
    std::filesystem::create_directories(root / "short");
    for (const auto& name : stem_names())
      dsp::write_wav(root / "short" / (name + ".wav"),
                     dsp::slice(toy()[2].stems.at(name), 0, name == "drums" ? 1000 : 2000));
    auto s2 = scan_dataset(root);
    CHECK(s2.tracks.size() == 2);
    CHECK(s2.warnings.size() == 2);
  }
  SECTION("empty directory") {
    CHECK_THROWS_AS(scan_dataset(testing::scratch_dir("scan_empty")), Error);
    CHECK_THROWS_AS(scan_dataset(root / "nope"), Error);
  }
}

TEST_CASE("excerpts without augmentation are verbatim slices", "[data][excerpt]") {
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    auto ex = sample_excerpt(toy(), 1.5, AugmentConfig::none(), rng);
    REQUIRE(ex.mixture.length() == static_cast<std::size_t>(1.5 * 44100));
    const auto& d = ex.log.stems.at("vocals");
    const Track& t = toy()[d.track];
    CHECK_FALSE(ex.log.mixed);
    CHECK(ex.target.samples == dsp::slice(t.vocals(), d.offset, ex.target.length()).samples);
    CHECK(ex.mixture.samples == dsp::slice(t.mixture, d.offset, ex.mixture.length()).samples);
  }
}

TEST_CASE("augmented excerpts keep the mixture additive", "[data][excerpt]") {
  Rng rng(2);
  AugmentConfig aug;
  aug.p_pitch = 0.5;
  bool saw_mixed = false, saw_pitch = false;
  for (int i = 0; i < 40; ++i) {
    auto ex = sample_excerpt(toy(), 1.0, aug, rng);
    REQUIRE(ex.mixture.length() == 44100);
    REQUIRE(ex.target.length() == 44100);
    saw_mixed = saw_mixed || ex.log.mixed;
    saw_pitch = saw_pitch || ex.log.pitch_ratio != 1.0;
    CHECK(ex.log.pitch_ratio >= std::pow(2.0, -2.0 / 12) - 1e-12);
    CHECK(ex.log.pitch_ratio <= std::pow(2.0, 2.0 / 12) + 1e-12);
    // mixture - target = other stems; rebuild them from the log
    dsp::StereoWaveform others(44100);
    for (const auto& name : {"bass", "drums", "other"}) {
      const auto& d = ex.log.stems.at(name);
      auto w = detail::resample_read(toy()[d.track].stems.at(name), d.offset, 44100, ex.log.pitch_ratio);
      for (auto& v : w.samples.values()) v = static_cast<float>(v * (d.inverted ? -d.gain : d.gain));
      if (d.swapped)
        for (std::size_t k = 0; k < 44100; ++k) std::swap(w(0, k), w(1, k));
      others.samples += w.samples;
    }
    CHECK(max_abs_diff(ex.mixture, [&] {
            auto m = ex.target;
            m.samples += others.samples;
            return m;
          }()) <= 1e-6);
    CHECK(max_abs(ex.mixture.samples - ex.target.samples - others.samples) <= 1e-6);
  }
  CHECK(saw_mixed);
  CHECK(saw_pitch);
}

TEST_CASE("gain factors stay within the dB range", "[data][excerpt]") {
  Rng rng(3);
  AugmentConfig aug;
  aug.p_pitch = 0.0;
  const double lo = std::pow(10.0, -0.3), hi = std::pow(10.0, 0.3);
  std::size_t seen = 0;
  while (seen < 1000) {
    auto ex = sample_excerpt(toy(), 0.1, aug, rng);
    for (const auto& [name, d] : ex.log.stems) {
      CHECK(d.gain >= lo);
      CHECK(d.gain <= hi);
      ++seen;
    }
  }
}

TEST_CASE("polarity inversion of vocals negates the target", "[data][excerpt]") {
  AugmentConfig only_polarity = AugmentConfig::none();
  only_polarity.p_polarity = 1.0;
  Rng a(4), b(4);
  auto plain = sample_excerpt(toy(), 1.0, AugmentConfig::none(), a);
  auto flipped = sample_excerpt(toy(), 1.0, only_polarity, b);
  REQUIRE(plain.log.stems.at("vocals").offset == flipped.log.stems.at("vocals").offset);
  auto neg = plain.target;
  for (auto& v : neg.samples.values()) v = -v;
  CHECK(flipped.target.samples == neg.samples);
  CHECK_FALSE(flipped.mixture.samples == plain.mixture.samples);
}

TEST_CASE("channel swap", "[data][excerpt]") {
  AugmentConfig swap = AugmentConfig::none();
  swap.p_swap = 1.0;
  Rng a(5), b(5);
  auto plain = sample_excerpt(toy(), 0.5, AugmentConfig::none(), a);
  auto swapped = sample_excerpt(toy(), 0.5, swap, b);
  for (std::size_t i = 0; i < plain.target.length(); ++i) {
    REQUIRE(swapped.target(0, i) == plain.target(1, i));
    REQUIRE(swapped.target(1, i) == plain.target(0, i));
  }
}

TEST_CASE("excerpt errors", "[data][excerpt]") {
  Rng rng(6);
  CHECK_THROWS_WITH(sample_excerpt(toy(), 10.0, AugmentConfig::none(), rng), ContainsSubstring("at least"));
  CHECK_THROWS_AS(sample_excerpt(toy(), 0.0, AugmentConfig::none(), rng), Error);
  // A duration that fits only without pitch stretch still succeeds.
  AugmentConfig pitch = AugmentConfig::none();
  pitch.p_pitch = 1.0;
  auto ex = sample_excerpt(toy(), 4.0, pitch, rng);
  CHECK(ex.target.length() == 4 * 44100);
}

TEST_CASE("resample read interpolates linearly", "[data]") {
  dsp::StereoWaveform ramp(10);
  for (std::size_t i = 0; i < 10; ++i) ramp(0, i) = ramp(1, i) = static_cast<float>(i);
  auto r = detail::resample_read(ramp, 2, 4, 1.5);
  CHECK(r(0, 0) == 2.0f);
  CHECK(r(0, 1) == 3.5f);
  CHECK(r(1, 3) == 6.5f);
}
