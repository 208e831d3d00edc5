// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Minimal RIFF/WAVE reader and writer: PCM 16/24-bit and IEEE float 32-bit.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "diffsep/dsp/waveform.hpp"

namespace diffsep::dsp {

enum class WavFormat { kPcm16, kPcm24, kFloat32 };

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
inline void put_u16(std::vector<unsigned char>& b, std::uint16_t v) {
  b.push_back(static_cast<unsigned char>(v));
  b.push_back(static_cast<unsigned char>(v >> 8));
}

}  // namespace detail

// Decodes WAV bytes. Mono is duplicated to stereo; anything other than
// 44.1 kHz is rejected.
inline StereoWaveform decode_wav(const std::vector<unsigned char>& bytes, const std::string& what = "wav") {
  auto fail = [&](const std::string& msg) { return Error(what + ": " + msg); };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw fail("not a RIFF/WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t size = detail::read_u32(chunk + 4);
    if (pos + 8 + size > bytes.size()) {
      if (std::memcmp(chunk, "data", 4) != 0) throw fail("truncated chunk");
    }
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16) throw fail("short fmt chunk");
      format = detail::read_u16(chunk + 8);
      channels = detail::read_u16(chunk + 10);
      rate = detail::read_u32(chunk + 12);
      bits = detail::read_u16(chunk + 22);
      if (format == 0xFFFE && size >= 40) format = detail::read_u16(chunk + 32);
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_size = std::min<std::size_t>(size, bytes.size() - pos - 8);
    }
    pos += 8 + size + (size & 1);
  }
  if (!data || channels == 0) throw fail("missing fmt or data chunk");
  if (rate != static_cast<std::uint32_t>(kSampleRate))
    throw fail("sample rate " + std::to_string(rate) + " Hz is not supported (need 44100 Hz)");
  if (channels > 2) throw fail("more than two channels");
  const bool pcm = format == 1 && (bits == 16 || bits == 24);
  const bool flt = format == 3 && bits == 32;
  if (!pcm && !flt) throw fail("unsupported sample format (PCM 16/24-bit or float 32-bit only)");

  const std::size_t width = bits / 8;
  const std::size_t frames = data_size / (width * channels);
  StereoWaveform wave(frames);
  for (std::size_t i = 0; i < frames; ++i)
    for (std::size_t c = 0; c < 2; ++c) {
      const unsigned char* p = data + (i * channels + (channels == 1 ? 0 : c)) * width;
      float v = 0.0f;
      if (flt) {
        std::memcpy(&v, p, 4);
      } else if (bits == 16) {
        v = static_cast<std::int16_t>(detail::read_u16(p)) / 32768.0f;
      } else {
        std::int32_t s = p[0] | (p[1] << 8) | (p[2] << 16);
        if (s & 0x800000) s -= 0x1000000;
        v = static_cast<float>(s / 8388608.0);
      }
      wave(c, i) = v;
    }
  return wave;
}

inline std::vector<unsigned char> encode_wav(const StereoWaveform& wave, WavFormat fmt = WavFormat::kFloat32) {
  const std::uint16_t bits = fmt == WavFormat::kPcm16 ? 16 : fmt == WavFormat::kPcm24 ? 24 : 32;
  const std::uint16_t format = fmt == WavFormat::kFloat32 ? 3 : 1;
  const std::uint32_t width = bits / 8;
  const std::uint32_t data_size = static_cast<std::uint32_t>(wave.length() * 2 * width);
  std::vector<unsigned char> b;
  b.reserve(44 + data_size);
  for (char c : std::string("RIFF")) b.push_back(c);
  detail::put_u32(b, 36 + data_size);
  for (char c : std::string("WAVEfmt ")) b.push_back(c);
  detail::put_u32(b, 16);
  detail::put_u16(b, format);
  detail::put_u16(b, 2);
  detail::put_u32(b, static_cast<std::uint32_t>(wave.sample_rate));
  detail::put_u32(b, static_cast<std::uint32_t>(wave.sample_rate) * 2 * width);
  detail::put_u16(b, static_cast<std::uint16_t>(2 * width));
  detail::put_u16(b, bits);
  for (char c : std::string("data")) b.push_back(c);
  detail::put_u32(b, data_size);
  for (std::size_t i = 0; i < wave.length(); ++i)
    for (std::size_t c = 0; c < 2; ++c) {
      const float v = wave(c, i);
      if (fmt == WavFormat::kFloat32) {
        unsigned char raw[4];
        std::memcpy(raw, &v, 4);
        b.insert(b.end(), raw, raw + 4);
      } else {
        const double full = fmt == WavFormat::kPcm16 ? 32768.0 : 8388608.0;
        const double clipped = std::clamp(static_cast<double>(v), -1.0, 1.0 - 1.0 / full);
        const auto s = static_cast<std::int32_t>(std::lround(clipped * full));
        for (std::uint32_t k = 0; k < width; ++k) b.push_back(static_cast<unsigned char>(s >> (8 * k)));
      }
    }
  return b;
}

inline StereoWaveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_wav(bytes, path.string());
}

inline void write_wav(const std::filesystem::path& path, const StereoWaveform& wave,
                      WavFormat fmt = WavFormat::kFloat32) {
  const auto bytes = encode_wav(wave, fmt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

}  // namespace diffsep::dsp
