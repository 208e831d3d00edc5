// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// DDPM++-style U-Net over band-split spectrograms. Resampling acts on the
// frequency axis only, pixel attention is replaced by dual-path RoFormer
// blocks, and the noise level enters through a sinusoidal embedding.

#pragma once

#include <cmath>
#include <numbers>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "diffsep/diffusion.hpp"
#include "diffsep/nn/attention.hpp"
#include "diffsep/nn/ops.hpp"
#include "diffsep/rng.hpp"

namespace diffsep::model {

using nn::Var;

struct ModelConfig {
  std::size_t base_channels = 128;
  std::size_t levels = 4;
  std::vector<std::size_t> channel_multipliers{1, 2, 2, 2};
  std::size_t res_blocks_per_level = 4;
  std::size_t noise_embed_dim = 1024;
  std::size_t n_input_channels = 32;
  std::size_t n_output_channels = 16;
  std::size_t attention_dim = 64;
  std::size_t attention_heads = 8;
  std::size_t ffn_multiplier = 4;
  double rope_base = 10000.0;

  static ModelConfig paper() { return {}; }
  static ModelConfig tiny() {
    ModelConfig c;
    c.base_channels = 16;
    c.levels = 2;
    c.channel_multipliers = {1, 2};
    c.res_blocks_per_level = 1;
    c.noise_embed_dim = 64;
    c.attention_dim = 16;
    c.attention_heads = 2;
    c.ffn_multiplier = 2;
    return c;
  }

  std::size_t head_dim() const { return attention_dim / attention_heads; }
  // Frequency size must be a multiple of this.
  std::size_t frequency_multiple() const { return std::size_t{1} << (levels - 1); }

  void validate() const {
    auto fail = [](const std::string& m) { return Error("model config: " + m); };
    if (levels == 0 || channel_multipliers.size() != levels)
      throw fail("channel_multipliers must have one entry per level");
    if (base_channels == 0 || res_blocks_per_level == 0 || noise_embed_dim == 0)
      throw fail("channel, block and embedding sizes must be positive");
    if (base_channels % 2 != 0) throw fail("base_channels must be even");
    if (n_input_channels != 2 * n_output_channels)
      throw fail("n_input_channels must be twice n_output_channels (noisy state + condition)");
    if (attention_heads == 0 || attention_dim % attention_heads != 0 || head_dim() % 2 != 0)
      throw fail("attention_dim must split into heads of even size");
    if (ffn_multiplier == 0) throw fail("ffn_multiplier must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ModelConfig, base_channels, levels, channel_multipliers,
                                   res_blocks_per_level, noise_embed_dim, n_input_channels,
                                   n_output_channels, attention_dim, attention_heads, ffn_multiplier,
                                   rope_base)

// GroupNorm group count: at most 32 groups of at least 4 channels, dividing C.
inline std::size_t norm_groups(std::size_t channels) {
  std::size_t g = std::max<std::size_t>(1, std::min<std::size_t>(32, channels / 4));
  while (channels % g != 0) --g;
  return g;
}

enum class Resample { kNone, kDown, kUp };

struct Step {
  enum class Kind { kConvIn, kResidual, kAttention, kHead } kind;
  std::string name;
  std::size_t in = 0, out = 0;
  Resample resample = Resample::kNone;
  bool push_skip = false;  // output saved for the decoder
  bool pop_skip = false;   // input concatenated with the latest saved skip
  std::size_t level = 0;
};

// The network as an ordered list of steps; drives allocation, counting and
// the forward pass.
inline std::vector<Step> layout(const ModelConfig& cfg) {
  using K = Step::Kind;
  std::vector<Step> steps;
  std::vector<std::size_t> skips;
  const std::size_t L = cfg.levels;
  std::size_t c = cfg.base_channels;
  steps.push_back({K::kConvIn, "enc.conv_in", cfg.n_input_channels, c});
  for (std::size_t l = 0; l < L; ++l) {
    const std::string lv = "enc.l" + std::to_string(l);
    if (l > 0) steps.push_back({K::kResidual, lv + ".down", c, c, Resample::kDown, false, false, l});
    for (std::size_t i = 0; i < cfg.res_blocks_per_level; ++i) {
      const std::size_t out = cfg.base_channels * cfg.channel_multipliers[l];
      const std::string b = lv + ".b" + std::to_string(i);
      steps.push_back({K::kResidual, b, c, out, Resample::kNone, false, false, l});
      steps.push_back({K::kAttention, b + ".attn", out, out, Resample::kNone, true, false, l});
      skips.push_back(out);
      c = out;
    }
  }
  for (std::size_t l = L; l-- > 0;) {
    const std::string lv = "dec.l" + std::to_string(l);
    if (l == L - 1)
      steps.push_back({K::kResidual, lv + ".mid", c, c, Resample::kNone, false, false, l});
    else
      steps.push_back({K::kResidual, lv + ".up", c, c, Resample::kUp, false, false, l});
    for (std::size_t i = 0; i < cfg.res_blocks_per_level; ++i) {
      const std::size_t out = cfg.base_channels * cfg.channel_multipliers[l];
      const std::string b = lv + ".b" + std::to_string(i);
      steps.push_back({K::kResidual, b, c + skips.back(), out, Resample::kNone, false, true, l});
      skips.pop_back();
      c = out;
      if (l == 0) steps.push_back({K::kAttention, b + ".attn", out, out, Resample::kNone, false, false, l});
    }
  }
  steps.push_back({K::kHead, "out", c, cfg.n_output_channels});
  return steps;
}

enum class Init { kXavier, kZeros, kOnes };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init = Init::kXavier;
  double gain = 1.0;
};

inline std::vector<ParamSpec> parameter_specs(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> specs;
  auto add = [&](std::string name, Shape shape, Init init = Init::kXavier, double gain = 1.0) {
    specs.push_back({std::move(name), std::move(shape), init, gain});
  };
  auto conv = [&](const std::string& p, std::size_t in, std::size_t out, std::size_t k, bool bias = true,
                  Init init = Init::kXavier, double gain = 1.0) {
    add(p + ".weight", {out, in, k, k}, init, gain);
    if (bias) add(p + ".bias", {out}, Init::kZeros);
  };
  auto norm = [&](const std::string& p, std::size_t ch, bool bias = true) {
    add(p + ".weight", {ch}, Init::kOnes);
    if (bias) add(p + ".bias", {ch}, Init::kZeros);
  };
  const std::size_t emb = cfg.noise_embed_dim;
  add("map.layer0.weight", {emb, cfg.base_channels});
  add("map.layer0.bias", {emb}, Init::kZeros);
  add("map.layer1.weight", {emb, emb});
  add("map.layer1.bias", {emb}, Init::kZeros);

  const std::size_t d = cfg.attention_dim, hidden = cfg.ffn_multiplier * cfg.attention_dim;
  for (const Step& s : layout(cfg)) {
    switch (s.kind) {
      case Step::Kind::kConvIn:
        conv(s.name, s.in, s.out, 3);
        break;
      case Step::Kind::kResidual:
        norm(s.name + ".norm0", s.in);
        conv(s.name + ".conv0", s.in, s.out, 3);
        add(s.name + ".affine.weight", {s.out, emb});
        add(s.name + ".affine.bias", {s.out}, Init::kZeros);
        norm(s.name + ".norm1", s.out);
        conv(s.name + ".conv1", s.out, s.out, 3, true, Init::kXavier, 1e-5);
        if (s.in != s.out || s.resample != Resample::kNone) conv(s.name + ".skip", s.in, s.out, 1);
        break;
      case Step::Kind::kAttention:
        conv(s.name + ".proj_in", s.in, d, 1);
        for (const char* path : {".time", ".freq"}) {
          const std::string p = s.name + path;
          norm(p + ".attn_norm", d, false);
          conv(p + ".qkv", d, 3 * d, 1, false);
          conv(p + ".out", d, d, 1, false);
          norm(p + ".ffn_norm", d, false);
          conv(p + ".ffn1", d, hidden, 1);
          conv(p + ".ffn2", hidden, d, 1);
        }
        conv(s.name + ".proj_out", d, s.out, 1);
        break;
      case Step::Kind::kHead:
        norm(s.name + ".norm", s.in);
        conv(s.name + ".conv", s.in, s.out, 3, true, Init::kZeros);
        break;
    }
  }
  return specs;
}

// Parameter count without allocating anything.
inline std::size_t parameter_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const auto& s : parameter_specs(cfg)) n += shape_size(s.shape);
  return n;
}

inline std::size_t attention_block_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const auto& s : layout(cfg)) n += s.kind == Step::Kind::kAttention;
  return n;
}

// Named tensors in a fixed order.
template <typename T>
class ParameterSet {
 public:
  Var<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw Error("duplicate parameter " + name);
    index_[name] = vars_.size();
    names_.push_back(name);
    vars_.emplace_back(std::move(value), true);
    return vars_.back();
  }
  const Var<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("missing parameter " + name);
    return vars_[it->second];
  }
  Var<T>& get(const std::string& name) {
    return const_cast<Var<T>&>(static_cast<const ParameterSet&>(*this).get(name));
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Var<T>>& vars() { return vars_; }
  const std::vector<Var<T>>& vars() const { return vars_; }
  std::size_t size() const { return vars_.size(); }
  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& v : vars_) n += v.value().size();
    return n;
  }
  void zero_grad() {
    for (auto& v : vars_) v.zero_grad();
  }

 private:
  std::vector<std::string> names_;
  std::vector<Var<T>> vars_;
  std::unordered_map<std::string, std::size_t> index_;
};

// EDM positional embedding of c_noise: [cos(c w_k), sin(c w_k)] with
// w_k = 10000^(-k / (half - 1)).
inline std::vector<double> sinusoidal_features(double c_noise, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> out(dim, 0.0);
  for (std::size_t k = 0; k < half; ++k) {
    const double freq = std::pow(1.0 / 10000.0, half > 1 ? static_cast<double>(k) / (half - 1) : 0.0);
    out[k] = std::cos(c_noise * freq);
    out[half + k] = std::sin(c_noise * freq);
  }
  return out;
}

// Output shapes of each step, for structural checks.
struct ForwardTrace {
  std::vector<std::pair<std::string, Shape>> shapes;
};

template <typename T>
class UNet : public diffusion::Network<T> {
 public:
  // Allocates and initializes every parameter from `seed`.
  UNet(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), steps_(layout(cfg_)) {
    Rng rng = Rng::stream(seed, "init");
    for (const ParamSpec& spec : parameter_specs(cfg_)) {
      Tensor<T> t(spec.shape);
      if (spec.init == Init::kOnes) {
        t.fill(T(1));
      } else if (spec.init == Init::kXavier) {
        const std::size_t rf = spec.shape.size() == 4 ? spec.shape[2] * spec.shape[3] : 1;
        const double fan_in = static_cast<double>(spec.shape[1] * rf);
        const double fan_out = static_cast<double>(spec.shape[0] * rf);
        const double bound = spec.gain * std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
      }
      params_.add(spec.name, std::move(t));
    }
  }

  UNet(UNet&&) = default;
  UNet(const UNet&) = delete;
  UNet& operator=(const UNet&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }

  Var<T> noise_embedding(double sigma) const {
    const auto k = diffusion::precond_coeffs(sigma);
    const auto feats = sinusoidal_features(k.c_noise, cfg_.base_channels);
    Var<T> x(Tensor<T>({feats.size()}, std::vector<T>(feats.begin(), feats.end())));
    x = nn::silu(nn::linear(x, p("map.layer0.weight"), p("map.layer0.bias")));
    return nn::silu(nn::linear(x, p("map.layer1.weight"), p("map.layer1.bias")));
  }

  Var<T> forward(const Var<T>& input, double sigma) const override { return forward(input, sigma, nullptr); }

  Var<T> forward(const Var<T>& input, double sigma, ForwardTrace* trace) const {
    const auto& sh = input.shape();
    if (sh.size() != 3 || sh[0] != cfg_.n_input_channels)
      throw Error("forward: expected [" + std::to_string(cfg_.n_input_channels) + ", F, T] input, got " +
                  shape_string(sh));
    if (sh[1] == 0 || sh[1] % cfg_.frequency_multiple() != 0)
      throw Error("forward: frequency size " + std::to_string(sh[1]) + " must be a multiple of " +
                  std::to_string(cfg_.frequency_multiple()));
    if (sh[2] == 0) throw Error("forward: empty time axis");

    const Var<T> emb = noise_embedding(sigma);
    std::vector<Var<T>> skips;
    Var<T> x = input;
    for (const Step& s : steps_) {
      switch (s.kind) {
        case Step::Kind::kConvIn:
          x = nn::conv2d(x, p(s.name + ".weight"), p(s.name + ".bias"));
          break;
        case Step::Kind::kResidual:
          if (s.pop_skip) {
            x = nn::concat_channels(x, skips.back());
            skips.pop_back();
          }
          x = residual_block(s, x, emb);
          break;
        case Step::Kind::kAttention:
          x = dual_path_attention(s.name, x);
          break;
        case Step::Kind::kHead:
          x = nn::silu(nn::group_norm(x, p(s.name + ".norm.weight"), p(s.name + ".norm.bias"),
                                      norm_groups(s.in)));
          x = nn::conv2d(x, p(s.name + ".conv.weight"), p(s.name + ".conv.bias"));
          break;
      }
      if (s.push_skip) skips.push_back(x);
      if (trace) trace->shapes.emplace_back(s.name, x.shape());
    }
    return x;
  }

  // Two sequential attention passes (over time per frequency row, then over
  // frequency per frame) inside a width-reducing projection, added back to x.
  Var<T> dual_path_attention(const std::string& name, const Var<T>& x) const {
    Var<T> h = nn::conv2d(x, p(name + ".proj_in.weight"), p(name + ".proj_in.bias"));
    for (const auto& [path, axis] : {std::pair{".time", nn::Axis::kTime}, std::pair{".freq", nn::Axis::kFrequency}}) {
      const std::string pre = name + path;
      Var<T> a = nn::rms_norm(h, p(pre + ".attn_norm.weight"));
      Var<T> qkv = nn::conv2d(a, p(pre + ".qkv.weight"), Var<T>());
      Var<T> o = nn::axial_attention(qkv, cfg_.attention_heads, axis, cfg_.rope_base);
      h = nn::add(h, nn::conv2d(o, p(pre + ".out.weight"), Var<T>()));
      a = nn::rms_norm(h, p(pre + ".ffn_norm.weight"));
      a = nn::gelu_tanh(nn::conv2d(a, p(pre + ".ffn1.weight"), p(pre + ".ffn1.bias")));
      h = nn::add(h, nn::conv2d(a, p(pre + ".ffn2.weight"), p(pre + ".ffn2.bias")));
    }
    return nn::add(x, nn::conv2d(h, p(name + ".proj_out.weight"), p(name + ".proj_out.bias")));
  }

 private:
  const Var<T>& p(const std::string& name) const { return params_.get(name); }

  Var<T> residual_block(const Step& s, const Var<T>& x, const Var<T>& emb) const {
    const std::string& n = s.name;
    Var<T> h = nn::silu(nn::group_norm(x, p(n + ".norm0.weight"), p(n + ".norm0.bias"), norm_groups(s.in)));
    if (s.resample == Resample::kUp) h = nn::upsample_freq(h);
    h = nn::conv2d(h, p(n + ".conv0.weight"), p(n + ".conv0.bias"), s.resample == Resample::kDown ? 2 : 1);
    h = nn::add_channel_bias(h, nn::linear(emb, p(n + ".affine.weight"), p(n + ".affine.bias")));
    h = nn::silu(nn::group_norm(h, p(n + ".norm1.weight"), p(n + ".norm1.bias"), norm_groups(s.out)));
    h = nn::conv2d(h, p(n + ".conv1.weight"), p(n + ".conv1.bias"));

    Var<T> skip = x;
    if (s.resample == Resample::kDown) skip = nn::avg_pool_freq(skip);
    if (s.resample == Resample::kUp) skip = nn::upsample_freq(skip);
    if (params_.contains(n + ".skip.weight"))
      skip = nn::conv2d(skip, p(n + ".skip.weight"), p(n + ".skip.bias"));
    return nn::scale(nn::add(h, skip), static_cast<T>(std::numbers::sqrt2 / 2.0));
  }

  ModelConfig cfg_;
  std::vector<Step> steps_;
  ParameterSet<T> params_;
};

}  // namespace diffsep::model
