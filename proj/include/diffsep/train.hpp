// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Training loop: batches of excerpts, Adam with warmup + cosine decay, EMA
// weights and a binary checkpoint format.

#pragma once

#include <bit>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <thread>

#include <json.hpp>

#include "diffsep/data.hpp"
#include "diffsep/diffusion.hpp"
#include "diffsep/dsp/spectral.hpp"
#include "diffsep/model.hpp"

namespace diffsep::diffusion {

inline void to_json(nlohmann::json& j, const SigmaDistribution& d) { j = {{"p_mean", d.p_mean}, {"p_std", d.p_std}}; }
inline void from_json(const nlohmann::json& j, SigmaDistribution& d) {
  j.at("p_mean").get_to(d.p_mean);
  j.at("p_std").get_to(d.p_std);
}

}  // namespace diffsep::diffusion

namespace diffsep::train {

struct TrainConfig {
  std::string profile = "desk";
  double lr_init = 1e-4;
  std::size_t warmup_steps = 4000;
  std::size_t total_steps = 5000;
  std::size_t batch_size = 4;
  double ema_decay = 0.999;
  // Use min(ema_decay, (1 + t) / (10 + t)) so short runs are not dominated by
  // the initial weights.
  bool ema_warmup = false;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 1000;
  diffusion::SigmaDistribution sigma;
  double sigma_data = 0.5;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
  double excerpt_seconds = 6.0;
  data::AugmentConfig augment;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  static TrainConfig paper() {
    TrainConfig c;
    c.profile = "paper";
    c.total_steps = 1000000;
    c.batch_size = 12;
    c.checkpoint_every = 10000;
    return c;
  }

  // Sized for a single desktop CPU core with the tiny model.
  static TrainConfig desk() {
    TrainConfig c;
    c.profile = "desk";
    c.lr_init = 1e-3;
    c.warmup_steps = 200;
    c.total_steps = 5000;
    c.batch_size = 4;
    c.ema_warmup = true;
    c.checkpoint_every = 500;
    c.excerpt_seconds = 0.5;
    // RMS of the compressed band-split toy vocals; the default 0.5 leaves
    // c_skip unable to cancel the noise at this signal level.
    c.sigma_data = 0.06;
    return c;
  }

  static TrainConfig named(const std::string& profile) {
    if (profile == "paper") return paper();
    if (profile == "desk") return desk();
    throw Error("unknown training profile '" + profile + "' (expected desk or paper)");
  }

  void validate() const {
    auto fail = [](const std::string& m) { return Error("train config: " + m); };
    if (!(lr_init > 0.0)) throw fail("lr_init must be positive");
    if (total_steps == 0) throw fail("total_steps must be positive");
    if (warmup_steps >= total_steps) throw fail("warmup_steps must be below total_steps");
    if (batch_size == 0) throw fail("batch_size must be positive");
    if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw fail("ema_decay must lie in (0, 1)");
    if (checkpoint_every == 0) throw fail("checkpoint_every must be positive");
    if (!(sigma.p_std > 0.0) || !(sigma_data > 0.0)) throw fail("sigma parameters must be positive");
    if (grad_clip < 0.0) throw fail("grad_clip must be non-negative");
    if (!(excerpt_seconds > 0.0)) throw fail("excerpt_seconds must be positive");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 && adam_eps > 0.0))
      throw fail("invalid Adam constants");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TrainConfig, profile, lr_init, warmup_steps, total_steps, batch_size,
                                   ema_decay, ema_warmup, seed, checkpoint_every, sigma, sigma_data,
                                   grad_clip, excerpt_seconds, augment, adam_beta1, adam_beta2, adam_eps)

// Linear warmup from 0, then half-cosine down to 0 at total_steps.
inline double lr_schedule(std::size_t step, const TrainConfig& cfg) {
  if (step > cfg.total_steps) throw Error("lr_schedule: step beyond total_steps");
  if (step < cfg.warmup_steps)
    return cfg.lr_init * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  const double t = static_cast<double>(step - cfg.warmup_steps) /
                   static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.lr_init * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

// One training example in network coordinates.
struct TrainItem {
  Tensor<float> target;  // encoded vocals
  Tensor<float> cond;    // encoded mixture
};

// Both signals are scaled by the mixture's peak so they stay additive.
inline TrainItem prepare_item(const data::ExcerptPair& ex, const dsp::FeatureConfig& features = {}) {
  const double p = dsp::peak(ex.mixture);
  const double g = p > 0.0 ? 1.0 / p : 1.0;
  return {dsp::encode(dsp::apply_gain(ex.target, g), features).values,
          dsp::encode(dsp::apply_gain(ex.mixture, g), features).values};
}

struct Batch {
  std::size_t step = 0;
  std::vector<TrainItem> items;
};

// The batch for a given step depends only on (seed, step).
inline Batch make_batch(const std::vector<data::Track>& tracks, const TrainConfig& cfg, std::size_t step) {
  Rng rng = Rng::stream(cfg.seed, "batch", step);
  Batch b{step, {}};
  for (std::size_t i = 0; i < cfg.batch_size; ++i)
    b.items.push_back(prepare_item(data::sample_excerpt(tracks, cfg.excerpt_seconds, cfg.augment, rng)));
  return b;
}

struct TrainState {
  TrainConfig config;
  model::ModelConfig model_config;
  std::unique_ptr<model::UNet<float>> net;
  std::vector<Tensor<float>> ema, adam_m, adam_v;
  std::size_t step = 0;  // completed updates

  const std::vector<std::string>& names() const { return net->parameters().names(); }
};

inline TrainState init_state(const TrainConfig& cfg, const model::ModelConfig& mcfg) {
  cfg.validate();
  mcfg.validate();
  TrainState s{cfg, mcfg, std::make_unique<model::UNet<float>>(mcfg, cfg.seed), {}, {}, {}, 0};
  for (const auto& v : s.net->parameters().vars()) {
    s.ema.push_back(v.value());
    s.adam_m.push_back(Tensor<float>::zeros_like(v.value()));
    s.adam_v.push_back(Tensor<float>::zeros_like(v.value()));
  }
  return s;
}

// A network holding the EMA weights, for evaluation.
inline model::UNet<float> ema_network(const TrainState& s) {
  model::UNet<float> net(s.model_config, s.config.seed);
  auto& vars = net.parameters().vars();
  for (std::size_t i = 0; i < vars.size(); ++i) vars[i].mutable_value() = s.ema[i];
  return net;
}

inline double ema_decay_at(const TrainConfig& cfg, std::size_t update) {
  if (!cfg.ema_warmup) return cfg.ema_decay;
  return std::min(cfg.ema_decay, (1.0 + update) / (10.0 + update));
}

// ema <- d ema + (1 - d) theta for every parameter.
inline void update_ema(TrainState& s, double d) {
  const auto& vars = s.net->parameters().vars();
  for (std::size_t p = 0; p < vars.size(); ++p) {
    const Tensor<float>& w = vars[p].value();
    Tensor<float>& e = s.ema[p];
    for (std::size_t i = 0; i < w.size(); ++i) e[i] = static_cast<float>(d * e[i] + (1.0 - d) * w[i]);
  }
}

struct StepResult {
  bool ok = true;
  double loss = 0.0;
  double grad_norm = 0.0;  // before clipping
  double lr = 0.0;
  std::string error;
};

// Mean loss over the batch, one Adam update and one EMA update. A non-finite
// loss or gradient leaves the state untouched and reports ok = false.
inline StepResult train_step(TrainState& s, const Batch& batch) {
  const TrainConfig& cfg = s.config;
  if (batch.items.empty()) throw Error("train_step: empty batch");
  if (s.step >= cfg.total_steps) throw Error("train_step: training already finished");
  auto& params = s.net->parameters();
  auto& vars = params.vars();
  params.zero_grad();

  StepResult r;
  Rng rng = Rng::stream(cfg.seed, "noise", s.step);
  const float inv_b = 1.0f / static_cast<float>(batch.items.size());
  for (const auto& item : batch.items) {
    const double sigma = diffusion::sample_sigma(cfg.sigma, rng);
    nn::Var<float> loss = diffusion::training_loss<float>(*s.net, item.target, item.cond, sigma, rng, cfg.sigma_data);
    const double l = loss.value()[0];
    r.loss += l / static_cast<double>(batch.items.size());
    if (!std::isfinite(l)) {
      params.zero_grad();
      r.ok = false;
      r.error = "non-finite loss at step " + std::to_string(s.step) + " (sigma " + std::to_string(sigma) + ")";
      return r;
    }
    nn::backward(loss, inv_b);
  }

  double sq = 0.0;
  for (const auto& v : vars)
    if (!v.grad().empty()) sq += sum_squares(v.grad());
  r.grad_norm = std::sqrt(sq);
  if (!std::isfinite(r.grad_norm)) {
    params.zero_grad();
    r.ok = false;
    r.error = "non-finite gradient at step " + std::to_string(s.step);
    return r;
  }
  const double clip = cfg.grad_clip > 0.0 && r.grad_norm > cfg.grad_clip ? cfg.grad_clip / r.grad_norm : 1.0;

  const std::size_t t = s.step + 1;
  r.lr = lr_schedule(t, cfg);
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t p = 0; p < vars.size(); ++p) {
    Tensor<float>& w = vars[p].mutable_value();
    const Tensor<float>& g = vars[p].grad();
    Tensor<float>& m = s.adam_m[p];
    Tensor<float>& v = s.adam_v[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i] * clip;
      const double mi = b1 * m[i] + (1.0 - b1) * gi;
      const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      w[i] = static_cast<float>(w[i] - r.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.adam_eps));
    }
  }
  update_ema(s, ema_decay_at(cfg, s.step));
  params.zero_grad();
  s.step = t;
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (all integers little-endian):
//   8 bytes   magic "DSEPCKPT"
//   u32       schema version
//   u64       header length, then the header as UTF-8 JSON:
//             {"model_config", "train_config", "step", "tensor_count"}
//   per tensor:
//     u32 name length, name bytes, u8 dtype (0 = float32), u32 rank,
//     u64 per dimension, raw float32 values
//   u64       FNV-1a 64 checksum of every preceding byte
//
// Tensor names are "model/<param>", "ema/<param>", "adam_m/<param>" and
// "adam_v/<param>", in parameter order.

inline constexpr char kCheckpointMagic[8] = {'D', 'S', 'E', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline std::uint64_t fnv1a(const std::vector<unsigned char>& b, std::size_t n) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 1099511628211ull;
  }
  return h;
}

class Writer {
 public:
  template <typename U>
  void put(U v) {
    static_assert(std::is_integral_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<unsigned char>(static_cast<std::uint64_t>(v) >> (8 * i)));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf.insert(buf.end(), c, c + n);
  }
  void floats(const float* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) put(std::bit_cast<std::uint32_t>(p[i]));
  }
  std::vector<unsigned char> buf;
};

class Reader {
 public:
  Reader(const std::vector<unsigned char>& b, std::size_t end, std::string what)
      : buf_(b), end_(end), what_(std::move(what)) {}
  template <typename U>
  U get() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void floats(float* p, std::size_t n) {
    need(4 * n);
    for (std::size_t i = 0; i < n; ++i) p[i] = std::bit_cast<float>(get<std::uint32_t>());
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n) const {
    if (end_ - pos_ < n) throw Error(what_ + ": checkpoint is truncated");
  }
  const std::vector<unsigned char>& buf_;
  std::size_t pos_ = 0, end_;
  std::string what_;
};

}  // namespace detail

inline std::vector<unsigned char> serialize_checkpoint(const TrainState& s) {
  detail::Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put(kCheckpointVersion);
  const auto& names = s.names();
  const nlohmann::json header = {{"model_config", s.model_config},
                                 {"train_config", s.config},
                                 {"step", s.step},
                                 {"tensor_count", 4 * names.size()}};
  const std::string text = header.dump();
  w.put(static_cast<std::uint64_t>(text.size()));
  w.bytes(text.data(), text.size());
  const auto& vars = s.net->parameters().vars();
  auto put_tensor = [&](const std::string& name, const Tensor<float>& t) {
    w.put(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.put(std::uint8_t{0});
    w.put(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put(static_cast<std::uint64_t>(d));
    w.floats(t.data(), t.size());
  };
  for (std::size_t i = 0; i < names.size(); ++i) put_tensor("model/" + names[i], vars[i].value());
  for (std::size_t i = 0; i < names.size(); ++i) put_tensor("ema/" + names[i], s.ema[i]);
  for (std::size_t i = 0; i < names.size(); ++i) put_tensor("adam_m/" + names[i], s.adam_m[i]);
  for (std::size_t i = 0; i < names.size(); ++i) put_tensor("adam_v/" + names[i], s.adam_v[i]);
  w.put(detail::fnv1a(w.buf, w.buf.size()));
  return std::move(w.buf);
}

inline TrainState deserialize_checkpoint(const std::vector<unsigned char>& bytes, const std::string& what = "checkpoint") {
  if (bytes.size() < sizeof kCheckpointMagic + 4 + 8 + 8) throw Error(what + ": checkpoint is truncated");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw Error(what + ": not a diffsep checkpoint");
  const std::size_t body = bytes.size() - 8;
  detail::Reader tail(bytes, bytes.size(), what);
  detail::Reader r(bytes, body, what);
  r.str(sizeof kCheckpointMagic);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw Error(what + ": schema version " + std::to_string(version) + " is not supported (expected " +
                std::to_string(kCheckpointVersion) + ")");
  {
    std::uint64_t stored = 0;
    for (std::size_t i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(bytes[body + i]) << (8 * i);
    if (stored != detail::fnv1a(bytes, body)) throw Error(what + ": checksum mismatch (corrupt or truncated file)");
  }
  const auto header_len = r.get<std::uint64_t>();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.str(static_cast<std::size_t>(header_len)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(what + ": bad header: " + e.what());
  }
  TrainConfig cfg;
  model::ModelConfig mcfg;
  std::size_t step = 0, count = 0;
  try {
    cfg = header.at("train_config").get<TrainConfig>();
    mcfg = header.at("model_config").get<model::ModelConfig>();
    step = header.at("step").get<std::size_t>();
    count = header.at("tensor_count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(what + ": bad header: " + e.what());
  }
  TrainState s = init_state(cfg, mcfg);
  s.step = step;
  const auto& names = s.names();
  if (count != 4 * names.size())
    throw Error(what + ": holds " + std::to_string(count) + " tensors, model needs " + std::to_string(4 * names.size()));
  auto& vars = s.net->parameters().vars();
  const std::array<std::string, 4> groups{"model/", "ema/", "adam_m/", "adam_v/"};
  for (std::size_t gidx = 0; gidx < 4; ++gidx)
    for (std::size_t i = 0; i < names.size(); ++i) {
      Tensor<float>& dst = gidx == 0 ? vars[i].mutable_value()
                           : gidx == 1 ? s.ema[i]
                           : gidx == 2 ? s.adam_m[i]
                                       : s.adam_v[i];
      const std::string name = r.str(r.get<std::uint32_t>());
      if (name != groups[gidx] + names[i])
        throw Error(what + ": expected tensor " + groups[gidx] + names[i] + ", found " + name);
      if (r.get<std::uint8_t>() != 0) throw Error(what + ": unsupported dtype for " + name);
      Shape shape(r.get<std::uint32_t>());
      for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
      if (shape != dst.shape())
        throw Error(what + ": " + name + " has shape " + shape_string(shape) + ", expected " + shape_string(dst.shape()));
      r.floats(dst.data(), dst.size());
    }
  if (!r.done()) throw Error(what + ": trailing bytes after the last tensor");
  return s;
}

// Writes to a temporary file next to `path` and renames it into place.
inline void save_checkpoint(const TrainState& s, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(s);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, path.string());
}

// ---------------------------------------------------------------------------
// Loop

// Bounded single-producer queue of batches built on a worker thread.
class BatchPrefetcher {
 public:
  BatchPrefetcher(const std::vector<data::Track>& tracks, const TrainConfig& cfg, std::size_t first,
                  std::size_t last, std::size_t capacity = 2)
      : capacity_(std::max<std::size_t>(capacity, 1)) {
    worker_ = std::thread([this, &tracks, cfg, first, last] {
      for (std::size_t step = first; step < last; ++step) {
        std::optional<Batch> b;
        std::exception_ptr err;
        try {
          b = make_batch(tracks, cfg, step);
        } catch (...) {
          err = std::current_exception();
        }
        std::unique_lock lock(mu_);
        cv_.wait(lock, [this] { return stop_ || queue_.size() < capacity_; });
        if (stop_) return;
        if (err) {
          error_ = err;
          cv_.notify_all();
          return;
        }
        queue_.push_back(std::move(*b));
        cv_.notify_all();
      }
    });
  }
  ~BatchPrefetcher() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }
  BatchPrefetcher(const BatchPrefetcher&) = delete;
  BatchPrefetcher& operator=(const BatchPrefetcher&) = delete;

  Batch next() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [this] { return !queue_.empty() || error_; });
    if (queue_.empty()) std::rethrow_exception(error_);
    Batch b = std::move(queue_.front());
    queue_.pop_front();
    cv_.notify_all();
    return b;
  }

 private:
  std::size_t capacity_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Batch> queue_;
  std::exception_ptr error_;
  bool stop_ = false;
  std::thread worker_;
};

struct RunOptions {
  std::filesystem::path checkpoint;  // written every checkpoint_every steps and at the end; empty = never
  std::size_t stop_after = 0;        // stop at this step count (0 = total_steps)
  std::function<void(std::size_t, const StepResult&)> on_step;
};

struct RunLog {
  std::vector<double> losses;  // one per update performed in this run
  std::size_t first_step = 0;
};

// Trains from s.step up to total_steps (or stop_after). Throws on a
// non-finite loss after saving nothing for that step.
inline RunLog run_training(TrainState& s, const std::vector<data::Track>& tracks, const RunOptions& opt = {}) {
  const std::size_t last = opt.stop_after ? std::min(opt.stop_after, s.config.total_steps) : s.config.total_steps;
  RunLog log{{}, s.step};
  if (s.step >= last) return log;
  BatchPrefetcher prefetch(tracks, s.config, s.step, last);
  while (s.step < last) {
    const Batch batch = prefetch.next();
    if (batch.step != s.step) throw Error("run_training: batch order out of sync");
    const StepResult r = train_step(s, batch);
    if (!r.ok) throw Error(r.error);
    log.losses.push_back(r.loss);
    if (opt.on_step) opt.on_step(s.step, r);
    if (!opt.checkpoint.empty() && (s.step % s.config.checkpoint_every == 0 || s.step == last))
      save_checkpoint(s, opt.checkpoint);
  }
  return log;
}

}  // namespace diffsep::train
