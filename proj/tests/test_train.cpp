// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <catch_amalgamated.hpp>

#include <cmath>
#include <fstream>

#include "diffsep/train.hpp"
#include "support.hpp"

using namespace diffsep;
using namespace diffsep::train;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

const std::vector<data::Track>& toy() {
  static const auto tracks = data::synth_toy_dataset(3, 2.0, 21);
  return tracks;
}

// Very short excerpts keep each step well under a tenth of a second.
TrainConfig quick_config(std::uint64_t seed = 3) {
  TrainConfig c = TrainConfig::desk();
  c.seed = seed;
  c.total_steps = 50;
  c.warmup_steps = 5;
  c.batch_size = 2;
  c.excerpt_seconds = 0.1;
  c.checkpoint_every = 10;
  return c;
}

std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

bool same_parameters(const TrainState& a, const TrainState& b) {
  const auto& va = a.net->parameters().vars();
  const auto& vb = b.net->parameters().vars();
  for (std::size_t i = 0; i < va.size(); ++i)
    if (!(va[i].value() == vb[i].value()) || !(a.ema[i] == b.ema[i]) || !(a.adam_m[i] == b.adam_m[i]) ||
        !(a.adam_v[i] == b.adam_v[i]))
      return false;
  return true;
}

}  // namespace

TEST_CASE("learning-rate schedule", "[train][lr]") {
  const TrainConfig paper = TrainConfig::paper();
  CHECK(lr_schedule(0, paper) == 0.0);
  CHECK(lr_schedule(4000, paper) == 1e-4);
  CHECK(lr_schedule(2000, paper) == 5e-5);
  CHECK_THAT(lr_schedule(paper.total_steps, paper), WithinAbs(0.0, 1e-20));
  CHECK_THAT(lr_schedule((paper.total_steps + 4000) / 2, paper), WithinRel(5e-5, 1e-12));
  // continuity across the warmup boundary
  CHECK_THAT(lr_schedule(3999, paper), WithinAbs(1e-4, 1e-4 / 3999));
  CHECK_THAT(lr_schedule(4001, paper), WithinAbs(1e-4, 1e-12));
  // monotone decay afterwards
  double prev = lr_schedule(4000, paper);
  for (std::size_t s = 5000; s <= paper.total_steps; s += 50000) {
    CHECK(lr_schedule(s, paper) < prev);
    prev = lr_schedule(s, paper);
  }
  CHECK_THROWS_AS(lr_schedule(paper.total_steps + 1, paper), Error);
}

TEST_CASE("training config profiles and validation", "[train][config]") {
  const auto paper = TrainConfig::named("paper");
  CHECK(paper.lr_init == 1e-4);
  CHECK(paper.warmup_steps == 4000);
  CHECK(paper.total_steps == 1000000);
  CHECK(paper.batch_size == 12);
  CHECK(paper.ema_decay == 0.999);
  CHECK(paper.grad_clip == 1.0);
  CHECK(paper.sigma_data == 0.5);
  CHECK(paper.sigma.p_mean == -1.2);
  CHECK(paper.sigma.p_std == 1.2);
  const auto desk = TrainConfig::named("desk");
  CHECK(desk.total_steps == 5000);
  CHECK(desk.batch_size == 4);
  CHECK(desk.sigma_data == 0.06);
  CHECK_NOTHROW(paper.validate());
  CHECK_NOTHROW(desk.validate());
  CHECK_THROWS_WITH(TrainConfig::named("huge"), ContainsSubstring("desk or paper"));

  auto bad = desk;
  bad.warmup_steps = bad.total_steps;
  CHECK_THROWS_WITH(bad.validate(), ContainsSubstring("warmup"));
  bad = desk;
  bad.ema_decay = 1.0;
  CHECK_THROWS_WITH(bad.validate(), ContainsSubstring("ema_decay"));

  nlohmann::json j = desk;
  CHECK(j.at("sigma").at("p_mean") == -1.2);
  const auto back = j.get<TrainConfig>();
  CHECK(nlohmann::json(back) == j);
}

TEST_CASE("EMA contracts toward frozen parameters", "[train][ema]") {
  TrainState s = init_state(quick_config(), model::ModelConfig::tiny());
  Rng rng(5);
  double dist0 = 0.0;
  for (std::size_t p = 0; p < s.ema.size(); ++p)
    for (std::size_t i = 0; i < s.ema[p].size(); ++i) {
      const double delta = rng.normal();
      s.ema[p][i] = static_cast<float>(s.net->parameters().vars()[p].value()[i] + delta);
    }
  auto dist = [&] {
    double d = 0.0;
    for (std::size_t p = 0; p < s.ema.size(); ++p)
      d += sum_squares(s.ema[p] - s.net->parameters().vars()[p].value());
    return std::sqrt(d);
  };
  dist0 = dist();
  for (int k = 1; k <= 5; ++k) {
    update_ema(s, 0.999);
    CHECK_THAT(dist(), WithinRel(dist0 * std::pow(0.999, k), 1e-4));
  }
  CHECK(ema_decay_at(TrainConfig::paper(), 0) == 0.999);
  CHECK(ema_decay_at(quick_config(), 0) == 0.1);
  CHECK(ema_decay_at(quick_config(), 1000000) == 0.999);
}

TEST_CASE("batches depend only on seed and step", "[train][data]") {
  const auto cfg = quick_config();
  const Batch a = make_batch(toy(), cfg, 7), b = make_batch(toy(), cfg, 7), c = make_batch(toy(), cfg, 8);
  REQUIRE(a.items.size() == 2);
  CHECK(a.items[0].target == b.items[0].target);
  CHECK(a.items[1].cond == b.items[1].cond);
  CHECK_FALSE(a.items[0].cond == c.items[0].cond);
  CHECK(a.items[0].target.shape() == Shape{16, 256, 5});
}

TEST_CASE("desk sigma_data matches the scale of toy training targets", "[train][data]") {
  // RMS over many unaugmented 1 s excerpts of a fresh toy set
  const auto tracks = data::synth_toy_dataset(4, 4.0, 77);
  Rng rng(3);
  double sum = 0.0;
  std::size_t n = 0;
  for (int i = 0; i < 24; ++i) {
    const auto item = prepare_item(data::sample_excerpt(tracks, 1.0, data::AugmentConfig::none(), rng));
    sum += sum_squares(item.target);
    n += item.target.size();
  }
  const double rms = std::sqrt(sum / n);
  CHECK(rms > 0.75 * TrainConfig::desk().sigma_data);
  CHECK(rms < 1.33 * TrainConfig::desk().sigma_data);
}

TEST_CASE("prepared items keep the mixture peak at one", "[train][data]") {
  Rng rng(9);
  auto ex = data::sample_excerpt(toy(), 0.5, data::AugmentConfig::none(), rng);
  for (auto& v : ex.mixture.samples.values()) v *= 0.25f;
  for (auto& v : ex.target.samples.values()) v *= 0.25f;
  TrainItem item = prepare_item(ex);
  // decode the condition: its peak must be the normalized mixture peak
  dsp::BandSplitTensor bs = dsp::encode(dsp::peak_normalize(ex.mixture));
  CHECK(max_abs(item.cond - bs.values) <= 1e-6);
}

TEST_CASE("training step", "[train][step]") {
  const auto snapshot = toy()[0].vocals().samples;
  TrainState s = init_state(quick_config(), model::ModelConfig::tiny());
  const Batch b = make_batch(toy(), s.config, 0);
  // only the head moves on the first step: it starts at zero, so nothing
  // upstream of it receives gradient yet
  const auto before = s.net->parameters().get("out.conv.weight").value();
  StepResult r = train_step(s, b);
  REQUIRE(r.ok);
  CHECK(std::isfinite(r.loss));
  CHECK(r.loss > 0.0);
  CHECK(r.grad_norm > 0.0);
  CHECK(r.lr == lr_schedule(1, s.config));
  CHECK(s.step == 1);
  CHECK_FALSE(s.net->parameters().get("out.conv.weight").value() == before);
  CHECK(toy()[0].vocals().samples == snapshot);
  // gradients are released after the update
  for (const auto& v : s.net->parameters().vars()) CHECK(v.grad().empty());

  SECTION("non-finite loss leaves the state untouched") {
    Batch poisoned = make_batch(toy(), s.config, 1);
    poisoned.items[1].target[3] = std::numeric_limits<float>::quiet_NaN();
    TrainState ref = init_state(quick_config(), model::ModelConfig::tiny());
    train_step(ref, b);
    StepResult bad = train_step(s, poisoned);
    CHECK_FALSE(bad.ok);
    CHECK_THAT(bad.error, ContainsSubstring("non-finite"));
    CHECK(s.step == 1);
    CHECK(same_parameters(s, ref));
  }
}

TEST_CASE("identical seeds give identical loss trajectories", "[train][determinism]") {
  auto cfg = quick_config(11);
  cfg.total_steps = 100;
  cfg.batch_size = 1;
  cfg.excerpt_seconds = 0.05;
  TrainState a = init_state(cfg, model::ModelConfig::tiny());
  TrainState b = init_state(cfg, model::ModelConfig::tiny());
  RunLog la = run_training(a, toy());
  // the second run drives train_step by hand, bypassing the prefetch thread
  std::vector<double> lb;
  for (std::size_t step = 0; step < cfg.total_steps; ++step) lb.push_back(train_step(b, make_batch(toy(), cfg, step)).loss);
  REQUIRE(la.losses.size() == 100);
  CHECK(la.losses == lb);
  CHECK(same_parameters(a, b));
}

TEST_CASE("checkpoint round trip", "[train][checkpoint]") {
  const auto dir = testing::scratch_dir("ckpt");
  TrainState s = init_state(quick_config(), model::ModelConfig::tiny());
  RunOptions opt;
  opt.checkpoint = dir / "a.ckpt";
  opt.stop_after = 3;
  run_training(s, toy(), opt);
  REQUIRE(std::filesystem::exists(opt.checkpoint));
  CHECK_FALSE(std::filesystem::exists(dir / "a.ckpt.tmp"));

  TrainState loaded = load_checkpoint(opt.checkpoint);
  CHECK(loaded.step == 3);
  CHECK(loaded.model_config == s.model_config);
  CHECK(nlohmann::json(loaded.config) == nlohmann::json(s.config));
  CHECK(same_parameters(loaded, s));

  save_checkpoint(loaded, dir / "b.ckpt");
  CHECK(read_bytes(dir / "a.ckpt") == read_bytes(dir / "b.ckpt"));

  SECTION("resume matches an unbroken run") {
    TrainState unbroken = init_state(quick_config(), model::ModelConfig::tiny());
    RunOptions o;
    o.stop_after = 5;
    RunLog full = run_training(unbroken, toy(), o);
    RunLog resumed = run_training(loaded, toy(), o);
    REQUIRE(resumed.first_step == 3);
    REQUIRE(resumed.losses.size() == 2);
    CHECK(resumed.losses[0] == full.losses[3]);
    CHECK(resumed.losses[1] == full.losses[4]);
    CHECK(same_parameters(loaded, unbroken));
  }
  SECTION("truncated file") {
    auto bytes = read_bytes(dir / "a.ckpt");
    for (std::size_t cut : {std::size_t{5}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
      write_bytes(dir / "t.ckpt", std::vector<unsigned char>(bytes.begin(), bytes.begin() + static_cast<long>(cut)));
      CHECK_THROWS_AS(load_checkpoint(dir / "t.ckpt"), Error);
    }
  }
  SECTION("corruption and version mismatch") {
    auto bytes = read_bytes(dir / "a.ckpt");
    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x40;
    write_bytes(dir / "c.ckpt", flipped);
    CHECK_THROWS_WITH(load_checkpoint(dir / "c.ckpt"), ContainsSubstring("checksum"));
    auto newer = bytes;
    newer[8] = 2;
    write_bytes(dir / "v.ckpt", newer);
    CHECK_THROWS_WITH(load_checkpoint(dir / "v.ckpt"), ContainsSubstring("schema version 2"));
    auto other = bytes;
    other[0] = 'X';
    write_bytes(dir / "m.ckpt", other);
    CHECK_THROWS_WITH(load_checkpoint(dir / "m.ckpt"), ContainsSubstring("not a diffsep checkpoint"));
    CHECK_THROWS_WITH(load_checkpoint(dir / "missing.ckpt"), ContainsSubstring("cannot open"));
  }
}

TEST_CASE("EMA network carries the averaged weights", "[train]") {
  TrainState s = init_state(quick_config(), model::ModelConfig::tiny());
  RunOptions o;
  o.stop_after = 2;
  run_training(s, toy(), o);
  auto net = ema_network(s);
  for (std::size_t i = 0; i < s.ema.size(); ++i) CHECK(net.parameters().vars()[i].value() == s.ema[i]);
  CHECK_FALSE(net.parameters().vars()[0].value() == s.net->parameters().vars()[0].value());
}
