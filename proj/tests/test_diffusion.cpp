// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <catch_amalgamated.hpp>

#include <cmath>

#include "diffsep/diffusion.hpp"

using namespace diffsep;
using namespace diffsep::diffusion;

namespace {

// F(input) = constant tensor with the output channel count of half the input.
class ConstantNetwork : public Network<double> {
 public:
  explicit ConstantNetwork(double v) : v_(v) {}
  nn::Var<double> forward(const nn::Var<double>& input, double) const override {
    const auto& s = input.shape();
    return nn::Var<double>(Tensor<double>({s[0] / 2, s[1], s[2]}, v_));
  }

 private:
  double v_;
};

// D(x; sigma) = y + a * sigma, counting calls.
class LinearOracle : public Denoiser<double> {
 public:
  LinearOracle(Tensor<double> y, double a) : y_(std::move(y)), a_(a) {}
  Tensor<double> denoise(const Tensor<double>&, const Tensor<double>&, double sigma) override {
    ++calls;
    Tensor<double> out = y_;
    for (auto& v : out.values()) v += a_ * sigma;
    return out;
  }
  int calls = 0;

 private:
  Tensor<double> y_;
  double a_;
};

double max_adjacent_difference(const NoiseSchedule& s) {
  double m = 0.0;
  for (std::size_t i = 0; i + 2 < s.sigmas.size(); ++i) m = std::max(m, s.sigmas[i] - s.sigmas[i + 1]);
  return m;
}

}  // namespace

TEST_CASE("karras schedule endpoints and monotonicity", "[diffusion][schedule]") {
  for (std::size_t n = 2; n <= 64; ++n)
    for (int rho = 1; rho <= 10; ++rho) {
      auto s = karras_schedule(n, 0.002, 80.0, rho);
      REQUIRE(s.sigmas.size() == n + 1);
      CHECK(std::abs(s.sigmas[0] - 80.0) <= 1e-9 * 80.0);
      CHECK(std::abs(s.sigmas[n - 1] - 0.002) <= 1e-9 * 0.002);
      CHECK(s.sigmas[n] == 0.0);
      for (std::size_t i = 0; i < n; ++i) REQUIRE(s.sigmas[i] > s.sigmas[i + 1]);
    }
  auto s10 = karras_schedule(10);
  CHECK(s10.sigmas.front() == Catch::Approx(80.0).epsilon(1e-12));
  CHECK(s10.sigmas[9] == Catch::Approx(0.002).epsilon(1e-9));
  CHECK(karras_schedule(1).sigmas == std::vector<double>{80.0, 0.0});
  CHECK(karras_schedule(7, 0.002, 80.0, 2.0).sigmas.size() == 8);
}

TEST_CASE("karras schedule matches a direct evaluation", "[diffusion][schedule]") {
  // Independent formulation: interpolate in sigma^(1/rho) space, then raise.
  const double rho = 3.0;
  auto s = karras_schedule(5, 0.002, 80.0, rho);
  const double a = std::cbrt(80.0), b = std::cbrt(0.002);
  for (int i = 0; i < 5; ++i) {
    const double r = a + (b - a) * i / 4.0;
    CHECK(s.sigmas[i] == Catch::Approx(r * r * r).epsilon(1e-12));
  }
}

TEST_CASE("smaller rho spreads steps more evenly in sigma", "[diffusion][schedule]") {
  for (std::size_t n : {4, 7, 10, 32}) {
    const double d2 = max_adjacent_difference(karras_schedule(n, 0.002, 80.0, 2.0));
    const double d3 = max_adjacent_difference(karras_schedule(n, 0.002, 80.0, 3.0));
    const double d7 = max_adjacent_difference(karras_schedule(n, 0.002, 80.0, 7.0));
    CHECK(d2 < d3);
    CHECK(d3 < d7);
  }
}

TEST_CASE("schedule rejects invalid parameters", "[diffusion][schedule]") {
  CHECK_THROWS_AS(karras_schedule(0), Error);
  CHECK_THROWS_AS(karras_schedule(5, 80.0, 0.002), Error);
  CHECK_THROWS_AS(karras_schedule(5, 0.0, 80.0), Error);
  CHECK_THROWS_AS(karras_schedule(5, 0.002, 80.0, 0.0), Error);
}

TEST_CASE("preconditioning coefficients", "[diffusion][precond]") {
  auto k = precond_coeffs(0.5);
  CHECK(k.c_skip == Catch::Approx(0.5).epsilon(1e-12));
  CHECK(k.c_in == Catch::Approx(std::sqrt(2.0)).epsilon(1e-12));
  CHECK(k.c_out == Catch::Approx(0.35355339).epsilon(1e-8));
  CHECK(k.c_noise == Catch::Approx(std::log(0.5) / 4).epsilon(1e-12));

  CHECK(precond_coeffs(80.0).c_skip == Catch::Approx(0.25 / 6400.25).epsilon(1e-12));
  CHECK(precond_coeffs(80.0).c_skip == Catch::Approx(3.906e-5).epsilon(1e-3));

  auto tiny = precond_coeffs(1e-8);
  CHECK(tiny.c_skip == Catch::Approx(1.0).epsilon(1e-12));
  CHECK(tiny.c_out < 1e-7);
  CHECK(precond_coeffs(1e8).c_skip < 1e-16);

  CHECK_THROWS_AS(precond_coeffs(0.0), Error);
  CHECK_THROWS_AS(precond_coeffs(1.0, -0.5), Error);
}

TEST_CASE("preconditioning identities over log-spaced sigma", "[diffusion][precond]") {
  const double sd = 0.5;
  for (int i = 0; i < 1000; ++i) {
    const double sigma = std::pow(10.0, -4.0 + 7.0 * i / 999.0);
    auto k = precond_coeffs(sigma, sd);
    const double total = sigma * sigma + sd * sd;
    CHECK(std::abs(k.c_in * k.c_in * total - 1.0) <= 1e-9);
    const double rhs = sigma * sigma * sd * sd;
    CHECK(std::abs(k.c_out * k.c_out * total - rhs) <= 1e-9 * rhs);
    CHECK(std::abs(loss_weight(sigma, sd) * k.c_out * k.c_out - 1.0) <= 1e-9);
  }
}

TEST_CASE("sigma distribution", "[diffusion][sigma]") {
  SigmaDistribution dist;
  CHECK(dist.at(0.0) == Catch::Approx(0.30119421).epsilon(1e-7));
  CHECK(dist.at(1.0) == Catch::Approx(1.0).epsilon(1e-12));

  Rng rng(42);
  const int n = 100000;
  double s = 0, ss = 0;
  for (int i = 0; i < n; ++i) {
    const double sigma = sample_sigma(dist, rng);
    REQUIRE(sigma > 0.0);
    const double l = std::log(sigma);
    s += l;
    ss += l * l;
  }
  const double mean = s / n, sd = std::sqrt(ss / n - mean * mean);
  CHECK(std::abs(mean + 1.2) <= 0.02);
  CHECK(std::abs(sd - 1.2) <= 0.02);
}

TEST_CASE("denoiser preconditioning wrapper", "[diffusion][denoise]") {
  Rng rng(1);
  Tensor<double> x({2, 3, 4}), cond({2, 3, 4});
  rng.fill_normal(x);
  rng.fill_normal(cond);
  const double sigma = 1.7;

  auto d0 = denoise(ConstantNetwork(0.0), x, cond, sigma).value();
  const double cs = precond_coeffs(sigma).c_skip;
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(d0[i] == Catch::Approx(cs * x[i]).epsilon(1e-14));

  auto dz = denoise(ConstantNetwork(0.0), Tensor<double>({2, 3, 4}), cond, sigma).value();
  CHECK(max_abs(dz) == 0.0);

  auto d1 = denoise(ConstantNetwork(1.0), Tensor<double>({2, 3, 4}), cond, 0.5).value();
  for (double v : d1.values()) CHECK(v == Catch::Approx(0.35355339).epsilon(1e-8));

  CHECK_THROWS_AS(denoise(ConstantNetwork(0.0), x, Tensor<double>({2, 3, 5}), sigma), Error);
}

TEST_CASE("denoiser passes the condition unscaled after the scaled state", "[diffusion][denoise]") {
  struct Probe : Network<double> {
    mutable Tensor<double> seen;
    nn::Var<double> forward(const nn::Var<double>& input, double) const override {
      seen = input.value();
      return nn::Var<double>(Tensor<double>({1, 1, 1}));
    }
  } probe;
  Tensor<double> x({1, 1, 1}, 2.0), cond({1, 1, 1}, 3.0);
  denoise(probe, x, cond, 0.5);
  CHECK(probe.seen.shape() == Shape{2, 1, 1});
  CHECK(probe.seen[0] == Catch::Approx(2.0 * std::sqrt(2.0)).epsilon(1e-14));
  CHECK(probe.seen[1] == 3.0);
}

TEST_CASE("training loss", "[diffusion][loss]") {
  Tensor<double> target({2, 4, 8}), cond({2, 4, 8});
  SECTION("zero network on zero target") {
    // E[loss] = lambda * c_skip^2 * sigma^2
    for (double sigma : {0.1, 0.5, 2.0, 20.0}) {
      Rng rng(7);
      double acc = 0;
      const int reps = 400;
      for (int r = 0; r < reps; ++r)
        acc += training_loss(ConstantNetwork(0.0), target, cond, sigma, rng).value()[0];
      const double cs = precond_coeffs(sigma).c_skip;
      CHECK(acc / reps == Catch::Approx(loss_weight(sigma) * cs * cs * sigma * sigma).epsilon(0.05));
    }
  }
  SECTION("explicit noise gives the closed form") {
    Rng rng(8);
    Tensor<double> noise(target.shape());
    rng.fill_normal(noise, 0.9);
    const double sigma = 0.9;
    const double cs = precond_coeffs(sigma).c_skip;
    const double expect = loss_weight(sigma) * cs * cs * sum_squares(noise) / noise.size();
    CHECK(training_loss(ConstantNetwork(0.0), target, cond, sigma, noise).value()[0] ==
          Catch::Approx(expect).epsilon(1e-12));
  }
  SECTION("random inputs give finite non-negative loss") {
    Rng rng(9);
    rng.fill_normal(target);
    rng.fill_normal(cond);
    for (int i = 0; i < 20; ++i) {
      const double l = training_loss(ConstantNetwork(0.3), target, cond, sample_sigma({}, rng), rng).value()[0];
      CHECK(std::isfinite(l));
      CHECK(l >= 0.0);
    }
  }
}

TEST_CASE("samplers recover the truth under the constant oracle", "[diffusion][sampler]") {
  Rng data(3);
  Tensor<float> y({4, 8, 6});
  data.fill_normal(y);
  for (std::size_t n : {1, 4, 7}) {
    for (auto method : {Sampler::kEuler, Sampler::kHeun}) {
      OracleDenoiser<float> oracle(y);
      Rng rng(100 + n);
      auto x = sample<float>(oracle, Tensor<float>(y.shape()), karras_schedule(n, 0.002, 80.0, 2.0), rng, method);
      double worst = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) worst = std::max(worst, std::abs(double(x[i]) - y[i]));
      CHECK(worst / max_abs(y) <= 1e-5);
    }
  }
  OracleDenoiser<float> zero(Tensor<float>({1, 2, 2}));
  Rng rng(1);
  CHECK(max_abs(sample<float>(zero, Tensor<float>({1, 2, 2}), karras_schedule(7), rng)) == 0.0);
}

TEST_CASE("euler error contracts by the sigma ratio each step", "[diffusion][sampler]") {
  Tensor<double> y({1, 1, 1}, 0.25);
  OracleDenoiser<double> oracle(y);
  auto sched = karras_schedule(6, 0.002, 80.0, 7.0);
  Rng rng(5);
  std::vector<double> err;
  sample<double>(oracle, Tensor<double>({1, 1, 1}), sched, rng, Sampler::kEuler,
                 [&](std::size_t, double, const Tensor<double>& x) { err.push_back(x[0] - 0.25); });
  Rng again(5);
  const double e0 = again.normal() * 80.0 - 0.25;
  for (std::size_t i = 0; i + 1 < err.size(); ++i)
    CHECK(err[i] == Catch::Approx(e0 * sched.sigmas[i + 1] / 80.0).epsilon(1e-9));
  CHECK(err.back() == 0.0);
}

TEST_CASE("heun beats euler on a linear-in-sigma oracle", "[diffusion][sampler]") {
  // dx/dsigma = (x - y - a sigma) / sigma has the solution
  // x = y + sigma (C - a ln sigma) with C fixed by the starting point.
  // Euler integrates the homogeneous part exactly, so the trapezoidal
  // corrector only wins while adjacent sigma ratios stay below ~2.7.
  const double y0 = 0.3, a = 0.8;
  auto check = [&](std::size_t n, double smin, double smax) {
    auto sched = karras_schedule(n, smin, smax, 7.0);
    auto run = [&](Sampler m, int* calls) {
      LinearOracle den(Tensor<double>({1, 1, 1}, y0), a);
      Rng rng(11);
      std::vector<double> states;
      sample<double>(den, Tensor<double>({1, 1, 1}), sched, rng, m,
                     [&](std::size_t, double, const Tensor<double>& x) { states.push_back(x[0]); });
      *calls = den.calls;
      return states;
    };
    int euler_calls = 0, heun_calls = 0;
    auto e = run(Sampler::kEuler, &euler_calls);
    auto h = run(Sampler::kHeun, &heun_calls);
    CHECK(euler_calls == static_cast<int>(n));
    CHECK(heun_calls == static_cast<int>(2 * n - 1));

    Rng rng(11);
    const double x0 = rng.normal() * smax;
    const double C = (x0 - y0) / smax + a * std::log(smax);
    auto exact = [&](double s) { return y0 + s * (C - a * std::log(s)); };
    // States after steps 1..n-1 sit at sigma_1..sigma_{n-1}.
    for (std::size_t i = 1; i < n; ++i) {
      const double ref = exact(sched.sigmas[i]);
      CHECK(std::abs(h[i - 1] - ref) < std::abs(e[i - 1] - ref));
    }
    // Both finish with the same jump onto D(x; sigma_min).
    CHECK(e.back() == y0 + a * smin);
    CHECK(h.back() == y0 + a * smin);
  };
  SECTION("four steps over a short range") { check(4, 0.25, 1.0); }
  SECTION("32 steps over the default range") { check(32, 0.002, 80.0); }
}

TEST_CASE("sampler is deterministic for a fixed seed", "[diffusion][sampler]") {
  // D(x) = x / 2 keeps the result dependent on the initial noise.
  struct Shrink : Denoiser<double> {
    Tensor<double> denoise(const Tensor<double>& x, const Tensor<double>&, double) override { return x * 0.5; }
  };
  Tensor<double> y({2, 3, 3}, 0.1);
  auto go = [&](std::uint64_t seed) {
    Shrink den;
    Rng rng(seed);
    return sample<double>(den, y, karras_schedule(7, 0.002, 80.0, 2.0), rng, Sampler::kHeun);
  };
  CHECK(go(9) == go(9));
  CHECK_FALSE(go(9) == go(10));
}

TEST_CASE("sampler names", "[diffusion]") {
  CHECK(parse_sampler("euler") == Sampler::kEuler);
  CHECK(parse_sampler("heun") == Sampler::kHeun);
  CHECK(to_string(Sampler::kHeun) == "heun");
  CHECK_THROWS_AS(parse_sampler("dpm"), Error);
}
