// Copyright 2026 The diffsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// EDM noise schedule, preconditioning, sigma sampling, training loss and the
// deterministic ODE samplers. Nothing here depends on a concrete network.

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "diffsep/nn/ops.hpp"
#include "diffsep/rng.hpp"

namespace diffsep::diffusion {

struct NoiseSchedule {
  std::vector<double> sigmas;  // N descending levels followed by a terminal 0
  std::size_t n_steps = 0;
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double rho = 7.0;
};

// sigma_i = (smax^(1/rho) + i/(N-1) (smin^(1/rho) - smax^(1/rho)))^rho, i < N,
// then 0. A single step gives [smax, 0].
inline NoiseSchedule karras_schedule(std::size_t n, double sigma_min = 0.002, double sigma_max = 80.0,
                                     double rho = 7.0) {
  if (n < 1) throw Error("schedule: need at least one step");
  if (!(sigma_min > 0.0 && sigma_min < sigma_max))
    throw Error("schedule: require 0 < sigma_min < sigma_max");
  if (!(rho > 0.0)) throw Error("schedule: rho must be positive");
  NoiseSchedule s{{}, n, sigma_min, sigma_max, rho};
  const double hi = std::pow(sigma_max, 1.0 / rho);
  const double lo = std::pow(sigma_min, 1.0 / rho);
  if (n == 1) {
    s.sigmas = {sigma_max, 0.0};
    return s;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double frac = static_cast<double>(i) / static_cast<double>(n - 1);
    s.sigmas.push_back(std::pow(hi + frac * (lo - hi), rho));
  }
  s.sigmas.push_back(0.0);
  return s;
}

struct PrecondCoeffs {
  double c_skip, c_in, c_out, c_noise;
  double sigma, sigma_data;
};

inline PrecondCoeffs precond_coeffs(double sigma, double sigma_data = 0.5) {
  if (!(sigma > 0.0)) throw Error("precond: sigma must be positive");
  if (!(sigma_data > 0.0)) throw Error("precond: sigma_data must be positive");
  const double s2 = sigma * sigma, d2 = sigma_data * sigma_data;
  const double root = std::sqrt(s2 + d2);
  return {d2 / (s2 + d2), 1.0 / root, sigma * sigma_data / root, std::log(sigma) / 4.0, sigma, sigma_data};
}

// lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2 = 1 / c_out^2.
inline double loss_weight(double sigma, double sigma_data = 0.5) {
  return (sigma * sigma + sigma_data * sigma_data) / ((sigma * sigma_data) * (sigma * sigma_data));
}

struct SigmaDistribution {
  double p_mean = -1.2;
  double p_std = 1.2;

  double at(double eps) const { return std::exp(p_mean + p_std * eps); }
  double sample(Rng& rng) const { return at(rng.normal()); }
};

inline double sample_sigma(const SigmaDistribution& dist, Rng& rng) { return dist.sample(rng); }

// The raw network F_theta: [2C, F, T] input (noisy state, condition) plus
// noise level -> [C, F, T].
template <typename T>
class Network {
 public:
  virtual ~Network() = default;
  virtual nn::Var<T> forward(const nn::Var<T>& input, double sigma) const = 0;
};

// D(x; sigma) given the conditioning tensor.
template <typename T>
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Tensor<T> denoise(const Tensor<T>& x, const Tensor<T>& cond, double sigma) = 0;
};

// c_skip x + c_out F(concat(c_in x, cond); sigma). The condition enters
// unscaled.
template <typename T>
nn::Var<T> denoise(const Network<T>& net, const Tensor<T>& x, const Tensor<T>& cond, double sigma,
                   double sigma_data = 0.5) {
  if (x.shape() != cond.shape())
    throw Error("denoise: state " + shape_string(x.shape()) + " and condition " +
                shape_string(cond.shape()) + " differ");
  const PrecondCoeffs k = precond_coeffs(sigma, sigma_data);
  nn::Var<T> input(Tensor<T>(x) * static_cast<T>(k.c_in));
  nn::Var<T> stacked = nn::concat_channels(input, nn::Var<T>(cond));
  nn::Var<T> raw = net.forward(stacked, sigma);
  return nn::add_constant(nn::scale(raw, static_cast<T>(k.c_out)), Tensor<T>(x) * static_cast<T>(k.c_skip));
}

// lambda(sigma) * mean((D(target + n) - target)^2) with the noise n given.
template <typename T>
nn::Var<T> training_loss(const Network<T>& net, const Tensor<T>& target, const Tensor<T>& cond,
                         double sigma, const Tensor<T>& noise, double sigma_data = 0.5) {
  nn::Var<T> d = denoise(net, target + noise, cond, sigma, sigma_data);
  return nn::weighted_mse(d, target, static_cast<T>(loss_weight(sigma, sigma_data)));
}

// Same, drawing n ~ N(0, sigma^2 I) from rng.
template <typename T>
nn::Var<T> training_loss(const Network<T>& net, const Tensor<T>& target, const Tensor<T>& cond,
                         double sigma, Rng& rng, double sigma_data = 0.5) {
  Tensor<T> noise(target.shape());
  rng.fill_normal(noise, sigma);
  return training_loss(net, target, cond, sigma, noise, sigma_data);
}

// Wraps a network as an inference-time denoiser (no graph recording).
template <typename T>
class NetworkDenoiser : public Denoiser<T> {
 public:
  explicit NetworkDenoiser(const Network<T>& net, double sigma_data = 0.5)
      : net_(net), sigma_data_(sigma_data) {}
  Tensor<T> denoise(const Tensor<T>& x, const Tensor<T>& cond, double sigma) override {
    nn::NoGradGuard guard;
    return diffusion::denoise(net_, x, cond, sigma, sigma_data_).value();
  }

 private:
  const Network<T>& net_;
  double sigma_data_;
};

// Test seam: ignores its input and returns a fixed tensor.
template <typename T>
class OracleDenoiser : public Denoiser<T> {
 public:
  explicit OracleDenoiser(Tensor<T> truth) : truth_(std::move(truth)) {}
  Tensor<T> denoise(const Tensor<T>& x, const Tensor<T>&, double) override {
    x.check_same(truth_);
    return truth_;
  }

 private:
  Tensor<T> truth_;
};

enum class Sampler { kEuler, kHeun };

inline Sampler parse_sampler(const std::string& name) {
  if (name == "euler") return Sampler::kEuler;
  if (name == "heun") return Sampler::kHeun;
  throw Error("unknown sampler '" + name + "' (expected euler or heun)");
}
inline std::string to_string(Sampler s) { return s == Sampler::kEuler ? "euler" : "heun"; }

// Called after every step with (index of the level just reached, sigma, state).
template <typename T>
using StepObserver = std::function<void(std::size_t, double, const Tensor<T>&)>;

namespace detail {

template <typename T>
void axpy(Tensor<T>& y, double a, const Tensor<T>& x) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<T>(y[i] + a * x[i]);
}

// (x - D) / sigma
template <typename T>
Tensor<T> slope(const Tensor<T>& x, const Tensor<T>& d, double sigma) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<T>((x[i] - d[i]) / sigma);
  return out;
}

}  // namespace detail

// Integrates the probability-flow ODE from x = sigma_0 * eps down to sigma = 0.
// Heun adds a trapezoidal correction on every step except the last one.
template <typename T>
Tensor<T> sample(Denoiser<T>& den, const Tensor<T>& cond, const NoiseSchedule& schedule, Rng& rng,
                 Sampler method = Sampler::kEuler, const StepObserver<T>& observer = {}) {
  const auto& s = schedule.sigmas;
  if (s.size() != schedule.n_steps + 1 || s.back() != 0.0) throw Error("sample: invalid schedule");
  Tensor<T> x(cond.shape());
  rng.fill_normal(x, s[0]);
  for (std::size_t i = 0; i < schedule.n_steps; ++i) {
    const double cur = s[i], next = s[i + 1];
    Tensor<T> denoised = den.denoise(x, cond, cur);
    if (next == 0.0) {
      // x + (0 - sigma) (x - D) / sigma == D; assigned directly so the final
      // step carries no rounding.
      x = std::move(denoised);
      if (observer) observer(i + 1, next, x);
      continue;
    }
    Tensor<T> d = detail::slope(x, denoised, cur);
    if (method == Sampler::kHeun) {
      Tensor<T> pred = x;
      detail::axpy(pred, next - cur, d);
      Tensor<T> d2 = detail::slope(pred, den.denoise(pred, cond, next), next);
      for (std::size_t k = 0; k < x.size(); ++k)
        x[k] = static_cast<T>(x[k] + (next - cur) * 0.5 * (static_cast<double>(d[k]) + d2[k]));
    } else {
      detail::axpy(x, next - cur, d);
    }
    if (observer) observer(i + 1, next, x);
  }
  return x;
}

template <typename T>
Tensor<T> euler_sampler(Denoiser<T>& den, const Tensor<T>& cond, const NoiseSchedule& schedule, Rng& rng) {
  return sample(den, cond, schedule, rng, Sampler::kEuler);
}

template <typename T>
Tensor<T> heun_sampler(Denoiser<T>& den, const Tensor<T>& cond, const NoiseSchedule& schedule, Rng& rng) {
  return sample(den, cond, schedule, rng, Sampler::kHeun);
}

}  // namespace diffsep::diffusion
