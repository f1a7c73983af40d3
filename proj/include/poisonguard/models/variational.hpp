#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <stdexcept>

#include "poisonguard/tensor/ops.hpp"

namespace poisonguard {

/// Mean-field Gaussian posterior over one weight tensor, plus its Gaussian
/// prior. sigma = softplus(rho).
template <typename T>
struct VariationalParams {
  Var<T> mu;
  Var<T> rho;
  std::shared_ptr<Tensor<T>> prior_mu;
  std::shared_ptr<Tensor<T>> prior_sigma;

  VariationalParams() = default;

  VariationalParams(const Shape& shape, T init_rho, T prior_sigma_value = T{1})
      : mu(make_param<T>(shape)),
        rho(make_param<T>(shape, init_rho)),
        prior_mu(std::make_shared<Tensor<T>>(shape)),
        prior_sigma(std::make_shared<Tensor<T>>(shape, prior_sigma_value)) {}

  const Shape& shape() const { return mu->shape; }

  Tensor<T> sigma() const {
    Tensor<T> s(mu->shape);
    for (std::size_t i = 0; i < s.numel(); ++i) s[i] = softplus_value(rho->data[i]);
    return s;
  }

  void validate() const {
    if (rho->shape != mu->shape || prior_mu->shape != mu->shape ||
        prior_sigma->shape != mu->shape) {
      throw ShapeError("variational params: mu/rho/prior shapes disagree");
    }
  }
};

/// KL(q || prior) summed over the tensor, evaluated in double precision.
template <typename T>
double kl_to_prior(const VariationalParams<T>& p) {
  p.validate();
  for (T s : p.prior_sigma->data) {
    if (!(s > T{0})) throw std::domain_error("kl_to_prior: prior sigma must be positive");
  }
  return gaussian_kl_value<T>(p.mu->data, p.rho->data, p.prior_mu->data, p.prior_sigma->data);
}

template <typename T>
Var<T> kl_to_prior(Graph<T>& g, const VariationalParams<T>& p) {
  return gaussian_kl(g, p.mu, p.rho, p.prior_mu, p.prior_sigma);
}

/// Random +/-1 entries of shape [rows, cols].
template <typename T>
std::shared_ptr<Tensor<T>> random_signs(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  auto s = std::make_shared<Tensor<T>>(Shape{rows, cols});
  std::uint64_t bits = 0;
  int left = 0;
  for (auto& v : s->data) {
    if (left == 0) {
      bits = rng();
      left = 64;
    }
    v = (bits & 1u) ? T{1} : T{-1};
    bits >>= 1;
    --left;
  }
  return s;
}

template <typename T>
std::shared_ptr<Tensor<T>> standard_normal(const Shape& shape, std::mt19937_64& rng) {
  auto e = std::make_shared<Tensor<T>>(shape);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : e->data) v = static_cast<T>(normal(rng));
  return e;
}

/// One posterior draw of a parameter tensor as a graph value:
/// mu + softplus(rho) * eps, with eps a constant standard-normal tensor.
template <typename T>
Var<T> sample_param(Graph<T>& g, const VariationalParams<T>& p,
                    const std::shared_ptr<Tensor<T>>& eps) {
  auto noise = mul(g, softplus(g, p.rho), eps);
  return add(g, p.mu, noise);
}

/// Weight perturbation sigma * eps without the mean.
template <typename T>
Var<T> param_perturbation(Graph<T>& g, const VariationalParams<T>& p,
                          const std::shared_ptr<Tensor<T>>& eps) {
  return mul(g, softplus(g, p.rho), eps);
}

}  // namespace poisonguard
