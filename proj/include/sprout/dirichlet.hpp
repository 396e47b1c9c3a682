#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sprout/autodiff.hpp"
#include "sprout/rng.hpp"

namespace sprout {

inline constexpr double kLogBetaBound = 30.0;
inline constexpr double kConcentrationFloor = 1e-6;
inline constexpr double kGammaFloor = 1e-300;

/// Global concentration vector, stored as log beta.
struct DirichletParams {
  std::vector<double> log_beta;

  static DirichletParams from_beta(std::span<const double> beta);
  /// log beta ~ Normal(0, 0.1^2)
  static DirichletParams random(std::size_t K, Rng& rng);

  std::size_t size() const { return log_beta.size(); }
  std::vector<double> beta() const;
  /// Clamps every entry into [-kLogBetaBound, kLogBetaBound].
  void clamp();
  /// Throws NumericError on non-finite or out-of-box entries.
  void validate() const;
};

/// Gamma(alpha, 1). Marsaglia-Tsang for alpha >= 1, boosted through
/// G(alpha + 1) U^(1/alpha) below that. Result is at least kGammaFloor.
double sample_gamma(double alpha, Rng& rng);

struct DirichletDraw {
  std::vector<double> z;      // point on the simplex
  std::vector<double> gamma;  // the Gamma variates that produced it
};

DirichletDraw sample_dirichlet(std::span<const double> concentration, Rng& rng);
DirichletDraw sample_dirichlet(const DirichletParams& params, Rng& rng);

struct DirichletMoments {
  std::vector<double> mean;
  ad::Tensor cov;  // K x K
};

DirichletMoments moments(std::span<const double> beta);
DirichletMoments moments(const DirichletParams& params);

/// Regularized incomplete gamma functions P(a, x) and Q(a, x) = 1 - P(a, x).
/// Below x = a + 1 Q is formed as 1 - P, so it is accurate only in absolute terms there.
double gamma_p(double a, double x);
double gamma_q(double a, double x);
double gamma_log_pdf(double a, double x);

/// dG/d(alpha) for a Gamma(alpha, 1) variate G, by implicit differentiation of
/// the CDF: -(dP/d alpha) / pdf, with dP/d alpha from a central difference.
double gamma_shape_grad(double alpha, double g);

/// Jacobian J[s, k] = dz_s / d beta_k of z = G / sum(G) for the draw that
/// produced `gamma` under `concentration`.
ad::Tensor pathwise_grad(std::span<const double> concentration, std::span<const double> gamma);

/// M[s, t] = beta_s * beta_t.
ad::Tensor correlation_matrix(const DirichletParams& params);

/// Records a per-row Dirichlet draw with the given N x K concentrations
/// (floored at kConcentrationFloor). Row i uses the substream (seed, i);
/// backward reaches the concentrations pathwise.
ad::Var dirichlet_sample(ad::Var concentration, std::uint64_t seed);

}  // namespace sprout
