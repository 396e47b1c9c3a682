#include "sprout/dirichlet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <string>

#include "sprout/error.hpp"

namespace sprout {

namespace {

constexpr int kMaxIter = 1000000;
constexpr double kEps = 1e-16;

// Series for P(a, x), valid for x < a + 1.
double gamma_p_series(double a, double x) {
  double ap = a, del = 1.0 / a, sum = del;
  for (int n = 0; n < kMaxIter; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::abs(del) < std::abs(sum) * kEps) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Continued fraction for Q(a, x), valid for x >= a + 1 (modified Lentz).
double gamma_q_fraction(double a, double x) {
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
  for (int i = 1; i < kMaxIter; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

void check_shape_arg(double a, double x) {
  if (!(a > 0) || !(x >= 0) || !std::isfinite(a) || !std::isfinite(x))
    throw NumericError("incomplete gamma: invalid arguments a=" + std::to_string(a) +
                       " x=" + std::to_string(x));
}

}  // namespace

DirichletParams DirichletParams::from_beta(std::span<const double> beta) {
  DirichletParams p;
  for (double b : beta) {
    if (!(b > 0) || !std::isfinite(b)) throw ConfigError("Dirichlet beta must be positive and finite");
    p.log_beta.push_back(std::log(b));
  }
  p.clamp();
  return p;
}

DirichletParams DirichletParams::random(std::size_t K, Rng& rng) {
  DirichletParams p;
  for (std::size_t k = 0; k < K; ++k) p.log_beta.push_back(0.1 * rng.normal());
  return p;
}

std::vector<double> DirichletParams::beta() const {
  std::vector<double> b(log_beta.size());
  std::transform(log_beta.begin(), log_beta.end(), b.begin(), [](double l) { return std::exp(l); });
  return b;
}

void DirichletParams::clamp() {
  for (double& l : log_beta) l = std::clamp(l, -kLogBetaBound, kLogBetaBound);
}

void DirichletParams::validate() const {
  if (log_beta.empty()) throw NumericError("Dirichlet params: K = 0");
  for (std::size_t k = 0; k < log_beta.size(); ++k)
    if (!std::isfinite(log_beta[k]) || std::abs(log_beta[k]) > kLogBetaBound)
      throw NumericError("Dirichlet params: log beta[" + std::to_string(k) + "] = " +
                         std::to_string(log_beta[k]));
}

double sample_gamma(double alpha, Rng& rng) {
  if (!(alpha > 0) || !std::isfinite(alpha))
    throw NumericError("sample_gamma: alpha must be positive, got " + std::to_string(alpha));
  if (alpha < 1.0) {
    const double g = sample_gamma(alpha + 1.0, rng);
    const double log_g = std::log(g) + std::log(rng.uniform()) / alpha;
    return log_g < std::log(kGammaFloor) ? kGammaFloor : std::exp(log_g);
  }
  const double d = alpha - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0);
    v = v * v * v;
    const double u = rng.uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return std::max(d * v, kGammaFloor);
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return std::max(d * v, kGammaFloor);
  }
}

DirichletDraw sample_dirichlet(std::span<const double> concentration, Rng& rng) {
  DirichletDraw out;
  out.gamma.reserve(concentration.size());
  for (double c : concentration) out.gamma.push_back(sample_gamma(c, rng));
  const double s = std::accumulate(out.gamma.begin(), out.gamma.end(), 0.0);
  out.z.reserve(out.gamma.size());
  for (double g : out.gamma) out.z.push_back(g / s);
  return out;
}

DirichletDraw sample_dirichlet(const DirichletParams& params, Rng& rng) {
  params.validate();
  const auto b = params.beta();
  return sample_dirichlet(b, rng);
}

DirichletMoments moments(std::span<const double> beta) {
  const std::size_t K = beta.size();
  const double b0 = std::accumulate(beta.begin(), beta.end(), 0.0);
  DirichletMoments m;
  m.cov = ad::Tensor(ad::Shape{K, K});
  for (std::size_t s = 0; s < K; ++s) {
    m.mean.push_back(beta[s] / b0);
    for (std::size_t t = 0; t < K; ++t)
      m.cov[s * K + t] = s == t ? beta[s] * (b0 - beta[s]) / (b0 * b0 * (b0 + 1))
                                : -beta[s] * beta[t] / (b0 * b0 * (b0 + 1));
  }
  return m;
}

DirichletMoments moments(const DirichletParams& params) {
  const auto b = params.beta();
  return moments(b);
}

double gamma_p(double a, double x) {
  check_shape_arg(a, x);
  if (x == 0) return 0.0;
  return x < a + 1.0 ? gamma_p_series(a, x) : 1.0 - gamma_q_fraction(a, x);
}

double gamma_q(double a, double x) {
  check_shape_arg(a, x);
  if (x == 0) return 1.0;
  return x < a + 1.0 ? 1.0 - gamma_p_series(a, x) : gamma_q_fraction(a, x);
}

double gamma_log_pdf(double a, double x) {
  return (a - 1.0) * std::log(x) - x - std::lgamma(a);
}

double gamma_shape_grad(double alpha, double g) {
  // Difference the smaller tail.
  const double h = std::min(1e-4 * std::max(1.0, alpha), 0.5 * alpha);
  const bool lower = g < alpha + 1.0;
  double dp;
  if (lower)
    dp = (gamma_p(alpha + h, g) - gamma_p(alpha - h, g)) / (2 * h);
  else
    dp = -(gamma_q(alpha + h, g) - gamma_q(alpha - h, g)) / (2 * h);
  if (dp == 0) return 0.0;
  const double log_ratio = std::log(std::abs(dp)) - gamma_log_pdf(alpha, g);
  return dp > 0 ? -std::exp(log_ratio) : std::exp(log_ratio);
}

ad::Tensor pathwise_grad(std::span<const double> concentration, std::span<const double> gamma) {
  const std::size_t K = concentration.size();
  if (gamma.size() != K)
    throw ShapeError("pathwise_grad: " + std::to_string(K) + " concentrations vs " +
                     std::to_string(gamma.size()) + " draws");
  const double s = std::accumulate(gamma.begin(), gamma.end(), 0.0);
  ad::Tensor J(ad::Shape{K, K});
  for (std::size_t k = 0; k < K; ++k) {
    const double dg = gamma_shape_grad(concentration[k], gamma[k]);
    if (!std::isfinite(dg))
      throw NumericError("pathwise_grad: non-finite dG/dbeta at k=" + std::to_string(k));
    for (std::size_t r = 0; r < K; ++r) {
      const double z = gamma[r] / s;
      J[r * K + k] = dg * ((r == k ? 1.0 : 0.0) - z) / s;
    }
  }
  return J;
}

ad::Tensor correlation_matrix(const DirichletParams& params) {
  const auto b = params.beta();
  const std::size_t K = b.size();
  ad::Tensor M(ad::Shape{K, K});
  for (std::size_t s = 0; s < K; ++s)
    for (std::size_t t = 0; t < K; ++t) M[s * K + t] = b[s] * b[t];
  return M;
}

ad::Var dirichlet_sample(ad::Var concentration, std::uint64_t seed) {
  const ad::Shape& shape = concentration.shape();
  if (shape.size() != 2) throw ShapeError("dirichlet_sample: expected N x K, got " + ad::to_string(shape));
  auto draws = std::make_shared<std::vector<double>>();

  auto forward = [seed, draws](ad::Tape::Inputs in) {
    const ad::Tensor& c = *in[0];
    const std::size_t N = c.dim(0), K = c.dim(1);
    ad::Tensor z(c.shape());
    draws->assign(c.size(), 0.0);
    std::vector<double> row(K);
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t k = 0; k < K; ++k) row[k] = std::max(c[i * K + k], kConcentrationFloor);
      Rng rng = Rng::derive(seed, {i});
      DirichletDraw d = sample_dirichlet(row, rng);
      std::copy(d.z.begin(), d.z.end(), z.data().begin() + static_cast<std::ptrdiff_t>(i * K));
      std::copy(d.gamma.begin(), d.gamma.end(), draws->begin() + static_cast<std::ptrdiff_t>(i * K));
    }
    return z;
  };
  auto backward = [draws](ad::Tape::Inputs in, const ad::Tensor& z, const ad::Tensor& gz,
                          std::span<ad::Tensor* const> gin) {
    if (!gin[0]) return;
    const ad::Tensor& c = *in[0];
    const std::size_t N = c.dim(0), K = c.dim(1);
    auto g = gin[0]->data();
    for (std::size_t i = 0; i < N; ++i) {
      const double* G = draws->data() + i * K;
      const double s = std::accumulate(G, G + K, 0.0);
      double zg = 0;
      for (std::size_t j = 0; j < K; ++j) zg += z[i * K + j] * gz[i * K + j];
      for (std::size_t k = 0; k < K; ++k) {
        const double ck = c[i * K + k];
        if (ck < kConcentrationFloor) continue;  // floored: locally constant
        const double dg = gamma_shape_grad(ck, G[k]);
        if (!std::isfinite(dg))
          throw NumericError("dirichlet_sample: non-finite pathwise gradient at row " +
                             std::to_string(i) + ", k=" + std::to_string(k));
        g[i * K + k] += dg * (gz[i * K + k] - zg) / s;
      }
    }
  };
  return concentration.tape().record(ad::Primitive::custom, {concentration}, forward, backward);
}

}  // namespace sprout
