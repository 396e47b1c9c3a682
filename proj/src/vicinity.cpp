#include "sprout/vicinity.hpp"

#include <algorithm>
#include <cmath>

#include "sprout/error.hpp"

namespace sprout {

namespace {

void check_simplex_shape(const ad::Shape& logits, const ad::Shape& labels) {
  if (logits.size() != 2 || logits != labels)
    throw ShapeError("gce_loss: logits " + ad::to_string(logits) + " vs labels " +
                     ad::to_string(labels));
}

}  // namespace

std::string to_string(VicinityKind k) {
  switch (k) {
    case VicinityKind::natural: return "natural";
    case VicinityKind::ga: return "ga";
    case VicinityKind::ls: return "ls";
    case VicinityKind::ls_ga: return "ls+ga";
    case VicinityKind::mixup: return "mixup";
    case VicinityKind::adv_train: return "adv_train";
    case VicinityKind::trades: return "trades";
    case VicinityKind::sprout: return "sprout";
  }
  return "?";
}

VicinityKind parse_vicinity_kind(const std::string& s) {
  for (auto k : {VicinityKind::natural, VicinityKind::ga, VicinityKind::ls, VicinityKind::ls_ga,
                 VicinityKind::mixup, VicinityKind::adv_train, VicinityKind::trades,
                 VicinityKind::sprout})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown training mode '" + s + "'");
}

void VicinityMode::validate() const {
  const bool attacked = kind == VicinityKind::adv_train || kind == VicinityKind::trades;
  if (attacked && !attack) throw ConfigError(to_string(kind) + " requires an attack spec");
  if (!attacked && attack) throw ConfigError(to_string(kind) + " must not carry an attack spec");
  if (attack) attack->validate();
  if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("alpha must be in [0, 1]");
  if (kind == VicinityKind::sprout && stages.dirichlet && !(alpha > 0))
    throw ConfigError("sprout requires alpha > 0");
  if (!(a > 0)) throw ConfigError("mixup shape a must be > 0");
  if (!(delta >= 0)) throw ConfigError("gaussian delta must be >= 0");
}

ad::Var gce_loss(ad::Var logits, ad::Var labels) {
  check_simplex_shape(logits.shape(), labels.shape());
  const double n = static_cast<double>(logits.shape()[0]);
  ad::Var logp = ad::log(ad::clip(ad::softmax(logits), 1e-12, 1.0));
  return ad::scalar_multiply(ad::sum(ad::multiply(logp, labels)), -1.0 / n);
}

ad::Var gce_loss(ad::Var logits, const ad::Tensor& labels) {
  return gce_loss(logits, logits.tape().constant(labels));
}

ad::Tensor gaussian_augment(const ad::Tensor& x, double delta, Rng& rng) {
  if (!(delta >= 0)) throw ConfigError("gaussian_augment: delta must be >= 0");
  ad::Tensor out = x;
  if (delta == 0) return out;
  for (double& v : out.data()) v = std::clamp(v + delta * rng.normal(), 0.0, 1.0);
  return out;
}

double sample_beta(double a, double b, Rng& rng) {
  const double x = sample_gamma(a, rng);
  const double y = sample_gamma(b, rng);
  return x / (x + y);
}

MixupResult mixup(const ad::Tensor& x, const ad::Tensor& y, double a, Rng& rng,
                  std::optional<double> force_lambda) {
  if (!(a > 0)) throw ConfigError("mixup: a must be > 0");
  const std::size_t n = x.dim(0);
  if (n == 0 || y.rank() != 2 || y.dim(0) != n)
    throw ShapeError("mixup: images " + ad::to_string(x.shape()) + " vs labels " +
                     ad::to_string(y.shape()));
  MixupResult r;
  const double drawn = sample_beta(a, a, rng);
  r.lambda = force_lambda.value_or(drawn);
  r.perm = rng.permutation(n);
  r.x = x;
  r.y = y;
  const double l = r.lambda;
  auto blend = [&](const ad::Tensor& src, ad::Tensor& dst) {
    const std::size_t d = src.size() / n;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = r.perm[i];
      for (std::size_t k = 0; k < d; ++k)
        dst[i * d + k] = (1 - l) * src[i * d + k] + l * src[j * d + k];
    }
  };
  if (l != 0) {
    blend(x, r.x);
    blend(y, r.y);
  }
  return r;
}

ad::Tensor uniform_smooth(const ad::Tensor& y, double alpha) {
  if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("uniform_smooth: alpha must be in [0, 1]");
  if (y.rank() != 2) throw ShapeError("uniform_smooth: expected N x K, got " + ad::to_string(y.shape()));
  ad::Tensor out = y;
  if (alpha == 0) return out;
  const double u = alpha / static_cast<double>(y.dim(1));
  for (double& v : out.data()) v = (1 - alpha) * v + u;
  return out;
}

ad::Var dirichlet_smooth(ad::Var y_mix, ad::Var log_beta, double alpha, std::uint64_t seed,
                         double concentration_scale) {
  if (!(alpha > 0 && alpha <= 1)) throw ConfigError("dirichlet_smooth: alpha must be in (0, 1]");
  if (y_mix.shape().size() != 2 || log_beta.shape() != ad::Shape{y_mix.shape()[1]})
    throw ShapeError("dirichlet_smooth: labels " + ad::to_string(y_mix.shape()) + " vs beta " +
                     ad::to_string(log_beta.shape()));
  ad::Var conc = ad::add(ad::scalar_multiply(y_mix, (1 - alpha) * concentration_scale),
                         ad::scalar_multiply(ad::exp(log_beta), alpha * concentration_scale));
  return dirichlet_sample(conc, seed);
}

ad::Tensor dirichlet_smooth(const ad::Tensor& y_mix, const DirichletParams& beta, double alpha,
                            Rng& rng, double concentration_scale) {
  beta.validate();
  ad::Tape t;
  ad::Tensor lb(ad::Shape{beta.size()}, beta.log_beta);
  const std::uint64_t seed = rng.engine()();
  return dirichlet_smooth(t.constant(y_mix), t.constant(lb), alpha, seed, concentration_scale).value();
}

VicinalBatch apply_vicinity(ad::Tape& tape, const VicinityMode& mode, const LabeledBatch& batch,
                            const Model& model, ad::Var log_beta, Rng& rng,
                            const VicinityHooks& hooks) {
  mode.validate();
  VicinalBatch out;
  switch (mode.kind) {
    case VicinityKind::natural:
      out.x = batch.x;
      out.y = tape.constant(batch.y);
      break;
    case VicinityKind::ga:
      out.x = gaussian_augment(batch.x, mode.delta, rng);
      out.y = tape.constant(batch.y);
      break;
    case VicinityKind::ls:
      out.x = batch.x;
      out.y = tape.constant(uniform_smooth(batch.y, mode.alpha));
      break;
    case VicinityKind::ls_ga:
      out.x = gaussian_augment(batch.x, mode.delta, rng);
      out.y = tape.constant(uniform_smooth(batch.y, mode.alpha));
      break;
    case VicinityKind::mixup: {
      auto m = mixup(batch.x, batch.y, mode.a, rng, hooks.lambda);
      out.x = std::move(m.x);
      out.y = tape.constant(std::move(m.y));
      out.lambda = m.lambda;
      break;
    }
    case VicinityKind::adv_train:
    case VicinityKind::trades: {
      AttackSpec spec = *mode.attack;
      spec.seed = rng.engine()();
      out.x = pgd_linf(model, batch.x, batch.labels, spec);
      if (mode.kind == VicinityKind::adv_train) {
        out.y = tape.constant(batch.y);
        break;
      }
      // model-output term enters as a constant
      const ad::Tensor z = model.logits(out.x);
      ad::Tape side;
      const ad::Tensor p = ad::softmax(side.constant(z)).value();
      ad::Tensor y = batch.y;
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = (1 - mode.alpha) * y[i] + mode.alpha * p[i];
      out.y = tape.constant(std::move(y));
      break;
    }
    case VicinityKind::sprout: {
      const auto& st = mode.stages;
      ad::Tensor x = st.gaussian ? gaussian_augment(batch.x, mode.delta, rng) : batch.x;
      ad::Tensor y = batch.y;
      if (st.mixup) {
        auto m = mixup(x, y, mode.a, rng, hooks.lambda);
        x = std::move(m.x);
        y = std::move(m.y);
        out.lambda = m.lambda;
      }
      out.x = std::move(x);
      if (st.dirichlet) {
        if (!log_beta.valid() || &log_beta.tape() != &tape)
          throw ConfigError("sprout: log beta must be recorded on the training tape");
        out.y = dirichlet_smooth(tape.constant(std::move(y)), log_beta, mode.alpha,
                                 rng.engine()(), hooks.concentration_scale);
      } else {
        out.y = tape.constant(std::move(y));
      }
      break;
    }
  }
  return out;
}

}  // namespace sprout
