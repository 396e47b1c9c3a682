#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sprout/attacks.hpp"
#include "sprout/autodiff.hpp"
#include "sprout/data.hpp"
#include "sprout/dirichlet.hpp"
#include "sprout/model.hpp"
#include "sprout/rng.hpp"

namespace sprout {

enum class VicinityKind { natural, ga, ls, ls_ga, mixup, adv_train, trades, sprout };

std::string to_string(VicinityKind k);
VicinityKind parse_vicinity_kind(const std::string& s);

/// Which stages of the sprout composition run. All on is SPROUT proper; the
/// other settings give the module combinations of the ablation.
struct SproutStages {
  bool gaussian = true;
  bool mixup = true;
  bool dirichlet = true;
  bool operator==(const SproutStages&) const = default;
};

struct VicinityMode {
  VicinityKind kind = VicinityKind::natural;
  double alpha = 0.01;
  double a = 0.2;
  double delta = 0.1;
  std::optional<AttackSpec> attack;
  SproutStages stages;

  void validate() const;
  /// True when the mode owns a Dirichlet concentration to ascend.
  bool learns_beta() const { return kind == VicinityKind::sprout && stages.dirichlet; }
};

/// -(1/N) sum_i sum_k log(clip(softmax(z_i)_k, 1e-12, 1)) Y_ik
ad::Var gce_loss(ad::Var logits, ad::Var labels);
ad::Var gce_loss(ad::Var logits, const ad::Tensor& labels);

/// clip(X + delta * N(0, 1), 0, 1)
ad::Tensor gaussian_augment(const ad::Tensor& x, double delta, Rng& rng);

struct MixupResult {
  ad::Tensor x;
  ad::Tensor y;
  double lambda = 0;
  std::vector<std::size_t> perm;
};

/// One lambda ~ Beta(a, a) per batch and a random pairing permutation.
/// `force_lambda` replaces the draw (the permutation is still drawn).
MixupResult mixup(const ad::Tensor& x, const ad::Tensor& y, double a, Rng& rng,
                  std::optional<double> force_lambda = std::nullopt);

double sample_beta(double a, double b, Rng& rng);

/// (1 - alpha) Y + alpha / K
ad::Tensor uniform_smooth(const ad::Tensor& y, double alpha);

/// Draws row i from Dirichlet(scale * ((1 - alpha) Y_i + alpha * exp(log_beta))).
/// The draw is recorded, so backward reaches log_beta (and Y, if recorded).
ad::Var dirichlet_smooth(ad::Var y_mix, ad::Var log_beta, double alpha, std::uint64_t seed,
                         double concentration_scale = 1.0);
ad::Tensor dirichlet_smooth(const ad::Tensor& y_mix, const DirichletParams& beta, double alpha,
                            Rng& rng, double concentration_scale = 1.0);

/// Test hooks for apply_vicinity.
struct VicinityHooks {
  std::optional<double> lambda;
  double concentration_scale = 1.0;
};

struct VicinalBatch {
  ad::Tensor x;
  ad::Var y;  // recorded on the caller's tape
  double lambda = 0;
};

/// Builds (X~, Y~) for one minibatch. log_beta must be a node of `tape` when the
/// mode learns beta and is ignored otherwise.
VicinalBatch apply_vicinity(ad::Tape& tape, const VicinityMode& mode, const LabeledBatch& batch,
                            const Model& model, ad::Var log_beta, Rng& rng,
                            const VicinityHooks& hooks = {});

}  // namespace sprout
