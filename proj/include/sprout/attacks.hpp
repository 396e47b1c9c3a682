#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sprout/autodiff.hpp"
#include "sprout/checkpoint.hpp"
#include "sprout/data.hpp"
#include "sprout/model.hpp"

namespace sprout {

enum class AttackLoss { cross_entropy, cw_margin };

std::string to_string(AttackLoss l);
AttackLoss parse_attack_loss(const std::string& s);

struct AttackSpec {
  double epsilon = 0.03;
  std::size_t steps = 20;
  std::optional<double> step_size;  // epsilon / 5 when unset
  std::size_t restarts = 1;
  AttackLoss loss = AttackLoss::cross_entropy;
  bool include_zero_start = true;
  std::uint64_t seed = 0;

  double effective_step_size() const { return step_size.value_or(epsilon / 5.0); }
  void validate() const;
};

/// Per-example margins z_y - max_{k != y} z_k.
std::vector<double> cw_margins(const ad::Tensor& logits, const std::vector<std::size_t>& labels);

/// Recorded -mean(max(margin, 0)): ascending it pushes margins below zero.
ad::Var cw_margin_loss(ad::Var logits, const std::vector<std::size_t>& labels);

/// Mean attack loss on a recorded batch.
ad::Var attack_loss(AttackLoss kind, ad::Var logits, const std::vector<std::size_t>& labels);

/// Per-example attack loss values (CE is -log softmax at the true class).
std::vector<double> attack_losses(AttackLoss kind, const ad::Tensor& logits,
                                  const std::vector<std::size_t>& labels);

struct AttackResult {
  ad::Tensor x_adv;
  std::vector<double> loss;       // attack loss of the selected candidate
  std::vector<double> best_loss;  // largest attack loss over all candidates
  std::vector<double> clean_loss;
  std::vector<bool> fooled;       // selected candidate is misclassified
};

/// PGD in the l-infinity ball. Every iterate of every restart is a candidate.
/// Per example the selected candidate is a misclassified one whose loss is at
/// least the clean loss, if any exists, and the largest-loss candidate
/// otherwise; the pick is the largest-loss candidate within its class.
AttackResult pgd_attack(const Model& model, const ad::Tensor& x,
                        const std::vector<std::size_t>& labels, const AttackSpec& spec);

ad::Tensor pgd_linf(const Model& model, const ad::Tensor& x, const std::vector<std::size_t>& labels,
                    const AttackSpec& spec);

/// Adversarial examples crafted on `source`, accuracy measured on `target`.
double transfer_eval(const Model& source, const Model& target, const Dataset& data,
                     const AttackSpec& spec);
double transfer_eval(const Checkpoint& source, const Checkpoint& target, const Dataset& data,
                     const AttackSpec& spec);

}  // namespace sprout
