#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "sprout/checkpoint.hpp"
#include "sprout/data.hpp"
#include "sprout/dirichlet.hpp"
#include "sprout/model.hpp"
#include "sprout/vicinity.hpp"

namespace sprout {

struct TrainConfig {
  VicinityMode mode;
  std::size_t epochs = 10;
  std::size_t batch_size = 128;
  double lr_theta = 0.05;
  double lr_beta = 0.1;
  std::size_t beta_warmup_epochs = 10;  // linear ramp of the beta step
  double momentum = 0.9;
  std::uint64_t seed = 0;
  /// "auto" (natural pre-training for sprout, random otherwise), "random",
  /// "natural" or a checkpoint path.
  std::string init = "auto";
  Arch arch = Arch::cnn;
  std::size_t width_factor = 1;
  std::size_t pool = 4;
  /// Up to this many training examples are scored for the per-epoch clean accuracy.
  std::size_t monitor_examples = 1000;

  void validate() const;
  /// Flat key/value snapshot stored in checkpoints.
  std::map<std::string, std::string> describe() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0;
  double clean_acc = 0;
  double seconds = 0;
  std::vector<double> beta;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;

  void write_csv(std::ostream& out) const;
  void write_csv(const std::filesystem::path& path) const;
  double total_seconds() const;
};

struct TrainResult {
  Checkpoint checkpoint;
  TrainHistory history;
};

/// Classical momentum: v <- mu v + g; p <- p - lr v.
void sgd_update(std::vector<ad::Tensor>& params, const std::vector<ad::Tensor>& grads,
                std::vector<ad::Tensor>& velocity, double lr, double momentum);

/// Mutable state of one training run.
struct TrainState {
  Model model;
  std::vector<ad::Tensor> velocity;
  DirichletParams beta;
};

/// One optimizer step on a minibatch for any mode: build the vicinal batch,
/// take a single backward pass for theta and log beta, descend theta and (when
/// the mode learns beta) ascend log beta by lr_beta_now. Returns the loss.
double train_step(TrainState& state, const LabeledBatch& batch, const TrainConfig& config,
                  Rng& rng, double lr_beta_now, const VicinityHooks& hooks = {});

/// The SPROUT form of train_step: config.mode.kind must be sprout.
double sprout_minibatch_step(TrainState& state, const LabeledBatch& batch,
                             const TrainConfig& config, Rng& rng, double lr_beta_now);

/// Epoch-at-a-time training. The constructor does the initialization of
/// train(), natural pre-training included.
class Trainer {
 public:
  Trainer(const Dataset& data, const TrainConfig& config, const Checkpoint* init = nullptr);

  bool done() const;
  const EpochRecord& run_epoch();
  TrainResult finish() &&;

 private:
  const Dataset& data_;
  TrainConfig config_;
  TrainState state_;
  std::vector<std::uint64_t> lineage_;
  TrainHistory history_;
  std::size_t step_ = 0;
};

/// Runs the configured training. `init` overrides config.init with an
/// already-loaded starting point.
TrainResult train(const Dataset& data, const TrainConfig& config, const Checkpoint* init = nullptr);

}  // namespace sprout
