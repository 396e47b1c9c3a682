#include "sprout/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "sprout/error.hpp"

namespace sprout {

namespace {

constexpr std::uint64_t kBatchStream = 0x62617463;  // "batc"
constexpr std::uint64_t kBetaStream = 0x62657461;   // "beta"

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

double monitor_accuracy(const Model& m, const Dataset& data, std::size_t limit) {
  const Dataset head = data.head(std::min(limit, data.size()));
  const auto pred = m.predict(head.images);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == head.labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

}  // namespace

void TrainConfig::validate() const {
  mode.validate();
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(lr_theta > 0)) throw ConfigError("train.lr_theta must be > 0");
  if (mode.learns_beta() && !(lr_beta >= 0)) throw ConfigError("train.lr_beta must be >= 0");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train.momentum must be in [0, 1)");
  if (width_factor < 1) throw ConfigError("model.width must be >= 1");
}

std::map<std::string, std::string> TrainConfig::describe() const {
  std::map<std::string, std::string> m = {
      {"train.mode", to_string(mode.kind)},
      {"train.alpha", fmt(mode.alpha)},
      {"train.a", fmt(mode.a)},
      {"train.delta", fmt(mode.delta)},
      {"train.epochs", std::to_string(epochs)},
      {"train.batch_size", std::to_string(batch_size)},
      {"train.lr_theta", fmt(lr_theta)},
      {"train.lr_beta", fmt(lr_beta)},
      {"train.beta_warmup", std::to_string(beta_warmup_epochs)},
      {"train.momentum", fmt(momentum)},
      {"train.seed", std::to_string(seed)},
      {"train.init", init},
      {"model.arch", to_string(arch)},
      {"model.width", std::to_string(width_factor)},
      {"model.pool", std::to_string(pool)},
  };
  if (mode.kind == VicinityKind::sprout) {
    m["train.gaussian"] = mode.stages.gaussian ? "true" : "false";
    m["train.mixup"] = mode.stages.mixup ? "true" : "false";
    m["train.dirichlet"] = mode.stages.dirichlet ? "true" : "false";
  }
  if (mode.attack) {
    const AttackSpec& a = *mode.attack;
    m["train.attack.epsilon"] = fmt(a.epsilon);
    m["train.attack.steps"] = std::to_string(a.steps);
    m["train.attack.step_size"] = fmt(a.effective_step_size());
    m["train.attack.restarts"] = std::to_string(a.restarts);
    m["train.attack.loss"] = to_string(a.loss);
  }
  return m;
}

void TrainHistory::write_csv(std::ostream& out) const {
  const std::size_t K = epochs.empty() ? 0 : epochs.front().beta.size();
  out << "epoch,loss,clean_acc,seconds";
  for (std::size_t k = 0; k < K; ++k) out << ",beta_" << k;
  out << '\n';
  for (const auto& e : epochs) {
    out << e.epoch << ',' << fmt(e.loss) << ',' << fmt(e.clean_acc) << ',' << fmt(e.seconds);
    for (double b : e.beta) out << ',' << fmt(b);
    out << '\n';
  }
}

void TrainHistory::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  write_csv(out);
}

double TrainHistory::total_seconds() const {
  double s = 0;
  for (const auto& e : epochs) s += e.seconds;
  return s;
}

void sgd_update(std::vector<ad::Tensor>& params, const std::vector<ad::Tensor>& grads,
                std::vector<ad::Tensor>& velocity, double lr, double momentum) {
  if (grads.size() != params.size() || velocity.size() != params.size())
    throw ShapeError("sgd_update: " + std::to_string(params.size()) + " params, " +
                     std::to_string(grads.size()) + " grads, " + std::to_string(velocity.size()) +
                     " buffers");
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (grads[p].shape() != params[p].shape() || velocity[p].shape() != params[p].shape())
      throw ShapeError("sgd_update: parameter " + ad::to_string(params[p].shape()) + " vs grad " +
                       ad::to_string(grads[p].shape()));
    auto w = params[p].data();
    auto v = velocity[p].data();
    auto g = grads[p].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum * v[i] + g[i];
      w[i] -= lr * v[i];
    }
  }
}

double train_step(TrainState& state, const LabeledBatch& batch, const TrainConfig& config,
                  Rng& rng, double lr_beta_now, const VicinityHooks& hooks) {
  const VicinityMode& mode = config.mode;
  ad::Tape tape;
  std::vector<ad::Var> vars;
  vars.reserve(state.model.params.size() + 1);
  for (const auto& p : state.model.params) vars.push_back(tape.leaf(p));
  ad::Var log_beta;
  if (mode.learns_beta())
    log_beta = tape.leaf(ad::Tensor(ad::Shape{state.beta.size()}, state.beta.log_beta));

  VicinalBatch vb = apply_vicinity(tape, mode, batch, state.model, log_beta, rng, hooks);
  ad::Var loss = gce_loss(state.model.forward(tape.constant(std::move(vb.x)), vars), vb.y);
  const double value = loss.value().item();
  if (!std::isfinite(value)) throw NumericError("non-finite training loss");

  std::vector<ad::Var> wrt = vars;
  if (log_beta.valid()) wrt.push_back(log_beta);
  ad::GradientMap g = tape.backward(loss, wrt);
  std::vector<ad::Tensor> grads;
  grads.reserve(vars.size());
  for (const auto& v : vars) grads.push_back(std::move(g.at(v.id())));
  sgd_update(state.model.params, grads, state.velocity, config.lr_theta, config.momentum);

  if (log_beta.valid() && lr_beta_now > 0) {
    const ad::Tensor& gb = g.at(log_beta.id());
    for (std::size_t k = 0; k < state.beta.size(); ++k) {
      if (!std::isfinite(gb[k])) throw NumericError("non-finite beta gradient at k=" + std::to_string(k));
      state.beta.log_beta[k] += lr_beta_now * gb[k];
    }
    state.beta.clamp();
  }
  return value;
}

double sprout_minibatch_step(TrainState& state, const LabeledBatch& batch,
                             const TrainConfig& config, Rng& rng, double lr_beta_now) {
  if (config.mode.kind != VicinityKind::sprout)
    throw ConfigError("sprout_minibatch_step: mode is " + to_string(config.mode.kind));
  return train_step(state, batch, config, rng, lr_beta_now);
}

Trainer::Trainer(const Dataset& data, const TrainConfig& config, const Checkpoint* init)
    : data_(data), config_(config) {
  config.validate();
  data.validate();
  const ModelSpec spec = spec_for(data, config.arch, config.width_factor, config.pool);

  std::string init_kind = config.init;
  if (init_kind == "auto") init_kind = config.mode.kind == VicinityKind::sprout ? "natural" : "random";

  Checkpoint loaded;
  if (!init && init_kind != "random" && init_kind != "natural") {
    loaded = load_checkpoint(init_kind);
    init = &loaded;
  }
  if (init) {
    if (!(init->model.spec == spec))
      throw DataError("initial checkpoint spec does not match the configured model");
    state_.model = init->model;
    lineage_ = init->seed_lineage;
  } else if (init_kind == "natural") {
    TrainConfig pre = config;
    pre.mode = VicinityMode{};
    pre.mode.kind = VicinityKind::natural;
    pre.init = "random";
    TrainResult base = train(data, pre);
    state_.model = std::move(base.checkpoint.model);
    lineage_ = base.checkpoint.seed_lineage;
  } else {
    state_.model = build_model(spec, config.seed);
  }
  lineage_.push_back(config.seed);

  for (const auto& p : state_.model.params) state_.velocity.emplace_back(p.shape(), 0.0);
  if (config.mode.learns_beta()) {
    if (init && init->log_beta.size() == spec.num_classes) {
      state_.beta.log_beta = init->log_beta;
    } else {
      Rng rb = Rng::derive(config.seed, {kBetaStream});
      state_.beta = DirichletParams::random(spec.num_classes, rb);
    }
  }
}

bool Trainer::done() const { return history_.epochs.size() >= config_.epochs; }

const EpochRecord& Trainer::run_epoch() {
  if (done()) throw ConfigError("run_epoch: all " + std::to_string(config_.epochs) + " epochs have run");
  const std::size_t epoch = history_.epochs.size();
  const std::size_t per_epoch = (data_.size() + config_.batch_size - 1) / config_.batch_size;
  const double warm_steps = static_cast<double>(config_.beta_warmup_epochs * per_epoch);
  const auto t0 = std::chrono::steady_clock::now();
  const auto batches = epoch_batches(data_.size(), config_.batch_size, config_.seed, epoch);
  double loss_sum = 0;
  for (std::size_t b = 0; b < batches.size(); ++b, ++step_) {
    const LabeledBatch batch = make_batch(data_, batches[b]);
    Rng rng = Rng::derive(config_.seed, {kBatchStream, epoch, b});
    const double ramp = warm_steps > 0 ? std::min(1.0, static_cast<double>(step_ + 1) / warm_steps) : 1.0;
    try {
      loss_sum += train_step(state_, batch, config_, rng, config_.lr_beta * ramp) *
                  static_cast<double>(batch.labels.size());
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(b) + ")");
    }
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EpochRecord rec;
  rec.epoch = epoch;
  rec.loss = loss_sum / static_cast<double>(data_.size());
  rec.seconds = seconds;
  rec.clean_acc = monitor_accuracy(state_.model, data_, config_.monitor_examples);
  rec.beta = state_.beta.beta();
  history_.epochs.push_back(std::move(rec));
  return history_.epochs.back();
}

TrainResult Trainer::finish() && {
  TrainResult result;
  const std::size_t epochs = history_.epochs.size();
  result.history = std::move(history_);
  Checkpoint& ck = result.checkpoint;
  ck.model = std::move(state_.model);
  ck.log_beta = state_.beta.log_beta;
  ck.config = config_.describe();
  ck.config["dataset.name"] = data_.name;
  ck.config["dataset.size"] = std::to_string(data_.size());
  ck.epoch = epochs;
  ck.seed = config_.seed;
  ck.seed_lineage = std::move(lineage_);
  return result;
}

TrainResult train(const Dataset& data, const TrainConfig& config, const Checkpoint* init) {
  Trainer t(data, config, init);
  while (!t.done()) t.run_epoch();
  return std::move(t).finish();
}

}  // namespace sprout
