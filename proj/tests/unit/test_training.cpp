#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "sprout/error.hpp"
#include "sprout/training.hpp"

using namespace sprout;
namespace fs = std::filesystem;

namespace {

TrainConfig small_config(VicinityKind kind) {
  TrainConfig c;
  c.mode.kind = kind;
  c.epochs = 2;
  c.batch_size = 16;
  c.arch = Arch::mlp;
  c.seed = 4;
  c.init = "random";
  c.beta_warmup_epochs = 0;
  return c;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("sgd update") {
  std::vector<ad::Tensor> p{ad::Tensor(ad::Shape{2}, {1.0, 2.0})};
  std::vector<ad::Tensor> g{ad::Tensor(ad::Shape{2}, {0.5, -1.0})};
  std::vector<ad::Tensor> v{ad::Tensor(ad::Shape{2}, 0.0)};
  sgd_update(p, g, v, 0.1, 0.0);
  CHECK(p[0] == ad::Tensor(ad::Shape{2}, {1.0 - 0.1 * 0.5, 2.0 + 0.1 * 1.0}));

  auto before = p;
  sgd_update(p, g, v, 0.0, 0.9);
  CHECK(p == before);

  std::vector<ad::Tensor> w{ad::Tensor(ad::Shape{1}, {0.0})}, vw{ad::Tensor(ad::Shape{1}, 0.0)};
  sgd_update(w, {ad::Tensor(ad::Shape{1}, {1.0})}, vw, 0.1, 0.9);
  const double after_first = w[0][0];
  sgd_update(w, {ad::Tensor(ad::Shape{1}, {0.0})}, vw, 0.1, 0.9);
  sgd_update(w, {ad::Tensor(ad::Shape{1}, {0.0})}, vw, 0.1, 0.9);
  CHECK(w[0][0] < after_first);
  CHECK(w[0][0] == doctest::Approx(-0.1 * (1 + 0.9 + 0.81)).epsilon(1e-14));

  std::vector<ad::Tensor> bad{ad::Tensor(ad::Shape{3})};
  CHECK_THROWS_AS(sgd_update(p, bad, v, 0.1, 0.9), ShapeError);
}

TEST_CASE("natural training separates well-separated blobs") {
  Dataset d = synth_blobs(2, 200, 16, 10.0, 3);
  TrainConfig c = small_config(VicinityKind::natural);
  c.epochs = 5;
  auto r = train(d, c);
  CHECK(r.history.epochs.size() == 5);
  CHECK(r.history.epochs.back().clean_acc >= 0.95);
  for (const auto& e : r.history.epochs) CHECK(e.seconds > 0);
  std::ostringstream csv;
  r.history.write_csv(csv);
  const std::string text = csv.str();
  CHECK(std::count(text.begin(), text.end(), '\n') == 6);
}

TEST_CASE("sprout training is deterministic") {
  Dataset d = synth_blobs(3, 30, 16, 5.0, 3);
  TrainConfig c = small_config(VicinityKind::sprout);
  c.init = "natural";
  c.arch = Arch::cnn;
  c.pool = 0;
  const fs::path dir = fs::temp_directory_path() / "sproutlab-test-training";
  fs::create_directories(dir);
  auto a = train(d, c);
  auto b = train(d, c);
  save_checkpoint(dir / "a.ckpt", a.checkpoint);
  save_checkpoint(dir / "b.ckpt", b.checkpoint);
  CHECK(a.checkpoint.model.params == b.checkpoint.model.params);
  CHECK(a.checkpoint.log_beta == b.checkpoint.log_beta);
  CHECK(a.checkpoint.config == b.checkpoint.config);
  CHECK(file_bytes(dir / "a.ckpt") == file_bytes(dir / "b.ckpt"));
  CHECK(a.checkpoint.seed_lineage == std::vector<std::uint64_t>{4, 4});
  CHECK(a.checkpoint.log_beta.size() == 3);
  CHECK(a.checkpoint.config.at("train.mode") == "sprout");
}

TEST_CASE("adversarial training at zero radius is natural training") {
  Dataset d = synth_blobs(2, 20, 16, 4.0, 5);
  TrainConfig nat = small_config(VicinityKind::natural);
  TrainConfig adv = small_config(VicinityKind::adv_train);
  adv.mode.attack = AttackSpec{.epsilon = 0.0, .steps = 7};
  CHECK(train(d, nat).checkpoint.model.params == train(d, adv).checkpoint.model.params);
}

TEST_CASE("sprout step with a frozen beta") {
  Dataset d = synth_blobs(3, 8, 16, 4.0, 6);
  TrainConfig c = small_config(VicinityKind::sprout);
  const auto batches = minibatch_iter(d, 12, 1, 0);
  TrainState s;
  s.model = build_model(spec_for(d, Arch::mlp), 2);
  for (const auto& p : s.model.params) s.velocity.emplace_back(p.shape(), 0.0);
  Rng rb(3);
  s.beta = DirichletParams::random(3, rb);
  const auto beta0 = s.beta.log_beta;

  // the same step by hand: GA -> Mixup -> Dirichlet, one backward, SGD
  TrainState manual = s;
  Rng r1(7), r2(7);
  sprout_minibatch_step(s, batches[0], c, r1, 0.0);
  CHECK(s.beta.log_beta == beta0);

  ad::Tape t;
  std::vector<ad::Var> vars;
  for (const auto& p : manual.model.params) vars.push_back(t.leaf(p));
  ad::Var lb = t.leaf(ad::Tensor(ad::Shape{3}, beta0));
  auto vb = apply_vicinity(t, c.mode, batches[0], manual.model, lb, r2);
  ad::Var loss = gce_loss(manual.model.forward(t.constant(vb.x), vars), vb.y);
  auto g = t.backward(loss, vars);
  std::vector<ad::Tensor> grads;
  for (const auto& v : vars) grads.push_back(g.at(v.id()));
  sgd_update(manual.model.params, grads, manual.velocity, c.lr_theta, c.momentum);
  CHECK(manual.model.params == s.model.params);

  CHECK_THROWS_AS(sprout_minibatch_step(s, batches[0], small_config(VicinityKind::ga), r1, 0.0),
                  ConfigError);
}

TEST_CASE("beta step ascends the loss") {
  Dataset d = synth_blobs(4, 16, 16, 4.0, 7);
  const auto batch = make_batch(d, std::vector<std::size_t>{0, 5, 9, 17, 22, 30, 41, 50, 63});
  Model m = build_model(spec_for(d, Arch::mlp), 5);
  TrainConfig c = small_config(VicinityKind::sprout);
  c.mode.alpha = 0.3;
  Rng rb(11);
  const DirichletParams beta = DirichletParams::random(4, rb);

  auto loss_at = [&](const std::vector<double>& lb, ad::Tensor* grad) {
    ad::Tape t;
    ad::Var lv = t.leaf(ad::Tensor(ad::Shape{4}, lb));
    Rng rng(13);
    auto vb = apply_vicinity(t, c.mode, batch, m, lv, rng);
    ad::Var loss = gce_loss(m.forward(t.constant(vb.x)), vb.y);
    if (grad) *grad = t.backward(loss, {lv}).at(lv.id());
    return loss.value().item();
  };
  ad::Tensor g;
  const double before = loss_at(beta.log_beta, &g);
  for (double lr : {1e-4, 1e-3}) {
    auto up = beta.log_beta;
    for (std::size_t k = 0; k < 4; ++k) up[k] += lr * g[k];
    CAPTURE(lr);
    CHECK(loss_at(up, nullptr) >= before);
  }
}

TEST_CASE("beta stays in its box over many steps") {
  Dataset d = synth_blobs(2, 4, 4, 4.0, 8);
  TrainConfig c = small_config(VicinityKind::sprout);
  c.lr_beta = 50;
  c.mode.alpha = 0.5;
  TrainState s;
  s.model = build_model(spec_for(d, Arch::mlp), 2);
  for (const auto& p : s.model.params) s.velocity.emplace_back(p.shape(), 0.0);
  s.beta.log_beta = {0.0, 0.0};
  const auto batch = make_batch(d, std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7});
  for (std::size_t i = 0; i < 10000; ++i) {
    Rng rng = Rng::derive(1, {i});
    sprout_minibatch_step(s, batch, c, rng, c.lr_beta);
  }
  for (double l : s.beta.log_beta) {
    CHECK(std::isfinite(l));
    CHECK(std::abs(l) <= kLogBetaBound);
  }
  for (double b : s.beta.beta()) CHECK(b > 0);
}

TEST_CASE("training errors") {
  Dataset d = synth_blobs(2, 20, 16, 4.0, 5);
  TrainConfig c = small_config(VicinityKind::natural);
  c.lr_theta = 1e200;
  try {
    train(d, c);
    FAIL("expected divergence");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("epoch 0") != std::string::npos);
  }
  TrainConfig bad = small_config(VicinityKind::natural);
  bad.epochs = 0;
  CHECK_THROWS_AS(train(d, bad), ConfigError);
  bad = small_config(VicinityKind::trades);
  CHECK_THROWS_AS(train(d, bad), ConfigError);

  Dataset ten = synth_blobs(10, 2, 16, 4.0, 5);
  Checkpoint other = train(ten, small_config(VicinityKind::natural)).checkpoint;
  CHECK_THROWS_AS(train(d, small_config(VicinityKind::natural), &other), DataError);
}

TEST_CASE("epoch-wise trainer matches train") {
  Dataset d = synth_blobs(3, 30, 16, 5.0, 3);
  TrainConfig c = small_config(VicinityKind::sprout);
  c.init = "random";
  TrainResult whole = train(d, c);
  Trainer t(d, c);
  std::size_t epochs = 0;
  while (!t.done()) {
    CHECK(t.run_epoch().epoch == epochs);
    ++epochs;
  }
  CHECK(epochs == c.epochs);
  CHECK_THROWS_AS(t.run_epoch(), ConfigError);
  TrainResult stepped = std::move(t).finish();
  CHECK(stepped.checkpoint.model.params == whole.checkpoint.model.params);
  CHECK(stepped.checkpoint.log_beta == whole.checkpoint.log_beta);
  CHECK(stepped.checkpoint.epoch == whole.checkpoint.epoch);
}
