#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "sprout/attacks.hpp"
#include "sprout/error.hpp"
#include "sprout/rng.hpp"

using namespace sprout;

namespace {

struct Fixture {
  Dataset data = synth_blobs(3, 20, 16, 3.0, 4);
  Model model = build_model(spec_for(data, Arch::cnn, 1, 0), 2);
};

double max_dev(const ad::Tensor& a, const ad::Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("margin loss arithmetic") {
  const ad::Tensor z(ad::Shape{1, 2}, {5.0, 1.0});
  CHECK(cw_margins(z, {0}) == std::vector<double>{4.0});
  ad::Tape t;
  CHECK(cw_margin_loss(t.constant(z), {0}).value().item() == -4.0);
  const ad::Tensor tie(ad::Shape{1, 3}, {2.0, 2.0, 2.0});
  CHECK(cw_margins(tie, {1}) == std::vector<double>{0.0});
  const ad::Tensor wrong(ad::Shape{1, 3}, {1.0, 3.0, 0.0});
  CHECK(cw_margins(wrong, {0}) == std::vector<double>{-2.0});
  CHECK(cw_margin_loss(t.constant(wrong), {0}).value().item() == 0.0);
  CHECK_THROWS_AS(cw_margins(ad::Tensor(ad::Shape{1, 1}), {0}), ShapeError);
}

TEST_CASE("attack losses pass finite differences") {
  Rng rng(1);
  const std::vector<std::size_t> y{0, 2, 1, 1};
  for (auto kind : {AttackLoss::cross_entropy, AttackLoss::cw_margin}) {
    auto f = [&](ad::Tape&, ad::Var z) { return attack_loss(kind, z, y); };
    double worst = 0;
    for (int rep = 0; rep < 100; ++rep) {
      ad::Tensor z(ad::Shape{4, 3});
      for (double& v : z.data()) v = rng.uniform(-2, 2);
      worst = std::max(worst, ad::finite_diff_check(f, z).max_rel_error);
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("PGD degenerate cases") {
  Fixture f;
  AttackSpec none{.epsilon = 0.1, .steps = 0, .restarts = 1, .include_zero_start = true};
  CHECK(pgd_linf(f.model, f.data.images, f.data.labels, none) == f.data.images);
  AttackSpec zero{.epsilon = 0.0, .steps = 10, .restarts = 3, .include_zero_start = false};
  CHECK(pgd_linf(f.model, f.data.images, f.data.labels, zero) == f.data.images);
  CHECK(AttackSpec{.epsilon = 0.03}.effective_step_size() == doctest::Approx(0.006).epsilon(1e-15));
  CHECK_THROWS_AS((AttackSpec{.epsilon = -1}.validate()), ConfigError);
  CHECK_THROWS_AS((AttackSpec{.restarts = 0}.validate()), ConfigError);
}

TEST_CASE("PGD contracts") {
  Fixture f;
  for (auto loss : {AttackLoss::cross_entropy, AttackLoss::cw_margin}) {
    AttackSpec spec{.epsilon = 0.2, .steps = 10, .restarts = 2, .loss = loss, .seed = 9};
    auto r = pgd_attack(f.model, f.data.images, f.data.labels, spec);
    CHECK(max_dev(r.x_adv, f.data.images) <= 0.2 + 1e-12);
    for (double v : r.x_adv.data()) CHECK((v >= 0 && v <= 1));
    for (std::size_t i = 0; i < r.loss.size(); ++i) {
      CHECK(r.loss[i] >= r.clean_loss[i]);
      CHECK(r.best_loss[i] >= r.loss[i]);
    }
    auto again = pgd_attack(f.model, f.data.images, f.data.labels, spec);
    CHECK(again.x_adv == r.x_adv);
  }
}

TEST_CASE("more restarts and more steps never weaken the attack") {
  Fixture f;
  AttackSpec spec{.epsilon = 0.15, .steps = 5, .restarts = 1, .include_zero_start = true, .seed = 3};
  auto base = pgd_attack(f.model, f.data.images, f.data.labels, spec);
  spec.restarts = 4;
  auto more = pgd_attack(f.model, f.data.images, f.data.labels, spec);
  spec.restarts = 1;
  spec.steps = 12;
  auto longer = pgd_attack(f.model, f.data.images, f.data.labels, spec);
  for (std::size_t i = 0; i < base.loss.size(); ++i) {
    CHECK(more.best_loss[i] >= base.best_loss[i]);
    CHECK(longer.best_loss[i] >= base.best_loss[i]);
    if (base.fooled[i]) {
      CHECK(more.fooled[i]);
      CHECK(longer.fooled[i]);
    }
  }
}

TEST_CASE("transfer harness") {
  Fixture f;
  Model other = build_model(f.model.spec, 7);
  AttackSpec spec{.epsilon = 0.2, .steps = 5, .seed = 1};
  const auto adv = pgd_linf(f.model, f.data.images, f.data.labels, spec);
  const auto pred = f.model.predict(adv);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == f.data.labels[i];
  CHECK(transfer_eval(f.model, f.model, f.data, spec) == static_cast<double>(hit) / pred.size());

  spec.epsilon = 0;
  const auto clean = other.predict(f.data.images);
  hit = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) hit += clean[i] == f.data.labels[i];
  CHECK(transfer_eval(f.model, other, f.data, spec) == static_cast<double>(hit) / clean.size());

  Dataset two = synth_blobs(2, 5, 16, 3.0, 1);
  CHECK_THROWS_AS(transfer_eval(f.model, other, two, spec), DataError);
}
