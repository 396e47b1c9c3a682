#include <doctest.h>

#include <cmath>
#include <functional>

#include "sprout/autodiff.hpp"
#include "sprout/error.hpp"
#include "sprout/rng.hpp"

using namespace sprout;
using namespace sprout::ad;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Independent central-difference oracle, deliberately separate from
// finite_diff_check.
Tensor numeric_grad(const std::function<double(const Tensor&)>& f, Tensor x, double h) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f(x);
    x[i] = keep - h;
    const double fm = f(x);
    x[i] = keep;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

double max_rel(const Tensor& analytic, const Tensor& numeric) {
  double m = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i)
    m = std::max(m, std::abs(analytic[i] - numeric[i]) / std::max(1.0, std::abs(analytic[i])));
  return m;
}

}  // namespace

TEST_CASE("identity matmul returns the right operand") {
  Rng rng(1);
  Tape t;
  Tensor I(Shape{3, 3}, 0.0);
  for (int i = 0; i < 3; ++i) I[i * 4] = 1.0;
  Tensor A = random_tensor({3, 3}, rng);
  Var out = matmul(t.constant(I), t.constant(A));
  CHECK(out.value() == A);
}

TEST_CASE("relu and softmax definitions") {
  Tape t;
  Var r = relu(t.constant(Tensor(Shape{3}, {-1.0, 0.0, 2.0})));
  CHECK(r.value() == Tensor(Shape{3}, {0.0, 0.0, 2.0}));
  Var s = softmax(t.constant(Tensor(Shape{3}, 0.0)));
  for (double v : s.value().data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("gradient of sum of squares") {
  Tape t;
  Var x = t.leaf(Tensor(Shape{1}, {3.0}));
  Var loss = sum(multiply(x, x));
  auto g = t.backward(loss, {x});
  CHECK(g.at(x.id())[0] == 6.0);
}

TEST_CASE("constant subexpressions contribute zero gradient") {
  Tape t;
  Var x = t.leaf(Tensor(Shape{2}, {1.0, 2.0}));
  Var c = t.constant(Tensor(Shape{2}, {5.0, 7.0}));
  Var loss = sum(add(x, exp(c)));
  auto g = t.backward(loss, {x, c});
  CHECK(g.at(x.id()) == Tensor(Shape{2}, 1.0));
  CHECK(g.at(c.id()) == Tensor(Shape{2}, 0.0));
}

TEST_CASE("backward twice on the same record is identical") {
  Rng rng(2);
  Tape t;
  Var x = t.leaf(random_tensor({4, 3}, rng));
  Var w = t.leaf(random_tensor({3, 5}, rng));
  Var loss = mean(log_softmax(matmul(x, w)));
  auto a = t.backward(loss, {x, w});
  auto b = t.backward(loss, {x, w});
  CHECK(a.at(x.id()) == b.at(x.id()));
  CHECK(a.at(w.id()) == b.at(w.id()));
}

TEST_CASE("structured errors") {
  Tape t;
  Var a = t.constant(Tensor(Shape{2, 3}));
  Var b = t.constant(Tensor(Shape{2, 3}));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, t.constant(Tensor(Shape{4}))), ShapeError);
  CHECK_THROWS_AS(log(t.constant(Tensor(Shape{2}, {1.0, 0.0}))), NumericError);
  Var x = t.leaf(Tensor(Shape{2}, 1.0));
  CHECK_THROWS_AS(t.backward(x, {x}), ShapeError);
  Tape other;
  Var foreign = other.leaf(Tensor::scalar(1.0));
  Var loss = sum(x);
  CHECK_THROWS_AS(t.backward(loss, {foreign}), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1.0}), ShapeError);
}

TEST_CASE("conv2d chain matches central differences") {
  // mean(log_softmax(z) * y) through conv2d on a 1x1x4x4 input.
  Rng rng(3);
  const Tensor x0 = random_tensor({1, 1, 4, 4}, rng, 0.0, 1.0);
  const Tensor w0 = random_tensor({2, 1, 3, 3}, rng);
  const Tensor b0 = random_tensor({2}, rng);
  const Tensor d0 = random_tensor({32, 3}, rng);
  Tensor onehot(Shape{1, 3}, {0.0, 1.0, 0.0});

  auto build = [&](Tape& t, Var x, Var w) {
    Var h = conv2d(x, w, t.constant(b0));
    Var z = matmul(reshape(h, {1, 32}), t.constant(d0));
    return mean(multiply(log_softmax(z), t.constant(onehot)));
  };
  Tape t;
  Var x = t.leaf(x0);
  Var w = t.leaf(w0);
  auto g = t.backward(build(t, x, w), {x, w});

  auto fx = [&](const Tensor& xv) {
    Tape tt;
    return build(tt, tt.constant(xv), tt.constant(w0)).value().item();
  };
  auto fw = [&](const Tensor& wv) {
    Tape tt;
    return build(tt, tt.constant(x0), tt.constant(wv)).value().item();
  };
  CHECK(max_rel(g.at(x.id()), numeric_grad(fx, x0, 1e-5)) < 1e-5);
  CHECK(max_rel(g.at(w.id()), numeric_grad(fw, w0, 1e-5)) < 1e-5);
}

TEST_CASE("finite_diff_check basics") {
  Rng rng(4);
  const Tensor x = random_tensor({5}, rng);
  auto r = finite_diff_check([](Tape&, Var v) { return sum(v); }, x);
  CHECK(r.max_rel_error < 1e-10);
  CHECK(r.checked == 5);

  const Tensor kink(Shape{3}, {-0.5, 0.0, 0.7});
  auto k = finite_diff_check([](Tape&, Var v) { return sum(relu(v)); }, kink);
  CHECK(k.excluded == 1);
  CHECK(k.checked == 2);
  CHECK(k.max_rel_error < 1e-8);

  CHECK_THROWS_AS(finite_diff_check([](Tape&, Var v) { return sum(log(v)); },
                                    Tensor(Shape{1}, {1e-6}), 1e-5),
                  NumericError);
}

TEST_CASE("every primitive passes finite differences on 100 random inputs") {
  Rng rng(5);
  const Tensor w = random_tensor({4, 3}, rng);
  const Tensor cw = random_tensor({2, 2, 3, 3}, rng);
  const Tensor cb = random_tensor({2}, rng);
  const Tensor other = random_tensor({2, 4}, rng);
  const Tensor row = random_tensor({4}, rng);
  const std::vector<std::pair<const char*, ScalarFn>> fns = {
      {"add", [&](Tape& t, Var x) { return sum(multiply(add(x, t.constant(row)), x)); }},
      {"subtract", [&](Tape& t, Var x) { return sum(multiply(subtract(t.constant(other), x), x)); }},
      {"multiply", [&](Tape& t, Var x) { return sum(multiply(x, t.constant(other))); }},
      {"scalar_multiply", [](Tape&, Var x) { return sum(multiply(scalar_multiply(x, -2.5), x)); }},
      {"matmul", [&](Tape& t, Var x) { return sum(exp(matmul(x, t.constant(w)))); }},
      {"relu", [](Tape&, Var x) { return sum(multiply(relu(x), x)); }},
      {"log", [](Tape&, Var x) { return sum(log(add(multiply(x, x), exp(x)))); }},
      {"exp", [](Tape&, Var x) { return sum(exp(x)); }},
      {"softmax", [&](Tape& t, Var x) { return sum(multiply(softmax(x), t.constant(other))); }},
      {"log_softmax",
       [&](Tape& t, Var x) { return sum(multiply(log_softmax(x), t.constant(other))); }},
      {"mean", [](Tape&, Var x) { return mean(multiply(x, x)); }},
      {"clip", [](Tape&, Var x) { return sum(multiply(clip(x, -0.5, 0.5), x)); }},
      {"gather", [](Tape&, Var x) { return sum(exp(gather(x, {3, 1}))); }},
      {"conv2d+pool",
       [&](Tape& t, Var x) {
         Var img = reshape(x, {1, 2, 2, 2});
         Var c = conv2d(img, t.constant(cw), t.constant(cb));
         return sum(multiply(avg_pool2d(c, 2), avg_pool2d(c, 2)));
       }},
  };
  for (const auto& [label, fn] : fns) {
    CAPTURE(label);
    double worst = 0;
    for (int rep = 0; rep < 100; ++rep) {
      Tensor x = random_tensor({2, 4}, rng);
      // keep clip and relu inputs off their kinks
      for (double& v : x.data())
        if (std::abs(std::abs(v) - 0.5) < 1e-3 || std::abs(v) < 1e-3) v += 0.01;
      auto r = finite_diff_check(fn, x, 1e-5);
      worst = std::max(worst, r.max_rel_error);
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("forward replay is bit-exact") {
  Rng rng(6);
  Tape t;
  Var x = t.leaf(random_tensor({2, 1, 4, 4}, rng));
  Var w = t.leaf(random_tensor({3, 1, 3, 3}, rng));
  Var b = t.leaf(random_tensor({3}, rng));
  Var h = relu(conv2d(x, w, b));
  Var z = reshape(avg_pool2d(h, 2), {2, 12});
  Var loss = mean(log(clip(softmax(z), 1e-12, 1.0)));
  (void)loss;
  CHECK(t.replay_matches());
}

TEST_CASE("chain rule composes with manual vector-Jacobian products") {
  Rng rng(7);
  const Tensor x0 = random_tensor({3, 4}, rng);
  const Tensor w = random_tensor({4, 5}, rng);
  const Tensor c = random_tensor({3, 5}, rng);
  auto f = [&](Tape& t, Var x) { return relu(matmul(x, t.constant(w))); };
  auto g = [&](Tape& t, Var y) { return sum(multiply(log_softmax(y), t.constant(c))); };

  Tape full;
  Var x = full.leaf(x0);
  const Tensor direct = full.backward(g(full, f(full, x)), {x}).at(x.id());

  Tape tf;
  Var xf = tf.leaf(x0);
  const Tensor y0 = f(tf, xf).value();
  Tape tg;
  Var y = tg.leaf(y0);
  const Tensor gy = tg.backward(g(tg, y), {y}).at(y.id());
  Tape tv;
  Var xv = tv.leaf(x0);
  const Tensor composed =
      tv.backward(sum(multiply(f(tv, xv), tv.constant(gy))), {xv}).at(xv.id());
  for (std::size_t i = 0; i < direct.size(); ++i) CHECK(std::abs(direct[i] - composed[i]) < 1e-12);
}
