#include "sprout/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "sprout/error.hpp"

namespace sprout::ad {

namespace {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

[[noreturn]] void shape_error(Primitive p, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(name(p)) + ": shape mismatch " + to_string(a) + " vs " +
                   to_string(b));
}

[[noreturn]] void shape_error(Primitive p, const std::string& detail) {
  throw ShapeError(std::string(name(p)) + ": " + detail);
}

// Broadcast factor of b onto a: 1 when shapes match, else the number of
// repetitions of b's trailing block inside a.
std::size_t broadcast_repeat(Primitive p, const Shape& a, const Shape& b) {
  if (a == b) return 1;
  if (b.size() > a.size() || b.empty()) shape_error(p, a, b);
  if (!std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size())))
    shape_error(p, a, b);
  return numel(a) / numel(b);
}

void accumulate(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  auto d = dst->data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Reduce a gradient of a's shape back onto a broadcast operand b.
void accumulate_broadcast(Tensor* dst, std::span<const double> g, double sign) {
  if (!dst) return;
  auto d = dst->data();
  const std::size_t block = d.size();
  for (std::size_t i = 0; i < g.size(); ++i) d[i % block] += sign * g[i];
}

// im2col for one image: returns (C*k*k) x (H*W).
void im2col(const double* img, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            double* col) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        double* row = col + ((c * k + ki) * k + kj) * HW;
        const std::ptrdiff_t di = static_cast<std::ptrdiff_t>(ki) - pad;
        const std::ptrdiff_t dj = static_cast<std::ptrdiff_t>(kj) - pad;
        for (std::size_t i = 0; i < H; ++i) {
          const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i) + di;
          double* out = row + i * W;
          if (si < 0 || si >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(out, out + W, 0.0);
            continue;
          }
          const double* src = img + (c * H + static_cast<std::size_t>(si)) * W;
          for (std::size_t j = 0; j < W; ++j) {
            const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j) + dj;
            out[j] = (sj < 0 || sj >= static_cast<std::ptrdiff_t>(W))
                         ? 0.0
                         : src[static_cast<std::size_t>(sj)];
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
                double* img) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const double* row = col + ((c * k + ki) * k + kj) * HW;
        const std::ptrdiff_t di = static_cast<std::ptrdiff_t>(ki) - pad;
        const std::ptrdiff_t dj = static_cast<std::ptrdiff_t>(kj) - pad;
        for (std::size_t i = 0; i < H; ++i) {
          const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i) + di;
          if (si < 0 || si >= static_cast<std::ptrdiff_t>(H)) continue;
          double* dst = img + (c * H + static_cast<std::size_t>(si)) * W;
          const double* in = row + i * W;
          for (std::size_t j = 0; j < W; ++j) {
            const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j) + dj;
            if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(W)) continue;
            dst[static_cast<std::size_t>(sj)] += in[j];
          }
        }
      }
    }
  }
}

std::size_t last_axis(Primitive p, const Tensor& t) {
  if (t.rank() == 0) shape_error(p, "needs at least one axis, got " + to_string(t.shape()));
  return t.shape().back();
}

Tensor softmax_rows(const Tensor& a, bool log_space) {
  const std::size_t K = a.shape().back();
  const std::size_t rows = a.size() / K;
  Tensor out(a.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * K;
    double* y = out.data().data() + r * K;
    const double m = *std::max_element(x, x + K);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(x[k] - m);
    if (log_space) {
      const double ls = std::log(s);
      for (std::size_t k = 0; k < K; ++k) y[k] = x[k] - m - ls;
    } else {
      for (std::size_t k = 0; k < K; ++k) y[k] = std::exp(x[k] - m) / s;
    }
  }
  return out;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {
  for (std::size_t d : shape_)
    if (d == 0) throw ShapeError("tensor: zero extent in shape " + to_string(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  for (std::size_t d : shape_)
    if (d == 0) throw ShapeError("tensor: zero extent in shape " + to_string(shape_));
  if (numel(shape_) != data_.size())
    throw ShapeError("tensor: shape " + to_string(shape_) + " needs " +
                     std::to_string(numel(shape_)) + " values, got " +
                     std::to_string(data_.size()));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item: tensor of shape " + to_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (numel(shape) != data_.size())
    throw ShapeError("reshape: " + to_string(shape_) + " vs " + to_string(shape));
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

std::string_view name(Primitive p) {
  switch (p) {
    case Primitive::leaf: return "leaf";
    case Primitive::constant: return "constant";
    case Primitive::add: return "add";
    case Primitive::subtract: return "subtract";
    case Primitive::multiply: return "multiply";
    case Primitive::scalar_multiply: return "scalar_multiply";
    case Primitive::matmul: return "matmul";
    case Primitive::conv2d: return "conv2d";
    case Primitive::relu: return "relu";
    case Primitive::log: return "log";
    case Primitive::exp: return "exp";
    case Primitive::softmax: return "softmax";
    case Primitive::log_softmax: return "log_softmax";
    case Primitive::sum: return "sum";
    case Primitive::mean: return "mean";
    case Primitive::clip: return "clip";
    case Primitive::gather: return "gather";
    case Primitive::reshape: return "reshape";
    case Primitive::avg_pool2d: return "avg_pool2d";
    case Primitive::custom: return "custom";
  }
  return "unknown";
}

const Tensor& Var::value() const { return tape_->value(id_); }

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{Primitive::leaf, {}, std::move(value), true, nullptr, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{Primitive::constant, {}, std::move(value), false, nullptr, nullptr});
  return Var(this, nodes_.size() - 1);
}

void Tape::check_owned(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size())
    throw ShapeError("tape: variable does not belong to this record");
}

Var Tape::record(Primitive kind, std::vector<Var> inputs, ForwardFn forward,
                 BackwardFn backward) {
  std::vector<std::size_t> ids;
  std::vector<const Tensor*> values;
  bool grad = false;
  for (Var v : inputs) {
    check_owned(v);
    ids.push_back(v.id_);
    values.push_back(&nodes_[v.id_].value);
    grad = grad || nodes_[v.id_].requires_grad;
  }
  Tensor out = forward(values);
  nodes_.push_back(Node{kind, std::move(ids), std::move(out), grad, std::move(forward),
                        std::move(backward)});
  return Var(this, nodes_.size() - 1);
}

GradientMap Tape::backward(Var loss, std::span<const Var> wrt) const {
  check_owned(loss);
  const Node& root = nodes_[loss.id_];
  if (!root.value.shape().empty())
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     to_string(root.value.shape()));
  for (Var v : wrt) {
    if (v.tape_ != this || v.id_ >= nodes_.size())
      throw ShapeError("backward: id " + std::to_string(v.id_) + " is absent from the record");
  }

  std::vector<Tensor> grads(loss.id_ + 1);
  std::vector<bool> has(loss.id_ + 1, false);
  grads[loss.id_] = Tensor::scalar(1.0);
  has[loss.id_] = true;

  std::vector<const Tensor*> in_values;
  std::vector<Tensor*> in_grads;
  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    if (!has[id]) continue;
    const Node& node = nodes_[id];
    if (!node.requires_grad || node.inputs.empty()) continue;
    in_values.clear();
    in_grads.clear();
    for (std::size_t in : node.inputs) {
      in_values.push_back(&nodes_[in].value);
      if (nodes_[in].requires_grad) {
        if (!has[in]) {
          grads[in] = Tensor(nodes_[in].value.shape(), 0.0);
          has[in] = true;
        }
        in_grads.push_back(&grads[in]);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    node.backward(in_values, node.value, grads[id], in_grads);
  }

  GradientMap out;
  for (Var v : wrt) {
    if (v.id_ <= loss.id_ && has[v.id_])
      out.insert_or_assign(v.id_, grads[v.id_]);
    else
      out.insert_or_assign(v.id_, Tensor(nodes_[v.id_].value.shape(), 0.0));
  }
  return out;
}

bool Tape::replay_matches() const {
  std::vector<const Tensor*> values;
  for (const Node& node : nodes_) {
    if (!node.forward) continue;
    values.clear();
    for (std::size_t in : node.inputs) values.push_back(&nodes_[in].value);
    if (!(node.forward(values) == node.value)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// primitives

namespace {

Var binary(Primitive kind, Var a, Var b, double sign_b, bool product) {
  const std::size_t rep = broadcast_repeat(kind, a.shape(), b.shape());
  (void)rep;
  auto forward = [kind, sign_b, product](Tape::Inputs in) {
    const Tensor& x = *in[0];
    const Tensor& y = *in[1];
    Tensor out(x.shape());
    const std::size_t block = y.size();
    auto o = out.data();
    auto xs = x.data();
    auto ys = y.data();
    (void)kind;
    if (product) {
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = xs[i] * ys[i % block];
    } else {
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = xs[i] + sign_b * ys[i % block];
    }
    return out;
  };
  auto backward = [sign_b, product](Tape::Inputs in, const Tensor&, const Tensor& g,
                                    std::span<Tensor* const> gin) {
    const Tensor& x = *in[0];
    const Tensor& y = *in[1];
    const std::size_t block = y.size();
    if (!product) {
      accumulate(gin[0], g);
      accumulate_broadcast(gin[1], g.data(), sign_b);
      return;
    }
    if (gin[0]) {
      auto d = gin[0]->data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * y[i % block];
    }
    if (gin[1]) {
      auto d = gin[1]->data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i % block] += g[i] * x[i];
    }
  };
  return a.tape().record(kind, {a, b}, forward, backward);
}

template <class F, class D>
Var unary(Primitive kind, Var a, F f, D df_from_x_y) {
  auto forward = [f](Tape::Inputs in) {
    const Tensor& x = *in[0];
    Tensor out(x.shape());
    auto o = out.data();
    auto xs = x.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(xs[i]);
    return out;
  };
  auto backward = [df_from_x_y](Tape::Inputs in, const Tensor& y, const Tensor& g,
                                std::span<Tensor* const> gin) {
    if (!gin[0]) return;
    const Tensor& x = *in[0];
    auto d = gin[0]->data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * df_from_x_y(x[i], y[i]);
  };
  return a.tape().record(kind, {a}, forward, backward);
}

}  // namespace

Var add(Var a, Var b) { return binary(Primitive::add, a, b, 1.0, false); }

Var subtract(Var a, Var b) { return binary(Primitive::subtract, a, b, -1.0, false); }

Var multiply(Var a, Var b) { return binary(Primitive::multiply, a, b, 1.0, true); }

Var scalar_multiply(Var a, double c) {
  return unary(
      Primitive::scalar_multiply, a, [c](double x) { return c * x; },
      [c](double, double) { return c; });
}

Var matmul(Var a, Var b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) shape_error(Primitive::matmul, sa, sb);
  auto forward = [](Tape::Inputs in) {
    const Tensor& x = *in[0];
    const Tensor& y = *in[1];
    const auto n = static_cast<Eigen::Index>(x.dim(0));
    const auto k = static_cast<Eigen::Index>(x.dim(1));
    const auto m = static_cast<Eigen::Index>(y.dim(1));
    Tensor out(Shape{x.dim(0), y.dim(1)});
    MatMap(out.data().data(), n, m).noalias() =
        ConstMatMap(x.data().data(), n, k) * ConstMatMap(y.data().data(), k, m);
    return out;
  };
  auto backward = [](Tape::Inputs in, const Tensor&, const Tensor& g,
                     std::span<Tensor* const> gin) {
    const Tensor& x = *in[0];
    const Tensor& y = *in[1];
    const auto n = static_cast<Eigen::Index>(x.dim(0));
    const auto k = static_cast<Eigen::Index>(x.dim(1));
    const auto m = static_cast<Eigen::Index>(y.dim(1));
    ConstMatMap G(g.data().data(), n, m);
    if (gin[0])
      MatMap(gin[0]->data().data(), n, k).noalias() +=
          G * ConstMatMap(y.data().data(), k, m).transpose();
    if (gin[1])
      MatMap(gin[1]->data().data(), k, m).noalias() +=
          ConstMatMap(x.data().data(), n, k).transpose() * G;
  };
  return a.tape().record(Primitive::matmul, {a, b}, forward, backward);
}

Var conv2d(Var x, Var w, Var bias) {
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0)
    shape_error(Primitive::conv2d, sx, sw);
  if (bias.shape() != Shape{sw[0]}) shape_error(Primitive::conv2d, sw, bias.shape());

  auto forward = [](Tape::Inputs in) {
    const Tensor& X = *in[0];
    const Tensor& Wt = *in[1];
    const Tensor& B = *in[2];
    const std::size_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
    const std::size_t O = Wt.dim(0), k = Wt.dim(2);
    const std::size_t HW = H * W, CKK = C * k * k;
    Tensor out(Shape{N, O, H, W});
    std::vector<double> col(CKK * HW);
    ConstMatMap Wm(Wt.data().data(), static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(CKK));
    for (std::size_t n = 0; n < N; ++n) {
      im2col(X.data().data() + n * C * HW, C, H, W, k, col.data());
      MatMap Y(out.data().data() + n * O * HW, static_cast<Eigen::Index>(O),
               static_cast<Eigen::Index>(HW));
      Y.noalias() = Wm * ConstMatMap(col.data(), static_cast<Eigen::Index>(CKK),
                                     static_cast<Eigen::Index>(HW));
      for (std::size_t o = 0; o < O; ++o) Y.row(static_cast<Eigen::Index>(o)).array() += B[o];
    }
    return out;
  };
  auto backward = [](Tape::Inputs in, const Tensor&, const Tensor& g,
                     std::span<Tensor* const> gin) {
    const Tensor& X = *in[0];
    const Tensor& Wt = *in[1];
    const std::size_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
    const std::size_t O = Wt.dim(0), k = Wt.dim(2);
    const std::size_t HW = H * W, CKK = C * k * k;
    const auto eO = static_cast<Eigen::Index>(O);
    const auto eHW = static_cast<Eigen::Index>(HW);
    const auto eCKK = static_cast<Eigen::Index>(CKK);
    std::vector<double> col(CKK * HW);
    ConstMatMap Wm(Wt.data().data(), eO, eCKK);
    for (std::size_t n = 0; n < N; ++n) {
      ConstMatMap G(g.data().data() + n * O * HW, eO, eHW);
      if (gin[2]) {
        auto d = gin[2]->data();
        const double* gp = g.data().data() + n * O * HW;
        for (std::size_t o = 0; o < O; ++o) {
          double acc = 0.0;
          for (std::size_t j = 0; j < HW; ++j) acc += gp[o * HW + j];
          d[o] += acc;
        }
      }
      if (gin[1]) {
        im2col(X.data().data() + n * C * HW, C, H, W, k, col.data());
        MatMap(gin[1]->data().data(), eO, eCKK).noalias() +=
            G * ConstMatMap(col.data(), eCKK, eHW).transpose();
      }
      if (gin[0]) {
        MatMap(col.data(), eCKK, eHW).noalias() = Wm.transpose() * G;
        col2im_add(col.data(), C, H, W, k, gin[0]->data().data() + n * C * HW);
      }
    }
  };
  return x.tape().record(Primitive::conv2d, {x, w, bias}, forward, backward);
}

Var relu(Var a) {
  // Subgradient 0 at exactly 0.
  return unary(
      Primitive::relu, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var log(Var a) {
  for (double v : a.value().data())
    if (!(v > 0.0))
      throw NumericError("log: non-positive input " + std::to_string(v) +
                         " (clamp probabilities first)");
  return unary(
      Primitive::log, a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Var exp(Var a) {
  return unary(
      Primitive::exp, a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Var softmax(Var a) {
  last_axis(Primitive::softmax, a.value());
  auto forward = [](Tape::Inputs in) { return softmax_rows(*in[0], false); };
  auto backward = [](Tape::Inputs, const Tensor& y, const Tensor& g,
                     std::span<Tensor* const> gin) {
    if (!gin[0]) return;
    const std::size_t K = y.shape().back();
    const std::size_t rows = y.size() / K;
    auto d = gin[0]->data();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t k = 0; k < K; ++k) dot += g[r * K + k] * y[r * K + k];
      for (std::size_t k = 0; k < K; ++k) d[r * K + k] += y[r * K + k] * (g[r * K + k] - dot);
    }
  };
  return a.tape().record(Primitive::softmax, {a}, forward, backward);
}

Var log_softmax(Var a) {
  last_axis(Primitive::log_softmax, a.value());
  auto forward = [](Tape::Inputs in) { return softmax_rows(*in[0], true); };
  auto backward = [](Tape::Inputs, const Tensor& y, const Tensor& g,
                     std::span<Tensor* const> gin) {
    if (!gin[0]) return;
    const std::size_t K = y.shape().back();
    const std::size_t rows = y.size() / K;
    auto d = gin[0]->data();
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t k = 0; k < K; ++k) gs += g[r * K + k];
      for (std::size_t k = 0; k < K; ++k)
        d[r * K + k] += g[r * K + k] - std::exp(y[r * K + k]) * gs;
    }
  };
  return a.tape().record(Primitive::log_softmax, {a}, forward, backward);
}

Var sum(Var a) {
  auto forward = [](Tape::Inputs in) {
    double s = 0.0;
    for (double v : in[0]->data()) s += v;
    return Tensor::scalar(s);
  };
  auto backward = [](Tape::Inputs, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
    if (!gin[0]) return;
    const double gv = g.item();
    for (double& d : gin[0]->data()) d += gv;
  };
  return a.tape().record(Primitive::sum, {a}, forward, backward);
}

Var mean(Var a) {
  auto forward = [](Tape::Inputs in) {
    double s = 0.0;
    for (double v : in[0]->data()) s += v;
    return Tensor::scalar(s / static_cast<double>(in[0]->size()));
  };
  auto backward = [](Tape::Inputs in, const Tensor&, const Tensor& g,
                     std::span<Tensor* const> gin) {
    if (!gin[0]) return;
    const double gv = g.item() / static_cast<double>(in[0]->size());
    for (double& d : gin[0]->data()) d += gv;
  };
  return a.tape().record(Primitive::mean, {a}, forward, backward);
}

Var clip(Var a, double lo, double hi) {
  if (!(lo <= hi)) shape_error(Primitive::clip, "empty interval");
  return unary(
      Primitive::clip, a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var gather(Var a, std::vector<std::size_t> index) {
  const Shape& s = a.shape();
  if (s.size() != 2 || index.size() != s[0])
    shape_error(Primitive::gather, s, Shape{index.size()});
  for (std::size_t i : index)
    if (i >= s[1]) shape_error(Primitive::gather, "index " + std::to_string(i) + " out of range");
  auto forward = [index](Tape::Inputs in) {
    const Tensor& x = *in[0];
    const std::size_t K = x.dim(1);
    Tensor out(Shape{index.size()});
    for (std::size_t i = 0; i < index.size(); ++i) out[i] = x[i * K + index[i]];
    return out;
  };
  auto backward = [index](Tape::Inputs in, const Tensor&, const Tensor& g,
                          std::span<Tensor* const> gin) {
    if (!gin[0]) return;
    const std::size_t K = in[0]->dim(1);
    auto d = gin[0]->data();
    for (std::size_t i = 0; i < index.size(); ++i) d[i * K + index[i]] += g[i];
  };
  return a.tape().record(Primitive::gather, {a}, forward, backward);
}

Var reshape(Var a, Shape shape) {
  if (numel(shape) != a.value().size()) shape_error(Primitive::reshape, a.shape(), shape);
  auto forward = [shape](Tape::Inputs in) { return in[0]->reshaped(shape); };
  auto backward = [](Tape::Inputs, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
    if (!gin[0]) return;
    auto d = gin[0]->data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
  };
  return a.tape().record(Primitive::reshape, {a}, forward, backward);
}

Var avg_pool2d(Var a, std::size_t window) {
  const Shape& s = a.shape();
  if (s.size() != 4) shape_error(Primitive::avg_pool2d, "expects N x C x H x W, got " + to_string(s));
  const std::size_t ph = window == 0 ? s[2] : window;
  const std::size_t pw = window == 0 ? s[3] : window;
  if (s[2] % ph != 0 || s[3] % pw != 0)
    shape_error(Primitive::avg_pool2d,
                "window " + std::to_string(window) + " does not tile " + to_string(s));
  auto forward = [ph, pw](Tape::Inputs in) {
    const Tensor& x = *in[0];
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t OH = H / ph, OW = W / pw;
    Tensor out(Shape{N, C, OH, OW});
    const double scale = 1.0 / static_cast<double>(ph * pw);
    for (std::size_t p = 0; p < N * C; ++p) {
      const double* src = x.data().data() + p * H * W;
      double* dst = out.data().data() + p * OH * OW;
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) dst[(i / ph) * OW + j / pw] += src[i * W + j];
      for (std::size_t q = 0; q < OH * OW; ++q) dst[q] *= scale;
    }
    return out;
  };
  auto backward = [ph, pw](Tape::Inputs in, const Tensor&, const Tensor& g,
                           std::span<Tensor* const> gin) {
    if (!gin[0]) return;
    const Tensor& x = *in[0];
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t OH = H / ph, OW = W / pw;
    const double scale = 1.0 / static_cast<double>(ph * pw);
    for (std::size_t p = 0; p < N * C; ++p) {
      double* dst = gin[0]->data().data() + p * H * W;
      const double* src = g.data().data() + p * OH * OW;
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) dst[i * W + j] += scale * src[(i / ph) * OW + j / pw];
    }
  };
  return a.tape().record(Primitive::avg_pool2d, {a}, forward, backward);
}

// ---------------------------------------------------------------------------

GradCheck finite_diff_check(const ScalarFn& f, const Tensor& x, double h) {
  auto eval = [&f](const Tensor& at) {
    Tape tape;
    Var v = tape.constant(at);
    const double r = f(tape, v).value().item();
    if (!std::isfinite(r)) throw NumericError("finite_diff_check: non-finite function value");
    return r;
  };

  Tape tape;
  Var xv = tape.leaf(x);
  Var out = f(tape, xv);
  const double f0 = out.value().item();
  if (!std::isfinite(f0)) throw NumericError("finite_diff_check: non-finite function value");
  const Tensor analytic = tape.backward(out, {xv}).at(xv.id());

  GradCheck result;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double fp = eval(probe);
    probe[i] = x[i] - h;
    const double fm = eval(probe);
    probe[i] = x[i];
    const double central = (fp - fm) / (2.0 * h);
    const double fwd = (fp - f0) / h;
    const double bwd = (f0 - fm) / h;
    if (std::abs(fwd - bwd) > 1e-3 * std::max(1.0, std::abs(central))) {
      ++result.excluded;
      continue;
    }
    const double err = std::abs(analytic[i] - central) / std::max(1.0, std::abs(analytic[i]));
    result.max_rel_error = std::max(result.max_rel_error, err);
    ++result.checked;
  }
  return result;
}

}  // namespace sprout::ad
