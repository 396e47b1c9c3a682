#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <new>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sprout::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Cache-line aligned allocator. Every tensor buffer starts on the same
/// alignment, so vectorized kernels take the same code path on every run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

/// Dense row-major array of doubles. A Tensor is a plain value: it carries no
/// link to any computation record.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Value of a single-element tensor.
  double item() const;

  Tensor reshaped(Shape shape) const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  Storage data_;
};

enum class Primitive {
  leaf,
  constant,
  add,
  subtract,
  multiply,
  scalar_multiply,
  matmul,
  conv2d,
  relu,
  log,
  exp,
  softmax,
  log_softmax,
  sum,
  mean,
  clip,
  gather,
  reshape,
  avg_pool2d,
  custom,
};

std::string_view name(Primitive p);

class Tape;

/// Handle to a node of a Tape.
class Var {
 public:
  Var() = default;

  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using GradientMap = std::map<std::size_t, Tensor>;

/// Computation record for reverse-mode differentiation. Nodes are appended in
/// evaluation order.
/// A Tape belongs to one thread.
class Tape {
 public:
  using Inputs = std::span<const Tensor* const>;
  using ForwardFn = std::function<Tensor(Inputs)>;
  /// Accumulates into grad_in[i] for every input whose slot is non-null.
  using BackwardFn = std::function<void(Inputs inputs, const Tensor& output, const Tensor& grad_out,
                                        std::span<Tensor* const> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  Var constant(Tensor value);

  Var record(Primitive kind, std::vector<Var> inputs, ForwardFn forward, BackwardFn backward);

  GradientMap backward(Var loss, std::span<const Var> wrt) const;
  GradientMap backward(Var loss, std::initializer_list<Var> wrt) const {
    return backward(loss, std::span<const Var>(wrt.begin(), wrt.size()));
  }

  /// Re-evaluates every recorded primitive from its stored inputs and returns
  /// true when all outputs are reproduced bit-exactly.
  bool replay_matches() const;

  std::size_t size() const { return nodes_.size(); }
  Primitive kind(std::size_t id) const { return nodes_.at(id).kind; }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

 private:
  struct Node {
    Primitive kind;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool requires_grad;
    ForwardFn forward;
    BackwardFn backward;
  };

  void check_owned(Var v) const;

  std::deque<Node> nodes_;
};

// Primitive operations. Binary elementwise ops accept either equal shapes or a
// right operand whose shape equals the trailing dimensions of the left one.
Var add(Var a, Var b);
Var subtract(Var a, Var b);
Var multiply(Var a, Var b);
Var scalar_multiply(Var a, double c);
Var matmul(Var a, Var b);
/// x: N x C x H x W, w: O x C x k x k (k odd), bias: O. Stride 1, zero padding k/2.
Var conv2d(Var x, Var w, Var bias);
Var relu(Var a);
Var log(Var a);
Var exp(Var a);
Var softmax(Var a);
Var log_softmax(Var a);
Var sum(Var a);
Var mean(Var a);
Var clip(Var a, double lo, double hi);
/// out[i] = a[i, index[i]] for a of shape N x K.
Var gather(Var a, std::vector<std::size_t> index);
Var reshape(Var a, Shape shape);
/// Non-overlapping mean pooling with a square window; window 0 pools the whole plane.
Var avg_pool2d(Var a, std::size_t window);

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;  // coordinates sitting on a kink
};

using ScalarFn = std::function<Var(Tape&, Var)>;

/// Compares reverse-mode gradients of f at x with central differences of step
/// h. Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
/// Coordinates where the one-sided differences disagree are treated as kinks
/// and skipped.
GradCheck finite_diff_check(const ScalarFn& f, const Tensor& x, double h = 1e-5);

}  // namespace sprout::ad
