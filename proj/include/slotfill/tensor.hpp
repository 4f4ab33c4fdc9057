#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace slotfill {

using Shape = std::vector<std::size_t>;

// Dense row-major array of doubles with an optional gradient buffer.
// Copies are shallow: a Tensor is a handle to a shared node, so the same
// parameter can appear in several expressions and accumulate gradient.
// Rank 0 (empty shape) is a scalar holding exactly one value.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor row(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const;
  std::size_t numel() const;
  std::size_t rows() const;  // rank-2 only
  std::size_t cols() const;  // rank-2 only
  bool requires_grad() const;

  std::vector<double>& values();
  const std::vector<double>& values() const;
  std::vector<double>& grad();  // rejects tensors without grad state
  const std::vector<double>& grad() const;
  void zero_grad();

  double item() const;  // numel()==1 only
  double at(std::size_t r, std::size_t c) const;
  double& at(std::size_t r, std::size_t c);

  // Same values, fresh storage, no grad state. Used by checkpointing and
  // best-model snapshots.
  Tensor detached_copy() const;
  void copy_values_from(const Tensor& other);

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // sized iff requires_grad
    bool requires_grad = false;
  };
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

std::string shape_to_string(const Shape& shape);

// Records backward rules for the ops executed while it is alive. Tapes nest
// as a stack; ops record onto the innermost active tape. A tape is confined
// to one thread and is consumed by a single backward() call.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();
  static bool recording() { return active() != nullptr; }

  void record(std::function<void()> backward_rule);
  std::size_t size() const { return records_.size(); }

  // Seeds d(loss)/d(loss)=1 and replays every record once, in reverse.
  // loss must be a one-element tensor with grad state.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> records_;
  Tape* previous_ = nullptr;
  bool consumed_ = false;
};

// ---- differentiable primitives -------------------------------------------
// Every op validates shapes (rejecting with the op name and both shapes),
// computes the forward value, and appends one tape record when a tape is
// active and any input carries grad state.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor add_rowvec(const Tensor& m, const Tensor& row);  // m x k + 1 x k
Tensor add_colvec(const Tensor& m, const Tensor& col);  // m x k + m x 1
Tensor scale(const Tensor& a, double c);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor transpose(const Tensor& m);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor log_sigmoid(const Tensor& a);  // -softplus(-x), never overflows
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor softmax_rows(const Tensor& m);
Tensor log_softmax_rows(const Tensor& m);
Tensor logsumexp_rows(const Tensor& m);  // m x k -> m x 1, shifted by row max
Tensor max_over_rows(const Tensor& m);   // m x k -> 1 x k, ties -> lowest row
Tensor mask_fill(const Tensor& a, const Tensor& mask, double fill);
Tensor slice(const Tensor& m, std::size_t axis, std::size_t begin,
             std::size_t end);
Tensor sum(const Tensor& a);   // -> rank-0 scalar
Tensor mean(const Tensor& a);  // -> rank-0 scalar
Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids);
Tensor reshape(const Tensor& a, Shape new_shape);

// Sum of a buffer in ascending value order. Deterministic and invariant
// under permutation of the inputs; used by every reduction above.
double stable_accumulate(const std::vector<double>& xs);
double stable_accumulate(const double* xs, std::size_t n);

// ---- model parameters and gradient checking -------------------------------

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ModelParams = std::vector<NamedTensor>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  double epsilon = 0.0;
  std::size_t samples = 0;
  std::vector<std::string> failures;  // non-finite losses, named per coordinate

  bool passed(double tolerance) const {
    return failures.empty() && max_rel_error < tolerance;
  }
};

// Central finite differences of loss_fn against the gradients produced by one
// backward pass. loss_fn must build a scalar loss from the live `params`
// tensors on the active tape. Samples coordinates uniformly across all
// parameters; params are left bit-identical to how they were found.
GradCheckResult finite_difference_check(const std::function<Tensor()>& loss_fn,
                                        const ModelParams& params,
                                        double epsilon, std::size_t samples,
                                        std::uint64_t seed);

}  // namespace slotfill
