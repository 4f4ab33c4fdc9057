#include "slotfill/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "slotfill/rng.hpp"

namespace slotfill {

namespace {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

[[noreturn]] void fail(const std::string& op, const std::string& what) {
  throw std::invalid_argument(op + ": " + what);
}

void require(bool ok, const std::string& op, const std::string& what) {
  if (!ok) fail(op, what);
}

std::string two_shapes(const Shape& a, const Shape& b) {
  return shape_to_string(a) + " vs " + shape_to_string(b);
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  if (shape.empty()) return "scalar";
  std::ostringstream os;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values.assign(shape_numel(node->shape), value);
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(node->values.size(), 0.0);
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    fail("Tensor::from", "value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_to_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(node->values.size(), 0.0);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

Tensor Tensor::row(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return from({1, n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows,
                      bool requires_grad) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) fail("Tensor::matrix", "ragged initializer");
    values.insert(values.end(), row.begin(), row.end());
  }
  return from({r, c}, std::move(values), requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::rank() const { return node_->shape.size(); }
std::size_t Tensor::numel() const { return node_->values.size(); }

std::size_t Tensor::rows() const {
  if (rank() != 2) fail("Tensor::rows", "tensor is " + shape_to_string(shape()));
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) fail("Tensor::cols", "tensor is " + shape_to_string(shape()));
  return node_->shape[1];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

std::vector<double>& Tensor::values() { return node_->values; }
const std::vector<double>& Tensor::values() const { return node_->values; }

std::vector<double>& Tensor::grad() {
  if (!node_->requires_grad)
    throw std::logic_error("Tensor::grad: tensor has no grad state");
  return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (!node_->requires_grad)
    throw std::logic_error("Tensor::grad: tensor has no grad state");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1)
    throw std::invalid_argument("Tensor::item: tensor is " +
                                shape_to_string(shape()) + ", not a scalar");
  return node_->values[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return node_->values[r * cols() + c];
}

double& Tensor::at(std::size_t r, std::size_t c) {
  return node_->values[r * cols() + c];
}

Tensor Tensor::detached_copy() const {
  return from(node_->shape, node_->values, false);
}

void Tensor::copy_values_from(const Tensor& other) {
  if (other.shape() != shape())
    fail("Tensor::copy_values_from", two_shapes(shape(), other.shape()));
  node_->values = other.values();
}

// ---- Tape ------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() {
  previous_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> backward_rule) {
  records_.push_back(std::move(backward_rule));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::logic_error("Tape::backward: tape already consumed");
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument(
        "Tape::backward: loss must be a scalar, got " +
        (loss.defined() ? shape_to_string(loss.shape()) : std::string("undefined")));
  if (!loss.requires_grad())
    throw std::invalid_argument(
        "Tape::backward: loss does not depend on any tensor with grad state");
  const_cast<Tensor&>(loss).grad()[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
  records_.clear();
  consumed_ = true;
}

// ---- reductions ------------------------------------------------------------

double stable_accumulate(const double* xs, std::size_t n) {
  if (n == 0) return 0.0;
  std::vector<double> buf(xs, xs + n);
  std::sort(buf.begin(), buf.end());
  double acc = 0.0;
  for (double v : buf) acc += v;
  return acc;
}

double stable_accumulate(const std::vector<double>& xs) {
  return stable_accumulate(xs.data(), xs.size());
}

// ---- op helpers -------------------------------------------------------------

namespace {

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::recording()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

Tensor make_output(Shape shape, std::vector<double> values, bool with_grad) {
  return Tensor::from(std::move(shape), std::move(values), with_grad);
}

}  // namespace

// ---- ops --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul",
          "expects two matrices, got " + two_shapes(a.shape(), b.shape()));
  require(a.cols() == b.rows(), "matmul",
          "shape mismatch (" + two_shapes(a.shape(), b.shape()) + ")");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  const bool rec = should_record({&a, &b});
  Tensor c = make_output({m, n}, std::move(out), rec);
  if (rec) {
    Tape::active()->record([a, b, c, m, k, n]() {
      const auto& gc = c.grad();
      if (a.requires_grad()) {
        auto& ga = const_cast<Tensor&>(a).grad();
        const auto& bv = b.values();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j)
              acc += gc[i * n + j] * bv[p * n + j];
            ga[i * k + p] += acc;
          }
      }
      if (b.requires_grad()) {
        auto& gb = const_cast<Tensor&>(b).grad();
        const auto& av = a.values();
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < m; ++i)
              acc += av[i * k + p] * gc[i * n + j];
            gb[p * n + j] += acc;
          }
      }
    });
  }
  return c;
}

namespace {

template <typename Combine, typename BackA, typename BackB>
Tensor elementwise_binary(const char* name, const Tensor& a, const Tensor& b,
                          Combine combine, BackA back_a, BackB back_b) {
  require(a.shape() == b.shape(), name,
          "shape mismatch (" + two_shapes(a.shape(), b.shape()) + ")");
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = combine(av[i], bv[i]);
  const bool rec = should_record({&a, &b});
  Tensor c = make_output(a.shape(), std::move(out), rec);
  if (rec) {
    Tape::active()->record([a, b, c, back_a, back_b, n]() {
      const auto& gc = c.grad();
      if (a.requires_grad()) {
        auto& ga = const_cast<Tensor&>(a).grad();
        const auto& av = a.values();
        const auto& bv = b.values();
        for (std::size_t i = 0; i < n; ++i) ga[i] += back_a(gc[i], av[i], bv[i]);
      }
      if (b.requires_grad()) {
        auto& gb = const_cast<Tensor&>(b).grad();
        const auto& av = a.values();
        const auto& bv = b.values();
        for (std::size_t i = 0; i < n; ++i) gb[i] += back_b(gc[i], av[i], bv[i]);
      }
    });
  }
  return c;
}

template <typename Fn, typename Back>
Tensor elementwise_unary(const char* name, const Tensor& a, Fn fn, Back back) {
  (void)name;
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = fn(av[i]);
  const bool rec = should_record({&a});
  Tensor c = make_output(a.shape(), std::move(out), rec);
  if (rec) {
    Tape::active()->record([a, c, back, n]() {
      const auto& gc = c.grad();
      auto& ga = const_cast<Tensor&>(a).grad();
      const auto& av = a.values();
      const auto& cv = c.values();
      for (std::size_t i = 0; i < n; ++i) ga[i] += back(gc[i], av[i], cv[i]);
    });
  }
  return c;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor add_rowvec(const Tensor& m, const Tensor& row) {
  require(m.rank() == 2 && row.rank() == 2 && row.rows() == 1, "add_rowvec",
          "expects matrix and 1-row vector, got " +
              two_shapes(m.shape(), row.shape()));
  require(m.cols() == row.cols(), "add_rowvec",
          "shape mismatch (" + two_shapes(m.shape(), row.shape()) + ")");
  const std::size_t r = m.rows(), k = m.cols();
  std::vector<double> out(r * k);
  const auto& mv = m.values();
  const auto& rv = row.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = mv[i * k + j] + rv[j];
  const bool rec = should_record({&m, &row});
  Tensor c = make_output({r, k}, std::move(out), rec);
  if (rec) {
    Tape::active()->record([m, row, c, r, k]() {
      const auto& gc = c.grad();
      if (m.requires_grad()) {
        auto& gm = const_cast<Tensor&>(m).grad();
        for (std::size_t i = 0; i < r * k; ++i) gm[i] += gc[i];
      }
      if (row.requires_grad()) {
        auto& gr = const_cast<Tensor&>(row).grad();
        for (std::size_t j = 0; j < k; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < r; ++i) acc += gc[i * k + j];
          gr[j] += acc;
        }
      }
    });
  }
  return c;
}

Tensor add_colvec(const Tensor& m, const Tensor& col) {
  require(m.rank() == 2 && col.rank() == 2 && col.cols() == 1, "add_colvec",
          "expects matrix and 1-column vector, got " +
              two_shapes(m.shape(), col.shape()));
  require(m.rows() == col.rows(), "add_colvec",
          "shape mismatch (" + two_shapes(m.shape(), col.shape()) + ")");
  const std::size_t r = m.rows(), k = m.cols();
  std::vector<double> out(r * k);
  const auto& mv = m.values();
  const auto& cv = col.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = mv[i * k + j] + cv[i];
  const bool rec = should_record({&m, &col});
  Tensor c = make_output({r, k}, std::move(out), rec);
  if (rec) {
    Tape::active()->record([m, col, c, r, k]() {
      const auto& gc = c.grad();
      if (m.requires_grad()) {
        auto& gm = const_cast<Tensor&>(m).grad();
        for (std::size_t i = 0; i < r * k; ++i) gm[i] += gc[i];
      }
      if (col.requires_grad()) {
        auto& gcol = const_cast<Tensor&>(col).grad();
        for (std::size_t i = 0; i < r; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < k; ++j) acc += gc[i * k + j];
          gcol[i] += acc;
        }
      }
    });
  }
  return c;
}

Tensor scale(const Tensor& a, double c) {
  return elementwise_unary(
      "scale", a, [c](double x) { return c * x; },
      [c](double g, double, double) { return c * g; });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), "concat", "empty input list");
  require(axis <= 1, "concat", "axis must be 0 or 1");
  for (const Tensor& p : parts)
    require(p.rank() == 2, "concat",
            "expects matrices, got " + shape_to_string(p.shape()));
  const std::size_t fixed =
      axis == 0 ? parts.front().cols() : parts.front().rows();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    const std::size_t f = axis == 0 ? p.cols() : p.rows();
    require(f == fixed, "concat",
            "shape mismatch (" +
                two_shapes(parts.front().shape(), p.shape()) + ")");
    total += axis == 0 ? p.rows() : p.cols();
  }
  const std::size_t out_r = axis == 0 ? total : fixed;
  const std::size_t out_c = axis == 0 ? fixed : total;
  std::vector<double> out(out_r * out_c);
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const auto& pv = p.values();
    if (axis == 0) {
      std::copy(pv.begin(), pv.end(), out.begin() + offset * out_c);
      offset += p.rows();
    } else {
      for (std::size_t i = 0; i < p.rows(); ++i)
        std::copy(pv.begin() + i * p.cols(), pv.begin() + (i + 1) * p.cols(),
                  out.begin() + i * out_c + offset);
      offset += p.cols();
    }
  }
  bool any_grad = false;
  if (Tape::recording())
    for (const Tensor& p : parts)
      if (p.requires_grad()) any_grad = true;
  Tensor c = make_output({out_r, out_c}, std::move(out), any_grad);
  if (any_grad) {
    Tape::active()->record([parts, c, axis, out_c]() {
      const auto& gc = c.grad();
      std::size_t offset = 0;
      for (const Tensor& p : parts) {
        const std::size_t pr = p.rows(), pc = p.cols();
        if (p.requires_grad()) {
          auto& gp = const_cast<Tensor&>(p).grad();
          if (axis == 0) {
            for (std::size_t i = 0; i < pr * pc; ++i)
              gp[i] += gc[offset * out_c + i];
          } else {
            for (std::size_t i = 0; i < pr; ++i)
              for (std::size_t j = 0; j < pc; ++j)
                gp[i * pc + j] += gc[i * out_c + offset + j];
          }
        }
        offset += axis == 0 ? pr : pc;
      }
    });
  }
  return c;
}

Tensor transpose(const Tensor& m) {
  require(m.rank() == 2, "transpose",
          "expects a matrix, got " + shape_to_string(m.shape()));
  const std::size_t r = m.rows(), k = m.cols();
  std::vector<double> out(r * k);
  const auto& mv = m.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < k; ++j) out[j * r + i] = mv[i * k + j];
  const bool rec = should_record({&m});
  Tensor c = make_output({k, r}, std::move(out), rec);
  if (rec) {
    Tape::active()->record([m, c, r, k]() {
      const auto& gc = c.grad();
      auto& gm = const_cast<Tensor&>(m).grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < k; ++j) gm[i * k + j] += gc[j * r + i];
    });
  }
  return c;
}

Tensor sigmoid(const Tensor& a) {
  return elementwise_unary(
      "sigmoid", a, [](double x) { return stable_sigmoid(x); },
      [](double g, double, double y) { return g * y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return elementwise_unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double g, double, double y) { return g * (1.0 - y * y); });
}

Tensor log_sigmoid(const Tensor& a) {
  return elementwise_unary(
      "log_sigmoid", a, [](double x) { return -softplus(-x); },
      [](double g, double x, double) { return g * stable_sigmoid(-x); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  require(lo <= hi, "clamp", "lo > hi");
  return elementwise_unary(
      "clamp", a,
      [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](double g, double x, double) {
        return (x >= lo && x <= hi) ? g : 0.0;
      });
}

namespace {

void check_row_reduce(const char* name, const Tensor& m) {
  require(m.rank() == 2, name,
          std::string("expects a matrix, got ") + shape_to_string(m.shape()));
  require(m.rows() > 0 && m.cols() > 0, name,
          std::string("empty axis in ") + shape_to_string(m.shape()));
}

}  // namespace

Tensor softmax_rows(const Tensor& m) {
  check_row_reduce("softmax_rows", m);
  const std::size_t r = m.rows(), k = m.cols();
  std::vector<double> out(r * k);
  const auto& mv = m.values();
  std::vector<double> terms(k);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = &mv[i * k];
    const double mx = *std::max_element(row, row + k);
    for (std::size_t j = 0; j < k; ++j) terms[j] = std::exp(row[j] - mx);
    const double denom = stable_accumulate(terms);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = terms[j] / denom;
  }
  const bool rec = should_record({&m});
  Tensor c = make_output({r, k}, std::move(out), rec);
  if (rec) {
    Tape::active()->record([m, c, r, k]() {
      const auto& gc = c.grad();
      const auto& cv = c.values();
      auto& gm = const_cast<Tensor&>(m).grad();
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) dot += gc[i * k + j] * cv[i * k + j];
        for (std::size_t j = 0; j < k; ++j)
          gm[i * k + j] += (gc[i * k + j] - dot) * cv[i * k + j];
      }
    });
  }
  return c;
}

Tensor log_softmax_rows(const Tensor& m) {
  check_row_reduce("log_softmax_rows", m);
  const std::size_t r = m.rows(), k = m.cols();
  std::vector<double> out(r * k);
  const auto& mv = m.values();
  std::vector<double> terms(k);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = &mv[i * k];
    const double mx = *std::max_element(row, row + k);
    for (std::size_t j = 0; j < k; ++j) terms[j] = std::exp(row[j] - mx);
    const double lse = mx + std::log(stable_accumulate(terms));
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = row[j] - lse;
  }
  const bool rec = should_record({&m});
  Tensor c = make_output({r, k}, std::move(out), rec);
  if (rec) {
    Tape::active()->record([m, c, r, k]() {
      const auto& gc = c.grad();
      const auto& cv = c.values();
      auto& gm = const_cast<Tensor&>(m).grad();
      for (std::size_t i = 0; i < r; ++i) {
        double gsum = 0.0;
        for (std::size_t j = 0; j < k; ++j) gsum += gc[i * k + j];
        for (std::size_t j = 0; j < k; ++j)
          gm[i * k + j] += gc[i * k + j] - std::exp(cv[i * k + j]) * gsum;
      }
    });
  }
  return c;
}

Tensor logsumexp_rows(const Tensor& m) {
  check_row_reduce("logsumexp_rows", m);
  const std::size_t r = m.rows(), k = m.cols();
  std::vector<double> out(r);
  const auto& mv = m.values();
  std::vector<double> terms(k);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = &mv[i * k];
    const double mx = *std::max_element(row, row + k);
    for (std::size_t j = 0; j < k; ++j) terms[j] = std::exp(row[j] - mx);
    out[i] = mx + std::log(stable_accumulate(terms));
  }
  const bool rec = should_record({&m});
  Tensor c = make_output({r, 1}, std::move(out), rec);
  if (rec) {
    Tape::active()->record([m, c, r, k]() {
      const auto& gc = c.grad();
      const auto& cv = c.values();
      const auto& mv = m.values();
      auto& gm = const_cast<Tensor&>(m).grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < k; ++j)
          gm[i * k + j] += gc[i] * std::exp(mv[i * k + j] - cv[i]);
    });
  }
  return c;
}

Tensor max_over_rows(const Tensor& m) {
  check_row_reduce("max_over_rows", m);
  const std::size_t r = m.rows(), k = m.cols();
  std::vector<double> out(k);
  std::vector<std::size_t> argmax(k, 0);
  const auto& mv = m.values();
  for (std::size_t j = 0; j < k; ++j) {
    double best = mv[j];
    std::size_t best_i = 0;
    for (std::size_t i = 1; i < r; ++i) {
      if (mv[i * k + j] > best) {  // strict: ties keep the lowest row index
        best = mv[i * k + j];
        best_i = i;
      }
    }
    out[j] = best;
    argmax[j] = best_i;
  }
  const bool rec = should_record({&m});
  Tensor c = make_output({1, k}, std::move(out), rec);
  if (rec) {
    Tape::active()->record([m, c, argmax, k]() {
      const auto& gc = c.grad();
      auto& gm = const_cast<Tensor&>(m).grad();
      for (std::size_t j = 0; j < k; ++j) gm[argmax[j] * k + j] += gc[j];
    });
  }
  return c;
}

Tensor mask_fill(const Tensor& a, const Tensor& mask, double fill) {
  require(a.shape() == mask.shape(), "mask_fill",
          "shape mismatch (" + two_shapes(a.shape(), mask.shape()) + ")");
  require(!mask.requires_grad(), "mask_fill", "mask must not carry grad state");
  const std::size_t n = a.numel();
  const auto& av = a.values();
  const auto& mk = mask.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    require(mk[i] == 0.0 || mk[i] == 1.0, "mask_fill",
            "mask values must be 0 or 1");
    out[i] = mk[i] == 1.0 ? fill : av[i];
  }
  const bool rec = should_record({&a});
  Tensor c = make_output(a.shape(), std::move(out), rec);
  if (rec) {
    Tape::active()->record([a, mask, c, n]() {
      const auto& gc = c.grad();
      const auto& mk = mask.values();
      auto& ga = const_cast<Tensor&>(a).grad();
      for (std::size_t i = 0; i < n; ++i)
        if (mk[i] == 0.0) ga[i] += gc[i];
    });
  }
  return c;
}

Tensor slice(const Tensor& m, std::size_t axis, std::size_t begin,
             std::size_t end) {
  require(m.rank() == 2, "slice",
          "expects a matrix, got " + shape_to_string(m.shape()));
  require(axis <= 1, "slice", "axis must be 0 or 1");
  const std::size_t limit = axis == 0 ? m.rows() : m.cols();
  require(begin < end && end <= limit, "slice",
          "range [" + std::to_string(begin) + "," + std::to_string(end) +
              ") invalid for " + shape_to_string(m.shape()));
  const std::size_t r = m.rows(), k = m.cols();
  const std::size_t out_r = axis == 0 ? end - begin : r;
  const std::size_t out_c = axis == 0 ? k : end - begin;
  std::vector<double> out(out_r * out_c);
  const auto& mv = m.values();
  for (std::size_t i = 0; i < out_r; ++i)
    for (std::size_t j = 0; j < out_c; ++j) {
      const std::size_t si = axis == 0 ? begin + i : i;
      const std::size_t sj = axis == 0 ? j : begin + j;
      out[i * out_c + j] = mv[si * k + sj];
    }
  const bool rec = should_record({&m});
  Tensor c = make_output({out_r, out_c}, std::move(out), rec);
  if (rec) {
    Tape::active()->record([m, c, axis, begin, out_r, out_c, k]() {
      const auto& gc = c.grad();
      auto& gm = const_cast<Tensor&>(m).grad();
      for (std::size_t i = 0; i < out_r; ++i)
        for (std::size_t j = 0; j < out_c; ++j) {
          const std::size_t si = axis == 0 ? begin + i : i;
          const std::size_t sj = axis == 0 ? j : begin + j;
          gm[si * k + sj] += gc[i * out_c + j];
        }
    });
  }
  return c;
}

Tensor sum(const Tensor& a) {
  const double total = stable_accumulate(a.values());
  const bool rec = should_record({&a});
  Tensor c = make_output({}, {total}, rec);
  if (rec) {
    Tape::active()->record([a, c]() {
      const double g = c.grad()[0];
      auto& ga = const_cast<Tensor&>(a).grad();
      for (double& v : ga) v += g;
    });
  }
  return c;
}

Tensor mean(const Tensor& a) {
  require(a.numel() > 0, "mean", "empty tensor");
  const double n = static_cast<double>(a.numel());
  const double total = stable_accumulate(a.values()) / n;
  const bool rec = should_record({&a});
  Tensor c = make_output({}, {total}, rec);
  if (rec) {
    Tape::active()->record([a, c, n]() {
      const double g = c.grad()[0] / n;
      auto& ga = const_cast<Tensor&>(a).grad();
      for (double& v : ga) v += g;
    });
  }
  return c;
}

Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
  require(table.rank() == 2, "gather_rows",
          "expects a matrix, got " + shape_to_string(table.shape()));
  require(!ids.empty(), "gather_rows", "empty id list");
  const std::size_t r = table.rows(), k = table.cols();
  for (std::size_t id : ids)
    require(id < r, "gather_rows",
            "row id " + std::to_string(id) + " out of range for " +
                shape_to_string(table.shape()));
  std::vector<double> out(ids.size() * k);
  const auto& tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(tv.begin() + ids[i] * k, tv.begin() + (ids[i] + 1) * k,
              out.begin() + i * k);
  const bool rec = should_record({&table});
  Tensor c = make_output({ids.size(), k}, std::move(out), rec);
  if (rec) {
    Tape::active()->record([table, c, ids, k]() {
      const auto& gc = c.grad();
      auto& gt = const_cast<Tensor&>(table).grad();
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < k; ++j)
          gt[ids[i] * k + j] += gc[i * k + j];
    });
  }
  return c;
}

Tensor reshape(const Tensor& a, Shape new_shape) {
  std::size_t n = 1;
  for (std::size_t d : new_shape) n *= d;
  require(n == a.numel(), "reshape",
          "cannot view " + shape_to_string(a.shape()) + " as " +
              shape_to_string(new_shape));
  const bool rec = should_record({&a});
  Tensor c = make_output(std::move(new_shape), a.values(), rec);
  if (rec) {
    Tape::active()->record([a, c]() {
      const auto& gc = c.grad();
      auto& ga = const_cast<Tensor&>(a).grad();
      for (std::size_t i = 0; i < gc.size(); ++i) ga[i] += gc[i];
    });
  }
  return c;
}

// ---- finite differences ------------------------------------------------------

GradCheckResult finite_difference_check(const std::function<Tensor()>& loss_fn,
                                        const ModelParams& params,
                                        double epsilon, std::size_t samples,
                                        std::uint64_t seed) {
  if (epsilon <= 0.0)
    throw std::invalid_argument("finite_difference_check: epsilon must be > 0");
  if (samples < 1)
    throw std::invalid_argument("finite_difference_check: samples must be >= 1");

  GradCheckResult result;
  result.epsilon = epsilon;
  result.samples = samples;

  for (const NamedTensor& p : params) const_cast<Tensor&>(p.tensor).zero_grad();
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = loss_fn();
    if (!std::isfinite(loss.item())) {
      result.failures.push_back("loss non-finite at the unperturbed point");
      return result;
    }
    tape.backward(loss);
  }
  analytic.reserve(params.size());
  for (const NamedTensor& p : params) analytic.push_back(p.tensor.grad());

  std::size_t total_coords = 0;
  for (const NamedTensor& p : params) total_coords += p.tensor.numel();
  if (total_coords == 0)
    throw std::invalid_argument("finite_difference_check: no parameters");

  Rng rng(seed);
  for (std::size_t s = 0; s < samples; ++s) {
    std::size_t flat = rng.uniform_index(total_coords);
    std::size_t pi = 0;
    while (flat >= params[pi].tensor.numel()) {
      flat -= params[pi].tensor.numel();
      ++pi;
    }
    Tensor t = params[pi].tensor;
    const double original = t.values()[flat];

    t.values()[flat] = original + epsilon;
    const double f_plus = loss_fn().item();
    t.values()[flat] = original - epsilon;
    const double f_minus = loss_fn().item();
    t.values()[flat] = original;

    const std::string coord =
        params[pi].name + "[" + std::to_string(flat) + "]";
    if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
      result.failures.push_back("loss non-finite at perturbed point " + coord);
      continue;
    }
    const double numeric = (f_plus - f_minus) / (2.0 * epsilon);
    const double analytic_g = analytic[pi][flat];
    const double denom =
        std::max(1e-8, std::abs(analytic_g) + std::abs(numeric));
    const double rel = std::abs(analytic_g - numeric) / denom;
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_param = params[pi].name;
      result.worst_index = flat;
      result.worst_analytic = analytic_g;
      result.worst_numeric = numeric;
    }
  }
  return result;
}

}  // namespace slotfill
