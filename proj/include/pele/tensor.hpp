#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "pele/rng.hpp"

namespace pele {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised whenever an op produces a NaN/Inf value. Tensors never hold
// non-finite values; losses that would be infinite are flagged out of band.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct TensorData {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until backward touches this node
  bool requires_grad = false;
};

}  // namespace detail

// Dense f64 tensor, row-major, rank 1 or 2. Copying a Tensor copies the
// handle; the underlying buffer is shared. Ops allocate fresh outputs.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor ones(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double value);
  static Tensor from(std::vector<std::size_t> shape, std::vector<double> values);
  static Tensor normal(std::vector<std::size_t> shape, double mean, double stddev, Rng& rng);
  static Tensor scalar(double value);

  bool defined() const { return d_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return data_ref().shape; }
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const { return data_ref().values.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  bool is_scalar() const { return size() == 1; }

  const std::vector<double>& values() const { return data_ref().values; }
  std::vector<double>& values() { return data_ref().values; }
  double item() const;
  double at(std::size_t i) const { return data_ref().values.at(i); }
  double at(std::size_t i, std::size_t j) const;

  bool requires_grad() const { return data_ref().requires_grad; }
  Tensor& set_requires_grad(bool flag);

  // Gradient read-back; zeros when this leaf never participated.
  std::vector<double> grad() const;
  bool has_grad() const { return !data_ref().grad.empty(); }
  void zero_grad();

  // Deep copy of values (fresh buffer, no grad, same requires_grad flag).
  Tensor clone() const;

  detail::TensorData* node() const { return d_.get(); }
  std::shared_ptr<detail::TensorData> handle() const { return d_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorData> d) : d_(std::move(d)) {}
  detail::TensorData& data_ref() const;

  std::shared_ptr<detail::TensorData> d_;

  friend Tensor wrap_node(std::shared_ptr<detail::TensorData> d);
};

Tensor wrap_node(std::shared_ptr<detail::TensorData> d);

// Reverse-mode tape. Ops executed while a Tape is alive (and touching at
// least one grad-requiring input) append a node with its backward rule, so
// the record is topologically ordered by construction. A tape serves one
// forward pass: run backward once, then discard.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  // Monotonic id of the active tape (0 when none). Callers that cache
  // taped subgraphs key them on this.
  static std::uint64_t active_generation();

  void record(std::shared_ptr<detail::TensorData> out,
              std::function<void()> backward_fn);

  // Seeds d(loss)/d(loss)=1 and replays the tape in reverse, accumulating
  // into every grad-requiring participant exactly once.
  void backward(const Tensor& loss);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::shared_ptr<detail::TensorData> out;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
  Tape* prev_ = nullptr;
  std::uint64_t generation_ = 0;
  bool used_ = false;
};

// ---- elementwise and linear-algebra ops ------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
// Multiply by a scalar tensor (gradients reach both sides).
Tensor smul(const Tensor& s, const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
// y[i,:] = x[i,:] + b  for a rank-1 bias b.
Tensor add_rowvec(const Tensor& x, const Tensor& b);

Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1);
Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// axis = 0: down columns, axis = 1: along rows. Rank-1 input uses axis 0.
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// Rows of table gathered by id; backward scatter-adds into the table.
Tensor embed_rows(const Tensor& table, const std::vector<int>& ids);

// Sum of -logp[i, ids[i]] over rows (scalar).
Tensor pick_nll_sum(const Tensor& log_probs, const std::vector<int>& ids);

// Forward: 1 where sigmoid(m) >= tau else 0. Backward: straight-through
// (the binarization is treated as identity).
Tensor ste_binarize(const Tensor& m, double tau);

void backward(Tape& tape, const Tensor& loss);

}  // namespace pele
