#include "pele/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

namespace pele {

namespace {

thread_local Tape* g_active_tape = nullptr;

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

void check_dims(const std::vector<std::size_t>& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dim");
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
  }
}

void finite_guard(const char* op, const std::vector<double>& values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
  }
}

std::shared_ptr<detail::TensorData> make_data(std::vector<std::size_t> shape) {
  check_dims(shape);
  auto d = std::make_shared<detail::TensorData>();
  d->values.assign(shape_numel(shape), 0.0);
  d->shape = std::move(shape);
  return d;
}

std::vector<double>& ensure_grad(detail::TensorData* d) {
  if (d->grad.empty()) d->grad.assign(d->values.size(), 0.0);
  return d->grad;
}

bool wants_grad(const Tensor& t) { return t.requires_grad(); }

// Builds the output node for an op: shape-allocated buffer whose
// requires_grad is set only when a tape is live and some input needs it.
struct OpResult {
  std::shared_ptr<detail::TensorData> out;
  bool taped;
};

OpResult op_output(std::vector<std::size_t> shape, bool any_input_grad) {
  OpResult r;
  r.out = make_data(std::move(shape));
  r.taped = any_input_grad && Tape::active() != nullptr;
  r.out->requires_grad = r.taped;
  return r;
}

void finish(const char* op, const OpResult& r, std::function<void()> backward_fn) {
  finite_guard(op, r.out->values);
  if (r.taped) Tape::active()->record(r.out, std::move(backward_fn));
}

// Shorthand used by backward closures: accumulate g into t's grad when t
// participates in differentiation.
bool grad_sink(const std::shared_ptr<detail::TensorData>& t) {
  return t->requires_grad;
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

detail::TensorData& Tensor::data_ref() const {
  if (!d_) throw ShapeError("use of empty tensor");
  return *d_;
}

Tensor wrap_node(std::shared_ptr<detail::TensorData> d) { return Tensor(std::move(d)); }

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  return wrap_node(make_data(std::move(shape)));
}

Tensor Tensor::ones(std::vector<std::size_t> shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  auto d = make_data(std::move(shape));
  std::fill(d->values.begin(), d->values.end(), value);
  finite_guard("full", d->values);
  return wrap_node(std::move(d));
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> values) {
  auto d = make_data(std::move(shape));
  if (values.size() != d->values.size()) {
    throw ShapeError("value count does not match shape " + shape_str(d->shape));
  }
  d->values = std::move(values);
  finite_guard("from", d->values);
  return wrap_node(std::move(d));
}

Tensor Tensor::normal(std::vector<std::size_t> shape, double mean, double stddev, Rng& rng) {
  auto d = make_data(std::move(shape));
  for (double& v : d->values) v = rng.normal(mean, stddev);
  finite_guard("normal", d->values);
  return wrap_node(std::move(d));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  return s[0];
}

std::size_t Tensor::cols() const {
  const auto& s = shape();
  if (s.size() != 2) throw ShapeError("cols() on rank-" + std::to_string(s.size()) + " tensor");
  return s[1];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar tensor");
  return values()[0];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  if (rank() != 2) throw ShapeError("at(i,j) on non-matrix tensor");
  return values()[i * cols() + j];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  data_ref().requires_grad = flag;
  return *this;
}

std::vector<double> Tensor::grad() const {
  const auto& d = data_ref();
  if (d.grad.empty()) return std::vector<double>(d.values.size(), 0.0);
  return d.grad;
}

void Tensor::zero_grad() { data_ref().grad.clear(); }

Tensor Tensor::clone() const {
  auto d = make_data(shape());
  d->values = values();
  d->requires_grad = requires_grad();
  return wrap_node(std::move(d));
}

// ---- Tape ------------------------------------------------------------------

namespace {
std::atomic<std::uint64_t> g_tape_generation_counter{0};
}

Tape::Tape() {
  prev_ = g_active_tape;
  generation_ = ++g_tape_generation_counter;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

std::uint64_t Tape::active_generation() {
  return g_active_tape ? g_active_tape->generation_ : 0;
}

void Tape::record(std::shared_ptr<detail::TensorData> out, std::function<void()> backward_fn) {
  nodes_.push_back({std::move(out), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.is_scalar()) throw ShapeError("backward requires a scalar loss");
  if (used_) throw std::logic_error("tape already consumed by backward");
  used_ = true;
  ensure_grad(loss.node())[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->out->grad.empty()) continue;  // no downstream influence
    it->fn();
  }
}

void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

// ---- ops -------------------------------------------------------------------

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  auto r = op_output(a.shape(), wants_grad(a) || wants_grad(b));
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = r.out->values;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  auto an = a.handle(), bn = b.handle(), on = r.out;
  finish("add", r, [an, bn, on] {
    const auto& g = on->grad;
    if (grad_sink(an)) {
      auto& ga = ensure_grad(an.get());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (grad_sink(bn)) {
      auto& gb = ensure_grad(bn.get());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
  return wrap_node(r.out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  auto r = op_output(a.shape(), wants_grad(a) || wants_grad(b));
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = r.out->values;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  auto an = a.handle(), bn = b.handle(), on = r.out;
  finish("sub", r, [an, bn, on] {
    const auto& g = on->grad;
    if (grad_sink(an)) {
      auto& ga = ensure_grad(an.get());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (grad_sink(bn)) {
      auto& gb = ensure_grad(bn.get());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return wrap_node(r.out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  auto r = op_output(a.shape(), wants_grad(a) || wants_grad(b));
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = r.out->values;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  auto an = a.handle(), bn = b.handle(), on = r.out;
  finish("mul", r, [an, bn, on] {
    const auto& g = on->grad;
    if (grad_sink(an)) {
      auto& ga = ensure_grad(an.get());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->values[i];
    }
    if (grad_sink(bn)) {
      auto& gb = ensure_grad(bn.get());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->values[i];
    }
  });
  return wrap_node(r.out);
}

Tensor scale(const Tensor& x, double c) {
  auto r = op_output(x.shape(), wants_grad(x));
  const auto& xv = x.values();
  auto& ov = r.out->values;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * c;
  auto xn = x.handle();
  auto on = r.out;
  finish("scale", r, [xn, on, c] {
    if (!grad_sink(xn)) return;
    auto& gx = ensure_grad(xn.get());
    const auto& g = on->grad;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
  });
  return wrap_node(r.out);
}

Tensor smul(const Tensor& s, const Tensor& x) {
  if (!s.is_scalar()) throw ShapeError("smul: first argument must be scalar");
  auto r = op_output(x.shape(), wants_grad(s) || wants_grad(x));
  const double sv = s.values()[0];
  const auto& xv = x.values();
  auto& ov = r.out->values;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = sv * xv[i];
  auto sn = s.handle(), xn = x.handle(), on = r.out;
  finish("smul", r, [sn, xn, on] {
    const auto& g = on->grad;
    if (grad_sink(xn)) {
      auto& gx = ensure_grad(xn.get());
      const double sv = sn->values[0];
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv;
    }
    if (grad_sink(sn)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xn->values[i];
      ensure_grad(sn.get())[0] += acc;
    }
  });
  return wrap_node(r.out);
}

Tensor relu(const Tensor& x) {
  auto r = op_output(x.shape(), wants_grad(x));
  const auto& xv = x.values();
  auto& ov = r.out->values;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  auto xn = x.handle();
  auto on = r.out;
  finish("relu", r, [xn, on] {
    if (!grad_sink(xn)) return;
    auto& gx = ensure_grad(xn.get());
    const auto& g = on->grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xn->values[i] > 0.0) gx[i] += g[i];
    }
  });
  return wrap_node(r.out);
}

Tensor gelu(const Tensor& x) {
  auto r = op_output(x.shape(), wants_grad(x));
  const auto& xv = x.values();
  auto& ov = r.out->values;
  for (std::size_t i = 0; i < ov.size(); ++i) {
    ov[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * M_SQRT1_2));
  }
  auto xn = x.handle();
  auto on = r.out;
  finish("gelu", r, [xn, on] {
    if (!grad_sink(xn)) return;
    auto& gx = ensure_grad(xn.get());
    const auto& g = on->grad;
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < g.size(); ++i) {
      double v = xn->values[i];
      double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
      double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
  return wrap_node(r.out);
}

Tensor sigmoid(const Tensor& x) {
  auto r = op_output(x.shape(), wants_grad(x));
  const auto& xv = x.values();
  auto& ov = r.out->values;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  auto xn = x.handle();
  auto on = r.out;
  finish("sigmoid", r, [xn, on] {
    if (!grad_sink(xn)) return;
    auto& gx = ensure_grad(xn.get());
    const auto& g = on->grad;
    const auto& y = on->values;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
  return wrap_node(r.out);
}

namespace {

// C[m,n] += A[m,k] * B[k,n], accumulate = raw pointers; ikj order keeps B
// streaming row-wise.
void gemm_acc(const double* a, const double* b, double* c, std::size_t m,
              std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,k] += A[m,n] * B^T where B is [k,n]  (i.e. A * transpose(B)).
void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (std::size_t j = 0; j < k; ++j) {
      const double* brow = b + j * n;
      double acc = 0.0;
      for (std::size_t p = 0; p < n; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[k,n] += A^T * B where A is [m,k], B is [m,n].
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul requires rank-2 tensors");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dims mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  auto r = op_output({m, n}, wants_grad(a) || wants_grad(b));
  gemm_acc(a.values().data(), b.values().data(), r.out->values.data(), m, k, n);
  auto an = a.handle(), bn = b.handle(), on = r.out;
  finish("matmul", r, [an, bn, on, m, k, n] {
    const auto& g = on->grad;
    if (grad_sink(an)) {
      // dA = G * B^T
      gemm_nt_acc(g.data(), bn->values.data(), ensure_grad(an.get()).data(), m, n, k);
    }
    if (grad_sink(bn)) {
      // dB = A^T * G
      gemm_tn_acc(an->values.data(), g.data(), ensure_grad(bn.get()).data(), m, k, n);
    }
  });
  return wrap_node(r.out);
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose requires rank-2 tensor");
  const std::size_t m = x.rows(), n = x.cols();
  auto r = op_output({n, m}, wants_grad(x));
  const auto& xv = x.values();
  auto& ov = r.out->values;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = xv[i * n + j];
  auto xn = x.handle();
  auto on = r.out;
  finish("transpose", r, [xn, on, m, n] {
    if (!grad_sink(xn)) return;
    auto& gx = ensure_grad(xn.get());
    const auto& g = on->grad;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
  });
  return wrap_node(r.out);
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  if (x.rank() != 2 || b.rank() != 1) throw ShapeError("add_rowvec expects matrix + vector");
  const std::size_t m = x.rows(), n = x.cols();
  if (b.size() != n) throw ShapeError("add_rowvec: vector length mismatch");
  auto r = op_output({m, n}, wants_grad(x) || wants_grad(b));
  const auto& xv = x.values();
  const auto& bv = b.values();
  auto& ov = r.out->values;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) ov[i * n + j] = xv[i * n + j] + bv[j];
  auto xn = x.handle(), bn = b.handle(), on = r.out;
  finish("add_rowvec", r, [xn, bn, on, m, n] {
    const auto& g = on->grad;
    if (grad_sink(xn)) {
      auto& gx = ensure_grad(xn.get());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (grad_sink(bn)) {
      auto& gb = ensure_grad(bn.get());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
  return wrap_node(r.out);
}

Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
  if (x.rank() != 2) throw ShapeError("slice_rows requires rank-2 tensor");
  if (r0 >= r1 || r1 > x.rows()) throw ShapeError("slice_rows: bad range");
  const std::size_t n = x.cols();
  auto r = op_output({r1 - r0, n}, wants_grad(x));
  const auto& xv = x.values();
  std::copy(xv.begin() + r0 * n, xv.begin() + r1 * n, r.out->values.begin());
  auto xn = x.handle();
  auto on = r.out;
  finish("slice_rows", r, [xn, on, r0, n] {
    if (!grad_sink(xn)) return;
    auto& gx = ensure_grad(xn.get());
    const auto& g = on->grad;
    for (std::size_t i = 0; i < g.size(); ++i) gx[r0 * n + i] += g[i];
  });
  return wrap_node(r.out);
}

Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
  if (x.rank() != 2) throw ShapeError("slice_cols requires rank-2 tensor");
  if (c0 >= c1 || c1 > x.cols()) throw ShapeError("slice_cols: bad range");
  const std::size_t m = x.rows(), n = x.cols(), w = c1 - c0;
  auto r = op_output({m, w}, wants_grad(x));
  const auto& xv = x.values();
  auto& ov = r.out->values;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) ov[i * w + j] = xv[i * n + c0 + j];
  auto xn = x.handle();
  auto on = r.out;
  finish("slice_cols", r, [xn, on, m, n, w, c0] {
    if (!grad_sink(xn)) return;
    auto& gx = ensure_grad(xn.get());
    const auto& g = on->grad;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) gx[i * n + c0 + j] += g[i * w + j];
  });
  return wrap_node(r.out);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty list");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.cols() != n) throw ShapeError("concat_rows: col mismatch");
    m += p.rows();
    any_grad = any_grad || wants_grad(p);
  }
  auto r = op_output({m, n}, any_grad);
  auto& ov = r.out->values;
  std::size_t off = 0;
  std::vector<std::shared_ptr<detail::TensorData>> hs;
  hs.reserve(parts.size());
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(), ov.begin() + off);
    off += p.values().size();
    hs.push_back(p.handle());
  }
  auto on = r.out;
  finish("concat_rows", r, [hs, on] {
    const auto& g = on->grad;
    std::size_t off = 0;
    for (const auto& h : hs) {
      if (grad_sink(h)) {
        auto& gh = ensure_grad(h.get());
        for (std::size_t i = 0; i < gh.size(); ++i) gh[i] += g[off + i];
      }
      off += h->values.size();
    }
  });
  return wrap_node(r.out);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty list");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.rows() != m) throw ShapeError("concat_cols: row mismatch");
    n += p.cols();
    any_grad = any_grad || wants_grad(p);
  }
  auto r = op_output({m, n}, any_grad);
  auto& ov = r.out->values;
  std::size_t coff = 0;
  std::vector<std::shared_ptr<detail::TensorData>> hs;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    const auto& pv = p.values();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) ov[i * n + coff + j] = pv[i * w + j];
    coff += w;
    hs.push_back(p.handle());
    widths.push_back(w);
  }
  auto on = r.out;
  finish("concat_cols", r, [hs, widths, on, m, n] {
    const auto& g = on->grad;
    std::size_t coff = 0;
    for (std::size_t pi = 0; pi < hs.size(); ++pi) {
      const std::size_t w = widths[pi];
      if (grad_sink(hs[pi])) {
        auto& gh = ensure_grad(hs[pi].get());
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) gh[i * w + j] += g[i * n + coff + j];
      }
      coff += w;
    }
  });
  return wrap_node(r.out);
}

Tensor sum(const Tensor& x) {
  auto r = op_output({1}, wants_grad(x));
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  r.out->values[0] = acc;
  auto xn = x.handle();
  auto on = r.out;
  finish("sum", r, [xn, on] {
    if (!grad_sink(xn)) return;
    auto& gx = ensure_grad(xn.get());
    const double g = on->grad[0];
    for (double& v : gx) v += g;
  });
  return wrap_node(r.out);
}

Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

namespace {

// Iterates the lanes of a rank-1/2 tensor along `axis`. fn(base, stride, len).
template <typename F>
void for_each_lane(const Tensor& x, int axis, F&& fn) {
  if (x.rank() == 1) {
    if (axis != 0) throw ShapeError("softmax: axis out of range for rank-1");
    fn(0, 1, x.size());
    return;
  }
  const std::size_t m = x.rows(), n = x.cols();
  if (axis == 1) {
    for (std::size_t i = 0; i < m; ++i) fn(i * n, 1, n);
  } else if (axis == 0) {
    for (std::size_t j = 0; j < n; ++j) fn(j, n, m);
  } else {
    throw ShapeError("softmax: axis out of range");
  }
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  auto r = op_output(x.shape(), wants_grad(x));
  const auto& xv = x.values();
  auto& ov = r.out->values;
  for_each_lane(x, axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
    double mx = -1e300;
    for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, xv[base + i * stride]);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      double e = std::exp(xv[base + i * stride] - mx);
      ov[base + i * stride] = e;
      z += e;
    }
    for (std::size_t i = 0; i < len; ++i) ov[base + i * stride] /= z;
  });
  auto xn = x.handle();
  auto on = r.out;
  Tensor xt = wrap_node(xn);
  finish("softmax", r, [xn, on, axis] {
    if (!grad_sink(xn)) return;
    auto& gx = ensure_grad(xn.get());
    const auto& g = on->grad;
    const auto& y = on->values;
    for_each_lane(wrap_node(on), axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
      double dot = 0.0;
      for (std::size_t i = 0; i < len; ++i) dot += g[base + i * stride] * y[base + i * stride];
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t k = base + i * stride;
        gx[k] += y[k] * (g[k] - dot);
      }
    });
  });
  return wrap_node(r.out);
}

Tensor log_softmax(const Tensor& x, int axis) {
  auto r = op_output(x.shape(), wants_grad(x));
  const auto& xv = x.values();
  auto& ov = r.out->values;
  for_each_lane(x, axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
    double mx = -1e300;
    for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, xv[base + i * stride]);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i) z += std::exp(xv[base + i * stride] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t i = 0; i < len; ++i) ov[base + i * stride] = xv[base + i * stride] - lz;
  });
  auto xn = x.handle();
  auto on = r.out;
  finish("log_softmax", r, [xn, on, axis] {
    if (!grad_sink(xn)) return;
    auto& gx = ensure_grad(xn.get());
    const auto& g = on->grad;
    const auto& y = on->values;
    for_each_lane(wrap_node(on), axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
      double gsum = 0.0;
      for (std::size_t i = 0; i < len; ++i) gsum += g[base + i * stride];
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t k = base + i * stride;
        gx[k] += g[k] - std::exp(y[k]) * gsum;
      }
    });
  });
  return wrap_node(r.out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() != 2) throw ShapeError("layer_norm requires rank-2 input");
  const std::size_t m = x.rows(), n = x.cols();
  if (n == 0) throw ShapeError("layer_norm: zero feature dim");
  if (gain.rank() != 1 || gain.size() != n || bias.rank() != 1 || bias.size() != n) {
    throw ShapeError("layer_norm: gain/bias must be rank-1 of the feature dim");
  }
  auto r = op_output({m, n}, wants_grad(x) || wants_grad(gain) || wants_grad(bias));
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  auto& ov = r.out->values;
  // Cache per-row inverse stddev and normalized values for backward.
  auto xhat = std::make_shared<std::vector<double>>(m * n);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = row[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (row[j] - mu) * is;
      (*xhat)[i * n + j] = xh;
      ov[i * n + j] = xh * gv[j] + bv[j];
    }
  }
  auto xn = x.handle(), gn = gain.handle(), bn = bias.handle(), on = r.out;
  finish("layer_norm", r, [xn, gn, bn, on, xhat, inv_std, m, n] {
    const auto& g = on->grad;
    if (grad_sink(gn)) {
      auto& gg = ensure_grad(gn.get());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * (*xhat)[i * n + j];
    }
    if (grad_sink(bn)) {
      auto& gb = ensure_grad(bn.get());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
    if (grad_sink(xn)) {
      auto& gx = ensure_grad(xn.get());
      const auto& gv = gn->values;
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < m; ++i) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double gy = g[i * n + j] * gv[j];
          s1 += gy;
          s2 += gy * (*xhat)[i * n + j];
        }
        const double is = (*inv_std)[i];
        for (std::size_t j = 0; j < n; ++j) {
          const double gy = g[i * n + j] * gv[j];
          gx[i * n + j] += is * (gy - inv_n * s1 - (*xhat)[i * n + j] * inv_n * s2);
        }
      }
    }
  });
  return wrap_node(r.out);
}

Tensor embed_rows(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw ShapeError("embed_rows requires rank-2 table");
  if (ids.empty()) throw ShapeError("embed_rows: empty id list");
  const std::size_t v = table.rows(), n = table.cols();
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw ShapeError("embed_rows: token id " + std::to_string(id) + " out of range");
    }
  }
  auto r = op_output({ids.size(), n}, wants_grad(table));
  const auto& tv = table.values();
  auto& ov = r.out->values;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy(tv.begin() + ids[i] * n, tv.begin() + (ids[i] + 1) * n, ov.begin() + i * n);
  }
  auto tn = table.handle();
  auto on = r.out;
  finish("embed_rows", r, [tn, on, ids, n] {
    if (!grad_sink(tn)) return;
    auto& gt = ensure_grad(tn.get());
    const auto& g = on->grad;
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) gt[ids[i] * n + j] += g[i * n + j];
  });
  return wrap_node(r.out);
}

Tensor pick_nll_sum(const Tensor& log_probs, const std::vector<int>& ids) {
  if (log_probs.rank() != 2) throw ShapeError("pick_nll_sum requires rank-2 log-probs");
  if (ids.size() != log_probs.rows()) throw ShapeError("pick_nll_sum: id count mismatch");
  const std::size_t n = log_probs.cols();
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= n) {
      throw ShapeError("pick_nll_sum: id out of range");
    }
  }
  auto r = op_output({1}, wants_grad(log_probs));
  const auto& lv = log_probs.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < ids.size(); ++i) acc -= lv[i * n + ids[i]];
  r.out->values[0] = acc;
  auto ln = log_probs.handle();
  auto on = r.out;
  finish("pick_nll_sum", r, [ln, on, ids, n] {
    if (!grad_sink(ln)) return;
    auto& gl = ensure_grad(ln.get());
    const double g = on->grad[0];
    for (std::size_t i = 0; i < ids.size(); ++i) gl[i * n + ids[i]] -= g;
  });
  return wrap_node(r.out);
}

Tensor ste_binarize(const Tensor& m, double tau) {
  auto r = op_output(m.shape(), wants_grad(m));
  const auto& mv = m.values();
  auto& ov = r.out->values;
  for (std::size_t i = 0; i < ov.size(); ++i) {
    ov[i] = (1.0 / (1.0 + std::exp(-mv[i])) >= tau) ? 1.0 : 0.0;
  }
  auto mn = m.handle();
  auto on = r.out;
  finish("ste_binarize", r, [mn, on] {
    if (!grad_sink(mn)) return;
    auto& gm = ensure_grad(mn.get());
    const auto& g = on->grad;
    for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
  });
  return wrap_node(r.out);
}

}  // namespace pele
