#include "laser/autodiff.hpp"

#include <cmath>
#include <limits>
#include <numeric>

namespace laser::ad {

std::string shape_str(std::size_t rows, std::size_t cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

namespace {

template <typename T>
std::string shape_of(const Tensor<T>& t) {
  return shape_str(t.rows(), t.cols());
}

template <typename T>
void require_same_graph(const Tensor<T>& a, const Tensor<T>& b) {
  if (&a.graph() != &b.graph()) {
    throw std::invalid_argument("tensors belong to different graphs");
  }
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a,
                        const Tensor<T>& b) {
  require_same_graph(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_of(a) +
                     " vs " + shape_of(b));
  }
}

// C += A · B
template <typename T>
void gemm_nn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  const std::size_t n = b.cols;
  for (std::size_t i = 0; i < a.rows; ++i) {
    T* ci = c.data.data() + i * n;
    for (std::size_t p = 0; p < a.cols; ++p) {
      const T av = a(i, p);
      if (av == T(0)) continue;
      const T* bp = b.data.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C += A · Bᵀ
template <typename T>
void gemm_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  const std::size_t k = a.cols;
  for (std::size_t i = 0; i < a.rows; ++i) {
    const T* ai = a.data.data() + i * k;
    for (std::size_t j = 0; j < b.rows; ++j) {
      const T* bj = b.data.data() + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c(i, j) += acc;
    }
  }
}

// C += Aᵀ · B
template <typename T>
void gemm_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  const std::size_t n = b.cols;
  for (std::size_t i = 0; i < a.rows; ++i) {
    const T* bi = b.data.data() + i * n;
    for (std::size_t p = 0; p < a.cols; ++p) {
      const T av = a(i, p);
      if (av == T(0)) continue;
      T* cp = c.data.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace

// ---- Matrix ---------------------------------------------------------------

template <typename T>
Matrix<T>::Matrix(std::size_t r, std::size_t c, std::vector<T> values)
    : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != r * c) {
    throw ShapeError("matrix " + shape_str(r, c) + " given " +
                     std::to_string(data.size()) + " values");
  }
}

template <typename T>
Matrix<T> Matrix<T>::from_rows(const std::vector<std::vector<T>>& rows) {
  Matrix<T> m(rows.size(), rows.empty() ? 0 : rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != m.cols) throw ShapeError("ragged row list");
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  }
  return m;
}

template <typename T>
bool Matrix<T>::all_finite() const {
  return std::all_of(data.begin(), data.end(),
                     [](T v) { return std::isfinite(v); });
}

// ---- Tensor ---------------------------------------------------------------

template <typename T>
const Matrix<T>& Tensor<T>::value() const {
  return graph_->node(id_).value();
}

template <typename T>
const Matrix<T>& Tensor<T>::grad() const {
  auto& n = graph_->node(id_);
  if (n.param != nullptr) return n.param->grad;
  return graph_->grad_of(id_);
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return graph_->node(id_).requires_grad;
}

template <typename T>
T Tensor<T>::item() const {
  const auto& v = value();
  if (v.rows != 1 || v.cols != 1) {
    throw ShapeError("item() on non-scalar " + shape_str(v.rows, v.cols));
  }
  return v.data[0];
}

// ---- Graph ----------------------------------------------------------------

template <typename T>
Tensor<T> Graph<T>::constant(Matrix<T> value) {
  Node n;
  n.storage = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <typename T>
Tensor<T> Graph<T>::variable(Matrix<T> value) {
  owned_.emplace_back("", std::move(value));
  Node n;
  n.view = &owned_.back().value;
  n.param = &owned_.back();
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <typename T>
Tensor<T> Graph<T>::param(Parameter<T>& p) {
  for (const auto& [bound, id] : bound_) {
    if (bound == &p) return {this, id};
  }
  Node n;
  n.view = &p.value;
  n.param = &p;
  n.requires_grad = p.requires_grad;
  nodes_.push_back(std::move(n));
  bound_.emplace_back(&p, nodes_.size() - 1);
  return {this, nodes_.size() - 1};
}

template <typename T>
Tensor<T> Graph<T>::param(const Parameter<T>& p) {
  for (const auto& [bound, id] : bound_) {
    if (bound == &p) return {this, id};
  }
  Node n;
  n.view = &p.value;
  nodes_.push_back(std::move(n));
  bound_.emplace_back(&p, nodes_.size() - 1);
  return {this, nodes_.size() - 1};
}

template <typename T>
Tensor<T> Graph<T>::record(Matrix<T> value, std::vector<std::size_t> inputs,
                           BackwardFn fn) {
  Node n;
  n.storage = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](auto id) {
    return nodes_[id].requires_grad;
  });
  if (n.requires_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

template <typename T>
Matrix<T>& Graph<T>::grad_of(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.rows != n.value().rows || n.grad.cols != n.value().cols) {
    n.grad = Matrix<T>(n.value().rows, n.value().cols);
  }
  return n.grad;
}

template <typename T>
void Graph<T>::backward(const Tensor<T>& loss) {
  if (&loss.graph() != this) {
    throw std::invalid_argument("backward: loss belongs to another graph");
  }
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw ShapeError("backward requires a 1x1 loss, got " +
                     shape_str(loss.rows(), loss.cols()));
  }
  const std::size_t last = loss.id();
  for (std::size_t i = 0; i <= last; ++i) {
    if (nodes_[i].requires_grad) grad_of(i).fill(T(0));
  }
  if (!nodes_[last].requires_grad) return;
  grad_of(last).data[0] = T(1);
  for (std::size_t i = last + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (n.requires_grad && n.backward) n.backward(*this, i);
  }
  for (std::size_t i = 0; i <= last; ++i) {
    auto& n = nodes_[i];
    if (n.param == nullptr || !n.requires_grad) continue;
    auto& acc = n.param->grad.data;
    const auto& g = n.grad.data;
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k];
  }
}

template <typename T>
void Graph<T>::zero_grad() {
  for (auto& p : owned_) p.zero_grad();
}

// ---- products -------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_graph(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_of(a) +
                     " x " + shape_of(b));
  }
  Matrix<T> out(a.rows(), b.cols());
  gemm_nn(a.value(), b.value(), out);
  const auto ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib},
                          [ia, ib](Graph<T>& g, std::size_t self) {
                            const auto& dc = g.node(self).grad;
                            if (g.wants_grad(ia)) {
                              gemm_nt(dc, g.node(ib).value(), g.grad_of(ia));
                            }
                            if (g.wants_grad(ib)) {
                              gemm_tn(g.node(ia).value(), dc, g.grad_of(ib));
                            }
                          });
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_graph(a, b);
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions differ " + shape_of(a) +
                     " x " + shape_of(b) + "^T");
  }
  Matrix<T> out(a.rows(), b.rows());
  gemm_nt(a.value(), b.value(), out);
  const auto ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib},
                          [ia, ib](Graph<T>& g, std::size_t self) {
                            const auto& dc = g.node(self).grad;
                            if (g.wants_grad(ia)) {
                              gemm_nn(dc, g.node(ib).value(), g.grad_of(ia));
                            }
                            if (g.wants_grad(ib)) {
                              gemm_tn(dc, g.node(ia).value(), g.grad_of(ib));
                            }
                          });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  const auto& v = a.value();
  Matrix<T> out(v.cols, v.rows);
  for (std::size_t r = 0; r < v.rows; ++r)
    for (std::size_t c = 0; c < v.cols; ++c) out(c, r) = v(r, c);
  const auto ia = a.id();
  return a.graph().record(std::move(out), {ia},
                          [ia](Graph<T>& g, std::size_t self) {
                            const auto& dy = g.node(self).grad;
                            auto& dx = g.grad_of(ia);
                            for (std::size_t r = 0; r < dx.rows; ++r)
                              for (std::size_t c = 0; c < dx.cols; ++c)
                                dx(r, c) += dy(c, r);
                          });
}

// ---- elementwise ----------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  Matrix<T> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t k = 0; k < out.data.size(); ++k) out.data[k] += bv[k];
  const auto ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib},
                          [ia, ib](Graph<T>& g, std::size_t self) {
                            const auto& dy = g.node(self).grad.data;
                            for (auto id : {ia, ib}) {
                              if (!g.wants_grad(id)) continue;
                              auto& dx = g.grad_of(id).data;
                              for (std::size_t k = 0; k < dx.size(); ++k)
                                dx[k] += dy[k];
                            }
                          });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  Matrix<T> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t k = 0; k < out.data.size(); ++k) out.data[k] -= bv[k];
  const auto ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib},
                          [ia, ib](Graph<T>& g, std::size_t self) {
                            const auto& dy = g.node(self).grad.data;
                            if (g.wants_grad(ia)) {
                              auto& dx = g.grad_of(ia).data;
                              for (std::size_t k = 0; k < dx.size(); ++k)
                                dx[k] += dy[k];
                            }
                            if (g.wants_grad(ib)) {
                              auto& dx = g.grad_of(ib).data;
                              for (std::size_t k = 0; k < dx.size(); ++k)
                                dx[k] -= dy[k];
                            }
                          });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  Matrix<T> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t k = 0; k < out.data.size(); ++k) out.data[k] *= bv[k];
  const auto ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib},
                          [ia, ib](Graph<T>& g, std::size_t self) {
                            const auto& dy = g.node(self).grad.data;
                            const auto& av = g.node(ia).value().data;
                            const auto& bv = g.node(ib).value().data;
                            if (g.wants_grad(ia)) {
                              auto& dx = g.grad_of(ia).data;
                              for (std::size_t k = 0; k < dx.size(); ++k)
                                dx[k] += dy[k] * bv[k];
                            }
                            if (g.wants_grad(ib)) {
                              auto& dx = g.grad_of(ib).data;
                              for (std::size_t k = 0; k < dx.size(); ++k)
                                dx[k] += dy[k] * av[k];
                            }
                          });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Matrix<T> out = a.value();
  for (auto& v : out.data) v *= s;
  const auto ia = a.id();
  return a.graph().record(std::move(out), {ia},
                          [ia, s](Graph<T>& g, std::size_t self) {
                            const auto& dy = g.node(self).grad.data;
                            auto& dx = g.grad_of(ia).data;
                            for (std::size_t k = 0; k < dx.size(); ++k)
                              dx[k] += s * dy[k];
                          });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  Matrix<T> out = a.value();
  for (auto& v : out.data) v += s;
  const auto ia = a.id();
  return a.graph().record(std::move(out), {ia},
                          [ia](Graph<T>& g, std::size_t self) {
                            const auto& dy = g.node(self).grad.data;
                            auto& dx = g.grad_of(ia).data;
                            for (std::size_t k = 0; k < dx.size(); ++k)
                              dx[k] += dy[k];
                          });
}

// ---- softmax family -------------------------------------------------------

namespace {

template <typename T>
void require_temperature(const char* op, T temperature) {
  if (!(temperature > T(0))) {
    throw std::invalid_argument(std::string(op) +
                                ": temperature must be positive");
  }
}

// In-place row softmax of x·scale over columns [0, limit).
template <typename T>
void softmax_row(std::span<const T> x, std::span<T> y, std::size_t limit,
                 T scale) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t c = 0; c < limit; ++c) mx = std::max(mx, x[c] * scale);
  T sum = T(0);
  for (std::size_t c = 0; c < limit; ++c) {
    y[c] = std::exp(x[c] * scale - mx);
    sum += y[c];
  }
  for (std::size_t c = 0; c < limit; ++c) y[c] /= sum;
  for (std::size_t c = limit; c < y.size(); ++c) y[c] = T(0);
}

// dx += scale · y ⊙ (dy − ⟨dy, y⟩) per row.
template <typename T>
void softmax_backward(const Matrix<T>& y, const Matrix<T>& dy, Matrix<T>& dx,
                      T scale) {
  for (std::size_t r = 0; r < y.rows; ++r) {
    auto yr = y.row(r);
    auto dyr = dy.row(r);
    auto dxr = dx.row(r);
    T dot = T(0);
    for (std::size_t c = 0; c < y.cols; ++c) dot += dyr[c] * yr[c];
    for (std::size_t c = 0; c < y.cols; ++c)
      dxr[c] += scale * yr[c] * (dyr[c] - dot);
  }
}

}  // namespace

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& t, T temperature) {
  require_temperature("softmax_rows", temperature);
  const auto& x = t.value();
  const T s = T(1) / temperature;
  Matrix<T> out(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r)
    softmax_row<T>(x.row(r), out.row(r), x.cols, s);
  const auto it = t.id();
  return t.graph().record(std::move(out), {it},
                          [it, s](Graph<T>& g, std::size_t self) {
                            const auto& n = g.node(self);
                            softmax_backward(n.value(), n.grad, g.grad_of(it), s);
                          });
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& t, T temperature) {
  require_temperature("log_softmax_rows", temperature);
  const auto& x = t.value();
  const T s = T(1) / temperature;
  Matrix<T> out(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    auto xr = x.row(r);
    auto yr = out.row(r);
    T mx = -std::numeric_limits<T>::infinity();
    for (auto v : xr) mx = std::max(mx, v * s);
    T sum = T(0);
    for (auto v : xr) sum += std::exp(v * s - mx);
    const T lse = mx + std::log(sum);
    for (std::size_t c = 0; c < x.cols; ++c) yr[c] = xr[c] * s - lse;
  }
  const auto it = t.id();
  return t.graph().record(
      std::move(out), {it}, [it, s](Graph<T>& g, std::size_t self) {
        const auto& n = g.node(self);
        auto& dx = g.grad_of(it);
        for (std::size_t r = 0; r < n.value().rows; ++r) {
          auto yr = n.value().row(r);
          auto dyr = n.grad.row(r);
          auto dxr = dx.row(r);
          T total = T(0);
          for (auto v : dyr) total += v;
          for (std::size_t c = 0; c < n.value().cols; ++c)
            dxr[c] += s * (dyr[c] - std::exp(yr[c]) * total);
        }
      });
}

template <typename T>
Tensor<T> causal_softmax_rows(const Tensor<T>& t, std::size_t offset,
                              T scale) {
  const auto& x = t.value();
  Matrix<T> out(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const std::size_t limit = std::min(x.cols, r + offset + 1);
    softmax_row<T>(x.row(r), out.row(r), limit, scale);
  }
  const auto it = t.id();
  return t.graph().record(
      std::move(out), {it}, [it, scale](Graph<T>& g, std::size_t self) {
        const auto& n = g.node(self);
        softmax_backward(n.value(), n.grad, g.grad_of(it), scale);
      });
}

// ---- reductions -----------------------------------------------------------

template <typename T>
Tensor<T> mean_rows(const Tensor<T>& t) {
  const auto& x = t.value();
  if (x.rows == 0) throw ShapeError("mean_rows: empty input");
  Matrix<T> out(1, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r)
    for (std::size_t c = 0; c < x.cols; ++c) out(0, c) += x(r, c);
  const T inv = T(1) / static_cast<T>(x.rows);
  for (auto& v : out.data) v *= inv;
  const auto it = t.id();
  return t.graph().record(std::move(out), {it},
                          [it, inv](Graph<T>& g, std::size_t self) {
                            const auto& dy = g.node(self).grad;
                            auto& dx = g.grad_of(it);
                            for (std::size_t r = 0; r < dx.rows; ++r)
                              for (std::size_t c = 0; c < dx.cols; ++c)
                                dx(r, c) += inv * dy(0, c);
                          });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& t) {
  const auto& x = t.value();
  Matrix<T> out(1, 1);
  out.data[0] = std::accumulate(x.data.begin(), x.data.end(), T(0));
  const auto it = t.id();
  return t.graph().record(std::move(out), {it},
                          [it](Graph<T>& g, std::size_t self) {
                            const T dy = g.node(self).grad.data[0];
                            for (auto& v : g.grad_of(it).data) v += dy;
                          });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& t) {
  if (t.value().empty()) throw ShapeError("mean_all: empty input");
  return scale(sum_all(t), T(1) / static_cast<T>(t.value().size()));
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& t) {
  const auto& x = t.value();
  Matrix<T> out(x.rows, x.cols);
  std::vector<T> norms(x.rows);
  for (std::size_t r = 0; r < x.rows; ++r) {
    T ss = T(0);
    for (auto v : x.row(r)) ss += v * v;
    const T n = std::sqrt(ss);
    if (!std::isfinite(n)) {
      throw std::domain_error("l2_normalize_rows: row " + std::to_string(r) +
                              " is non-finite");
    }
    if (!(n >= T(1e-12))) {
      throw std::domain_error("l2_normalize_rows: row " + std::to_string(r) +
                              " has near-zero norm (degenerate embedding)");
    }
    norms[r] = n;
    for (std::size_t c = 0; c < x.cols; ++c) out(r, c) = x(r, c) / n;
  }
  const auto it = t.id();
  return t.graph().record(
      std::move(out), {it},
      [it, norms = std::move(norms)](Graph<T>& g, std::size_t self) {
        const auto& n = g.node(self);
        auto& dx = g.grad_of(it);
        for (std::size_t r = 0; r < n.value().rows; ++r) {
          auto yr = n.value().row(r);
          auto dyr = n.grad.row(r);
          T dot = T(0);
          for (std::size_t c = 0; c < yr.size(); ++c) dot += yr[c] * dyr[c];
          for (std::size_t c = 0; c < yr.size(); ++c)
            dx(r, c) += (dyr[c] - yr[c] * dot) / norms[r];
        }
      });
}

// ---- structural -----------------------------------------------------------

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    require_same_graph(parts.front(), p);
    if (p.cols() != cols) {
      throw ShapeError("concat_rows: column mismatch " +
                       shape_of(parts.front()) + " vs " + shape_of(p));
    }
    rows += p.rows();
    ids.push_back(p.id());
  }
  Matrix<T> out(rows, cols);
  auto dst = out.data.begin();
  for (const auto& p : parts) {
    dst = std::copy(p.value().data.begin(), p.value().data.end(), dst);
  }
  auto inputs = ids;
  return parts.front().graph().record(
      std::move(out), std::move(inputs),
      [ids = std::move(ids)](Graph<T>& g, std::size_t self) {
        const auto& dy = g.node(self).grad.data;
        std::size_t offset = 0;
        for (auto id : ids) {
          const std::size_t n = g.node(id).value().data.size();
          if (g.wants_grad(id)) {
            auto& dx = g.grad_of(id).data;
            for (std::size_t k = 0; k < n; ++k) dx[k] += dy[offset + k];
          }
          offset += n;
        }
      });
}

template <typename T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    require_same_graph(parts.front(), p);
    if (p.rows() != rows) {
      throw ShapeError("concat_cols: row mismatch " + shape_of(parts.front()) +
                       " vs " + shape_of(p));
    }
    cols += p.cols();
    ids.push_back(p.id());
  }
  Matrix<T> out(rows, cols);
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(v.row(r).begin(), v.row(r).end(), out.row(r).begin() + c0);
    c0 += v.cols;
  }
  auto inputs = ids;
  return parts.front().graph().record(
      std::move(out), std::move(inputs),
      [ids = std::move(ids)](Graph<T>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        std::size_t c0 = 0;
        for (auto id : ids) {
          const std::size_t w = g.node(id).value().cols;
          if (g.wants_grad(id)) {
            auto& dx = g.grad_of(id);
            for (std::size_t r = 0; r < dx.rows; ++r)
              for (std::size_t c = 0; c < w; ++c) dx(r, c) += dy(r, c0 + c);
          }
          c0 += w;
        }
      });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& t, std::size_t begin, std::size_t end) {
  const auto& x = t.value();
  if (begin > end || end > x.rows) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") outside " + shape_of(t));
  }
  Matrix<T> out(end - begin, x.cols);
  std::copy(x.data.begin() + begin * x.cols, x.data.begin() + end * x.cols,
            out.data.begin());
  const auto it = t.id();
  return t.graph().record(std::move(out), {it},
                          [it, begin](Graph<T>& g, std::size_t self) {
                            const auto& dy = g.node(self).grad.data;
                            auto& dx = g.grad_of(it);
                            T* dst = dx.data.data() + begin * dx.cols;
                            for (std::size_t k = 0; k < dy.size(); ++k)
                              dst[k] += dy[k];
                          });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& t, std::size_t begin, std::size_t end) {
  const auto& x = t.value();
  if (begin > end || end > x.cols) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") outside " + shape_of(t));
  }
  const std::size_t w = end - begin;
  Matrix<T> out(x.rows, w);
  for (std::size_t r = 0; r < x.rows; ++r)
    for (std::size_t c = 0; c < w; ++c) out(r, c) = x(r, begin + c);
  const auto it = t.id();
  return t.graph().record(std::move(out), {it},
                          [it, begin](Graph<T>& g, std::size_t self) {
                            const auto& dy = g.node(self).grad;
                            auto& dx = g.grad_of(it);
                            for (std::size_t r = 0; r < dy.rows; ++r)
                              for (std::size_t c = 0; c < dy.cols; ++c)
                                dx(r, begin + c) += dy(r, c);
                          });
}

template <typename T>
Tensor<T> select_rows(const Tensor<T>& t, std::span<const std::size_t> rows) {
  const auto& x = t.value();
  Matrix<T> out(rows.size(), x.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows) {
      throw ShapeError("select_rows: row " + std::to_string(rows[i]) +
                       " outside " + shape_of(t));
    }
    std::copy(x.row(rows[i]).begin(), x.row(rows[i]).end(),
              out.row(i).begin());
  }
  const auto it = t.id();
  return t.graph().record(
      std::move(out), {it},
      [it, idx = std::vector<std::size_t>(rows.begin(), rows.end())](
          Graph<T>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        auto& dx = g.grad_of(it);
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t c = 0; c < dy.cols; ++c) dx(idx[i], c) += dy(i, c);
      });
}

template <typename T>
Tensor<T> element(const Tensor<T>& t, std::size_t r, std::size_t c) {
  if (r >= t.rows() || c >= t.cols()) {
    throw ShapeError("element: (" + std::to_string(r) + "," +
                     std::to_string(c) + ") outside " + shape_of(t));
  }
  Matrix<T> out(1, 1, t.value()(r, c));
  const auto it = t.id();
  return t.graph().record(std::move(out), {it},
                          [it, r, c](Graph<T>& g, std::size_t self) {
                            g.grad_of(it)(r, c) += g.node(self).grad.data[0];
                          });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> ids) {
  const auto& x = table.value();
  Matrix<T> out(ids.size(), x.cols);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= x.rows) {
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) +
                              " outside table of " + std::to_string(x.rows) +
                              " rows");
    }
    auto src = x.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  const auto it = table.id();
  return table.graph().record(
      std::move(out), {it},
      [it, idx = std::vector<int>(ids.begin(), ids.end())](Graph<T>& g,
                                                           std::size_t self) {
        const auto& dy = g.node(self).grad;
        auto& dx = g.grad_of(it);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          auto dst = dx.row(static_cast<std::size_t>(idx[i]));
          auto src = dy.row(i);
          for (std::size_t c = 0; c < dy.cols; ++c) dst[c] += src[c];
        }
      });
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  require_same_graph(x, gain);
  const auto& xv = x.value();
  const auto& gv = gain.value();
  if (gv.rows != 1 || gv.cols != xv.cols) {
    throw ShapeError("rms_norm: gain " + shape_of(gain) + " for input " +
                     shape_of(x));
  }
  Matrix<T> out(xv.rows, xv.cols);
  std::vector<T> inv_rms(xv.rows);
  for (std::size_t r = 0; r < xv.rows; ++r) {
    T ss = T(0);
    for (auto v : xv.row(r)) ss += v * v;
    inv_rms[r] = T(1) / std::sqrt(ss / static_cast<T>(xv.cols) + eps);
    for (std::size_t c = 0; c < xv.cols; ++c)
      out(r, c) = xv(r, c) * inv_rms[r] * gv(0, c);
  }
  const auto ix = x.id(), ig = gain.id();
  return x.graph().record(
      std::move(out), {ix, ig},
      [ix, ig, inv_rms = std::move(inv_rms)](Graph<T>& g, std::size_t self) {
        const auto& dy = g.node(self).grad;
        const auto& xv = g.node(ix).value();
        const auto& gv = g.node(ig).value();
        const std::size_t n = xv.cols;
        for (std::size_t r = 0; r < xv.rows; ++r) {
          const T s = inv_rms[r];
          if (g.wants_grad(ig)) {
            auto& dg = g.grad_of(ig);
            for (std::size_t c = 0; c < n; ++c)
              dg(0, c) += dy(r, c) * xv(r, c) * s;
          }
          if (g.wants_grad(ix)) {
            T dot = T(0);
            for (std::size_t c = 0; c < n; ++c)
              dot += dy(r, c) * gv(0, c) * xv(r, c) * s;
            dot /= static_cast<T>(n);
            auto& dx = g.grad_of(ix);
            for (std::size_t c = 0; c < n; ++c)
              dx(r, c) += s * (dy(r, c) * gv(0, c) - xv(r, c) * s * dot);
          }
        }
      });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  Matrix<T> out = x.value();
  for (auto& v : out.data) v = v / (T(1) + std::exp(-v));
  const auto ix = x.id();
  return x.graph().record(std::move(out), {ix},
                          [ix](Graph<T>& g, std::size_t self) {
                            const auto& dy = g.node(self).grad.data;
                            const auto& xv = g.node(ix).value().data;
                            auto& dx = g.grad_of(ix).data;
                            for (std::size_t k = 0; k < dx.size(); ++k) {
                              const T sig = T(1) / (T(1) + std::exp(-xv[k]));
                              dx[k] += dy[k] * sig * (T(1) + xv[k] * (T(1) - sig));
                            }
                          });
}

template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
  return x.graph().constant(x.value());
}

// ---- gradient check -------------------------------------------------------

template <typename T>
double grad_check(const std::function<Tensor<T>(Graph<T>&)>& loss_fn,
                  std::span<Parameter<T>* const> params, double step) {
  auto evaluate = [&]() {
    Graph<T> g;
    const double v = static_cast<double>(loss_fn(g).item());
    if (!std::isfinite(v)) {
      throw std::domain_error("grad_check: loss is not finite");
    }
    return v;
  };

  for (auto* p : params) p->zero_grad();
  {
    Graph<T> g;
    auto loss = loss_fn(g);
    if (!std::isfinite(static_cast<double>(loss.item()))) {
      throw std::domain_error("grad_check: loss is not finite");
    }
    g.backward(loss);
  }

  double worst = 0.0;
  for (auto* p : params) {
    if (!p->requires_grad) continue;
    const Matrix<T> analytic = p->grad;
    for (std::size_t k = 0; k < p->value.data.size(); ++k) {
      const T orig = p->value.data[k];
      p->value.data[k] = orig + static_cast<T>(step);
      const double up = evaluate();
      p->value.data[k] = orig - static_cast<T>(step);
      const double down = evaluate();
      p->value.data[k] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = static_cast<double>(analytic.data[k]);
      const double denom =
          std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

// ---- explicit instantiations ---------------------------------------------

#define LASER_AD_INSTANTIATE(T)                                              \
  template struct Matrix<T>;                                                 \
  template class Tensor<T>;                                                  \
  template class Graph<T>;                                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> transpose(const Tensor<T>&);                            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> scale(const Tensor<T>&, T);                             \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                        \
  template Tensor<T> softmax_rows(const Tensor<T>&, T);                      \
  template Tensor<T> log_softmax_rows(const Tensor<T>&, T);                  \
  template Tensor<T> causal_softmax_rows(const Tensor<T>&, std::size_t, T);  \
  template Tensor<T> mean_rows(const Tensor<T>&);                            \
  template Tensor<T> sum_all(const Tensor<T>&);                              \
  template Tensor<T> mean_all(const Tensor<T>&);                             \
  template Tensor<T> l2_normalize_rows(const Tensor<T>&);                    \
  template Tensor<T> concat_rows(std::span<const Tensor<T>>);                \
  template Tensor<T> concat_cols(std::span<const Tensor<T>>);                \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t); \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t); \
  template Tensor<T> select_rows(const Tensor<T>&,                           \
                                 std::span<const std::size_t>);              \
  template Tensor<T> element(const Tensor<T>&, std::size_t, std::size_t);    \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const int>);    \
  template Tensor<T> rms_norm(const Tensor<T>&, const Tensor<T>&, T);        \
  template Tensor<T> silu(const Tensor<T>&);                                 \
  template Tensor<T> detach(const Tensor<T>&);                               \
  template double grad_check(const std::function<Tensor<T>(Graph<T>&)>&,     \
                             std::span<Parameter<T>* const>, double);

LASER_AD_INSTANTIATE(float)
LASER_AD_INSTANTIATE(double)

#undef LASER_AD_INSTANTIATE

}  // namespace laser::ad
