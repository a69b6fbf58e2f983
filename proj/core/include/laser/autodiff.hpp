#pragma once

// Minimal dense 2-D tensor engine with tape-based reverse-mode
// differentiation. A Graph owns every node created during one forward pass;
// Tensor is a cheap handle (graph pointer + node index). Learnable state
// lives in Parameter objects that outlive graphs and accumulate gradients.

#include <algorithm>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace laser::ad {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T(0))
      : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<T> values);

  static Matrix from_rows(const std::vector<std::vector<T>>& rows);

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data[r * cols + c];
  }
  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  void fill(T v) { std::fill(data.begin(), data.end(), v); }
  bool all_finite() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

std::string shape_str(std::size_t rows, std::size_t cols);

// Persistent learnable tensor. Gradients from every backward pass that
// reaches it are summed into `grad` until zero_grad() is called.
template <typename T>
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, std::size_t rows, std::size_t cols)
      : name(std::move(name)), value(rows, cols), grad(rows, cols) {}
  Parameter(std::string name, Matrix<T> init)
      : name(std::move(name)),
        value(std::move(init)),
        grad(value.rows, value.cols) {}

  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  bool requires_grad = true;

  void zero_grad() { grad.fill(T(0)); }
  std::size_t rows() const { return value.rows; }
  std::size_t cols() const { return value.cols; }
};

template <typename T>
class Graph;

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
  const Matrix<T>& value() const;
  // Leaves report their accumulated gradient; interior nodes report the
  // gradient from the most recent backward pass.
  const Matrix<T>& grad() const;
  bool requires_grad() const;
  T item() const;
  T at(std::size_t r, std::size_t c) const { return value()(r, c); }

  Graph<T>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  struct Node {
    Matrix<T> storage;
    const Matrix<T>* view = nullptr;  // parameter leaves alias their value
    Matrix<T> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;

    const Matrix<T>& value() const { return view ? *view : storage; }
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Non-differentiable input.
  Tensor<T> constant(Matrix<T> value);
  // Differentiable leaf owned by the graph; its gradient accumulates.
  Tensor<T> variable(Matrix<T> value);
  // Leaf bound to an external parameter. Repeated calls for the same
  // parameter return the same node. The parameter must stay alive and
  // unmodified while the graph is in use.
  Tensor<T> param(Parameter<T>& p);
  // Read-only view of a parameter; never receives gradient.
  Tensor<T> param(const Parameter<T>& p);

  // Records a node computed from `inputs`. The node requires grad iff any
  // input does; `fn` is only kept in that case.
  Tensor<T> record(Matrix<T> value, std::vector<std::size_t> inputs,
                   BackwardFn fn);

  // Reverse sweep from a 1x1 loss. Interior gradients are recomputed from
  // scratch on each call; leaf and parameter gradients accumulate.
  void backward(const Tensor<T>& loss);

  // Clears gradients of graph-owned leaves (parameters keep theirs).
  void zero_grad();

  std::size_t size() const { return nodes_.size(); }
  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }

  // Gradient buffer of a node, allocated on first use.
  Matrix<T>& grad_of(std::size_t id);
  bool wants_grad(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  std::deque<Node> nodes_;
  std::deque<Parameter<T>> owned_;
  std::vector<std::pair<const Parameter<T>*, std::size_t>> bound_;
};

// ---- primitive operations -------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// a · bᵀ without materializing the transpose.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s);

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& t, T temperature = T(1));
template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& t, T temperature = T(1));
// Row i may attend to columns [0, i + offset]; other entries become 0.
template <typename T>
Tensor<T> causal_softmax_rows(const Tensor<T>& t, std::size_t offset, T scale);

template <typename T>
Tensor<T> mean_rows(const Tensor<T>& t);
template <typename T>
Tensor<T> sum_all(const Tensor<T>& t);
template <typename T>
Tensor<T> mean_all(const Tensor<T>& t);
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& t);

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts);
template <typename T>
Tensor<T> concat_rows(std::initializer_list<Tensor<T>> parts) {
  return concat_rows<T>(std::span<const Tensor<T>>(parts.begin(), parts.size()));
}
template <typename T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts);
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& t, std::size_t begin, std::size_t end);
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& t, std::size_t begin, std::size_t end);
template <typename T>
Tensor<T> select_rows(const Tensor<T>& t, std::span<const std::size_t> rows);
template <typename T>
Tensor<T> element(const Tensor<T>& t, std::size_t r, std::size_t c);

// Embedding lookup: row i of the result is row ids[i] of `table`.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> ids);

// x / rms(x) * gain, per row; gain is 1×cols.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps);
template <typename T>
Tensor<T> silu(const Tensor<T>& x);
template <typename T>
Tensor<T> detach(const Tensor<T>& x);

// ---- gradient checking ----------------------------------------------------

// Central finite-difference audit over every coordinate of every parameter
// with requires_grad set. `loss_fn` must rebuild its graph from the current
// parameter values on each call. Returns the max over coordinates of
// |analytic - numeric| / max(1, |analytic|, |numeric|).
template <typename T>
double grad_check(const std::function<Tensor<T>(Graph<T>&)>& loss_fn,
                  std::span<Parameter<T>* const> params, double step = 1e-5);

}  // namespace laser::ad
