#pragma once

#include <functional>
#include <string>
#include <vector>

#include "handrec/errors.hpp"

namespace handrec::ad {

class Tape;

// Dense row-major float64 tensor. `tape`/`node` bind a value to the tape that
// recorded it; detached tensors (tape == nullptr) act as constants.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  Tape* tape = nullptr;
  int node = -1;

  Tensor() = default;
  Tensor(std::vector<int> shp, std::vector<double> values);

  static Tensor zeros(const std::vector<int>& shape);
  static Tensor full(const std::vector<int>& shape, double value);
  static Tensor scalar(double value);
  static Tensor identity(int n);

  int size() const { return int(data.size()); }
  int rank() const { return int(shape.size()); }
  int rows() const;
  int cols() const;

  double& operator[](int i) { return data[size_t(i)]; }
  double operator[](int i) const { return data[size_t(i)]; }
  double& at(int r, int c);
  double at(int r, int c) const;

  bool on_tape() const { return tape != nullptr; }
  Tensor detached() const { return Tensor(shape, data); }

  double scalar_value() const;  // contract: size() == 1
};

int shape_size(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);
void check_finite(const Tensor& t, const char* op);

// Sparse matrix in sorted triplet form. Used for mesh upsamplers; rows hold
// interpolation weights, values are constants (never trained).
struct SparseMatrix {
  int rows = 0;
  int cols = 0;
  struct Entry {
    int row;
    int col;
    double value;
  };
  std::vector<Entry> entries;  // sorted by (row, col)
};

// Reverse-mode tape. Ops append nodes during the forward pass; backward walks
// ids in reverse (append order is already topological). One tape per pass,
// no shared mutable state between tapes.
class Tape {
 public:
  // Receives the node's output gradient; accumulates into input gradients.
  using BackwardFn = std::function<void(const Tensor& grad_out, Tape& tape)>;

  int record(const char* op, std::vector<int> input_nodes,
             std::vector<int> out_shape, BackwardFn backward);

  // Registers a leaf the caller wants gradients for.
  Tensor watch(const Tensor& value);

  // contract: root is scalar and recorded on this tape.
  void backward(const Tensor& root);

  // Gradient of the last backward() root w.r.t. t. Zeros for untouched nodes.
  Tensor grad(const Tensor& t) const;
  Tensor grad_of_node(int node) const;

  void accumulate(int node, const Tensor& g);

  int node_count() const { return int(nodes_.size()); }
  const std::string& op_name(int node) const { return nodes_[size_t(node)].op; }

 private:
  struct Node {
    std::string op;
    std::vector<int> inputs;
    std::vector<int> shape;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;  // parallel to nodes_, empty until touched
};

}  // namespace handrec::ad
