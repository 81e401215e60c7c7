#include "handrec/tensor.hpp"

#include <cmath>
#include <sstream>

namespace handrec::ad {

int shape_size(const std::vector<int>& shape) {
  int n = 1;
  for (int d : shape) {
    if (d <= 0) throw ContractError("tensor dimension must be positive, got " + std::to_string(d));
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<int> shp, std::vector<double> values) {
  if (shape_size(shp) != int(values.size())) {
    throw ContractError("tensor data size " + std::to_string(values.size()) +
                        " does not match shape " + shape_str(shp));
  }
  shape = std::move(shp);
  data = std::move(values);
}

Tensor Tensor::zeros(const std::vector<int>& shape) {
  return Tensor(shape, std::vector<double>(size_t(shape_size(shape)), 0.0));
}

Tensor Tensor::full(const std::vector<int>& shape, double value) {
  return Tensor(shape, std::vector<double>(size_t(shape_size(shape)), value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::identity(int n) {
  Tensor t = zeros({n, n});
  for (int i = 0; i < n; ++i) t.data[size_t(i * n + i)] = 1.0;
  return t;
}

int Tensor::rows() const {
  if (shape.empty()) throw ContractError("rows() on rank-0 tensor");
  return shape[0];
}

int Tensor::cols() const {
  if (rank() != 2) throw ContractError("cols() needs rank 2, got " + shape_str(shape));
  return shape[1];
}

double& Tensor::at(int r, int c) {
  if (rank() != 2) throw ContractError("at(r,c) needs rank 2, got " + shape_str(shape));
  return data[size_t(r) * size_t(shape[1]) + size_t(c)];
}

double Tensor::at(int r, int c) const { return const_cast<Tensor*>(this)->at(r, c); }

double Tensor::scalar_value() const {
  if (size() != 1) throw ContractError("scalar_value() on tensor with shape " + shape_str(shape));
  return data[0];
}

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
  }
}

int Tape::record(const char* op, std::vector<int> input_nodes,
                 std::vector<int> out_shape, BackwardFn backward) {
  Node n;
  n.op = op;
  n.inputs = std::move(input_nodes);
  n.shape = std::move(out_shape);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return int(nodes_.size()) - 1;
}

Tensor Tape::watch(const Tensor& value) {
  Tensor out = value.detached();
  out.tape = this;
  out.node = record("leaf", {}, out.shape, nullptr);
  return out;
}

void Tape::backward(const Tensor& root) {
  if (root.tape != this || root.node < 0 || root.node >= node_count()) {
    throw ContractError("backward root is not recorded on this tape");
  }
  if (root.size() != 1) {
    throw ContractError("backward root must be scalar, got shape " + shape_str(root.shape));
  }
  grads_.assign(nodes_.size(), Tensor{});
  grads_[size_t(root.node)] = Tensor::full(root.shape, 1.0);
  for (int i = root.node; i >= 0; --i) {
    if (grads_[size_t(i)].data.empty()) continue;
    if (nodes_[size_t(i)].backward) nodes_[size_t(i)].backward(grads_[size_t(i)], *this);
  }
}

Tensor Tape::grad(const Tensor& t) const {
  if (t.tape != this) throw ContractError("grad() of tensor not on this tape");
  return grad_of_node(t.node);
}

Tensor Tape::grad_of_node(int node) const {
  if (node < 0 || node >= node_count()) throw ContractError("grad of unknown node");
  if (grads_.empty()) throw ContractError("grad() before backward()");
  const Tensor& g = grads_[size_t(node)];
  if (g.data.empty()) return Tensor::zeros(nodes_[size_t(node)].shape);
  return g;
}

void Tape::accumulate(int node, const Tensor& g) {
  if (node < 0 || node >= node_count()) throw ContractError("accumulate on unknown node");
  Tensor& slot = grads_[size_t(node)];
  if (g.shape != nodes_[size_t(node)].shape) {
    throw ContractError("gradient shape " + shape_str(g.shape) + " does not match node shape " +
                        shape_str(nodes_[size_t(node)].shape) + " for op '" +
                        nodes_[size_t(node)].op + "'");
  }
  if (slot.data.empty()) {
    slot = g.detached();
  } else {
    for (int i = 0; i < g.size(); ++i) slot.data[size_t(i)] += g.data[size_t(i)];
  }
}

}  // namespace handrec::ad
