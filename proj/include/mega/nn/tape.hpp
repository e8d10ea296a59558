#pragma once

#include <functional>
#include <span>
#include <vector>

#include "mega/nn/parameter.hpp"

namespace mega::nn {

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape{nullptr};
  int id{-1};

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

/// Reverse-mode recording of a single computation. One tape per graph;
/// tapes over the same (read-only) parameters may run concurrently as long
/// as each writes gradients into its own buffers.
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const { return record_; }

  Var constant(Matrix value);
  Var param(const Parameter& p);

  /// Backpropagates d(root)/d(.) with root a 1x1 value. Parameter gradients
  /// are added to `grads[param.id]`; with an empty span they are added to
  /// the parameters' own grad fields (`params` must then be given).
  void backward(Var root, std::span<Matrix> grads);
  void backward(Var root, ParameterSet& params);

  const Matrix& value(int id) const { return nodes_[id].value; }

  // Op authoring interface.
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  Matrix& grad(int id);
  Var push(Matrix value, std::initializer_list<Var> inputs, std::function<void(Tape&, int self)> backward);
  Var push(Matrix value, const std::vector<Var>& inputs, std::function<void(Tape&, int self)> backward);
  const Matrix& out_grad(int id) const { return nodes_[id].grad; }

  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(Tape&, int)> backward;
    const Parameter* param{nullptr};
    bool needs_grad{false};
  };
  void run_backward(Var root, std::span<Matrix> grads, ParameterSet* params);

  bool record_;
  std::vector<Node> nodes_;
};

}  // namespace mega::nn
