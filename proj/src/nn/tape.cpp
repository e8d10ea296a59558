#include "mega/nn/tape.hpp"

#include "mega/error.hpp"

namespace mega::nn {

const Matrix& Var::value() const { return tape->value(id); }

Var Tape::constant(Matrix value) {
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(const Parameter& p) {
  Node& n = nodes_.emplace_back();
  n.value = p.value;
  n.param = &p;
  n.needs_grad = record_;
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Matrix& Tape::grad(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Var Tape::push(Matrix value, std::initializer_list<Var> inputs, std::function<void(Tape&, int)> backward) {
  return push(std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Tape::push(Matrix value, const std::vector<Var>& inputs, std::function<void(Tape&, int)> backward) {
  bool needs = false;
  if (record_)
    for (const Var& v : inputs) needs = needs || nodes_[v.id].needs_grad;
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  n.needs_grad = needs;
  if (needs) n.backward = std::move(backward);
  return {this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward(Var root, std::span<Matrix> grads) { run_backward(root, grads, nullptr); }

void Tape::backward(Var root, ParameterSet& params) { run_backward(root, {}, &params); }

void Tape::run_backward(Var root, std::span<Matrix> grads, ParameterSet* params) {
  if (!record_) fail(ErrorKind::Config, "backward on a tape that does not record");
  if (root.tape != this || root.value().size() != 1) fail(ErrorKind::Shape, "backward root must be a scalar on this tape");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  grad(root.id).setOnes();
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.backward) {
      n.backward(*this, i);
    } else if (n.param != nullptr) {
      const int pid = n.param->id;
      if (params != nullptr) {
        (*params)[pid].grad += n.grad;
      } else {
        grads[pid] += n.grad;
      }
    }
  }
}

}  // namespace mega::nn
