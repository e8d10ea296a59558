#include "mega/nn/parameter.hpp"

namespace mega::nn {

Parameter& ParameterSet::add(const std::string& name, Eigen::Index rows, Eigen::Index cols, bool decay) {
  Parameter& p = params_.emplace_back();
  p.name = name;
  p.id = static_cast<int>(params_.size()) - 1;
  p.decay = decay;
  p.value = Matrix::Zero(rows, cols);
  p.grad = Matrix::Zero(rows, cols);
  p.first_moment = Matrix::Zero(rows, cols);
  p.second_moment = Matrix::Zero(rows, cols);
  return p;
}

Parameter* ParameterSet::find(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

const Parameter* ParameterSet::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.grad.setZero();
}

std::size_t ParameterSet::num_values() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

std::vector<Matrix> ParameterSet::make_gradients() const {
  std::vector<Matrix> g;
  g.reserve(params_.size());
  for (const auto& p : params_) g.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  return g;
}

}  // namespace mega::nn
