#pragma once

#include <Eigen/Dense>
#include <deque>
#include <string>
#include <vector>

namespace mega::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// Trainable tensor with its gradient and AdamW moments.
struct Parameter {
  std::string name;
  int id{-1};
  bool decay{true};      // subject to weight decay
  bool trainable{true};  // false: fixed statistics, skipped by the optimizer
  Matrix value;
  Matrix grad;
  Matrix first_moment;
  Matrix second_moment;
};

/// Owns parameters at stable addresses, in registration order.
class ParameterSet {
 public:
  Parameter& add(const std::string& name, Eigen::Index rows, Eigen::Index cols, bool decay = true);

  int size() const { return static_cast<int>(params_.size()); }
  Parameter& operator[](int i) { return params_[i]; }
  const Parameter& operator[](int i) const { return params_[i]; }
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();
  std::size_t num_values() const;

  /// Zeroed gradient buffers shaped like the parameters.
  std::vector<Matrix> make_gradients() const;

 private:
  std::deque<Parameter> params_;
};

}  // namespace mega::nn
