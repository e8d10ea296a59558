#pragma once

#include <string>
#include <vector>

#include "mega/nn/ops.hpp"
#include "mega/rng.hpp"

namespace mega::nn {

inline constexpr double kInitStd = 0.02;

/// Fills with N(0, std^2) draws in row-major order.
void init_normal(Parameter& p, Rng& rng, double std = kInitStd);

/// Glorot-normal weights: std sqrt(2 / (in + out)).
double xavier_std(int in, int out);

struct Linear {
  Parameter* weight{nullptr};
  Parameter* bias{nullptr};

  /// std <= 0 selects xavier_std(in, out).
  static Linear create(ParameterSet& params, const std::string& name, int in, int out, Rng& rng, double std = 0.0);
  Var operator()(Tape& tape, Var x) const;
};

struct LayerNorm {
  Parameter* gain{nullptr};
  Parameter* bias{nullptr};

  static LayerNorm create(ParameterSet& params, const std::string& name, int dim);
  Var operator()(Tape& tape, Var x) const;
};

/// Projected multi-head attention: softmax(QK^T/sqrt(d_h)) V per head, concatenated, then W_o.
struct MultiHeadAttention {
  Linear query, key, value, output;
  int heads{1};

  static MultiHeadAttention create(ParameterSet& params, const std::string& name, int dim, int heads, Rng& rng);
  Var operator()(Tape& tape, Var x_q, Var x_kv, std::vector<Matrix>* weights = nullptr) const;
  /// Self-attention within each segment.
  Var operator()(Tape& tape, Var x, const std::vector<Segment>& segments) const;
};

/// Pre-norm block: x + Attn(LN(x)), then x + MLP(LN(x)).
struct TransformerBlock {
  LayerNorm norm1, norm2;
  MultiHeadAttention attn;
  Linear fc1, fc2;

  static TransformerBlock create(ParameterSet& params, const std::string& name, int dim, int heads, int mlp_ratio,
                                 Rng& rng);
  Var operator()(Tape& tape, Var x) const;
  Var operator()(Tape& tape, Var x, const std::vector<Segment>& segments) const;
};

}  // namespace mega::nn
