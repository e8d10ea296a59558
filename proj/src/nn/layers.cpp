#include "mega/nn/layers.hpp"

#include <cmath>

#include "mega/error.hpp"

namespace mega::nn {

void init_normal(Parameter& p, Rng& rng, double std) {
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = std * rng.normal();
}

double xavier_std(int in, int out) { return std::sqrt(2.0 / (in + out)); }

Linear Linear::create(ParameterSet& params, const std::string& name, int in, int out, Rng& rng, double std) {
  Linear l;
  l.weight = &params.add(name + ".weight", in, out);
  l.bias = &params.add(name + ".bias", 1, out, false);
  init_normal(*l.weight, rng, std > 0.0 ? std : xavier_std(in, out));
  return l;
}

Var Linear::operator()(Tape& tape, Var x) const { return linear(x, tape.param(*weight), tape.param(*bias)); }

LayerNorm LayerNorm::create(ParameterSet& params, const std::string& name, int dim) {
  LayerNorm n;
  n.gain = &params.add(name + ".gain", 1, dim, false);
  n.bias = &params.add(name + ".bias", 1, dim, false);
  n.gain->value.setOnes();
  return n;
}

Var LayerNorm::operator()(Tape& tape, Var x) const { return layer_norm(x, tape.param(*gain), tape.param(*bias)); }

MultiHeadAttention MultiHeadAttention::create(ParameterSet& params, const std::string& name, int dim, int heads,
                                              Rng& rng) {
  if (heads < 1 || dim % heads != 0) fail(ErrorKind::Config, "attention width must be divisible by the head count");
  MultiHeadAttention a;
  a.heads = heads;
  a.query = Linear::create(params, name + ".query", dim, dim, rng);
  a.key = Linear::create(params, name + ".key", dim, dim, rng);
  a.value = Linear::create(params, name + ".value", dim, dim, rng);
  a.output = Linear::create(params, name + ".output", dim, dim, rng);
  return a;
}

Var MultiHeadAttention::operator()(Tape& tape, Var x_q, Var x_kv, std::vector<Matrix>* weights) const {
  const Var q = query(tape, x_q);
  const Var k = key(tape, x_kv);
  const Var v = value(tape, x_kv);
  return output(tape, attention(q, k, v, heads, weights));
}

Var MultiHeadAttention::operator()(Tape& tape, Var x, const std::vector<Segment>& segments) const {
  const Var q = query(tape, x);
  const Var k = key(tape, x);
  const Var v = value(tape, x);
  return output(tape, attention(q, k, v, heads, segments, segments));
}

TransformerBlock TransformerBlock::create(ParameterSet& params, const std::string& name, int dim, int heads,
                                          int mlp_ratio, Rng& rng) {
  TransformerBlock b;
  b.norm1 = LayerNorm::create(params, name + ".norm1", dim);
  b.attn = MultiHeadAttention::create(params, name + ".attn", dim, heads, rng);
  b.norm2 = LayerNorm::create(params, name + ".norm2", dim);
  b.fc1 = Linear::create(params, name + ".fc1", dim, dim * mlp_ratio, rng);
  b.fc2 = Linear::create(params, name + ".fc2", dim * mlp_ratio, dim, rng);
  return b;
}

Var TransformerBlock::operator()(Tape& tape, Var x) const { return (*this)(tape, x, {Segment{0, x.rows()}}); }

Var TransformerBlock::operator()(Tape& tape, Var x, const std::vector<Segment>& segments) const {
  x = add(x, attn(tape, norm1(tape, x), segments));
  return add(x, fc2(tape, gelu(fc1(tape, norm2(tape, x)))));
}

}  // namespace mega::nn
