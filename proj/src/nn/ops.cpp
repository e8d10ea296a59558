#include "mega/nn/ops.hpp"

#include <cmath>
#include <numbers>

#include "mega/error.hpp"
#include "mega/geometry.hpp"

namespace mega::nn {
namespace {

void require(bool ok, const char* what) {
  if (!ok) fail(ErrorKind::Shape, what);
}

void require_same(Var a, Var b, const char* what) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), what);
}

}  // namespace

Matrix softmax_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    out.row(i) = (x.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Tape& t = *a.tape;
  return t.push(a.value() * b.value(), {a, b}, [a, b](Tape& t, int self) {
    const Matrix& g = t.out_grad(self);
    if (t.needs_grad(a.id)) t.grad(a.id).noalias() += g * b.value().transpose();
    if (t.needs_grad(b.id)) t.grad(b.id).noalias() += a.value().transpose() * g;
  });
}

Var linear(Var x, Var w, Var b) {
  require(x.cols() == w.rows(), "linear: input width does not match weight rows");
  require(b.rows() == 1 && b.cols() == w.cols(), "linear: bias shape");
  Tape& t = *x.tape;
  Matrix y = x.value() * w.value();
  y.rowwise() += b.value().row(0);
  return t.push(std::move(y), {x, w, b}, [x, w, b](Tape& t, int self) {
    const Matrix& g = t.out_grad(self);
    if (t.needs_grad(x.id)) t.grad(x.id).noalias() += g * w.value().transpose();
    if (t.needs_grad(w.id)) t.grad(w.id).noalias() += x.value().transpose() * g;
    if (t.needs_grad(b.id)) t.grad(b.id) += g.colwise().sum();
  });
}

Var rowwise_linear(Var x, Var w, Var b) {
  const Eigen::Index n = x.rows(), in = x.cols();
  require(in > 0 && w.rows() % in == 0, "rowwise_linear: weight rows must be a multiple of the input width");
  const Eigen::Index blocks = w.rows() / in;
  require(blocks > 0 && n % blocks == 0, "rowwise_linear: rows must be a multiple of the block count");
  require(b.rows() == blocks && b.cols() == w.cols(), "rowwise_linear: bias shape");
  Matrix y(n, w.cols());
  for (Eigen::Index r = 0; r < n; ++r)
    y.row(r).noalias() = x.value().row(r) * w.value().middleRows((r % blocks) * in, in) + b.value().row(r % blocks);
  Tape& t = *x.tape;
  return t.push(std::move(y), {x, w, b}, [x, w, b, n, in, blocks](Tape& t, int self) {
    const Matrix& g = t.out_grad(self);
    for (Eigen::Index r = 0; r < n; ++r) {
      const Eigen::Index k = r % blocks;
      if (t.needs_grad(x.id))
        t.grad(x.id).row(r).noalias() += g.row(r) * w.value().middleRows(k * in, in).transpose();
      if (t.needs_grad(w.id))
        t.grad(w.id).middleRows(k * in, in).noalias() += x.value().row(r).transpose() * g.row(r);
      if (t.needs_grad(b.id)) t.grad(b.id).row(k) += g.row(r);
    }
  });
}

Var add(Var a, Var b) {
  require_same(a, b, "add: shapes differ");
  Tape& t = *a.tape;
  return t.push(a.value() + b.value(), {a, b}, [a, b](Tape& t, int self) {
    const Matrix& g = t.out_grad(self);
    if (t.needs_grad(a.id)) t.grad(a.id) += g;
    if (t.needs_grad(b.id)) t.grad(b.id) += g;
  });
}

Var sub(Var a, Var b) {
  require_same(a, b, "sub: shapes differ");
  Tape& t = *a.tape;
  return t.push(a.value() - b.value(), {a, b}, [a, b](Tape& t, int self) {
    const Matrix& g = t.out_grad(self);
    if (t.needs_grad(a.id)) t.grad(a.id) += g;
    if (t.needs_grad(b.id)) t.grad(b.id) -= g;
  });
}

Var scale(Var x, double s) {
  Tape& t = *x.tape;
  return t.push(x.value() * s, {x}, [x, s](Tape& t, int self) { t.grad(x.id) += s * t.out_grad(self); });
}

Var gelu(Var x) {
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  Matrix y = x.value().unaryExpr([&](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); });
  Tape& t = *x.tape;
  return t.push(std::move(y), {x}, [x, inv_sqrt2, inv_sqrt2pi](Tape& t, int self) {
    Matrix d = x.value().unaryExpr([&](double v) {
      return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
    });
    t.grad(x.id).array() += t.out_grad(self).array() * d.array();
  });
}

Var layer_norm(Var x, Var gain, Var bias) {
  const Eigen::Index n = x.rows(), d = x.cols();
  require(d >= 2, "layer_norm: width must be at least 2");
  require(gain.rows() == 1 && gain.cols() == d && bias.rows() == 1 && bias.cols() == d, "layer_norm: affine shape");
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mean).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + kLayerNormEps);
    xhat.row(i) = (x.value().row(i).array() - mean) * inv_std(i);
  }
  Matrix y = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  y.rowwise() += bias.value().row(0);
  Tape& t = *x.tape;
  return t.push(std::move(y), {x, gain, bias}, [x, gain, bias, xhat, inv_std](Tape& t, int self) {
    const Matrix& g = t.out_grad(self);
    if (t.needs_grad(gain.id)) t.grad(gain.id) += (g.array() * xhat.array()).colwise().sum().matrix();
    if (t.needs_grad(bias.id)) t.grad(bias.id) += g.colwise().sum();
    if (!t.needs_grad(x.id)) return;
    Matrix& gx = t.grad(x.id);
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      const Eigen::ArrayXXd dxhat = g.row(i).array() * gain.value().row(0).array();
      const double m1 = dxhat.mean();
      const double m2 = (dxhat * xhat.row(i).array()).mean();
      gx.row(i).array() += inv_std(i) * (dxhat - m1 - xhat.row(i).array() * m2);
    }
  });
}

Var attention(Var q, Var k, Var v, int heads, const std::vector<Segment>& q_segments,
              const std::vector<Segment>& k_segments, std::vector<Matrix>* weights) {
  const Eigen::Index d = q.cols();
  if (heads < 1 || d % heads != 0) fail(ErrorKind::Config, "attention: model width not divisible by head count");
  require(k.cols() == d && v.cols() == d, "attention: q, k, v widths differ");
  require(k.rows() == v.rows(), "attention: k and v lengths differ");
  require(q_segments.size() == k_segments.size(), "attention: segment counts differ");
  for (std::size_t i = 0; i < q_segments.size(); ++i) {
    require(q_segments[i].start >= 0 && q_segments[i].start + q_segments[i].length <= q.rows(), "attention: query segment");
    require(k_segments[i].start >= 0 && k_segments[i].start + k_segments[i].length <= k.rows() &&
                k_segments[i].length > 0,
            "attention: key segment");
  }
  const Eigen::Index dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t nseg = q_segments.size();
  std::vector<Matrix> probs(nseg * heads);
  Matrix out = Matrix::Zero(q.rows(), d);
  for (std::size_t s = 0; s < nseg; ++s) {
    const Segment qs = q_segments[s], ks = k_segments[s];
    for (int h = 0; h < heads; ++h) {
      const Matrix scores = q.value().block(qs.start, h * dh, qs.length, dh) *
                            k.value().block(ks.start, h * dh, ks.length, dh).transpose() * inv_sqrt;
      Matrix& p = probs[s * heads + h];
      p = softmax_rows(scores);
      out.block(qs.start, h * dh, qs.length, dh).noalias() = p * v.value().block(ks.start, h * dh, ks.length, dh);
    }
  }
  if (weights != nullptr) *weights = probs;
  Tape& t = *q.tape;
  return t.push(std::move(out), {q, k, v},
                [q, k, v, heads, dh, inv_sqrt, q_segments, k_segments, probs = std::move(probs)](Tape& t, int self) {
    const Matrix& g = t.out_grad(self);
    const bool gq = t.needs_grad(q.id), gk = t.needs_grad(k.id), gv = t.needs_grad(v.id);
    for (std::size_t s = 0; s < q_segments.size(); ++s) {
      const Segment qs = q_segments[s], ks = k_segments[s];
      for (int h = 0; h < heads; ++h) {
        const Matrix& p = probs[s * heads + h];
        const auto go = g.block(qs.start, h * dh, qs.length, dh);
        if (gv) t.grad(v.id).block(ks.start, h * dh, ks.length, dh).noalias() += p.transpose() * go;
        if (!gq && !gk) continue;
        const Matrix dp = go * v.value().block(ks.start, h * dh, ks.length, dh).transpose();
        const Eigen::VectorXd inner = (dp.array() * p.array()).rowwise().sum();
        const Matrix ds = (p.array() * (dp.colwise() - inner).array()).matrix() * inv_sqrt;
        if (gq)
          t.grad(q.id).block(qs.start, h * dh, qs.length, dh).noalias() +=
              ds * k.value().block(ks.start, h * dh, ks.length, dh);
        if (gk)
          t.grad(k.id).block(ks.start, h * dh, ks.length, dh).noalias() +=
              ds.transpose() * q.value().block(qs.start, h * dh, qs.length, dh);
      }
    }
  });
}

Var attention(Var q, Var k, Var v, int heads, std::vector<Matrix>* weights) {
  return attention(q, k, v, heads, {Segment{0, q.rows()}}, {Segment{0, k.rows()}}, weights);
}

Var assemble_rows(const std::vector<Var>& sources, const std::vector<RowRef>& refs) {
  require(!sources.empty(), "assemble_rows: no sources");
  const Eigen::Index cols = sources.front().cols();
  for (const Var& s : sources) require(s.cols() == cols, "assemble_rows: widths differ");
  Matrix y(static_cast<Eigen::Index>(refs.size()), cols);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const RowRef r = refs[i];
    require(r.source >= 0 && r.source < static_cast<int>(sources.size()) && r.row >= 0 &&
                r.row < sources[r.source].rows(),
            "assemble_rows: reference out of range");
    y.row(static_cast<Eigen::Index>(i)) = sources[r.source].value().row(r.row);
  }
  Tape& t = *sources.front().tape;
  return t.push(std::move(y), sources, [sources, refs](Tape& t, int self) {
    const Matrix& g = t.out_grad(self);
    for (std::size_t i = 0; i < refs.size(); ++i) {
      const Var& src = sources[refs[i].source];
      if (t.needs_grad(src.id)) t.grad(src.id).row(refs[i].row) += g.row(static_cast<Eigen::Index>(i));
    }
  });
}

Var segment_mean(Var x, const std::vector<Segment>& segments) {
  Matrix y(static_cast<Eigen::Index>(segments.size()), x.cols());
  for (std::size_t s = 0; s < segments.size(); ++s) {
    require(segments[s].length > 0 && segments[s].start >= 0 && segments[s].start + segments[s].length <= x.rows(),
            "segment_mean: segment out of range");
    y.row(static_cast<Eigen::Index>(s)) = x.value().middleRows(segments[s].start, segments[s].length).colwise().mean();
  }
  Tape& t = *x.tape;
  return t.push(std::move(y), {x}, [x, segments](Tape& t, int self) {
    const Matrix& g = t.out_grad(self);
    Matrix& gx = t.grad(x.id);
    for (std::size_t s = 0; s < segments.size(); ++s)
      gx.middleRows(segments[s].start, segments[s].length).rowwise() +=
          g.row(static_cast<Eigen::Index>(s)) / static_cast<double>(segments[s].length);
  });
}

Var gather_rows(Var table, const std::vector<int>& indices) {
  Matrix y(static_cast<Eigen::Index>(indices.size()), table.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= table.rows()) fail(ErrorKind::InvalidToken, "gather_rows: index out of range");
    y.row(static_cast<Eigen::Index>(i)) = table.value().row(indices[i]);
  }
  Tape& t = *table.tape;
  return t.push(std::move(y), {table}, [table, indices](Tape& t, int self) {
    const Matrix& g = t.out_grad(self);
    Matrix& gt = t.grad(table.id);
    for (std::size_t i = 0; i < indices.size(); ++i) gt.row(indices[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const Var& p : parts) {
    require(p.cols() == cols, "concat_rows: widths differ");
    rows += p.rows();
  }
  Matrix y(rows, cols);
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    y.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  Tape& t = *parts.front().tape;
  return t.push(std::move(y), parts, [parts](Tape& t, int self) {
    const Matrix& g = t.out_grad(self);
    Eigen::Index r = 0;
    for (const Var& p : parts) {
      if (t.needs_grad(p.id)) t.grad(p.id) += g.middleRows(r, p.rows());
      r += p.rows();
    }
  });
}

Var slice_rows(Var x, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= x.rows(), "slice_rows: range");
  Tape& t = *x.tape;
  return t.push(x.value().middleRows(start, count), {x}, [x, start, count](Tape& t, int self) {
    t.grad(x.id).middleRows(start, count) += t.out_grad(self);
  });
}

Var slice_cols(Var x, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= x.cols(), "slice_cols: range");
  Tape& t = *x.tape;
  return t.push(x.value().middleCols(start, count), {x}, [x, start, count](Tape& t, int self) {
    t.grad(x.id).middleCols(start, count) += t.out_grad(self);
  });
}

Var mean_rows(Var x) {
  require(x.rows() >= 1, "mean_rows: empty input");
  Tape& t = *x.tape;
  const double inv = 1.0 / static_cast<double>(x.rows());
  return t.push(x.value().colwise().mean(), {x}, [x, inv](Tape& t, int self) {
    t.grad(x.id).rowwise() += t.out_grad(self).row(0) * inv;
  });
}

Var sum(Var x) {
  Tape& t = *x.tape;
  Matrix y(1, 1);
  y(0, 0) = x.value().sum();
  return t.push(std::move(y), {x}, [x](Tape& t, int self) { t.grad(x.id).array() += t.out_grad(self)(0, 0); });
}

Var cross_entropy(Var logits, const std::vector<int>& targets, const std::vector<bool>& mask) {
  const Eigen::Index n = logits.rows(), s = logits.cols();
  require(static_cast<Eigen::Index>(targets.size()) == n && static_cast<Eigen::Index>(mask.size()) == n,
          "cross_entropy: targets and mask must match logit rows");
  int count = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || targets[i] >= s) fail(ErrorKind::InvalidToken, "cross_entropy: target out of range");
    ++count;
  }
  if (count == 0) fail(ErrorKind::EmptyLoss, "cross_entropy: mask selects no positions");
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const double m = logits.value().row(i).maxCoeff();
    const double lse = m + std::log((logits.value().row(i).array() - m).exp().sum());
    total += lse - logits.value()(i, targets[i]);
  }
  Matrix y(1, 1);
  y(0, 0) = total / count;
  Tape& t = *logits.tape;
  return t.push(std::move(y), {logits}, [logits, targets, mask, count](Tape& t, int self) {
    const double g = t.out_grad(self)(0, 0) / count;
    Matrix& gl = t.grad(logits.id);
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      if (!mask[i]) continue;
      const double m = logits.value().row(i).maxCoeff();
      Eigen::RowVectorXd p = (logits.value().row(i).array() - m).exp();
      p /= p.sum();
      p(targets[i]) -= 1.0;
      gl.row(i) += g * p;
    }
  });
}

Var rot6d_to_matrix(Var r6) {
  require(r6.value().size() == 6, "rot6d_to_matrix: needs 6 values");
  const Eigen::Map<const Eigen::Matrix<double, 6, 1>> raw(r6.value().data());
  const Eigen::Matrix3d rot = mega::rot6d_to_matrix(raw);
  Tape& t = *r6.tape;
  return t.push(Matrix(rot), {r6}, [r6, rot](Tape& t, int self) {
    const Eigen::Vector3d r1(r6.value().data());
    const Eigen::Vector3d r2(r6.value().data() + 3);
    const Eigen::Vector3d a = rot.col(0), b = rot.col(1);
    const double n1 = r1.norm();
    const Eigen::Vector3d rest = r2 - a.dot(r2) * a;
    const double n2 = rest.norm();
    const Matrix& g = t.out_grad(self);
    Eigen::Vector3d ga = g.col(0), gb = g.col(1);
    const Eigen::Vector3d gc = g.col(2);
    ga += b.cross(gc);
    gb += gc.cross(a);
    const Eigen::Vector3d grest = (gb - b * b.dot(gb)) / n2;
    const Eigen::Vector3d gr2 = grest - a * a.dot(grest);
    ga += -a.dot(grest) * r2 - a.dot(r2) * grest;
    const Eigen::Vector3d gr1 = (ga - a * a.dot(ga)) / n1;
    double* out = t.grad(r6.id).data();
    for (int i = 0; i < 3; ++i) {
      out[i] += gr1(i);
      out[i + 3] += gr2(i);
    }
  });
}

Var frobenius_distance(Var x, const Matrix& target) {
  require(x.rows() == target.rows() && x.cols() == target.cols(), "frobenius_distance: shapes differ");
  const Matrix diff = x.value() - target;
  const double norm = diff.norm();
  Matrix y(1, 1);
  y(0, 0) = norm;
  Tape& t = *x.tape;
  return t.push(std::move(y), {x}, [x, diff, norm](Tape& t, int self) {
    if (norm > 0.0) t.grad(x.id) += t.out_grad(self)(0, 0) / norm * diff;
  });
}

Var reprojection_l1(Var rotation, Var camera, const Matrix& points, const Matrix& keypoints,
                    const std::vector<bool>& visible) {
  require(rotation.rows() == 3 && rotation.cols() == 3, "reprojection_l1: rotation must be 3x3");
  require(camera.value().size() == 3, "reprojection_l1: camera needs 3 values");
  require(points.cols() == 3 && keypoints.cols() == 2 && points.rows() == keypoints.rows() &&
              static_cast<Eigen::Index>(visible.size()) == points.rows(),
          "reprojection_l1: point counts differ");
  const double s = camera.value()(0);
  const Eigen::RowVector2d tr(camera.value()(1), camera.value()(2));
  const Matrix rotated = points * rotation.value().transpose();
  Matrix sign = Matrix::Zero(points.rows(), 2);
  int count = 0;
  double total = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    if (!visible[i]) continue;
    ++count;
    for (int c = 0; c < 2; ++c) {
      const double e = s * rotated(i, c) + tr(c) - keypoints(i, c);
      total += std::abs(e);
      sign(i, c) = (e > 0.0) - (e < 0.0);
    }
  }
  Matrix y = Matrix::Zero(1, 1);
  if (count > 0) y(0, 0) = total / count;
  Tape& t = *rotation.tape;
  return t.push(std::move(y), {rotation, camera}, [rotation, camera, points, rotated, sign, count, s](Tape& t, int self) {
    if (count == 0) return;
    const double g = t.out_grad(self)(0, 0) / count;
    if (t.needs_grad(camera.id)) {
      Matrix& gc = t.grad(camera.id);
      const double ds = (sign.array() * rotated.leftCols(2).array()).sum();
      gc(0) += g * ds;
      gc(1) += g * sign.col(0).sum();
      gc(2) += g * sign.col(1).sum();
    }
    if (t.needs_grad(rotation.id)) t.grad(rotation.id).topRows(2).noalias() += g * s * sign.transpose() * points;
  });
}

}  // namespace mega::nn
