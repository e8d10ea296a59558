#pragma once

#include <vector>

#include "mega/nn/tape.hpp"

namespace mega::nn {

inline constexpr double kLayerNormEps = 1e-5;

Var matmul(Var a, Var b);
/// x W + b with b a 1 x out row broadcast over rows of x.
Var linear(Var x, Var w, Var b);
/// Per-row weight blocks, cycling: with k = r mod (W.rows / in),
/// out[r] = x[r] W[k*in:(k+1)*in] + b[k].
Var rowwise_linear(Var x, Var w, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var x, double s);
Var gelu(Var x);
Var layer_norm(Var x, Var gain, Var bias);

/// Contiguous row range holding one sequence of a batch.
struct Segment {
  Eigen::Index start{0};
  Eigen::Index length{0};
};

/// Scaled dot-product attention per head over column blocks of q, k, v.
/// Query segment i attends only to key segment i. Optionally returns the
/// attention weights, entry [i * heads + h] for segment i and head h.
Var attention(Var q, Var k, Var v, int heads, const std::vector<Segment>& q_segments,
              const std::vector<Segment>& k_segments, std::vector<Matrix>* weights = nullptr);
Var attention(Var q, Var k, Var v, int heads, std::vector<Matrix>* weights = nullptr);

/// Row i of the result is row refs[i].row of sources[refs[i].source].
struct RowRef {
  int source{0};
  Eigen::Index row{0};
};
Var assemble_rows(const std::vector<Var>& sources, const std::vector<RowRef>& refs);

/// One output row per segment: the mean of its rows.
Var segment_mean(Var x, const std::vector<Segment>& segments);

Var gather_rows(Var table, const std::vector<int>& indices);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var x, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var x, Eigen::Index start, Eigen::Index count);
Var mean_rows(Var x);
Var sum(Var x);

/// Mean over rows with mask[i] of -log softmax(logits[i])[targets[i]].
Var cross_entropy(Var logits, const std::vector<int>& targets, const std::vector<bool>& mask);

/// 1x6 (two stacked columns) to 3x3 rotation by Gram-Schmidt.
Var rot6d_to_matrix(Var r6);
/// Frobenius norm of x - target.
Var frobenius_distance(Var x, const Matrix& target);
/// Mean over visible rows of |s (P R^T)_xy + t - kp|_1 with cam = (s, tx, ty).
Var reprojection_l1(Var rotation, Var camera, const Matrix& points, const Matrix& keypoints,
                    const std::vector<bool>& visible);

/// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix& x);

}  // namespace mega::nn
