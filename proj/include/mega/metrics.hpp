#pragma once

#include <string>
#include <vector>

#include "mega/body.hpp"

namespace mega {

/// Errors are reported in template body heights x 1000.
inline constexpr double kMetricScale = 1000.0;

/// Vertical extent of the unit-shape template mesh.
double body_height(const BodyTemplate& tmpl);

struct MeshErrors {
  double pve{0};
  double mpjpe{0};
  double pampjpe{0};
};

/// Root joint (index 0) aligned MPJPE and similarity-aligned PA-MPJPE.
MeshErrors mesh_errors(const Points3d& pred, const Points3d& gt, const BodyTemplate& tmpl);
double mpjpe(const Points3d& pred_joints, const Points3d& gt_joints);
double pa_mpjpe(const Points3d& pred_joints, const Points3d& gt_joints);

struct BestOfQ {
  std::vector<int> qs;
  std::vector<std::vector<double>> per_item;  // [item][q index]
  std::vector<double> means;                  // per q
  double improvement{0};                      // percent, first q vs last q
};

/// Per item, min over the first q errors for each q in `qs`.
BestOfQ best_of_q(const std::vector<std::vector<double>>& errors, const std::vector<int>& qs);

/// Mean joint distance over unordered sample pairs; each entry is K x 3.
double apd(const std::vector<Points3d>& joint_sets);

/// Principal square root of a symmetric PSD matrix.
Eigen::MatrixXd matrix_sqrt_psd(const Eigen::MatrixXd& sigma);

/// Frechet distance between Gaussian fits of the rows of a and b.
double fid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

struct VertexSd {
  Eigen::VectorXd per_vertex;
  double mean{0};
};
VertexSd vertex_sd(const std::vector<Points3d>& samples);

Points3d mean_mesh(const std::vector<Points3d>& samples);
double mesh_distance(const Points3d& a, const Points3d& b);

struct ItemMetrics {
  int item{0};
  MeshErrors errors;
  std::vector<double> best;  // aligned with MetricsReport::qs
};

struct MetricsReport {
  std::vector<int> qs{1, 5, 10, 25};
  std::vector<ItemMetrics> items;
  double improvement{0};
  std::vector<double> dist_to_det;  // per dist_qs
  std::vector<int> dist_qs;
  double mean_vertex_sd{0};

  MeshErrors mean_errors() const;
  std::vector<double> mean_best() const;
};

void write_metrics_csv(const std::string& path, const MetricsReport& report);

}  // namespace mega
