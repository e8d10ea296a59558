#include "mega/metrics.hpp"

#include <algorithm>
#include <fstream>

#include "mega/error.hpp"
#include "mega/geometry.hpp"

namespace mega {

double body_height(const BodyTemplate& tmpl) {
  const CanonicalMesh m = template_mesh(tmpl);
  return m.col(1).maxCoeff() - m.col(1).minCoeff();
}

double mpjpe(const Points3d& pred_joints, const Points3d& gt_joints) {
  if (pred_joints.rows() != gt_joints.rows() || pred_joints.rows() == 0)
    fail(ErrorKind::Shape, "mpjpe: joint counts differ");
  const Eigen::RowVector3d shift = gt_joints.row(0) - pred_joints.row(0);
  return ((pred_joints.rowwise() + shift) - gt_joints).rowwise().norm().mean();
}

double pa_mpjpe(const Points3d& pred_joints, const Points3d& gt_joints) {
  return (procrustes_align(pred_joints, gt_joints) - gt_joints).rowwise().norm().mean();
}

MeshErrors mesh_errors(const Points3d& pred, const Points3d& gt, const BodyTemplate& tmpl) {
  if (pred.rows() != gt.rows() || pred.rows() != tmpl.num_vertices())
    fail(ErrorKind::Shape, "mesh_errors: vertex counts differ");
  const double unit = kMetricScale / body_height(tmpl);
  const Points3d pj = joints_from_mesh(pred, tmpl), gj = joints_from_mesh(gt, tmpl);
  return {(pred - gt).rowwise().norm().mean() * unit, mpjpe(pj, gj) * unit, pa_mpjpe(pj, gj) * unit};
}

BestOfQ best_of_q(const std::vector<std::vector<double>>& errors, const std::vector<int>& qs) {
  if (qs.empty()) fail(ErrorKind::Config, "best_of_q: empty q list");
  BestOfQ out;
  out.qs = qs;
  out.means.assign(qs.size(), 0.0);
  for (const auto& e : errors) {
    std::vector<double> row;
    for (int q : qs) {
      if (q < 1 || q > static_cast<int>(e.size())) fail(ErrorKind::Config, "best_of_q: q outside [1, Q]");
      row.push_back(*std::min_element(e.begin(), e.begin() + q));
    }
    for (std::size_t i = 0; i < qs.size(); ++i) out.means[i] += row[i];
    out.per_item.push_back(std::move(row));
  }
  if (!errors.empty())
    for (double& m : out.means) m /= static_cast<double>(errors.size());
  if (out.means.front() > 0.0) out.improvement = (out.means.front() - out.means.back()) / out.means.front() * 100.0;
  return out;
}

double apd(const std::vector<Points3d>& joint_sets) {
  if (joint_sets.size() < 2) fail(ErrorKind::InsufficientSamples, "apd needs at least two samples");
  double total = 0.0;
  long pairs = 0;
  for (std::size_t i = 0; i < joint_sets.size(); ++i)
    for (std::size_t j = i + 1; j < joint_sets.size(); ++j) {
      if (joint_sets[i].rows() != joint_sets[j].rows()) fail(ErrorKind::Shape, "apd: joint counts differ");
      total += (joint_sets[i] - joint_sets[j]).rowwise().norm().mean();
      ++pairs;
    }
  return total / static_cast<double>(pairs);
}

Eigen::MatrixXd matrix_sqrt_psd(const Eigen::MatrixXd& sigma) {
  if (sigma.rows() != sigma.cols()) fail(ErrorKind::Shape, "matrix_sqrt_psd: matrix must be square");
  if ((sigma - sigma.transpose()).cwiseAbs().maxCoeff() > 1e-9)
    fail(ErrorKind::NotPsd, "matrix_sqrt_psd: matrix is not symmetric");
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sigma);
  Eigen::VectorXd lambda = eig.eigenvalues();
  const double scale = std::max(1.0, lambda.cwiseAbs().maxCoeff());
  if (lambda.minCoeff() < -1e-10 * scale) fail(ErrorKind::NotPsd, "matrix_sqrt_psd: significantly negative eigenvalue");
  lambda = lambda.cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * lambda.asDiagonal() * eig.eigenvectors().transpose();
}

namespace {

void mean_and_covariance(const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
  mu = x.colwise().mean().transpose();
  const Eigen::MatrixXd c = x.rowwise() - mu.transpose();
  cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
  cov = 0.5 * (cov + cov.transpose());
}

}  // namespace

double fid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols()) fail(ErrorKind::Shape, "fid: latent widths differ");
  if (a.rows() <= a.cols() || b.rows() <= b.cols())
    fail(ErrorKind::CovarianceRank, "fid: need more samples than latent dimensions");
  Eigen::VectorXd mu_a, mu_b;
  Eigen::MatrixXd cov_a, cov_b;
  mean_and_covariance(a, mu_a, cov_a);
  mean_and_covariance(b, mu_b, cov_b);
  const Eigen::MatrixXd root_a = matrix_sqrt_psd(cov_a);
  Eigen::MatrixXd inner = root_a * cov_b * root_a;
  inner = 0.5 * (inner + inner.transpose());
  return (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * matrix_sqrt_psd(inner).trace();
}

VertexSd vertex_sd(const std::vector<Points3d>& samples) {
  if (samples.size() < 2) fail(ErrorKind::InsufficientSamples, "vertex_sd needs at least two samples");
  // Welford update: identical samples give exactly zero
  Points3d mean = samples.front();
  Points3d m2 = Points3d::Zero(mean.rows(), 3);
  for (std::size_t k = 1; k < samples.size(); ++k) {
    if (samples[k].rows() != mean.rows()) fail(ErrorKind::Shape, "vertex_sd: vertex counts differ");
    const Points3d delta = samples[k] - mean;
    mean += delta / static_cast<double>(k + 1);
    m2 += delta.cwiseProduct(samples[k] - mean);
  }
  const Eigen::VectorXd var = m2.rowwise().sum();
  VertexSd out;
  out.per_vertex = (var / (3.0 * static_cast<double>(samples.size()))).cwiseSqrt();
  out.mean = out.per_vertex.mean();
  return out;
}

Points3d mean_mesh(const std::vector<Points3d>& samples) {
  if (samples.empty()) fail(ErrorKind::InsufficientSamples, "mean_mesh needs at least one sample");
  Points3d sum = Points3d::Zero(samples.front().rows(), 3);
  for (const Points3d& s : samples) {
    if (s.rows() != sum.rows()) fail(ErrorKind::Shape, "mean_mesh: vertex counts differ");
    sum += s;
  }
  return sum / static_cast<double>(samples.size());
}

double mesh_distance(const Points3d& a, const Points3d& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) fail(ErrorKind::Shape, "mesh_distance: shapes differ");
  return (a - b).rowwise().norm().mean();
}

MeshErrors MetricsReport::mean_errors() const {
  MeshErrors m;
  for (const ItemMetrics& it : items) {
    m.pve += it.errors.pve;
    m.mpjpe += it.errors.mpjpe;
    m.pampjpe += it.errors.pampjpe;
  }
  if (!items.empty()) {
    const double n = static_cast<double>(items.size());
    m.pve /= n;
    m.mpjpe /= n;
    m.pampjpe /= n;
  }
  return m;
}

std::vector<double> MetricsReport::mean_best() const {
  std::vector<double> m(qs.size(), 0.0);
  for (const ItemMetrics& it : items)
    for (std::size_t i = 0; i < qs.size() && i < it.best.size(); ++i) m[i] += it.best[i];
  if (!items.empty())
    for (double& v : m) v /= static_cast<double>(items.size());
  return m;
}

void write_metrics_csv(const std::string& path, const MetricsReport& report) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot open " + path + " for writing");
  out << "item,pve,mpjpe,pampjpe";
  for (int q : report.qs) out << ",best" << q;
  out << '\n';
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, ",%.6f", v);
    out << buf;
  };
  for (const ItemMetrics& it : report.items) {
    out << it.item;
    num(it.errors.pve);
    num(it.errors.mpjpe);
    num(it.errors.pampjpe);
    for (double b : it.best) num(b);
    out << '\n';
  }
  const MeshErrors m = report.mean_errors();
  out << "mean";
  num(m.pve);
  num(m.mpjpe);
  num(m.pampjpe);
  for (double b : report.mean_best()) num(b);
  out << '\n';
  if (!out) fail(ErrorKind::Io, "failed writing " + path);
}

}  // namespace mega
