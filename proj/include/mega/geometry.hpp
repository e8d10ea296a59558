#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>

#include "mega/error.hpp"

namespace mega {

template <typename Scalar>
using Points3 = Eigen::Matrix<Scalar, Eigen::Dynamic, 3, Eigen::RowMajor>;
template <typename Scalar>
using Points2 = Eigen::Matrix<Scalar, Eigen::Dynamic, 2, Eigen::RowMajor>;

using Points3d = Points3<double>;
using Points2d = Points2<double>;
using Matrix3d = Eigen::Matrix3d;
using Vector3d = Eigen::Vector3d;

// Weak-perspective camera: image = scale * (R p)_xy + translation.
template <typename Scalar>
struct Camera {
  Scalar scale{1};
  Eigen::Matrix<Scalar, 2, 1> translation{Eigen::Matrix<Scalar, 2, 1>::Zero()};
};
using CameraParams = Camera<double>;

template <typename Scalar>
Eigen::Matrix<Scalar, 3, 3> axis_angle(const Eigen::Matrix<Scalar, 3, 1>& axis, Scalar angle) {
  return Eigen::AngleAxis<Scalar>(angle, axis.normalized()).toRotationMatrix();
}

template <typename Derived>
bool is_rotation(const Eigen::MatrixBase<Derived>& r, double tol = 1e-6) {
  if (r.rows() != 3 || r.cols() != 3 || !r.allFinite()) return false;
  const auto gram = (r.transpose() * r).eval();
  const double off = (gram - Eigen::Matrix<typename Derived::Scalar, 3, 3>::Identity()).cwiseAbs().maxCoeff();
  return off <= tol && std::abs(r.determinant() - 1.0) <= tol;
}

/// Gram-Schmidt map from the 6D rotation representation (two stacked
/// 3-vectors) to a rotation matrix whose first two columns span them.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, 3, 3> rot6d_to_matrix(const Eigen::MatrixBase<Derived>& r) {
  using Scalar = typename Derived::Scalar;
  using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
  if (r.size() != 6) fail(ErrorKind::Shape, "6D rotation needs 6 values");
  const Vec3 r1(r(0), r(1), r(2));
  const Vec3 r2(r(3), r(4), r(5));
  const Scalar n1 = r1.norm();
  if (!(n1 >= Scalar(1e-8))) fail(ErrorKind::DegenerateRotation, "first 6D column has near-zero norm");
  const Vec3 a = r1 / n1;
  const Vec3 rest = r2 - a.dot(r2) * a;
  const Scalar n2 = rest.norm();
  if (!(n2 >= Scalar(1e-8)) || !(r2.norm() >= Scalar(1e-8)))
    fail(ErrorKind::DegenerateRotation, "6D columns are parallel or zero");
  const Vec3 b = rest / n2;
  Eigen::Matrix<Scalar, 3, 3> out;
  out.col(0) = a;
  out.col(1) = b;
  out.col(2) = a.cross(b);
  return out;
}

template <typename Scalar>
Eigen::Matrix<Scalar, 6, 1> matrix_to_rot6d(const Eigen::Matrix<Scalar, 3, 3>& r) {
  Eigen::Matrix<Scalar, 6, 1> out;
  out << r.col(0), r.col(1);
  return out;
}

template <typename Derived, typename Scalar = typename Derived::Scalar>
Points2<Scalar> project_weak_perspective(const Eigen::MatrixBase<Derived>& points,
                                         const Eigen::Matrix<Scalar, 3, 3>& rotation,
                                         const Camera<Scalar>& camera) {
  Points2<Scalar> out(points.rows(), 2);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const Eigen::Matrix<Scalar, 3, 1> p = rotation * points.row(i).transpose();
    out(i, 0) = camera.scale * p.x() + camera.translation.x();
    out(i, 1) = camera.scale * p.y() + camera.translation.y();
  }
  return out;
}

/// Similarity transform (s, R, t) minimizing sum |s R p_i + t - q_i|^2.
template <typename Scalar>
struct Similarity {
  Scalar scale{1};
  Eigen::Matrix<Scalar, 3, 3> rotation{Eigen::Matrix<Scalar, 3, 3>::Identity()};
  Eigen::Matrix<Scalar, 3, 1> translation{Eigen::Matrix<Scalar, 3, 1>::Zero()};

  template <typename Derived>
  Points3<Scalar> apply(const Eigen::MatrixBase<Derived>& points) const {
    Points3<Scalar> out = (scale * (points * rotation.transpose())).rowwise() + translation.transpose();
    return out;
  }
};

template <typename DerivedA, typename DerivedB>
Similarity<typename DerivedA::Scalar> procrustes_fit(const Eigen::MatrixBase<DerivedA>& pred,
                                                     const Eigen::MatrixBase<DerivedB>& gt) {
  using Scalar = typename DerivedA::Scalar;
  using Mat3 = Eigen::Matrix<Scalar, 3, 3>;
  if (pred.rows() != gt.rows() || pred.cols() != 3 || gt.cols() != 3)
    fail(ErrorKind::Shape, "procrustes inputs must be matching n x 3 point sets");
  if (pred.rows() < 3) fail(ErrorKind::Alignment, "procrustes needs at least 3 points");

  const Eigen::Matrix<Scalar, 1, 3> mu_p = pred.colwise().mean();
  const Eigen::Matrix<Scalar, 1, 3> mu_g = gt.colwise().mean();
  const Points3<Scalar> p = pred.rowwise() - mu_p;
  const Points3<Scalar> g = gt.rowwise() - mu_g;
  const Scalar var_p = p.squaredNorm();
  const Scalar var_g = g.squaredNorm();
  const Scalar tiny = Scalar(1e-12) * std::max(Scalar(1), std::max(var_p, var_g));
  if (var_p <= tiny || var_g <= tiny) fail(ErrorKind::Alignment, "point set collapses to a single point");

  const Mat3 cov = g.transpose() * p;
  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto sv = svd.singularValues();
  if (sv(1) <= Scalar(1e-12) * std::max(Scalar(1), sv(0)))
    fail(ErrorKind::Alignment, "rank-deficient cross-covariance");

  Mat3 d = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) d(2, 2) = -1;

  Similarity<Scalar> out;
  out.rotation = svd.matrixU() * d * svd.matrixV().transpose();
  out.scale = (sv.asDiagonal() * d).trace() / var_p;
  out.translation = mu_g.transpose() - out.scale * out.rotation * mu_p.transpose();
  return out;
}

template <typename DerivedA, typename DerivedB>
Points3<typename DerivedA::Scalar> procrustes_align(const Eigen::MatrixBase<DerivedA>& pred,
                                                    const Eigen::MatrixBase<DerivedB>& gt) {
  return procrustes_fit(pred, gt).apply(pred);
}

}  // namespace mega
