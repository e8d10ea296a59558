#pragma once

#include <Eigen/Dense>
#include <array>
#include <set>
#include <string>
#include <vector>

#include "mega/geometry.hpp"
#include "mega/rng.hpp"

namespace mega {

/// V x 3 canonical body: root-part centroid at the origin, root
/// orientation removed.
using CanonicalMesh = Points3d;

/// Which shape factor scales a rest-pose length.
enum class ShapeFactor { Limb = 0, Girth = 1, Height = 2 };

struct ScaledLength {
  double value{0};
  ShapeFactor factor{ShapeFactor::Height};
};

/// One bone of the articulated template. Each bone is owned by the joint at
/// its start; the joint's hinge rotates the bone and all descendants.
struct BoneSpec {
  std::string name;
  int parent{-1};
  std::array<ScaledLength, 3> offset{};  // joint position relative to parent joint, rest pose
  Vector3d direction{Vector3d::UnitY()};  // rest bone axis
  ScaledLength length{};
  double radius{0};  // scaled by girth
  Vector3d axis{Vector3d::UnitX()};  // hinge axis in the parent frame
  double min_angle{0};
  double max_angle{0};
  Vector3d lateral{Vector3d::UnitX()};  // ring frame: angle 0 direction before the pi/2 offset
  int mirror{-1};  // left/right counterpart (self for central bones)
};

struct BodyParams {
  Eigen::VectorXd pose;  // J-1 hinge angles, bones 1..J-1
  Vector3d shape{Vector3d::Ones()};  // limb, girth, height
  Matrix3d root_rotation{Matrix3d::Identity()};
};

/// Fixed skeleton, ring layout and skinning weights. Vertex order is
/// bone-major, then ring, then angle around the ring, so mesh part p is
/// ring (p % rings) of bone (p / rings).
class BodyTemplate {
 public:
  static constexpr int kRingsPerBone = 2;
  static constexpr std::array<double, kRingsPerBone> kRingFractions{0.0, 0.6};

  explicit BodyTemplate(int ring_size = 9);

  int num_joints() const { return static_cast<int>(bones_.size()); }
  int num_vertices() const { return num_joints() * kRingsPerBone * ring_size_; }
  int ring_size() const { return ring_size_; }
  int num_keypoints() const { return num_joints(); }
  const std::vector<BoneSpec>& bones() const { return bones_; }

  int vertex_index(int bone, int ring, int k) const { return (bone * kRingsPerBone + ring) * ring_size_ + k; }
  double ring_angle(int k) const;

  /// Vertex indices averaged for keypoint k (the ring at joint k).
  std::vector<int> joint_vertices(int joint) const;
  /// Vertices whose centroid defines the canonical origin.
  std::vector<int> root_part() const { return joint_vertices(0); }

  /// Vertex permutation realizing the left/right mirror: mirrored mesh
  /// vertex mirror_vertex(i) is the reflection of vertex i.
  int mirror_vertex(int i) const;
  /// Pose of the mirrored body: left/right angles swapped and negated.
  Eigen::VectorXd mirror_pose(const Eigen::VectorXd& pose) const;

  Points3d rest_joints(const Vector3d& shape) const;
  Points3d rest_vertices(const Vector3d& shape) const;

  struct Influence {
    int bone;
    double weight;
  };
  const std::vector<std::vector<Influence>>& skin_weights() const { return skin_; }

  void validate(const BodyParams& params) const;

 private:
  int ring_size_;
  std::vector<BoneSpec> bones_;
  std::vector<std::vector<Influence>> skin_;
};

double scaled(const ScaledLength& len, const Vector3d& shape);

/// Forward kinematics with linear blend skinning; returns a canonical mesh.
CanonicalMesh synth_body(const BodyParams& params, const BodyTemplate& tmpl);

/// Rest mesh at the given shape, recentred like synth_body output.
CanonicalMesh template_mesh(const BodyTemplate& tmpl, const Vector3d& shape = Vector3d::Ones());

CanonicalMesh canonicalize(const Points3d& posed, const Matrix3d& root_rotation, const BodyTemplate& tmpl);

/// K x 3 joint positions, each the mean of its ring.
Points3d joints_from_mesh(const Points3d& mesh, const BodyTemplate& tmpl);

struct Observation {
  static constexpr double kHidden = 0.0;  // sentinel written for occluded keypoints
  Points2d keypoints;
  std::vector<bool> visible;

  int size() const { return static_cast<int>(visible.size()); }
  int num_visible() const;
};

Observation render_observation(const CanonicalMesh& canonical, const Matrix3d& root_rotation,
                               const CameraParams& camera, const std::set<int>& occluded,
                               const BodyTemplate& tmpl);

struct DatasetRecord {
  BodyParams params;
  CanonicalMesh canonical;
  CameraParams camera;
  Observation observation;
};

/// Parameter distribution used to draw dataset records.
BodyParams sample_params(Rng& rng, const BodyTemplate& tmpl);
CameraParams sample_camera(Rng& rng);

std::vector<DatasetRecord> make_dataset(int count, double occlusion_rate, std::uint64_t seed,
                                        const BodyTemplate& tmpl);

void write_dataset(const std::string& path, const std::vector<DatasetRecord>& records, const BodyTemplate& tmpl);
std::vector<DatasetRecord> read_dataset(const std::string& path, const BodyTemplate& tmpl);

}  // namespace mega
