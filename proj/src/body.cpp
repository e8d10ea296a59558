#include "mega/body.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace mega {
namespace {

constexpr ShapeFactor L = ShapeFactor::Limb;
constexpr ShapeFactor G = ShapeFactor::Girth;
constexpr ShapeFactor H = ShapeFactor::Height;

BoneSpec bone(std::string name, int parent, std::array<ScaledLength, 3> offset, Vector3d direction,
              ScaledLength length, double radius, Vector3d axis, double lo, double hi, Vector3d lateral,
              int mirror) {
  BoneSpec b;
  b.name = std::move(name);
  b.parent = parent;
  b.offset = offset;
  b.direction = direction;
  b.length = length;
  b.radius = radius;
  b.axis = axis;
  b.min_angle = lo;
  b.max_angle = hi;
  b.lateral = lateral;
  b.mirror = mirror;
  return b;
}

// x: body left, y: up, z: towards the camera. Right-side bones are the
// reflections of left-side ones (x -> -x), including hinge axes, so the
// right angle ranges are the negated left ranges.
std::vector<BoneSpec> default_skeleton() {
  const Vector3d up = Vector3d::UnitY();
  const Vector3d down = -Vector3d::UnitY();
  const Vector3d x = Vector3d::UnitX();
  const Vector3d mx = -Vector3d::UnitX();
  const Vector3d y = Vector3d::UnitY();
  const Vector3d z = Vector3d::UnitZ();
  // hips and knees hinge about slightly tilted axes so the legs leave the
  // sagittal plane
  const Vector3d hip_l = Vector3d(1, 0, 0.35).normalized();
  const Vector3d hip_r = Vector3d(-1, 0, 0.35).normalized();
  const Vector3d knee_l = Vector3d(1, 0, -0.2).normalized();
  const Vector3d knee_r = Vector3d(-1, 0, -0.2).normalized();
  std::vector<BoneSpec> s;
  s.push_back(bone("pelvis", -1, {{{0, G}, {0, H}, {0, G}}}, up, {0.10, H}, 0.11, x, 0, 0, x, 0));
  s.push_back(bone("spine", 0, {{{0, G}, {0.10, H}, {0, G}}}, up, {0.12, H}, 0.10, z, -0.35, 0.35, x, 1));
  s.push_back(bone("chest", 1, {{{0, G}, {0.12, H}, {0, G}}}, up, {0.16, H}, 0.12, y, -0.5, 0.5, x, 2));
  s.push_back(bone("head", 2, {{{0, G}, {0.16, H}, {0, G}}}, up, {0.20, H}, 0.07, z, -0.4, 0.4, x, 3));
  s.push_back(bone("l_shoulder", 2, {{{0.17, G}, {0.14, H}, {0, G}}}, down, {0.17, L}, 0.045, x, -1.3, 1.3, x, 6));
  s.push_back(bone("l_elbow", 4, {{{0, G}, {-0.17, L}, {0, G}}}, down, {0.16, L}, 0.04, x, -2.0, 0.0, x, 7));
  s.push_back(bone("r_shoulder", 2, {{{-0.17, G}, {0.14, H}, {0, G}}}, down, {0.17, L}, 0.045, mx, -1.3, 1.3, mx, 4));
  s.push_back(bone("r_elbow", 6, {{{0, G}, {-0.17, L}, {0, G}}}, down, {0.16, L}, 0.04, mx, 0.0, 2.0, mx, 5));
  s.push_back(bone("l_hip", 0, {{{0.09, G}, {0, H}, {0, G}}}, down, {0.24, L}, 0.065, hip_l, -1.0, 1.0, x, 10));
  s.push_back(bone("l_knee", 8, {{{0, G}, {-0.24, L}, {0, G}}}, down, {0.23, L}, 0.05, knee_l, 0.0, 2.0, x, 11));
  s.push_back(bone("r_hip", 0, {{{-0.09, G}, {0, H}, {0, G}}}, down, {0.24, L}, 0.065, hip_r, -1.0, 1.0, mx, 8));
  s.push_back(bone("r_knee", 10, {{{0, G}, {-0.24, L}, {0, G}}}, down, {0.23, L}, 0.05, knee_r, -2.0, 0.0, mx, 9));
  return s;
}

Vector3d scaled_offset(const BoneSpec& b, const Vector3d& shape) {
  return {scaled(b.offset[0], shape), scaled(b.offset[1], shape), scaled(b.offset[2], shape)};
}

}  // namespace

double scaled(const ScaledLength& len, const Vector3d& shape) {
  return len.value * shape(static_cast<int>(len.factor));
}

BodyTemplate::BodyTemplate(int ring_size) : ring_size_(ring_size), bones_(default_skeleton()) {
  if (ring_size_ < 3) fail(ErrorKind::Config, "ring size must be at least 3");
  const Vector3d unit = Vector3d::Ones();
  std::vector<std::vector<int>> children(bones_.size());
  for (int b = 1; b < num_joints(); ++b) children[bones_[b].parent].push_back(b);

  skin_.resize(num_vertices());
  for (int b = 0; b < num_joints(); ++b) {
    const BoneSpec& spec = bones_[b];
    const double len = scaled(spec.length, unit);
    for (int r = 0; r < kRingsPerBone; ++r) {
      const double t = kRingFractions[r];
      for (int k = 0; k < ring_size_; ++k) {
        const double c = std::cos(ring_angle(k));
        std::vector<Influence> infl;
        double used = 0;
        if (spec.parent >= 0) {
          const double w = 0.5 * (1 - t) * (1 - t);
          infl.push_back({spec.parent, w});
          used += w;
        }
        for (int ch : children[b]) {
          const Vector3d off = scaled_offset(bones_[ch], unit);
          const double attach = std::clamp(off.dot(spec.direction) / len, 0.0, 1.0);
          const double side = off.dot(spec.lateral);
          double s = 1.0;
          if (side > 1e-12) s = std::max(0.0, c);
          if (side < -1e-12) s = std::max(0.0, -c);
          const double reach = 1 - 0.5 * std::abs(t - attach);
          const double w = 0.35 * reach * reach * s;
          if (w > 0) {
            infl.push_back({ch, w});
            used += w;
          }
        }
        infl.push_back({b, 1 - used});
        skin_[vertex_index(b, r, k)] = std::move(infl);
      }
    }
  }
}

double BodyTemplate::ring_angle(int k) const { return M_PI / 2 + 2 * M_PI * k / ring_size_; }

std::vector<int> BodyTemplate::joint_vertices(int joint) const {
  std::vector<int> out(ring_size_);
  for (int k = 0; k < ring_size_; ++k) out[k] = vertex_index(joint, 0, k);
  return out;
}

int BodyTemplate::mirror_vertex(int i) const {
  const int k = i % ring_size_;
  const int ring = (i / ring_size_) % kRingsPerBone;
  const int b = i / (ring_size_ * kRingsPerBone);
  const int mb = bones_[b].mirror;
  const int mk = (mb == b) ? (ring_size_ - k) % ring_size_ : k;
  return vertex_index(mb, ring, mk);
}

Eigen::VectorXd BodyTemplate::mirror_pose(const Eigen::VectorXd& pose) const {
  Eigen::VectorXd out(pose.size());
  for (int b = 1; b < num_joints(); ++b) out(bones_[b].mirror - 1) = -pose(b - 1);
  return out;
}

Points3d BodyTemplate::rest_joints(const Vector3d& shape) const {
  Points3d p(num_joints(), 3);
  p.row(0).setZero();
  for (int b = 1; b < num_joints(); ++b)
    p.row(b) = p.row(bones_[b].parent) + scaled_offset(bones_[b], shape).transpose();
  return p;
}

Points3d BodyTemplate::rest_vertices(const Vector3d& shape) const {
  const Points3d joints = rest_joints(shape);
  Points3d v(num_vertices(), 3);
  const Vector3d forward = Vector3d::UnitZ();
  for (int b = 0; b < num_joints(); ++b) {
    const BoneSpec& spec = bones_[b];
    const double len = scaled(spec.length, shape);
    const double rho = spec.radius * shape(static_cast<int>(ShapeFactor::Girth));
    for (int r = 0; r < kRingsPerBone; ++r) {
      const Vector3d center = joints.row(b).transpose() + kRingFractions[r] * len * spec.direction;
      for (int k = 0; k < ring_size_; ++k) {
        const double a = ring_angle(k);
        v.row(vertex_index(b, r, k)) = (center + rho * (std::cos(a) * spec.lateral + std::sin(a) * forward)).transpose();
      }
    }
  }
  return v;
}

void BodyTemplate::validate(const BodyParams& params) const {
  if (params.pose.size() != num_joints() - 1)
    fail(ErrorKind::InvalidParams, "pose must hold " + std::to_string(num_joints() - 1) + " angles");
  for (Eigen::Index i = 0; i < params.pose.size(); ++i) {
    const double a = params.pose(i);
    if (!std::isfinite(a) || a < -M_PI || a > M_PI)
      fail(ErrorKind::InvalidParams, "angle " + std::to_string(i) + " outside [-pi, pi]");
  }
  for (int i = 0; i < 3; ++i) {
    const double s = params.shape(i);
    if (!std::isfinite(s) || s < 0.5 || s > 1.5)
      fail(ErrorKind::InvalidParams, "shape factor " + std::to_string(i) + " outside [0.5, 1.5]");
  }
  if (!is_rotation(params.root_rotation)) fail(ErrorKind::InvalidParams, "root rotation is not a rotation");
}

namespace {

void recenter(Points3d& mesh, const BodyTemplate& tmpl) {
  Eigen::RowVector3d c = Eigen::RowVector3d::Zero();
  const auto root = tmpl.root_part();
  for (int i : root) c += mesh.row(i);
  c /= static_cast<double>(root.size());
  mesh.rowwise() -= c;
}

}  // namespace

CanonicalMesh synth_body(const BodyParams& params, const BodyTemplate& tmpl) {
  tmpl.validate(params);
  const auto& bones = tmpl.bones();
  const int nj = tmpl.num_joints();
  const Points3d rest_j = tmpl.rest_joints(params.shape);
  const Points3d rest_v = tmpl.rest_vertices(params.shape);

  std::vector<Matrix3d> rot(nj);
  std::vector<Vector3d> pos(nj);
  rot[0].setIdentity();
  pos[0].setZero();
  for (int b = 1; b < nj; ++b) {
    const int p = bones[b].parent;
    rot[b] = rot[p] * axis_angle<double>(bones[b].axis, params.pose(b - 1));
    pos[b] = pos[p] + rot[p] * scaled_offset(bones[b], params.shape);
  }

  CanonicalMesh mesh(tmpl.num_vertices(), 3);
  const auto& skin = tmpl.skin_weights();
  for (int i = 0; i < tmpl.num_vertices(); ++i) {
    const Vector3d x = rest_v.row(i).transpose();
    Vector3d d = Vector3d::Zero();
    for (const auto& inf : skin[i]) {
      const Vector3d local = x - rest_j.row(inf.bone).transpose();
      d += inf.weight * (pos[inf.bone] - rest_j.row(inf.bone).transpose() + rot[inf.bone] * local - local);
    }
    mesh.row(i) = (x + d).transpose();
  }
  recenter(mesh, tmpl);
  return mesh;
}

CanonicalMesh template_mesh(const BodyTemplate& tmpl, const Vector3d& shape) {
  CanonicalMesh mesh = tmpl.rest_vertices(shape);
  recenter(mesh, tmpl);
  return mesh;
}

CanonicalMesh canonicalize(const Points3d& posed, const Matrix3d& root_rotation, const BodyTemplate& tmpl) {
  if (!is_rotation(root_rotation)) fail(ErrorKind::InvalidRotation, "root rotation is not orthonormal with det +1");
  if (posed.rows() != tmpl.num_vertices()) fail(ErrorKind::Shape, "mesh vertex count does not match template");
  CanonicalMesh out = posed * root_rotation;  // rows: R^T v
  recenter(out, tmpl);
  return out;
}

Points3d joints_from_mesh(const Points3d& mesh, const BodyTemplate& tmpl) {
  if (mesh.rows() != tmpl.num_vertices()) fail(ErrorKind::Shape, "mesh vertex count does not match template");
  Points3d joints(tmpl.num_keypoints(), 3);
  for (int j = 0; j < tmpl.num_keypoints(); ++j) {
    Eigen::RowVector3d c = Eigen::RowVector3d::Zero();
    const auto idx = tmpl.joint_vertices(j);
    for (int i : idx) c += mesh.row(i);
    joints.row(j) = c / static_cast<double>(idx.size());
  }
  return joints;
}

int Observation::num_visible() const {
  int n = 0;
  for (bool v : visible) n += v ? 1 : 0;
  return n;
}

Observation render_observation(const CanonicalMesh& canonical, const Matrix3d& root_rotation,
                               const CameraParams& camera, const std::set<int>& occluded,
                               const BodyTemplate& tmpl) {
  if (!(camera.scale > 0)) fail(ErrorKind::InvalidParams, "camera scale must be positive");
  const Points3d joints = joints_from_mesh(canonical, tmpl);
  Observation obs;
  obs.keypoints = project_weak_perspective(joints, root_rotation, camera);
  obs.visible.assign(joints.rows(), true);
  for (int k : occluded) {
    if (k < 0 || k >= joints.rows()) fail(ErrorKind::InvalidParams, "occluded keypoint index out of range");
    obs.visible[k] = false;
    obs.keypoints.row(k).setConstant(Observation::kHidden);
  }
  return obs;
}

BodyParams sample_params(Rng& rng, const BodyTemplate& tmpl) {
  BodyParams p;
  const auto& bones = tmpl.bones();
  p.pose.resize(tmpl.num_joints() - 1);
  for (int b = 1; b < tmpl.num_joints(); ++b) p.pose(b - 1) = rng.uniform(bones[b].min_angle, bones[b].max_angle);
  for (int i = 0; i < 3; ++i) p.shape(i) = rng.uniform(0.8, 1.2);
  const double yaw = rng.uniform(-M_PI / 4, M_PI / 4);
  const double pitch = rng.uniform(-0.15, 0.15);
  const double roll = rng.uniform(-0.15, 0.15);
  p.root_rotation = axis_angle<double>(Vector3d::UnitY(), yaw) * axis_angle<double>(Vector3d::UnitX(), pitch) *
                    axis_angle<double>(Vector3d::UnitZ(), roll);
  return p;
}

CameraParams sample_camera(Rng& rng) {
  CameraParams c;
  c.scale = rng.uniform(0.8, 1.2);
  c.translation.x() = rng.uniform(-0.1, 0.1);
  c.translation.y() = rng.uniform(-0.1, 0.1);
  return c;
}

std::vector<DatasetRecord> make_dataset(int count, double occlusion_rate, std::uint64_t seed,
                                        const BodyTemplate& tmpl) {
  if (count < 1) fail(ErrorKind::Config, "dataset count must be at least 1");
  if (!(occlusion_rate >= 0 && occlusion_rate <= 1)) fail(ErrorKind::Config, "occlusion rate must lie in [0, 1]");
  Rng rng(seed);
  std::vector<DatasetRecord> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    DatasetRecord rec;
    rec.params = sample_params(rng, tmpl);
    rec.camera = sample_camera(rng);
    std::set<int> hidden;
    for (int k = 0; k < tmpl.num_keypoints(); ++k)
      if (rng.bernoulli(occlusion_rate)) hidden.insert(k);
    rec.canonical = synth_body(rec.params, tmpl);
    rec.observation = render_observation(rec.canonical, rec.params.root_rotation, rec.camera, hidden, tmpl);
    out.push_back(std::move(rec));
  }
  return out;
}

namespace {

void put(std::string& line, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  if (!line.empty()) line.push_back(' ');
  line += buf;
}

std::vector<double> parse_reals(const std::string& line, std::size_t expected, int record) {
  std::vector<double> out;
  out.reserve(expected);
  const char* p = line.c_str();
  char* end = nullptr;
  while (true) {
    const double v = std::strtod(p, &end);
    if (end == p) break;
    out.push_back(v);
    p = end;
  }
  while (*p == ' ' || *p == '\r' || *p == '\t') ++p;
  if (*p != '\0' || out.size() != expected)
    fail(ErrorKind::Validation, "record " + std::to_string(record) + ": expected " + std::to_string(expected) +
                                    " values, got " + std::to_string(out.size()));
  return out;
}

}  // namespace

void write_dataset(const std::string& path, const std::vector<DatasetRecord>& records, const BodyTemplate& tmpl) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot open " + path + " for writing");
  out << "MEGADATA v1 V=" << tmpl.num_vertices() << " K=" << tmpl.num_keypoints() << " N_records=" << records.size()
      << "\n";
  std::string line;
  for (const auto& rec : records) {
    line.clear();
    for (Eigen::Index i = 0; i < rec.params.pose.size(); ++i) put(line, rec.params.pose(i));
    for (int i = 0; i < 3; ++i) put(line, rec.params.shape(i));
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) put(line, rec.params.root_rotation(r, c));
    put(line, rec.camera.scale);
    put(line, rec.camera.translation.x());
    put(line, rec.camera.translation.y());
    out << line << "\n";
    line.clear();
    for (Eigen::Index i = 0; i < rec.canonical.rows(); ++i)
      for (int c = 0; c < 3; ++c) put(line, rec.canonical(i, c));
    out << line << "\n";
    line.clear();
    for (int k = 0; k < rec.observation.size(); ++k) {
      put(line, rec.observation.keypoints(k, 0));
      put(line, rec.observation.keypoints(k, 1));
      put(line, rec.observation.visible[k] ? 1.0 : 0.0);
    }
    out << line << "\n";
  }
  if (!out) fail(ErrorKind::Io, "failed writing " + path);
}

std::vector<DatasetRecord> read_dataset(const std::string& path, const BodyTemplate& tmpl) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path);
  std::string header;
  std::getline(in, header);
  int v = 0, k = 0;
  long n = 0;
  if (std::sscanf(header.c_str(), "MEGADATA v1 V=%d K=%d N_records=%ld", &v, &k, &n) != 3)
    fail(ErrorKind::Validation, path + ": bad dataset header");
  if (v != tmpl.num_vertices() || k != tmpl.num_keypoints())
    fail(ErrorKind::Validation, path + ": V/K do not match the body template");
  const int nj = tmpl.num_joints();
  std::vector<DatasetRecord> out;
  out.reserve(n);
  std::string line;
  for (long r = 0; r < n; ++r) {
    DatasetRecord rec;
    if (!std::getline(in, line)) fail(ErrorKind::Validation, path + ": truncated");
    auto a = parse_reals(line, (nj - 1) + 3 + 9 + 3, static_cast<int>(r));
    rec.params.pose = Eigen::Map<Eigen::VectorXd>(a.data(), nj - 1);
    rec.params.shape = Vector3d(a[nj - 1], a[nj], a[nj + 1]);
    for (int i = 0; i < 9; ++i) rec.params.root_rotation(i / 3, i % 3) = a[nj + 2 + i];
    rec.camera.scale = a[nj + 11];
    rec.camera.translation = Eigen::Vector2d(a[nj + 12], a[nj + 13]);
    if (!std::getline(in, line)) fail(ErrorKind::Validation, path + ": truncated");
    auto b = parse_reals(line, 3 * static_cast<std::size_t>(v), static_cast<int>(r));
    rec.canonical = Eigen::Map<Points3d>(b.data(), v, 3);
    if (!std::getline(in, line)) fail(ErrorKind::Validation, path + ": truncated");
    auto c = parse_reals(line, 3 * static_cast<std::size_t>(k), static_cast<int>(r));
    rec.observation.keypoints.resize(k, 2);
    rec.observation.visible.resize(k);
    for (int j = 0; j < k; ++j) {
      rec.observation.keypoints(j, 0) = c[3 * j];
      rec.observation.keypoints(j, 1) = c[3 * j + 1];
      rec.observation.visible[j] = c[3 * j + 2] != 0.0;
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace mega
