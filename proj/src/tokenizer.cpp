#include "mega/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <limits>

#include "mega/binary_io.hpp"
#include "mega/rng.hpp"

namespace mega {

std::vector<std::vector<int>> partition_vertices(int num_vertices, int num_parts) {
  if (num_parts < 1 || num_vertices < 1 || num_vertices % num_parts != 0)
    fail(ErrorKind::Config, "V=" + std::to_string(num_vertices) + " is not divisible by N=" + std::to_string(num_parts));
  const int size = num_vertices / num_parts;
  std::vector<std::vector<int>> parts(num_parts);
  for (int p = 0; p < num_parts; ++p) {
    parts[p].resize(size);
    for (int i = 0; i < size; ++i) parts[p][i] = p * size + i;
  }
  return parts;
}

int nearest_row(const Eigen::MatrixXd& centers, const Eigen::Ref<const Eigen::VectorXd>& x) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centers.rows(); ++c) {
    const double d = (centers.row(c).transpose() - x).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

Eigen::MatrixXd kmeans(const Eigen::MatrixXd& points, int k, int max_iterations, std::uint64_t seed) {
  const Eigen::Index n = points.rows();
  if (k < 1 || n < k) fail(ErrorKind::Fit, "k-means needs at least k=" + std::to_string(k) + " points");
  Rng rng(seed);
  Eigen::MatrixXd centers(k, points.cols());

  // k-means++ seeding
  Eigen::VectorXd dist2(n);
  centers.row(0) = points.row(static_cast<Eigen::Index>(rng.below(n)));
  dist2 = (points.rowwise() - centers.row(0)).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = dist2.sum();
    if (!(total > 0)) fail(ErrorKind::Fit, "fewer than k=" + std::to_string(k) + " distinct latents");
    double target = rng.uniform() * total;
    Eigen::Index pick = n - 1;
    for (Eigen::Index i = 0; i < n; ++i) {
      target -= dist2(i);
      if (target < 0 && dist2(i) > 0) {
        pick = i;
        break;
      }
    }
    while (dist2(pick) <= 0) --pick;
    centers.row(c) = points.row(pick);
    dist2 = dist2.cwiseMin((points.rowwise() - centers.row(c)).rowwise().squaredNorm());
  }

  std::vector<int> assign(n, -1);
  for (int it = 0; it < max_iterations; ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int a = nearest_row(centers, points.row(i).transpose());
      if (a != assign[i]) {
        assign[i] = a;
        changed = true;
      }
    }
    if (!changed) break;
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, points.cols());
    std::vector<int> counts(k, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[i]) += points.row(i);
      ++counts[assign[i]];
    }
    // empty clusters keep their previous centre
    for (int c = 0; c < k; ++c)
      if (counts[c] > 0) centers.row(c) = sums.row(c) / counts[c];
  }
  return centers;
}

namespace {

Eigen::VectorXd flatten_part(const CanonicalMesh& mesh, const std::vector<int>& part) {
  Eigen::VectorXd x(3 * part.size());
  for (std::size_t i = 0; i < part.size(); ++i) x.segment<3>(3 * i) = mesh.row(part[i]).transpose();
  return x;
}

}  // namespace

TokenizerModel fit_tokenizer(const std::vector<CanonicalMesh>& meshes, int num_parts, int latent_dim,
                             int codebook_size, std::uint64_t seed, int kmeans_iterations) {
  if (meshes.empty()) fail(ErrorKind::Fit, "empty dataset");
  if (static_cast<int>(meshes.size()) < codebook_size)
    fail(ErrorKind::Fit, "dataset size " + std::to_string(meshes.size()) + " is smaller than S=" +
                             std::to_string(codebook_size));
  if (latent_dim < 1) fail(ErrorKind::Config, "latent dimension must be positive");
  TokenizerModel model;
  model.num_parts = num_parts;
  model.latent_dim = latent_dim;
  model.codebook_size = codebook_size;
  model.num_vertices = static_cast<int>(meshes.front().rows());
  model.partition = partition_vertices(model.num_vertices, num_parts);
  const int part_dim = 3 * static_cast<int>(model.partition.front().size());
  if (latent_dim > part_dim) fail(ErrorKind::Config, "latent dimension exceeds part dimension");

  const Eigen::Index n = static_cast<Eigen::Index>(meshes.size());
  Eigen::MatrixXd all_latents(n * num_parts, latent_dim);
  for (int p = 0; p < num_parts; ++p) {
    Eigen::MatrixXd x(n, part_dim);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (meshes[i].rows() != model.num_vertices) fail(ErrorKind::Shape, "meshes have differing vertex counts");
      x.row(i) = flatten_part(meshes[i], model.partition[p]).transpose();
    }
    const Eigen::VectorXd mean = x.colwise().mean().transpose();
    x.rowwise() -= mean.transpose();
    const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    const Eigen::VectorXd& values = eig.eigenvalues();  // ascending
    const double top = values(part_dim - 1);
    const double kth = values(part_dim - latent_dim);
    if (!(top > 1e-20) || !(kth > 1e-10 * top))
      fail(ErrorKind::Fit, "part " + std::to_string(p) + " has covariance rank below L=" + std::to_string(latent_dim));
    Eigen::MatrixXd basis(part_dim, latent_dim);
    for (int l = 0; l < latent_dim; ++l) {
      Eigen::VectorXd v = eig.eigenvectors().col(part_dim - 1 - l);
      Eigen::Index arg;
      v.cwiseAbs().maxCoeff(&arg);
      if (v(arg) < 0) v = -v;
      basis.col(l) = v;
    }
    all_latents.middleRows(p * n, n) = x * basis;
    model.bases.push_back(std::move(basis));
    model.means.push_back(mean);
  }
  model.codebook = kmeans(all_latents, codebook_size, kmeans_iterations, seed);
  return model;
}

Eigen::VectorXd mesh_latents(const TokenizerModel& model, const CanonicalMesh& mesh) {
  if (mesh.rows() != model.num_vertices) fail(ErrorKind::Shape, "mesh vertex count does not match tokenizer");
  Eigen::VectorXd z(model.num_parts * model.latent_dim);
  for (int p = 0; p < model.num_parts; ++p)
    z.segment(p * model.latent_dim, model.latent_dim) =
        model.bases[p].transpose() * (flatten_part(mesh, model.partition[p]) - model.means[p]);
  return z;
}

TokenSequence encode_mesh(const TokenizerModel& model, const CanonicalMesh& mesh) {
  const Eigen::VectorXd z = mesh_latents(model, mesh);
  TokenSequence t;
  t.indices.resize(model.num_parts);
  for (int p = 0; p < model.num_parts; ++p)
    t[p] = nearest_row(model.codebook, z.segment(p * model.latent_dim, model.latent_dim));
  return t;
}

CanonicalMesh decode_tokens(const TokenizerModel& model, const TokenSequence& tokens) {
  if (tokens.size() != model.num_parts)
    fail(ErrorKind::InvalidToken, "token sequence length " + std::to_string(tokens.size()) + " != N=" +
                                      std::to_string(model.num_parts));
  CanonicalMesh mesh(model.num_vertices, 3);
  for (int p = 0; p < model.num_parts; ++p) {
    const int idx = tokens[p];
    if (idx < 0 || idx >= model.codebook_size)
      fail(ErrorKind::InvalidToken, "token " + std::to_string(idx) + " outside [0, " +
                                        std::to_string(model.codebook_size) + ")");
    const Eigen::VectorXd x = model.bases[p] * model.codebook.row(idx).transpose() + model.means[p];
    const auto& part = model.partition[p];
    for (std::size_t i = 0; i < part.size(); ++i) mesh.row(part[i]) = x.segment<3>(3 * i).transpose();
  }
  return mesh;
}

void save_tokenizer(const std::string& path, const TokenizerModel& model) {
  BinaryWriter w(path);
  w.bytes("MTOK", 4);
  w.u32(1);
  w.u32(model.num_parts);
  w.u32(model.latent_dim);
  w.u32(model.codebook_size);
  w.u32(model.num_vertices);
  for (const auto& part : model.partition)
    for (int i : part) w.u32(static_cast<std::uint32_t>(i));
  for (const auto& b : model.bases) w.matrix(b);
  for (const auto& m : model.means) w.matrix(m);
  w.matrix(model.codebook);
  w.close();
}

TokenizerModel load_tokenizer(const std::string& path) {
  BinaryReader r(path);
  if (r.bytes(4) != "MTOK") fail(ErrorKind::CorruptCheckpoint, path + ": bad tokenizer magic");
  if (r.u32() != 1) fail(ErrorKind::CorruptCheckpoint, path + ": unsupported tokenizer version");
  TokenizerModel m;
  m.num_parts = static_cast<int>(r.u32());
  m.latent_dim = static_cast<int>(r.u32());
  m.codebook_size = static_cast<int>(r.u32());
  m.num_vertices = static_cast<int>(r.u32());
  if (m.num_parts < 1 || m.latent_dim < 1 || m.codebook_size < 1 || m.num_vertices < 1 ||
      m.num_vertices % m.num_parts != 0 || m.num_vertices > (1 << 24))
    fail(ErrorKind::CorruptCheckpoint, path + ": inconsistent tokenizer header");
  const int size = m.num_vertices / m.num_parts;
  m.partition.assign(m.num_parts, std::vector<int>(size));
  for (auto& part : m.partition)
    for (int& i : part) {
      i = static_cast<int>(r.u32());
      if (i < 0 || i >= m.num_vertices) fail(ErrorKind::CorruptCheckpoint, path + ": partition index out of range");
    }
  for (int p = 0; p < m.num_parts; ++p) m.bases.push_back(r.matrix(3 * size, m.latent_dim));
  for (int p = 0; p < m.num_parts; ++p) m.means.push_back(r.matrix(3 * size, 1));
  m.codebook = r.matrix(m.codebook_size, m.latent_dim);
  r.expect_end();
  return m;
}

}  // namespace mega
