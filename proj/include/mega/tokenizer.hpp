#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "mega/body.hpp"

namespace mega {

/// N codebook indices, one per mesh part.
struct TokenSequence {
  std::vector<int> indices;

  int size() const { return static_cast<int>(indices.size()); }
  int operator[](int i) const { return indices[i]; }
  int& operator[](int i) { return indices[i]; }
  bool operator==(const TokenSequence&) const = default;
};

/// Frozen per-part linear quantizer: PCA basis per part plus one codebook
/// shared by all parts.
struct TokenizerModel {
  int num_parts{0};      // N
  int latent_dim{0};     // L
  int codebook_size{0};  // S
  int num_vertices{0};   // V
  std::vector<std::vector<int>> partition;
  std::vector<Eigen::MatrixXd> bases;  // (3|part|) x L, orthonormal columns
  std::vector<Eigen::VectorXd> means;  // 3|part|
  Eigen::MatrixXd codebook;            // S x L
};

/// Contiguous groups of V/N vertices in template order.
std::vector<std::vector<int>> partition_vertices(int num_vertices, int num_parts);

/// Lloyd's algorithm with seeded k-means++ initialisation. Rows of
/// `points` are samples. Nearest-centre ties go to the lowest index.
Eigen::MatrixXd kmeans(const Eigen::MatrixXd& points, int k, int max_iterations, std::uint64_t seed);

int nearest_row(const Eigen::MatrixXd& centers, const Eigen::Ref<const Eigen::VectorXd>& x);

TokenizerModel fit_tokenizer(const std::vector<CanonicalMesh>& meshes, int num_parts, int latent_dim,
                             int codebook_size, std::uint64_t seed, int kmeans_iterations = 100);

/// Continuous per-part latents, part-major (N * L values).
Eigen::VectorXd mesh_latents(const TokenizerModel& model, const CanonicalMesh& mesh);

TokenSequence encode_mesh(const TokenizerModel& model, const CanonicalMesh& mesh);
CanonicalMesh decode_tokens(const TokenizerModel& model, const TokenSequence& tokens);

void save_tokenizer(const std::string& path, const TokenizerModel& model);
TokenizerModel load_tokenizer(const std::string& path);

}  // namespace mega
