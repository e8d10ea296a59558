#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mega/body.hpp"
#include "mega/nn/layers.hpp"
#include "mega/tokenizer.hpp"

namespace mega {

struct ModelConfig {
  int num_parts{24};       // N
  int codebook_size{64};   // S
  int dim{64};             // D
  int encoder_blocks{4};   // B_e
  int decoder_blocks{2};   // B_d
  int heads{4};
  int num_keypoints{12};   // K; also G, one conditioning token per keypoint
  int mlp_ratio{4};

  int num_conditioning() const { return num_keypoints; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Token indices with a visibility flag per position.
struct MaskedSequence {
  std::vector<int> indices;
  std::vector<bool> visible;

  int size() const { return static_cast<int>(indices.size()); }
  int num_visible() const;
  static MaskedSequence fully_masked(int n);
};

/// Global rotation (6D) and weak-perspective camera predicted from keypoints.
struct RotCam {
  Eigen::Matrix<double, 6, 1> rotation6d;
  CameraParams camera;
};

class MegaModel {
 public:
  explicit MegaModel(const ModelConfig& config, std::uint64_t seed = 0);
  MegaModel(const MegaModel&) = delete;
  MegaModel& operator=(const MegaModel&) = delete;
  MegaModel(MegaModel&&) = default;

  const ModelConfig& config() const { return config_; }
  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }

  /// Logits for every mesh slot of every item, stacked item-major
  /// (B*N x S). A null observation means pre-training mode for that item.
  nn::Var forward_logits(nn::Tape& tape, const std::vector<MaskedSequence>& batch,
                         const std::vector<const Observation*>& observations) const;

  /// Conditioning tokens, G rows per observation.
  nn::Var conditioning(nn::Tape& tape, const std::vector<const Observation*>& observations) const;

  /// Rot-cam head on the per-item mean of conditioning tokens; B x 9.
  nn::Var rot_cam(nn::Tape& tape, nn::Var conditioning_tokens, int batch) const;

  nn::Matrix forward_logits(const MaskedSequence& masked, const Observation* observation) const;
  RotCam predict_rot_cam(const Observation& observation) const;

  /// Sets the per-keypoint standardization applied to visible keypoints
  /// from the mean and SD of each coordinate over `observations`.
  void fit_keypoint_normalization(const std::vector<const Observation*>& observations);

 private:
  nn::Var encode(nn::Tape& tape, const std::vector<MaskedSequence>& batch) const;

  ModelConfig config_;
  nn::ParameterSet params_;
  nn::Parameter* token_embedding_{nullptr};
  nn::Parameter* cls_{nullptr};
  nn::Parameter* mask_{nullptr};
  nn::Parameter* encoder_pos_{nullptr};
  nn::Parameter* decoder_pos_{nullptr};
  std::vector<nn::TransformerBlock> encoder_;
  std::vector<nn::TransformerBlock> decoder_;
  nn::LayerNorm encoder_norm_, decoder_norm_;
  nn::Linear head_hidden_, head_out_;
  nn::Parameter* cond_weight_{nullptr};
  nn::Parameter* cond_bias_{nullptr};
  nn::Parameter* input_shift_{nullptr};
  nn::Parameter* input_gain_{nullptr};
  nn::Linear rotcam_fc1_, rotcam_fc2_, rotcam_out_;
};

/// Mean cross-entropy over hidden positions.
nn::Var loss_tokens(nn::Var logits, const TokenSequence& target, const std::vector<bool>& visible);

/// |rot6d(r6) - R_gt|_F + mean L1 reprojection error of gt_joints over visible keypoints.
nn::Var loss_rot_cam(nn::Var r6, nn::Var camera, const Matrix3d& gt_rotation, const Points3d& gt_joints,
                     const Observation& observation);

void save_checkpoint(const std::string& path, const MegaModel& model);
/// Validates the stored config against `expected` before reading any tensor.
MegaModel load_checkpoint(const std::string& path, const ModelConfig& expected);

}  // namespace mega
