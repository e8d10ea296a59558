#include "mega/model.hpp"

#include <array>
#include <cmath>
#include <utility>

#include "mega/binary_io.hpp"
#include "mega/error.hpp"

namespace mega {

using nn::Matrix;
using nn::RowRef;
using nn::Segment;
using nn::Tape;
using nn::Var;

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) fail(ErrorKind::Config, std::string("model config: ") + name + " must be positive");
  };
  positive(num_parts, "N");
  positive(codebook_size, "S");
  positive(dim, "D");
  positive(encoder_blocks, "B_e");
  positive(decoder_blocks, "B_d");
  positive(heads, "heads");
  positive(num_keypoints, "K");
  positive(mlp_ratio, "mlp_ratio");
  if (dim % heads != 0) fail(ErrorKind::Config, "model config: D must be divisible by heads");
}

int MaskedSequence::num_visible() const {
  int n = 0;
  for (bool v : visible) n += v;
  return n;
}

MaskedSequence MaskedSequence::fully_masked(int n) {
  return {std::vector<int>(static_cast<std::size_t>(n), 0), std::vector<bool>(static_cast<std::size_t>(n), false)};
}

MegaModel::MegaModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const int n = config_.num_parts, d = config_.dim, g = config_.num_conditioning();
  Rng rng(seed);
  token_embedding_ = &params_.add("token_embedding", config_.codebook_size, d);
  cls_ = &params_.add("cls", 1, d);
  mask_ = &params_.add("mask", 1, d);
  encoder_pos_ = &params_.add("encoder.pos", n + 1, d);
  decoder_pos_ = &params_.add("decoder.pos", n + g, d);
  for (nn::Parameter* p : {token_embedding_, cls_, mask_, encoder_pos_, decoder_pos_}) nn::init_normal(*p, rng);
  for (int b = 0; b < config_.encoder_blocks; ++b)
    encoder_.push_back(nn::TransformerBlock::create(params_, "encoder.block" + std::to_string(b), d, config_.heads,
                                                    config_.mlp_ratio, rng));
  encoder_norm_ = nn::LayerNorm::create(params_, "encoder.norm", d);
  for (int b = 0; b < config_.decoder_blocks; ++b)
    decoder_.push_back(nn::TransformerBlock::create(params_, "decoder.block" + std::to_string(b), d, config_.heads,
                                                    config_.mlp_ratio, rng));
  decoder_norm_ = nn::LayerNorm::create(params_, "decoder.norm", d);
  head_hidden_ = nn::Linear::create(params_, "head.hidden", d, d, rng);
  head_out_ = nn::Linear::create(params_, "head.out", d, config_.codebook_size, rng, nn::kInitStd);
  cond_weight_ = &params_.add("cond.weight", 3 * config_.num_keypoints, d);
  cond_bias_ = &params_.add("cond.bias", config_.num_keypoints, d, false);
  nn::init_normal(*cond_weight_, rng, nn::xavier_std(3, d));
  input_shift_ = &params_.add("cond.input_shift", config_.num_keypoints, 2, false);
  input_gain_ = &params_.add("cond.input_gain", config_.num_keypoints, 2, false);
  input_shift_->trainable = input_gain_->trainable = false;
  input_gain_->value.setOnes();
  rotcam_fc1_ = nn::Linear::create(params_, "rotcam.fc1", d, d, rng);
  rotcam_fc2_ = nn::Linear::create(params_, "rotcam.fc2", d, d, rng);
  rotcam_out_ = nn::Linear::create(params_, "rotcam.out", d, 9, rng, nn::kInitStd);
  // start from the identity rotation and unit camera scale
  rotcam_out_.bias->value << 1, 0, 0, 0, 1, 0, 1, 0, 0;
}

Var MegaModel::encode(Tape& tape, const std::vector<MaskedSequence>& batch) const {
  std::vector<int> tokens, positions;
  std::vector<RowRef> refs;
  std::vector<Segment> segments;
  for (const MaskedSequence& m : batch) {
    segments.push_back({static_cast<Eigen::Index>(refs.size()), 1 + m.num_visible()});
    refs.push_back({0, 0});
    positions.push_back(0);
    for (int p = 0; p < m.size(); ++p) {
      if (!m.visible[p]) continue;
      refs.push_back({1, static_cast<Eigen::Index>(tokens.size())});
      tokens.push_back(m.indices[p]);
      positions.push_back(1 + p);
    }
  }
  std::vector<Var> sources{tape.param(*cls_)};
  if (!tokens.empty()) sources.push_back(nn::gather_rows(tape.param(*token_embedding_), tokens));
  Var x = nn::add(nn::assemble_rows(sources, refs), nn::gather_rows(tape.param(*encoder_pos_), positions));
  for (const auto& block : encoder_) x = block(tape, x, segments);
  return encoder_norm_(tape, x);
}

Var MegaModel::conditioning(Tape& tape, const std::vector<const Observation*>& observations) const {
  const int k = config_.num_keypoints;
  Matrix features(static_cast<Eigen::Index>(observations.size()) * k, 3);
  for (std::size_t b = 0; b < observations.size(); ++b) {
    const Observation& obs = *observations[b];
    if (obs.size() != k || obs.keypoints.rows() != k)
      fail(ErrorKind::Config, "observation keypoint count does not match the model");
    for (int j = 0; j < k; ++j) {
      const Eigen::Index r = static_cast<Eigen::Index>(b) * k + j;
      const bool vis = obs.visible[j];
      for (int c = 0; c < 2; ++c)
        features(r, c) = vis ? (obs.keypoints(j, c) - input_shift_->value(j, c)) * input_gain_->value(j, c)
                             : Observation::kHidden;
      features(r, 2) = vis ? 1.0 : 0.0;
    }
  }
  return nn::rowwise_linear(tape.constant(std::move(features)), tape.param(*cond_weight_), tape.param(*cond_bias_));
}

Var MegaModel::rot_cam(Tape& tape, Var conditioning_tokens, int batch) const {
  const int g = config_.num_conditioning();
  std::vector<Segment> segments;
  for (int b = 0; b < batch; ++b) segments.push_back({static_cast<Eigen::Index>(b) * g, g});
  Var h = nn::segment_mean(conditioning_tokens, segments);
  h = nn::gelu(rotcam_fc1_(tape, h));
  h = nn::gelu(rotcam_fc2_(tape, h));
  return rotcam_out_(tape, h);
}

Var MegaModel::forward_logits(Tape& tape, const std::vector<MaskedSequence>& batch,
                              const std::vector<const Observation*>& observations) const {
  const int n = config_.num_parts, g = config_.num_conditioning();
  if (batch.empty() || observations.size() != batch.size())
    fail(ErrorKind::Config, "forward_logits: need one observation slot per sequence");
  bool any_visible = false;
  for (const MaskedSequence& m : batch) {
    if (m.size() != n || static_cast<int>(m.visible.size()) != n)
      fail(ErrorKind::Config, "forward_logits: sequence length does not match N");
    if (m.num_visible() >= n) fail(ErrorKind::Config, "forward_logits: at least one position must be hidden");
    for (int p = 0; p < n; ++p)
      if (m.visible[p] && (m.indices[p] < 0 || m.indices[p] >= config_.codebook_size))
        fail(ErrorKind::InvalidToken, "forward_logits: visible token out of range");
    any_visible = any_visible || m.num_visible() > 0;
  }

  std::vector<const Observation*> present;
  for (const Observation* o : observations)
    if (o != nullptr) present.push_back(o);

  std::vector<Var> sources{tape.param(*mask_)};
  int enc_src = -1, cond_src = -1;
  if (any_visible) {
    enc_src = static_cast<int>(sources.size());
    sources.push_back(encode(tape, batch));
  }
  if (!present.empty()) {
    cond_src = static_cast<int>(sources.size());
    sources.push_back(conditioning(tape, present));
  }

  std::vector<RowRef> refs;
  std::vector<int> positions;
  std::vector<Segment> segments;
  std::vector<RowRef> mesh_rows;
  Eigen::Index enc_row = 0, cond_row = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const MaskedSequence& m = batch[b];
    const Eigen::Index start = static_cast<Eigen::Index>(refs.size());
    ++enc_row;  // cls
    for (int p = 0; p < n; ++p) {
      mesh_rows.push_back({0, static_cast<Eigen::Index>(refs.size())});
      refs.push_back(m.visible[p] ? RowRef{enc_src, enc_row++} : RowRef{0, 0});
      positions.push_back(p);
    }
    if (observations[b] != nullptr) {
      for (int j = 0; j < g; ++j) {
        refs.push_back({cond_src, cond_row++});
        positions.push_back(n + j);
      }
    }
    segments.push_back({start, static_cast<Eigen::Index>(refs.size()) - start});
  }
  Var x = nn::add(nn::assemble_rows(sources, refs), nn::gather_rows(tape.param(*decoder_pos_), positions));
  for (const auto& block : decoder_) x = block(tape, x, segments);
  x = decoder_norm_(tape, x);
  if (static_cast<Eigen::Index>(mesh_rows.size()) != x.rows()) x = nn::assemble_rows({x}, mesh_rows);
  return head_out_(tape, nn::gelu(head_hidden_(tape, x)));
}

Matrix MegaModel::forward_logits(const MaskedSequence& masked, const Observation* observation) const {
  Tape tape(false);
  return forward_logits(tape, {masked}, {observation}).value();
}

RotCam MegaModel::predict_rot_cam(const Observation& observation) const {
  Tape tape(false);
  const Matrix out = rot_cam(tape, conditioning(tape, {&observation}), 1).value();
  RotCam rc;
  for (int i = 0; i < 6; ++i) rc.rotation6d(i) = out(0, i);
  rc.camera.scale = out(0, 6);
  rc.camera.translation = Eigen::Vector2d(out(0, 7), out(0, 8));
  return rc;
}

void MegaModel::fit_keypoint_normalization(const std::vector<const Observation*>& observations) {
  const int k = config_.num_keypoints;
  Matrix count = Matrix::Zero(k, 2), mean = Matrix::Zero(k, 2), m2 = Matrix::Zero(k, 2);
  for (const Observation* obs : observations) {
    if (obs->size() != k) fail(ErrorKind::Config, "observation keypoint count does not match the model");
    for (int j = 0; j < k; ++j) {
      if (!obs->visible[j]) continue;
      for (int c = 0; c < 2; ++c) {
        const double x = obs->keypoints(j, c);
        count(j, c) += 1.0;
        const double delta = x - mean(j, c);
        mean(j, c) += delta / count(j, c);
        m2(j, c) += delta * (x - mean(j, c));
      }
    }
  }
  for (int j = 0; j < k; ++j) {
    for (int c = 0; c < 2; ++c) {
      const double sd = count(j, c) > 1 ? std::sqrt(m2(j, c) / count(j, c)) : 0.0;
      input_shift_->value(j, c) = count(j, c) > 0 ? mean(j, c) : 0.0;
      input_gain_->value(j, c) = sd > 1e-9 ? 1.0 / sd : 1.0;
    }
  }
}

Var loss_tokens(Var logits, const TokenSequence& target, const std::vector<bool>& visible) {
  if (static_cast<Eigen::Index>(visible.size()) != logits.rows() || target.size() != logits.rows())
    fail(ErrorKind::Shape, "loss_tokens: target and visibility must match logit rows");
  std::vector<bool> hidden(visible.size());
  for (std::size_t i = 0; i < visible.size(); ++i) hidden[i] = !visible[i];
  return nn::cross_entropy(logits, target.indices, hidden);
}

Var loss_rot_cam(Var r6, Var camera, const Matrix3d& gt_rotation, const Points3d& gt_joints,
                 const Observation& observation) {
  if (!is_rotation(gt_rotation)) fail(ErrorKind::InvalidRotation, "loss_rot_cam: ground truth is not a rotation");
  const Var rotation = nn::rot6d_to_matrix(r6);
  return nn::add(nn::frobenius_distance(rotation, Matrix(gt_rotation)),
                 nn::reprojection_l1(rotation, camera, Matrix(gt_joints), Matrix(observation.keypoints),
                                     observation.visible));
}

namespace {

constexpr std::array<char, 4> kMagic{'M', 'E', 'G', 'A'};
constexpr std::uint32_t kVersion = 1;

std::array<std::pair<const char*, int>, 7> config_fields(const ModelConfig& c) {
  return {{{"N", c.num_parts},
           {"S", c.codebook_size},
           {"D", c.dim},
           {"B_e", c.encoder_blocks},
           {"B_d", c.decoder_blocks},
           {"G", c.num_conditioning()},
           {"K", c.num_keypoints}}};
}

}  // namespace

void save_checkpoint(const std::string& path, const MegaModel& model) {
  BinaryWriter out(path);
  out.bytes(kMagic.data(), kMagic.size());
  out.u32(kVersion);
  for (const auto& [name, value] : config_fields(model.config())) out.u32(static_cast<std::uint32_t>(value));
  out.u32(static_cast<std::uint32_t>(model.parameters().size()));
  for (const nn::Parameter& p : model.parameters()) {
    out.u32(static_cast<std::uint32_t>(p.name.size()));
    out.bytes(p.name.data(), p.name.size());
    out.u32(2);
    out.u32(static_cast<std::uint32_t>(p.value.rows()));
    out.u32(static_cast<std::uint32_t>(p.value.cols()));
    out.matrix(p.value);
  }
  out.close();
}

MegaModel load_checkpoint(const std::string& path, const ModelConfig& expected) {
  BinaryReader in(path);
  if (in.bytes(kMagic.size()) != std::string(kMagic.data(), kMagic.size())) fail(ErrorKind::CorruptCheckpoint, path + ": not a MEGA checkpoint");
  if (const auto v = in.u32(); v != kVersion)
    fail(ErrorKind::CorruptCheckpoint, path + ": unsupported checkpoint version " + std::to_string(v));
  for (const auto& [name, value] : config_fields(expected)) {
    const auto stored = in.u32();
    if (stored != static_cast<std::uint32_t>(value))
      fail(ErrorKind::Validation, path + ": checkpoint " + name + "=" + std::to_string(stored) +
                                      " does not match config " + name + "=" + std::to_string(value));
  }
  MegaModel model(expected);
  const auto count = in.u32();
  if (count != static_cast<std::uint32_t>(model.parameters().size()))
    fail(ErrorKind::CorruptCheckpoint, path + ": parameter count mismatch");
  for (nn::Parameter& p : model.parameters()) {
    const auto len = in.u32();
    if (len > 4096) fail(ErrorKind::CorruptCheckpoint, path + ": parameter name too long");
    const std::string name = in.bytes(len);
    if (name != p.name) fail(ErrorKind::CorruptCheckpoint, path + ": expected parameter " + p.name + ", found " + name);
    const auto rank = in.u32();
    if (rank != 2) fail(ErrorKind::CorruptCheckpoint, path + ": parameter " + name + " has rank " + std::to_string(rank));
    const auto rows = in.u32(), cols = in.u32();
    if (rows != p.value.rows() || cols != p.value.cols())
      fail(ErrorKind::CorruptCheckpoint, path + ": parameter " + name + " has the wrong shape");
    p.value = in.matrix(rows, cols);
  }
  in.expect_end();
  return model;
}

}  // namespace mega
