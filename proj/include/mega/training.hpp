#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mega/config.hpp"
#include "mega/nn/optim.hpp"

namespace mega {

/// One training example: target tokens plus, for conditioned training,
/// the record and its ground-truth joints.
struct TrainingItem {
  TokenSequence tokens;
  const DatasetRecord* record{nullptr};
  Points3d joints;
};

std::vector<TrainingItem> make_training_items(const std::vector<DatasetRecord>& records,
                                              const TokenizerModel& tokenizer, const BodyTemplate& tmpl);

/// Visible-token count for one item under the given masking mode.
int sample_visible_count(MaskingMode mode, int n, Rng& rng);

struct TrainOptions {
  int epochs{1};
  int batch_size{64};
  double base_lr{1e-3};
  double warmup_epochs{0};
  nn::AdamWConfig adam{};
  MaskingMode masking{MaskingMode::Cosine};
  bool conditioned{true};
  int shards{4};
  std::uint64_t seed{0};
  std::function<void(const std::vector<MaskedSequence>&)> on_batch;  // sees every masked batch
  std::function<void(const std::string&)> log;                       // one line per step
};

struct TrainResult {
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;
  long steps{0};
};

/// Sum over the batch of per-item losses times `weight`. Conditioned items
/// add the rotation/camera loss to the masked-token loss.
nn::Var batch_loss(nn::Tape& tape, const MegaModel& model, const std::vector<MaskedSequence>& masked,
                   const std::vector<const TrainingItem*>& items, bool conditioned, double weight);

TrainResult train_model(MegaModel& model, const std::vector<TrainingItem>& items, const TrainOptions& options);

TrainOptions train_options(const RunConfig& config, bool conditioned);

struct MaskedAccuracy {
  double accuracy{0};
  double cross_entropy{0};
};

/// Masked-token accuracy and loss under freshly drawn masks, `draws` per item.
MaskedAccuracy masked_accuracy(const MegaModel& model, const std::vector<TrainingItem>& items, MaskingMode masking,
                               bool conditioned, int draws, std::uint64_t seed);

/// Mean geodesic angle (radians) between predicted and true root rotations.
double mean_rotation_error(const MegaModel& model, const std::vector<TrainingItem>& items);

}  // namespace mega
