#include "mega/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "mega/error.hpp"
#include "mega/geometry.hpp"
#include "mega/parallel.hpp"

namespace mega {

std::vector<TrainingItem> make_training_items(const std::vector<DatasetRecord>& records,
                                              const TokenizerModel& tokenizer, const BodyTemplate& tmpl) {
  std::vector<TrainingItem> items(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    items[i].tokens = encode_mesh(tokenizer, records[i].canonical);
    items[i].record = &records[i];
    items[i].joints = joints_from_mesh(records[i].canonical, tmpl);
  }
  return items;
}

int sample_visible_count(MaskingMode mode, int n, Rng& rng) {
  switch (mode) {
    case MaskingMode::Cosine: return visible_count(n, rng.uniform());
    case MaskingMode::Linear: return linear_visible_count(n, rng.uniform());
    case MaskingMode::Full: return 0;
  }
  return 0;
}

nn::Var batch_loss(nn::Tape& tape, const MegaModel& model, const std::vector<MaskedSequence>& masked,
                   const std::vector<const TrainingItem*>& items, bool conditioned, double weight) {
  const int n = model.config().num_parts;
  const int b = static_cast<int>(items.size());
  std::vector<const Observation*> obs(items.size(), nullptr);
  if (conditioned)
    for (int i = 0; i < b; ++i) obs[i] = &items[i]->record->observation;
  const nn::Var logits = model.forward_logits(tape, masked, obs);
  std::vector<nn::Var> terms;
  for (int i = 0; i < b; ++i)
    terms.push_back(loss_tokens(nn::slice_rows(logits, static_cast<Eigen::Index>(i) * n, n), items[i]->tokens,
                                masked[i].visible));
  if (conditioned) {
    const nn::Var rc = model.rot_cam(tape, model.conditioning(tape, obs), b);
    for (int i = 0; i < b; ++i) {
      const nn::Var row = nn::slice_rows(rc, i, 1);
      const DatasetRecord& rec = *items[i]->record;
      terms.push_back(loss_rot_cam(nn::slice_cols(row, 0, 6), nn::slice_cols(row, 6, 3), rec.params.root_rotation,
                                   items[i]->joints, rec.observation));
    }
  }
  nn::Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = nn::add(total, terms[i]);
  return nn::scale(total, weight);
}

TrainResult train_model(MegaModel& model, const std::vector<TrainingItem>& items, const TrainOptions& opt) {
  if (items.empty()) fail(ErrorKind::Config, "training set is empty");
  if (opt.conditioned)
    for (const TrainingItem& it : items)
      if (it.record == nullptr) fail(ErrorKind::Config, "conditioned training needs dataset records");
  const int n = model.config().num_parts;
  const int count = static_cast<int>(items.size());
  const int batch = std::min(opt.batch_size, count);
  const long per_epoch = (count + batch - 1) / batch;
  const long total = per_epoch * opt.epochs;
  const long warmup = std::min(total - 1, static_cast<long>(std::llround(opt.warmup_epochs * per_epoch)));
  if (opt.conditioned) {
    std::vector<const Observation*> observations;
    for (const TrainingItem& it : items) observations.push_back(&it.record->observation);
    model.fit_keypoint_normalization(observations);
  }
  nn::ParameterSet& params = model.parameters();
  for (nn::Parameter& p : params) {
    p.first_moment.setZero();
    p.second_moment.setZero();
  }
  Rng rng(opt.seed);
  std::vector<int> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), 0);
  TrainResult result;
  long step = 0;
  const int shards = std::max(1, opt.shards);
  std::vector<std::vector<nn::Matrix>> grads(static_cast<std::size_t>(shards));
  std::vector<double> shard_loss(static_cast<std::size_t>(shards));
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    for (int i = count - 1; i > 0; --i) std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i) + 1)]);
    double epoch_sum = 0.0;
    for (int start = 0; start < count; start += batch) {
      const int size = std::min(batch, count - start);
      std::vector<const TrainingItem*> batch_items;
      std::vector<MaskedSequence> masked;
      for (int j = 0; j < size; ++j) {
        const TrainingItem& it = items[order[start + j]];
        batch_items.push_back(&it);
        masked.push_back(apply_mask(it.tokens, sample_visible_count(opt.masking, n, rng), rng));
      }
      if (opt.on_batch) opt.on_batch(masked);
      const int used = std::min(shards, size);
      parallel_for(used, used, [&](int s) {
        const int lo = s * size / used, hi = (s + 1) * size / used;
        if (grads[s].empty()) grads[s] = params.make_gradients();
        for (auto& g : grads[s]) g.setZero();
        const std::vector<MaskedSequence> m(masked.begin() + lo, masked.begin() + hi);
        const std::vector<const TrainingItem*> its(batch_items.begin() + lo, batch_items.begin() + hi);
        nn::Tape tape;
        const nn::Var loss = batch_loss(tape, model, m, its, opt.conditioned, 1.0 / size);
        shard_loss[s] = loss.scalar();
        tape.backward(loss, grads[s]);
      });
      double loss = 0.0;
      params.zero_grad();
      for (int s = 0; s < used; ++s) {
        loss += shard_loss[s];
        for (int p = 0; p < params.size(); ++p) params[p].grad += grads[s][p];
      }
      if (!std::isfinite(loss)) fail(ErrorKind::Divergence, "training loss is not finite at step " + std::to_string(step + 1));
      ++step;
      const double lr = nn::cosine_lr(step, total, warmup, opt.base_lr);
      nn::adamw_step(params, lr, static_cast<int>(step), opt.adam);
      result.step_losses.push_back(loss);
      epoch_sum += loss * size;
      if (opt.log) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "epoch=%d step=%ld loss=%.6f lr=%.6g", epoch, step, loss, lr);
        opt.log(buf);
      }
    }
    result.epoch_losses.push_back(epoch_sum / count);
  }
  result.steps = step;
  return result;
}

TrainOptions train_options(const RunConfig& config, bool conditioned) {
  TrainOptions o;
  o.epochs = conditioned ? config.train_epochs : config.pretrain_epochs;
  o.batch_size = config.batch_size;
  o.base_lr = config.base_lr;
  o.warmup_epochs = config.warmup_epochs;
  o.adam = {config.beta1, config.beta2, config.weight_decay};
  // Full masking is a fine-tuning ablation; pre-training always sees visible tokens.
  o.masking = !conditioned && config.masking == MaskingMode::Full ? MaskingMode::Cosine : config.masking;
  o.conditioned = conditioned;
  o.shards = config.threads;
  o.seed = derive_seed(config.seed, conditioned ? stage::kTrain : stage::kPretrain);
  return o;
}

MaskedAccuracy masked_accuracy(const MegaModel& model, const std::vector<TrainingItem>& items, MaskingMode masking,
                               bool conditioned, int draws, std::uint64_t seed) {
  const int n = model.config().num_parts;
  Rng rng(seed);
  long correct = 0, hidden = 0;
  double ce = 0.0;
  long terms = 0;
  constexpr int kChunk = 64;
  for (int d = 0; d < draws; ++d) {
    for (std::size_t start = 0; start < items.size(); start += kChunk) {
      const std::size_t end = std::min(items.size(), start + kChunk);
      std::vector<MaskedSequence> masked;
      std::vector<const Observation*> obs;
      for (std::size_t i = start; i < end; ++i) {
        masked.push_back(apply_mask(items[i].tokens, sample_visible_count(masking, n, rng), rng));
        obs.push_back(conditioned ? &items[i].record->observation : nullptr);
      }
      nn::Tape tape(false);
      const nn::Var logits = model.forward_logits(tape, masked, obs);
      for (std::size_t i = start; i < end; ++i) {
        const Eigen::Index base = static_cast<Eigen::Index>(i - start) * n;
        const MaskedSequence& m = masked[i - start];
        ce += loss_tokens(nn::slice_rows(logits, base, n), items[i].tokens, m.visible).scalar();
        ++terms;
        for (int p = 0; p < n; ++p) {
          if (m.visible[p]) continue;
          Eigen::Index arg;
          logits.value().row(base + p).maxCoeff(&arg);
          correct += arg == items[i].tokens[p];
          ++hidden;
        }
      }
    }
  }
  return {static_cast<double>(correct) / static_cast<double>(hidden), ce / static_cast<double>(terms)};
}

double mean_rotation_error(const MegaModel& model, const std::vector<TrainingItem>& items) {
  double total = 0.0;
  for (const TrainingItem& it : items) {
    const RotCam rc = model.predict_rot_cam(it.record->observation);
    const Matrix3d r = rot6d_to_matrix(rc.rotation6d);
    const Matrix3d rel = r.transpose() * it.record->params.root_rotation;
    total += std::acos(std::clamp((rel.trace() - 1.0) / 2.0, -1.0, 1.0));
  }
  return total / static_cast<double>(items.size());
}

}  // namespace mega
