#pragma once

#include <string>
#include <vector>

#include "mega/config.hpp"
#include "mega/metrics.hpp"
#include "mega/training.hpp"

namespace mega {

/// Artifact names inside the output directory.
namespace artifact {
inline constexpr const char* kPretrainCheckpoint = "pretrain.ckpt";
inline constexpr const char* kTrainCheckpoint = "train.ckpt";
inline constexpr const char* kPretrainLog = "pretrain.log";
inline constexpr const char* kTrainLog = "train.log";
inline constexpr const char* kMetrics = "metrics.csv";
inline constexpr const char* kSummary = "summary.txt";
}  // namespace artifact

/// Resolves config paths against the output directory.
std::string resolve(const std::string& dir, const std::string& path);

void run_synth(const RunConfig& config, const std::string& out);
void run_fit_tokenizer(const RunConfig& config, const std::string& out);
TrainResult run_pretrain(const RunConfig& config, const std::string& out);
/// Starts from the pre-training checkpoint unless `pretrain = off`.
TrainResult run_train(const RunConfig& config, const std::string& out);

struct InferOptions {
  GenerationMode mode{GenerationMode::Deterministic};
  int samples{0};         // 0 = config Q
  int steps{0};           // 0 = config T
  double temperature{-1};  // < 0 = config A
  std::string input;      // empty = test set
  std::string checkpoint;  // empty = train.ckpt
  int limit{0};           // 0 = every record
};

struct InferResult {
  std::vector<std::vector<Generation>> items;
  std::vector<double> vertex_sd;  // stochastic mode only
};

InferResult run_infer(const RunConfig& config, const std::string& out, const InferOptions& options);
std::vector<Generation> run_generate(const RunConfig& config, const std::string& out, int count);

/// Per-item generation seed for evaluation and inference.
std::uint64_t item_seed(std::uint64_t seed, int item);

struct EvalOptions {
  std::string checkpoint;  // empty = train.ckpt
  std::vector<int> qs{1, 5, 10, 25};
  std::vector<int> dist_qs{1, 10, 100};
};

MetricsReport run_eval(const RunConfig& config, const std::string& out, const EvalOptions& options = {});

/// Mean vertex SD over `samples` stochastic hypotheses for one observation.
double observation_vertex_sd(const MegaModel& model, const TokenizerModel& tokenizer, const Observation& obs,
                             const GenerationConfig& config);

}  // namespace mega
