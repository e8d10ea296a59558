#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mega/model.hpp"
#include "mega/sampler.hpp"

namespace mega {

enum class MaskingMode { Cosine, Linear, Full };

/// Every tunable of a pipeline run. Files are `key = value` lines; '#'
/// starts a comment. Relative paths resolve against the work directory.
struct RunConfig {
  std::string train_data{"train.megadata"};
  std::string test_data{"test.megadata"};
  std::string tokenizer{"tokenizer.mtok"};

  int train_items{10000};
  int test_items{512};
  double occlusion_rate{0.3};

  int N{24};
  int L{6};
  int S{64};
  int V{216};
  int K{12};
  int D{64};
  int B_e{4};
  int B_d{2};
  int heads{4};
  int tokenizer_items{0};  // 0 = whole training set
  int kmeans_iterations{100};

  int pretrain_epochs{10};
  int train_epochs{20};
  int batch_size{64};
  double base_lr{1e-3};
  double warmup_epochs{1};
  double beta1{0.9};
  double beta2{0.99};
  double weight_decay{0.05};
  MaskingMode masking{MaskingMode::Cosine};
  bool pretrain{true};
  int threads{4};  // fixed gradient shards per batch

  int T{5};
  double A{1.0};
  int Q{25};
  int eval_items{0};   // 0 = whole test set
  int dist_items{64};  // items for the mean-mesh analysis
  std::uint64_t seed{0};

  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::string& path);
  /// Applies one `key = value` assignment; unknown keys are errors.
  void set(const std::string& key, const std::string& value);
  void validate() const;
  std::string to_string() const;

  ModelConfig model_config() const;
  GenerationConfig generation_config() const;
};

std::string to_string(MaskingMode m);

/// Independent seed for a named pipeline stage.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stage);

namespace stage {
inline constexpr std::uint64_t kTrainData = 1, kTestData = 2, kTokenizer = 3, kInit = 4, kPretrain = 5, kTrain = 6,
                               kEval = 7, kGenerate = 8, kInfer = 9;
}

}  // namespace mega
