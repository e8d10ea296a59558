#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mega/model.hpp"
#include "mega/rng.hpp"
#include "mega/tokenizer.hpp"

namespace mega {

/// floor(N cos(pi tau / 2)), clamped to N - 1.
int visible_count(int n, double tau);
/// floor(N tau), clamped to N - 1.
int linear_visible_count(int n, double tau);

/// Marks a uniformly random M-subset of positions visible.
MaskedSequence apply_mask(const TokenSequence& tokens, int m, Rng& rng);

/// Cumulative committed counts n_1..n_T with n_T = N.
std::vector<int> schedule_counts(int n, int steps);

enum class GenerationMode { Deterministic, Stochastic, Unconditional };

/// Stage-2 noise scale at step t of T.
double anneal_temperature(double a, int t, int steps, GenerationMode mode);

struct Commitment {
  int position{0};
  int token{0};
  bool operator==(const Commitment&) const = default;
};

/// Switches for the two Gumbel stages; both on outside of tests.
struct NoiseControl {
  bool stage1{true};
  bool stage2{true};
};

/// Two-stage Gumbel-max commit of k of the hidden positions.
std::vector<Commitment> gumbel_step(const nn::Matrix& logits, const std::vector<int>& hidden, int k,
                                    double noise_scale, Rng& rng, NoiseControl noise = {});

struct GenerationConfig {
  int steps{5};
  double temperature{1.0};
  GenerationMode mode{GenerationMode::Stochastic};
  int samples{1};
  std::uint64_t seed{0};
  NoiseControl noise{};
  bool trace{false};  // keep per-step partial sequences

  static GenerationConfig unconditional(int samples, std::uint64_t seed);
  void validate() const;
};

struct Generation {
  TokenSequence tokens;
  CanonicalMesh mesh;
  /// With trace: after each step, committed tokens plus the current argmax elsewhere.
  std::vector<TokenSequence> partials;
  /// With trace: the step (1..T) at which each position was committed.
  std::vector<int> commit_step;
};

Generation generate_deterministic(const MegaModel& model, const TokenizerModel& tokenizer, const Observation& obs);

/// `samples` chains, chain q driven by Rng::substream(seed, q).
std::vector<Generation> generate_stochastic(const MegaModel& model, const TokenizerModel& tokenizer,
                                            const Observation* obs, const GenerationConfig& config);

std::vector<Generation> generate_unconditional(const MegaModel& model, const TokenizerModel& tokenizer,
                                               const GenerationConfig& config);

void write_tokens(const std::string& path, const std::vector<TokenSequence>& sequences);
std::vector<TokenSequence> read_tokens(const std::string& path);
void write_obj(const std::string& path, const Points3d& mesh);

}  // namespace mega
