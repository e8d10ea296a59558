#include "mega/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "mega/error.hpp"

namespace mega {
namespace {

// cos() is not exact at rational multiples of pi; treat values within
// rounding distance of an integer as that integer before flooring.
int snapped_floor(double x, int n) {
  const double r = std::round(x);
  if (std::abs(x - r) < 1e-12 * std::max(1, n)) return static_cast<int>(r);
  return static_cast<int>(std::floor(x));
}

void check_tau(double tau) {
  if (!(tau >= 0.0 && tau < 1.0)) fail(ErrorKind::Domain, "mask ratio tau must lie in [0, 1)");
}

}  // namespace

int visible_count(int n, double tau) {
  check_tau(tau);
  const int m = snapped_floor(n * std::cos(std::numbers::pi * tau / 2.0), n);
  return std::clamp(m, 0, n - 1);
}

int linear_visible_count(int n, double tau) {
  check_tau(tau);
  return std::clamp(snapped_floor(n * tau, n), 0, n - 1);
}

MaskedSequence apply_mask(const TokenSequence& tokens, int m, Rng& rng) {
  const int n = tokens.size();
  if (m < 0 || m >= n) fail(ErrorKind::Domain, "visible count must satisfy 0 <= M < N");
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[i] = i;
  for (int i = 0; i < m; ++i) std::swap(order[i], order[i + static_cast<int>(rng.below(n - i))]);
  MaskedSequence out{tokens.indices, std::vector<bool>(static_cast<std::size_t>(n), false)};
  for (int i = 0; i < m; ++i) out.visible[order[i]] = true;
  return out;
}

std::vector<int> schedule_counts(int n, int steps) {
  if (steps < 1) fail(ErrorKind::Schedule, "step count must be at least 1");
  if (n < 1) fail(ErrorKind::Schedule, "sequence length must be at least 1");
  std::vector<int> counts(static_cast<std::size_t>(steps));
  int prev = 0;
  for (int t = 1; t <= steps; ++t) {
    const double x = n * (1.0 - std::cos(std::numbers::pi * t / (2.0 * steps)));
    prev = std::max(prev, std::clamp(snapped_floor(x, n), 0, n));
    counts[t - 1] = prev;
  }
  counts.back() = n;
  return counts;
}

double anneal_temperature(double a, int t, int steps, GenerationMode mode) {
  if (steps < 1 || t < 1 || t > steps) fail(ErrorKind::Schedule, "annealing step must satisfy 1 <= t <= T");
  const double base = a * (1.0 - static_cast<double>(t) / steps);
  return mode == GenerationMode::Unconditional ? std::pow(base, 6) : base;
}

std::vector<Commitment> gumbel_step(const nn::Matrix& logits, const std::vector<int>& hidden, int k,
                                    double noise_scale, Rng& rng, NoiseControl noise) {
  if (k < 0 || k > static_cast<int>(hidden.size()))
    fail(ErrorKind::Schedule, "cannot commit more tokens than there are hidden positions");
  struct Candidate {
    int position;
    int token;
    double score;
  };
  std::vector<Candidate> cands;
  cands.reserve(hidden.size());
  for (int p : hidden) {
    int best = 0;
    double best_val = -INFINITY;
    for (Eigen::Index s = 0; s < logits.cols(); ++s) {
      const double v = logits(p, s) + (noise.stage1 ? rng.gumbel() : 0.0);
      if (v > best_val) {
        best_val = v;
        best = static_cast<int>(s);
      }
    }
    cands.push_back({p, best, logits(p, best)});
  }
  for (Candidate& c : cands) c.score += noise.stage2 ? noise_scale * rng.gumbel() : 0.0;
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.position < b.position;
  });
  std::vector<Commitment> out;
  for (int i = 0; i < k; ++i) out.push_back({cands[i].position, cands[i].token});
  return out;
}

GenerationConfig GenerationConfig::unconditional(int samples, std::uint64_t seed) {
  GenerationConfig c;
  c.steps = 20;
  c.temperature = 1.2;
  c.mode = GenerationMode::Unconditional;
  c.samples = samples;
  c.seed = seed;
  return c;
}

void GenerationConfig::validate() const {
  if (steps < 1) fail(ErrorKind::Config, "generation: T must be at least 1");
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) fail(ErrorKind::Config, "generation: A must be >= 0");
  if (samples < 1) fail(ErrorKind::Config, "generation: Q must be at least 1");
}

namespace {

int argmax_row(const nn::Matrix& m, Eigen::Index row) {
  int best = 0;
  for (Eigen::Index s = 1; s < m.cols(); ++s)
    if (m(row, s) > m(row, best)) best = static_cast<int>(s);
  return best;
}

}  // namespace

Generation generate_deterministic(const MegaModel& model, const TokenizerModel& tokenizer, const Observation& obs) {
  const int n = model.config().num_parts;
  const nn::Matrix logits = model.forward_logits(MaskedSequence::fully_masked(n), &obs);
  Generation g;
  g.tokens.indices.resize(static_cast<std::size_t>(n));
  for (int p = 0; p < n; ++p) g.tokens[p] = argmax_row(logits, p);
  g.mesh = decode_tokens(tokenizer, g.tokens);
  return g;
}

std::vector<Generation> generate_stochastic(const MegaModel& model, const TokenizerModel& tokenizer,
                                            const Observation* obs, const GenerationConfig& config) {
  config.validate();
  const int n = model.config().num_parts;
  const int q = config.samples;
  const std::vector<int> counts = schedule_counts(n, config.steps);
  std::vector<MaskedSequence> state(static_cast<std::size_t>(q), MaskedSequence::fully_masked(n));
  std::vector<Rng> rngs;
  for (int c = 0; c < q; ++c) rngs.push_back(Rng::substream(config.seed, static_cast<std::uint64_t>(c)));
  std::vector<Generation> out(static_cast<std::size_t>(q));
  if (config.trace)
    for (Generation& g : out) g.commit_step.assign(static_cast<std::size_t>(n), 0);
  const std::vector<const Observation*> observations(static_cast<std::size_t>(q), obs);
  int prev = 0;
  for (int t = 1; t <= config.steps; ++t) {
    const int k = counts[t - 1] - prev;
    prev = counts[t - 1];
    if (k == 0 && !config.trace) continue;
    nn::Tape tape(false);
    const nn::Matrix logits = model.forward_logits(tape, state, observations).value();
    const double scale = anneal_temperature(config.temperature, t, config.steps, config.mode);
    for (int c = 0; c < q; ++c) {
      MaskedSequence& s = state[c];
      const nn::Matrix item = logits.middleRows(static_cast<Eigen::Index>(c) * n, n);
      std::vector<int> hidden;
      for (int p = 0; p < n; ++p)
        if (!s.visible[p]) hidden.push_back(p);
      for (const Commitment& cm : gumbel_step(item, hidden, k, scale, rngs[c], config.noise)) {
        s.indices[cm.position] = cm.token;
        s.visible[cm.position] = true;
        if (config.trace) out[c].commit_step[cm.position] = t;
      }
      if (config.trace) {
        TokenSequence partial{s.indices};
        for (int p = 0; p < n; ++p)
          if (!s.visible[p]) partial[p] = argmax_row(item, p);
        out[c].partials.push_back(std::move(partial));
      }
    }
  }
  for (int c = 0; c < q; ++c) {
    out[c].tokens.indices = state[c].indices;
    out[c].mesh = decode_tokens(tokenizer, out[c].tokens);
  }
  return out;
}

std::vector<Generation> generate_unconditional(const MegaModel& model, const TokenizerModel& tokenizer,
                                               const GenerationConfig& config) {
  GenerationConfig c = config;
  c.mode = GenerationMode::Unconditional;
  return generate_stochastic(model, tokenizer, nullptr, c);
}

void write_tokens(const std::string& path, const std::vector<TokenSequence>& sequences) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot open " + path + " for writing");
  for (const TokenSequence& s : sequences) {
    for (int i = 0; i < s.size(); ++i) out << (i ? " " : "") << s[i];
    out << '\n';
  }
  if (!out) fail(ErrorKind::Io, "failed writing " + path);
}

std::vector<TokenSequence> read_tokens(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open " + path);
  std::vector<TokenSequence> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    TokenSequence s;
    int v;
    while (ls >> v) s.indices.push_back(v);
    if (!ls.eof()) fail(ErrorKind::Validation, path + ": malformed token line");
    out.push_back(std::move(s));
  }
  return out;
}

void write_obj(const std::string& path, const Points3d& mesh) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot open " + path + " for writing");
  char buf[96];
  for (Eigen::Index i = 0; i < mesh.rows(); ++i) {
    std::snprintf(buf, sizeof buf, "v %.9g %.9g %.9g\n", mesh(i, 0), mesh(i, 1), mesh(i, 2));
    out << buf;
  }
  if (!out) fail(ErrorKind::Io, "failed writing " + path);
}

}  // namespace mega
