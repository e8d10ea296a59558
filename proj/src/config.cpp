#include "mega/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "mega/error.hpp"
#include "mega/rng.hpp"

namespace mega {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const char* expected) {
  fail(ErrorKind::Config, "config: " + key + " = '" + value + "' is not " + expected);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) bad(key, value, "a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "on" || value == "true" || value == "1") return true;
  if (value == "off" || value == "false" || value == "0") return false;
  bad(key, value, "on/off");
}

MaskingMode parse_masking(const std::string& key, const std::string& value) {
  if (value == "cosine") return MaskingMode::Cosine;
  if (value == "linear") return MaskingMode::Linear;
  if (value == "full") return MaskingMode::Full;
  bad(key, value, "cosine, linear or full");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

template <typename T>
Setter number(T RunConfig::*field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) { c.*field = parse_number<T>(k, v); };
}

Setter text(std::string RunConfig::*field) {
  return [field](RunConfig& c, const std::string&, const std::string& v) { c.*field = v; };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"train_data", text(&RunConfig::train_data)},
      {"test_data", text(&RunConfig::test_data)},
      {"tokenizer", text(&RunConfig::tokenizer)},
      {"train_items", number(&RunConfig::train_items)},
      {"test_items", number(&RunConfig::test_items)},
      {"occlusion_rate", number(&RunConfig::occlusion_rate)},
      {"N", number(&RunConfig::N)},
      {"L", number(&RunConfig::L)},
      {"S", number(&RunConfig::S)},
      {"V", number(&RunConfig::V)},
      {"K", number(&RunConfig::K)},
      {"D", number(&RunConfig::D)},
      {"B_e", number(&RunConfig::B_e)},
      {"B_d", number(&RunConfig::B_d)},
      {"heads", number(&RunConfig::heads)},
      {"tokenizer_items", number(&RunConfig::tokenizer_items)},
      {"kmeans_iterations", number(&RunConfig::kmeans_iterations)},
      {"pretrain_epochs", number(&RunConfig::pretrain_epochs)},
      {"train_epochs", number(&RunConfig::train_epochs)},
      {"batch_size", number(&RunConfig::batch_size)},
      {"base_lr", number(&RunConfig::base_lr)},
      {"warmup_epochs", number(&RunConfig::warmup_epochs)},
      {"beta1", number(&RunConfig::beta1)},
      {"beta2", number(&RunConfig::beta2)},
      {"weight_decay", number(&RunConfig::weight_decay)},
      {"masking", [](RunConfig& c, const std::string& k, const std::string& v) { c.masking = parse_masking(k, v); }},
      {"pretrain", [](RunConfig& c, const std::string& k, const std::string& v) { c.pretrain = parse_bool(k, v); }},
      {"threads", number(&RunConfig::threads)},
      {"T", number(&RunConfig::T)},
      {"A", number(&RunConfig::A)},
      {"Q", number(&RunConfig::Q)},
      {"eval_items", number(&RunConfig::eval_items)},
      {"dist_items", number(&RunConfig::dist_items)},
      {"seed", number(&RunConfig::seed)},
  };
  return table;
}

std::string shortest(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::string to_string(MaskingMode m) {
  switch (m) {
    case MaskingMode::Cosine: return "cosine";
    case MaskingMode::Linear: return "linear";
    case MaskingMode::Full: return "full";
  }
  return "?";
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stage) {
  return Rng::splitmix64(seed ^ Rng::splitmix64(stage * 0x2545F4914F6CDD1DULL));
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = setters().find(key);
  if (it == setters().end()) fail(ErrorKind::Config, "config: unknown key '" + key + "'");
  it->second(*this, key, value);
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::Config, "config line " + std::to_string(lineno) + ": expected key = value");
    c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Config, "cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void RunConfig::validate() const {
  auto check = [](bool ok, const std::string& msg) {
    if (!ok) fail(ErrorKind::Config, "config: " + msg);
  };
  check(train_items >= 1 && test_items >= 1, "train_items and test_items must be positive");
  check(occlusion_rate >= 0.0 && occlusion_rate <= 1.0, "occlusion_rate must lie in [0, 1]");
  check(N >= 1 && L >= 1 && S >= 2 && V >= 1 && K >= 1, "N, L, K, V must be positive and S at least 2");
  check(V % N == 0, "V must be divisible by N");
  check(D >= 2 && B_e >= 1 && B_d >= 1 && heads >= 1, "D, B_e, B_d, heads must be positive");
  check(D % heads == 0, "D must be divisible by heads");
  check(tokenizer_items >= 0 && kmeans_iterations >= 1, "tokenizer_items >= 0 and kmeans_iterations >= 1");
  check(pretrain_epochs >= 1 && train_epochs >= 1, "epoch counts must be positive");
  check(batch_size >= 1, "batch_size must be positive");
  check(base_lr > 0.0, "base_lr must be positive");
  check(warmup_epochs >= 0.0, "warmup_epochs must be non-negative");
  check(warmup_epochs < pretrain_epochs && warmup_epochs < train_epochs, "warmup_epochs must be below each stage's epochs");
  check(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must lie in [0, 1)");
  check(weight_decay >= 0.0, "weight_decay must be non-negative");
  check(threads >= 1 && threads <= 256, "threads must lie in [1, 256]");
  check(T >= 1 && A >= 0.0 && Q >= 1, "need T >= 1, A >= 0, Q >= 1");
  check(eval_items >= 0 && dist_items >= 0, "eval_items and dist_items must be non-negative");
}

std::string RunConfig::to_string() const {
  std::ostringstream o;
  o << "train_data = " << train_data << "\ntest_data = " << test_data << "\ntokenizer = " << tokenizer
    << "\ntrain_items = " << train_items << "\ntest_items = " << test_items << "\nocclusion_rate = " << shortest(occlusion_rate)
    << "\nN = " << N << "\nL = " << L << "\nS = " << S << "\nV = " << V << "\nK = " << K << "\nD = " << D
    << "\nB_e = " << B_e << "\nB_d = " << B_d << "\nheads = " << heads << "\ntokenizer_items = " << tokenizer_items
    << "\nkmeans_iterations = " << kmeans_iterations << "\npretrain_epochs = " << pretrain_epochs
    << "\ntrain_epochs = " << train_epochs << "\nbatch_size = " << batch_size << "\nbase_lr = " << shortest(base_lr)
    << "\nwarmup_epochs = " << shortest(warmup_epochs) << "\nbeta1 = " << shortest(beta1) << "\nbeta2 = " << shortest(beta2)
    << "\nweight_decay = " << shortest(weight_decay) << "\nmasking = " << mega::to_string(masking)
    << "\npretrain = " << (pretrain ? "on" : "off") << "\nthreads = " << threads << "\nT = " << T << "\nA = " << shortest(A)
    << "\nQ = " << Q << "\neval_items = " << eval_items << "\ndist_items = " << dist_items << "\nseed = " << seed
    << '\n';
  return o.str();
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m;
  m.num_parts = N;
  m.codebook_size = S;
  m.dim = D;
  m.encoder_blocks = B_e;
  m.decoder_blocks = B_d;
  m.heads = heads;
  m.num_keypoints = K;
  return m;
}

GenerationConfig RunConfig::generation_config() const {
  GenerationConfig g;
  g.steps = T;
  g.temperature = A;
  g.samples = Q;
  g.seed = derive_seed(seed, stage::kEval);
  return g;
}

}  // namespace mega
