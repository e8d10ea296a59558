#include "mega/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mega/error.hpp"
#include "mega/parallel.hpp"

namespace mega {

namespace fs = std::filesystem;

namespace {

void require_file(const std::string& path) {
  if (!fs::is_regular_file(path)) fail(ErrorKind::Io, "missing input file " + path);
}

void prepare_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create directory " + dir + ": " + ec.message());
}

std::vector<DatasetRecord> load_records(const std::string& path, const BodyTemplate& tmpl, const RunConfig& config) {
  require_file(path);
  std::vector<DatasetRecord> records = read_dataset(path, tmpl);
  if (records.empty()) fail(ErrorKind::Validation, path + ": dataset is empty");
  if (records.front().observation.size() != config.K)
    fail(ErrorKind::Validation, path + ": dataset has " + std::to_string(records.front().observation.size()) +
                                    " keypoints, config K=" + std::to_string(config.K));
  return records;
}

TokenizerModel load_checked_tokenizer(const std::string& path, const RunConfig& config) {
  require_file(path);
  TokenizerModel tok = load_tokenizer(path);
  auto check = [&](const char* field, int stored, int expected) {
    if (stored != expected)
      fail(ErrorKind::Validation, path + ": tokenizer " + field + "=" + std::to_string(stored) +
                                      " does not match config " + field + "=" + std::to_string(expected));
  };
  check("N", tok.num_parts, config.N);
  check("L", tok.latent_dim, config.L);
  check("S", tok.codebook_size, config.S);
  check("V", tok.num_vertices, config.V);
  return tok;
}

MegaModel load_model(const std::string& path, const RunConfig& config) {
  require_file(path);
  return load_checkpoint(path, config.model_config());
}

void check_template(const BodyTemplate& tmpl, const RunConfig& config) {
  if (tmpl.num_vertices() != config.V)
    fail(ErrorKind::Validation, "config V=" + std::to_string(config.V) + " but the body template has " +
                                    std::to_string(tmpl.num_vertices()) + " vertices");
  if (tmpl.num_keypoints() != config.K)
    fail(ErrorKind::Validation, "config K=" + std::to_string(config.K) + " but the body template has " +
                                    std::to_string(tmpl.num_keypoints()) + " keypoints");
}

class LineLog {
 public:
  explicit LineLog(const std::string& path) : out_(path) {
    if (!out_) fail(ErrorKind::Io, "cannot open " + path + " for writing");
  }
  void operator()(const std::string& line) { out_ << line << '\n'; }

 private:
  std::ofstream out_;
};

TrainResult train_stage(const RunConfig& config, const std::string& out, bool conditioned) {
  config.validate();
  const BodyTemplate tmpl;
  check_template(tmpl, config);
  const std::vector<DatasetRecord> records = load_records(resolve(out, config.train_data), tmpl, config);
  const TokenizerModel tok = load_checked_tokenizer(resolve(out, config.tokenizer), config);
  MegaModel model = conditioned && config.pretrain
                        ? load_model(resolve(out, artifact::kPretrainCheckpoint), config)
                        : MegaModel(config.model_config(), derive_seed(config.seed, stage::kInit));
  const std::vector<TrainingItem> items = make_training_items(records, tok, tmpl);

  LineLog log(resolve(out, conditioned ? artifact::kTrainLog : artifact::kPretrainLog));
  TrainOptions options = train_options(config, conditioned);
  options.log = [&](const std::string& line) { log(line); };
  const TrainResult result = train_model(model, items, options);
  save_checkpoint(resolve(out, conditioned ? artifact::kTrainCheckpoint : artifact::kPretrainCheckpoint), model);
  return result;
}

std::vector<int> eval_qs(const std::vector<int>& qs, int q_max) {
  std::vector<int> out;
  for (int q : qs)
    if (q >= 1 && q <= q_max && (out.empty() || q > out.back())) out.push_back(q);
  if (out.empty() || out.back() != q_max) out.push_back(q_max);
  return out;
}

}  // namespace

std::string resolve(const std::string& dir, const std::string& path) {
  const fs::path p(path);
  if (p.is_absolute() || dir.empty()) return p.string();
  return (fs::path(dir) / p).string();
}

std::uint64_t item_seed(std::uint64_t seed, int item) { return Rng::splitmix64(seed ^ Rng::splitmix64(item)); }

void run_synth(const RunConfig& config, const std::string& out) {
  config.validate();
  const BodyTemplate tmpl;
  check_template(tmpl, config);
  prepare_dir(out);
  write_dataset(resolve(out, config.train_data),
                make_dataset(config.train_items, config.occlusion_rate, derive_seed(config.seed, stage::kTrainData), tmpl),
                tmpl);
  write_dataset(resolve(out, config.test_data),
                make_dataset(config.test_items, config.occlusion_rate, derive_seed(config.seed, stage::kTestData), tmpl),
                tmpl);
}

void run_fit_tokenizer(const RunConfig& config, const std::string& out) {
  config.validate();
  const BodyTemplate tmpl;
  check_template(tmpl, config);
  const std::vector<DatasetRecord> records = load_records(resolve(out, config.train_data), tmpl, config);
  const std::size_t used =
      config.tokenizer_items > 0 ? std::min<std::size_t>(records.size(), config.tokenizer_items) : records.size();
  std::vector<CanonicalMesh> meshes;
  meshes.reserve(used);
  for (std::size_t i = 0; i < used; ++i) meshes.push_back(records[i].canonical);
  const TokenizerModel tok = fit_tokenizer(meshes, config.N, config.L, config.S,
                                           derive_seed(config.seed, stage::kTokenizer), config.kmeans_iterations);
  save_tokenizer(resolve(out, config.tokenizer), tok);
}

TrainResult run_pretrain(const RunConfig& config, const std::string& out) { return train_stage(config, out, false); }

TrainResult run_train(const RunConfig& config, const std::string& out) { return train_stage(config, out, true); }

double observation_vertex_sd(const MegaModel& model, const TokenizerModel& tokenizer, const Observation& obs,
                             const GenerationConfig& config) {
  std::vector<Points3d> meshes;
  for (Generation& g : generate_stochastic(model, tokenizer, &obs, config)) meshes.push_back(std::move(g.mesh));
  return vertex_sd(meshes).mean;
}

InferResult run_infer(const RunConfig& config, const std::string& out, const InferOptions& options) {
  config.validate();
  const BodyTemplate tmpl;
  check_template(tmpl, config);
  GenerationConfig gen = config.generation_config();
  gen.seed = derive_seed(config.seed, stage::kInfer);
  if (options.samples > 0) gen.samples = options.samples;
  if (options.steps > 0) gen.steps = options.steps;
  if (options.temperature >= 0) gen.temperature = options.temperature;
  if (options.limit < 0) fail(ErrorKind::Config, "limit must be non-negative");
  gen.validate();
  const std::vector<DatasetRecord> records =
      load_records(resolve(out, options.input.empty() ? config.test_data : options.input), tmpl, config);
  const TokenizerModel tok = load_checked_tokenizer(resolve(out, config.tokenizer), config);
  const MegaModel model =
      load_model(resolve(out, options.checkpoint.empty() ? artifact::kTrainCheckpoint : options.checkpoint), config);
  const int count = options.limit > 0 ? std::min<int>(options.limit, records.size()) : static_cast<int>(records.size());
  const bool stochastic = options.mode != GenerationMode::Deterministic;

  InferResult result;
  result.items.resize(count);
  if (stochastic) result.vertex_sd.resize(count);
  parallel_for(count, config.threads, [&](int i) {
    const Observation& obs = records[i].observation;
    if (!stochastic) {
      result.items[i].push_back(generate_deterministic(model, tok, obs));
      return;
    }
    GenerationConfig g = gen;
    g.seed = item_seed(gen.seed, i);
    result.items[i] = generate_stochastic(model, tok, &obs, g);
    std::vector<Points3d> meshes;
    for (const Generation& s : result.items[i]) meshes.push_back(s.mesh);
    if (meshes.size() > 1) result.vertex_sd[i] = vertex_sd(meshes).mean * kMetricScale / body_height(tmpl);
  });

  const std::string mesh_dir = resolve(out, "meshes");
  prepare_dir(mesh_dir);
  std::vector<TokenSequence> tokens;
  char name[64];
  for (int i = 0; i < count; ++i) {
    for (std::size_t q = 0; q < result.items[i].size(); ++q) {
      tokens.push_back(result.items[i][q].tokens);
      if (stochastic)
        std::snprintf(name, sizeof name, "item%04d_s%03zu.obj", i, q);
      else
        std::snprintf(name, sizeof name, "item%04d.obj", i);
      write_obj(resolve(mesh_dir, name), result.items[i][q].mesh);
    }
  }
  write_tokens(resolve(out, "tokens.txt"), tokens);
  if (stochastic) {
    std::ofstream sd(resolve(out, "vertex_sd.txt"));
    if (!sd) fail(ErrorKind::Io, "cannot write vertex_sd.txt");
    double mean = 0.0;
    for (int i = 0; i < count; ++i) {
      std::snprintf(name, sizeof name, "%d %.6f\n", i, result.vertex_sd[i]);
      sd << name;
      mean += result.vertex_sd[i];
    }
    std::snprintf(name, sizeof name, "mean %.6f\n", mean / count);
    sd << name;
  }
  return result;
}

std::vector<Generation> run_generate(const RunConfig& config, const std::string& out, int count) {
  config.validate();
  if (count < 1) fail(ErrorKind::Config, "count must be at least 1");
  const TokenizerModel tok = load_checked_tokenizer(resolve(out, config.tokenizer), config);
  const MegaModel model = load_model(resolve(out, artifact::kPretrainCheckpoint), config);
  const GenerationConfig gen = GenerationConfig::unconditional(count, derive_seed(config.seed, stage::kGenerate));
  std::vector<Generation> samples = generate_unconditional(model, tok, gen);

  const std::string dir = resolve(out, "generated");
  prepare_dir(dir);
  std::vector<TokenSequence> tokens;
  char name[64];
  for (int i = 0; i < count; ++i) {
    std::snprintf(name, sizeof name, "sample%04d.obj", i);
    write_obj(resolve(dir, name), samples[i].mesh);
    tokens.push_back(samples[i].tokens);
  }
  write_tokens(resolve(out, "generated_tokens.txt"), tokens);
  return samples;
}

MetricsReport run_eval(const RunConfig& config, const std::string& out, const EvalOptions& options) {
  config.validate();
  const BodyTemplate tmpl;
  check_template(tmpl, config);
  const std::vector<DatasetRecord> records = load_records(resolve(out, config.test_data), tmpl, config);
  const TokenizerModel tok = load_checked_tokenizer(resolve(out, config.tokenizer), config);
  const MegaModel model =
      load_model(resolve(out, options.checkpoint.empty() ? artifact::kTrainCheckpoint : options.checkpoint), config);
  const GenerationConfig gen = config.generation_config();

  const int count =
      config.eval_items > 0 ? std::min<int>(config.eval_items, records.size()) : static_cast<int>(records.size());
  const int dist_count = std::min(config.dist_items, count);
  MetricsReport report;
  report.qs = eval_qs(options.qs, config.Q);
  report.dist_qs = options.dist_qs;
  const int dist_max = report.dist_qs.empty() ? 0 : *std::max_element(report.dist_qs.begin(), report.dist_qs.end());
  const double unit = kMetricScale / body_height(tmpl);

  report.items.resize(count);
  std::vector<std::vector<double>> errors(count);
  std::vector<double> sd(count);
  std::vector<std::vector<double>> dist(dist_count, std::vector<double>(report.dist_qs.size()));
  parallel_for(count, config.threads, [&](int i) {
    const DatasetRecord& rec = records[i];
    const Generation det = generate_deterministic(model, tok, rec.observation);
    report.items[i].item = i;
    report.items[i].errors = mesh_errors(det.mesh, rec.canonical, tmpl);

    GenerationConfig g = gen;
    g.seed = item_seed(gen.seed, i);
    g.samples = i < dist_count ? std::max(config.Q, dist_max) : config.Q;
    const std::vector<Generation> samples = generate_stochastic(model, tok, &rec.observation, g);
    std::vector<Points3d> meshes;
    for (int q = 0; q < config.Q; ++q) {
      errors[i].push_back(mesh_errors(samples[q].mesh, rec.canonical, tmpl).pve);
      meshes.push_back(samples[q].mesh);
    }
    if (meshes.size() > 1) sd[i] = vertex_sd(meshes).mean * unit;
    if (i < dist_count) {
      std::vector<Points3d> all;
      for (const Generation& s : samples) all.push_back(s.mesh);
      for (std::size_t k = 0; k < report.dist_qs.size(); ++k) {
        const std::vector<Points3d> head(all.begin(), all.begin() + report.dist_qs[k]);
        dist[i][k] = mesh_distance(mean_mesh(head), det.mesh) * unit;
      }
    }
  });

  const BestOfQ best = best_of_q(errors, report.qs);
  for (int i = 0; i < count; ++i) report.items[i].best = best.per_item[i];
  report.improvement = best.improvement;
  report.dist_to_det.assign(report.dist_qs.size(), 0.0);
  for (int i = 0; i < dist_count; ++i)
    for (std::size_t k = 0; k < report.dist_qs.size(); ++k) report.dist_to_det[k] += dist[i][k] / dist_count;
  for (double s : sd) report.mean_vertex_sd += s / count;

  write_metrics_csv(resolve(out, artifact::kMetrics), report);
  std::ofstream summary(resolve(out, artifact::kSummary));
  if (!summary) fail(ErrorKind::Io, "cannot write " + resolve(out, artifact::kSummary));
  char line[128];
  const MeshErrors mean = report.mean_errors();
  std::snprintf(line, sizeof line, "items = %d\npve = %.4f\nmpjpe = %.4f\npampjpe = %.4f\n", count, mean.pve,
                mean.mpjpe, mean.pampjpe);
  summary << line;
  const std::vector<double> mean_best = report.mean_best();
  for (std::size_t k = 0; k < report.qs.size(); ++k) {
    std::snprintf(line, sizeof line, "best_of_%d = %.4f\n", report.qs[k], mean_best[k]);
    summary << line;
  }
  std::snprintf(line, sizeof line, "improvement_pct = %.4f\n", report.improvement);
  summary << line;
  for (std::size_t k = 0; k < report.dist_qs.size(); ++k) {
    std::snprintf(line, sizeof line, "dist_to_det_%d = %.4f\n", report.dist_qs[k], report.dist_to_det[k]);
    summary << line;
  }
  std::snprintf(line, sizeof line, "dist_items = %d\nmean_vertex_sd = %.4f\n", dist_count, report.mean_vertex_sd);
  summary << line;
  return report;
}

}  // namespace mega
