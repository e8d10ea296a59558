// Command-line front end for the synthetic mesh pipeline.
#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

#include "mega/error.hpp"
#include "mega/pipeline.hpp"

namespace {

enum Exit { kOk = 0, kValidation = 1, kRuntime = 2 };

struct Shared {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out{"."};
};

void add_shared(CLI::App* cmd, Shared& s) {
  cmd->add_option("--config", s.config, "key = value config file");
  cmd->add_option("--seed", s.seed, "master seed (overrides the config)");
  cmd->add_option("--out", s.out, "output directory")->capture_default_str();
}

mega::RunConfig load(const Shared& s) {
  mega::RunConfig c = s.config.empty() ? mega::RunConfig{} : mega::RunConfig::load(s.config);
  if (s.seed) c.seed = *s.seed;
  c.validate();
  return c;
}

void print_training(const char* stage, const mega::TrainResult& r) {
  for (std::size_t e = 0; e < r.epoch_losses.size(); ++e)
    std::printf("%s epoch=%zu loss=%.6f\n", stage, e, r.epoch_losses[e]);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"masked mesh generation pipeline"};
  app.require_subcommand(1);
  Shared shared;

  auto* synth = app.add_subcommand("synth", "generate train and test datasets");
  auto* fit = app.add_subcommand("fit-tokenizer", "fit the mesh tokenizer");
  auto* pretrain = app.add_subcommand("pretrain", "self-supervised pre-training");
  auto* train = app.add_subcommand("train", "conditioned training");
  auto* infer = app.add_subcommand("infer", "reconstruct meshes from observations");
  auto* generate = app.add_subcommand("generate", "unconditional samples from the pre-trained model");
  auto* eval = app.add_subcommand("eval", "evaluate the trained model on the test set");
  for (auto* cmd : {synth, fit, pretrain, train, infer, generate, eval}) add_shared(cmd, shared);

  std::string mode = "det";
  mega::InferOptions io;
  infer->add_option("--mode", mode, "det or stoch")->check(CLI::IsMember({"det", "stoch"}));
  infer->add_option("--samples", io.samples, "hypotheses per record");
  infer->add_option("--steps", io.steps, "decoding steps");
  infer->add_option("--temp", io.temperature, "noise temperature");
  infer->add_option("--input", io.input, "dataset file (default: test set)");
  infer->add_option("--checkpoint", io.checkpoint, "checkpoint (default: train.ckpt)");
  infer->add_option("--limit", io.limit, "records to process (0 = all)");
  int count = 500;
  generate->add_option("--count", count, "number of samples")->capture_default_str();
  std::string eval_ckpt;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint (default: train.ckpt)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kValidation;
  }

  try {
    const mega::RunConfig config = load(shared);
    if (synth->parsed()) {
      mega::run_synth(config, shared.out);
    } else if (fit->parsed()) {
      mega::run_fit_tokenizer(config, shared.out);
    } else if (pretrain->parsed()) {
      print_training("pretrain", mega::run_pretrain(config, shared.out));
    } else if (train->parsed()) {
      print_training("train", mega::run_train(config, shared.out));
    } else if (infer->parsed()) {
      io.mode = mode == "det" ? mega::GenerationMode::Deterministic : mega::GenerationMode::Stochastic;
      const mega::InferResult r = mega::run_infer(config, shared.out, io);
      std::printf("records=%zu\n", r.items.size());
    } else if (generate->parsed()) {
      mega::run_generate(config, shared.out, count);
      std::printf("samples=%d\n", count);
    } else if (eval->parsed()) {
      mega::EvalOptions eo;
      eo.checkpoint = eval_ckpt;
      const mega::MetricsReport r = mega::run_eval(config, shared.out, eo);
      const mega::MeshErrors m = r.mean_errors();
      std::printf("pve=%.4f mpjpe=%.4f pampjpe=%.4f improvement=%.2f%%\n", m.pve, m.mpjpe, m.pampjpe, r.improvement);
    }
  } catch (const mega::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.is_validation() ? kValidation : kRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kOk;
}
