#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <fstream>

#include "mega/error.hpp"
#include "mega/metrics.hpp"
#include "mega/sampler.hpp"
#include "oracles.hpp"

using namespace mega;
namespace {

using oracle::schedule_count;

struct Small {
  BodyTemplate tmpl;
  std::vector<DatasetRecord> records;
  TokenizerModel tok;
  MegaModel model;

  static ModelConfig config() {
    ModelConfig c;
    c.codebook_size = 16;
    c.dim = 16;
    c.heads = 2;
    c.encoder_blocks = 1;
    c.decoder_blocks = 1;
    return c;
  }

  Small() : records(make_dataset(300, 0.3, 31, tmpl)), model(config(), 4) {
    std::vector<CanonicalMesh> meshes;
    for (const auto& r : records) meshes.push_back(r.canonical);
    tok = fit_tokenizer(meshes, 24, 6, 16, 1);
  }
};

const Small& small() {
  static const Small s;
  return s;
}

}  // namespace

TEST_CASE("visible count") {
  CHECK(visible_count(54, std::nextafter(1.0, 0.0)) == 0);
  CHECK(visible_count(54, 0.5) == 38);
  CHECK(oracle::visible_count(54, 0.5) == 38);
  CHECK(visible_count(54, 0.0) == 53);
  for (double bad : {1.0, -0.1, 2.0, std::nan("")}) {
    try {
      visible_count(54, bad);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Domain);
    }
  }
}

TEST_CASE("visible count matches the high-precision formula and is monotone") {
  int mismatches = 0, increases = 0;
  int prev = visible_count(54, 0.0);
  for (int i = 0; i < 10000; ++i) {
    const double tau = i / 10000.0;
    const int m = visible_count(54, tau);
    mismatches += m != oracle::visible_count(54, tau);
    increases += m > prev;
    prev = m;
  }
  CHECK(mismatches == 0);
  CHECK(increases == 0);
}

TEST_CASE("linear visible count") {
  CHECK(linear_visible_count(54, 0.5) == 27);
  CHECK(linear_visible_count(54, std::nextafter(1.0, 0.0)) == 53);
  CHECK(linear_visible_count(54, 0.0) == 0);
  CHECK_THROWS_AS(linear_visible_count(54, 1.0), Error);
  // floor(54 tau) is uniform on {0..53}, so the exact mean is 26.5
  Rng rng(1);
  double sum = 0;
  for (int i = 0; i < 100000; ++i) sum += linear_visible_count(54, rng.uniform());
  CHECK(std::abs(sum / 100000 - 26.5) < 0.25);
}

TEST_CASE("apply mask") {
  TokenSequence t;
  for (int i = 0; i < 24; ++i) t.indices.push_back(i * 3 % 64);
  Rng rng(2);
  const MaskedSequence none = apply_mask(t, 0, rng);
  CHECK(none.num_visible() == 0);
  CHECK(none.indices == t.indices);

  Rng a(5), b(5);
  CHECK(apply_mask(t, 7, a).visible == apply_mask(t, 7, b).visible);

  std::vector<int> freq(24, 0);
  for (int i = 0; i < 100000; ++i) {
    const MaskedSequence m = apply_mask(t, 12, rng);
    REQUIRE(m.num_visible() == 12);
    for (int p = 0; p < 24; ++p) freq[p] += m.visible[p];
  }
  for (int p = 0; p < 24; ++p) CHECK(std::abs(freq[p] / 100000.0 - 0.5) < 0.01);
  CHECK_THROWS_AS(apply_mask(t, 24, rng), Error);
  CHECK_THROWS_AS(apply_mask(t, -1, rng), Error);
}

TEST_CASE("decoding schedule") {
  CHECK(schedule_counts(54, 5) == std::vector<int>{2, 10, 22, 37, 54});
  CHECK(schedule_counts(7, 1) == std::vector<int>{7});
  for (int t = 1; t <= 4; ++t) CHECK(schedule_counts(24, 4)[t - 1] == (t == 4 ? 24 : schedule_count(24, t, 4)));
  bool ok = true;
  for (int n = 1; n <= 512 && ok; ++n)
    for (int steps = 1; steps <= 64; ++steps) {
      const auto c = schedule_counts(n, steps);
      ok = ok && c.back() == n && c.front() >= 0;
      for (std::size_t i = 1; i < c.size(); ++i) ok = ok && c[i] >= c[i - 1];
    }
  CHECK(ok);
  CHECK_THROWS_AS(schedule_counts(24, 0), Error);
}

TEST_CASE("noise annealing") {
  CHECK(anneal_temperature(1.0, 5, 5, GenerationMode::Stochastic) == 0.0);
  CHECK(anneal_temperature(1.2, 20, 20, GenerationMode::Unconditional) == 0.0);
  CHECK(anneal_temperature(1.0, 1, 5, GenerationMode::Stochastic) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(anneal_temperature(1.2, 10, 20, GenerationMode::Unconditional) == doctest::Approx(0.046656).epsilon(1e-12));
  CHECK_THROWS_AS(anneal_temperature(1.0, 0, 5, GenerationMode::Stochastic), Error);
  CHECK_THROWS_AS(anneal_temperature(1.0, 6, 5, GenerationMode::Stochastic), Error);
}

TEST_CASE("gumbel step") {
  Rng rng(3);
  SUBCASE("noise-free commits the most confident positions") {
    nn::Matrix logits(5, 3);
    logits << 0, 1, 0,   //
        5, 0, 0,         //
        0, 0, 2,         //
        0, 5, 0,         //
        1, 0, 0;
    const auto c = gumbel_step(logits, {0, 1, 2, 3, 4}, 3, 0.0, rng, {false, false});
    REQUIRE(c.size() == 3);
    CHECK(c[0] == Commitment{1, 0});
    CHECK(c[1] == Commitment{3, 1});
    CHECK(c[2] == Commitment{2, 2});
    const auto tie = gumbel_step(logits, {0, 4}, 1, 0.0, rng, {false, false});
    CHECK(tie[0] == Commitment{0, 1});
  }
  SUBCASE("committing every hidden position") {
    nn::Matrix logits = nn::Matrix::Random(6, 4);
    const auto c = gumbel_step(logits, {1, 2, 4}, 3, 1.0, rng);
    std::set<int> pos;
    for (const auto& x : c) pos.insert(x.position);
    CHECK(pos == std::set<int>{1, 2, 4});
    try {
      gumbel_step(logits, {1, 2}, 3, 1.0, rng);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Schedule);
    }
  }
  SUBCASE("stage one samples the softmax") {
    nn::Matrix logits(3, 2);
    logits << 0.3, -0.2, 1.5, 0.0, -1.0, 0.7;
    std::vector<int> count(3, 0);
    const int draws = 100000;
    for (int i = 0; i < draws; ++i)
      for (const auto& c : gumbel_step(logits, {0, 1, 2}, 3, 0.0, rng)) count[c.position] += c.token == 0;
    for (int p = 0; p < 3; ++p) {
      const double prob = 1.0 / (1.0 + std::exp(logits(p, 1) - logits(p, 0)));
      CHECK(std::abs(count[p] / static_cast<double>(draws) - prob) < 0.01);
    }
  }
}

TEST_CASE("generation config") {
  GenerationConfig c;
  CHECK(c.steps == 5);
  CHECK(c.temperature == 1.0);
  const GenerationConfig u = GenerationConfig::unconditional(10, 3);
  CHECK(u.steps == 20);
  CHECK(u.temperature == 1.2);
  CHECK(u.mode == GenerationMode::Unconditional);
  c.steps = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c.steps = 5;
  c.samples = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c.samples = 1;
  c.temperature = -1;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("deterministic and stochastic generation") {
  const Small& s = small();
  const Observation& obs = s.records[0].observation;

  const Generation d1 = generate_deterministic(s.model, s.tok, obs);
  const Generation d2 = generate_deterministic(s.model, s.tok, obs);
  CHECK(d1.tokens == d2.tokens);
  CHECK(d1.mesh == d2.mesh);

  GenerationConfig limit;
  limit.steps = 1;
  limit.noise = {false, false};
  limit.seed = 99;
  const auto lim = generate_stochastic(s.model, s.tok, &obs, limit);
  CHECK(lim[0].tokens == d1.tokens);
  CHECK(lim[0].mesh == d1.mesh);

  GenerationConfig g;
  g.samples = 6;
  g.seed = 17;
  g.trace = true;
  const auto a = generate_stochastic(s.model, s.tok, &obs, g);
  const auto b = generate_stochastic(s.model, s.tok, &obs, g);
  REQUIRE(a.size() == 6);
  for (int q = 0; q < 6; ++q) {
    CHECK(a[q].tokens == b[q].tokens);
    CHECK(a[q].mesh == b[q].mesh);
    REQUIRE(a[q].partials.size() == 5);
    CHECK(a[q].partials.back() == a[q].tokens);
    for (int p = 0; p < 24; ++p) {
      CHECK(a[q].tokens[p] >= 0);
      CHECK(a[q].tokens[p] < 16);
    }
  }
  g.seed = 18;
  const auto c = generate_stochastic(s.model, s.tok, &obs, g);
  int differing = 0;
  for (int q = 0; q < 6; ++q) differing += !(c[q].tokens == a[q].tokens);
  CHECK(differing > 0);
}

TEST_CASE("each position is committed exactly once") {
  const Small& s = small();
  GenerationConfig g;
  g.samples = 4;
  g.seed = 5;
  g.steps = 8;
  g.trace = true;
  const std::vector<int> counts = schedule_counts(24, 8);
  for (const Generation& gen : generate_stochastic(s.model, s.tok, &s.records[1].observation, g)) {
    REQUIRE(gen.commit_step.size() == 24);
    REQUIRE(gen.partials.size() == 8);
    std::vector<int> per_step(9, 0);
    for (int p = 0; p < 24; ++p) {
      REQUIRE(gen.commit_step[p] >= 1);
      REQUIRE(gen.commit_step[p] <= 8);
      ++per_step[gen.commit_step[p]];
      for (int t = gen.commit_step[p]; t <= 8; ++t) CHECK(gen.partials[t - 1][p] == gen.tokens[p]);
    }
    for (int t = 1; t <= 8; ++t) CHECK(per_step[t] == counts[t - 1] - (t > 1 ? counts[t - 2] : 0));
  }
}

TEST_CASE("deterministic mode is faster than five-step sampling") {
  const Small& s = small();
  const Observation& obs = s.records[2].observation;
  using clock = std::chrono::steady_clock;
  auto time = [](auto&& fn) {
    double best = 1e9;
    for (int r = 0; r < 5; ++r) {
      const auto t0 = clock::now();
      fn();
      best = std::min(best, std::chrono::duration<double>(clock::now() - t0).count());
    }
    return best;
  };
  GenerationConfig g;
  g.seed = 1;
  const double det = time([&] { generate_deterministic(s.model, s.tok, obs); });
  const double sto = time([&] { generate_stochastic(s.model, s.tok, &obs, g); });
  CHECK(det < sto);
}

TEST_CASE("unconditional generation") {
  const Small& s = small();
  const auto gens = generate_unconditional(s.model, s.tok, GenerationConfig::unconditional(8, 3));
  REQUIRE(gens.size() == 8);
  std::vector<Points3d> joints;
  for (const auto& g : gens) joints.push_back(joints_from_mesh(g.mesh, s.tmpl));
  CHECK(apd(joints) > 0);
}

TEST_CASE("token and mesh files") {
  const auto dir = std::filesystem::temp_directory_path() / "mega_test_sampler";
  std::filesystem::create_directories(dir);
  std::vector<TokenSequence> seqs(3);
  for (int i = 0; i < 3; ++i)
    for (int p = 0; p < 24; ++p) seqs[i].indices.push_back((i * 7 + p) % 64);
  const std::string path = (dir / "tokens.txt").string();
  write_tokens(path, seqs);
  CHECK(read_tokens(path) == seqs);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line.rfind("0 1 2 3 ", 0) == 0);

  Points3d mesh(2, 3);
  mesh << 0.5, -1, 2, 0.125, 0, 1e-3;
  const std::string obj = (dir / "m.obj").string();
  write_obj(obj, mesh);
  std::ifstream o(obj);
  std::getline(o, line);
  CHECK(line == "v 0.5 -1 2");
  std::getline(o, line);
  CHECK(line == "v 0.125 0 0.001");

  std::ofstream((dir / "bad.txt").string()) << "1 2 x\n";
  CHECK_THROWS_AS(read_tokens((dir / "bad.txt").string()), Error);
}
