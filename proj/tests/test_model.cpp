#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "mega/error.hpp"
#include "mega/geometry.hpp"
#include "mega/model.hpp"
#include "mega/nn/gradcheck.hpp"
#include "mega/nn/optim.hpp"
#include "mega/training.hpp"
#include "oracles.hpp"

using namespace mega;
using nn::Matrix;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.codebook_size = 16;
  c.dim = 16;
  c.heads = 2;
  c.encoder_blocks = 2;
  c.decoder_blocks = 2;
  return c;
}

struct Data {
  BodyTemplate tmpl;
  std::vector<DatasetRecord> records = make_dataset(64, 0.3, 41, tmpl);
};

const Data& data() {
  static const Data d;
  return d;
}

using oracle::permutation;
using oracle::random_masked;

void perturb(nn::Parameter& p, Rng& rng, double amount) {
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += amount * rng.normal();
}

std::filesystem::path scratch() {
  const auto dir = std::filesystem::temp_directory_path() / "mega_test_model";
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("parameter shapes follow the config") {
  const MegaModel model(tiny_config(), 1);
  const auto& ps = model.parameters();
  CHECK(ps.find("token_embedding")->value.rows() == 16);
  CHECK(ps.find("token_embedding")->value.cols() == 16);
  CHECK(ps.find("encoder.pos")->value.rows() == 25);
  CHECK(ps.find("decoder.pos")->value.rows() == 24 + 12);
  CHECK(ps.find("cond.weight")->value.rows() == 3 * 12);
  CHECK(ps.find("rotcam.out.weight")->value.cols() == 9);
  CHECK(ps.find("encoder.block1.attn.query.weight") != nullptr);
  CHECK(ps.find("encoder.block2.attn.query.weight") == nullptr);
  std::set<std::string> names;
  for (const auto& p : ps) CHECK(names.insert(p.name).second);

  ModelConfig bad = tiny_config();
  bad.heads = 3;
  CHECK_THROWS_AS(MegaModel(bad, 0), Error);
}

TEST_CASE("forward is deterministic and finite") {
  const MegaModel model(tiny_config(), 2);
  Rng rng(5);
  const auto& obs = data().records[0].observation;
  for (int m : {0, 5, 23}) {
    const MaskedSequence seq = random_masked(rng, 24, 16, m);
    const Matrix a = model.forward_logits(seq, &obs);
    const Matrix b = model.forward_logits(seq, &obs);
    CHECK(a.rows() == 24);
    CHECK(a.cols() == 16);
    CHECK(a == b);
    CHECK(a.allFinite());
    CHECK(model.forward_logits(seq, nullptr).allFinite());
  }
  const MegaModel twin(tiny_config(), 2);
  const MaskedSequence seq = random_masked(rng, 24, 16, 4);
  CHECK(twin.forward_logits(seq, &obs) == model.forward_logits(seq, &obs));
}

TEST_CASE("batched forward matches one item at a time") {
  const MegaModel model(tiny_config(), 3);
  Rng rng(6);
  std::vector<MaskedSequence> batch;
  std::vector<const Observation*> obs;
  for (int i = 0; i < 5; ++i) {
    batch.push_back(random_masked(rng, 24, 16, i * 4));
    obs.push_back(i % 2 ? nullptr : &data().records[i].observation);
  }
  nn::Tape tape(false);
  const Matrix all = model.forward_logits(tape, batch, obs).value();
  for (int i = 0; i < 5; ++i)
    CHECK((all.middleRows(24 * i, 24) - model.forward_logits(batch[i], obs[i])).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("with no visible tokens the encoder does not affect the logits") {
  MegaModel model(tiny_config(), 4);
  const auto& obs = data().records[1].observation;
  const MaskedSequence none = MaskedSequence::fully_masked(24);
  const Matrix with_obs = model.forward_logits(none, &obs);
  const Matrix without = model.forward_logits(none, nullptr);
  Rng rng(9);
  for (auto& p : model.parameters()) {
    if (p.name.rfind("encoder.", 0) == 0 || p.name == "token_embedding" || p.name == "cls") {
      perturb(p, rng, 1.0);
    }
  }
  CHECK(model.forward_logits(none, &obs) == with_obs);
  CHECK(model.forward_logits(none, nullptr) == without);

  // a single visible token does reach the output
  Rng r2(10);
  const MaskedSequence one = random_masked(r2, 24, 16, 1);
  MegaModel fresh(tiny_config(), 4);
  const Matrix before = fresh.forward_logits(one, &obs);
  perturb(*fresh.parameters().find("encoder.block0.fc1.weight"), rng, 1.0);
  CHECK(fresh.forward_logits(one, &obs) != before);
}

TEST_CASE("logits are equivariant to the order of conditioning tokens") {
  MegaModel model(tiny_config(), 5);
  Rng rng(11);
  const Observation& obs = data().records[2].observation;
  const int n = 24, k = 12;
  for (int trial = 0; trial < 3; ++trial) {
    const MaskedSequence seq = random_masked(rng, n, 16, trial * 7);
    const Matrix reference = model.forward_logits(seq, &obs);
    const RotCam rc = model.predict_rot_cam(obs);
    const std::vector<int> perm = permutation(rng, k);

    Observation permuted = obs;
    auto& weight = model.parameters().find("cond.weight")->value;
    auto& bias = model.parameters().find("cond.bias")->value;
    auto& pos = model.parameters().find("decoder.pos")->value;
    const Matrix w0 = weight, b0 = bias, p0 = pos;
    for (int j = 0; j < k; ++j) {
      permuted.keypoints.row(j) = obs.keypoints.row(perm[j]);
      permuted.visible[j] = obs.visible[perm[j]];
      weight.middleRows(3 * j, 3) = w0.middleRows(3 * perm[j], 3);
      bias.row(j) = b0.row(perm[j]);
      pos.row(n + j) = p0.row(n + perm[j]);
    }
    CHECK((model.forward_logits(seq, &permuted) - reference).cwiseAbs().maxCoeff() <= 1e-9);
    const RotCam rp = model.predict_rot_cam(permuted);
    CHECK((rp.rotation6d - rc.rotation6d).cwiseAbs().maxCoeff() <= 1e-9);
    weight = w0;
    bias = b0;
    pos = p0;
  }
}

TEST_CASE("forward rejects malformed inputs") {
  const MegaModel model(tiny_config(), 6);
  const auto& obs = data().records[0].observation;
  auto kind_of = [&](const MaskedSequence& m, const Observation* o) {
    try {
      model.forward_logits(m, o);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::Validation;
  };
  CHECK(kind_of(MaskedSequence::fully_masked(23), &obs) == ErrorKind::Config);
  MaskedSequence all = MaskedSequence::fully_masked(24);
  all.visible.assign(24, true);
  CHECK(kind_of(all, &obs) == ErrorKind::Config);
  MaskedSequence bad = MaskedSequence::fully_masked(24);
  bad.visible[3] = true;
  bad.indices[3] = 16;
  CHECK(kind_of(bad, &obs) == ErrorKind::InvalidToken);
  Observation short_obs = obs;
  short_obs.visible.pop_back();
  short_obs.keypoints.conservativeResize(11, 2);
  CHECK(kind_of(MaskedSequence::fully_masked(24), &short_obs) == ErrorKind::Config);
}

TEST_CASE("token loss") {
  const int n = 24, s = 16;
  Rng rng(12);
  TokenSequence target;
  for (int i = 0; i < n; ++i) target.indices.push_back(static_cast<int>(rng.below(s)));
  std::vector<bool> visible(n, false);
  for (int i = 0; i < n; i += 3) visible[i] = true;

  nn::Tape tape(false);
  Matrix sharp = Matrix::Zero(n, s);
  for (int i = 0; i < n; ++i) {
    if (visible[i]) {
      sharp.row(i).setRandom();
      sharp.row(i) *= 1e3;
    } else {
      sharp(i, target[i]) = 100.0;
    }
  }
  CHECK(loss_tokens(tape.constant(sharp), target, visible).scalar() < 1e-6);
  CHECK(loss_tokens(tape.constant(Matrix::Zero(n, s)), target, visible).scalar() ==
        doctest::Approx(std::log(16.0)).epsilon(1e-14));

  Matrix logits(n, s);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = 3.0 * rng.normal();
  std::vector<int> hidden_rows, hidden_targets;
  for (int i = 0; i < n; ++i) {
    if (!visible[i]) {
      hidden_rows.push_back(i);
      hidden_targets.push_back(target[i]);
    }
  }
  const nn::Var lx = tape.constant(logits);
  const double subset = nn::cross_entropy(nn::gather_rows(lx, hidden_rows), hidden_targets,
                                          std::vector<bool>(hidden_rows.size(), true))
                            .scalar();
  CHECK(std::abs(loss_tokens(lx, target, visible).scalar() - subset) <= 1e-12);

  try {
    loss_tokens(lx, target, std::vector<bool>(n, true));
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::EmptyLoss);
  }
  CHECK_THROWS_AS(loss_tokens(lx, target, std::vector<bool>(n - 1, false)), Error);
}

TEST_CASE("rotation and camera loss") {
  const BodyTemplate& tmpl = data().tmpl;
  int checked = 0;
  for (const DatasetRecord& r : data().records) {
    const Points3d joints = joints_from_mesh(r.canonical, tmpl);
    Matrix r6(1, 6), cam(1, 3);
    r6.row(0) = matrix_to_rot6d(r.params.root_rotation).transpose();
    cam << r.camera.scale, r.camera.translation.x(), r.camera.translation.y();
    nn::Tape tape(false);
    const double perfect =
        loss_rot_cam(tape.constant(r6), tape.constant(cam), r.params.root_rotation, joints, r.observation).scalar();
    CHECK(perfect <= 1e-9);
    if (++checked == 10) break;
  }

  const DatasetRecord& r = data().records[0];
  const Points3d joints = joints_from_mesh(r.canonical, tmpl);
  Matrix identity(1, 6);
  identity << 1, 0, 0, 0, 1, 0;
  Matrix cam(1, 3);
  cam << r.camera.scale, r.camera.translation.x(), r.camera.translation.y();
  const Matrix3d flip = Eigen::Vector3d(1, -1, -1).asDiagonal();
  nn::Tape tape(false);
  const nn::Var rot = nn::rot6d_to_matrix(tape.constant(identity));
  CHECK(nn::frobenius_distance(rot, Matrix(flip)).scalar() == doctest::Approx(2 * std::sqrt(2.0)).epsilon(1e-12));
  CHECK_THROWS_AS(loss_rot_cam(tape.constant(identity), tape.constant(cam), Matrix3d::Zero(), joints, r.observation),
                  Error);

  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    nn::ParameterSet ps;
    Rng rng(seed + 30);
    auto& p6 = ps.add("r6", 1, 6);
    auto& pc = ps.add("cam", 1, 3);
    for (int i = 0; i < 6; ++i) p6.value(0, i) = rng.normal();
    pc.value << 1 + 0.2 * rng.normal(), 0.1 * rng.normal(), 0.1 * rng.normal();
    const DatasetRecord& rec = data().records[seed];
    const Points3d j = joints_from_mesh(rec.canonical, tmpl);
    const double err = nn::gradcheck(
        [&](nn::Tape& t) {
          return loss_rot_cam(t.param(p6), t.param(pc), rec.params.root_rotation, j, rec.observation);
        },
        ps, seed);
    CHECK_MESSAGE(err <= 1e-4, "seed " << seed);
  }
}

TEST_CASE("rotation and camera prediction") {
  const MegaModel model(tiny_config(), 7);
  const Observation& obs = data().records[3].observation;
  const RotCam a = model.predict_rot_cam(obs);
  const RotCam b = model.predict_rot_cam(obs);
  CHECK(a.rotation6d == b.rotation6d);
  CHECK(a.camera.scale == b.camera.scale);
  CHECK(a.camera.translation == b.camera.translation);

  Observation hidden = obs;
  hidden.visible.assign(12, false);
  hidden.keypoints.setConstant(Observation::kHidden);
  const RotCam h = model.predict_rot_cam(hidden);
  CHECK(h.rotation6d.allFinite());
  CHECK(std::isfinite(h.camera.scale));
  CHECK(h.camera.translation.allFinite());
  CHECK(is_rotation(rot6d_to_matrix(h.rotation6d), 1e-9));
}

TEST_CASE("full training loss passes gradcheck over 20 seeds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const double err = oracle::training_loss_gradcheck(seed, data().records, data().tmpl);
    CHECK_MESSAGE(err <= 1e-4, "seed " << seed);
  }
}

TEST_CASE("pre-training and conditioned mode share the encoder") {
  MegaModel model(tiny_config(), 8);
  Rng rng(13);
  const MaskedSequence seq = random_masked(rng, 24, 16, 10);
  TokenSequence target;
  target.indices = seq.indices;
  const auto& obs = data().records[4].observation;
  for (const Observation* o : {static_cast<const Observation*>(nullptr), &obs}) {
    model.parameters().zero_grad();
    nn::Tape tape;
    const nn::Var loss = loss_tokens(model.forward_logits(tape, {seq}, {o}), target, seq.visible);
    tape.backward(loss, model.parameters());
    const auto* w = model.parameters().find("encoder.block0.attn.query.weight");
    CHECK(w->grad.norm() > 0);
    CHECK(model.parameters().find("token_embedding")->grad.norm() > 0);
    CHECK((model.parameters().find("cond.weight")->grad.norm() > 0) == (o != nullptr));
  }
}

TEST_CASE("logits are finite and non-constant after a training step") {
  const Data& d = data();
  std::vector<TrainingItem> items;
  Rng rng(14);
  for (int i = 0; i < 16; ++i) {
    TrainingItem it;
    it.record = &d.records[i];
    it.joints = joints_from_mesh(d.records[i].canonical, d.tmpl);
    for (int p = 0; p < 24; ++p) it.tokens.indices.push_back(static_cast<int>(rng.below(16)));
    items.push_back(std::move(it));
  }
  MegaModel model(tiny_config(), 9);
  TrainOptions opts;
  opts.epochs = 1;
  opts.batch_size = 16;
  opts.seed = 3;
  const TrainResult r = train_model(model, items, opts);
  CHECK(r.steps == 1);
  for (int i = 0; i < 4; ++i) {
    const Matrix logits = model.forward_logits(random_masked(rng, 24, 16, i * 5), &d.records[i].observation);
    CHECK(logits.allFinite());
    for (int row = 0; row < 24; ++row) CHECK(logits.row(row).maxCoeff() > logits.row(row).minCoeff());
  }
}

TEST_CASE("checkpoint round trip and validation") {
  const ModelConfig c = tiny_config();
  MegaModel model(c, 10);
  Rng rng(15);
  for (auto& p : model.parameters()) perturb(p, rng, 1.0);
  const std::string path = (scratch() / "m.ckpt").string();
  save_checkpoint(path, model);
  const MegaModel back = load_checkpoint(path, c);
  REQUIRE(back.parameters().size() == model.parameters().size());
  for (int i = 0; i < model.parameters().size(); ++i) {
    CHECK(back.parameters()[i].name == model.parameters()[i].name);
    CHECK(std::memcmp(back.parameters()[i].value.data(), model.parameters()[i].value.data(),
                      sizeof(double) * model.parameters()[i].value.size()) == 0);
  }
  const auto& obs = data().records[5].observation;
  CHECK(back.forward_logits(MaskedSequence::fully_masked(24), &obs) ==
        model.forward_logits(MaskedSequence::fully_masked(24), &obs));

  std::ifstream in(path, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(bytes.substr(0, 4) == "MEGA");
  auto load_kind = [&](const std::string& content, const ModelConfig& expected) {
    const std::string p = (scratch() / "bad.ckpt").string();
    std::ofstream(p, std::ios::binary) << content;
    try {
      load_checkpoint(p, expected);
    } catch (const Error& e) {
      return std::make_pair(e.kind(), std::string(e.what()));
    }
    return std::make_pair(ErrorKind::Io, std::string("loaded"));
  };
  CHECK(load_kind(bytes.substr(0, bytes.size() - 9), c).first == ErrorKind::CorruptCheckpoint);
  CHECK(load_kind(bytes.substr(0, 10), c).first == ErrorKind::CorruptCheckpoint);
  CHECK(load_kind(bytes + "x", c).first == ErrorKind::CorruptCheckpoint);
  CHECK(load_kind("MEGB" + bytes.substr(4), c).first == ErrorKind::CorruptCheckpoint);
  std::string wrong_version = bytes;
  wrong_version[4] = 7;
  CHECK(load_kind(wrong_version, c).first == ErrorKind::CorruptCheckpoint);

  ModelConfig n54 = c;
  n54.num_parts = 54;
  const auto [kind, what] = load_kind(bytes, n54);
  CHECK(kind == ErrorKind::Validation);
  CHECK(what.find("N=24") != std::string::npos);
  CHECK(what.find("N=54") != std::string::npos);
  ModelConfig wide = c;
  wide.dim = 32;
  CHECK(load_kind(bytes, wide).second.find("D=") != std::string::npos);

  CHECK_THROWS_AS(load_checkpoint((scratch() / "missing.ckpt").string(), c), Error);
}

TEST_CASE("keypoint normalization is fitted on visible keypoints") {
  MegaModel model(tiny_config(), 11);
  std::vector<const Observation*> obs;
  for (const auto& r : data().records) obs.push_back(&r.observation);
  model.fit_keypoint_normalization(obs);
  const auto& shift = model.parameters().find("cond.input_shift")->value;
  const auto& gain = model.parameters().find("cond.input_gain")->value;
  CHECK_FALSE(model.parameters().find("cond.input_shift")->trainable);
  for (int j = 0; j < 12; ++j) {
    double n = 0, sum = 0, sq = 0;
    for (const Observation* o : obs) {
      if (!o->visible[j]) continue;
      n += 1;
      sum += o->keypoints(j, 0);
      sq += o->keypoints(j, 0) * o->keypoints(j, 0);
    }
    CHECK(shift(j, 0) == doctest::Approx(sum / n).epsilon(1e-12));
    CHECK(gain(j, 0) == doctest::Approx(1.0 / std::sqrt(sq / n - (sum / n) * (sum / n))).epsilon(1e-8));
  }

  // an affine change of image coordinates is absorbed by refitting
  std::vector<Observation> moved;
  for (const Observation* o : obs) {
    Observation m = *o;
    for (int j = 0; j < 12; ++j)
      if (m.visible[j]) m.keypoints.row(j) = 2.5 * m.keypoints.row(j) + Eigen::RowVector2d(0.3, -1.0);
    moved.push_back(m);
  }
  std::vector<const Observation*> moved_ptrs;
  for (const auto& m : moved) moved_ptrs.push_back(&m);
  MegaModel twin(tiny_config(), 11);
  twin.fit_keypoint_normalization(moved_ptrs);
  Rng rng(16);
  for (int i = 0; i < 5; ++i) {
    const MaskedSequence seq = random_masked(rng, 24, 16, i * 3);
    CHECK((model.forward_logits(seq, obs[i]) - twin.forward_logits(seq, moved_ptrs[i])).cwiseAbs().maxCoeff() <= 1e-9);
  }

  // frozen statistics are not touched by the optimizer
  const Matrix before = shift;
  nn::ParameterSet& ps = model.parameters();
  for (auto& p : ps) p.grad = Matrix::Ones(p.value.rows(), p.value.cols());
  nn::adamw_step(ps, 1e-2, 1);
  CHECK(model.parameters().find("cond.input_shift")->value == before);
}
