#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "kpreid/experiments.hpp"
#include "kpreid/losses.hpp"
#include "kpreid/rng.hpp"
#include "kpreid/synth.hpp"
#include "kpreid/training.hpp"

using namespace kpr;
namespace fs = std::filesystem;

namespace {

std::string temp_dir() {
  static int counter = 0;
  fs::path dir = fs::temp_directory_path() / ("kpreid_train_test_" + std::to_string(counter++));
  fs::create_directories(dir);
  return dir.string();
}

SynthConfig tiny_synth() {
  SynthConfig cfg;
  cfg.seed = 13;
  cfg.n_identities = 5;
  cfg.images_per_identity = 4;
  cfg.channels = 8;
  cfg.grid_height = 4;
  cfg.grid_width = 4;
  cfg.image_width = 32;
  cfg.image_height = 32;
  cfg.patch_size = 8;
  cfg.n_keypoints = 2;
  cfg.signal_strength = 0.5;
  return cfg;
}

TrainConfig tiny_train(KeypointMode mode) {
  TrainConfig cfg;
  cfg.seed = 3;
  cfg.epochs = 2;
  cfg.batch_identities = 2;
  cfg.images_per_identity = 2;
  cfg.learning_rate = 1e-3;
  cfg.loss.arcface_m = 0.1;
  cfg.vit.embed_dim = 16;
  cfg.vit.depth = 1;
  cfg.vit.heads = 2;
  cfg.vit.mlp_ratio = 2.0;
  cfg.vit.mode = mode;
  return cfg;
}

struct OwnedData {
  SynthDataset ds;
  std::vector<KeypointSet> keypoints;
  TrainData data;
};

OwnedData build_data(const SynthConfig& synth_cfg) {
  OwnedData out;
  out.ds = generate_synthetic(synth_cfg);
  out.keypoints = propagated_keypoints(out.ds);
  std::map<std::string, std::size_t> label_of;
  for (std::size_t i = 0; i < out.ds.index.images.size(); ++i) {
    const ImageRecord& rec = out.ds.index.images[i];
    if (rec.split != Split::train) continue;
    auto [it, inserted] = label_of.try_emplace(rec.identity, label_of.size());
    if (inserted) out.data.identities.push_back(rec.identity);
    out.data.features.push_back(&out.ds.features[i]);
    out.data.keypoints.push_back(&out.keypoints[i]);
    out.data.labels.push_back(it->second);
  }
  return out;
}

}  // namespace

TEST_CASE("loss config names and validation") {
  CHECK(reid_kind_name(ReidKind::arcface) == "arcface");
  CHECK(reid_kind_name(ReidKind::arcface_triplet) == "arcface+triplet");
  CHECK(reid_kind_from_name("triplet") == ReidKind::triplet);
  CHECK_THROWS_AS(reid_kind_from_name("softmax"), ValidationError);

  LossConfig cfg;
  cfg.validate();
  cfg.lambda = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg.lambda = 0.2;
  cfg.arcface_s = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("cosine logits reject unembeddable zero rows") {
  Tape tape(false);
  Tensor emb = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 0.0}, DType::f64);
  Tensor w = Tensor::from_data({3, 2}, {1.0, 0.0, 0.0, 1.0, -1.0, 0.0}, DType::f64);
  CHECK_THROWS_WITH_AS(cosine_logits(tape, emb, w), doctest::Contains("1"), ValidationError);

  emb = Tensor::from_data({2, 2}, {1.0, 0.0, 3.0, 4.0}, DType::f64);
  Tensor logits = cosine_logits(tape, emb, w);
  CHECK(logits.at(0, 0) == doctest::Approx(1.0));
  CHECK(logits.at(0, 2) == doctest::Approx(-1.0));
  CHECK(logits.at(1, 1) == doctest::Approx(0.8));
}

TEST_CASE("composite loss is the re-id term plus lambda times cross entropy") {
  Rng rng(8);
  std::vector<double> ev(6 * 4), wv(3 * 4);
  for (double& x : ev) x = rng.normal();
  for (double& x : wv) x = rng.normal();
  Tensor emb = Tensor::from_data({6, 4}, ev, DType::f64);
  Tensor w = Tensor::from_data({3, 4}, wv, DType::f64);
  std::vector<std::size_t> labels = {0, 0, 1, 1, 2, 2};

  for (ReidKind kind : {ReidKind::arcface, ReidKind::triplet, ReidKind::arcface_triplet}) {
    LossConfig cfg;
    cfg.reid_kind = kind;
    Tape tape(false);
    LossTensors t = total_loss(tape, emb, w, labels, cfg);
    LossBreakdown b = breakdown(t);
    CHECK(std::abs(b.total - (b.reid + cfg.lambda * b.ce)) <= 1e-9);
    CHECK(b.ce > 0.0);
  }
}

TEST_CASE("triplet mining needs both a positive and a negative per anchor") {
  Tape tape(false);
  Tensor emb = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0}, DType::f64);
  CHECK_THROWS_WITH_AS(triplet_loss(tape, emb, {0, 1}, 0.3), doctest::Contains("positive"),
                       ValidationError);
  CHECK_THROWS_WITH_AS(triplet_loss(tape, emb, {0, 0}, 0.3), doctest::Contains("negative"),
                       ValidationError);
}

TEST_CASE("adam minimizes a separable quadratic") {
  Tensor x = Tensor::from_data({3}, {5.0, -4.0, 2.0}, DType::f64, true);
  Adam opt(0.1);
  for (int i = 0; i < 300; ++i) {
    Tape tape(true);
    Tensor loss = tape.sum(tape.mul(x, x));
    tape.backward(loss);
    std::vector<std::pair<Tensor, Tensor>> pg = {{x, tape.grad(x)}};
    opt.step(pg);
  }
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(x.at(i)) < 1e-2);
}

TEST_CASE("train config round-trips through JSON and validates") {
  TrainConfig cfg = tiny_train(KeypointMode::ckpe);
  cfg.vit.n_categories = 2;
  cfg.loss.reid_kind = ReidKind::arcface_triplet;
  TrainConfig back = TrainConfig::from_json(cfg.to_json());
  CHECK(back.seed == cfg.seed);
  CHECK(back.epochs == cfg.epochs);
  CHECK(back.batch_identities == cfg.batch_identities);
  CHECK(back.learning_rate == cfg.learning_rate);
  CHECK(back.loss.arcface_m == cfg.loss.arcface_m);
  CHECK(back.loss.reid_kind == ReidKind::arcface_triplet);
  CHECK(back.vit.mode == KeypointMode::ckpe);
  CHECK(back.vit.n_categories == 2);

  TrainConfig bad = cfg;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = cfg;
  bad.batch_identities = 1;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("training is bitwise deterministic under a fixed seed") {
  SynthConfig synth_cfg = tiny_synth();
  OwnedData owned = build_data(synth_cfg);
  TrainConfig cfg = tiny_train(KeypointMode::kpe);
  align_vit(cfg, synth_cfg);

  TrainResult a = train(cfg, owned.data);
  TrainResult b = train(cfg, owned.data);
  CHECK(a.steps == b.steps);
  CHECK(a.final_rng_state == b.final_rng_state);
  REQUIRE(a.history.size() == cfg.epochs);
  for (std::size_t e = 0; e < a.history.size(); ++e) {
    CHECK(a.history[e].loss == b.history[e].loss);
    CHECK(a.history[e].train_top1 == b.history[e].train_top1);
  }
  auto pa = a.params.named_params();
  auto pb = b.params.named_params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].second.data() == pb[i].second.data());
}

TEST_CASE("training writes per-epoch checkpoints and a metrics log") {
  SynthConfig synth_cfg = tiny_synth();
  OwnedData owned = build_data(synth_cfg);
  TrainConfig cfg = tiny_train(KeypointMode::none);
  align_vit(cfg, synth_cfg);

  const std::string dir = temp_dir();
  TrainResult res = train(cfg, owned.data, dir);
  CHECK(fs::exists(dir + "/epoch_0001.ckpt"));
  CHECK(fs::exists(dir + "/epoch_0002.ckpt"));
  Checkpoint last = load_checkpoint(dir + "/epoch_0002.ckpt");
  CHECK(last.step == res.steps);
  CHECK(last.rng_state == res.final_rng_state);

  std::ifstream in(dir + "/metrics.ndjson");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++lines;
  CHECK(lines == cfg.epochs);
  CHECK(metrics_line(res.history[0]).find("\"epoch\"") != std::string::npos);

  // An embedding from the trained model is finite and nonzero.
  Tensor e = embed(res.params, *owned.data.features[0], nullptr);
  double norm = 0.0;
  for (double v : e.data()) {
    CHECK(std::isfinite(v));
    norm += v * v;
  }
  CHECK(norm > 0.0);
}
