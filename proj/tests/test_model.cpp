#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <string>

#include "kpreid/model.hpp"
#include "kpreid/rng.hpp"

using namespace kpr;

namespace {

ViTConfig tiny_config(KeypointMode mode) {
  ViTConfig cfg;
  cfg.patch_size = 8;
  cfg.embed_dim = 8;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.image_width = 16;
  cfg.image_height = 16;
  cfg.feature_height = 4;
  cfg.feature_width = 4;
  cfg.channels = 2;
  cfg.n_categories = mode == KeypointMode::ckpe ? 1 : 0;
  cfg.mode = mode;
  return cfg;
}

FeatureMap sample_input(Rng& rng, const ViTConfig& cfg) {
  FeatureMap m;
  m.channels = cfg.channels;
  m.height = cfg.feature_height;
  m.width = cfg.feature_width;
  m.values.resize(m.channels * m.height * m.width);
  for (float& v : m.values) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return m;
}

std::string temp_path(const std::string& name) {
  static int counter = 0;
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / ("kpreid_model_test_" + std::to_string(counter++));
  fs::create_directories(dir);
  return (dir / name).string();
}

}  // namespace

TEST_CASE("config validation rejects inconsistent geometry") {
  ViTConfig cfg = tiny_config(KeypointMode::none);
  cfg.validate();
  CHECK(cfg.patch_dim() == 2 * 2 * 2);
  CHECK(cfg.patch_count() == 4);

  ViTConfig bad = cfg;
  bad.embed_dim = 9;  // not divisible by heads
  CHECK_THROWS_AS(bad.validate(), ValidationError);

  bad = cfg;
  bad.feature_width = 5;  // grid does not divide into the patch grid
  CHECK_THROWS_AS(bad.validate(), ValidationError);

  bad = cfg;
  bad.mode = KeypointMode::ckpe;
  bad.n_categories = 0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);

  bad = cfg;
  bad.image_width = 17;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("config round-trips through JSON") {
  ViTConfig cfg = tiny_config(KeypointMode::ckpe);
  cfg.n_categories = 3;
  ViTConfig back = ViTConfig::from_json(cfg.to_json());
  CHECK(back.embed_dim == cfg.embed_dim);
  CHECK(back.depth == cfg.depth);
  CHECK(back.heads == cfg.heads);
  CHECK(back.mlp_ratio == cfg.mlp_ratio);
  CHECK(back.feature_height == cfg.feature_height);
  CHECK(back.n_categories == 3);
  CHECK(back.mode == KeypointMode::ckpe);
  CHECK_THROWS_AS(ViTConfig::from_json("{\"embed_dim\": \"lots\"}"), FormatError);
}

TEST_CASE("unpatchify inverts patchify") {
  ViTConfig cfg = tiny_config(KeypointMode::none);
  Rng rng(7);
  FeatureMap input = sample_input(rng, cfg);
  Tensor patches = patchify(input, cfg);
  CHECK(patches.rows() == cfg.patch_count());
  CHECK(patches.cols() == cfg.patch_dim());
  FeatureMap back = unpatchify(patches, cfg);
  CHECK(back.values == input.values);

  FeatureMap wrong = input;
  wrong.width += 1;
  wrong.values.resize(wrong.channels * wrong.height * wrong.width);
  CHECK_THROWS_AS(patchify(wrong, cfg), ValidationError);
}

TEST_CASE("kpe with an empty keypoint set reproduces mode none bitwise") {
  Rng rng_a(11), rng_b(11);
  ModelParams none = ModelParams::init(tiny_config(KeypointMode::none), 3, rng_a);
  ModelParams kpe = ModelParams::init(tiny_config(KeypointMode::kpe), 3, rng_b);

  Rng data_rng(5);
  FeatureMap input = sample_input(data_rng, none.config);
  KeypointSet empty;

  Tape ta(false), tb(false);
  Tensor ea = forward(ta, none, input, nullptr);
  Tensor eb = forward(tb, kpe, input, &empty);
  REQUIRE(ea.size() == eb.size());
  CHECK(ea.data() == eb.data());
}

TEST_CASE("single-category ckpe matches kpe with replicated rows") {
  Rng rng_a(11), rng_b(11);
  ModelParams kpe = ModelParams::init(tiny_config(KeypointMode::kpe), 3, rng_a);
  ModelParams ckpe = ModelParams::init(tiny_config(KeypointMode::ckpe), 3, rng_b);

  const std::size_t d = kpe.config.embed_dim;
  Rng wrng(23);
  std::vector<double> v(d);
  for (double& x : v) x = wrng.uniform(-0.5, 0.5);
  for (std::size_t j = 0; j < d; ++j) {
    ckpe.w_ckp.data()[j] = v[j];
    for (std::size_t t = 0; t < kpe.w_kp.rows(); ++t) kpe.w_kp.data()[t * d + j] = v[j];
  }
  ckpe.w_ckp.round_to_dtype();
  kpe.w_kp.round_to_dtype();

  Rng data_rng(5);
  FeatureMap input = sample_input(data_rng, kpe.config);
  KeypointSet keypoints;
  keypoints.keypoints = {{1, 1, 0}, {12, 9, 0}};

  Tape ta(false), tb(false);
  Tensor ea = forward(ta, kpe, input, &keypoints);
  Tensor eb = forward(tb, ckpe, input, &keypoints);
  REQUIRE(ea.size() == eb.size());
  for (std::size_t i = 0; i < ea.size(); ++i)
    CHECK(std::abs(ea.data()[i] - eb.data()[i]) <= 1e-12);
}

TEST_CASE("batched forward rows equal per-example forwards") {
  Rng rng(31);
  ModelParams params = ModelParams::init(tiny_config(KeypointMode::kpe), 4, rng);
  Rng data_rng(2);
  FeatureMap a = sample_input(data_rng, params.config);
  FeatureMap b = sample_input(data_rng, params.config);
  KeypointSet ka, kb;
  ka.keypoints = {{0, 0, 0}};
  kb.keypoints = {{9, 9, 0}, {15, 2, 0}};

  Tape tape(false);
  Tensor batch = forward_batch(tape, params, {&a, &b}, {&ka, &kb});
  REQUIRE(batch.rows() == 2);
  Tape t1(false), t2(false);
  Tensor ea = forward(t1, params, a, &ka);
  Tensor eb = forward(t2, params, b, &kb);
  for (std::size_t j = 0; j < batch.cols(); ++j) {
    CHECK(batch.at(0, j) == ea.at(j));
    CHECK(batch.at(1, j) == eb.at(j));
  }
}

TEST_CASE("model parameters survive a checkpoint round trip") {
  Rng rng(41);
  ModelParams params = ModelParams::init(tiny_config(KeypointMode::ckpe), 3, rng);
  Checkpoint ckpt = params_to_checkpoint(params);
  ckpt.step = 77;
  ckpt.rng_state = rng.state();
  const std::string path = temp_path("m.ckpt");
  save_checkpoint(path, ckpt);
  Checkpoint loaded = load_checkpoint(path);
  CHECK(loaded.step == 77);

  Rng other(99);
  ModelParams restored = ModelParams::init(tiny_config(KeypointMode::ckpe), 3, other);
  params_from_checkpoint(restored, loaded);
  auto want = params.named_params();
  auto got = restored.named_params();
  REQUIRE(want.size() == got.size());
  for (std::size_t i = 0; i < want.size(); ++i) {
    CHECK(want[i].first == got[i].first);
    CHECK(want[i].second.data() == got[i].second.data());
  }

  // Incompatible checkpoints name the offending tensor.
  Rng rng2(1);
  ModelParams kpe_params = ModelParams::init(tiny_config(KeypointMode::kpe), 3, rng2);
  CHECK_THROWS_WITH_AS(params_from_checkpoint(kpe_params, loaded), doctest::Contains("w_kp"),
                       ValidationError);

  Checkpoint wrong_shape = loaded;
  for (auto& [name, tensor] : wrong_shape.tensors)
    if (name == "arc_weights") tensor = Tensor::zeros({2, 2});
  Rng rng3(1);
  ModelParams again = ModelParams::init(tiny_config(KeypointMode::ckpe), 3, rng3);
  CHECK_THROWS_WITH_AS(params_from_checkpoint(again, wrong_shape),
                       doctest::Contains("arc_weights"), ValidationError);
}
