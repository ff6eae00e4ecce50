#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kpreid/losses.hpp"
#include "kpreid/model.hpp"

namespace kpr {

struct TrainConfig {
  std::uint64_t seed = 1;
  std::size_t epochs = 30;
  std::size_t batch_identities = 4;    // P
  std::size_t images_per_identity = 4; // K, so batches hold P*K examples
  double learning_rate = 1e-3;
  LossConfig loss;
  ViTConfig vit;

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

// In-memory training set; the vectors run parallel over the train images.
// Keypoint pointers may be null only in mode none.
struct TrainData {
  std::vector<const FeatureMap*> features;
  std::vector<const KeypointSet*> keypoints;
  std::vector<std::size_t> labels;
  std::vector<std::string> identities;  // label -> identity name
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;
  double loss_reid = 0.0;
  double loss_ce = 0.0;
  double train_top1 = 0.0;
};

std::string metrics_line(const EpochMetrics& m);  // one NDJSON record

struct TrainResult {
  ModelParams params;
  std::vector<EpochMetrics> history;
  std::uint64_t steps = 0;
  std::uint64_t final_rng_state = 0;
};

class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  // Applies one bias-corrected update in place to every (param, grad) pair.
  // Pairs must arrive in the same order every step.
  void step(std::vector<std::pair<Tensor, Tensor>>& params_and_grads);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Embedding of one image without recording gradients.
Tensor embed(const ModelParams& params, const FeatureMap& input, const KeypointSet* keypoints);

// Deterministic under cfg.seed. When out_dir is nonempty, writes one
// checkpoint per epoch plus metrics.ndjson there.
TrainResult train(const TrainConfig& cfg, const TrainData& data, const std::string& out_dir = "");

}  // namespace kpr
