#include "kpreid/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "json.hpp"

using nlohmann::json;

namespace kpr {

void TrainConfig::validate() const {
  if (epochs == 0) throw ValidationError("epochs must be >= 1");
  if (batch_identities < 2) throw ValidationError("batch_identities must be >= 2");
  if (images_per_identity == 0) throw ValidationError("images_per_identity must be >= 1");
  const bool uses_triplet =
      loss.reid_kind == ReidKind::triplet || loss.reid_kind == ReidKind::arcface_triplet;
  if (uses_triplet && images_per_identity < 2)
    throw ValidationError("triplet loss needs images_per_identity >= 2");
  if (learning_rate <= 0.0) throw ValidationError("learning_rate must be > 0");
  loss.validate();
  vit.validate();
}

std::string TrainConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["epochs"] = epochs;
  j["batch_identities"] = batch_identities;
  j["images_per_identity"] = images_per_identity;
  j["learning_rate"] = learning_rate;
  j["lambda"] = loss.lambda;
  j["arcface_s"] = loss.arcface_s;
  j["arcface_m"] = loss.arcface_m;
  j["triplet_margin"] = loss.triplet_margin;
  j["reid_kind"] = reid_kind_name(loss.reid_kind);
  j["vit"] = json::parse(vit.to_json());
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw FormatError("invalid training config JSON");
  TrainConfig cfg;
  try {
    cfg.seed = j.value("seed", cfg.seed);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_identities = j.value("batch_identities", cfg.batch_identities);
    cfg.images_per_identity = j.value("images_per_identity", cfg.images_per_identity);
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.loss.lambda = j.value("lambda", cfg.loss.lambda);
    cfg.loss.arcface_s = j.value("arcface_s", cfg.loss.arcface_s);
    cfg.loss.arcface_m = j.value("arcface_m", cfg.loss.arcface_m);
    cfg.loss.triplet_margin = j.value("triplet_margin", cfg.loss.triplet_margin);
    if (j.contains("reid_kind"))
      cfg.loss.reid_kind = reid_kind_from_name(j.at("reid_kind").get<std::string>());
    if (j.contains("vit")) cfg.vit = ViTConfig::from_json(j.at("vit").dump());
  } catch (const json::exception& e) {
    throw FormatError(std::string("training config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::string metrics_line(const EpochMetrics& m) {
  json j;
  j["epoch"] = m.epoch;
  j["loss"] = m.loss;
  j["loss_reid"] = m.loss_reid;
  j["loss_ce"] = m.loss_ce;
  j["train_top1"] = m.train_top1;
  return j.dump();
}

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(std::vector<std::pair<Tensor, Tensor>>& params_and_grads) {
  if (m_.empty()) {
    m_.resize(params_and_grads.size());
    v_.resize(params_and_grads.size());
    for (std::size_t i = 0; i < params_and_grads.size(); ++i) {
      m_[i].assign(params_and_grads[i].first.size(), 0.0);
      v_[i].assign(params_and_grads[i].first.size(), 0.0);
    }
  }
  if (m_.size() != params_and_grads.size())
    throw ContractError("Adam: parameter list changed size between steps");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_and_grads.size(); ++i) {
    Tensor& p = params_and_grads[i].first;
    const std::vector<double>& g = params_and_grads[i].second.data();
    if (g.size() != m_[i].size())
      throw ContractError("Adam: parameter " + std::to_string(i) + " changed size");
    std::vector<double>& values = p.data();
    for (std::size_t k = 0; k < g.size(); ++k) {
      m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g[k];
      v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g[k] * g[k];
      values[k] -= lr_ * (m_[i][k] / bc1) / (std::sqrt(v_[i][k] / bc2) + eps_);
    }
    p.round_to_dtype();
  }
}

Tensor embed(const ModelParams& params, const FeatureMap& input, const KeypointSet* keypoints) {
  Tape tape(false);
  return forward(tape, params, input, keypoints);
}

namespace {

double classifier_top1(const ModelParams& params, const TrainData& data) {
  const std::size_t n_classes = params.arc_weights.rows();
  const std::size_t d = params.arc_weights.cols();
  std::vector<double> wn(params.arc_weights.data());
  for (std::size_t c = 0; c < n_classes; ++c) {
    double sq = 0.0;
    for (std::size_t k = 0; k < d; ++k) sq += wn[c * d + k] * wn[c * d + k];
    const double norm = std::max(std::sqrt(sq), 1e-12);
    for (std::size_t k = 0; k < d; ++k) wn[c * d + k] /= norm;
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.features.size(); ++i) {
    Tensor z = embed(params, *data.features[i], data.keypoints[i]);
    double sq = 0.0;
    for (std::size_t k = 0; k < d; ++k) sq += z.at(k) * z.at(k);
    const double norm = std::max(std::sqrt(sq), 1e-12);
    std::size_t best = 0;
    double best_sim = -2.0;
    for (std::size_t c = 0; c < n_classes; ++c) {
      double sim = 0.0;
      for (std::size_t k = 0; k < d; ++k) sim += (z.at(k) / norm) * wn[c * d + k];
      if (sim > best_sim) { best_sim = sim; best = c; }
    }
    if (best == data.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.features.size());
}

void check_data(const TrainConfig& cfg, const TrainData& data) {
  if (data.features.empty()) throw ValidationError("training set is empty");
  if (data.keypoints.size() != data.features.size() || data.labels.size() != data.features.size())
    throw DimensionError("training data arrays have mismatched lengths");
  if (data.identities.empty()) throw ValidationError("training set has no identities");
  for (std::size_t i = 0; i < data.features.size(); ++i) {
    if (data.labels[i] >= data.identities.size())
      throw ValidationError("label " + std::to_string(data.labels[i]) + " at image index " +
                            std::to_string(i) + " out of range");
    if (cfg.vit.mode != KeypointMode::none && data.keypoints[i] == nullptr)
      throw ValidationError("mode " + mode_name(cfg.vit.mode) +
                            " needs keypoints for every training image (missing at index " +
                            std::to_string(i) + ")");
  }
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const TrainData& data, const std::string& out_dir) {
  cfg.validate();
  check_data(cfg, data);

  Rng rng(cfg.seed);
  ModelParams params = ModelParams::init(cfg.vit, data.identities.size(), rng, DType::f32);
  Adam opt(cfg.learning_rate);

  std::vector<std::vector<std::size_t>> by_label(data.identities.size());
  for (std::size_t i = 0; i < data.labels.size(); ++i) by_label[data.labels[i]].push_back(i);
  std::vector<std::size_t> populated;
  for (std::size_t l = 0; l < by_label.size(); ++l)
    if (!by_label[l].empty()) populated.push_back(l);
  if (populated.size() < 2)
    throw ValidationError("training needs at least 2 identities with images, got " +
                          std::to_string(populated.size()));
  const std::size_t p = std::min(cfg.batch_identities, populated.size());
  const std::size_t k = cfg.images_per_identity;
  const std::size_t steps_per_epoch = std::max<std::size_t>(1, data.features.size() / (p * k));

  TrainResult result;
  std::string metrics_text;
  std::uint64_t total_steps = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double sum_total = 0.0, sum_reid = 0.0, sum_ce = 0.0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      std::vector<std::size_t> label_order = populated;
      rng.shuffle(label_order);

      std::vector<const FeatureMap*> batch_features;
      std::vector<const KeypointSet*> batch_keypoints;
      std::vector<std::size_t> batch_labels;
      for (std::size_t pi = 0; pi < p; ++pi) {
        const std::size_t label = label_order[pi];
        const std::vector<std::size_t>& pool = by_label[label];
        std::vector<std::size_t> picks;
        if (pool.size() >= k) {
          std::vector<std::size_t> order = pool;
          rng.shuffle(order);
          picks.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
        } else {
          for (std::size_t j = 0; j < k; ++j) picks.push_back(pool[rng.index(pool.size())]);
        }
        for (std::size_t idx : picks) {
          batch_features.push_back(data.features[idx]);
          batch_keypoints.push_back(data.keypoints[idx]);
          batch_labels.push_back(data.labels[idx]);
        }
      }

      Tape tape;
      Tensor z = forward_batch(tape, params, batch_features, batch_keypoints);
      LossTensors losses = total_loss(tape, z, params.arc_weights, batch_labels, cfg.loss);
      tape.backward(losses.total);

      std::vector<std::pair<Tensor, Tensor>> updates;
      for (auto& [name, tensor] : params.named_params())
        updates.emplace_back(tensor, tape.grad(tensor));
      opt.step(updates);

      // Log the composite at double precision so the reported loss is exactly
      // reid + lambda * ce; the f32-rounded tape total drives the update.
      sum_total += losses.reid.value() + cfg.loss.lambda * losses.ce.value();
      sum_reid += losses.reid.value();
      sum_ce += losses.ce.value();
      ++total_steps;
    }

    EpochMetrics m;
    m.epoch = epoch + 1;
    m.loss = sum_total / static_cast<double>(steps_per_epoch);
    m.loss_reid = sum_reid / static_cast<double>(steps_per_epoch);
    m.loss_ce = sum_ce / static_cast<double>(steps_per_epoch);
    m.train_top1 = classifier_top1(params, data);
    result.history.push_back(m);
    metrics_text += metrics_line(m);
    metrics_text += '\n';

    if (!out_dir.empty()) {
      Checkpoint ckpt = params_to_checkpoint(params);
      ckpt.step = total_steps;
      ckpt.rng_state = rng.state();
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%04zu.ckpt", epoch + 1);
      save_checkpoint(out_dir + "/" + name, ckpt);
      atomic_write_file(out_dir + "/metrics.ndjson", metrics_text);
    }
  }

  result.params = std::move(params);
  result.steps = total_steps;
  result.final_rng_state = rng.state();
  return result;
}

}  // namespace kpr
