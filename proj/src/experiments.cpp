#include "kpreid/experiments.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

using nlohmann::json;

namespace kpr {

std::vector<KeypointSet> propagated_keypoints(const SynthDataset& ds) {
  const ImageRecord* ref = ds.index.find(ds.reference_id);
  if (!ref) throw ContractError("reference image \"" + ds.reference_id + "\" not in the index");

  std::size_t ref_idx = 0;
  while (ds.index.images[ref_idx].image_id != ds.reference_id) ++ref_idx;
  const FeatureMap& ref_map = ds.features[ref_idx];
  NormalizedFeatureMap ref_norm = normalize_features(ref_map);

  std::vector<std::vector<double>> directions;
  std::vector<Cell> ref_cells;
  for (const Keypoint& kp : ds.reference.keypoints) {
    Cell c = pixel_to_cell(kp.x, kp.y, ref->image_width, ref->image_height, ref_map.width,
                           ref_map.height);
    ref_cells.push_back(c);
    directions.push_back(ref_norm.vector_at(c.y, c.x));
  }

  std::vector<KeypointSet> out(ds.index.images.size());
  for (std::size_t i = 0; i < ds.index.images.size(); ++i) {
    const ImageRecord& rec = ds.index.images[i];
    out[i].image_id = rec.image_id;
    if (rec.image_id == ds.reference_id) {
      for (std::size_t k = 0; k < ds.reference.keypoints.size(); ++k) {
        auto [px, py] = cell_to_pixel(ref_cells[k], rec.image_width, rec.image_height,
                                      ref_map.width, ref_map.height);
        out[i].keypoints.push_back({px, py, ds.reference.keypoints[k].category});
      }
      continue;
    }
    NormalizedFeatureMap target = normalize_features(ds.features[i]);
    for (std::size_t k = 0; k < directions.size(); ++k) {
      ArgmaxResult best = argmax_cell(similarity_map(directions[k], target));
      auto [px, py] = cell_to_pixel(best.cell, rec.image_width, rec.image_height, target.width,
                                    target.height);
      out[i].keypoints.push_back({px, py, ds.reference.keypoints[k].category});
    }
  }
  return out;
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

std::vector<KeypointSet> random_keypoints(const SynthDataset& ds, std::uint64_t seed) {
  const std::size_t n = ds.reference.keypoints.size();
  std::vector<KeypointSet> out(ds.index.images.size());
  for (std::size_t i = 0; i < ds.index.images.size(); ++i) {
    const ImageRecord& rec = ds.index.images[i];
    Rng rng(seed ^ fnv1a(rec.image_id));
    out[i].image_id = rec.image_id;
    for (std::size_t k = 0; k < n; ++k) {
      Keypoint kp;
      kp.x = static_cast<long>(rng.index(rec.image_width));
      kp.y = static_cast<long>(rng.index(rec.image_height));
      kp.category = ds.reference.keypoints[k].category;
      out[i].keypoints.push_back(kp);
    }
  }
  return out;
}

void align_vit(TrainConfig& train_cfg, const SynthConfig& synth_cfg) {
  train_cfg.vit.channels = synth_cfg.channels;
  train_cfg.vit.feature_height = synth_cfg.grid_height;
  train_cfg.vit.feature_width = synth_cfg.grid_width;
  train_cfg.vit.image_width = synth_cfg.image_width;
  train_cfg.vit.image_height = synth_cfg.image_height;
  train_cfg.vit.patch_size = synth_cfg.patch_size;
  train_cfg.vit.n_categories = synth_cfg.n_keypoints;
}

PipelineResult run_pipeline(const SynthDataset& ds, const TrainConfig& train_cfg,
                            bool random_patches, const std::string& out_dir) {
  std::vector<KeypointSet> keysets = random_patches
                                         ? random_keypoints(ds, train_cfg.seed)
                                         : propagated_keypoints(ds);

  TrainData data;
  std::vector<std::string> identities;
  for (std::size_t i = 0; i < ds.index.images.size(); ++i) {
    const ImageRecord& rec = ds.index.images[i];
    if (rec.split != Split::train) continue;
    auto it = std::find(identities.begin(), identities.end(), rec.identity);
    std::size_t label;
    if (it == identities.end()) {
      label = identities.size();
      identities.push_back(rec.identity);
    } else {
      label = static_cast<std::size_t>(it - identities.begin());
    }
    data.features.push_back(&ds.features[i]);
    data.keypoints.push_back(&keysets[i]);
    data.labels.push_back(label);
  }
  data.identities = identities;

  TrainResult trained = train(train_cfg, data, out_dir);

  std::vector<EvalItem> items;
  for (std::size_t i = 0; i < ds.index.images.size(); ++i) {
    const ImageRecord& rec = ds.index.images[i];
    if (rec.split != Split::test) continue;
    const KeypointSet* kps =
        train_cfg.vit.mode == KeypointMode::none ? nullptr : &keysets[i];
    Tensor z = embed(trained.params, ds.features[i], kps);
    items.push_back({rec.image_id, rec.identity, z.data()});
  }

  PipelineResult result;
  result.report = evaluate(items);
  result.test_top1 = result.report.accuracy;
  result.first_loss = trained.history.front().loss;
  result.final_loss = trained.history.back().loss;
  result.history = trained.history;
  return result;
}

double median(std::vector<double> values) {
  if (values.empty()) throw ContractError("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

namespace {

double run_once(SynthConfig synth_cfg, TrainConfig train_cfg, std::uint64_t seed,
                bool random_patches) {
  synth_cfg.seed = seed;
  train_cfg.seed = seed;
  align_vit(train_cfg, synth_cfg);
  SynthDataset ds = generate_synthetic(synth_cfg);
  return run_pipeline(ds, train_cfg, random_patches).test_top1;
}

void finish_row(AblationRow& row) { row.median = median(row.accuracies); }

}  // namespace

AblationTable ablate_modes(const SynthConfig& synth_cfg, const TrainConfig& train_cfg,
                           const std::vector<std::uint64_t>& seeds) {
  AblationTable table;
  table.name = "keypoint-mode";
  table.seeds = seeds;
  for (KeypointMode mode : {KeypointMode::none, KeypointMode::kpe, KeypointMode::ckpe}) {
    AblationRow row;
    row.setting = mode_name(mode);
    TrainConfig tc = train_cfg;
    tc.vit.mode = mode;
    for (std::uint64_t seed : seeds) row.accuracies.push_back(run_once(synth_cfg, tc, seed, false));
    finish_row(row);
    table.rows.push_back(std::move(row));
  }
  return table;
}

AblationTable ablate_num_keypoints(const SynthConfig& synth_cfg, const TrainConfig& train_cfg,
                                   const std::vector<std::size_t>& counts,
                                   const std::vector<std::uint64_t>& seeds) {
  AblationTable table;
  table.name = "num-keypoints";
  table.seeds = seeds;
  for (std::size_t count : counts) {
    AblationRow row;
    row.setting = std::to_string(count) + " keypoints";
    SynthConfig sc = synth_cfg;
    sc.n_keypoints = count;
    for (std::uint64_t seed : seeds)
      row.accuracies.push_back(run_once(sc, train_cfg, seed, false));
    finish_row(row);
    table.rows.push_back(std::move(row));
  }
  return table;
}

AblationTable ablate_random_vs_keypoints(const SynthConfig& synth_cfg,
                                         const TrainConfig& train_cfg,
                                         const std::vector<std::uint64_t>& seeds) {
  AblationTable table;
  table.name = "random-vs-keypoints";
  table.seeds = seeds;
  for (bool random_patches : {false, true}) {
    AblationRow row;
    row.setting = random_patches ? "random patches" : "propagated keypoints";
    for (std::uint64_t seed : seeds)
      row.accuracies.push_back(run_once(synth_cfg, train_cfg, seed, random_patches));
    finish_row(row);
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string AblationTable::to_text() const {
  std::string out = name + " (top-1 accuracy, " + std::to_string(seeds.size()) + " seeds)\n";
  std::size_t width = 8;
  for (const AblationRow& row : rows) width = std::max(width, row.setting.size());
  for (const AblationRow& row : rows) {
    out += row.setting;
    out.append(width - row.setting.size() + 2, ' ');
    out += "median=" + std::to_string(row.median) + "  runs=[";
    for (std::size_t i = 0; i < row.accuracies.size(); ++i) {
      if (i) out += ", ";
      out += std::to_string(row.accuracies[i]);
    }
    out += "]\n";
  }
  return out;
}

std::string AblationTable::to_json() const {
  json j;
  j["name"] = name;
  j["seeds"] = seeds;
  json rows_j = json::array();
  for (const AblationRow& row : rows) {
    json r;
    r["setting"] = row.setting;
    r["accuracies"] = row.accuracies;
    r["median"] = row.median;
    rows_j.push_back(std::move(r));
  }
  j["rows"] = std::move(rows_j);
  return j.dump(2);
}

}  // namespace kpr
