#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "kpreid/experiments.hpp"
#include "kpreid/propagation.hpp"
#include "kpreid/retrieval.hpp"
#include "kpreid/synth.hpp"
#include "kpreid/training.hpp"

using nlohmann::json;

namespace {

struct LoadedDataset {
  kpr::DatasetIndex index;
  std::vector<kpr::FeatureMap> features;  // parallel to index.images
};

LoadedDataset load_dataset(const std::string& dir) {
  LoadedDataset ds;
  ds.index = kpr::load_manifest(dir + "/manifest.json");
  for (const kpr::ImageRecord& rec : ds.index.images)
    ds.features.push_back(kpr::read_feature_map(dir + "/" + rec.feature_path));
  return ds;
}

// Per-image keypoint sets: the reference keeps its annotation, the rest are
// propagated from it. Parallel to index.images.
std::vector<kpr::KeypointSet> keypoints_for_all(const LoadedDataset& ds, const std::string& dir,
                                                const kpr::KeypointSet& reference) {
  std::vector<kpr::PropagationResult> propagated =
      kpr::propagate(reference.image_id, reference, ds.index, dir);
  std::vector<kpr::KeypointSet> out(ds.index.images.size());
  std::size_t next = 0;
  for (std::size_t i = 0; i < ds.index.images.size(); ++i) {
    out[i].image_id = ds.index.images[i].image_id;
    if (ds.index.images[i].image_id == reference.image_id) {
      out[i].keypoints = reference.keypoints;
      continue;
    }
    const kpr::PropagationResult& res = propagated[next++];
    for (const kpr::PropagatedKeypoint& kp : res.keypoints)
      out[i].keypoints.push_back({kp.x, kp.y, kp.category});
  }
  return out;
}

kpr::TrainConfig read_train_config(const std::string& path) {
  if (path.empty()) {
    kpr::TrainConfig cfg;
    return cfg;
  }
  return kpr::TrainConfig::from_json(kpr::read_file_bytes(path));
}

kpr::TrainData build_train_data(const LoadedDataset& ds,
                                const std::vector<kpr::KeypointSet>& keysets,
                                kpr::KeypointMode mode) {
  kpr::TrainData data;
  for (std::size_t i = 0; i < ds.index.images.size(); ++i) {
    const kpr::ImageRecord& rec = ds.index.images[i];
    if (rec.split != kpr::Split::train) continue;
    std::size_t label = data.identities.size();
    for (std::size_t l = 0; l < data.identities.size(); ++l)
      if (data.identities[l] == rec.identity) label = l;
    if (label == data.identities.size()) data.identities.push_back(rec.identity);
    data.features.push_back(&ds.features[i]);
    data.keypoints.push_back(mode == kpr::KeypointMode::none ? nullptr : &keysets[i]);
    data.labels.push_back(label);
  }
  return data;
}

void emit(const std::string& machine_json, const std::string& out_path,
          const std::string& human_text = "") {
  std::cout << machine_json << "\n";
  if (!out_path.empty()) {
    kpr::atomic_write_file(out_path, machine_json + "\n");
    if (!human_text.empty()) kpr::atomic_write_file(out_path + ".txt", human_text);
  }
}

int run(int argc, char** argv) {
  CLI::App app{"keypoint-propagated re-identification toolkit"};
  app.require_subcommand(1);

  // ---- synth ----
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
  kpr::SynthConfig synth_cfg;
  std::string synth_out;
  long long synth_keypoints = static_cast<long long>(synth_cfg.n_keypoints);
  synth_cmd->add_option("--out", synth_out, "output directory")->required();
  synth_cmd->add_option("--seed", synth_cfg.seed);
  synth_cmd->add_option("--identities", synth_cfg.n_identities);
  synth_cmd->add_option("--images-per-identity", synth_cfg.images_per_identity);
  synth_cmd->add_option("--channels", synth_cfg.channels);
  synth_cmd->add_option("--grid-width", synth_cfg.grid_width);
  synth_cmd->add_option("--grid-height", synth_cfg.grid_height);
  synth_cmd->add_option("--keypoints", synth_keypoints);
  synth_cmd->add_option("--image-width", synth_cfg.image_width);
  synth_cmd->add_option("--image-height", synth_cfg.image_height);
  synth_cmd->add_option("--patch-size", synth_cfg.patch_size);
  synth_cmd->add_option("--noise-scale", synth_cfg.noise_scale);
  synth_cmd->add_option("--signal-strength", synth_cfg.signal_strength);
  synth_cmd->add_option("--train-fraction", synth_cfg.train_fraction);

  // ---- propagate ----
  auto* prop_cmd = app.add_subcommand("propagate", "transfer reference keypoints to every image");
  std::string prop_data, prop_ref, prop_out;
  prop_cmd->add_option("--data", prop_data, "dataset directory")->required();
  prop_cmd->add_option("--ref-keypoints", prop_ref, "reference keypoint JSON")->required();
  prop_cmd->add_option("--out", prop_out, "output directory for per-image keypoint JSON")
      ->required();

  // ---- heatmap ----
  auto* heat_cmd = app.add_subcommand("heatmap", "export one keypoint's similarity map as PGM");
  std::string heat_data, heat_ref, heat_target, heat_out;
  std::size_t heat_index = 0;
  heat_cmd->add_option("--data", heat_data)->required();
  heat_cmd->add_option("--ref-keypoints", heat_ref)->required();
  heat_cmd->add_option("--target", heat_target, "target image id")->required();
  heat_cmd->add_option("--keypoint-index", heat_index);
  heat_cmd->add_option("--out", heat_out, "output PGM path")->required();

  // ---- train ----
  auto* train_cmd = app.add_subcommand("train", "train a re-identification model");
  std::string train_data_dir, train_ref, train_cfg_path, train_out;
  train_cmd->add_option("--data", train_data_dir)->required();
  train_cmd->add_option("--ref-keypoints", train_ref, "required unless mode is none");
  train_cmd->add_option("--config", train_cfg_path, "training config JSON");
  train_cmd->add_option("--out", train_out, "checkpoint/metrics directory")->required();

  // ---- eval ----
  auto* eval_cmd = app.add_subcommand("eval", "closed-set retrieval evaluation on the test split");
  std::string eval_data_dir, eval_ref, eval_cfg_path, eval_ckpt, eval_out;
  eval_cmd->add_option("--data", eval_data_dir)->required();
  eval_cmd->add_option("--ref-keypoints", eval_ref, "required unless mode is none");
  eval_cmd->add_option("--config", eval_cfg_path, "training config JSON");
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--out", eval_out, "report JSON path");

  // ---- ablate ----
  auto* abl_cmd = app.add_subcommand("ablate", "run an ablation protocol");
  std::string abl_protocol, abl_cfg_path, abl_out;
  std::size_t abl_seeds = 5;
  kpr::SynthConfig abl_synth;
  abl_cmd->add_option("--protocol", abl_protocol, "modes | keypoints | random")->required();
  abl_cmd->add_option("--config", abl_cfg_path, "training config JSON");
  abl_cmd->add_option("--seeds", abl_seeds, "number of seeds");
  std::uint64_t abl_seed_base = 1;
  abl_cmd->add_option("--seed-base", abl_seed_base, "first seed");
  abl_cmd->add_option("--identities", abl_synth.n_identities);
  abl_cmd->add_option("--images-per-identity", abl_synth.images_per_identity);
  abl_cmd->add_option("--signal-strength", abl_synth.signal_strength);
  abl_cmd->add_option("--noise-scale", abl_synth.noise_scale);
  abl_cmd->add_option("--channels", abl_synth.channels);
  abl_cmd->add_option("--grid-width", abl_synth.grid_width);
  abl_cmd->add_option("--grid-height", abl_synth.grid_height);
  abl_cmd->add_option("--image-width", abl_synth.image_width);
  abl_cmd->add_option("--image-height", abl_synth.image_height);
  abl_cmd->add_option("--patch-size", abl_synth.patch_size);
  abl_cmd->add_option("--keypoints", abl_synth.n_keypoints);
  abl_cmd->add_option("--out", abl_out, "result JSON path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  if (synth_cmd->parsed()) {
    if (synth_keypoints < 1) throw kpr::ValidationError("keypoints must be >= 1");
    synth_cfg.n_keypoints = static_cast<std::size_t>(synth_keypoints);
    kpr::SynthDataset ds = kpr::generate_synthetic(synth_cfg);
    kpr::write_synth_dataset(synth_out, ds);
    json j;
    j["out"] = synth_out;
    j["images"] = ds.index.images.size();
    j["identities"] = synth_cfg.n_identities;
    j["keypoints"] = synth_cfg.n_keypoints;
    j["reference_id"] = ds.reference_id;
    j["similarity_gap"] = ds.similarity_gap;
    j["noise_bound"] = ds.noise_bound;
    std::cout << j.dump(2) << "\n";
    return 0;
  }

  if (prop_cmd->parsed()) {
    LoadedDataset ds = load_dataset(prop_data);
    kpr::KeypointSet reference = kpr::load_keypoints(prop_ref);
    std::vector<kpr::PropagationResult> results =
        kpr::propagate(reference.image_id, reference, ds.index, prop_data);
    json j;
    j["reference_id"] = reference.image_id;
    json images = json::array();
    for (const kpr::PropagationResult& res : results) {
      kpr::KeypointSet set;
      set.image_id = res.image_id;
      json kps = json::array();
      for (const kpr::PropagatedKeypoint& kp : res.keypoints) {
        set.keypoints.push_back({kp.x, kp.y, kp.category});
        kps.push_back({{"x", kp.x},
                       {"y", kp.y},
                       {"category", kp.category},
                       {"cell_x", kp.cell.x},
                       {"cell_y", kp.cell.y},
                       {"peak_similarity", kp.peak_similarity}});
      }
      kpr::save_keypoints(prop_out + "/" + res.image_id + ".json", set);
      images.push_back({{"image_id", res.image_id}, {"keypoints", std::move(kps)}});
    }
    j["images"] = std::move(images);
    std::cout << j.dump(2) << "\n";
    return 0;
  }

  if (heat_cmd->parsed()) {
    LoadedDataset ds = load_dataset(heat_data);
    kpr::KeypointSet reference = kpr::load_keypoints(heat_ref);
    if (heat_index >= reference.keypoints.size())
      throw kpr::ValidationError("keypoint index " + std::to_string(heat_index) +
                                 " out of range for " +
                                 std::to_string(reference.keypoints.size()) + " keypoints");
    const kpr::ImageRecord* ref_rec = ds.index.find(reference.image_id);
    if (!ref_rec)
      throw kpr::ValidationError("reference image \"" + reference.image_id +
                                 "\" not in the manifest");
    const kpr::ImageRecord* target_rec = ds.index.find(heat_target);
    if (!target_rec)
      throw kpr::ValidationError("target image \"" + heat_target + "\" not in the manifest");

    std::size_t ref_i = 0, target_i = 0;
    for (std::size_t i = 0; i < ds.index.images.size(); ++i) {
      if (ds.index.images[i].image_id == reference.image_id) ref_i = i;
      if (ds.index.images[i].image_id == heat_target) target_i = i;
    }
    kpr::NormalizedFeatureMap ref_norm = kpr::normalize_features(ds.features[ref_i]);
    const kpr::Keypoint& kp = reference.keypoints[heat_index];
    kpr::Cell cell = kpr::pixel_to_cell(kp.x, kp.y, ref_rec->image_width, ref_rec->image_height,
                                        ref_norm.width, ref_norm.height);
    kpr::SimilarityMap map = kpr::similarity_map(ref_norm.vector_at(cell.y, cell.x),
                                                 kpr::normalize_features(ds.features[target_i]));
    kpr::export_heatmap(map, heat_out);
    kpr::ArgmaxResult best = kpr::argmax_cell(map);
    json j;
    j["out"] = heat_out;
    j["target"] = heat_target;
    j["keypoint_index"] = heat_index;
    j["argmax"] = {{"x", best.cell.x}, {"y", best.cell.y}, {"peak", best.peak}};
    std::cout << j.dump(2) << "\n";
    return 0;
  }

  if (train_cmd->parsed()) {
    kpr::TrainConfig cfg = read_train_config(train_cfg_path);
    LoadedDataset ds = load_dataset(train_data_dir);
    std::vector<kpr::KeypointSet> keysets;
    if (cfg.vit.mode != kpr::KeypointMode::none) {
      if (train_ref.empty())
        throw kpr::ValidationError("mode " + kpr::mode_name(cfg.vit.mode) +
                                   " requires --ref-keypoints");
      keysets = keypoints_for_all(ds, train_data_dir, kpr::load_keypoints(train_ref));
    }
    kpr::TrainData data = build_train_data(ds, keysets, cfg.vit.mode);
    kpr::TrainResult result = kpr::train(cfg, data, train_out);
    json j;
    j["out"] = train_out;
    j["epochs"] = cfg.epochs;
    j["steps"] = result.steps;
    j["final_loss"] = result.history.back().loss;
    j["final_train_top1"] = result.history.back().train_top1;
    std::cout << j.dump(2) << "\n";
    return 0;
  }

  if (eval_cmd->parsed()) {
    kpr::TrainConfig cfg = read_train_config(eval_cfg_path);
    LoadedDataset ds = load_dataset(eval_data_dir);
    kpr::Checkpoint ckpt = kpr::load_checkpoint(eval_ckpt);
    const kpr::Tensor* arc = ckpt.find("arc_weights");
    if (!arc) throw kpr::ValidationError("checkpoint has no \"arc_weights\" tensor");
    kpr::Rng rng(cfg.seed);
    kpr::ModelParams params = kpr::ModelParams::init(cfg.vit, arc->rows(), rng, kpr::DType::f32);
    kpr::params_from_checkpoint(params, ckpt);

    std::vector<kpr::KeypointSet> keysets;
    if (cfg.vit.mode != kpr::KeypointMode::none) {
      if (eval_ref.empty())
        throw kpr::ValidationError("mode " + kpr::mode_name(cfg.vit.mode) +
                                   " requires --ref-keypoints");
      keysets = keypoints_for_all(ds, eval_data_dir, kpr::load_keypoints(eval_ref));
    }
    std::vector<kpr::EvalItem> items;
    for (std::size_t i = 0; i < ds.index.images.size(); ++i) {
      const kpr::ImageRecord& rec = ds.index.images[i];
      if (rec.split != kpr::Split::test) continue;
      const kpr::KeypointSet* kps =
          cfg.vit.mode == kpr::KeypointMode::none ? nullptr : &keysets[i];
      kpr::Tensor z = kpr::embed(params, ds.features[i], kps);
      items.push_back({rec.image_id, rec.identity, z.data()});
    }
    kpr::EvalReport report = kpr::evaluate(items);
    emit(report.to_json(), eval_out);
    return 0;
  }

  if (abl_cmd->parsed()) {
    kpr::TrainConfig cfg = read_train_config(abl_cfg_path);
    if (abl_seeds == 0) throw kpr::ValidationError("seeds must be >= 1");
    std::vector<std::uint64_t> seeds;
    for (std::size_t s = 0; s < abl_seeds; ++s) seeds.push_back(abl_seed_base + s);
    kpr::AblationTable table;
    if (abl_protocol == "modes") {
      table = kpr::ablate_modes(abl_synth, cfg, seeds);
    } else if (abl_protocol == "keypoints") {
      table = kpr::ablate_num_keypoints(abl_synth, cfg, {1, 3, 6, 10}, seeds);
    } else if (abl_protocol == "random") {
      table = kpr::ablate_random_vs_keypoints(abl_synth, cfg, seeds);
    } else {
      throw kpr::ValidationError("unknown ablation protocol \"" + abl_protocol +
                                 "\" (expected modes, keypoints or random)");
    }
    emit(table.to_json(), abl_out, table.to_text());
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const kpr::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
