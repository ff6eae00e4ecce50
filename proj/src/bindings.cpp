#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>
#include <vector>

#include "json.hpp"
#include "kpreid/experiments.hpp"
#include "kpreid/model.hpp"
#include "kpreid/propagation.hpp"
#include "kpreid/retrieval.hpp"
#include "kpreid/synth.hpp"
#include "kpreid/training.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

kpr::FeatureMap map_from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& arr) {
  if (arr.ndim() != 3) throw kpr::ValidationError("feature array must be [channels, height, width]");
  kpr::FeatureMap m;
  m.channels = static_cast<std::size_t>(arr.shape(0));
  m.height = static_cast<std::size_t>(arr.shape(1));
  m.width = static_cast<std::size_t>(arr.shape(2));
  m.values.assign(arr.data(), arr.data() + arr.size());
  m.validate();
  return m;
}

py::array_t<float> array_from_map(const kpr::FeatureMap& m) {
  py::array_t<float> arr({m.channels, m.height, m.width});
  std::copy(m.values.begin(), m.values.end(), arr.mutable_data());
  return arr;
}

kpr::KeypointSet keypoints_from_list(const std::vector<std::tuple<long, long, std::size_t>>& kps) {
  kpr::KeypointSet set;
  for (const auto& [x, y, c] : kps) set.keypoints.push_back({x, y, c});
  return set;
}

struct LoadedDataset {
  kpr::DatasetIndex index;
  std::vector<kpr::FeatureMap> features;
};

LoadedDataset load_dataset(const std::string& dir) {
  LoadedDataset ds;
  ds.index = kpr::load_manifest(dir + "/manifest.json");
  for (const kpr::ImageRecord& rec : ds.index.images)
    ds.features.push_back(kpr::read_feature_map(dir + "/" + rec.feature_path));
  return ds;
}

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
    for (const kpr::PropagatedKeypoint& kp : propagated[next++].keypoints)
      out[i].keypoints.push_back({kp.x, kp.y, kp.category});
  }
  return out;
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

kpr::TrainConfig parse_train_config(const std::string& config_json) {
  if (config_json.empty()) return kpr::TrainConfig{};
  return kpr::TrainConfig::from_json(config_json);
}

kpr::ModelParams params_from_checkpoint_file(const kpr::TrainConfig& cfg,
                                             const std::string& checkpoint_path) {
  kpr::Checkpoint ckpt = kpr::load_checkpoint(checkpoint_path);
  const kpr::Tensor* arc = ckpt.find("arc_weights");
  if (!arc) throw kpr::ValidationError("checkpoint has no \"arc_weights\" tensor");
  kpr::Rng rng(cfg.seed);
  kpr::ModelParams params = kpr::ModelParams::init(cfg.vit, arc->rows(), rng, kpr::DType::f32);
  kpr::params_from_checkpoint(params, ckpt);
  return params;
}

}  // namespace

PYBIND11_MODULE(_kpreid, m) {
  m.doc() = "keypoint-propagated re-identification core";

  py::register_exception<kpr::ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<kpr::IoError>(m, "IoError", PyExc_IOError);

  m.def(
      "generate_dataset",
      [](const std::string& out_dir, std::uint64_t seed, std::size_t identities,
         std::size_t images_per_identity, std::size_t channels, std::size_t grid_width,
         std::size_t grid_height, std::size_t keypoints, std::size_t image_width,
         std::size_t image_height, std::size_t patch_size, double noise_scale,
         double signal_strength, double train_fraction) {
        kpr::SynthConfig cfg;
        cfg.seed = seed;
        cfg.n_identities = identities;
        cfg.images_per_identity = images_per_identity;
        cfg.channels = channels;
        cfg.grid_width = grid_width;
        cfg.grid_height = grid_height;
        cfg.n_keypoints = keypoints;
        cfg.image_width = image_width;
        cfg.image_height = image_height;
        cfg.patch_size = patch_size;
        cfg.noise_scale = noise_scale;
        cfg.signal_strength = signal_strength;
        cfg.train_fraction = train_fraction;
        kpr::SynthDataset ds = kpr::generate_synthetic(cfg);
        kpr::write_synth_dataset(out_dir, ds);
        json j;
        j["out"] = out_dir;
        j["images"] = ds.index.images.size();
        j["reference_id"] = ds.reference_id;
        j["similarity_gap"] = ds.similarity_gap;
        j["noise_bound"] = ds.noise_bound;
        return j.dump();
      },
      py::arg("out_dir"), py::arg("seed") = 1, py::arg("identities") = 10,
      py::arg("images_per_identity") = 20, py::arg("channels") = 16, py::arg("grid_width") = 16,
      py::arg("grid_height") = 16, py::arg("keypoints") = 3, py::arg("image_width") = 32,
      py::arg("image_height") = 32, py::arg("patch_size") = 8, py::arg("noise_scale") = 1.0,
      py::arg("signal_strength") = 0.25, py::arg("train_fraction") = 0.8);

  m.def(
      "propagate",
      [](const std::string& data_dir, const std::string& ref_keypoints_path) {
        LoadedDataset ds = load_dataset(data_dir);
        kpr::KeypointSet reference = kpr::load_keypoints(ref_keypoints_path);
        std::vector<kpr::PropagationResult> results =
            kpr::propagate(reference.image_id, reference, ds.index, data_dir);
        json j;
        j["reference_id"] = reference.image_id;
        json images = json::array();
        for (const kpr::PropagationResult& res : results) {
          json kps = json::array();
          for (const kpr::PropagatedKeypoint& kp : res.keypoints)
            kps.push_back({{"x", kp.x},
                           {"y", kp.y},
                           {"category", kp.category},
                           {"cell_x", kp.cell.x},
                           {"cell_y", kp.cell.y},
                           {"peak_similarity", kp.peak_similarity}});
          images.push_back({{"image_id", res.image_id}, {"keypoints", std::move(kps)}});
        }
        j["images"] = std::move(images);
        return j.dump();
      },
      py::arg("data_dir"), py::arg("ref_keypoints_path"));

  m.def(
      "similarity_map",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& reference,
         std::size_t cell_x, std::size_t cell_y,
         const py::array_t<float, py::array::c_style | py::array::forcecast>& target) {
        kpr::NormalizedFeatureMap ref_n = kpr::normalize_features(map_from_array(reference));
        kpr::NormalizedFeatureMap tgt_n = kpr::normalize_features(map_from_array(target));
        if (cell_x >= ref_n.width || cell_y >= ref_n.height)
          throw kpr::ValidationError("cell out of range");
        kpr::SimilarityMap sim = kpr::similarity_map(ref_n.vector_at(cell_y, cell_x), tgt_n);
        py::array_t<double> out({sim.height, sim.width});
        std::copy(sim.values.begin(), sim.values.end(), out.mutable_data());
        return out;
      },
      py::arg("reference"), py::arg("cell_x"), py::arg("cell_y"), py::arg("target"));

  m.def(
      "argmax_cell",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& sim) {
        if (sim.ndim() != 2) throw kpr::ValidationError("similarity map must be 2-d");
        kpr::SimilarityMap map;
        map.height = static_cast<std::size_t>(sim.shape(0));
        map.width = static_cast<std::size_t>(sim.shape(1));
        map.values.assign(sim.data(), sim.data() + sim.size());
        kpr::ArgmaxResult r = kpr::argmax_cell(map);
        return py::make_tuple(r.cell.x, r.cell.y, r.peak);
      },
      py::arg("similarity"));

  m.def(
      "read_feature_map",
      [](const std::string& path) { return array_from_map(kpr::read_feature_map(path)); },
      py::arg("path"));

  m.def(
      "write_feature_map",
      [](const std::string& path,
         const py::array_t<float, py::array::c_style | py::array::forcecast>& arr) {
        kpr::write_feature_map(path, map_from_array(arr));
      },
      py::arg("path"), py::arg("features"));

  m.def("default_train_config", [] { return kpr::TrainConfig{}.to_json(); });

  m.def(
      "train",
      [](const std::string& data_dir, const std::string& out_dir, const std::string& config_json,
         const std::string& ref_keypoints_path) {
        kpr::TrainConfig cfg = parse_train_config(config_json);
        LoadedDataset ds = load_dataset(data_dir);
        std::vector<kpr::KeypointSet> keysets;
        if (cfg.vit.mode != kpr::KeypointMode::none) {
          if (ref_keypoints_path.empty())
            throw kpr::ValidationError("mode " + kpr::mode_name(cfg.vit.mode) +
                                       " requires reference keypoints");
          keysets = keypoints_for_all(ds, data_dir, kpr::load_keypoints(ref_keypoints_path));
        }
        kpr::TrainData data = build_train_data(ds, keysets, cfg.vit.mode);
        kpr::TrainResult result = kpr::train(cfg, data, out_dir);
        json j;
        j["out"] = out_dir;
        j["steps"] = result.steps;
        json hist = json::array();
        for (const kpr::EpochMetrics& e : result.history)
          hist.push_back({{"epoch", e.epoch},
                          {"loss", e.loss},
                          {"loss_reid", e.loss_reid},
                          {"loss_ce", e.loss_ce},
                          {"train_top1", e.train_top1}});
        j["history"] = std::move(hist);
        j["final_loss"] = result.history.back().loss;
        j["final_train_top1"] = result.history.back().train_top1;
        return j.dump();
      },
      py::arg("data_dir"), py::arg("out_dir"), py::arg("config_json") = "",
      py::arg("ref_keypoints_path") = "");

  m.def(
      "evaluate",
      [](const std::string& data_dir, const std::string& checkpoint_path,
         const std::string& config_json, const std::string& ref_keypoints_path) {
        kpr::TrainConfig cfg = parse_train_config(config_json);
        LoadedDataset ds = load_dataset(data_dir);
        kpr::ModelParams params = params_from_checkpoint_file(cfg, checkpoint_path);
        std::vector<kpr::KeypointSet> keysets;
        if (cfg.vit.mode != kpr::KeypointMode::none) {
          if (ref_keypoints_path.empty())
            throw kpr::ValidationError("mode " + kpr::mode_name(cfg.vit.mode) +
                                       " requires reference keypoints");
          keysets = keypoints_for_all(ds, data_dir, kpr::load_keypoints(ref_keypoints_path));
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
        return kpr::evaluate(items).to_json();
      },
      py::arg("data_dir"), py::arg("checkpoint_path"), py::arg("config_json") = "",
      py::arg("ref_keypoints_path") = "");

  m.def(
      "embed",
      [](const std::string& checkpoint_path, const std::string& config_json,
         const py::array_t<float, py::array::c_style | py::array::forcecast>& features,
         const std::vector<std::tuple<long, long, std::size_t>>& keypoints) {
        kpr::TrainConfig cfg = parse_train_config(config_json);
        kpr::ModelParams params = params_from_checkpoint_file(cfg, checkpoint_path);
        kpr::FeatureMap map = map_from_array(features);
        kpr::KeypointSet set = keypoints_from_list(keypoints);
        const kpr::KeypointSet* kps = cfg.vit.mode == kpr::KeypointMode::none ? nullptr : &set;
        kpr::Tensor z = kpr::embed(params, map, kps);
        py::array_t<double> out(z.size());
        std::copy(z.data().begin(), z.data().end(), out.mutable_data());
        return out;
      },
      py::arg("checkpoint_path"), py::arg("config_json"), py::arg("features"),
      py::arg("keypoints") = std::vector<std::tuple<long, long, std::size_t>>{});

  m.def(
      "ablate",
      [](const std::string& protocol, const std::string& config_json, std::size_t n_seeds,
         std::uint64_t seed_base, std::size_t identities, std::size_t images_per_identity,
         std::size_t channels, std::size_t grid_width, std::size_t grid_height,
         std::size_t keypoints, std::size_t image_width, std::size_t image_height,
         std::size_t patch_size, double noise_scale, double signal_strength) {
        kpr::TrainConfig cfg = parse_train_config(config_json);
        kpr::SynthConfig synth_cfg;
        synth_cfg.n_identities = identities;
        synth_cfg.images_per_identity = images_per_identity;
        synth_cfg.channels = channels;
        synth_cfg.grid_width = grid_width;
        synth_cfg.grid_height = grid_height;
        synth_cfg.n_keypoints = keypoints;
        synth_cfg.image_width = image_width;
        synth_cfg.image_height = image_height;
        synth_cfg.patch_size = patch_size;
        synth_cfg.noise_scale = noise_scale;
        synth_cfg.signal_strength = signal_strength;
        if (n_seeds == 0) throw kpr::ValidationError("seeds must be >= 1");
        std::vector<std::uint64_t> seeds;
        for (std::size_t s = 0; s < n_seeds; ++s) seeds.push_back(seed_base + s);
        kpr::AblationTable table;
        if (protocol == "modes")
          table = kpr::ablate_modes(synth_cfg, cfg, seeds);
        else if (protocol == "keypoints")
          table = kpr::ablate_num_keypoints(synth_cfg, cfg, {1, 3, 6, 10}, seeds);
        else if (protocol == "random")
          table = kpr::ablate_random_vs_keypoints(synth_cfg, cfg, seeds);
        else
          throw kpr::ValidationError("unknown ablation protocol \"" + protocol +
                                     "\" (expected modes, keypoints or random)");
        return table.to_json();
      },
      py::arg("protocol"), py::arg("config_json") = "", py::arg("seeds") = 5,
      py::arg("seed_base") = 1, py::arg("identities") = 10, py::arg("images_per_identity") = 20,
      py::arg("channels") = 16, py::arg("grid_width") = 16, py::arg("grid_height") = 16,
      py::arg("keypoints") = 3, py::arg("image_width") = 32, py::arg("image_height") = 32,
      py::arg("patch_size") = 8, py::arg("noise_scale") = 1.0, py::arg("signal_strength") = 0.25);
}
