#include "kpreid/propagation.hpp"

#include <cmath>
#include <filesystem>

namespace fs = std::filesystem;

namespace kpr {

std::vector<double> NormalizedFeatureMap::vector_at(std::size_t y, std::size_t x) const {
  std::vector<double> v(channels);
  for (std::size_t c = 0; c < channels; ++c) v[c] = at(c, y, x);
  return v;
}

NormalizedFeatureMap normalize_features(const FeatureMap& map, double eps) {
  map.validate();
  NormalizedFeatureMap out;
  out.channels = map.channels;
  out.height = map.height;
  out.width = map.width;
  out.values.assign(map.values.size(), 0.0);
  for (std::size_t y = 0; y < map.height; ++y)
    for (std::size_t x = 0; x < map.width; ++x) {
      double norm_sq = 0.0;
      for (std::size_t c = 0; c < map.channels; ++c) {
        const double v = static_cast<double>(map.at(c, y, x));
        norm_sq += v * v;
      }
      const double norm = std::sqrt(norm_sq);
      if (norm <= eps) continue;  // degenerate location stays all-zero
      for (std::size_t c = 0; c < map.channels; ++c)
        out.values[(c * out.height + y) * out.width + x] =
            static_cast<double>(map.at(c, y, x)) / norm;
    }
  return out;
}

Cell pixel_to_cell(long px, long py, std::size_t image_width, std::size_t image_height,
                   std::size_t feature_width, std::size_t feature_height) {
  if (px < 0 || py < 0 || px >= static_cast<long>(image_width) ||
      py >= static_cast<long>(image_height))
    throw ContractError("pixel (" + std::to_string(px) + ", " + std::to_string(py) +
                        ") outside image bounds " + std::to_string(image_width) + "x" +
                        std::to_string(image_height));
  Cell cell;
  cell.x = static_cast<std::size_t>(px) * feature_width / image_width;
  cell.y = static_cast<std::size_t>(py) * feature_height / image_height;
  return cell;
}

std::pair<long, long> cell_to_pixel(Cell cell, std::size_t image_width, std::size_t image_height,
                                    std::size_t feature_width, std::size_t feature_height) {
  // cell-center convention: floor((x_f + 0.5) * image_width / feature_width)
  const long px = static_cast<long>(
      std::floor((static_cast<double>(cell.x) + 0.5) * static_cast<double>(image_width) /
                 static_cast<double>(feature_width)));
  const long py = static_cast<long>(
      std::floor((static_cast<double>(cell.y) + 0.5) * static_cast<double>(image_height) /
                 static_cast<double>(feature_height)));
  return {px, py};
}

SimilarityMap similarity_map(const std::vector<double>& v_hat, const NormalizedFeatureMap& target) {
  if (v_hat.size() != target.channels)
    throw DimensionError("similarity_map: vector has " + std::to_string(v_hat.size()) +
                         " channels, target has " + std::to_string(target.channels));
  SimilarityMap out;
  out.height = target.height;
  out.width = target.width;
  out.values.assign(out.height * out.width, 0.0);
  for (std::size_t c = 0; c < target.channels; ++c) {
    const double vc = v_hat[c];
    if (vc == 0.0) continue;
    const double* plane = target.values.data() + c * out.height * out.width;
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += vc * plane[i];
  }
  return out;
}

ArgmaxResult argmax_cell(const SimilarityMap& map) {
  if (map.values.empty()) throw ContractError("argmax_cell: empty similarity map");
  std::size_t best = 0;
  for (std::size_t i = 1; i < map.values.size(); ++i)
    if (map.values[i] > map.values[best]) best = i;
  ArgmaxResult res;
  res.cell.y = best / map.width;
  res.cell.x = best % map.width;
  res.peak = map.values[best];
  return res;
}

std::vector<PropagationResult> propagate(const std::string& reference_id,
                                         const KeypointSet& ref_keypoints,
                                         const DatasetIndex& index, const std::string& root_dir) {
  index.validate();
  const ImageRecord* ref = index.find(reference_id);
  if (!ref) throw ValidationError("reference image \"" + reference_id + "\" not in manifest");

  auto feature_file = [&](const ImageRecord& rec) {
    return (fs::path(root_dir) / rec.feature_path).string();
  };
  const std::string ref_path = feature_file(*ref);
  if (!fs::exists(ref_path))
    throw IoError("missing feature map for reference image \"" + reference_id + "\": " + ref_path);
  const FeatureMap ref_map = read_feature_map(ref_path);
  const NormalizedFeatureMap ref_norm = normalize_features(ref_map);

  // reference keypoint vectors, normalized
  std::vector<std::vector<double>> v_hats;
  std::vector<Cell> ref_cells;
  for (const Keypoint& kp : ref_keypoints.keypoints) {
    Cell cell = pixel_to_cell(kp.x, kp.y, ref->image_width, ref->image_height, ref_map.width,
                              ref_map.height);
    ref_cells.push_back(cell);
    v_hats.push_back(ref_norm.vector_at(cell.y, cell.x));
  }

  std::vector<PropagationResult> results;
  for (const ImageRecord& rec : index.images) {
    if (rec.image_id == reference_id) continue;
    const std::string path = feature_file(rec);
    if (!fs::exists(path))
      throw IoError("missing feature map for image \"" + rec.image_id + "\": " + path);
    const FeatureMap target = read_feature_map(path);
    if (target.channels != ref_map.channels)
      throw DimensionError("channel mismatch: reference has " +
                           std::to_string(ref_map.channels) + " channels, \"" + rec.image_id +
                           "\" has " + std::to_string(target.channels));
    const NormalizedFeatureMap target_norm = normalize_features(target);

    PropagationResult result;
    result.image_id = rec.image_id;
    for (std::size_t i = 0; i < v_hats.size(); ++i) {
      const SimilarityMap sim = similarity_map(v_hats[i], target_norm);
      const ArgmaxResult best = argmax_cell(sim);
      PropagatedKeypoint out;
      out.category = ref_keypoints.keypoints[i].category;
      out.cell = best.cell;
      auto [px, py] = cell_to_pixel(best.cell, rec.image_width, rec.image_height, target.width,
                                    target.height);
      out.x = px;
      out.y = py;
      out.peak_similarity = best.peak;
      result.keypoints.push_back(out);
    }
    results.push_back(std::move(result));
  }
  return results;
}

void export_heatmap(const SimilarityMap& map, const std::string& path) {
  double lo = map.values[0], hi = map.values[0];
  for (double v : map.values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::string bytes = "P5\n" + std::to_string(map.width) + " " + std::to_string(map.height) +
                      "\n255\n";
  for (double v : map.values) {
    int byte = hi > lo ? static_cast<int>(std::floor((v - lo) / (hi - lo) * 255.0 + 0.5)) : 128;
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(byte)));
  }
  atomic_write_file(path, bytes);
}

}  // namespace kpr
