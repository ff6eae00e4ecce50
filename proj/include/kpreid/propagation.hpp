#pragma once

#include <string>
#include <vector>

#include "kpreid/featureio.hpp"

namespace kpr {

struct Cell {
  std::size_t x = 0;
  std::size_t y = 0;
  bool operator==(const Cell&) const = default;
};

// Same layout as FeatureMap but held in doubles; every nonzero spatial
// location carries a unit-length channel vector.
struct NormalizedFeatureMap {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // [C][H][W]

  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return values[(c * height + y) * width + x];
  }
  std::vector<double> vector_at(std::size_t y, std::size_t x) const;
};

struct SimilarityMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // [H][W], in [-1, 1] up to numeric slack

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

struct ArgmaxResult {
  Cell cell;
  double peak = 0.0;
};

struct PropagatedKeypoint {
  std::size_t category = 0;
  Cell cell;
  long x = 0;  // pixel estimate: cell center
  long y = 0;
  double peak_similarity = 0.0;
};

struct PropagationResult {
  std::string image_id;
  std::vector<PropagatedKeypoint> keypoints;
};

// Divides each location by max(||v||, eps); locations with ||v|| <= eps
// become all-zero.
NormalizedFeatureMap normalize_features(const FeatureMap& map, double eps = 1e-8);

// Resolution bridge between pixel coordinates and the feature grid.
Cell pixel_to_cell(long px, long py, std::size_t image_width, std::size_t image_height,
                   std::size_t feature_width, std::size_t feature_height);
std::pair<long, long> cell_to_pixel(Cell cell, std::size_t image_width, std::size_t image_height,
                                    std::size_t feature_width, std::size_t feature_height);

SimilarityMap similarity_map(const std::vector<double>& v_hat,
                             const NormalizedFeatureMap& target);

// Ties break at the smallest row-major index (smallest y, then smallest x).
ArgmaxResult argmax_cell(const SimilarityMap& map);

// Propagates every reference keypoint to every non-reference image of the
// dataset. Feature paths resolve relative to root_dir. Output follows
// manifest order.
std::vector<PropagationResult> propagate(const std::string& reference_id,
                                         const KeypointSet& ref_keypoints,
                                         const DatasetIndex& index, const std::string& root_dir);

// 8-bit grayscale PGM (P5), min -> 0 and max -> 255; constant maps are 128.
void export_heatmap(const SimilarityMap& map, const std::string& path);

}  // namespace kpr
