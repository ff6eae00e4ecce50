#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kpreid/errors.hpp"
#include "kpreid/tensor.hpp"

namespace kpr {

// Dense C x H_f x W_f feature grid at feature resolution, generally coarser
// than the image pixels it was extracted from.
struct FeatureMap {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> values;  // [C][H][W]

  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return values[(c * height + y) * width + x];
  }
  float& at(std::size_t c, std::size_t y, std::size_t x) {
    return values[(c * height + y) * width + x];
  }
  void validate() const;
};

enum class Split { train, test };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

struct ImageRecord {
  std::string image_id;
  std::string identity;
  Split split = Split::train;
  std::size_t image_width = 0;
  std::size_t image_height = 0;
  std::string feature_path;  // relative to the manifest's directory
};

struct DatasetIndex {
  std::size_t patch_size = 0;
  std::vector<std::string> categories;
  std::vector<ImageRecord> images;

  const ImageRecord* find(const std::string& image_id) const;
  std::vector<const ImageRecord*> split_images(Split s) const;
  // Enforces unique ids, identity-disjoint splits, patch divisibility and a
  // nonempty image list; violations throw, they are never warnings.
  void validate() const;
};

struct Keypoint {
  long x = 0;
  long y = 0;
  std::size_t category = 0;
};

struct KeypointSet {
  std::string image_id;
  std::vector<Keypoint> keypoints;
};

// ---- feature map binary format ("FMAP") ----
FeatureMap read_feature_map(const std::string& path);
void write_feature_map(const std::string& path, const FeatureMap& map);

// ---- manifest / keypoint JSON ----
DatasetIndex load_manifest(const std::string& path);
void save_manifest(const std::string& path, const DatasetIndex& index);
KeypointSet load_keypoints(const std::string& path);
void save_keypoints(const std::string& path, const KeypointSet& set);

// ---- checkpoint binary format ("CKPT") ----
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;  // f32 payloads
  std::uint64_t step = 0;
  std::uint64_t rng_state = 0;

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Writes bytes to a temp file in the same directory, then renames.
void atomic_write_file(const std::string& path, const std::string& bytes);
std::string read_file_bytes(const std::string& path);

}  // namespace kpr
