#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kpreid/featureio.hpp"
#include "kpreid/propagation.hpp"
#include "kpreid/rng.hpp"

namespace kpr {

// Spatial rearrangement applied to a base feature map. `apply` maps a base
// cell to its location in the deformed map.
struct Deformation {
  enum class Kind { none, hflip, permutation, translation };

  Kind kind = Kind::none;
  long dx = 0;  // translation, wraps
  long dy = 0;
  std::vector<std::uint32_t> perm;  // permutation: source linear index -> destination

  Cell apply(Cell cell, std::size_t width, std::size_t height) const;
  static std::string kind_name(Kind k);
  static Kind kind_from_name(const std::string& name);
};

struct TruthKeypoint {
  std::size_t category = 0;
  Cell cell;   // true feature cell in the deformed map
  long x = 0;  // cell-center pixel
  long y = 0;
};

struct ImageTruth {
  std::string image_id;
  Deformation deformation;
  std::vector<TruthKeypoint> keypoints;
};

struct SynthGroundTruth {
  std::string reference_id;
  std::vector<ImageTruth> images;
};

struct SynthConfig {
  std::uint64_t seed = 1;
  std::size_t n_identities = 10;
  std::size_t images_per_identity = 20;
  std::size_t channels = 16;
  std::size_t grid_height = 16;
  std::size_t grid_width = 16;
  std::size_t n_keypoints = 3;
  std::size_t image_width = 32;
  std::size_t image_height = 32;
  std::size_t patch_size = 8;
  std::vector<Deformation::Kind> deformation_kinds = {
      Deformation::Kind::hflip, Deformation::Kind::permutation, Deformation::Kind::translation};
  double noise_scale = 1.0;      // in [0, 1], scales the derived noise bound
  double signal_strength = 0.25; // identity-signal fraction inside keypoint patches
  double train_fraction = 0.8;   // identity-level split

  void validate() const;
};

struct SynthDataset {
  DatasetIndex index;
  std::vector<FeatureMap> features;  // parallel to index.images
  KeypointSet reference;             // pixel-space annotation of the reference image
  SynthGroundTruth truth;
  std::string reference_id;
  double noise_bound = 0.0;      // derived per-element bound actually used
  double similarity_gap = 0.0;   // worst-case noiseless argmax margin
};

// Deterministic under the seed. Feature maps are deformations of a shared
// base grid of well-separated unit vectors; an identity-specific signal is
// mixed into the cells of the patches containing the true keypoints. The
// noise bound is derived from the measured argmax margin so keypoint
// propagation is exact by construction.
SynthDataset generate_synthetic(const SynthConfig& cfg);

// Layout: manifest.json, features/<image_id>.fmap, ref_keypoints.json,
// ground_truth.json.
void write_synth_dataset(const std::string& dir, const SynthDataset& ds);

SynthGroundTruth load_ground_truth(const std::string& path);
void save_ground_truth(const std::string& path, const SynthGroundTruth& truth);

// Checks that replaying each recorded deformation on the reference keypoint
// cells reproduces the stored true cells exactly.
bool verify_ground_truth(const SynthGroundTruth& truth, const KeypointSet& reference,
                         const DatasetIndex& index, std::size_t grid_width,
                         std::size_t grid_height);

}  // namespace kpr
