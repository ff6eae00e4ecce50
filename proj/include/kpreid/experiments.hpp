#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kpreid/retrieval.hpp"
#include "kpreid/synth.hpp"
#include "kpreid/training.hpp"

namespace kpr {

// Cell-exact keypoint transfer from the reference image to every other image
// of an in-memory dataset; index i holds the keypoints of index.images[i]
// (the reference keeps its own annotation, converted to feature cells and
// back to cell-center pixels).
std::vector<KeypointSet> propagated_keypoints(const SynthDataset& ds);

// Control condition: per image, the same number of keypoints placed at
// deterministic pseudo-random pixels (seeded from `seed` and the image id),
// categories cycling 0..n-1.
std::vector<KeypointSet> random_keypoints(const SynthDataset& ds, std::uint64_t seed);

// Copies the dataset geometry (channels, feature grid, image size, patch
// size, category count) into the ViT config so they cannot drift apart.
void align_vit(TrainConfig& train_cfg, const SynthConfig& synth_cfg);

struct PipelineResult {
  double test_top1 = 0.0;
  double first_loss = 0.0;
  double final_loss = 0.0;
  EvalReport report;
  std::vector<EpochMetrics> history;
};

// generate -> propagate -> train -> leave-one-out evaluation, all in memory.
// When random_patches is set the keypoint inputs come from random_keypoints
// instead of propagation.
PipelineResult run_pipeline(const SynthDataset& ds, const TrainConfig& train_cfg,
                            bool random_patches = false, const std::string& out_dir = "");

struct AblationRow {
  std::string setting;
  std::vector<double> accuracies;  // one per seed
  double median = 0.0;
};

struct AblationTable {
  std::string name;
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;

  std::string to_text() const;  // plain-text table
  std::string to_json() const;
};

// Keypoint-mode comparison (none / kpe / ckpe) at matched seeds.
AblationTable ablate_modes(const SynthConfig& synth_cfg, const TrainConfig& train_cfg,
                           const std::vector<std::uint64_t>& seeds);

// Test accuracy as a function of the number of annotated keypoints.
AblationTable ablate_num_keypoints(const SynthConfig& synth_cfg, const TrainConfig& train_cfg,
                                   const std::vector<std::size_t>& counts,
                                   const std::vector<std::uint64_t>& seeds);

// Propagated keypoints against random patch positions, same budget.
AblationTable ablate_random_vs_keypoints(const SynthConfig& synth_cfg,
                                         const TrainConfig& train_cfg,
                                         const std::vector<std::uint64_t>& seeds);

double median(std::vector<double> values);

}  // namespace kpr
