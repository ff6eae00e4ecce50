#pragma once

#include <string>
#include <vector>

#include "kpreid/autodiff.hpp"
#include "kpreid/embedding.hpp"
#include "kpreid/featureio.hpp"
#include "kpreid/rng.hpp"

namespace kpr {

enum class KeypointMode { none, kpe, ckpe };

std::string mode_name(KeypointMode m);
KeypointMode mode_from_name(const std::string& name);

struct ViTConfig {
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  double mlp_ratio = 4.0;
  std::size_t image_width = 32;
  std::size_t image_height = 32;
  std::size_t feature_height = 16;  // input grid resolution (feature cells)
  std::size_t feature_width = 16;
  std::size_t channels = 16;
  std::size_t n_categories = 0;
  KeypointMode mode = KeypointMode::none;

  PatchGrid grid() const { return PatchGrid::from_image(image_width, image_height, patch_size); }
  std::size_t patch_count() const { return grid().patch_count(); }
  // flattened [channel][cell-row][cell-col] values of one patch
  std::size_t patch_dim() const;
  std::size_t mlp_dim() const { return static_cast<std::size_t>(mlp_ratio * static_cast<double>(embed_dim)); }
  void validate() const;

  std::string to_json() const;
  static ViTConfig from_json(const std::string& text);
};

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;
};

struct ModelParams {
  ViTConfig config;
  std::size_t n_classes = 0;

  Tensor patch_proj, patch_bias;
  Tensor cls_token;
  Tensor pos_table;  // (K+1) x d learned positional table
  std::vector<BlockParams> blocks;
  Tensor ln_f_gain, ln_f_bias;
  Tensor w_kp;        // (K+1) x d, mode kpe (zero-initialized)
  Tensor w_ckp;       // N_c x d, mode ckpe (zero-initialized)
  Tensor arc_weights; // n_classes x d

  // RNG draws happen in a mode-independent order so that matched seeds give
  // identical shared parameters across modes.
  static ModelParams init(const ViTConfig& cfg, std::size_t n_classes, Rng& rng,
                          DType dt = DType::f32);

  std::vector<std::pair<std::string, Tensor>> named_params();
  std::vector<std::pair<std::string, Tensor>> named_params() const;
};

// K x patch_dim matrix of non-overlapping patches, row-major over the patch
// grid; each patch flattens [channel][row][col].
Tensor patchify(const FeatureMap& input, const ViTConfig& cfg, DType dt = DType::f32);

// Inverse of patchify; test/debugging aid.
FeatureMap unpatchify(const Tensor& patches, const ViTConfig& cfg);

// [CLS] embedding of one image; keypoints are required iff mode != none
// (ignored in mode none).
Tensor forward(Tape& tape, const ModelParams& params, const FeatureMap& input,
               const KeypointSet* keypoints);

// B x d matrix whose row i equals forward on example i exactly.
Tensor forward_batch(Tape& tape, const ModelParams& params,
                     const std::vector<const FeatureMap*>& inputs,
                     const std::vector<const KeypointSet*>& keypoints);

// Checkpoint glue: parameter tensors plus optimizer state live in one file.
Checkpoint params_to_checkpoint(const ModelParams& params);
// Copies matching tensors into params; missing names or shape mismatches
// throw with the offending tensor named.
void params_from_checkpoint(ModelParams& params, const Checkpoint& ckpt);

}  // namespace kpr
