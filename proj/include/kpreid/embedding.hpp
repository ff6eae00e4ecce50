#pragma once

#include <vector>

#include "kpreid/autodiff.hpp"
#include "kpreid/featureio.hpp"

namespace kpr {

// Token layout of a ViT over an image: slot 0 is [CLS], slots 1..K are the
// row-major patch grid.
struct PatchGrid {
  std::size_t patch_size = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t patch_count() const { return rows * cols; }      // K
  std::size_t token_count() const { return rows * cols + 1; }  // K + 1

  static PatchGrid from_image(std::size_t image_width, std::size_t image_height,
                              std::size_t patch_size);
};

// Token index in [1, K] of the patch containing pixel (x, y); slot 0 is
// reserved for [CLS].
std::size_t keypoint_to_token(long x, long y, const PatchGrid& grid);

// Binary occupancy vector of length K+1; entry 0 is always 0. Keypoints
// sharing a patch collapse to a single 1.
std::vector<double> build_mask(const KeypointSet& keypoints, const PatchGrid& grid);

// Binary (K+1) x N_c matrix, row-major; row 0 all-zero. Entry [token][c] is 1
// iff a keypoint of category c occupies that patch (multiple categories per
// token allowed).
struct CategoricalMask {
  std::size_t tokens = 0;
  std::size_t categories = 0;
  std::vector<double> values;

  double at(std::size_t token, std::size_t category) const {
    return values[token * categories + category];
  }
};

CategoricalMask build_categorical_mask(const KeypointSet& keypoints, const PatchGrid& grid,
                                       std::size_t n_categories);

// Per-token additive embedding (K+1) x d: row k of w_kp gated by mask[k].
Tensor kpe_embedding(Tape& tape, const std::vector<double>& mask, const Tensor& w_kp);

// Per-token additive embedding (K+1) x d: CM . w_ckp, so each occupied token
// receives the sum of its categories' embedding rows.
Tensor ckpe_embedding(Tape& tape, const CategoricalMask& mask, const Tensor& w_ckp);

}  // namespace kpr
