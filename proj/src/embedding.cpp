#include "kpreid/embedding.hpp"

namespace kpr {

PatchGrid PatchGrid::from_image(std::size_t image_width, std::size_t image_height,
                                std::size_t patch_size) {
  if (patch_size == 0 || image_width % patch_size != 0 || image_height % patch_size != 0)
    throw ValidationError("image " + std::to_string(image_width) + "x" +
                          std::to_string(image_height) + " is not divisible by patch size " +
                          std::to_string(patch_size));
  PatchGrid grid;
  grid.patch_size = patch_size;
  grid.rows = image_height / patch_size;
  grid.cols = image_width / patch_size;
  return grid;
}

std::size_t keypoint_to_token(long x, long y, const PatchGrid& grid) {
  const long w = static_cast<long>(grid.cols * grid.patch_size);
  const long h = static_cast<long>(grid.rows * grid.patch_size);
  if (x < 0 || y < 0 || x >= w || y >= h)
    throw ContractError("keypoint (" + std::to_string(x) + ", " + std::to_string(y) +
                        ") outside image bounds " + std::to_string(w) + "x" + std::to_string(h));
  const std::size_t pr = static_cast<std::size_t>(y) / grid.patch_size;
  const std::size_t pc = static_cast<std::size_t>(x) / grid.patch_size;
  return pr * grid.cols + pc + 1;
}

std::vector<double> build_mask(const KeypointSet& keypoints, const PatchGrid& grid) {
  std::vector<double> mask(grid.token_count(), 0.0);
  for (const Keypoint& kp : keypoints.keypoints) mask[keypoint_to_token(kp.x, kp.y, grid)] = 1.0;
  return mask;
}

CategoricalMask build_categorical_mask(const KeypointSet& keypoints, const PatchGrid& grid,
                                       std::size_t n_categories) {
  CategoricalMask mask;
  mask.tokens = grid.token_count();
  mask.categories = n_categories;
  mask.values.assign(mask.tokens * n_categories, 0.0);
  for (const Keypoint& kp : keypoints.keypoints) {
    if (kp.category >= n_categories)
      throw ValidationError("keypoint category " + std::to_string(kp.category) +
                            " out of range for " + std::to_string(n_categories) + " categories");
    mask.values[keypoint_to_token(kp.x, kp.y, grid) * n_categories + kp.category] = 1.0;
  }
  return mask;
}

Tensor kpe_embedding(Tape& tape, const std::vector<double>& mask, const Tensor& w_kp) {
  if (w_kp.rank() != 2 || w_kp.rows() != mask.size())
    throw DimensionError("kpe_embedding: mask length " + std::to_string(mask.size()) +
                         " does not match weights " + shape_str(w_kp.shape()));
  return tape.scale_rows(w_kp, mask);
}

Tensor ckpe_embedding(Tape& tape, const CategoricalMask& mask, const Tensor& w_ckp) {
  if (w_ckp.rank() != 2 || w_ckp.rows() != mask.categories)
    throw DimensionError("ckpe_embedding: mask has " + std::to_string(mask.categories) +
                         " categories, weights are " + shape_str(w_ckp.shape()));
  Tensor cm = Tensor::from_data({mask.tokens, mask.categories}, mask.values, w_ckp.dtype());
  return tape.matmul(cm, w_ckp);
}

}  // namespace kpr
