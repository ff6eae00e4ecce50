#pragma once

#include <string>
#include <vector>

#include "kpreid/autodiff.hpp"

namespace kpr {

enum class ReidKind { arcface, triplet, arcface_triplet };

std::string reid_kind_name(ReidKind k);
ReidKind reid_kind_from_name(const std::string& name);

struct LossConfig {
  double lambda = 0.2;
  double arcface_s = 16.0;
  double arcface_m = 0.3;
  double triplet_margin = 0.3;
  ReidKind reid_kind = ReidKind::arcface;

  void validate() const;
};

// B x n_classes cosine similarities between the row-normalized embeddings and
// the row-normalized class weights. A zero embedding row cannot be assigned a
// direction and is rejected.
Tensor cosine_logits(Tape& tape, const Tensor& embeddings, const Tensor& class_weights);

// Additive-angular-margin softmax loss: the target-class angle is widened by
// m before scaled-softmax cross entropy. m = 0 reduces to cross entropy on
// s * cosine logits exactly.
Tensor arcface_loss(Tape& tape, const Tensor& embeddings, const Tensor& class_weights,
                    const std::vector<std::size_t>& labels, double s, double m);

// Batch-hard triplet loss: per anchor, the farthest same-label and nearest
// different-label rows are mined on numeric distances, then the hinge
// relu(d_ap - d_an + margin) is built differentiably and averaged.
Tensor triplet_loss(Tape& tape, const Tensor& embeddings,
                    const std::vector<std::size_t>& labels, double margin);

struct LossTensors {
  Tensor total;  // reid + lambda * ce
  Tensor reid;
  Tensor ce;
};

struct LossBreakdown {
  double total = 0.0;
  double reid = 0.0;
  double ce = 0.0;
};

// Composite objective. The cross-entropy term is softmax cross entropy on the
// s-scaled cosine logits, sharing the same class weight matrix.
LossTensors total_loss(Tape& tape, const Tensor& embeddings, const Tensor& class_weights,
                       const std::vector<std::size_t>& labels, const LossConfig& cfg);

LossBreakdown breakdown(const LossTensors& t);

}  // namespace kpr
