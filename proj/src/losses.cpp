#include "kpreid/losses.hpp"

#include <cmath>
#include <limits>

namespace kpr {

std::string reid_kind_name(ReidKind k) {
  switch (k) {
    case ReidKind::arcface: return "arcface";
    case ReidKind::triplet: return "triplet";
    case ReidKind::arcface_triplet: return "arcface+triplet";
  }
  throw ContractError("unknown reid kind");
}

ReidKind reid_kind_from_name(const std::string& name) {
  if (name == "arcface") return ReidKind::arcface;
  if (name == "triplet") return ReidKind::triplet;
  if (name == "arcface+triplet") return ReidKind::arcface_triplet;
  throw ValidationError("unknown reid loss kind \"" + name + "\"");
}

void LossConfig::validate() const {
  if (lambda < 0.0) throw ValidationError("lambda must be >= 0");
  if (arcface_s <= 0.0) throw ValidationError("arcface scale s must be > 0");
  if (arcface_m < 0.0 || arcface_m >= 3.141592653589793)
    throw ValidationError("arcface margin m must lie in [0, pi)");
  if (triplet_margin < 0.0) throw ValidationError("triplet margin must be >= 0");
}

namespace {

constexpr double kNormEps = 1e-12;

void check_rows(const Tensor& embeddings, const std::vector<std::size_t>& labels,
                std::size_t n_classes) {
  if (embeddings.rank() != 2)
    throw DimensionError("loss expects a rank-2 embedding batch, got " +
                         shape_str(embeddings.shape()));
  if (labels.size() != embeddings.rows())
    throw DimensionError("batch of " + std::to_string(embeddings.rows()) + " embeddings with " +
                         std::to_string(labels.size()) + " labels");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (n_classes > 0 && labels[i] >= n_classes)
      throw ValidationError("label " + std::to_string(labels[i]) + " at batch index " +
                            std::to_string(i) + " out of range for " +
                            std::to_string(n_classes) + " classes");
}

void check_nonzero_rows(const Tensor& embeddings) {
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < embeddings.cols(); ++j)
      sq += embeddings.at(i, j) * embeddings.at(i, j);
    if (std::sqrt(sq) <= kNormEps)
      throw ValidationError("embedding at batch index " + std::to_string(i) +
                            " has zero norm and no direction");
  }
}

}  // namespace

Tensor cosine_logits(Tape& tape, const Tensor& embeddings, const Tensor& class_weights) {
  if (class_weights.rank() != 2 || class_weights.cols() != embeddings.cols())
    throw DimensionError("class weights " + shape_str(class_weights.shape()) +
                         " incompatible with embeddings " + shape_str(embeddings.shape()));
  check_nonzero_rows(embeddings);
  Tensor zn = tape.l2_normalize_rows(embeddings, kNormEps);
  Tensor wn = tape.l2_normalize_rows(class_weights, kNormEps);
  return tape.matmul(zn, tape.transpose(wn));
}

Tensor arcface_loss(Tape& tape, const Tensor& embeddings, const Tensor& class_weights,
                    const std::vector<std::size_t>& labels, double s, double m) {
  check_rows(embeddings, labels, class_weights.rows());
  Tensor cosines = cosine_logits(tape, embeddings, class_weights);
  Tensor adjusted = tape.arcface_adjust(cosines, labels, m);
  return tape.cross_entropy(tape.scale(adjusted, s), labels);
}

Tensor triplet_loss(Tape& tape, const Tensor& embeddings,
                    const std::vector<std::size_t>& labels, double margin) {
  check_rows(embeddings, labels, 0);
  const std::size_t b = embeddings.rows();
  const std::size_t d = embeddings.cols();

  std::vector<double> dist(b * b, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = i + 1; j < b; ++j) {
      double sq = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double delta = embeddings.at(i, k) - embeddings.at(j, k);
        sq += delta * delta;
      }
      dist[i * b + j] = dist[j * b + i] = std::sqrt(sq);
    }

  Tensor acc;
  for (std::size_t a = 0; a < b; ++a) {
    std::size_t hardest_pos = b, hardest_neg = b;
    double worst_pos = -1.0, best_neg = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < b; ++j) {
      if (j == a) continue;
      if (labels[j] == labels[a]) {
        if (dist[a * b + j] > worst_pos) { worst_pos = dist[a * b + j]; hardest_pos = j; }
      } else if (dist[a * b + j] < best_neg) {
        best_neg = dist[a * b + j];
        hardest_neg = j;
      }
    }
    if (hardest_pos == b)
      throw ValidationError("triplet loss: anchor at batch index " + std::to_string(a) +
                            " has no positive");
    if (hardest_neg == b)
      throw ValidationError("triplet loss: anchor at batch index " + std::to_string(a) +
                            " has no negative");

    Tensor za = tape.slice_rows(embeddings, a, a + 1);
    Tensor dp = tape.sub(za, tape.slice_rows(embeddings, hardest_pos, hardest_pos + 1));
    Tensor dn = tape.sub(za, tape.slice_rows(embeddings, hardest_neg, hardest_neg + 1));
    Tensor d_ap = tape.sqrt_op(tape.sum(tape.mul(dp, dp)));
    Tensor d_an = tape.sqrt_op(tape.sum(tape.mul(dn, dn)));
    Tensor hinge = tape.relu(tape.add_const(tape.sub(d_ap, d_an), margin));
    acc = acc.defined() ? tape.add(acc, hinge) : hinge;
  }
  return tape.scale(acc, 1.0 / static_cast<double>(b));
}

LossTensors total_loss(Tape& tape, const Tensor& embeddings, const Tensor& class_weights,
                       const std::vector<std::size_t>& labels, const LossConfig& cfg) {
  cfg.validate();
  check_rows(embeddings, labels, class_weights.rows());

  LossTensors out;
  switch (cfg.reid_kind) {
    case ReidKind::arcface:
      out.reid = arcface_loss(tape, embeddings, class_weights, labels, cfg.arcface_s,
                              cfg.arcface_m);
      break;
    case ReidKind::triplet:
      out.reid = triplet_loss(tape, embeddings, labels, cfg.triplet_margin);
      break;
    case ReidKind::arcface_triplet:
      out.reid = tape.add(arcface_loss(tape, embeddings, class_weights, labels, cfg.arcface_s,
                                       cfg.arcface_m),
                          triplet_loss(tape, embeddings, labels, cfg.triplet_margin));
      break;
  }
  Tensor logits = tape.scale(cosine_logits(tape, embeddings, class_weights), cfg.arcface_s);
  out.ce = tape.cross_entropy(logits, labels);
  out.total = tape.add(out.reid, tape.scale(out.ce, cfg.lambda));
  return out;
}

LossBreakdown breakdown(const LossTensors& t) {
  LossBreakdown b;
  b.total = t.total.value();
  b.reid = t.reid.value();
  b.ce = t.ce.value();
  return b;
}

}  // namespace kpr
