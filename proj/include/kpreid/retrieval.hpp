#pragma once

#include <string>
#include <vector>

#include "kpreid/errors.hpp"

namespace kpr {

// Cosine similarity with norms floored at eps; any zero vector scores 0
// against everything.
double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b,
                         double eps = 1e-12);

struct EvalItem {
  std::string image_id;
  std::string identity;
  std::vector<double> embedding;
};

// Gallery indices in decreasing similarity to the query; equal similarities
// order by image_id lexicographically.
std::vector<std::size_t> rank_gallery(const std::vector<double>& query,
                                      const std::vector<EvalItem>& gallery);

struct QueryResult {
  std::string query_id;
  std::string true_identity;
  std::string predicted_identity;
  std::string best_match_id;
  double similarity = 0.0;
  bool correct = false;
};

struct EvalReport {
  std::string protocol = "closed-set-leave-one-out";
  double accuracy = 0.0;  // (tp + tn) / (tp + tn + fp + fn)
  std::size_t tp = 0;
  std::size_t tn = 0;  // structurally 0 under this protocol
  std::size_t fp = 0;  // structurally 0 under this protocol
  std::size_t fn = 0;
  std::vector<QueryResult> per_query;

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
};

// Leave-one-out closed-set evaluation: each item queries against all others.
// Every identity must appear at least twice, otherwise its queries could
// never match and the protocol is ill-posed.
EvalReport evaluate(const std::vector<EvalItem>& items);

}  // namespace kpr
