#include "kpreid/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "json.hpp"

using nlohmann::json;

namespace kpr {

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b, double eps) {
  if (a.size() != b.size())
    throw DimensionError("cosine similarity between vectors of length " +
                         std::to_string(a.size()) + " and " + std::to_string(b.size()));
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::max(std::sqrt(na), eps) * std::max(std::sqrt(nb), eps));
}

std::vector<std::size_t> rank_gallery(const std::vector<double>& query,
                                      const std::vector<EvalItem>& gallery) {
  std::vector<double> sims(gallery.size());
  for (std::size_t i = 0; i < gallery.size(); ++i)
    sims[i] = cosine_similarity(query, gallery[i].embedding);
  std::vector<std::size_t> order(gallery.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (sims[a] != sims[b]) return sims[a] > sims[b];
    return gallery[a].image_id < gallery[b].image_id;
  });
  return order;
}

EvalReport evaluate(const std::vector<EvalItem>& items) {
  if (items.size() < 2) throw ValidationError("evaluation needs at least 2 images");
  std::map<std::string, std::size_t> identity_counts;
  for (const EvalItem& item : items) ++identity_counts[item.identity];
  for (const auto& [identity, count] : identity_counts)
    if (count < 2)
      throw ValidationError("identity \"" + identity +
                            "\" has a single test image; leave-one-out retrieval cannot match it");

  EvalReport report;
  for (std::size_t q = 0; q < items.size(); ++q) {
    std::vector<EvalItem> gallery;
    gallery.reserve(items.size() - 1);
    for (std::size_t g = 0; g < items.size(); ++g)
      if (g != q) gallery.push_back(items[g]);
    const std::vector<std::size_t> order = rank_gallery(items[q].embedding, gallery);
    const EvalItem& best = gallery[order.front()];

    QueryResult r;
    r.query_id = items[q].image_id;
    r.true_identity = items[q].identity;
    r.predicted_identity = best.identity;
    r.best_match_id = best.image_id;
    r.similarity = cosine_similarity(items[q].embedding, best.embedding);
    r.correct = r.predicted_identity == r.true_identity;
    if (r.correct) ++report.tp; else ++report.fn;
    report.per_query.push_back(std::move(r));
  }
  report.accuracy = static_cast<double>(report.tp + report.tn) /
                    static_cast<double>(report.tp + report.tn + report.fp + report.fn);
  return report;
}

std::string EvalReport::to_json() const {
  json j;
  j["protocol"] = protocol;
  j["accuracy"] = accuracy;
  j["tp"] = tp;
  j["tn"] = tn;
  j["fp"] = fp;
  j["fn"] = fn;
  json pq = json::array();
  for (const QueryResult& r : per_query) {
    json e;
    e["query_id"] = r.query_id;
    e["true_identity"] = r.true_identity;
    e["predicted_identity"] = r.predicted_identity;
    e["best_match_id"] = r.best_match_id;
    e["similarity"] = r.similarity;
    e["correct"] = r.correct;
    pq.push_back(std::move(e));
  }
  j["per_query"] = std::move(pq);
  return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw FormatError("invalid evaluation report JSON");
  EvalReport report;
  try {
    report.protocol = j.at("protocol").get<std::string>();
    report.accuracy = j.at("accuracy").get<double>();
    report.tp = j.at("tp").get<std::size_t>();
    report.tn = j.at("tn").get<std::size_t>();
    report.fp = j.at("fp").get<std::size_t>();
    report.fn = j.at("fn").get<std::size_t>();
    for (const json& e : j.at("per_query")) {
      QueryResult r;
      r.query_id = e.at("query_id").get<std::string>();
      r.true_identity = e.at("true_identity").get<std::string>();
      r.predicted_identity = e.at("predicted_identity").get<std::string>();
      r.best_match_id = e.at("best_match_id").get<std::string>();
      r.similarity = e.at("similarity").get<double>();
      r.correct = e.at("correct").get<bool>();
      report.per_query.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("evaluation report: ") + e.what());
  }
  return report;
}

}  // namespace kpr
