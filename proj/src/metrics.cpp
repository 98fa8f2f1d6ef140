#include "jemha/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

namespace jemha {

double vqa_accuracy(int predicted_id, const std::vector<std::pair<int, double>>& soft) {
  for (const auto& [id, score] : soft) {
    if (id == predicted_id) return score;
  }
  return 0.0;
}

namespace {

using Gram = std::vector<int>;
using GramCounts = std::map<Gram, double>;

GramCounts ngram_counts(const Sentence& s, int n) {
  GramCounts counts;
  if (static_cast<int>(s.size()) >= n) {
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= s.size(); ++i) {
      Gram g(s.begin() + static_cast<std::ptrdiff_t>(i), s.begin() + static_cast<std::ptrdiff_t>(i) + n);
      counts[g] += 1.0;
    }
  }
  return counts;
}

double tfidf_cosine(const GramCounts& a, const GramCounts& b, const std::map<Gram, double>& idf, double idf_unseen) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [g, c] : a) {
    const auto it = idf.find(g);
    const double w = it == idf.end() ? idf_unseen : it->second;  // df = 0 for grams outside every reference
    const double va = c * w;
    na += va * va;
    const auto jt = b.find(g);
    if (jt != b.end()) dot += va * jt->second * w;
  }
  for (const auto& [g, c] : b) {
    const auto it = idf.find(g);
    const double w = it == idf.end() ? idf_unseen : it->second;
    nb += c * w * c * w;
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

void check_corpus(const std::vector<Sentence>& candidates, const std::vector<std::vector<Sentence>>& references,
                  const char* who) {
  if (candidates.size() != references.size()) {
    throw std::invalid_argument(std::string(who) + ": " + std::to_string(candidates.size()) + " candidates for " +
                                std::to_string(references.size()) + " reference sets");
  }
  if (candidates.empty()) throw std::invalid_argument(std::string(who) + ": empty corpus");
  for (const auto& refs : references) {
    if (refs.empty()) throw std::invalid_argument(std::string(who) + ": item with empty reference set");
  }
}

}  // namespace

double cider(const std::vector<Sentence>& candidates, const std::vector<std::vector<Sentence>>& references) {
  check_corpus(candidates, references, "cider");
  const int kMaxN = 4;
  const double items = static_cast<double>(candidates.size());

  double total = 0.0;
  for (int n = 1; n <= kMaxN; ++n) {
    // document frequency: in how many items' reference sets a gram appears
    std::map<Gram, double> df;
    for (const auto& refs : references) {
      std::map<Gram, bool> seen;
      for (const Sentence& r : refs) {
        for (const auto& [g, c] : ngram_counts(r, n)) seen[g] = true;
      }
      for (const auto& [g, unused] : seen) df[g] += 1.0;
    }
    std::map<Gram, double> idf;
    for (const auto& [g, d] : df) idf[g] = std::log((items + 1.0) / (d + 1.0)) + 1.0;
    const double idf_unseen = std::log(items + 1.0) + 1.0;

    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const GramCounts cand = ngram_counts(candidates[i], n);
      double mean_cos = 0.0;
      for (const Sentence& r : references[i]) mean_cos += tfidf_cosine(cand, ngram_counts(r, n), idf, idf_unseen);
      mean_cos /= static_cast<double>(references[i].size());
      total += 10.0 / static_cast<double>(kMaxN) * mean_cos;
    }
  }
  return total / items;
}

double bleu(const std::vector<Sentence>& candidates, const std::vector<std::vector<Sentence>>& references, int max_n) {
  check_corpus(candidates, references, "bleu");
  if (max_n < 1) throw std::invalid_argument("bleu: max_n must be at least 1");

  double log_p_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    double matched = 0.0, total = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const GramCounts cand = ngram_counts(candidates[i], n);
      GramCounts best_ref;
      for (const Sentence& r : references[i]) {
        for (const auto& [g, c] : ngram_counts(r, n)) best_ref[g] = std::max(best_ref[g], c);
      }
      for (const auto& [g, c] : cand) {
        total += c;
        const auto it = best_ref.find(g);
        if (it != best_ref.end()) matched += std::min(c, it->second);
      }
    }
    if (matched == 0.0 || total == 0.0) return 0.0;
    log_p_sum += std::log(matched / total) / static_cast<double>(max_n);
  }

  double cand_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double c = static_cast<double>(candidates[i].size());
    cand_len += c;
    // effective reference length: closest to the candidate, ties to shorter
    double best = static_cast<double>(references[i][0].size());
    for (const Sentence& r : references[i]) {
      const double rl = static_cast<double>(r.size());
      if (std::abs(rl - c) < std::abs(best - c) || (std::abs(rl - c) == std::abs(best - c) && rl < best)) best = rl;
    }
    ref_len += best;
  }
  if (cand_len == 0.0) return 0.0;
  const double bp = cand_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return bp * std::exp(log_p_sum);
}

}  // namespace jemha
