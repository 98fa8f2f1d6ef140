#pragma once

#include <utility>
#include <vector>

namespace jemha {

// Soft score earned by the predicted answer id (0 when no annotator gave it).
double vqa_accuracy(int predicted_id, const std::vector<std::pair<int, double>>& soft);

using Sentence = std::vector<int>;

// Consensus metric over token sequences: corpus idf-weighted n-gram cosine
// (n = 1..4, equal weights), ×10, averaged over each item's references and
// then over items. idf(g) = log((|I|+1)/(df(g)+1)) + 1 with df counted per
// item, so a one-item corpus of identical sentences scores exactly 10.
double cider(const std::vector<Sentence>& candidates, const std::vector<std::vector<Sentence>>& references);

// Corpus-level clipped n-gram precision with brevity penalty, n = 1..max_n.
double bleu(const std::vector<Sentence>& candidates, const std::vector<std::vector<Sentence>>& references,
            int max_n = 4);

}  // namespace jemha
