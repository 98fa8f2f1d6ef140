#include "jemha/text.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "jemha/rng.hpp"

namespace jemha {

namespace {

const char* kReserved[] = {"<pad>", "<bos>", "<eos>", "<unk>"};

}  // namespace

Vocab::Vocab() {
  for (const char* t : kReserved) add(t);
}

int Vocab::add(const std::string& token) {
  auto it = to_id_.find(token);
  if (it != to_id_.end()) return it->second;
  const int id = size();
  to_id_.emplace(token, id);
  to_token_.push_back(token);
  return id;
}

int Vocab::id_of(const std::string& token) const {
  auto it = to_id_.find(token);
  return it == to_id_.end() ? kUnk : it->second;
}

bool Vocab::contains(const std::string& token) const { return to_id_.count(token) != 0; }

const std::string& Vocab::token_of(int id) const {
  if (id < 0 || id >= size()) throw std::invalid_argument("vocab: id " + std::to_string(id) + " out of range");
  return to_token_[static_cast<std::size_t>(id)];
}

Vocab Vocab::from_corpus(const std::vector<std::string>& sentences, int min_count) {
  std::map<std::string, int> counts;  // ordered -> deterministic insertion
  for (const auto& s : sentences) {
    for (const auto& t : clean_tokens(s)) ++counts[t];
  }
  Vocab v;
  for (const auto& [token, count] : counts) {
    if (count >= min_count) v.add(token);
  }
  return v;
}

std::string Vocab::serialize() const {
  std::vector<std::pair<std::string, int>> rows(to_id_.begin(), to_id_.end());
  std::sort(rows.begin(), rows.end());
  std::string out;
  for (const auto& [token, id] : rows) {
    out += token;
    out += '\t';
    out += std::to_string(id);
    out += '\n';
  }
  return out;
}

Vocab Vocab::deserialize(const std::string& text) {
  std::map<int, std::string> by_id;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw std::runtime_error("vocab: line " + std::to_string(line_no) + ": malformed");
    }
    const std::string token = line.substr(0, tab);
    int id = 0;
    try {
      id = std::stoi(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw std::runtime_error("vocab: line " + std::to_string(line_no) + ": bad id");
    }
    if (!by_id.emplace(id, token).second) {
      throw std::runtime_error("vocab: line " + std::to_string(line_no) + ": duplicate id " + std::to_string(id));
    }
  }
  Vocab v;
  int expect = 0;
  for (const auto& [id, token] : by_id) {
    if (id != expect++) throw std::runtime_error("vocab: ids are not dense at " + std::to_string(id));
    if (id < 4) {
      if (token != kReserved[id]) throw std::runtime_error("vocab: reserved id " + std::to_string(id) + " is " + token);
      continue;
    }
    if (v.add(token) != id) throw std::runtime_error("vocab: duplicate token " + token);
  }
  return v;
}

std::vector<std::string> clean_tokens(const std::string& text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (unsigned char c : text) {
    if (c >= 'A' && c <= 'Z') {
      cleaned.push_back(static_cast<char>(c - 'A' + 'a'));
    } else if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c >= 0x80) {
      cleaned.push_back(static_cast<char>(c));
    } else {
      cleaned.push_back(' ');
    }
  }
  std::vector<std::string> tokens;
  std::istringstream in(cleaned);
  std::string tok;
  while (in >> tok) tokens.push_back(tok);
  return tokens;
}

std::vector<int> TokenSequence::padded() const {
  if (static_cast<int>(ids.size()) > max_len) {
    throw std::invalid_argument("token_sequence: " + std::to_string(ids.size()) + " ids exceed max_len " +
                                std::to_string(max_len));
  }
  std::vector<int> out = ids;
  out.resize(static_cast<std::size_t>(max_len), kPad);
  return out;
}

int TokenSequence::length() const {
  std::size_t n = ids.size();
  while (n > 0 && ids[n - 1] == kPad) --n;
  return static_cast<int>(n);
}

TokenSequence tokenize(const std::string& text, const Vocab& vocab, int max_len) {
  if (max_len < 1) throw std::invalid_argument("tokenize: max_len must be positive");
  TokenSequence seq;
  seq.max_len = max_len;
  auto tokens = clean_tokens(text);
  if (static_cast<int>(tokens.size()) > max_len) tokens.resize(static_cast<std::size_t>(max_len));
  for (const auto& t : tokens) seq.ids.push_back(vocab.id_of(t));
  if (seq.ids.empty()) seq.ids.push_back(kUnk);
  return seq;
}

std::string render_tokens(const std::vector<int>& ids, const Vocab& vocab) {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out += ' ';
    out += vocab.token_of(id);
  }
  return out;
}

EmbeddingTable EmbeddingTable::init(int vocab_size, int dim, Rng& rng, double sd) {
  EmbeddingTable e;
  e.dim = dim;
  e.table = Tensor::randn({vocab_size, dim}, rng, sd, true);
  for (int j = 0; j < dim; ++j) e.table.values()[static_cast<std::size_t>(j)] = 0.0;  // PAD row
  return e;
}

int load_word_vectors(const std::string& path, const Vocab& vocab, EmbeddingTable& table) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_word_vectors: cannot open " + path);
  std::string line;
  int line_no = 0, replaced = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string token;
    row >> token;
    std::vector<double> vec;
    vec.reserve(static_cast<std::size_t>(table.dim));
    double v;
    while (row >> v) vec.push_back(v);
    if (token.empty() || static_cast<int>(vec.size()) != table.dim || !row.eof()) {
      throw std::runtime_error("load_word_vectors: line " + std::to_string(line_no) + ": malformed (want token + " +
                               std::to_string(table.dim) + " floats)");
    }
    if (!vocab.contains(token)) continue;
    const int id = vocab.id_of(token);
    if (id == kPad) continue;
    std::copy(vec.begin(), vec.end(), table.table.values().begin() + static_cast<std::ptrdiff_t>(id) * table.dim);
    ++replaced;
  }
  return replaced;
}

QuestionEncoderParams QuestionEncoderParams::make(int vocab_size, int word_dim, int d, bool use_gru, Rng& rng) {
  QuestionEncoderParams p;
  p.embed = EmbeddingTable::init(vocab_size, word_dim, rng);
  p.w = Tensor::randn({word_dim, d}, rng, 1.0 / std::sqrt(static_cast<double>(word_dim)), true);
  p.b = Tensor::zeros({d}, true);
  p.use_gru = use_gru;
  if (use_gru) p.gru = RecurrentCellParams::gru(word_dim, d, rng);
  return p;
}

std::vector<Tensor> QuestionEncoderParams::parameters() const {
  std::vector<Tensor> out = {embed.table, w, b};
  if (use_gru) {
    for (const auto& g : gru.gates) {
      out.push_back(g.w_x);
      out.push_back(g.w_h);
      out.push_back(g.b);
    }
  }
  return out;
}

EncodedQuestion embed_question(const TokenSequence& seq, const QuestionEncoderParams& p) {
  EncodedQuestion out;
  out.length = seq.length();
  const auto padded = seq.padded();
  out.mask.assign(padded.size(), 0);
  for (int t = 0; t < out.length; ++t) out.mask[static_cast<std::size_t>(t)] = 1;

  if (!p.use_gru) {
    out.q = linear(embedding_lookup(p.embed.table, padded), p.w, p.b);
    return out;
  }

  const int d = p.gru.hidden_dim;
  std::vector<Tensor> rows;
  Tensor h = Tensor::zeros({1, d});
  for (int t = 0; t < out.length; ++t) {
    Tensor emb = embedding_lookup(p.embed.table, {padded[static_cast<std::size_t>(t)]});
    h = gru_step(emb, h, p.gru);
    rows.push_back(h);
  }
  const int pad_rows = static_cast<int>(padded.size()) - out.length;
  if (pad_rows > 0) rows.push_back(Tensor::zeros({pad_rows, d}));
  out.q = concat(rows, 0);
  return out;
}

ExpressionEncoderParams ExpressionEncoderParams::make(int vocab_size, int word_dim, int hidden, int d, Rng& rng) {
  ExpressionEncoderParams p;
  p.embed = EmbeddingTable::init(vocab_size, word_dim, rng);
  p.gru = RecurrentCellParams::gru(word_dim, hidden, rng);
  p.w = Tensor::randn({hidden, d}, rng, 1.0 / std::sqrt(static_cast<double>(hidden)), true);
  p.b = Tensor::zeros({d}, true);
  return p;
}

std::vector<Tensor> ExpressionEncoderParams::parameters() const {
  std::vector<Tensor> out = {embed.table, w, b};
  for (const auto& g : gru.gates) {
    out.push_back(g.w_x);
    out.push_back(g.w_h);
    out.push_back(g.b);
  }
  return out;
}

Tensor embed_expressions(const std::vector<TokenSequence>& seqs, const ExpressionEncoderParams& p) {
  if (seqs.empty()) throw std::invalid_argument("embed_expressions: no sequences");
  const int m = static_cast<int>(seqs.size());
  int steps = 0;
  std::vector<int> lengths;
  for (const auto& s : seqs) {
    const int len = s.length();
    if (len == 0) throw std::invalid_argument("embed_expressions: empty sequence");
    lengths.push_back(len);
    steps = std::max(steps, len);
  }

  const int hidden = p.gru.hidden_dim;
  Tensor h = Tensor::zeros({m, hidden});
  std::vector<Tensor> finals(static_cast<std::size_t>(m));
  for (int t = 0; t < steps; ++t) {
    std::vector<int> col(static_cast<std::size_t>(m), kPad);
    for (int i = 0; i < m; ++i) {
      if (t < static_cast<int>(seqs[static_cast<std::size_t>(i)].ids.size())) {
        col[static_cast<std::size_t>(i)] = seqs[static_cast<std::size_t>(i)].ids[static_cast<std::size_t>(t)];
      }
    }
    h = gru_step(embedding_lookup(p.embed.table, col), h, p.gru);
    for (int i = 0; i < m; ++i) {
      if (lengths[static_cast<std::size_t>(i)] == t + 1) {
        finals[static_cast<std::size_t>(i)] = reshape(row_select(h, i), {1, hidden});
      }
    }
  }
  Tensor stacked = m == 1 ? finals[0] : concat(finals, 0);
  return linear(stacked, p.w, p.b);
}

Tensor embed_expression(const TokenSequence& seq, const ExpressionEncoderParams& p) {
  Tensor row = embed_expressions({seq}, p);
  return reshape(row, {row.cols()});
}

}  // namespace jemha
