#include "jemha/microdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace jemha {

namespace {

using nlohmann::json;

const char* kBlobMagic = "JMHV";
constexpr std::uint32_t kBlobVersion = 1;
constexpr int kManifestVersion = 1;

const std::vector<std::string> kNumberWords = {"zero", "one", "two", "three", "four",
                                               "five", "six",  "seven", "eight"};

}  // namespace

int feature_dim(const WorldConfig& cfg) {
  return static_cast<int>(cfg.colors.size() + cfg.shapes.size() + cfg.sizes.size()) + 4;
}

std::vector<double> encode_feature(const ObjectAttrs& a, const BoundingBox& box, const WorldConfig& cfg) {
  std::vector<double> f(static_cast<std::size_t>(feature_dim(cfg)), 0.0);
  std::size_t off = 0;
  f[off + static_cast<std::size_t>(a.color)] = 1.0;
  off += cfg.colors.size();
  f[off + static_cast<std::size_t>(a.shape)] = 1.0;
  off += cfg.shapes.size();
  f[off + static_cast<std::size_t>(a.size)] = 1.0;
  off += cfg.sizes.size();
  f[off + 0] = box.cx() / cfg.canvas;
  f[off + 1] = box.cy() / cfg.canvas;
  f[off + 2] = box.width() / cfg.canvas;
  f[off + 3] = box.height() / cfg.canvas;
  return f;
}

GeneratedScene gen_scene(const WorldConfig& cfg, Rng& rng, const std::string& id) {
  if (cfg.colors.empty() || cfg.shapes.empty() || cfg.sizes.empty()) {
    throw std::invalid_argument("gen_scene: empty attribute inventory");
  }
  if (cfg.shape_supercategory.size() != cfg.shapes.size()) {
    throw std::invalid_argument("gen_scene: supercategory map does not cover the shapes");
  }
  const int cells = cfg.grid * cfg.grid;
  if (cfg.max_objects > cells || cfg.min_objects < 1 || cfg.min_objects > cfg.max_objects) {
    throw std::invalid_argument("gen_scene: object range does not fit the grid");
  }

  GeneratedScene gs;
  gs.scene.id = id;
  gs.scene.width = cfg.canvas;
  gs.scene.height = cfg.canvas;

  const int n = cfg.min_objects + rng.randint(0, cfg.max_objects - cfg.min_objects + 1);
  // one object per grid cell keeps boxes disjoint, so NMS never drops one
  std::vector<int> cell_ids(static_cast<std::size_t>(cells));
  std::iota(cell_ids.begin(), cell_ids.end(), 0);
  for (int i = cells - 1; i > 0; --i) std::swap(cell_ids[static_cast<std::size_t>(i)],
                                                cell_ids[static_cast<std::size_t>(rng.randint(0, i + 1))]);

  const double cell = cfg.canvas / cfg.grid;
  const double side_frac[3] = {0.35, 0.6, 0.85};  // of a cell, by size class
  for (int i = 0; i < n; ++i) {
    ObjectAttrs a;
    a.color = rng.randint(0, static_cast<int>(cfg.colors.size()));
    a.shape = rng.randint(0, static_cast<int>(cfg.shapes.size()));
    a.size = rng.randint(0, static_cast<int>(cfg.sizes.size()));

    const int c = cell_ids[static_cast<std::size_t>(i)];
    const double cx0 = (c % cfg.grid) * cell;
    const double cy0 = (c / cfg.grid) * cell;
    const double side = side_frac[a.size] * cell;
    const double x = cx0 + rng.uniform(0.0, cell - side);
    const double y = cy0 + rng.uniform(0.0, cell - side);

    DetectedObject o;
    o.id = i;
    o.box = {x, y, x + side, y + side};
    o.category = a.shape;
    o.supercategory = cfg.shape_supercategory[static_cast<std::size_t>(a.shape)];
    o.score = 1.0;
    o.feature = encode_feature(a, o.box, cfg);
    for (double& v : o.feature) {
      v += rng.normal(0.0, cfg.noise_sd);
      v = static_cast<double>(static_cast<float>(v));  // snap to the f32 storage grid
    }
    gs.scene.objects.push_back(std::move(o));
    gs.attrs.push_back(a);
  }
  return gs;
}

bool relation_holds(const std::string& rel, const BoundingBox& target, const BoundingBox& relatum) {
  if (rel == "left of") return target.cx() < relatum.cx();
  if (rel == "right of") return target.cx() > relatum.cx();
  if (rel == "above") return target.cy() < relatum.cy();
  if (rel == "below") return target.cy() > relatum.cy();
  return false;
}

namespace {

std::string relation_of(const BoundingBox& target, const BoundingBox& relatum) {
  const double dx = target.cx() - relatum.cx();
  const double dy = target.cy() - relatum.cy();
  if (std::abs(dx) >= std::abs(dy)) return dx < 0.0 ? "left of" : "right of";
  return dy < 0.0 ? "above" : "below";
}

std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

}  // namespace

ExpressionDraw gen_expression(const GeneratedScene& gs, int target_id, const WorldConfig& cfg, Rng& rng) {
  const auto& objects = gs.scene.objects;
  std::size_t ti = objects.size();
  for (std::size_t i = 0; i < objects.size(); ++i) {
    if (objects[i].id == target_id) ti = i;
  }
  if (ti == objects.size()) throw std::invalid_argument("gen_expression: unknown target " + std::to_string(target_id));
  const ObjectAttrs& ta = gs.attrs[ti];

  auto same_triple = [&](std::size_t i) {
    const ObjectAttrs& a = gs.attrs[i];
    return a.color == ta.color && a.shape == ta.shape && a.size == ta.size;
  };

  ExpressionDraw draw;
  draw.words = {"the", cfg.sizes[static_cast<std::size_t>(ta.size)], cfg.colors[static_cast<std::size_t>(ta.color)],
                cfg.shapes[static_cast<std::size_t>(ta.shape)]};

  std::vector<std::size_t> confusable;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    if (i != ti && same_triple(i)) confusable.push_back(i);
  }
  if (confusable.empty()) return draw;  // the attribute triple is unique

  std::vector<std::size_t> cands;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    if (i != ti) cands.push_back(i);
  }
  for (std::size_t i = cands.size(); i > 1; --i) {
    std::swap(cands[i - 1], cands[static_cast<std::size_t>(rng.randint(0, static_cast<int>(i)))]);
  }

  auto emit = [&](std::size_t ri, const std::string& rel) {
    const ObjectAttrs& ra = gs.attrs[ri];
    for (const std::string& w : split_words(rel)) draw.words.push_back(w);
    draw.words.push_back("the");
    draw.words.push_back(cfg.colors[static_cast<std::size_t>(ra.color)]);
    draw.words.push_back(cfg.shapes[static_cast<std::size_t>(ra.shape)]);
    draw.relatum_id = objects[ri].id;
    draw.relation = rel;
  };

  for (std::size_t ri : cands) {
    const std::string rel = relation_of(objects[ti].box, objects[ri].box);
    const ObjectAttrs& ra = gs.attrs[ri];
    // does any confusable object satisfy the same description?
    bool still_ambiguous = false;
    for (std::size_t o : confusable) {
      for (std::size_t r2 = 0; r2 < objects.size() && !still_ambiguous; ++r2) {
        if (r2 == o) continue;
        if (gs.attrs[r2].color != ra.color || gs.attrs[r2].shape != ra.shape) continue;
        if (relation_holds(rel, objects[o].box, objects[r2].box)) still_ambiguous = true;
      }
      if (still_ambiguous) break;
    }
    if (!still_ambiguous) {
      emit(ri, rel);
      return draw;
    }
  }

  draw.ambiguous = true;
  emit(cands[0], relation_of(objects[ti].box, objects[cands[0]].box));
  return draw;
}

namespace {

std::map<std::string, double> simulate_annotators(const std::string& truth, const std::vector<std::string>& space,
                                                  const WorldConfig& cfg, Rng& rng) {
  std::map<std::string, int> votes;
  for (int a = 0; a < cfg.annotators; ++a) {
    if (!rng.bernoulli(cfg.annotator_error) || space.size() < 2) {
      ++votes[truth];
    } else {
      std::string wrong = truth;
      while (wrong == truth) wrong = space[static_cast<std::size_t>(rng.randint(0, static_cast<int>(space.size())))];
      ++votes[wrong];
    }
  }
  std::map<std::string, double> soft;
  for (const auto& [ans, n] : votes) soft[ans] = std::min(n / 3.0, 1.0);
  return soft;
}

}  // namespace

QaDraw existence_qa(const GeneratedScene& gs, int color, int shape, const WorldConfig& cfg, Rng& rng) {
  QaDraw qa;
  qa.family = "existence";
  qa.question = {"is", "there", "a", cfg.colors[static_cast<std::size_t>(color)],
                 cfg.shapes[static_cast<std::size_t>(shape)]};
  bool found = false;
  for (const auto& a : gs.attrs) {
    if (a.color == color && a.shape == shape) found = true;
  }
  qa.answer = found ? "yes" : "no";
  qa.soft = simulate_annotators(qa.answer, {"yes", "no"}, cfg, rng);
  return qa;
}

QaDraw gen_qa(const GeneratedScene& gs, const WorldConfig& cfg, Rng& rng) {
  const double u = rng.uniform();
  if (u < 0.4) {  // existence
    int color, shape;
    if (rng.bernoulli(0.5) && !gs.attrs.empty()) {
      const auto& a = gs.attrs[static_cast<std::size_t>(rng.randint(0, static_cast<int>(gs.attrs.size())))];
      color = a.color;
      shape = a.shape;
    } else {
      color = rng.randint(0, static_cast<int>(cfg.colors.size()));
      shape = rng.randint(0, static_cast<int>(cfg.shapes.size()));
    }
    return existence_qa(gs, color, shape, cfg, rng);
  }

  if (u < 0.8) {  // attribute: needs a (size, shape) pair unique in the scene
    std::vector<std::size_t> unique;
    for (std::size_t i = 0; i < gs.attrs.size(); ++i) {
      bool clash = false;
      for (std::size_t j = 0; j < gs.attrs.size(); ++j) {
        if (j != i && gs.attrs[j].size == gs.attrs[i].size && gs.attrs[j].shape == gs.attrs[i].shape) clash = true;
      }
      if (!clash) unique.push_back(i);
    }
    if (!unique.empty()) {
      const auto& a = gs.attrs[unique[static_cast<std::size_t>(rng.randint(0, static_cast<int>(unique.size())))]];
      QaDraw qa;
      qa.family = "attribute";
      qa.question = {"what", "color", "is", "the", cfg.sizes[static_cast<std::size_t>(a.size)],
                     cfg.shapes[static_cast<std::size_t>(a.shape)]};
      qa.answer = cfg.colors[static_cast<std::size_t>(a.color)];
      qa.soft = simulate_annotators(qa.answer, cfg.colors, cfg, rng);
      return qa;
    }
    int color = rng.randint(0, static_cast<int>(cfg.colors.size()));
    int shape = rng.randint(0, static_cast<int>(cfg.shapes.size()));
    return existence_qa(gs, color, shape, cfg, rng);
  }

  // count
  const int shape = rng.randint(0, static_cast<int>(cfg.shapes.size()));
  int count = 0;
  for (const auto& a : gs.attrs) {
    if (a.shape == shape) ++count;
  }
  QaDraw qa;
  qa.family = "count";
  qa.question = {"how", "many", cfg.shapes[static_cast<std::size_t>(shape)]};
  qa.answer = kNumberWords[static_cast<std::size_t>(count)];
  std::vector<std::string> space(kNumberWords.begin(),
                                 kNumberWords.begin() + std::min<std::size_t>(kNumberWords.size(),
                                                                              static_cast<std::size_t>(cfg.max_objects) + 1));
  qa.soft = simulate_annotators(qa.answer, space, cfg, rng);
  return qa;
}

std::string split_of(const std::string& scene_id, std::uint64_t seed) {
  const std::uint64_t h = Rng::mix(fnv1a64(scene_id), seed);
  const auto bucket = static_cast<int>(h % 100);
  if (bucket < 80) return "train";
  if (bucket < 90) return "val";
  return "test";
}

namespace {

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

std::vector<int> word_ids(const std::vector<std::string>& words, const Vocab& v, int max_len) {
  std::vector<int> ids;
  for (const auto& w : words) {
    if (static_cast<int>(ids.size()) == max_len) break;
    ids.push_back(v.id_of(w));
  }
  return ids;
}

}  // namespace

Dataset generate_dataset(const WorldConfig& cfg, int n_scenes) {
  struct Raw {
    GeneratedScene gs;
    std::vector<ExpressionDraw> exprs;
    std::vector<QaDraw> qa;
  };
  std::vector<Raw> raws;
  std::vector<std::string> question_corpus, expression_corpus, answer_corpus;
  for (int i = 0; i < n_scenes; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "scene-%06d", i);
    Rng rng(Rng::mix(cfg.seed, static_cast<std::uint64_t>(i)));
    Raw raw;
    raw.gs = gen_scene(cfg, rng, name);
    for (const auto& obj : raw.gs.scene.objects) {
      raw.exprs.push_back(gen_expression(raw.gs, obj.id, cfg, rng));
      expression_corpus.push_back(join_words(raw.exprs.back().words));
    }
    for (int q = 0; q < cfg.qa_per_scene; ++q) {
      raw.qa.push_back(gen_qa(raw.gs, cfg, rng));
      question_corpus.push_back(join_words(raw.qa.back().question));
      answer_corpus.push_back(raw.qa.back().answer);
      for (const auto& [ans, s] : raw.qa.back().soft) answer_corpus.push_back(ans);
    }
    raws.push_back(std::move(raw));
  }

  Dataset ds;
  ds.feature_dim = feature_dim(cfg);
  ds.question_vocab = Vocab::from_corpus(question_corpus);
  ds.expression_vocab = Vocab::from_corpus(expression_corpus);
  ds.answer_vocab = Vocab::from_corpus(answer_corpus);

  for (auto& raw : raws) {
    DatasetScene sc;
    sc.scene = std::move(raw.gs.scene);
    sc.split = split_of(sc.scene.id, cfg.seed);
    for (std::size_t i = 0; i < raw.exprs.size(); ++i) {
      ManifestExpression me;
      me.object_id = sc.scene.objects[i].id;
      me.ids = word_ids(raw.exprs[i].words, ds.expression_vocab, cfg.expression_max_len);
      me.ambiguous = raw.exprs[i].ambiguous;
      sc.expressions.push_back(std::move(me));
    }
    for (const auto& qa : raw.qa) {
      ManifestQa mq;
      mq.question_ids = word_ids(qa.question, ds.question_vocab, cfg.question_max_len);
      mq.answer_id = ds.answer_vocab.id_of(qa.answer);
      for (const auto& [ans, s] : qa.soft) mq.soft.push_back({ds.answer_vocab.id_of(ans), s});
      std::sort(mq.soft.begin(), mq.soft.end());
      sc.qa.push_back(std::move(mq));
    }
    ds.scenes.push_back(std::move(sc));
  }
  return ds;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

std::uint32_t get_u32(const std::string& s, std::size_t off) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(s[off])) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + 1])) << 8) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + 2])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + 3])) << 24);
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::string encode_blob(const std::vector<std::vector<double>>& rows) {
  const std::uint32_t count = static_cast<std::uint32_t>(rows.size());
  const std::uint32_t dim = rows.empty() ? 0 : static_cast<std::uint32_t>(rows[0].size());
  std::string out(kBlobMagic, 4);
  put_u32(out, kBlobVersion);
  put_u32(out, count);
  put_u32(out, dim);
  for (const auto& row : rows) {
    if (row.size() != dim) throw std::invalid_argument("feature blob: ragged rows");
    for (double v : row) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

std::vector<std::vector<double>> decode_blob(const std::string& bytes) {
  if (bytes.size() < 16) throw std::runtime_error("feature blob: truncated header");
  if (bytes.compare(0, 4, kBlobMagic) != 0) throw std::runtime_error("feature blob: bad magic");
  if (get_u32(bytes, 4) != kBlobVersion) {
    throw std::runtime_error("feature blob: unsupported version " + std::to_string(get_u32(bytes, 4)));
  }
  const std::uint32_t count = get_u32(bytes, 8);
  const std::uint32_t dim = get_u32(bytes, 12);
  const std::size_t want = 16 + static_cast<std::size_t>(count) * dim * 4;
  if (bytes.size() != want) {
    throw std::runtime_error("feature blob: payload is " + std::to_string(bytes.size() - 16) + " bytes, want " +
                             std::to_string(want - 16));
  }
  std::vector<std::vector<double>> rows(count, std::vector<double>(dim));
  std::size_t off = 16;
  for (auto& row : rows) {
    for (double& v : row) {
      v = static_cast<double>(std::bit_cast<float>(get_u32(bytes, off)));
      off += 4;
    }
  }
  return rows;
}

}  // namespace

void write_feature_blob(const std::string& path, const std::vector<std::vector<double>>& rows) {
  write_file(path, encode_blob(rows));
}

std::vector<std::vector<double>> read_feature_blob(const std::string& path) { return decode_blob(read_file(path)); }

void write_dataset(const std::string& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  std::vector<std::vector<double>> rows;
  json scenes = json::array();
  for (const auto& sc : ds.scenes) {
    json js;
    js["id"] = sc.scene.id;
    js["width"] = sc.scene.width;
    js["height"] = sc.scene.height;
    js["split"] = sc.split;
    json objects = json::array();
    for (const auto& o : sc.scene.objects) {
      json jo;
      jo["id"] = o.id;
      jo["box"] = {o.box.x_tl, o.box.y_tl, o.box.x_br, o.box.y_br};
      jo["category"] = o.category;
      jo["supercategory"] = o.supercategory;
      jo["score"] = o.score;
      jo["feature_offset"] = rows.size();
      jo["feature_len"] = o.feature.size();
      rows.push_back(o.feature);
      objects.push_back(std::move(jo));
    }
    js["objects"] = std::move(objects);
    json exprs = json::array();
    for (const auto& e : sc.expressions) {
      json je;
      je["object_id"] = e.object_id;
      je["ids"] = e.ids;
      je["ambiguous"] = e.ambiguous;
      exprs.push_back(std::move(je));
    }
    js["expressions"] = std::move(exprs);
    json qas = json::array();
    for (const auto& q : sc.qa) {
      json jq;
      jq["question_ids"] = q.question_ids;
      jq["answer_id"] = q.answer_id;
      json soft = json::object();
      for (const auto& [id, s] : q.soft) soft[std::to_string(id)] = s;
      jq["soft"] = std::move(soft);
      qas.push_back(std::move(jq));
    }
    js["qa"] = std::move(qas);
    scenes.push_back(std::move(js));
  }

  json manifest;
  manifest["version"] = kManifestVersion;
  manifest["feature_dim"] = ds.feature_dim;
  manifest["features_file"] = "features.bin";
  manifest["vocab_files"] = {{"questions", "questions.vocab"},
                             {"expressions", "expressions.vocab"},
                             {"answers", "answers.vocab"}};
  manifest["scenes"] = std::move(scenes);

  write_file(dir + "/manifest.json", manifest.dump(2) + "\n");
  write_file(dir + "/features.bin", encode_blob(rows));
  write_file(dir + "/questions.vocab", ds.question_vocab.serialize());
  write_file(dir + "/expressions.vocab", ds.expression_vocab.serialize());
  write_file(dir + "/answers.vocab", ds.answer_vocab.serialize());
}

Dataset load_dataset(const std::string& dir) {
  json manifest = json::parse(read_file(dir + "/manifest.json"));
  if (manifest.at("version").get<int>() != kManifestVersion) {
    throw std::runtime_error("manifest: unsupported version");
  }
  Dataset ds;
  ds.feature_dim = manifest.at("feature_dim").get<int>();
  const auto vocab_files = manifest.at("vocab_files");
  ds.question_vocab = Vocab::deserialize(read_file(dir + "/" + vocab_files.at("questions").get<std::string>()));
  ds.expression_vocab = Vocab::deserialize(read_file(dir + "/" + vocab_files.at("expressions").get<std::string>()));
  ds.answer_vocab = Vocab::deserialize(read_file(dir + "/" + vocab_files.at("answers").get<std::string>()));
  const auto rows = decode_blob(read_file(dir + "/" + manifest.at("features_file").get<std::string>()));

  for (const auto& js : manifest.at("scenes")) {
    DatasetScene sc;
    sc.scene.id = js.at("id").get<std::string>();
    sc.scene.width = js.at("width").get<double>();
    sc.scene.height = js.at("height").get<double>();
    sc.split = js.at("split").get<std::string>();
    std::set<int> object_ids;
    for (const auto& jo : js.at("objects")) {
      DetectedObject o;
      o.id = jo.at("id").get<int>();
      const auto box = jo.at("box");
      o.box = {box.at(0).get<double>(), box.at(1).get<double>(), box.at(2).get<double>(), box.at(3).get<double>()};
      o.category = jo.at("category").get<int>();
      o.supercategory = jo.at("supercategory").get<int>();
      o.score = jo.at("score").get<double>();
      const auto offset = jo.at("feature_offset").get<std::size_t>();
      const auto len = jo.at("feature_len").get<std::size_t>();
      if (offset >= rows.size() || len != rows[offset].size()) {
        throw std::runtime_error("manifest: feature offset out of bounds for object " + std::to_string(o.id) +
                                 " in " + sc.scene.id);
      }
      o.feature = rows[offset];
      object_ids.insert(o.id);
      sc.scene.objects.push_back(std::move(o));
    }
    std::set<int> described;
    for (const auto& je : js.at("expressions")) {
      ManifestExpression e;
      e.object_id = je.at("object_id").get<int>();
      e.ids = je.at("ids").get<std::vector<int>>();
      e.ambiguous = je.at("ambiguous").get<bool>();
      described.insert(e.object_id);
      sc.expressions.push_back(std::move(e));
    }
    for (int id : object_ids) {
      if (!described.count(id)) {
        throw std::runtime_error("manifest: object " + std::to_string(id) + " in " + sc.scene.id +
                                 " has no expression");
      }
    }
    for (const auto& jq : js.at("qa")) {
      ManifestQa q;
      q.question_ids = jq.at("question_ids").get<std::vector<int>>();
      q.answer_id = jq.at("answer_id").get<int>();
      for (const auto& [key, val] : jq.at("soft").items()) {
        const double s = val.get<double>();
        if (s < 0.0 || s > 1.0) throw std::runtime_error("manifest: soft score " + std::to_string(s) + " outside [0,1]");
        q.soft.push_back({std::stoi(key), s});
      }
      std::sort(q.soft.begin(), q.soft.end());
      sc.qa.push_back(std::move(q));
    }
    ds.scenes.push_back(std::move(sc));
  }
  return ds;
}

}  // namespace jemha
