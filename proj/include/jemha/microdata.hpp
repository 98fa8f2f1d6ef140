#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "jemha/rng.hpp"
#include "jemha/scene.hpp"
#include "jemha/text.hpp"

namespace jemha {

// Synthetic micro-world: objects with discrete attributes on a grid, so
// every answer is recoverable from the features by construction.
struct WorldConfig {
  double canvas = 256.0;
  int grid = 4;  // placement cells per side; one object per cell
  std::vector<std::string> colors = {"red", "green", "blue", "yellow", "purple", "orange", "cyan", "brown"};
  std::vector<std::string> shapes = {"ball", "box", "cone", "ring", "star", "disk"};
  std::vector<std::string> sizes = {"small", "medium", "large"};
  std::vector<int> shape_supercategory = {0, 1, 2, 0, 2, 0};  // round / boxy / pointy
  int min_objects = 2;
  int max_objects = 8;
  double noise_sd = 0.02;
  int annotators = 10;
  double annotator_error = 0.1;
  int qa_per_scene = 1;
  int question_max_len = 14;
  int expression_max_len = 20;
  std::uint64_t seed = 1;
};

struct ObjectAttrs {
  int color = 0, shape = 0, size = 0;
};

struct GeneratedScene {
  Scene scene;
  std::vector<ObjectAttrs> attrs;  // parallel to scene.objects
};

// color one-hot + shape one-hot + size one-hot + (cx/W, cy/H, w/W, h/H)
int feature_dim(const WorldConfig& cfg);
std::vector<double> encode_feature(const ObjectAttrs& a, const BoundingBox& box, const WorldConfig& cfg);

GeneratedScene gen_scene(const WorldConfig& cfg, Rng& rng, const std::string& id);

struct ExpressionDraw {
  std::vector<std::string> words;
  bool ambiguous = false;
  int relatum_id = -1;   // -1 when attribute-only
  std::string relation;  // "left of" | "right of" | "above" | "below" | ""
};

// "the {size} {color} {shape}" when that triple is unique, otherwise the
// triple plus a true spatial relation to a distinguishing relatum.
ExpressionDraw gen_expression(const GeneratedScene& gs, int target_id, const WorldConfig& cfg, Rng& rng);

// Center-based geometric truth of a relation string.
bool relation_holds(const std::string& rel, const BoundingBox& target, const BoundingBox& relatum);

struct QaDraw {
  std::vector<std::string> question;
  std::string answer;
  std::map<std::string, double> soft;  // simulated annotators, min(votes/3, 1)
  std::string family;                  // existence | attribute | count
};

// "is there a {color} {shape}" with the truthful yes/no; exposed so
// complementary scene pairs can share one question verbatim.
QaDraw existence_qa(const GeneratedScene& gs, int color, int shape, const WorldConfig& cfg, Rng& rng);
QaDraw gen_qa(const GeneratedScene& gs, const WorldConfig& cfg, Rng& rng);

// Stable 80/10/10 assignment from the seeded hash of the scene id.
std::string split_of(const std::string& scene_id, std::uint64_t seed);

struct ManifestExpression {
  int object_id = 0;
  std::vector<int> ids;
  bool ambiguous = false;
};

struct ManifestQa {
  std::vector<int> question_ids;
  int answer_id = 0;
  std::vector<std::pair<int, double>> soft;  // (answer id, score), id-sorted
};

struct DatasetScene {
  Scene scene;
  std::vector<ManifestExpression> expressions;
  std::vector<ManifestQa> qa;
  std::string split;
};

struct Dataset {
  Vocab question_vocab, expression_vocab, answer_vocab;
  std::vector<DatasetScene> scenes;
  int feature_dim = 0;
};

Dataset generate_dataset(const WorldConfig& cfg, int n_scenes);

// manifest.json + features.bin + three vocab files; writes are
// deterministic so a load/write cycle reproduces the bytes.
void write_dataset(const std::string& dir, const Dataset& ds);
Dataset load_dataset(const std::string& dir);

// "JMHV" header (u32 version, count, dim) then count·dim little-endian
// f32; also the ingestion point for externally computed features.
void write_feature_blob(const std::string& path, const std::vector<std::vector<double>>& rows);
std::vector<std::vector<double>> read_feature_blob(const std::string& path);

}  // namespace jemha
