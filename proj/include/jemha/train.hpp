#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "jemha/attention.hpp"
#include "jemha/microdata.hpp"
#include "jemha/speaker.hpp"

namespace jemha {

// ---------------- speaker phase ----------------

struct SpeakerTrainConfig {
  int iterations = 600;
  int batch = 32;
  double lr = 4e-4;
  long decay_every = 500;  // lr halves every this many iterations
  double decay = 0.5;
  MmiConfig mmi;
  double lambda_r = 1.0;
  int n_samples = 3;
  int max_len = 20;
  int neighbors = 20;
  double nms_iou = 0.7;
  bool zero_local = false;  // train without the δo/δl context slots
  int word_dim = 32;
  int ctx_dim = 32;
  int hidden = 64;
  int mlp_hidden = 32;
  int joint_dim = 32;
  double grad_clip = 10.0;  // tames occasional policy-gradient spikes
  std::uint64_t seed = 1;
  int log_every = 50;
  long cider_every = 0;  // 0 disables the periodic val-CIDEr probe
  std::function<void(long step, const SpeakerLossParts& parts)> on_log;
};

struct SpeakerModels {
  SpeakerParams speaker;
  ReinforcerParams reinforcer;
  ListenerParams listener;
};

struct SpeakerLogEntry {
  long step = 0;
  double generation = 0.0, margin = 0.0, policy = 0.0;
  double reinforcer_loss = 0.0, listener_loss = 0.0;
};

struct SpeakerTrainResult {
  SpeakerModels models;
  // mean per-expression NLL on a fixed probe set before/after training
  double probe_nll_start = 0.0;
  double probe_nll_end = 0.0;
  std::vector<SpeakerLogEntry> history;
  std::vector<std::pair<long, double>> val_cider;  // (step, score) probes
  int skipped_steps = 0;
};

// Joint loop: the speaker minimizes generation + margin + policy loss, the
// reinforcer trains on matched/mismatched (expression, object) pairs, the
// listener on in-batch ranking. A non-finite loss aborts with a diagnostic.
SpeakerTrainResult train_speaker(const Dataset& ds, const SpeakerTrainConfig& cfg);

// ---------------- expression cache ----------------

// Beam-searched, listener-reranked expression per NMS-kept object; the
// frozen-speaker input to VQA training and evaluation.
struct ExpressionCache {
  struct SceneEntry {
    std::vector<int> object_ids;  // keep order
    std::vector<std::vector<int>> expressions;
  };
  std::map<std::string, SceneEntry> scenes;
};

ExpressionCache build_expression_cache(const Dataset& ds, const SpeakerParams& sp, const ListenerParams& lp,
                                       int beam = 10, int max_len = 20, int neighbors = 20, double nms_iou = 0.7,
                                       double alpha = 0.5);

nlohmann::json cache_to_json(const ExpressionCache& cache);
ExpressionCache cache_from_json(const nlohmann::json& j);

// ---------------- vqa phase ----------------

struct VqaTrainConfig {
  VqaConfig model;
  int epochs = 13;
  int batch = 32;
  double lr = 1e-3;
  int hold_epochs = 10;  // epochs at full lr before decay
  int decay_every = 2;
  double decay = 0.2;
  double warmup_frac = 0.05;  // linear warmup over this share of all steps
  double grad_clip = 5.0;
  std::uint64_t seed = 1;
  std::function<void(int epoch, double train_loss, double val_accuracy)> on_epoch;
};

struct VqaTrainResult {
  VqaModelParams model;
  std::vector<double> train_loss;    // per-epoch mean
  std::vector<double> val_accuracy;  // per-epoch soft accuracy
  int skipped_steps = 0;
};

// Soft-score binary cross-entropy over vqa_forward with the warmup/decay
// schedule. A scene absent from the cache is an error telling the caller
// to regenerate it from the speaker checkpoint.
VqaTrainResult train_vqa(const Dataset& ds, const ExpressionCache& cache, const VqaTrainConfig& cfg);

// ---------------- evaluation ----------------

struct VqaEvalRecord {
  std::string scene_id;
  int qa_index = 0;
  int predicted_id = 0;
  double accuracy = 0.0;
};

struct VqaEvalResult {
  double soft_accuracy = 0.0;
  int items = 0;
  std::vector<VqaEvalRecord> records;
};

VqaEvalResult evaluate_vqa(const Dataset& ds, const std::string& split, const VqaModelParams& model,
                           const ExpressionCache& cache);

struct SpeakerEvalResult {
  double cider_score = 0.0;
  double bleu_score = 0.0;
  int items = 0;
};

// Beam + rerank per kept object against its reference expressions.
SpeakerEvalResult evaluate_speaker(const Dataset& ds, const std::string& split, const SpeakerParams& sp,
                                   const ListenerParams& lp, int beam = 10, int max_len = 20, int neighbors = 20,
                                   double nms_iou = 0.7, bool zero_local = false, double alpha = 0.5);

struct ComprehensionResult {
  double accuracy = 0.0;
  double random_baseline = 0.0;  // 1 / mean kept objects per scene
  int items = 0;
};

ComprehensionResult evaluate_comprehension(const Dataset& ds, const std::string& split, ComprehendMode mode,
                                           const SpeakerParams& sp, const ReinforcerParams& rp, int neighbors = 20,
                                           double nms_iou = 0.7);

// ---------------- explanation export ----------------

struct ExplainEntry {
  int object_id = 0;
  double weight = 0.0;
  BoundingBox box;
  std::vector<int> expression;
};

struct ExplainResult {
  int predicted_id = 0;           // answer vocab id
  std::string answer;             // rendered answer token
  double confidence = 0.0;        // sigmoid of the winning logit
  std::vector<ExplainEntry> top;  // fusion-weight ranked, at most three
  std::string report;
  std::string svg;  // filled only when requested
};

// Line schema of `report` (one record per line, space-separated):
//   Q: <question words>
//   A: <answer word> p=<confidence>
// then per rank r = 1..min(3, objects), a pair of lines
//   O: <r> id=<object id> w=<fusion weight> box=<x>,<y>,<w>,<h>
//   E: <r> <expression words>
// Weights come from one softmax, so the printed ones sum to at most 1.
ExplainResult explain_query(const Dataset& ds, const ExpressionCache& cache, const VqaModelParams& model,
                            const std::string& scene_id, int qa_index, bool want_svg = false);

// ---------------- model files ----------------

// One checkpoint holding the speaker, reinforcer, and listener under name
// prefixes, with every dimension needed to rebuild them in the config.
void save_speaker_bundle(const std::string& path, const SpeakerModels& m);
SpeakerModels load_speaker_bundle(const std::string& path);

void save_vqa_model(const std::string& path, const VqaModelParams& m);
VqaModelParams load_vqa_model(const std::string& path);

}  // namespace jemha
