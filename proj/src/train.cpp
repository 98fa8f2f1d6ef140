#include "jemha/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "jemha/checkpoint.hpp"
#include "jemha/metrics.hpp"
#include "jemha/optim.hpp"
#include "jemha/scene.hpp"

namespace jemha {

namespace {

struct SpeakerItem {
  std::size_t scene = 0;
  std::size_t expr = 0;
};

std::vector<int> with_eos(const std::vector<int>& ids) {
  std::vector<int> out = ids;
  out.push_back(kEos);
  return out;
}

template <typename T>
void shuffle_indices(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[static_cast<std::size_t>(rng.randint(0, static_cast<int>(i)))]);
  }
}

std::vector<int> strip_reserved(const std::vector<int>& ids) {
  std::vector<int> out;
  for (int id : ids) {
    if (id >= 4) out.push_back(id);
  }
  return out;
}

double mean_probe_nll(const Dataset& ds, const std::vector<SpeakerItem>& probe, const SpeakerParams& sp,
                      const SpeakerTrainConfig& cfg) {
  NoGradGuard ng;
  double total = 0.0;
  for (const SpeakerItem& it : probe) {
    const DatasetScene& sc = ds.scenes[it.scene];
    const ManifestExpression& e = sc.expressions[it.expr];
    Tensor v = speaker_context(sc.scene, e.object_id, sp, cfg.neighbors, cfg.nms_iou, cfg.zero_local);
    TokenSequence r{with_eos(e.ids), cfg.max_len};
    total += generation_nll(r, v, sp).item();
  }
  return total / static_cast<double>(probe.size());
}

}  // namespace

SpeakerTrainResult train_speaker(const Dataset& ds, const SpeakerTrainConfig& cfg) {
  if (cfg.batch < 2) throw std::invalid_argument("train_speaker: batch must be at least 2");
  if (cfg.iterations < 1) throw std::invalid_argument("train_speaker: need at least one iteration");

  std::vector<SpeakerItem> items;
  for (std::size_t si = 0; si < ds.scenes.size(); ++si) {
    if (ds.scenes[si].split != "train") continue;
    const std::vector<int> kept = nms(ds.scenes[si].scene.objects, cfg.nms_iou);
    for (std::size_t ei = 0; ei < ds.scenes[si].expressions.size(); ++ei) {
      const int obj = ds.scenes[si].expressions[ei].object_id;
      if (std::find(kept.begin(), kept.end(), obj) != kept.end()) items.push_back({si, ei});
    }
  }
  if (items.empty()) throw std::invalid_argument("train_speaker: no training expressions in the dataset");

  Rng rng(cfg.seed);
  const int vocab = ds.expression_vocab.size();
  SpeakerTrainResult res;
  res.models.speaker = SpeakerParams::make(vocab, cfg.word_dim, ds.feature_dim, cfg.ctx_dim, cfg.hidden, rng);
  res.models.reinforcer = ReinforcerParams::make(vocab, cfg.word_dim, cfg.ctx_dim, cfg.hidden, cfg.mlp_hidden, rng);
  res.models.listener = ListenerParams::make(vocab, cfg.word_dim, cfg.ctx_dim, cfg.hidden, cfg.joint_dim, rng);
  SpeakerParams& sp = res.models.speaker;
  ReinforcerParams& rp = res.models.reinforcer;
  ListenerParams& lp = res.models.listener;

  AdamConfig acfg;
  acfg.lr = cfg.lr;
  acfg.grad_clip = cfg.grad_clip;
  Adam adam_sp(sp.parameters(), acfg);
  Adam adam_rp(rp.parameters(), acfg);
  Adam adam_lp(lp.parameters(), acfg);

  std::vector<SpeakerItem> probe(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(
                                                    items.size(), 64)));
  res.probe_nll_start = mean_probe_nll(ds, probe, sp, cfg);

  SpeakerLossConfig slcfg;
  slcfg.mmi = cfg.mmi;
  slcfg.lambda_r = cfg.lambda_r;
  slcfg.n_samples = cfg.n_samples;
  slcfg.max_len = cfg.max_len;

  for (long step = 0; step < cfg.iterations; ++step) {
    std::vector<const SpeakerItem*> batch;
    for (int b = 0; b < cfg.batch; ++b) {
      batch.push_back(&items[static_cast<std::size_t>(rng.randint(0, static_cast<int>(items.size())))]);
    }

    std::vector<Tensor> ctxs, wrong_ctxs;  // wrong_ctxs[i] undefined when the scene has no other object
    std::vector<std::vector<int>> gt_ids;
    SpeakerLossParts parts;
    {
      Tape tape;
      std::vector<SpeakerExample> examples;
      for (const SpeakerItem* it : batch) {
        const DatasetScene& sc = ds.scenes[it->scene];
        const ManifestExpression& e = sc.expressions[it->expr];
        SpeakerExample ex;
        ex.v_i = speaker_context(sc.scene, e.object_id, sp, cfg.neighbors, cfg.nms_iou, cfg.zero_local);
        ex.r_i = TokenSequence{with_eos(e.ids), cfg.max_len};

        const DetectedObject* target = nullptr;
        for (const auto& o : sc.scene.objects) {
          if (o.id == e.object_id) target = &o;
        }
        const std::vector<int> kept = nms(sc.scene.objects, cfg.nms_iou);
        std::vector<int> contrasts, others;
        for (const auto& o : sc.scene.objects) {
          if (o.id == e.object_id || std::find(kept.begin(), kept.end(), o.id) == kept.end()) continue;
          others.push_back(o.id);
          if (o.supercategory == target->supercategory) contrasts.push_back(o.id);
        }
        if (!contrasts.empty()) {
          const int pick = contrasts[static_cast<std::size_t>(rng.randint(0, static_cast<int>(contrasts.size())))];
          ex.v_k = speaker_context(sc.scene, pick, sp, cfg.neighbors, cfg.nms_iou, cfg.zero_local);
        }
        // a contrast expression from a different object, same scene preferred
        std::vector<const ManifestExpression*> other_exprs;
        for (const auto& oe : sc.expressions) {
          if (oe.object_id != e.object_id) other_exprs.push_back(&oe);
        }
        if (!other_exprs.empty()) {
          const auto* pick =
              other_exprs[static_cast<std::size_t>(rng.randint(0, static_cast<int>(other_exprs.size())))];
          ex.r_j = TokenSequence{with_eos(pick->ids), cfg.max_len};
        } else {
          const SpeakerItem& alt = items[static_cast<std::size_t>(rng.randint(0, static_cast<int>(items.size())))];
          ex.r_j = TokenSequence{with_eos(ds.scenes[alt.scene].expressions[alt.expr].ids), cfg.max_len};
        }

        ctxs.push_back(ex.v_i);
        wrong_ctxs.push_back(ex.v_k.defined() && !others.empty()
                                 ? ex.v_k
                                 : (others.empty() ? Tensor()
                                                   : speaker_context(sc.scene,
                                                                     others[static_cast<std::size_t>(rng.randint(
                                                                         0, static_cast<int>(others.size())))],
                                                                     sp, cfg.neighbors, cfg.nms_iou, cfg.zero_local)));
        gt_ids.push_back(ex.r_i.ids);
        examples.push_back(std::move(ex));
      }

      parts = speaker_loss(examples, sp, rp, slcfg, rng);
      if (!std::isfinite(parts.total.item())) {
        throw std::runtime_error("train_speaker: loss diverged (non-finite) at step " + std::to_string(step));
      }
      tape.compute_gradients(parts.total);
      adam_sp.set_lr(speaker_lr(cfg.lr, step, cfg.decay_every, cfg.decay));
      adam_sp.step(tape);
    }

    double reinforcer_loss = 0.0;
    {
      Tape tape;
      std::vector<Tensor> logits;
      std::vector<double> targets;
      for (std::size_t i = 0; i < ctxs.size(); ++i) {
        logits.push_back(reward_logit(gt_ids[i], ctxs[i], rp));
        targets.push_back(1.0);
        if (wrong_ctxs[i].defined()) {
          logits.push_back(reward_logit(gt_ids[i], wrong_ctxs[i], rp));
          targets.push_back(0.0);
        }
      }
      Tensor loss = bce_with_logits_mean(concat(logits, 0), targets);
      reinforcer_loss = loss.item();
      tape.compute_gradients(loss);
      adam_rp.step(tape);
    }

    double listener_loss = 0.0;
    {
      Tape tape;
      Tensor loss = listener_rank_loss(gt_ids, ctxs, lp);
      listener_loss = loss.item();
      tape.compute_gradients(loss);
      adam_lp.step(tape);
    }

    if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.iterations)) {
      const double n = static_cast<double>(cfg.batch);
      SpeakerLogEntry entry{step, parts.generation / n, parts.margin / n, parts.policy / n, reinforcer_loss,
                            listener_loss};
      res.history.push_back(entry);
      if (cfg.on_log) cfg.on_log(step, parts);
    }
    if (cfg.cider_every > 0 && (step + 1) % cfg.cider_every == 0) {
      Dataset probe_ds;
      probe_ds.question_vocab = ds.question_vocab;
      probe_ds.expression_vocab = ds.expression_vocab;
      probe_ds.answer_vocab = ds.answer_vocab;
      probe_ds.feature_dim = ds.feature_dim;
      for (const auto& sc : ds.scenes) {
        if (sc.split == "val" && probe_ds.scenes.size() < 30) probe_ds.scenes.push_back(sc);
      }
      if (!probe_ds.scenes.empty()) {
        const SpeakerEvalResult ev = evaluate_speaker(probe_ds, "val", sp, lp, 10, cfg.max_len, cfg.neighbors,
                                                      cfg.nms_iou, cfg.zero_local);
        res.val_cider.emplace_back(step + 1, ev.cider_score);
      }
    }
  }

  res.probe_nll_end = mean_probe_nll(ds, probe, sp, cfg);
  res.skipped_steps = adam_sp.skipped() + adam_rp.skipped() + adam_lp.skipped();
  return res;
}

// ---------------- expression cache ----------------

ExpressionCache build_expression_cache(const Dataset& ds, const SpeakerParams& sp, const ListenerParams& lp, int beam,
                                       int max_len, int neighbors, double nms_iou, double alpha) {
  NoGradGuard ng;
  ExpressionCache cache;
  for (const DatasetScene& sc : ds.scenes) {
    ExpressionCache::SceneEntry entry;
    for (int id : nms(sc.scene.objects, nms_iou)) {
      Tensor v = speaker_context(sc.scene, id, sp, neighbors, nms_iou);
      const auto hyps = beam_search(v, sp, beam, max_len);
      const BeamHypothesis best = rerank(hyps, v, lp, alpha);
      entry.object_ids.push_back(id);
      entry.expressions.push_back(best.ids);
    }
    cache.scenes.emplace(sc.scene.id, std::move(entry));
  }
  return cache;
}

nlohmann::json cache_to_json(const ExpressionCache& cache) {
  nlohmann::json scenes = nlohmann::json::object();
  for (const auto& [id, entry] : cache.scenes) {
    scenes[id] = {{"objects", entry.object_ids}, {"expressions", entry.expressions}};
  }
  return {{"version", 1}, {"scenes", scenes}};
}

ExpressionCache cache_from_json(const nlohmann::json& j) {
  if (j.value("version", 0) != 1) throw std::runtime_error("expression cache: unsupported version");
  ExpressionCache cache;
  for (const auto& [id, entry] : j.at("scenes").items()) {
    ExpressionCache::SceneEntry e;
    e.object_ids = entry.at("objects").get<std::vector<int>>();
    e.expressions = entry.at("expressions").get<std::vector<std::vector<int>>>();
    if (e.object_ids.size() != e.expressions.size()) {
      throw std::runtime_error("expression cache: objects/expressions length mismatch for scene '" + id + "'");
    }
    cache.scenes.emplace(id, std::move(e));
  }
  return cache;
}

// ---------------- vqa phase ----------------

namespace {

struct ScenePack {
  std::vector<std::vector<double>> features;
  std::vector<TokenSequence> expressions;
};

ScenePack assemble_scene(const DatasetScene& sc, const ExpressionCache& cache, const VqaConfig& cfg) {
  const auto it = cache.scenes.find(sc.scene.id);
  if (it == cache.scenes.end()) {
    throw std::runtime_error("expression cache has no entry for scene '" + sc.scene.id +
                             "'; regenerate the cache from the speaker checkpoint");
  }
  ScenePack pack;
  const auto& entry = it->second;
  const std::size_t m = std::min<std::size_t>(entry.object_ids.size(), static_cast<std::size_t>(cfg.max_objects));
  for (std::size_t i = 0; i < m; ++i) {
    const DetectedObject* obj = nullptr;
    for (const auto& o : sc.scene.objects) {
      if (o.id == entry.object_ids[i]) obj = &o;
    }
    if (!obj) {
      throw std::runtime_error("expression cache names unknown object " + std::to_string(entry.object_ids[i]) +
                               " in scene '" + sc.scene.id + "'; regenerate the cache");
    }
    pack.features.push_back(obj->feature);
    std::vector<int> ids = entry.expressions[i];
    if (ids.empty()) ids.push_back(kEos);
    if (static_cast<int>(ids.size()) > cfg.expression_max_len) ids.resize(static_cast<std::size_t>(cfg.expression_max_len));
    pack.expressions.push_back(TokenSequence{std::move(ids), cfg.expression_max_len});
  }
  return pack;
}

TokenSequence make_question(const ManifestQa& qa, const VqaConfig& cfg) {
  std::vector<int> ids = qa.question_ids;
  if (static_cast<int>(ids.size()) > cfg.question_max_len) ids.resize(static_cast<std::size_t>(cfg.question_max_len));
  return TokenSequence{std::move(ids), cfg.question_max_len};
}

std::vector<double> dense_soft(const ManifestQa& qa, int answer_vocab) {
  std::vector<double> soft(static_cast<std::size_t>(answer_vocab), 0.0);
  for (const auto& [id, s] : qa.soft) soft[static_cast<std::size_t>(id)] = s;
  return soft;
}

int argmax_logits(const Tensor& logits) {
  const auto& v = logits.values();
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

VqaTrainResult train_vqa(const Dataset& ds, const ExpressionCache& cache, const VqaTrainConfig& cfg) {
  if (cfg.batch < 1) throw std::invalid_argument("train_vqa: batch must be positive");
  if (cfg.epochs < 1) throw std::invalid_argument("train_vqa: need at least one epoch");

  struct Sample {
    std::size_t scene = 0;
    std::size_t qa = 0;
  };
  std::vector<Sample> samples;
  std::map<std::size_t, ScenePack> packs;
  for (std::size_t si = 0; si < ds.scenes.size(); ++si) {
    if (ds.scenes[si].split != "train") continue;
    if (ds.scenes[si].qa.empty()) continue;
    packs.emplace(si, assemble_scene(ds.scenes[si], cache, cfg.model));
    for (std::size_t qi = 0; qi < ds.scenes[si].qa.size(); ++qi) samples.push_back({si, qi});
  }
  if (samples.empty()) throw std::invalid_argument("train_vqa: no training questions in the dataset");

  Rng rng(cfg.seed);
  VqaTrainResult res;
  res.model = VqaModelParams::make(cfg.model, ds.question_vocab.size(), ds.expression_vocab.size(), ds.feature_dim,
                                   ds.answer_vocab.size(), rng);
  const std::vector<Tensor> params = res.model.parameters();

  const long steps_per_epoch = static_cast<long>((samples.size() + static_cast<std::size_t>(cfg.batch) - 1) /
                                                 static_cast<std::size_t>(cfg.batch));
  AdamConfig acfg;
  acfg.lr = cfg.lr;
  acfg.grad_clip = cfg.grad_clip;
  acfg.warmup_steps = static_cast<long>(cfg.warmup_frac * static_cast<double>(steps_per_epoch * cfg.epochs));
  Adam adam(params, acfg);

  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    adam.set_lr(vqa_lr(cfg.lr, epoch, cfg.hold_epochs, cfg.decay_every, cfg.decay));
    shuffle_indices(order, rng);

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      Tape tape;
      Tensor batch_loss = Tensor::scalar(0.0);
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = samples[order[i]];
        const ScenePack& pack = packs.at(s.scene);
        const ManifestQa& qa = ds.scenes[s.scene].qa[s.qa];
        const VqaOutput out = vqa_forward(pack.features, make_question(qa, cfg.model), pack.expressions, res.model);
        batch_loss = add(batch_loss, bce_with_logits_mean(out.logits, dense_soft(qa, ds.answer_vocab.size())));
      }
      batch_loss = mul_scalar(batch_loss, 1.0 / static_cast<double>(end - start));
      const double lv = batch_loss.item();
      if (!std::isfinite(lv)) {
        throw std::runtime_error("train_vqa: loss diverged (non-finite) in epoch " + std::to_string(epoch));
      }
      epoch_loss += lv * static_cast<double>(end - start);
      tape.compute_gradients(batch_loss);
      adam.step(tape);
    }
    res.train_loss.push_back(epoch_loss / static_cast<double>(samples.size()));

    const VqaEvalResult val = evaluate_vqa(ds, "val", res.model, cache);
    res.val_accuracy.push_back(val.soft_accuracy);
    if (cfg.on_epoch) cfg.on_epoch(epoch, res.train_loss.back(), val.soft_accuracy);
  }
  res.skipped_steps = adam.skipped();
  return res;
}

// ---------------- evaluation ----------------

VqaEvalResult evaluate_vqa(const Dataset& ds, const std::string& split, const VqaModelParams& model,
                           const ExpressionCache& cache) {
  NoGradGuard ng;
  VqaEvalResult res;
  double total = 0.0;
  for (const DatasetScene& sc : ds.scenes) {
    if (sc.split != split || sc.qa.empty()) continue;
    const ScenePack pack = assemble_scene(sc, cache, model.config);
    for (std::size_t qi = 0; qi < sc.qa.size(); ++qi) {
      const ManifestQa& qa = sc.qa[qi];
      const VqaOutput out = vqa_forward(pack.features, make_question(qa, model.config), pack.expressions, model);
      const int pred = argmax_logits(out.logits);
      const double acc = vqa_accuracy(pred, qa.soft);
      total += acc;
      ++res.items;
      res.records.push_back({sc.scene.id, static_cast<int>(qi), pred, acc});
    }
  }
  if (res.items > 0) res.soft_accuracy = total / static_cast<double>(res.items);
  return res;
}

SpeakerEvalResult evaluate_speaker(const Dataset& ds, const std::string& split, const SpeakerParams& sp,
                                   const ListenerParams& lp, int beam, int max_len, int neighbors, double nms_iou,
                                   bool zero_local, double alpha) {
  NoGradGuard ng;
  std::vector<Sentence> candidates;
  std::vector<std::vector<Sentence>> references;
  for (const DatasetScene& sc : ds.scenes) {
    if (sc.split != split) continue;
    for (int id : nms(sc.scene.objects, nms_iou)) {
      std::vector<Sentence> refs;
      for (const auto& e : sc.expressions) {
        if (e.object_id == id) refs.push_back(e.ids);
      }
      if (refs.empty()) continue;
      Tensor v = speaker_context(sc.scene, id, sp, neighbors, nms_iou, zero_local);
      const BeamHypothesis best = rerank(beam_search(v, sp, beam, max_len), v, lp, alpha);
      candidates.push_back(strip_reserved(best.ids));
      references.push_back(std::move(refs));
    }
  }
  SpeakerEvalResult res;
  res.items = static_cast<int>(candidates.size());
  if (res.items > 0) {
    res.cider_score = cider(candidates, references);
    res.bleu_score = bleu(candidates, references);
  }
  return res;
}

ComprehensionResult evaluate_comprehension(const Dataset& ds, const std::string& split, ComprehendMode mode,
                                           const SpeakerParams& sp, const ReinforcerParams& rp, int neighbors,
                                           double nms_iou) {
  NoGradGuard ng;
  ComprehensionResult res;
  double hits = 0.0;
  long total_objects = 0;
  long scenes = 0;
  for (const DatasetScene& sc : ds.scenes) {
    if (sc.split != split) continue;
    const std::vector<int> kept = nms(sc.scene.objects, nms_iou);
    ++scenes;
    total_objects += static_cast<long>(kept.size());
    for (const auto& e : sc.expressions) {
      if (std::find(kept.begin(), kept.end(), e.object_id) == kept.end()) continue;
      TokenSequence expr{with_eos(e.ids), static_cast<int>(e.ids.size()) + 1};
      const int picked = comprehend(expr, sc.scene, mode, sp, rp, neighbors, nms_iou);
      hits += picked == e.object_id ? 1.0 : 0.0;
      ++res.items;
    }
  }
  if (res.items > 0) res.accuracy = hits / static_cast<double>(res.items);
  if (scenes > 0 && total_objects > 0) {
    res.random_baseline = static_cast<double>(scenes) / static_cast<double>(total_objects);
  }
  return res;
}

// ---------------- explanation export ----------------

namespace {

std::string fmt(double v, int digits) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string render_overlay_svg(const Scene& scene, const std::vector<ExplainEntry>& top) {
  static const char* kColors[3] = {"#d62728", "#ff7f0e", "#e6b800"};
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << fmt(scene.width, 1) << " "
      << fmt(scene.height, 1) << "\">\n";
  svg << "  <rect x=\"0\" y=\"0\" width=\"" << fmt(scene.width, 1) << "\" height=\"" << fmt(scene.height, 1)
      << "\" fill=\"white\"/>\n";
  for (const auto& o : scene.objects) {
    svg << "  <rect x=\"" << fmt(o.box.x_tl, 2) << "\" y=\"" << fmt(o.box.y_tl, 2) << "\" width=\""
        << fmt(o.box.width(), 2) << "\" height=\"" << fmt(o.box.height(), 2)
        << "\" fill=\"none\" stroke=\"#bbbbbb\"/>\n";
  }
  for (std::size_t r = 0; r < top.size(); ++r) {
    const ExplainEntry& e = top[r];
    const char* color = kColors[r % 3];
    svg << "  <rect x=\"" << fmt(e.box.x_tl, 2) << "\" y=\"" << fmt(e.box.y_tl, 2) << "\" width=\""
        << fmt(e.box.width(), 2) << "\" height=\"" << fmt(e.box.height(), 2) << "\" fill=\"" << color
        << "\" fill-opacity=\"" << fmt(0.6 * e.weight, 3) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    svg << "  <text x=\"" << fmt(e.box.x_tl + 1.0, 2) << "\" y=\"" << fmt(e.box.y_tl - 2.0, 2)
        << "\" font-size=\"10\" fill=\"" << color << "\">" << (r + 1) << ": " << fmt(e.weight, 3) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace

ExplainResult explain_query(const Dataset& ds, const ExpressionCache& cache, const VqaModelParams& model,
                            const std::string& scene_id, int qa_index, bool want_svg) {
  const DatasetScene* sc = nullptr;
  for (const auto& s : ds.scenes) {
    if (s.scene.id == scene_id) sc = &s;
  }
  if (!sc) throw std::invalid_argument("explain: unknown scene id '" + scene_id + "'");
  if (qa_index < 0 || qa_index >= static_cast<int>(sc->qa.size())) {
    throw std::invalid_argument("explain: qa index " + std::to_string(qa_index) + " out of range for scene '" +
                                scene_id + "' (" + std::to_string(sc->qa.size()) + " questions)");
  }

  NoGradGuard ng;
  const ManifestQa& qa = sc->qa[static_cast<std::size_t>(qa_index)];
  const ScenePack pack = assemble_scene(*sc, cache, model.config);
  const VqaOutput out = vqa_forward(pack.features, make_question(qa, model.config), pack.expressions, model);

  ExplainResult res;
  res.predicted_id = argmax_logits(out.logits);
  res.answer = ds.answer_vocab.token_of(res.predicted_id);
  res.confidence = 1.0 / (1.0 + std::exp(-out.logits.at(res.predicted_id)));

  const auto& entry = cache.scenes.at(sc->scene.id);
  std::vector<std::size_t> order(out.object_weights.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return out.object_weights[a] > out.object_weights[b]; });
  for (std::size_t r = 0; r < order.size() && r < 3; ++r) {
    const std::size_t i = order[r];
    const int id = entry.object_ids[i];
    res.top.push_back({id, out.object_weights[i], sc->scene.object_by_id(id).box, pack.expressions[i].ids});
  }

  std::ostringstream rep;
  rep << "Q: " << render_tokens(qa.question_ids, ds.question_vocab) << "\n";
  rep << "A: " << res.answer << " p=" << fmt(res.confidence, 6) << "\n";
  for (std::size_t r = 0; r < res.top.size(); ++r) {
    const ExplainEntry& e = res.top[r];
    rep << "O: " << (r + 1) << " id=" << e.object_id << " w=" << fmt(e.weight, 6) << " box=" << fmt(e.box.x_tl, 2)
        << "," << fmt(e.box.y_tl, 2) << "," << fmt(e.box.width(), 2) << "," << fmt(e.box.height(), 2) << "\n";
    rep << "E: " << (r + 1) << " " << render_tokens(strip_reserved(e.expression), ds.expression_vocab) << "\n";
  }
  res.report = rep.str();
  if (want_svg) res.svg = render_overlay_svg(sc->scene, res.top);
  return res;
}

// ---------------- model files ----------------

void save_speaker_bundle(const std::string& path, const SpeakerModels& m) {
  const nlohmann::json config = {
      {"kind", "speaker-bundle"},
      {"vocab", m.speaker.vocab_size},
      {"word_dim", m.speaker.word_dim},
      {"ctx_dim", m.speaker.ctx_dim},
      {"hidden", m.speaker.hidden},
      {"d_v", (m.speaker.w_m.shape()[0] - 10) / 3},
      {"reinforcer_hidden", m.reinforcer.hidden},
      {"mlp_hidden", m.reinforcer.w1.shape()[1]},
      {"listener_hidden", m.listener.expr_w.shape()[0]},
      {"joint_dim", m.listener.expr_w.shape()[1]},
      {"listener_margin", m.listener.margin},
  };
  auto params = prefixed("speaker", named_parameters(m.speaker));
  for (auto& nt : prefixed("reinforcer", named_parameters(m.reinforcer))) params.push_back(std::move(nt));
  for (auto& nt : prefixed("listener", named_parameters(m.listener))) params.push_back(std::move(nt));
  save_checkpoint(path, config, params);
}

SpeakerModels load_speaker_bundle(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.config.value("kind", "") != "speaker-bundle") {
    throw std::runtime_error("checkpoint at '" + path + "' is not a speaker bundle");
  }
  const nlohmann::json& c = ck.config;
  Rng rng(0);  // placeholder values, overwritten below
  SpeakerModels m{SpeakerParams::make(c.at("vocab").get<int>(), c.at("word_dim").get<int>(), c.at("d_v").get<int>(),
                                      c.at("ctx_dim").get<int>(), c.at("hidden").get<int>(), rng),
                  ReinforcerParams::make(c.at("vocab").get<int>(), c.at("word_dim").get<int>(),
                                         c.at("ctx_dim").get<int>(), c.at("reinforcer_hidden").get<int>(),
                                         c.at("mlp_hidden").get<int>(), rng),
                  ListenerParams::make(c.at("vocab").get<int>(), c.at("word_dim").get<int>(),
                                       c.at("ctx_dim").get<int>(), c.at("listener_hidden").get<int>(),
                                       c.at("joint_dim").get<int>(), rng)};
  m.listener.margin = c.at("listener_margin").get<double>();
  auto into = prefixed("speaker", named_parameters(m.speaker));
  for (auto& nt : prefixed("reinforcer", named_parameters(m.reinforcer))) into.push_back(std::move(nt));
  for (auto& nt : prefixed("listener", named_parameters(m.listener))) into.push_back(std::move(nt));
  restore_parameters(ck, into);
  return m;
}

void save_vqa_model(const std::string& path, const VqaModelParams& m) {
  const VqaConfig& c = m.config;
  const nlohmann::json config = {{"kind", "vqa"},
                                 {"d", c.d},
                                 {"heads", c.heads},
                                 {"t", c.t},
                                 {"d_ff", c.d_ff},
                                 {"word_dim", c.word_dim},
                                 {"expr_hidden", c.expr_hidden},
                                 {"question_max_len", c.question_max_len},
                                 {"expression_max_len", c.expression_max_len},
                                 {"max_objects", c.max_objects},
                                 {"question_gru", c.question_gru},
                                 {"q_residual", c.q_residual},
                                 {"use_visual", c.use_visual},
                                 {"use_textual", c.use_textual},
                                 {"question_vocab", m.question.embed.table.shape()[0]},
                                 {"expression_vocab", m.expression.embed.table.shape()[0]},
                                 {"d_v", m.d_v},
                                 {"answer_vocab", m.answer_vocab}};
  save_checkpoint(path, config, named_parameters(m));
}

VqaModelParams load_vqa_model(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.config.value("kind", "") != "vqa") {
    throw std::runtime_error("checkpoint at '" + path + "' is not a vqa model");
  }
  const nlohmann::json& j = ck.config;
  VqaConfig c;
  c.d = j.at("d").get<int>();
  c.heads = j.at("heads").get<int>();
  c.t = j.at("t").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.word_dim = j.at("word_dim").get<int>();
  c.expr_hidden = j.at("expr_hidden").get<int>();
  c.question_max_len = j.at("question_max_len").get<int>();
  c.expression_max_len = j.at("expression_max_len").get<int>();
  c.max_objects = j.at("max_objects").get<int>();
  c.question_gru = j.at("question_gru").get<bool>();
  c.q_residual = j.at("q_residual").get<bool>();
  c.use_visual = j.at("use_visual").get<bool>();
  c.use_textual = j.at("use_textual").get<bool>();
  Rng rng(0);  // placeholder values, overwritten below
  VqaModelParams m = VqaModelParams::make(c, j.at("question_vocab").get<int>(), j.at("expression_vocab").get<int>(),
                                          j.at("d_v").get<int>(), j.at("answer_vocab").get<int>(), rng);
  restore_parameters(ck, named_parameters(m));
  return m;
}

}  // namespace jemha
