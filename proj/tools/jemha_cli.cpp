// Command-line front end: data generation, the two training phases,
// evaluation, explanation export, gradient verification, and checkpoint
// inspection. Every run writes a run_config.json (all resolved flags plus
// the seed) under --out and never touches anything outside it.
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "jemha/checkpoint.hpp"
#include "jemha/gradcheck.hpp"
#include "jemha/microdata.hpp"
#include "jemha/rng.hpp"
#include "jemha/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kGradTolerance = 1e-4;

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + p.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_run_config(const std::string& out, const std::string& command, const json& flags) {
  fs::create_directories(out);
  const json j = {{"command", command}, {"flags", flags}};
  write_text(fs::path(out) / "run_config.json", j.dump(2) + "\n");
}

// ---------------- gen-data ----------------

struct GenDataOpts {
  std::string out;
  int scenes = 1000;
  jemha::WorldConfig wc;
};

void run_gen_data(const GenDataOpts& o) {
  write_run_config(o.out, "gen-data",
                   {{"out", o.out},
                    {"scenes", o.scenes},
                    {"seed", o.wc.seed},
                    {"grid", o.wc.grid},
                    {"canvas", o.wc.canvas},
                    {"min_objects", o.wc.min_objects},
                    {"max_objects", o.wc.max_objects},
                    {"noise_sd", o.wc.noise_sd},
                    {"annotators", o.wc.annotators},
                    {"annotator_error", o.wc.annotator_error},
                    {"qa_per_scene", o.wc.qa_per_scene},
                    {"question_max_len", o.wc.question_max_len},
                    {"expression_max_len", o.wc.expression_max_len}});
  const jemha::Dataset ds = jemha::generate_dataset(o.wc, o.scenes);
  jemha::write_dataset(o.out, ds);
  int train = 0, val = 0, test = 0;
  for (const auto& sc : ds.scenes) {
    train += sc.split == "train";
    val += sc.split == "val";
    test += sc.split == "test";
  }
  std::cout << "wrote " << ds.scenes.size() << " scenes (train " << train << " / val " << val << " / test " << test
            << ") to " << o.out << "\n";
  std::cout << "question vocab " << ds.question_vocab.size() << ", expression vocab " << ds.expression_vocab.size()
            << ", answer vocab " << ds.answer_vocab.size() << ", feature dim " << ds.feature_dim << "\n";
}

// ---------------- train-speaker ----------------

struct TrainSpeakerOpts {
  std::string data, out;
  jemha::SpeakerTrainConfig cfg;
};

void run_train_speaker(const TrainSpeakerOpts& o) {
  write_run_config(o.out, "train-speaker",
                   {{"data", o.data},
                    {"out", o.out},
                    {"seed", o.cfg.seed},
                    {"iterations", o.cfg.iterations},
                    {"batch", o.cfg.batch},
                    {"lr", o.cfg.lr},
                    {"decay_every", o.cfg.decay_every},
                    {"decay", o.cfg.decay},
                    {"lambda1", o.cfg.mmi.lambda1},
                    {"lambda2", o.cfg.mmi.lambda2},
                    {"margin1", o.cfg.mmi.m1},
                    {"margin2", o.cfg.mmi.m2},
                    {"lambda_r", o.cfg.lambda_r},
                    {"samples", o.cfg.n_samples},
                    {"max_len", o.cfg.max_len},
                    {"neighbors", o.cfg.neighbors},
                    {"nms_iou", o.cfg.nms_iou},
                    {"zero_local", o.cfg.zero_local},
                    {"word_dim", o.cfg.word_dim},
                    {"ctx_dim", o.cfg.ctx_dim},
                    {"hidden", o.cfg.hidden},
                    {"mlp_hidden", o.cfg.mlp_hidden},
                    {"joint_dim", o.cfg.joint_dim},
                    {"grad_clip", o.cfg.grad_clip},
                    {"log_every", o.cfg.log_every},
                    {"cider_every", o.cfg.cider_every}});
  const jemha::Dataset ds = jemha::load_dataset(o.data);
  jemha::SpeakerTrainConfig cfg = o.cfg;
  const double n = static_cast<double>(cfg.batch);
  cfg.on_log = [n](long step, const jemha::SpeakerLossParts& parts) {
    std::cout << "step " << step << " generation " << parts.generation / n << " margin " << parts.margin / n
              << " policy " << parts.policy / n << "\n";
  };
  const jemha::SpeakerTrainResult res = jemha::train_speaker(ds, cfg);
  jemha::save_speaker_bundle((fs::path(o.out) / "speaker.ckpt").string(), res.models);

  json history = json::array();
  for (const auto& e : res.history) {
    history.push_back({{"step", e.step},
                       {"generation", e.generation},
                       {"margin", e.margin},
                       {"policy", e.policy},
                       {"reinforcer_loss", e.reinforcer_loss},
                       {"listener_loss", e.listener_loss}});
  }
  json val_cider = json::array();
  for (const auto& [step, score] : res.val_cider) val_cider.push_back({{"step", step}, {"cider", score}});
  write_text(fs::path(o.out) / "history.json", json{{"probe_nll_start", res.probe_nll_start},
                                                    {"probe_nll_end", res.probe_nll_end},
                                                    {"skipped_steps", res.skipped_steps},
                                                    {"history", history},
                                                    {"val_cider", val_cider}}
                                                   .dump(2) +
                                                   "\n");
  std::cout << "probe nll " << res.probe_nll_start << " -> " << res.probe_nll_end << "\n";
  std::cout << "saved speaker bundle to " << (fs::path(o.out) / "speaker.ckpt").string() << "\n";
}

// ---------------- expression cache plumbing ----------------

jemha::ExpressionCache obtain_cache(const jemha::Dataset& ds, const std::string& cache_path,
                                    const std::string& speaker_path, int beam, int gen_max_len, int neighbors,
                                    double nms_iou, double alpha, const std::string& save_to) {
  if (!cache_path.empty()) {
    return jemha::cache_from_json(json::parse(read_text(cache_path)));
  }
  const jemha::SpeakerModels m = jemha::load_speaker_bundle(speaker_path);
  const jemha::ExpressionCache cache =
      jemha::build_expression_cache(ds, m.speaker, m.listener, beam, gen_max_len, neighbors, nms_iou, alpha);
  if (!save_to.empty()) write_text(save_to, jemha::cache_to_json(cache).dump() + "\n");
  return cache;
}

// ---------------- train-vqa ----------------

struct TrainVqaOpts {
  std::string data, out, speaker, cache;
  jemha::VqaTrainConfig cfg;
  int beam = 10;
  int gen_max_len = 20;
  int neighbors = 20;
  double nms_iou = 0.7;
  double alpha = 0.5;
  bool no_visual = false, no_textual = false;
};

void run_train_vqa(const TrainVqaOpts& o) {
  if (o.speaker.empty() && o.cache.empty()) {
    throw CLI::RequiredError("--speaker or --cache");
  }
  jemha::VqaTrainConfig cfg = o.cfg;
  cfg.model.use_visual = !o.no_visual;
  cfg.model.use_textual = !o.no_textual;
  write_run_config(o.out, "train-vqa",
                   {{"data", o.data},
                    {"out", o.out},
                    {"speaker", o.speaker},
                    {"cache", o.cache},
                    {"seed", cfg.seed},
                    {"epochs", cfg.epochs},
                    {"batch", cfg.batch},
                    {"lr", cfg.lr},
                    {"hold_epochs", cfg.hold_epochs},
                    {"decay_every", cfg.decay_every},
                    {"decay", cfg.decay},
                    {"warmup_frac", cfg.warmup_frac},
                    {"grad_clip", cfg.grad_clip},
                    {"d", cfg.model.d},
                    {"heads", cfg.model.heads},
                    {"recursions", cfg.model.t},
                    {"d_ff", cfg.model.d_ff},
                    {"word_dim", cfg.model.word_dim},
                    {"expr_hidden", cfg.model.expr_hidden},
                    {"question_max_len", cfg.model.question_max_len},
                    {"expression_max_len", cfg.model.expression_max_len},
                    {"max_objects", cfg.model.max_objects},
                    {"question_gru", cfg.model.question_gru},
                    {"q_residual", cfg.model.q_residual},
                    {"use_visual", cfg.model.use_visual},
                    {"use_textual", cfg.model.use_textual},
                    {"beam", o.beam},
                    {"gen_max_len", o.gen_max_len},
                    {"neighbors", o.neighbors},
                    {"nms_iou", o.nms_iou},
                    {"alpha", o.alpha}});
  const jemha::Dataset ds = jemha::load_dataset(o.data);
  const jemha::ExpressionCache cache = obtain_cache(ds, o.cache, o.speaker, o.beam, o.gen_max_len, o.neighbors,
                                                    o.nms_iou, o.alpha, (fs::path(o.out) / "cache.json").string());
  cfg.on_epoch = [](int epoch, double train_loss, double val_accuracy) {
    std::cout << "epoch " << epoch << " train_loss " << train_loss << " val_accuracy " << val_accuracy << "\n";
  };
  const jemha::VqaTrainResult res = jemha::train_vqa(ds, cache, cfg);
  jemha::save_vqa_model((fs::path(o.out) / "vqa.ckpt").string(), res.model);
  write_text(fs::path(o.out) / "metrics.json", json{{"train_loss", res.train_loss},
                                                    {"val_accuracy", res.val_accuracy},
                                                    {"skipped_steps", res.skipped_steps}}
                                                   .dump(2) +
                                                   "\n");
  std::cout << "final val_accuracy " << (res.val_accuracy.empty() ? 0.0 : res.val_accuracy.back()) << "\n";
  std::cout << "saved vqa model to " << (fs::path(o.out) / "vqa.ckpt").string() << "\n";
}

// ---------------- eval ----------------

struct EvalOpts {
  std::string data, out, task, split = "test", checkpoint, speaker, cache, mode = "speaker";
  int beam = 10;
  int max_len = 20;
  int neighbors = 20;
  double nms_iou = 0.7;
  double alpha = 0.5;
  bool zero_local = false;
  std::uint64_t seed = 1;
};

void run_eval(const EvalOpts& o) {
  write_run_config(o.out, "eval",
                   {{"data", o.data},
                    {"out", o.out},
                    {"task", o.task},
                    {"split", o.split},
                    {"checkpoint", o.checkpoint},
                    {"speaker", o.speaker},
                    {"cache", o.cache},
                    {"mode", o.mode},
                    {"beam", o.beam},
                    {"max_len", o.max_len},
                    {"neighbors", o.neighbors},
                    {"nms_iou", o.nms_iou},
                    {"alpha", o.alpha},
                    {"zero_local", o.zero_local},
                    {"seed", o.seed}});
  const jemha::Dataset ds = jemha::load_dataset(o.data);
  json metrics = {{"task", o.task}, {"split", o.split}};
  if (o.task == "vqa") {
    if (o.checkpoint.empty()) throw CLI::RequiredError("--checkpoint");
    if (o.cache.empty() && o.speaker.empty()) throw CLI::RequiredError("--speaker or --cache");
    const jemha::VqaModelParams model = jemha::load_vqa_model(o.checkpoint);
    const jemha::ExpressionCache cache =
        obtain_cache(ds, o.cache, o.speaker, o.beam, o.max_len, o.neighbors, o.nms_iou, o.alpha, "");
    const jemha::VqaEvalResult res = jemha::evaluate_vqa(ds, o.split, model, cache);
    std::cout << "accuracy " << res.soft_accuracy << "\n" << "items " << res.items << "\n";
    metrics["soft_accuracy"] = res.soft_accuracy;
    metrics["items"] = res.items;
  } else if (o.task == "speaker") {
    if (o.speaker.empty()) throw CLI::RequiredError("--speaker");
    const jemha::SpeakerModels m = jemha::load_speaker_bundle(o.speaker);
    const jemha::SpeakerEvalResult res = jemha::evaluate_speaker(ds, o.split, m.speaker, m.listener, o.beam,
                                                                 o.max_len, o.neighbors, o.nms_iou, o.zero_local,
                                                                 o.alpha);
    std::cout << "cider " << res.cider_score << "\n"
              << "bleu " << res.bleu_score << "\n"
              << "items " << res.items << "\n";
    metrics["cider"] = res.cider_score;
    metrics["bleu"] = res.bleu_score;
    metrics["items"] = res.items;
  } else {  // comprehension
    if (o.speaker.empty()) throw CLI::RequiredError("--speaker");
    const jemha::SpeakerModels m = jemha::load_speaker_bundle(o.speaker);
    const jemha::ComprehendMode mode =
        o.mode == "reinforcer" ? jemha::ComprehendMode::reinforcer : jemha::ComprehendMode::speaker;
    const jemha::ComprehensionResult res =
        jemha::evaluate_comprehension(ds, o.split, mode, m.speaker, m.reinforcer, o.neighbors, o.nms_iou);
    std::cout << "accuracy " << res.accuracy << "\n"
              << "baseline " << res.random_baseline << "\n"
              << "items " << res.items << "\n";
    metrics["accuracy"] = res.accuracy;
    metrics["random_baseline"] = res.random_baseline;
    metrics["items"] = res.items;
  }
  write_text(fs::path(o.out) / "metrics.json", metrics.dump(2) + "\n");
}

// ---------------- explain ----------------

struct ExplainOpts {
  std::string data, out, checkpoint, speaker, cache, scene;
  int qa = 0;
  bool svg = false;
  int beam = 10;
  int max_len = 20;
  int neighbors = 20;
  double nms_iou = 0.7;
  double alpha = 0.5;
  std::uint64_t seed = 1;
};

void run_explain(const ExplainOpts& o) {
  if (o.cache.empty() && o.speaker.empty()) throw CLI::RequiredError("--speaker or --cache");
  write_run_config(o.out, "explain",
                   {{"data", o.data},
                    {"out", o.out},
                    {"checkpoint", o.checkpoint},
                    {"speaker", o.speaker},
                    {"cache", o.cache},
                    {"scene", o.scene},
                    {"qa", o.qa},
                    {"svg", o.svg},
                    {"beam", o.beam},
                    {"max_len", o.max_len},
                    {"neighbors", o.neighbors},
                    {"nms_iou", o.nms_iou},
                    {"alpha", o.alpha},
                    {"seed", o.seed}});
  const jemha::Dataset ds = jemha::load_dataset(o.data);
  const jemha::VqaModelParams model = jemha::load_vqa_model(o.checkpoint);
  const jemha::ExpressionCache cache =
      obtain_cache(ds, o.cache, o.speaker, o.beam, o.max_len, o.neighbors, o.nms_iou, o.alpha, "");
  const jemha::ExplainResult res = jemha::explain_query(ds, cache, model, o.scene, o.qa, o.svg);
  std::cout << res.report;
  write_text(fs::path(o.out) / "report.txt", res.report);
  if (o.svg) write_text(fs::path(o.out) / "overlay.svg", res.svg);
}

// ---------------- gradcheck ----------------

struct GradcheckOpts {
  std::string out;
  int instances = 20;
  std::uint64_t seed = 1;
};

int run_gradcheck(const GradcheckOpts& o) {
  write_run_config(o.out, "gradcheck",
                   {{"out", o.out}, {"instances", o.instances}, {"seed", o.seed}, {"tolerance", kGradTolerance}});
  jemha::Rng rng(o.seed);
  bool all_pass = true;
  json report = json::array();
  for (const auto& op : jemha::op_registry()) {
    double worst = 0.0;
    for (int i = 0; i < o.instances; ++i) worst = std::max(worst, op.check(rng));
    const bool pass = worst < kGradTolerance;
    all_pass = all_pass && pass;
    std::cout << "op " << op.name << " max_err " << worst << (pass ? " pass" : " FAIL") << "\n";
    report.push_back({{"op", op.name}, {"max_err", worst}, {"pass", pass}});
  }
  write_text(fs::path(o.out) / "gradcheck.json",
             json{{"tolerance", kGradTolerance}, {"instances", o.instances}, {"ops", report}}.dump(2) + "\n");
  std::cout << (all_pass ? "all ops pass" : "FAILURES above tolerance") << "\n";
  return all_pass ? 0 : 1;
}

// ---------------- inspect-checkpoint ----------------

struct InspectOpts {
  std::string checkpoint, out;
  std::uint64_t seed = 1;
};

void run_inspect(const InspectOpts& o) {
  write_run_config(o.out, "inspect-checkpoint", {{"checkpoint", o.checkpoint}, {"out", o.out}, {"seed", o.seed}});
  const jemha::Checkpoint ck = jemha::load_checkpoint(o.checkpoint);
  std::cout << "config " << ck.config.dump() << "\n";
  std::size_t total = 0;
  json entries = json::array();
  for (const auto& [name, entry] : ck.params) {
    std::string shape;
    for (std::size_t i = 0; i < entry.shape.size(); ++i) {
      if (i) shape += "x";
      shape += std::to_string(entry.shape[i]);
    }
    std::cout << "param " << name << " shape " << shape << " numel " << entry.values.size() << "\n";
    total += entry.values.size();
    entries.push_back({{"name", name}, {"shape", entry.shape}, {"numel", entry.values.size()}});
  }
  std::cout << "total parameters " << total << "\n";
  write_text(fs::path(o.out) / "inspect.json",
             json{{"config", ck.config}, {"params", entries}, {"total", total}}.dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale scene-aware expression-generation VQA pipeline"};
  app.require_subcommand(1);
  int rc = 0;

  GenDataOpts gen;
  CLI::App* c_gen = app.add_subcommand("gen-data", "generate a synthetic scene/question dataset");
  c_gen->add_option("--out", gen.out, "output directory")->required();
  c_gen->add_option("--scenes", gen.scenes, "number of scenes");
  c_gen->add_option("--seed", gen.wc.seed, "world seed");
  c_gen->add_option("--grid", gen.wc.grid, "placement cells per side");
  c_gen->add_option("--canvas", gen.wc.canvas, "canvas size in pixels");
  c_gen->add_option("--min-objects", gen.wc.min_objects, "minimum objects per scene");
  c_gen->add_option("--max-objects", gen.wc.max_objects, "maximum objects per scene");
  c_gen->add_option("--noise-sd", gen.wc.noise_sd, "feature noise standard deviation");
  c_gen->add_option("--annotators", gen.wc.annotators, "simulated annotators per question");
  c_gen->add_option("--annotator-error", gen.wc.annotator_error, "annotator error rate");
  c_gen->add_option("--qa-per-scene", gen.wc.qa_per_scene, "questions per scene");
  c_gen->add_option("--question-max-len", gen.wc.question_max_len, "question token cap");
  c_gen->add_option("--expression-max-len", gen.wc.expression_max_len, "expression token cap");
  c_gen->callback([&gen] { run_gen_data(gen); });

  TrainSpeakerOpts tsp;
  CLI::App* c_tsp = app.add_subcommand("train-speaker", "train speaker, reinforcer, and listener jointly");
  c_tsp->add_option("--data", tsp.data, "dataset directory")->required();
  c_tsp->add_option("--out", tsp.out, "output directory")->required();
  c_tsp->add_option("--seed", tsp.cfg.seed, "training seed");
  c_tsp->add_option("--iterations", tsp.cfg.iterations, "training iterations");
  c_tsp->add_option("--batch", tsp.cfg.batch, "batch size");
  c_tsp->add_option("--lr", tsp.cfg.lr, "initial learning rate");
  c_tsp->add_option("--decay-every", tsp.cfg.decay_every, "iterations between learning-rate decays");
  c_tsp->add_option("--decay", tsp.cfg.decay, "learning-rate decay factor");
  c_tsp->add_option("--lambda1", tsp.cfg.mmi.lambda1, "margin weight, contrast object");
  c_tsp->add_option("--lambda2", tsp.cfg.mmi.lambda2, "margin weight, contrast expression");
  c_tsp->add_option("--margin1", tsp.cfg.mmi.m1, "margin, contrast object");
  c_tsp->add_option("--margin2", tsp.cfg.mmi.m2, "margin, contrast expression");
  c_tsp->add_option("--lambda-r", tsp.cfg.lambda_r, "policy-gradient weight");
  c_tsp->add_option("--samples", tsp.cfg.n_samples, "sampled expressions per example");
  c_tsp->add_option("--max-len", tsp.cfg.max_len, "sampling length cap");
  c_tsp->add_option("--neighbors", tsp.cfg.neighbors, "k-nearest neighbors in the context");
  c_tsp->add_option("--nms-iou", tsp.cfg.nms_iou, "detector suppression threshold");
  c_tsp->add_flag("--zero-local", tsp.cfg.zero_local, "zero the local-context slots");
  c_tsp->add_option("--word-dim", tsp.cfg.word_dim, "word embedding size");
  c_tsp->add_option("--ctx-dim", tsp.cfg.ctx_dim, "context projection size");
  c_tsp->add_option("--hidden", tsp.cfg.hidden, "recurrent state size");
  c_tsp->add_option("--mlp-hidden", tsp.cfg.mlp_hidden, "reinforcer MLP width");
  c_tsp->add_option("--joint-dim", tsp.cfg.joint_dim, "listener joint-space size");
  c_tsp->add_option("--grad-clip", tsp.cfg.grad_clip, "global gradient-norm cap");
  c_tsp->add_option("--log-every", tsp.cfg.log_every, "steps between log entries");
  c_tsp->add_option("--cider-every", tsp.cfg.cider_every, "steps between val-CIDEr probes (0 disables)");
  c_tsp->callback([&tsp] { run_train_speaker(tsp); });

  TrainVqaOpts tvq;
  CLI::App* c_tvq = app.add_subcommand("train-vqa", "train the answering network on cached expressions");
  c_tvq->add_option("--data", tvq.data, "dataset directory")->required();
  c_tvq->add_option("--out", tvq.out, "output directory")->required();
  c_tvq->add_option("--speaker", tvq.speaker, "speaker bundle for cache generation");
  c_tvq->add_option("--cache", tvq.cache, "precomputed expression cache (json)");
  c_tvq->add_option("--seed", tvq.cfg.seed, "training seed");
  c_tvq->add_option("--epochs", tvq.cfg.epochs, "training epochs");
  c_tvq->add_option("--batch", tvq.cfg.batch, "batch size");
  c_tvq->add_option("--lr", tvq.cfg.lr, "initial learning rate");
  c_tvq->add_option("--hold-epochs", tvq.cfg.hold_epochs, "epochs at full rate before decay");
  c_tvq->add_option("--decay-every", tvq.cfg.decay_every, "epochs between decays");
  c_tvq->add_option("--decay", tvq.cfg.decay, "decay factor");
  c_tvq->add_option("--warmup-frac", tvq.cfg.warmup_frac, "linear-warmup share of all steps");
  c_tvq->add_option("--grad-clip", tvq.cfg.grad_clip, "global gradient-norm cap");
  c_tvq->add_option("--d", tvq.cfg.model.d, "model width");
  c_tvq->add_option("--heads", tvq.cfg.model.heads, "attention heads");
  c_tvq->add_option("--recursions", tvq.cfg.model.t, "co-attention recursion depth");
  c_tvq->add_option("--d-ff", tvq.cfg.model.d_ff, "feed-forward width");
  c_tvq->add_option("--word-dim", tvq.cfg.model.word_dim, "word embedding size");
  c_tvq->add_option("--expr-hidden", tvq.cfg.model.expr_hidden, "expression encoder state size");
  c_tvq->add_option("--question-max-len", tvq.cfg.model.question_max_len, "question token cap");
  c_tvq->add_option("--expression-max-len", tvq.cfg.model.expression_max_len, "expression token cap");
  c_tvq->add_option("--max-objects", tvq.cfg.model.max_objects, "object cap per scene");
  c_tvq->add_flag("--question-gru", tvq.cfg.model.question_gru, "recurrent question encoder");
  c_tvq->add_flag("--q-residual", tvq.cfg.model.q_residual, "residual + layer norm on the question stream");
  c_tvq->add_flag("--no-visual", tvq.no_visual, "ablate the object stream");
  c_tvq->add_flag("--no-textual", tvq.no_textual, "ablate the expression stream");
  c_tvq->add_option("--beam", tvq.beam, "beam width for cache generation");
  c_tvq->add_option("--gen-max-len", tvq.gen_max_len, "generation length cap for cache");
  c_tvq->add_option("--neighbors", tvq.neighbors, "k-nearest neighbors in the context");
  c_tvq->add_option("--nms-iou", tvq.nms_iou, "detector suppression threshold");
  c_tvq->add_option("--alpha", tvq.alpha, "rerank mixing weight");
  c_tvq->callback([&tvq] { run_train_vqa(tvq); });

  EvalOpts ev;
  CLI::App* c_ev = app.add_subcommand("eval", "evaluate a trained model on a split");
  c_ev->add_option("--data", ev.data, "dataset directory")->required();
  c_ev->add_option("--out", ev.out, "output directory")->required();
  c_ev->add_option("--task", ev.task, "vqa | speaker | comprehension")
      ->required()
      ->check(CLI::IsMember({"vqa", "speaker", "comprehension"}));
  c_ev->add_option("--split", ev.split, "dataset split");
  c_ev->add_option("--checkpoint", ev.checkpoint, "vqa model checkpoint");
  c_ev->add_option("--speaker", ev.speaker, "speaker bundle");
  c_ev->add_option("--cache", ev.cache, "expression cache (json)");
  c_ev->add_option("--mode", ev.mode, "comprehension scorer")->check(CLI::IsMember({"speaker", "reinforcer"}));
  c_ev->add_option("--beam", ev.beam, "beam width");
  c_ev->add_option("--max-len", ev.max_len, "generation length cap");
  c_ev->add_option("--neighbors", ev.neighbors, "k-nearest neighbors in the context");
  c_ev->add_option("--nms-iou", ev.nms_iou, "detector suppression threshold");
  c_ev->add_option("--alpha", ev.alpha, "rerank mixing weight");
  c_ev->add_flag("--zero-local", ev.zero_local, "zero the local-context slots");
  c_ev->add_option("--seed", ev.seed, "seed (recorded; evaluation is deterministic)");
  c_ev->callback([&ev] { run_eval(ev); });

  ExplainOpts ex;
  CLI::App* c_ex = app.add_subcommand("explain", "answer one question and export the attended objects");
  c_ex->add_option("--data", ex.data, "dataset directory")->required();
  c_ex->add_option("--out", ex.out, "output directory")->required();
  c_ex->add_option("--checkpoint", ex.checkpoint, "vqa model checkpoint")->required();
  c_ex->add_option("--speaker", ex.speaker, "speaker bundle for cache generation");
  c_ex->add_option("--cache", ex.cache, "precomputed expression cache (json)");
  c_ex->add_option("--scene", ex.scene, "scene id")->required();
  c_ex->add_option("--qa", ex.qa, "question index within the scene");
  c_ex->add_flag("--svg", ex.svg, "write an overlay.svg of the boxes");
  c_ex->add_option("--beam", ex.beam, "beam width for cache generation");
  c_ex->add_option("--max-len", ex.max_len, "generation length cap for cache");
  c_ex->add_option("--neighbors", ex.neighbors, "k-nearest neighbors in the context");
  c_ex->add_option("--nms-iou", ex.nms_iou, "detector suppression threshold");
  c_ex->add_option("--alpha", ex.alpha, "rerank mixing weight");
  c_ex->add_option("--seed", ex.seed, "seed (recorded; explanation is deterministic)");
  c_ex->callback([&ex] { run_explain(ex); });

  GradcheckOpts gc;
  CLI::App* c_gc = app.add_subcommand("gradcheck", "finite-difference check of every registered op");
  c_gc->add_option("--out", gc.out, "output directory")->required();
  c_gc->add_option("--instances", gc.instances, "random instances per op");
  c_gc->add_option("--seed", gc.seed, "rng seed");
  c_gc->callback([&gc, &rc] { rc = run_gradcheck(gc); });

  InspectOpts in;
  CLI::App* c_in = app.add_subcommand("inspect-checkpoint", "print a checkpoint's config and tensor table");
  c_in->add_option("--checkpoint", in.checkpoint, "checkpoint file")->required();
  c_in->add_option("--out", in.out, "output directory")->required();
  c_in->add_option("--seed", in.seed, "seed (recorded; inspection is deterministic)");
  c_in->callback([&in] { run_inspect(in); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
