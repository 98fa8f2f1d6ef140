// Explanation export, model files, and the command-line binary driven as a
// subprocess (path injected via JEMHA_CLI_PATH).
#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "jemha/rng.hpp"
#include "jemha/train.hpp"

using namespace jemha;
using nlohmann::json;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("jemha-cli-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string str() const { return path.string(); }
  std::string sub(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(JEMHA_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

int run_cli_capture(const std::string& args, const std::string& outfile) {
  const std::string cmd = std::string(JEMHA_CLI_PATH) + " " + args + " > " + outfile + " 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

// ---- report line-schema parser (the documented contract) ----

struct ParsedObject {
  int rank = 0, id = 0;
  double weight = 0.0, x = 0.0, y = 0.0, w = 0.0, h = 0.0;
  bool has_expression = false;
};

struct ParsedReport {
  std::string question, answer;
  double confidence = 0.0;
  std::vector<ParsedObject> objects;
};

// Returns an empty string on success, else a description of the violation.
std::string parse_report(const std::string& text, ParsedReport& out) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("Q: ", 0) != 0) return "missing Q line";
  out.question = line.substr(3);
  if (!std::getline(in, line)) return "missing A line";
  char word[128];
  if (std::sscanf(line.c_str(), "A: %127s p=%lf", word, &out.confidence) != 2) return "bad A line: " + line;
  out.answer = word;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ParsedObject obj;
    if (std::sscanf(line.c_str(), "O: %d id=%d w=%lf box=%lf,%lf,%lf,%lf", &obj.rank, &obj.id, &obj.weight, &obj.x,
                    &obj.y, &obj.w, &obj.h) != 7) {
      return "bad O line: " + line;
    }
    if (!std::getline(in, line)) return "O line without E line";
    int erank = 0, consumed = 0;
    if (std::sscanf(line.c_str(), "E: %d%n", &erank, &consumed) != 1 || erank != obj.rank) {
      return "bad E line: " + line;
    }
    obj.has_expression = true;
    out.objects.push_back(obj);
  }
  for (std::size_t i = 0; i < out.objects.size(); ++i) {
    if (out.objects[i].rank != static_cast<int>(i) + 1) return "ranks not sequential";
    if (i > 0 && out.objects[i].weight > out.objects[i - 1].weight + 1e-12) return "weights not descending";
  }
  if (out.objects.size() > 3) return "more than three objects";
  double sum = 0.0;
  for (const auto& o : out.objects) sum += o.weight;
  // up to three weights, each printed at six decimals, so rounding can add 1.5e-6
  if (sum > 1.0 + 2e-6) return "weights sum past one";
  return "";
}

// ---- shared tiny pipeline state for the library-level cases ----

const Dataset& smoke_dataset() {
  static const Dataset ds = [] {
    WorldConfig wc;
    wc.seed = 11;
    wc.max_objects = 5;
    wc.qa_per_scene = 2;
    return generate_dataset(wc, 40);
  }();
  return ds;
}

VqaConfig tiny_vqa_config() {
  VqaConfig c;
  c.d = 16;
  c.heads = 2;
  c.t = 1;
  c.d_ff = 24;
  c.word_dim = 8;
  c.expr_hidden = 8;
  c.question_max_len = 7;
  c.expression_max_len = 8;
  c.max_objects = 8;
  return c;
}

struct SmokeStack {
  SpeakerModels models;
  ExpressionCache cache;
  VqaModelParams vqa;
};

const SmokeStack& smoke_stack() {
  static const SmokeStack s = [] {
    const Dataset& ds = smoke_dataset();
    Rng rng(5);
    const int vocab = ds.expression_vocab.size();
    SpeakerModels m{SpeakerParams::make(vocab, 8, ds.feature_dim, 8, 16, rng),
                    ReinforcerParams::make(vocab, 8, 8, 16, 8, rng),
                    ListenerParams::make(vocab, 8, 8, 16, 8, rng)};
    ExpressionCache cache = build_expression_cache(ds, m.speaker, m.listener, 3, 6);
    Rng vrng(7);
    VqaModelParams vqa = VqaModelParams::make(tiny_vqa_config(), ds.question_vocab.size(),
                                              ds.expression_vocab.size(), ds.feature_dim, ds.answer_vocab.size(),
                                              vrng);
    return SmokeStack{std::move(m), std::move(cache), std::move(vqa)};
  }();
  return s;
}

}  // namespace

TEST_CASE("explain reports obey the line schema") {
  const Dataset& ds = smoke_dataset();
  const SmokeStack& s = smoke_stack();

  SUBCASE("a thousand random queries all parse, with ordered weights summing at most to one") {
    Rng rng(99);
    for (int i = 0; i < 1000; ++i) {
      const DatasetScene& sc = ds.scenes[static_cast<std::size_t>(rng.randint(0, static_cast<int>(ds.scenes.size())))];
      const int qa = rng.randint(0, static_cast<int>(sc.qa.size()));
      const ExplainResult res = explain_query(ds, s.cache, s.vqa, sc.scene.id, qa);
      ParsedReport parsed;
      const std::string err = parse_report(res.report, parsed);
      if (!err.empty()) {
        CAPTURE(sc.scene.id);
        CAPTURE(res.report);
        FAIL_CHECK(err);
        break;
      }
      REQUIRE(parsed.objects.size() == res.top.size());
      double exact_sum = 0.0;
      for (std::size_t r = 0; r < res.top.size(); ++r) {
        CHECK(parsed.objects[r].id == res.top[r].object_id);
        CHECK(parsed.objects[r].weight == doctest::Approx(res.top[r].weight).epsilon(1e-4));
        exact_sum += res.top[r].weight;
      }
      CHECK(exact_sum <= 1.0 + 1e-9);
      CHECK(res.answer == parsed.answer);
      CHECK(res.confidence > 0.0);
      CHECK(res.confidence < 1.0);
      CHECK(res.svg.empty());
    }
  }

  SUBCASE("unknown scene and out-of-range question index are rejected") {
    CHECK_THROWS_WITH_AS(explain_query(ds, s.cache, s.vqa, "no-such-scene", 0),
                         doctest::Contains("unknown scene id"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(explain_query(ds, s.cache, s.vqa, ds.scenes[0].scene.id, 99),
                         doctest::Contains("out of range"), std::invalid_argument);
  }

  SUBCASE("svg is produced only on request and wraps one rect per scene object") {
    const std::string id = ds.scenes[0].scene.id;
    const ExplainResult res = explain_query(ds, s.cache, s.vqa, id, 0, true);
    CHECK(res.svg.rfind("<svg", 0) == 0);
    CHECK(res.svg.find("</svg>") != std::string::npos);
    std::size_t rects = 0;
    for (std::size_t pos = 0; (pos = res.svg.find("<rect", pos)) != std::string::npos; ++pos) ++rects;
    CHECK(rects >= ds.scenes[0].scene.objects.size());  // background + outlines + highlights
  }

  SUBCASE("a single-object scene yields exactly one ranked line with unit weight") {
    WorldConfig wc;
    wc.seed = 9;
    wc.min_objects = 1;
    wc.max_objects = 1;
    const Dataset one = generate_dataset(wc, 6);
    Rng rng(21);
    const int vocab = one.expression_vocab.size();
    const SpeakerParams sp = SpeakerParams::make(vocab, 8, one.feature_dim, 8, 16, rng);
    const ListenerParams lp = ListenerParams::make(vocab, 8, 8, 16, 8, rng);
    const ExpressionCache cache = build_expression_cache(one, sp, lp, 2, 4);
    Rng vrng(3);
    const VqaModelParams vqa = VqaModelParams::make(tiny_vqa_config(), one.question_vocab.size(),
                                                    one.expression_vocab.size(), one.feature_dim,
                                                    one.answer_vocab.size(), vrng);
    const ExplainResult res = explain_query(one, cache, vqa, one.scenes[0].scene.id, 0);
    ParsedReport parsed;
    REQUIRE(parse_report(res.report, parsed) == "");
    REQUIRE(parsed.objects.size() == 1);
    CHECK(parsed.objects[0].weight == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("model files round trip through disk") {
  const SmokeStack& s = smoke_stack();
  TempDir dir;

  SUBCASE("speaker bundle reloads to a fixed point of the float32 storage") {
    const std::string p1 = dir.sub("bundle1.ckpt"), p2 = dir.sub("bundle2.ckpt");
    save_speaker_bundle(p1, s.models);
    const SpeakerModels loaded = load_speaker_bundle(p1);
    CHECK(loaded.listener.margin == s.models.listener.margin);
    save_speaker_bundle(p2, loaded);
    CHECK(slurp(p1) == slurp(p2));
    // reloaded models drive the full downstream path
    const ExpressionCache cache = build_expression_cache(smoke_dataset(), loaded.speaker, loaded.listener, 2, 4);
    CHECK(cache.scenes.size() == smoke_dataset().scenes.size());
  }

  SUBCASE("vqa model reloads with config intact and stable bytes") {
    const std::string p1 = dir.sub("vqa1.ckpt"), p2 = dir.sub("vqa2.ckpt");
    save_vqa_model(p1, s.vqa);
    const VqaModelParams loaded = load_vqa_model(p1);
    CHECK(loaded.config.d == s.vqa.config.d);
    CHECK(loaded.config.t == s.vqa.config.t);
    CHECK(loaded.config.use_visual == s.vqa.config.use_visual);
    save_vqa_model(p2, loaded);
    CHECK(slurp(p1) == slurp(p2));
    const ExplainResult res =
        explain_query(smoke_dataset(), s.cache, loaded, smoke_dataset().scenes[0].scene.id, 0);
    ParsedReport parsed;
    CHECK(parse_report(res.report, parsed) == "");
  }

  SUBCASE("kind tags keep the two file types apart") {
    const std::string pv = dir.sub("v.ckpt"), ps = dir.sub("s.ckpt");
    save_vqa_model(pv, s.vqa);
    save_speaker_bundle(ps, s.models);
    CHECK_THROWS_WITH_AS(load_speaker_bundle(pv), doctest::Contains("not a speaker bundle"), std::runtime_error);
    CHECK_THROWS_WITH_AS(load_vqa_model(ps), doctest::Contains("not a vqa model"), std::runtime_error);
  }
}

TEST_CASE("command-line exit codes") {
  TempDir dir;
  CHECK(run_cli("") == 2);                                    // no subcommand
  CHECK(run_cli("--bogus") == 2);                             // unknown flag
  CHECK(run_cli("gen-data") == 2);                            // missing required --out
  CHECK(run_cli("gen-data --out " + dir.sub("d") + " --frob 3") == 2);
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("eval --data x --out y --task nonsense") == 2);      // outside the member set
  CHECK(run_cli("train-speaker --data /nonexistent --out " + dir.sub("t")) == 1);
  CHECK(run_cli("train-vqa --data /nonexistent --out " + dir.sub("u")) == 2);  // --speaker or --cache
}

TEST_CASE("command-line pipeline") {
  TempDir dir;
  const std::string data = dir.sub("data"), data2 = dir.sub("data2");
  const std::string gen_flags = " --scenes 24 --seed 7 --max-objects 5 --qa-per-scene 2";

  // gen-data: determinism and the run-config record
  REQUIRE(run_cli("gen-data --out " + data + gen_flags) == 0);
  REQUIRE(run_cli("gen-data --out " + data2 + gen_flags) == 0);
  for (const std::string f : {"manifest.json", "features.bin", "questions.vocab", "expressions.vocab",
                              "answers.vocab"}) {
    CHECK(slurp(data + "/" + f) == slurp(data2 + "/" + f));
  }
  const json gen_rc = json::parse(slurp(data + "/run_config.json"));
  CHECK(gen_rc.at("command") == "gen-data");
  CHECK(gen_rc.at("flags").at("seed") == 7);
  CHECK(gen_rc.at("flags").at("scenes") == 24);

  // train-speaker
  const std::string spk = dir.sub("spk");
  REQUIRE(run_cli("train-speaker --data " + data + " --out " + spk +
                  " --iterations 10 --batch 4 --word-dim 8 --ctx-dim 8 --hidden 16 --mlp-hidden 8"
                  " --joint-dim 8 --samples 1 --max-len 6 --log-every 5 --seed 3") == 0);
  CHECK(std::filesystem::exists(spk + "/speaker.ckpt"));
  const json hist = json::parse(slurp(spk + "/history.json"));
  CHECK(hist.at("history").size() >= 2);
  CHECK(std::isfinite(hist.at("probe_nll_end").get<double>()));

  // train-vqa from the bundle (also writes the cache it generated)
  const std::string vqa = dir.sub("vqa");
  REQUIRE(run_cli("train-vqa --data " + data + " --out " + vqa + " --speaker " + spk +
                  "/speaker.ckpt --epochs 2 --batch 8 --d 16 --heads 2 --recursions 1 --d-ff 24"
                  " --word-dim 8 --expr-hidden 8 --question-max-len 7 --expression-max-len 8"
                  " --beam 3 --gen-max-len 6 --seed 3") == 0);
  CHECK(std::filesystem::exists(vqa + "/vqa.ckpt"));
  CHECK(std::filesystem::exists(vqa + "/cache.json"));
  const json metrics = json::parse(slurp(vqa + "/metrics.json"));
  REQUIRE(metrics.at("val_accuracy").size() == 2);
  CHECK(metrics.at("val_accuracy")[1].get<double>() >= 0.0);

  // eval, all three tasks, reusing the written cache
  const std::string ev = dir.sub("ev");
  REQUIRE(run_cli("eval --data " + data + " --out " + ev + "1 --task vqa --split val --checkpoint " + vqa +
                  "/vqa.ckpt --cache " + vqa + "/cache.json") == 0);
  const json m1 = json::parse(slurp(ev + "1/metrics.json"));
  CHECK(m1.at("soft_accuracy").get<double>() >= 0.0);
  CHECK(m1.at("soft_accuracy").get<double>() <= 1.0);
  CHECK(m1.at("items").get<int>() > 0);
  REQUIRE(run_cli("eval --data " + data + " --out " + ev + "2 --task speaker --split val --speaker " + spk +
                  "/speaker.ckpt --beam 3 --max-len 6") == 0);
  const json m2 = json::parse(slurp(ev + "2/metrics.json"));
  CHECK(m2.at("cider").get<double>() >= 0.0);
  REQUIRE(run_cli("eval --data " + data + " --out " + ev + "3 --task comprehension --split val --speaker " + spk +
                  "/speaker.ckpt --mode reinforcer") == 0);
  const json m3 = json::parse(slurp(ev + "3/metrics.json"));
  CHECK(m3.at("accuracy").get<double>() >= 0.0);
  CHECK(m3.at("random_baseline").get<double>() > 0.0);
  // eval for vqa without a checkpoint is a usage error
  CHECK(run_cli("eval --data " + data + " --out " + ev + "4 --task vqa --cache " + vqa + "/cache.json") == 2);

  // explain: the written report obeys the schema, the svg claim holds
  const json manifest = json::parse(slurp(data + "/manifest.json"));
  const std::string scene_id = manifest.at("scenes")[0].at("id").get<std::string>();
  const std::string exp = dir.sub("exp");
  REQUIRE(run_cli("explain --data " + data + " --out " + exp + " --checkpoint " + vqa + "/vqa.ckpt --cache " + vqa +
                  "/cache.json --scene " + scene_id + " --qa 1 --svg") == 0);
  ParsedReport parsed;
  CHECK(parse_report(slurp(exp + "/report.txt"), parsed) == "");
  CHECK(slurp(exp + "/overlay.svg").find("</svg>") != std::string::npos);
  CHECK(run_cli("explain --data " + data + " --out " + exp + "2 --checkpoint " + vqa + "/vqa.ckpt --cache " + vqa +
                "/cache.json --scene no-such-scene") == 1);

  // inspect-checkpoint
  const std::string ins = dir.sub("ins");
  REQUIRE(run_cli_capture("inspect-checkpoint --checkpoint " + vqa + "/vqa.ckpt --out " + ins,
                          dir.sub("inspect.txt")) == 0);
  const std::string inspect_out = slurp(dir.sub("inspect.txt"));
  CHECK(inspect_out.find("total parameters") != std::string::npos);
  const json ins_json = json::parse(slurp(ins + "/inspect.json"));
  CHECK(ins_json.at("total").get<long>() > 0);
  CHECK(ins_json.at("config").at("kind") == "vqa");

  // gradcheck exits zero only when every op passes the pinned tolerance
  const std::string gc = dir.sub("gc");
  REQUIRE(run_cli("gradcheck --out " + gc + " --instances 1 --seed 5") == 0);
  const json gc_json = json::parse(slurp(gc + "/gradcheck.json"));
  CHECK(gc_json.at("tolerance").get<double>() == 1e-4);
  for (const auto& op : gc_json.at("ops")) CHECK(op.at("pass").get<bool>());
}
