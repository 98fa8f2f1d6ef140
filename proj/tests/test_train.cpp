#include "jemha/train.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "jemha/checkpoint.hpp"
#include "jemha/gradcheck.hpp"
#include "jemha/metrics.hpp"
#include "jemha/optim.hpp"
#include "jemha/ops.hpp"
#include "jemha/rng.hpp"

using namespace jemha;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() / ("jemha-train-" + std::to_string(::getpid()) + "-" +
                                                     std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string str() const { return path.string(); }
};

std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void spit(const std::string& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  REQUIRE(out.good());
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

// Shared tiny world; built once since several cases train on it.
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

struct SmokeModels {
  SpeakerParams sp;
  ReinforcerParams rp;
  ListenerParams lp;
};

const SmokeModels& smoke_models() {
  static const SmokeModels m = [] {
    const Dataset& ds = smoke_dataset();
    Rng rng(5);
    const int vocab = ds.expression_vocab.size();
    SmokeModels out{SpeakerParams::make(vocab, 8, ds.feature_dim, 8, 16, rng),
                    ReinforcerParams::make(vocab, 8, 8, 16, 8, rng),
                    ListenerParams::make(vocab, 8, 8, 16, 8, rng)};
    return out;
  }();
  return m;
}

const ExpressionCache& smoke_cache() {
  static const ExpressionCache cache =
      build_expression_cache(smoke_dataset(), smoke_models().sp, smoke_models().lp, 3, 6);
  return cache;
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

}  // namespace

TEST_CASE("adam single-step geometry") {
  SUBCASE("first step moves each coordinate by about lr against the gradient sign") {
    Tensor w({2}, {3.0, -2.0}, true);
    Adam opt({w}, {});
    opt.step({{0.5, -0.5}});
    CHECK(w.at(0) == doctest::Approx(3.0 - 1e-3).epsilon(1e-9));
    CHECK(w.at(1) == doctest::Approx(-2.0 + 1e-3).epsilon(1e-9));
    CHECK(opt.steps() == 1);
    CHECK(opt.skipped() == 0);
  }

  SUBCASE("zero gradients leave the parameters untouched") {
    Tensor w({3}, {1.0, 2.0, 3.0}, true);
    Adam opt({w}, {});
    opt.step({{0.0, 0.0, 0.0}});
    CHECK(w.at(0) == 1.0);
    CHECK(w.at(1) == 2.0);
    CHECK(w.at(2) == 3.0);
    CHECK(opt.steps() == 1);
  }

  SUBCASE("warmup scales the first update and releases at the boundary") {
    AdamConfig warm;
    warm.warmup_steps = 2;
    Tensor a = Tensor::zeros({1}, true);
    Tensor b = Tensor::zeros({1}, true);
    Adam with({a}, warm);
    Adam without({b}, {});
    with.step({{1.0}});
    without.step({{1.0}});
    const double da1 = a.at(0), db1 = b.at(0);
    CHECK(da1 == doctest::Approx(0.5 * db1).epsilon(1e-12));
    with.step({{1.0}});
    without.step({{1.0}});
    // step 2 reaches the boundary, so both apply the full rate to the
    // same moment state and the deltas coincide
    CHECK(a.at(0) - da1 == doctest::Approx(b.at(0) - db1).epsilon(1e-12));
  }

  SUBCASE("without bias correction the first update follows the raw moments") {
    AdamConfig raw;
    raw.bias_correction = false;
    Tensor w = Tensor::zeros({1}, true);
    Adam opt({w}, raw);
    opt.step({{1.0}});
    const double expected = 1e-3 * 0.1 / (std::sqrt(0.001) + 1e-8);
    CHECK(-w.at(0) == doctest::Approx(expected).epsilon(1e-12));
  }

  SUBCASE("global-norm clipping equals stepping on pre-scaled gradients") {
    Tensor pa({2}, {1.0, 1.0}, true);
    Tensor pb({2}, {1.0, 1.0}, true);
    AdamConfig clipped;
    clipped.grad_clip = 1.0;
    Adam a({pa}, clipped);
    Adam b({pb}, {});
    const std::vector<double> g = {6.0, 8.0};
    const double scale = clipped.grad_clip / std::sqrt(6.0 * 6.0 + 8.0 * 8.0);
    const std::vector<double> gs = {6.0 * scale, 8.0 * scale};
    for (int i = 0; i < 3; ++i) {
      a.step({g});
      b.step({gs});
    }
    CHECK(pa.at(0) == pb.at(0));
    CHECK(pa.at(1) == pb.at(1));
  }

  SUBCASE("a norm under the cap is not scaled") {
    Tensor pa({1}, {1.0}, true);
    Tensor pb({1}, {1.0}, true);
    AdamConfig loose;
    loose.grad_clip = 100.0;
    Adam a({pa}, loose);
    Adam b({pb}, {});
    a.step({{0.7}});
    b.step({{0.7}});
    CHECK(pa.at(0) == pb.at(0));
  }
}

TEST_CASE("adam convergence, skipping and errors") {
  SUBCASE("minimizes a quadratic bowl") {
    Tensor x({1}, {8.0}, true);
    AdamConfig cfg;
    cfg.lr = 0.1;
    Adam opt({x}, cfg);
    const double f0 = (x.at(0) - 3.0) * (x.at(0) - 3.0);
    for (int i = 0; i < 500; ++i) opt.step({{2.0 * (x.at(0) - 3.0)}});
    const double f1 = (x.at(0) - 3.0) * (x.at(0) - 3.0);
    CHECK(f1 < f0);
    CHECK(std::abs(x.at(0) - 3.0) < 1e-2);
  }

  SUBCASE("a non-finite gradient skips the whole step") {
    Tensor w({2}, {1.0, 2.0}, true);
    Adam opt({w}, {});
    opt.step({{1.0, std::numeric_limits<double>::quiet_NaN()}});
    CHECK(opt.skipped() == 1);
    CHECK(opt.steps() == 0);
    CHECK(w.at(0) == 1.0);
    CHECK(w.at(1) == 2.0);
    opt.step({{1.0, std::numeric_limits<double>::infinity()}});
    CHECK(opt.skipped() == 2);
    opt.step({{0.1, 0.1}});
    CHECK(opt.steps() == 1);
    CHECK(w.at(0) < 1.0);
  }

  SUBCASE("steps straight off a tape and zero-fills unseen parameters") {
    Tensor used({2}, {3.0, -2.0}, true);
    Tensor idle({3}, {7.0, 7.0, 7.0}, true);
    Adam opt({used, idle}, {});
    {
      Tape tape;
      Tensor loss = sum_all(mul(used, used));
      tape.compute_gradients(loss);
      const auto grads = collect_grads(tape, {used, idle});
      CHECK(grads[0][0] == doctest::Approx(6.0));
      CHECK(grads[0][1] == doctest::Approx(-4.0));
      CHECK(grads[1] == std::vector<double>(3, 0.0));
      opt.step(tape);
    }
    CHECK(used.at(0) == doctest::Approx(3.0 - 1e-3).epsilon(1e-9));
    CHECK(used.at(1) == doctest::Approx(-2.0 + 1e-3).epsilon(1e-9));
    CHECK(idle.at(0) == 7.0);
  }

  SUBCASE("construction and shape errors") {
    Tensor w({1}, {0.0}, true);
    AdamConfig bad;
    bad.lr = 0.0;
    CHECK_THROWS_AS(Adam({w}, bad), std::invalid_argument);
    bad.lr = 1e-3;
    bad.beta1 = 1.0;
    CHECK_THROWS_AS(Adam({w}, bad), std::invalid_argument);
    Adam opt({w}, {});
    CHECK_THROWS_AS(opt.step(std::vector<std::vector<double>>{}), std::invalid_argument);
    CHECK_THROWS_AS(opt.step({{1.0, 2.0}}), std::invalid_argument);
  }
}

TEST_CASE("learning-rate schedules") {
  SUBCASE("speaker rate halves on the decay grid") {
    CHECK(speaker_lr(4e-4, 0) == doctest::Approx(4e-4));
    CHECK(speaker_lr(4e-4, 499) == doctest::Approx(4e-4));
    CHECK(speaker_lr(4e-4, 500) == doctest::Approx(2e-4));
    CHECK(speaker_lr(4e-4, 999) == doctest::Approx(2e-4));
    CHECK(speaker_lr(4e-4, 1000) == doctest::Approx(1e-4));
    CHECK(speaker_lr(1.0, 6, 3, 0.1) == doctest::Approx(0.01));
    CHECK_THROWS_AS(speaker_lr(1.0, 0, 0), std::invalid_argument);
  }

  SUBCASE("vqa rate holds then steps down every two epochs") {
    for (int e = 1; e <= 10; ++e) CHECK(vqa_lr(1e-3, e) == doctest::Approx(1e-3));
    CHECK(vqa_lr(1e-3, 11) == doctest::Approx(2e-4));
    CHECK(vqa_lr(1e-3, 12) == doctest::Approx(2e-4));
    CHECK(vqa_lr(1e-3, 13) == doctest::Approx(4e-5));
    CHECK(vqa_lr(1e-3, 14) == doctest::Approx(4e-5));
    CHECK(vqa_lr(1e-3, 15) == doctest::Approx(8e-6));
    CHECK(vqa_lr(0.5, 3, 2, 1, 0.5) == doctest::Approx(0.25));
    CHECK_THROWS_AS(vqa_lr(1.0, 1, 10, 0), std::invalid_argument);
  }
}

TEST_CASE("soft answer accuracy") {
  const std::vector<std::pair<int, double>> soft = {{5, 1.0}, {7, 2.0 / 3.0}};
  CHECK(vqa_accuracy(5, soft) == 1.0);
  CHECK(vqa_accuracy(7, soft) == 2.0 / 3.0);
  CHECK(vqa_accuracy(9, soft) == 0.0);
  CHECK(vqa_accuracy(5, {}) == 0.0);
}

TEST_CASE("cider") {
  SUBCASE("a candidate identical to the lone reference scores exactly ten") {
    const Sentence s = {4, 5, 6, 7};
    CHECK(cider({s}, {{s}}) == 10.0);
  }

  SUBCASE("a candidate sharing no n-gram scores zero") {
    CHECK(cider({{4, 5, 6, 7}}, {{{8, 9, 10, 11}}}) == 0.0);
  }

  SUBCASE("mixed two-item corpus matches the hand computation") {
    const int a = 4, b = 5, c = 6, x = 7;
    const std::vector<Sentence> cands = {{a, x}, {a, c}};
    const std::vector<std::vector<Sentence>> refs = {{{a, b}}, {{a, c}}};
    // df(a)=2 so idf(a)=1; df(b)=df(c)=1; x never appears in a reference.
    const double idf_b = std::log(3.0 / 2.0) + 1.0;
    const double idf_u = std::log(3.0) + 1.0;
    const double cos1 = 1.0 / (std::sqrt(1.0 + idf_u * idf_u) * std::sqrt(1.0 + idf_b * idf_b));
    const double expected = (2.5 * cos1 + 5.0) / 2.0;
    CHECK(cider(cands, refs) == doctest::Approx(expected).epsilon(1e-9));
    CHECK(cider(cands, refs) == doctest::Approx(2.81173).epsilon(1e-4));
  }

  SUBCASE("reference order does not matter") {
    const std::vector<Sentence> cands = {{4, 5, 6}};
    const double fwd = cider(cands, {{{4, 5, 7}, {8, 5, 6}}});
    const double rev = cider(cands, {{{8, 5, 6}, {4, 5, 7}}});
    CHECK(fwd == doctest::Approx(rev).epsilon(1e-12));
  }

  SUBCASE("corpus shape errors") {
    CHECK_THROWS_AS(cider({}, {}), std::invalid_argument);
    CHECK_THROWS_AS(cider({{4}}, {}), std::invalid_argument);
    CHECK_THROWS_AS(cider({{4}}, {{}}), std::invalid_argument);
  }
}

TEST_CASE("bleu") {
  SUBCASE("identical corpus scores one") {
    const Sentence s = {4, 5, 6, 7, 8};
    CHECK(bleu({s}, {{s}}) == 1.0);
  }

  SUBCASE("two-gram fixture: shared stems, one substitution") {
    // candidate "the cat sat on the mat" vs "the cat is on the mat"
    const Sentence cand = {4, 5, 6, 7, 4, 8};
    const Sentence ref = {4, 5, 9, 7, 4, 8};
    // p1 = 5/6, p2 = 3/5, equal lengths so no brevity penalty
    CHECK(bleu({cand}, {{ref}}, 2) == doctest::Approx(std::sqrt(5.0 / 6.0 * 3.0 / 5.0)).epsilon(1e-12));
  }

  SUBCASE("a strict prefix keeps perfect precision but pays the brevity penalty") {
    CHECK(bleu({{4, 5, 6, 7, 8}}, {{{4, 5, 6, 7, 8, 9, 10}}}) == doctest::Approx(std::exp(-0.4)).epsilon(1e-12));
  }

  SUBCASE("closest reference length breaks ties toward the shorter") {
    // candidate length 4 between references of 3 and 5: r=3 <= c, no penalty
    CHECK(bleu({{4, 5, 6, 7}}, {{{4, 5, 6}, {4, 5, 6, 7, 8}}}) == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("any empty n-gram order zeroes the score") {
    CHECK(bleu({{4, 5}}, {{{4, 5}}}, 4) == 0.0);
    CHECK(bleu({{4, 5}}, {{{4, 5}}}, 2) == doctest::Approx(1.0));
    CHECK(bleu({{}}, {{{4, 5}}}, 1) == 0.0);
  }

  SUBCASE("corpus shape errors") {
    CHECK_THROWS_AS(bleu({}, {}), std::invalid_argument);
    CHECK_THROWS_AS(bleu({{4}}, {{{4}}, {{5}}}), std::invalid_argument);
    CHECK_THROWS_AS(bleu({{4}}, {{}}), std::invalid_argument);
  }
}

TEST_CASE("soft-score cross entropy contract") {
  CHECK(bce_with_logits_mean(Tensor({1}, {20.0}), {1.0}).item() < 1e-8);
  CHECK(bce_with_logits_mean(Tensor({1}, {0.0}), {0.5}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  const double err = grad_check(
      [](const std::vector<Tensor>& in) { return bce_with_logits_mean(in[0], {0.25, 0.75, 0.5}); },
      {Tensor({3}, {0.4, -1.2, 2.0}, true)});
  CHECK(err < 1e-6);
}

TEST_CASE("named parameters") {
  Rng rng(9);

  SUBCASE("names are unique and cover exactly the trained tensors") {
    SpeakerParams sp = SpeakerParams::make(10, 4, 3, 5, 6, rng);
    ReinforcerParams rp = ReinforcerParams::make(10, 4, 5, 6, 4, rng);
    ListenerParams lp = ListenerParams::make(10, 4, 5, 6, 4, rng);
    VqaModelParams vm = VqaModelParams::make(tiny_vqa_config(), 12, 12, 9, 6, rng);
    for (const auto& [named, count] :
         std::vector<std::pair<std::vector<NamedTensor>, std::size_t>>{{named_parameters(sp), sp.parameters().size()},
                                                                       {named_parameters(rp), rp.parameters().size()},
                                                                       {named_parameters(lp), lp.parameters().size()},
                                                                       {named_parameters(vm), vm.parameters().size()}}) {
      CHECK(named.size() == count);
      std::set<std::string> names;
      for (const NamedTensor& nt : named) {
        CHECK(nt.tensor.defined());
        names.insert(nt.name);
      }
      CHECK(names.size() == named.size());
    }
  }

  SUBCASE("ablations drop their streams from the listing") {
    VqaConfig cfg = tiny_vqa_config();
    cfg.use_textual = false;
    VqaModelParams vm = VqaModelParams::make(cfg, 12, 12, 9, 6, rng);
    CHECK(vm.parameters().size() == named_parameters(vm).size());
    for (const NamedTensor& nt : named_parameters(vm)) {
      CHECK(nt.name.rfind("expression.", 0) == std::string::npos);
    }
  }

  SUBCASE("prefixing bundles several models into one namespace") {
    SpeakerParams sp = SpeakerParams::make(10, 4, 3, 5, 6, rng);
    const auto bundled = prefixed("speaker", named_parameters(sp));
    CHECK(bundled.size() == named_parameters(sp).size());
    CHECK(bundled[0].name.rfind("speaker.", 0) == 0);
  }
}

TEST_CASE("checkpoint round trips") {
  TempDir dir;

  SUBCASE("a restored speaker reproduces the forward pass within float32 noise") {
    Rng r1(21), r2(99), rv(3);
    SpeakerParams p1 = SpeakerParams::make(12, 6, 4, 6, 8, r1);
    const std::string path = dir.str() + "/speaker.ckpt";
    const nlohmann::json config = {{"kind", "speaker"}, {"hidden", 8}};
    save_checkpoint(path, config, named_parameters(p1));

    const Checkpoint ck = load_checkpoint(path);
    CHECK(ck.config == config);
    SpeakerParams p2 = SpeakerParams::make(12, 6, 4, 6, 8, r2);
    restore_parameters(ck, named_parameters(p2));

    NoGradGuard ng;
    Tensor v = Tensor::randn({6}, rv, 1.0);
    const TokenSequence expr{{4, 7, 9, 2}, 0};
    const double nll1 = generation_nll(expr, v, p1).item();
    const double nll2 = generation_nll(expr, v, p2).item();
    CHECK(nll2 == doctest::Approx(nll1).epsilon(1e-6));
  }

  SUBCASE("a restored vqa model reproduces its logits, including ablated configs") {
    for (bool textual : {true, false}) {
      Rng r1(31), r2(77);
      VqaConfig cfg = tiny_vqa_config();
      cfg.use_textual = textual;
      VqaModelParams m1 = VqaModelParams::make(cfg, 14, 14, 9, 6, r1);
      const std::string path = dir.str() + "/vqa.ckpt";
      save_checkpoint(path, {{"use_textual", textual}}, named_parameters(m1));
      VqaModelParams m2 = VqaModelParams::make(cfg, 14, 14, 9, 6, r2);
      restore_parameters(load_checkpoint(path), named_parameters(m2));

      NoGradGuard ng;
      Rng rf(8);
      std::vector<std::vector<double>> feats(3);
      for (auto& f : feats) {
        Tensor t = Tensor::randn({9}, rf, 1.0);
        f = t.values();
      }
      const TokenSequence q{{4, 5, 6}, cfg.question_max_len};
      std::vector<TokenSequence> exprs;
      if (textual) exprs = {{{4, 7}, cfg.expression_max_len}, {{5}, cfg.expression_max_len}, {{6, 8, 9}, cfg.expression_max_len}};
      const VqaOutput o1 = vqa_forward(feats, q, exprs, m1);
      const VqaOutput o2 = vqa_forward(feats, q, exprs, m2);
      for (int i = 0; i < 6; ++i) CHECK(o2.logits.at(i) == doctest::Approx(o1.logits.at(i)).epsilon(1e-5));
    }
  }

  SUBCASE("save, restore, save again reproduces the bytes") {
    Rng r1(41), r2(42);
    ListenerParams p1 = ListenerParams::make(10, 4, 5, 6, 4, r1);
    const std::string pa = dir.str() + "/a.ckpt", pb = dir.str() + "/b.ckpt";
    const nlohmann::json config = {{"alpha", 0.5}};
    save_checkpoint(pa, config, named_parameters(p1));
    const Checkpoint ck = load_checkpoint(pa);
    ListenerParams p2 = ListenerParams::make(10, 4, 5, 6, 4, r2);
    restore_parameters(ck, named_parameters(p2));
    save_checkpoint(pb, ck.config, named_parameters(p2));
    CHECK(slurp(pa) == slurp(pb));
  }

  SUBCASE("bundled prefixes keep three models in one file") {
    Rng r1(51), r2(52);
    SpeakerParams sp1 = SpeakerParams::make(10, 4, 3, 5, 6, r1);
    ListenerParams lp1 = ListenerParams::make(10, 4, 5, 6, 4, r1);
    auto all = prefixed("speaker", named_parameters(sp1));
    for (auto& nt : prefixed("listener", named_parameters(lp1))) all.push_back(nt);
    const std::string path = dir.str() + "/bundle.ckpt";
    save_checkpoint(path, {}, all);

    SpeakerParams sp2 = SpeakerParams::make(10, 4, 3, 5, 6, r2);
    ListenerParams lp2 = ListenerParams::make(10, 4, 5, 6, 4, r2);
    auto into = prefixed("speaker", named_parameters(sp2));
    for (auto& nt : prefixed("listener", named_parameters(lp2))) into.push_back(nt);
    restore_parameters(load_checkpoint(path), into);
    CHECK(sp2.w_m.at(0) == doctest::Approx(sp1.w_m.at(0)).epsilon(1e-6));
    CHECK(lp2.vis_w.at(0) == doctest::Approx(lp1.vis_w.at(0)).epsilon(1e-6));
  }
}

TEST_CASE("checkpoint errors") {
  TempDir dir;
  Rng rng(61);
  SpeakerParams sp = SpeakerParams::make(10, 4, 3, 5, 6, rng);
  const std::string path = dir.str() + "/m.ckpt";
  save_checkpoint(path, {{"k", 1}}, named_parameters(sp));
  const std::string good = slurp(path);

  SUBCASE("restoring into a differently shaped model") {
    const Checkpoint ck = load_checkpoint(path);
    Rng r2(62);
    SpeakerParams other = SpeakerParams::make(10, 4, 3, 5, 7, r2);
    CHECK_THROWS_WITH_AS(restore_parameters(ck, named_parameters(other)), doctest::Contains("shape mismatch"),
                         std::runtime_error);
    ListenerParams lp = ListenerParams::make(10, 4, 5, 6, 4, r2);
    CHECK_THROWS_AS(restore_parameters(ck, named_parameters(lp)), std::runtime_error);
  }

  SUBCASE("corrupted files are rejected") {
    std::string bad = good;
    bad[0] = 'X';
    spit(path, bad);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("bad magic"), std::runtime_error);

    bad = good;
    bad[4] = 9;
    spit(path, bad);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version"), std::runtime_error);

    spit(path, good.substr(0, good.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);

    spit(path, good + "z");
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("trailing"), std::runtime_error);

    CHECK_THROWS_AS(load_checkpoint(dir.str() + "/missing.ckpt"), std::runtime_error);
  }

  SUBCASE("a hand-built file with a duplicate entry is rejected") {
    std::string bytes = "JMHC";
    put_u32(bytes, 1);
    put_u32(bytes, 2);
    bytes += "{}";
    put_u32(bytes, 2);  // two entries, same name
    for (int rep = 0; rep < 2; ++rep) {
      put_u32(bytes, 1);
      bytes += "a";
      put_u32(bytes, 1);
      put_u32(bytes, 1);
      put_u32(bytes, std::bit_cast<std::uint32_t>(1.5f));
    }
    spit(path, bytes);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("duplicate"), std::runtime_error);
  }

  SUBCASE("saving duplicate or undefined names") {
    Tensor t({1}, {1.0});
    CHECK_THROWS_WITH_AS(save_checkpoint(path, {}, {{"a", t}, {"a", t}}), doctest::Contains("duplicate"),
                         std::invalid_argument);
    CHECK_THROWS_AS(save_checkpoint(path, {}, {{"a", Tensor()}}), std::invalid_argument);
  }
}

TEST_CASE("speaker training smoke") {
  const Dataset& ds = smoke_dataset();

  SUBCASE("the probe likelihood improves") {
    SpeakerTrainConfig cfg;
    cfg.iterations = 120;
    cfg.batch = 8;
    cfg.lr = 2e-3;
    cfg.word_dim = 8;
    cfg.ctx_dim = 8;
    cfg.hidden = 16;
    cfg.mlp_hidden = 8;
    cfg.joint_dim = 8;
    cfg.n_samples = 2;
    cfg.max_len = 10;
    cfg.seed = 3;
    cfg.log_every = 40;
    const SpeakerTrainResult res = train_speaker(ds, cfg);
    CHECK(res.probe_nll_end < res.probe_nll_start);
    CHECK(res.skipped_steps == 0);
    REQUIRE(!res.history.empty());
    CHECK(res.history.front().step == 0);
    CHECK(res.history.back().step == cfg.iterations - 1);
    for (const SpeakerLogEntry& e : res.history) {
      CHECK(std::isfinite(e.generation));
      CHECK(e.generation > 0.0);
      CHECK(e.margin >= 0.0);
      CHECK(e.reinforcer_loss >= 0.0);
      CHECK(e.listener_loss >= 0.0);
    }
  }

  SUBCASE("same seed, same run; the periodic probe reports a score") {
    int val_scenes = 0;
    for (const auto& sc : ds.scenes) val_scenes += sc.split == "val";
    REQUIRE(val_scenes > 0);

    SpeakerTrainConfig cfg;
    cfg.iterations = 8;
    cfg.batch = 4;
    cfg.word_dim = 8;
    cfg.ctx_dim = 8;
    cfg.hidden = 16;
    cfg.mlp_hidden = 8;
    cfg.joint_dim = 8;
    cfg.n_samples = 2;
    cfg.max_len = 8;
    cfg.seed = 13;
    cfg.cider_every = 4;
    int logged = 0;
    cfg.on_log = [&](long, const SpeakerLossParts&) { ++logged; };
    const SpeakerTrainResult a = train_speaker(ds, cfg);
    const SpeakerTrainResult b = train_speaker(ds, cfg);
    CHECK(a.probe_nll_end == b.probe_nll_end);
    Tensor wa = a.models.speaker.w_m, wb = b.models.speaker.w_m;
    CHECK(wa.values() == wb.values());
    CHECK(logged > 0);
    REQUIRE(a.val_cider.size() == 2);
    CHECK(a.val_cider[0].first == 4);
    CHECK(a.val_cider[1].first == 8);
    for (const auto& [step, score] : a.val_cider) CHECK(std::isfinite(score));
  }

  SUBCASE("pure likelihood ablation zeroes the margin and policy parts") {
    SpeakerTrainConfig cfg;
    cfg.iterations = 6;
    cfg.batch = 4;
    cfg.word_dim = 8;
    cfg.ctx_dim = 8;
    cfg.hidden = 16;
    cfg.mlp_hidden = 8;
    cfg.joint_dim = 8;
    cfg.max_len = 8;
    cfg.seed = 4;
    cfg.log_every = 2;
    cfg.mmi.lambda1 = 0.0;
    cfg.mmi.lambda2 = 0.0;
    cfg.lambda_r = 0.0;
    const SpeakerTrainResult res = train_speaker(ds, cfg);
    for (const SpeakerLogEntry& e : res.history) {
      CHECK(e.margin == 0.0);
      CHECK(e.policy == 0.0);
    }
  }

  SUBCASE("configuration and data errors") {
    SpeakerTrainConfig cfg;
    cfg.batch = 1;
    CHECK_THROWS_AS(train_speaker(ds, cfg), std::invalid_argument);
    cfg.batch = 4;
    cfg.iterations = 0;
    CHECK_THROWS_AS(train_speaker(ds, cfg), std::invalid_argument);
    cfg.iterations = 2;
    Dataset no_train = ds;
    for (auto& sc : no_train.scenes) sc.split = "val";
    CHECK_THROWS_WITH_AS(train_speaker(no_train, cfg), doctest::Contains("no training expressions"),
                         std::invalid_argument);
  }
}

TEST_CASE("expression cache") {
  const Dataset& ds = smoke_dataset();
  const ExpressionCache& cache = smoke_cache();

  SUBCASE("covers every scene in detector keep order") {
    CHECK(cache.scenes.size() == ds.scenes.size());
    const int vocab = ds.expression_vocab.size();
    for (const auto& sc : ds.scenes) {
      const auto it = cache.scenes.find(sc.scene.id);
      REQUIRE(it != cache.scenes.end());
      const auto& entry = it->second;
      CHECK(entry.object_ids == nms(sc.scene.objects, 0.7));
      REQUIRE(entry.expressions.size() == entry.object_ids.size());
      for (const auto& expr : entry.expressions) {
        CHECK(!expr.empty());
        for (int id : expr) {
          CHECK(id >= 0);
          CHECK(id < vocab);
        }
      }
    }
  }

  SUBCASE("json round trip") {
    const nlohmann::json j = cache_to_json(cache);
    CHECK(j.at("version") == 1);
    const ExpressionCache back = cache_from_json(j);
    REQUIRE(back.scenes.size() == cache.scenes.size());
    for (const auto& [id, entry] : cache.scenes) {
      const auto& other = back.scenes.at(id);
      CHECK(other.object_ids == entry.object_ids);
      CHECK(other.expressions == entry.expressions);
    }
    nlohmann::json bad = j;
    bad["version"] = 2;
    CHECK_THROWS_WITH_AS(cache_from_json(bad), doctest::Contains("version"), std::runtime_error);
  }
}

TEST_CASE("vqa training smoke") {
  const Dataset& ds = smoke_dataset();
  const ExpressionCache& cache = smoke_cache();

  VqaTrainConfig cfg;
  cfg.model = tiny_vqa_config();
  cfg.epochs = 3;
  cfg.batch = 8;
  cfg.lr = 3e-3;
  cfg.seed = 5;

  SUBCASE("losses fall and the callback sees every epoch") {
    int epochs_seen = 0;
    VqaTrainConfig c = cfg;
    c.on_epoch = [&](int, double, double) { ++epochs_seen; };
    const VqaTrainResult res = train_vqa(ds, cache, c);
    REQUIRE(res.train_loss.size() == 3);
    REQUIRE(res.val_accuracy.size() == 3);
    CHECK(epochs_seen == 3);
    CHECK(res.skipped_steps == 0);
    for (double l : res.train_loss) {
      CHECK(std::isfinite(l));
      CHECK(l > 0.0);
    }
    for (double a : res.val_accuracy) {
      CHECK(a >= 0.0);
      CHECK(a <= 1.0);
    }
    CHECK(res.train_loss.back() < res.train_loss.front());

    const VqaEvalResult ev = evaluate_vqa(ds, "val", res.model, cache);
    int val_qas = 0;
    for (const auto& sc : ds.scenes) {
      if (sc.split == "val") val_qas += static_cast<int>(sc.qa.size());
    }
    CHECK(ev.items == val_qas);
    CHECK(static_cast<int>(ev.records.size()) == val_qas);
    CHECK(ev.soft_accuracy >= 0.0);
    CHECK(ev.soft_accuracy <= 1.0);
    for (const auto& rec : ev.records) {
      CHECK(rec.accuracy >= 0.0);
      CHECK(rec.accuracy <= 1.0);
      CHECK(rec.predicted_id >= 0);
    }
  }

  SUBCASE("same seed reproduces the first epoch exactly") {
    VqaTrainConfig c = cfg;
    c.epochs = 1;
    const VqaTrainResult a = train_vqa(ds, cache, c);
    const VqaTrainResult b = train_vqa(ds, cache, c);
    CHECK(a.train_loss[0] == b.train_loss[0]);
    CHECK(a.val_accuracy[0] == b.val_accuracy[0]);
  }

  SUBCASE("a scene missing from the cache names the remedy") {
    ExpressionCache broken = cache;
    std::string victim;
    for (const auto& sc : ds.scenes) {
      if (sc.split == "train") {
        victim = sc.scene.id;
        break;
      }
    }
    REQUIRE(!victim.empty());
    broken.scenes.erase(victim);
    CHECK_THROWS_WITH_AS(train_vqa(ds, broken, cfg), doctest::Contains("regenerate"), std::runtime_error);
  }

  SUBCASE("configuration errors") {
    VqaTrainConfig c = cfg;
    c.batch = 0;
    CHECK_THROWS_AS(train_vqa(ds, cache, c), std::invalid_argument);
    c = cfg;
    c.epochs = 0;
    CHECK_THROWS_AS(train_vqa(ds, cache, c), std::invalid_argument);
  }
}

TEST_CASE("speaker-side evaluation") {
  const Dataset& ds = smoke_dataset();
  const SmokeModels& m = smoke_models();

  SUBCASE("generation metrics come back finite over the val split") {
    const SpeakerEvalResult res = evaluate_speaker(ds, "val", m.sp, m.lp, 3, 6);
    CHECK(res.items > 0);
    CHECK(std::isfinite(res.cider_score));
    CHECK(res.cider_score >= 0.0);
    CHECK(res.bleu_score >= 0.0);
    CHECK(res.bleu_score <= 1.0);
  }

  SUBCASE("comprehension accuracy and its chance floor") {
    for (ComprehendMode mode : {ComprehendMode::speaker, ComprehendMode::reinforcer}) {
      const ComprehensionResult res = evaluate_comprehension(ds, "val", mode, m.sp, m.rp);
      CHECK(res.items > 0);
      CHECK(res.accuracy >= 0.0);
      CHECK(res.accuracy <= 1.0);
      CHECK(res.random_baseline > 0.0);
      CHECK(res.random_baseline <= 1.0);
    }
  }
}
