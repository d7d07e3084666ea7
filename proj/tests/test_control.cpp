#include <cmath>
#include <sstream>

#include "doctest.h"
#include "magd/control.hpp"
#include "magd/errors.hpp"
#include "magd/ops.hpp"

using namespace magd;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.image_size = 8;
  c.channels = 8;
  c.levels = 2;
  c.context_dim = 8;
  c.groups = 4;
  return c;
}

SemanticMask block_mask(int H, std::vector<std::array<int, 4>> boxes) {  // x0,y0,x1,y1 inclusive
  SemanticMask m;
  m.height = m.width = H;
  for (const auto& b : boxes) {
    std::vector<std::uint8_t> r(static_cast<std::size_t>(H) * H, 0);
    for (int y = b[1]; y <= b[3]; ++y)
      for (int x = b[0]; x <= b[2]; ++x) r[static_cast<std::size_t>(y) * H + x] = 1;
    m.regions.push_back(r);
    m.labels.push_back("r" + std::to_string(m.regions.size()));
  }
  return m;
}

// Direct triple sum over regions, target words and pixels.
double brute_force_loss(const std::vector<AttentionSnapshot>& snaps, const SemanticMask& mask,
                        const Correspondence& corr, double lambda) {
  double total = 0.0;
  for (const auto& s : snaps) {
    const int heads = s.map.dim(0), P = s.map.dim(1), L = s.map.dim(2);
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < mask.count(); ++i)
        for (int w : corr.words[i])
          for (int p = 0; p < P; ++p) {
            const double m = s.map[(static_cast<std::size_t>(h) * P + p) * L + w];
            total += mask.regions[i][p] ? -m : lambda * m;
          }
  }
  return total;
}

Tensor random_stochastic(Rng& rng, int heads, int P, int L) {
  Tensor m({heads, P, L});
  for (int r = 0; r < heads * P; ++r) {
    double s = 0;
    for (int w = 0; w < L; ++w) s += (m[r * L + w] = static_cast<float>(rng.uniform() + 1e-3));
    for (int w = 0; w < L; ++w) m[r * L + w] = static_cast<float>(m[r * L + w] / s);
  }
  return m;
}

const std::vector<int> kPrompt{2, 6, 4, 7, 1, 1, 1, 1};  // red circle blue square

}  // namespace

TEST_SUITE("masks") {
  TEST_CASE("resize_mask") {
    const auto m = block_mask(32, {{8, 8, 11, 11}, {20, 4, 27, 19}});
    CHECK(resize_mask(m, 32) == m.regions);
    const auto r8 = resize_mask(m, 8);
    CHECK(std::count(r8[0].begin(), r8[0].end(), 1) == 1);
    CHECK(r8[0][2 * 8 + 2] == 1);
    CHECK(std::count(r8[1].begin(), r8[1].end(), 1) == 2 * 4);
    CHECK_THROWS_AS(resize_mask(m, 64), UsageError);
    CHECK_THROWS_AS(resize_mask(m, 12), UsageError);

    // one pixel never hit by a cell center, re-seeded at the cell holding it
    const auto dot = block_mask(32, {{0, 0, 0, 0}});
    const auto r4 = resize_mask(dot, 4);
    CHECK(std::count(r4[0].begin(), r4[0].end(), 1) == 1);
    CHECK(r4[0][0] == 1);
    const auto dot2 = block_mask(32, {{30, 17, 30, 17}});
    CHECK(resize_mask(dot2, 4)[0][2 * 4 + 3] == 1);
  }

  TEST_CASE("constant attention map") {
    std::vector<std::uint8_t> region{1, 0, 0, 1};
    const std::vector<int> two{0, 2}, one{1};
    const Tensor a = constant_attention_map(region, two, 2, 3);
    CHECK(a.shape() == Shape{4, 3});
    CHECK(a.at({0, 0}) == 0.5f);
    CHECK(a.at({3, 2}) == 0.5f);
    CHECK(a.at({1, 0}) == 0.f);
    CHECK(a.at({0, 1}) == 0.f);
    CHECK(a.at({0, 0}) + a.at({0, 2}) == 1.f);
    const Tensor b = constant_attention_map(region, one, 2, 3);
    CHECK(b.at({0, 1}) == 1.f);
    CHECK(b.at({1, 1}) == 0.f);
    CHECK_THROWS_AS(constant_attention_map(region, std::vector<int>{}, 2, 3), ConfigError);
  }

  TEST_CASE("mask and correspondence validation") {
    auto m = block_mask(8, {{0, 0, 3, 3}, {2, 2, 5, 5}});
    CHECK_THROWS_AS(m.validate(), ConfigError);
    m.allow_overlap = true;
    CHECK_NOTHROW(m.validate());
    Correspondence c{{{0, 1}, {4}}};
    CHECK_THROWS(c.validate(kPrompt));  // position 4 is PAD
    Correspondence c2{{{0, 1}, {9}}};
    CHECK_THROWS(c2.validate(kPrompt));
    Correspondence c3{{{0, 1}, {}}};
    CHECK_THROWS(c3.validate(kPrompt));
  }
}

TEST_SUITE("swap") {
  TEST_CASE("swap replaces only target columns and is idempotent") {
    Rng rng(1);
    const auto mask = block_mask(4, {{0, 0, 1, 1}, {2, 2, 3, 3}});
    const Correspondence corr{{{0, 1}, {3}}};
    AttentionSnapshot snap{0, 4, random_stochastic(rng, 2, 16, 5)};
    const auto once = apply_attention_swap(snap, mask, corr);
    const auto twice = apply_attention_swap(once, mask, corr);
    CHECK(bitwise_equal(once.map, twice.map));
    const Tensor c0 = constant_attention_map(mask.regions[0], corr.words[0], 4, 5);
    const Tensor c1 = constant_attention_map(mask.regions[1], corr.words[1], 4, 5);
    for (int h = 0; h < 2; ++h)
      for (int p = 0; p < 16; ++p) {
        for (int w : {0, 1}) CHECK(once.map.at({h, p, w}) == c0.at({p, w}));
        CHECK(once.map.at({h, p, 3}) == c1.at({p, 3}));
        for (int w : {2, 4}) CHECK(once.map.at({h, p, w}) == snap.map.at({h, p, w}));
      }
  }

  TEST_CASE("swap hook on the tape matches the value version") {
    Rng rng(2);
    const auto cfg = small_config();
    const auto mask = block_mask(8, {{0, 0, 3, 3}, {5, 4, 7, 7}});
    const Correspondence corr{{{0, 1}, {2, 3}}};
    SwapHook hook(mask, corr, cfg);
    ad::Tape tape;
    const Tensor m = random_stochastic(rng, 1, 16, 8).reshaped({16, 8});
    auto v = hook.adjust_probs({1, 4, 0}, tape.constant(m));
    const auto ref = apply_attention_swap({1, 4, m.reshaped({1, 16, 8})}, mask, corr);
    CHECK(bitwise_equal(v.value(), ref.map.reshaped({16, 8})));
  }
}

TEST_SUITE("loss") {
  TEST_CASE("worked example") {
    SemanticMask mask = block_mask(2, {{0, 0, 0, 0}});
    const Correspondence corr{{{1}}};
    AttentionSnapshot s{0, 2, Tensor({1, 4, 2}, {.5f, .5f, .25f, .75f, 1.f, 0.f, 0.f, 1.f})};
    const std::vector<AttentionSnapshot> v{s};
    CHECK(masked_attention_loss(v, mask, corr, 0.5) == doctest::Approx(0.375).epsilon(1e-12));
    s.map = Tensor({1, 4, 2}, {0.f, 1.f, 1.f, 0.f, 1.f, 0.f, 1.f, 0.f});
    CHECK(masked_attention_loss(std::vector<AttentionSnapshot>{s}, mask, corr, 0.5) == doctest::Approx(-1.0));
  }

  TEST_CASE("uniform map with lambda zero gives -k/L") {
    const auto mask = block_mask(4, {{0, 0, 2, 1}});  // k = 6
    const Correspondence corr{{{0}}};
    AttentionSnapshot s{0, 4, Tensor({1, 16, 5}, 0.2f)};
    CHECK(masked_attention_loss(std::vector<AttentionSnapshot>{s}, mask, corr, 0.0) == doctest::Approx(-6.0 / 5.0));
  }

  TEST_CASE("matches brute-force triple sum on random instances") {
    Rng rng(3);
    for (int it = 0; it < 100; ++it) {
      const int r = 2 << rng.below(3);  // 2, 4 or 8
      const int L = rng.uniform_int(2, 8), heads = rng.uniform_int(1, 2), n = rng.uniform_int(1, 3);
      SemanticMask mask;
      mask.height = mask.width = r;
      mask.allow_overlap = true;
      Correspondence corr;
      for (int i = 0; i < n; ++i) {
        std::vector<std::uint8_t> reg(static_cast<std::size_t>(r) * r);
        for (auto& b : reg) b = rng.below(3) == 0;
        reg[rng.below(reg.size())] = 1;
        mask.regions.push_back(reg);
        std::vector<int> words;
        for (int w = 0; w < L; ++w)
          if (rng.below(3) == 0) words.push_back(w);
        if (words.empty()) words.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(L))));
        corr.words.push_back(words);
      }
      std::vector<AttentionSnapshot> snaps;
      for (int l = 0; l < 3; ++l) snaps.push_back({l, r, random_stochastic(rng, heads, r * r, L)});
      const double lambda = rng.uniform(0.0, 2.0);
      CHECK(std::abs(masked_attention_loss(snaps, mask, corr, lambda) - brute_force_loss(snaps, mask, corr, lambda)) <
            1e-5);
    }
  }

  TEST_CASE("relabeling invariance and tape agreement") {
    const auto cfg = small_config();
    const Model model{cfg, init_weights(cfg, 4), 0};
    auto mask = block_mask(8, {{0, 0, 3, 3}, {5, 4, 7, 7}});
    Correspondence corr{{{0, 1}, {2, 3}}};
    Rng rng(5);
    const Tensor z = rng.normal_tensor({3, 8, 8});
    const double a = attention_loss<float>(model.weights, cfg, z, 500, kPrompt, mask, corr, 0.5);
    std::swap(mask.regions[0], mask.regions[1]);
    std::swap(corr.words[0], corr.words[1]);
    const double b = attention_loss<float>(model.weights, cfg, z, 500, kPrompt, mask, corr, 0.5);
    CHECK(a == doctest::Approx(b).epsilon(1e-6));

    // value version over snapshots of the same forward pass
    std::vector<AttentionSnapshot> snaps;
    UNetPredictor(model).predict(z, 500, kPrompt, nullptr, &snaps);
    CHECK(masked_attention_loss(snaps, mask, corr, 0.5) == doctest::Approx(a).epsilon(1e-6));
    CHECK(attention_loss_and_grad<float>(model.weights, cfg, z, 500, kPrompt, mask, corr, 0.5).loss == a);
  }
}

TEST_SUITE("paint with words") {
  TEST_CASE("two-way softmax arithmetic") {
    ModelConfig cfg = small_config();
    cfg.max_prompt_len = 2;
    SemanticMask mask = block_mask(4, {{0, 0, 0, 0}});
    const Correspondence corr{{{0}}};
    PaintWithWordsHook hook(mask, corr, cfg, 0.3);
    ad::Tape tape;
    auto m = ad::softmax_last_dim(hook.adjust_logits({0, 4, 0}, tape.constant(Tensor({16, 2}))));
    CHECK(m.value().at({0, 0}) == doctest::Approx(std::exp(0.3) / (std::exp(0.3) + 1)));
    CHECK(m.value().at({0, 0}) == doctest::Approx(0.5744).epsilon(1e-4));
    CHECK(m.value().at({5, 0}) == doctest::Approx(0.5));

    const Tensor bias = paint_with_words_bias(mask, corr, 4, 2, 0.3);
    CHECK(bias.at({0, 0}) == 0.3f);
    CHECK(bias.at({0, 1}) == 0.f);
    CHECK(bias.at({1, 0}) == 0.f);
    Rng rng(6);
    const Tensor logits = rng.normal_tensor({16, 2});
    PaintWithWordsHook zero(mask, corr, cfg, 0.0);
    CHECK(bitwise_equal(zero.adjust_logits({0, 4, 0}, tape.constant(logits)).value(), logits));
  }
}

TEST_SUITE("guidance") {
  TEST_CASE("alpha zero and zero gradient leave z unchanged") {
    const auto cfg = small_config();
    Model model{cfg, init_weights(cfg, 7), 0};
    const auto mask = block_mask(8, {{0, 0, 3, 3}});
    const Correspondence corr{{{0, 1}}};
    Rng rng(8);
    const Tensor z = rng.normal_tensor({3, 8, 8});
    CHECK(bitwise_equal(guidance_update(model, z, 400, kPrompt, mask, corr, 0.0, 0.5, 1, 0).z, z));
    for (auto& [name, w] : model.weights)
      if (name.size() > 7 && name.compare(name.size() - 7, 7, ".attn.q") == 0) w = Tensor(w.shape());
    const auto g = guidance_update(model, z, 400, kPrompt, mask, corr, 0.08, 0.5, 1, 0);
    CHECK(g.grad_norm == 0.0);
    CHECK(bitwise_equal(g.z, z));
  }

  TEST_CASE("small step decreases the loss") {
    const auto cfg = small_config();
    const auto mask = block_mask(8, {{0, 0, 3, 3}, {4, 4, 7, 7}});
    const Correspondence corr{{{0, 1}, {2, 3}}};
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const Model model{cfg, init_weights(cfg, 10 + seed), 0};
      const Tensor z = initial_noise(seed, 8);
      const auto g = guidance_update(model, z, 980, kPrompt, mask, corr, 1e-4, 0.5, 1, 0);
      REQUIRE(g.grad_norm > 1e-6);
      const double after = attention_loss<float>(model.weights, cfg, g.z, 980, kPrompt, mask, corr, 0.5);
      CHECK(after < g.loss_before);
    }
  }

  TEST_CASE("non-finite gradient names the step") {
    const auto cfg = small_config();
    Model model{cfg, init_weights(cfg, 7), 0};
    model.weights.at("enc1.attn.q")[0] = std::nanf("");
    const auto mask = block_mask(8, {{0, 0, 3, 3}});
    const Correspondence corr{{{0, 1}}};
    CHECK_THROWS_WITH_AS(guidance_update(model, initial_noise(1, 8), 400, kPrompt, mask, corr, 0.08, 0.5, 1, 6),
                         doctest::Contains("step 6"), GuidanceError);
  }

  TEST_CASE("repeats apply sequential updates") {
    const auto cfg = small_config();
    const Model model{cfg, init_weights(cfg, 9), 0};
    const auto mask = block_mask(8, {{0, 0, 3, 3}});
    const Correspondence corr{{{0, 1}}};
    const Tensor z = initial_noise(2, 8);
    const auto one = guidance_update(model, z, 700, kPrompt, mask, corr, 0.05, 0.5, 1, 0);
    const auto two = guidance_update(model, z, 700, kPrompt, mask, corr, 0.05, 0.5, 2, 0);
    const auto again = guidance_update(model, one.z, 700, kPrompt, mask, corr, 0.05, 0.5, 1, 0);
    CHECK(bitwise_equal(two.z, again.z));
  }
}

TEST_SUITE("pipelines") {
  TEST_CASE("controlled step count") {
    GuidanceConfig g;
    CHECK(g.controlled_steps(50) == 15);
    g.tau_fraction = 0.0;
    CHECK(g.controlled_steps(50) == 0);
    g.tau_fraction = 0.31;
    CHECK(g.controlled_steps(50) == 16);
    g.tau_fraction = 1.5;
    CHECK_THROWS_AS(g.validate(), ConfigError);
    CHECK(parse_method("guidance") == Method::guidance);
    CHECK_THROWS_AS(parse_method("magic"), ConfigError);
  }

  TEST_CASE("null controls reproduce the vanilla sample") {
    const auto cfg = small_config();
    const Model model{cfg, init_weights(cfg, 11), 0};
    const auto s = make_schedule();
    const auto mask = block_mask(8, {{0, 0, 3, 3}, {4, 4, 7, 7}});
    const Correspondence corr{{{0, 1}, {2, 3}}};
    SamplerConfig sc;
    sc.num_steps = 10;
    sc.seed = 21;
    const Tensor vanilla = sample(UNetPredictor(model), 8, kPrompt, sc, s).image;
    GuidanceConfig g;
    CHECK(bitwise_equal(guided_sample(model, kPrompt, mask, corr, sc, g, s).image, vanilla));
    g.method = Method::guidance;
    g.alpha = 0.0;
    CHECK(bitwise_equal(guided_sample(model, kPrompt, mask, corr, sc, g, s).image, vanilla));
    g.method = Method::paint_with_words;
    g.pww_weight = 0.0;
    CHECK(bitwise_equal(guided_sample(model, kPrompt, mask, corr, sc, g, s).image, vanilla));
    for (Method m : {Method::swap, Method::guidance, Method::paint_with_words}) {
      GuidanceConfig t0;
      t0.method = m;
      t0.tau_fraction = 0.0;
      CHECK(bitwise_equal(guided_sample(model, kPrompt, mask, corr, sc, t0, s).image, vanilla));
    }
    g = GuidanceConfig{};
    g.method = Method::guidance;
    g.alpha = 2.0;
    CHECK(!bitwise_equal(guided_sample(model, kPrompt, mask, corr, sc, g, s).image, vanilla));
  }

  TEST_CASE("swap snapshots equal constant maps during controlled steps") {
    const auto cfg = small_config();
    const Model model{cfg, init_weights(cfg, 12), 0};
    const auto s = make_schedule();
    const auto mask = block_mask(8, {{0, 0, 3, 3}, {4, 4, 7, 5}});
    const Correspondence corr{{{0, 1}, {2, 3}}};
    SamplerConfig sc;
    sc.num_steps = 10;
    sc.snapshot_steps = {0, 2, 3};
    GuidanceConfig g;
    g.method = Method::swap;
    const auto res = guided_sample(model, kPrompt, mask, corr, sc, g, s);
    for (int step : {0, 2}) {
      REQUIRE(res.trace[step].loss);
      for (const auto& snap : res.trace[step].attention) {
        const auto tg = swap_targets(mask, corr, snap.resolution, 8);
        const int P = snap.resolution * snap.resolution;
        for (int p = 0; p < P; ++p)
          for (int w = 0; w < 4; ++w) CHECK(snap.map.at({0, p, w}) == tg.values.at({p, w}));
        CHECK(bitwise_equal(apply_attention_swap(snap, mask, corr).map, snap.map));
      }
    }
    CHECK(!res.trace[3].loss);
    bool differs = false;
    for (const auto& snap : res.trace[3].attention)
      differs = differs || !bitwise_equal(apply_attention_swap(snap, mask, corr).map, snap.map);
    CHECK(differs);
  }

  TEST_CASE("guidance trace records the loss per controlled step") {
    const auto cfg = small_config();
    const Model model{cfg, init_weights(cfg, 13), 0};
    const auto mask = block_mask(8, {{0, 0, 3, 3}});
    const Correspondence corr{{{0, 1}}};
    SamplerConfig sc;
    sc.num_steps = 10;
    GuidanceConfig g;
    g.method = Method::guidance;
    const auto res = guided_sample(model, kPrompt, mask, corr, sc, g, make_schedule());
    for (int i = 0; i < 10; ++i) CHECK(res.trace[i].loss.has_value() == (i < 3));
  }

  TEST_CASE("blended merge") {
    const auto s = make_schedule();
    Rng rng(14);
    const Tensor z = rng.normal_tensor({3, 4, 4});
    Tensor x0 = rng.normal_tensor({3, 4, 4});
    for (auto& v : x0.data()) v = std::clamp(v, -1.f, 1.f);
    CHECK(bitwise_equal(blended_merge(z, x0, Tensor({4, 4}, 1.f), 300, s, rng), z));
    CHECK(bitwise_equal(blended_merge(z, x0, Tensor({4, 4}), -1, s, rng), x0));
    Tensor half({4, 4});
    for (int p = 0; p < 8; ++p) half[p] = 1.f;
    const Tensor m = blended_merge(z, x0, half, -1, s, rng);
    for (int c = 0; c < 3; ++c)
      for (int p = 0; p < 16; ++p) CHECK(m[c * 16 + p] == (p < 8 ? z[c * 16 + p] : x0[c * 16 + p]));
    CHECK_THROWS_AS(blended_merge(z, x0, Tensor({3, 4}), 3, s, rng), DimensionError);
  }

  TEST_CASE("blended sample keeps the outside exact") {
    const auto cfg = small_config();
    const Model model{cfg, init_weights(cfg, 15), 0};
    const auto s = make_schedule();
    Rng rng(16);
    Tensor x0({3, 8, 8});
    for (auto& v : x0.data()) v = static_cast<float>(rng.uniform(-1, 1));
    const auto mask = block_mask(8, {{2, 2, 5, 5}});
    const Correspondence corr{{{0, 1}}};
    Tensor edit({8, 8});
    for (int p = 0; p < 64; ++p) edit[p] = mask.regions[0][p];
    SamplerConfig sc;
    sc.num_steps = 10;
    GuidanceConfig g;
    g.method = Method::guidance;
    const auto res = blended_sample(model, kPrompt, mask, corr, x0, edit, sc, g, s);
    for (int c = 0; c < 3; ++c)
      for (int p = 0; p < 64; ++p)
        if (!mask.regions[0][p]) CHECK(res.z[c * 64 + p] == x0[c * 64 + p]);
  }
}

TEST_SUITE("mask files") {
  TEST_CASE("round trip is bit exact") {
    MaskFile f;
    f.prompt = kPrompt;
    f.mask = block_mask(8, {{0, 0, 2, 2}, {4, 3, 7, 7}});
    f.mask.labels = {"red circle", "blue square"};
    f.corr.words = {{0, 1}, {2, 3}};
    const std::string text = format_mask_file(f);
    const MaskFile g = parse_mask_file(text);
    CHECK(g == f);
    CHECK(format_mask_file(g) == text);
    CHECK(text.substr(0, text.find('\n')) == "2 8 8 8");
  }

  TEST_CASE("parse errors carry line numbers") {
    MaskFile f;
    f.prompt = kPrompt;
    f.mask = block_mask(4, {{0, 0, 1, 1}});
    f.mask.labels = {"red circle"};
    f.corr.words = {{0, 1}};
    const std::string good = format_mask_file(f);
    auto broken = [&](int line, const std::string& replacement) {
      std::vector<std::string> lines;
      std::istringstream in(good);
      for (std::string l; std::getline(in, l);) lines.push_back(l);
      lines[line - 1] = replacement;
      std::string out;
      for (const auto& l : lines) out += l + "\n";
      return out;
    };
    CHECK_THROWS_WITH_AS(parse_mask_file(broken(1, "x y")), doctest::Contains("line 1"), FormatError);
    CHECK_THROWS_WITH_AS(parse_mask_file(broken(2, "red purple")), doctest::Contains("line 2"), FormatError);
    CHECK_THROWS_WITH_AS(parse_mask_file(broken(3, "red circle 0 1")), doctest::Contains("line 3"), FormatError);
    CHECK_THROWS_WITH_AS(parse_mask_file(broken(3, "red circle: 0,x")), doctest::Contains("line 3"), FormatError);
    CHECK_THROWS_WITH_AS(parse_mask_file(broken(5, "1021")), doctest::Contains("line 5"), FormatError);
    CHECK_THROWS_WITH_AS(parse_mask_file(broken(6, "00")), doctest::Contains("line 6"), FormatError);
    CHECK_THROWS_WITH_AS(parse_mask_file(good.substr(0, good.size() - 6)), doctest::Contains("line 7"), FormatError);
    CHECK_THROWS_AS(parse_mask_file(broken(3, "red circle: 4")), FormatError);  // PAD
  }
}
