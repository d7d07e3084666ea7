#include <cmath>
#include <filesystem>
#include <map>

#include "doctest.h"
#include "magd/binary_io.hpp"
#include "magd/data.hpp"
#include "magd/errors.hpp"
#include "magd/model.hpp"

using namespace magd;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("magd_test_data_" + name);
  fs::remove_all(p);
  return p.string();
}

SceneSpec one(ShapeKind s, Color c, int cx, int cy, int size) {
  SceneSpec spec;
  spec.objects.push_back({s, c, cx, cy, size});
  return spec;
}

}  // namespace

TEST_CASE("circle pixel count near pi r^2") {
  for (int r = 3; r <= 7; ++r) {
    const auto scene = render_scene(one(ShapeKind::circle, Color::red, 15, 15, r));
    const double count = static_cast<double>(scene.mask.pixels(0));
    CHECK(std::abs(count - M_PI * r * r) <= 4.0 * r);
  }
}

TEST_CASE("square and triangle pixel counts") {
  for (int s = 3; s <= 7; ++s) {
    CHECK(render_scene(one(ShapeKind::square, Color::green, 15, 15, s)).mask.pixels(0) ==
          static_cast<std::size_t>((2 * s + 1) * (2 * s + 1)));
    // row k from the apex (k = 0..2s) holds 2*floor(k/2)+1 pixels
    std::size_t tri = 0;
    for (int k = 0; k <= 2 * s; ++k) tri += 2 * (k / 2) + 1;
    CHECK(render_scene(one(ShapeKind::triangle, Color::blue, 15, 15, s)).mask.pixels(0) == tri);
  }
}

TEST_CASE("render colors, caption and correspondence") {
  SceneSpec spec;
  spec.background = Background::white;
  spec.objects = {{ShapeKind::square, Color::blue, 24, 8, 4}, {ShapeKind::circle, Color::red, 7, 20, 5}};
  const auto s = render_scene(spec);
  const auto& v = Vocabulary::shapes();
  // sorted left to right: red circle first
  REQUIRE(s.caption.size() == 8);
  CHECK(s.caption[0] == v.id("red"));
  CHECK(s.caption[1] == v.id("circle"));
  CHECK(s.caption[2] == v.id("blue"));
  CHECK(s.caption[3] == v.id("square"));
  for (int i = 4; i < 8; ++i) CHECK(s.caption[i] == Vocabulary::kPad);
  CHECK(s.mask.labels == std::vector<std::string>{"red circle", "blue square"});
  CHECK(s.correspondence.words == std::vector<std::vector<int>>{{0, 1}, {2, 3}});
  s.correspondence.validate(s.caption);
  s.mask.validate();

  const int hw = 32 * 32;
  auto px = [&](int c, int x, int y) { return s.image.data()[c * hw + y * 32 + x]; };
  CHECK(px(0, 7, 20) == 1.f);
  CHECK(px(1, 7, 20) == -1.f);
  CHECK(px(2, 24, 8) == 1.f);
  CHECK(px(0, 0, 0) == 1.f);  // white background
  CHECK(s.image == render_scene(spec).image);
}

TEST_CASE("scene invariants rejected") {
  CHECK_THROWS_AS(render_scene(one(ShapeKind::circle, Color::red, 2, 15, 4)), ConfigError);
  CHECK_THROWS_AS(render_scene(one(ShapeKind::circle, Color::red, 15, 15, 2)), ConfigError);
  SceneSpec spec;
  CHECK_THROWS_AS(render_scene(spec), ConfigError);
  // boxes [6,14] and [16,24]: one pixel of gap, two required
  spec.objects = {{ShapeKind::square, Color::red, 10, 10, 4}, {ShapeKind::square, Color::blue, 20, 10, 4}};
  CHECK_THROWS_AS(render_scene(spec), ConfigError);
  spec.objects[1].cx = 21;
  CHECK_NOTHROW(render_scene(spec));
  spec.objects[1].color = Color::red;
  CHECK_THROWS_AS(render_scene(spec), ConfigError);
  SceneSpec four;
  for (int i = 0; i < 4; ++i) four.objects.push_back({ShapeKind::square, static_cast<Color>(i), 4 + 8 * i, 4, 3});
  CHECK_THROWS_AS(render_scene(four), ConfigError);
}

TEST_CASE("random scenes valid with disjoint masks") {
  Rng rng(5);
  for (int i = 0; i < 300; ++i) {
    const auto scene = render_scene(random_scene(rng));
    scene.mask.validate();
    scene.correspondence.validate(scene.caption);
  }
}

TEST_CASE("class balance within 3 sigma") {
  Rng rng(2024);
  std::map<std::pair<int, int>, int> counts;
  int total = 0, white = 0;
  const int n = 2000;
  for (int i = 0; i < n; ++i) {
    const auto spec = random_scene(rng);
    white += spec.background == Background::white;
    for (const auto& o : spec.objects) {
      ++counts[{static_cast<int>(o.shape), static_cast<int>(o.color)}];
      ++total;
    }
  }
  CHECK(counts.size() == 12);
  const double p = 1.0 / 12.0;
  const double mu = total * p, sigma = std::sqrt(total * p * (1 - p));
  for (const auto& [k, c] : counts) {
    INFO("shape " << k.first << " color " << k.second << " count " << c << " expected " << mu);
    CHECK(std::abs(c - mu) <= 3 * sigma);
  }
  CHECK(std::abs(white - n / 2.0) <= 3 * std::sqrt(n * 0.25));
}

TEST_CASE("dataset round trip and reproducibility") {
  const auto d1 = temp_dir("a"), d2 = temp_dir("b");
  const auto ix = generate_dataset(d1, 99, 25);
  generate_dataset(d2, 99, 25);
  CHECK(ix.offsets.size() == 26);
  CHECK(dataset_hash(d1) == dataset_hash(d2));
  CHECK(io::read_file(d1 + "/records.bin") == io::read_file(d2 + "/records.bin"));

  const auto loaded = load_index(d1);
  CHECK(loaded.offsets == ix.offsets);
  CHECK(loaded.seed == 99);
  CHECK(loaded.vocab_hash == Vocabulary::shapes().hash());
  const auto all = load_all(loaded);
  const auto& v = Vocabulary::shapes();
  for (int i = 0; i < 25; ++i) {
    Rng rng(split_seed(99, static_cast<std::uint64_t>(i)));
    const auto expected = render_scene(random_scene(rng));
    CHECK(load_sample(loaded, i) == expected);
    CHECK(all[i] == expected);
    CHECK(all[i].mask.count() == static_cast<int>(all[i].correspondence.words.size()));
    for (int t : all[i].caption) CHECK(t < v.size());
    for (std::size_t r = 0; r < all[i].correspondence.words.size(); ++r) {
      const auto& w = all[i].correspondence.words[r];
      CHECK(v.token(all[i].caption[w[0]]) + " " + v.token(all[i].caption[w[1]]) == all[i].mask.labels[r]);
    }
  }
  CHECK_THROWS_AS(load_sample(loaded, 25), std::out_of_range);
  const auto d3 = temp_dir("c");
  generate_dataset(d3, 100, 25);
  CHECK(dataset_hash(d3) != dataset_hash(d1));

  const auto one_ix = generate_dataset(temp_dir("one"), 3, 1);
  CHECK(one_ix.offsets.size() == 2);
  CHECK_THROWS_AS(generate_dataset(temp_dir("zero"), 3, 0), ConfigError);
}

TEST_CASE("corrupt record reports offset") {
  const auto d = temp_dir("corrupt");
  const auto ix = generate_dataset(d, 7, 3);
  auto blob = io::read_file(d + "/records.bin");
  blob[ix.offsets[1] + 20] ^= 0x40;
  io::write_file(d + "/records.bin", blob);
  CHECK_NOTHROW(load_sample(ix, 0));
  try {
    load_sample(ix, 1);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("checksum") != std::string::npos);
    CHECK(msg.find("offset") != std::string::npos);
  }
  blob[ix.offsets[2]] = 'X';
  io::write_file(d + "/records.bin", blob);
  CHECK_THROWS_WITH_AS(load_sample(ix, 2), doctest::Contains(std::to_string(ix.offsets[2]).c_str()), FormatError);
  CHECK_THROWS_AS(load_index(d + "/missing"), IoError);
  CHECK_THROWS_AS(generate_dataset("/proc/forbidden/x", 1, 1), IoError);
}
