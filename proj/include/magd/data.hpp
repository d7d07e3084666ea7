#pragma once
// Procedural scenes of colored shapes with exact masks and token captions.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "magd/mask.hpp"
#include "magd/rng.hpp"
#include "magd/tensor.hpp"

namespace magd {

enum class ShapeKind : std::uint8_t { circle, square, triangle };
enum class Color : std::uint8_t { red, green, blue, yellow };
enum class Background : std::uint8_t { black, white };

inline constexpr int kNumShapes = 3;
inline constexpr int kNumColors = 4;

const char* shape_name(ShapeKind s);
const char* color_name(Color c);
ShapeKind parse_shape(const std::string& s);
Color parse_color(const std::string& s);
// RGB in [0,1].
std::array<float, 3> color_rgb(Color c);
std::array<float, 3> background_rgb(Background b);

struct SceneObject {
  ShapeKind shape = ShapeKind::circle;
  Color color = Color::red;
  int cx = 0;
  int cy = 0;
  int size = 4;  // radius or half-side
};

struct SceneSpec {
  std::vector<SceneObject> objects;
  Background background = Background::black;
};

struct DataConfig {
  int image_size = 32;
  int prompt_len = 8;
  int min_objects = 1;
  int max_objects = 3;
  int min_size = 4;
  int max_size = 7;
  int margin = 2;  // background pixels required between bounding boxes

  void validate() const;
};

// Inclusive pixel bounding box of an object.
struct Box {
  int x0, y0, x1, y1;
};
Box bounding_box(const SceneObject& o);

// Throws ConfigError naming the broken invariant.
void validate_scene(const SceneSpec& spec, const DataConfig& cfg);

// Raster support of one object, row-major 0/1.
std::vector<std::uint8_t> rasterize(const SceneObject& o, int height, int width);

struct Scene {
  Tensor image;  // [3,H,W] in [-1,1]
  SemanticMask mask;
  std::vector<int> caption;  // padded to prompt_len
  Correspondence correspondence;
  Background background = Background::black;

  friend bool operator==(const Scene&, const Scene&) = default;
};

// Objects are listed left to right by center (ties: top to bottom).
Scene render_scene(const SceneSpec& spec, const DataConfig& cfg = {});

SceneSpec random_scene(Rng& rng, const DataConfig& cfg = {});

struct DatasetIndex {
  std::string dir;
  std::uint64_t seed = 0;
  int count = 0;
  int height = 0;
  int width = 0;
  int prompt_len = 0;
  std::uint64_t vocab_hash = 0;
  std::vector<std::uint64_t> offsets;  // byte offsets into records.bin, plus the end offset
};

// Writes dir/index.txt and dir/records.bin; creates dir if needed.
DatasetIndex generate_dataset(const std::string& dir, std::uint64_t seed, int count, const DataConfig& cfg = {});
DatasetIndex load_index(const std::string& dir);
Scene load_sample(const DatasetIndex& index, int i);
std::vector<Scene> load_all(const DatasetIndex& index);

// FNV-1a over the index text and the record bytes.
std::uint64_t dataset_hash(const std::string& dir);

std::vector<std::uint8_t> encode_record(const Scene& s);
Scene decode_record(const std::uint8_t* data, std::size_t size, int height, int width, int prompt_len,
                    std::size_t base_offset = 0);

}  // namespace magd
