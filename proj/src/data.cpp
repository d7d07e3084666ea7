#include "magd/data.hpp"

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "magd/binary_io.hpp"
#include "magd/errors.hpp"
#include "magd/model.hpp"

namespace magd {

namespace {

constexpr char kRecordMagic[4] = {'M', 'G', 'D', 'R'};
constexpr const char* kIndexHeader = "magd-dataset 1";

}  // namespace

const char* shape_name(ShapeKind s) {
  switch (s) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
  }
  throw ConfigError("bad shape");
}

const char* color_name(Color c) {
  switch (c) {
    case Color::red: return "red";
    case Color::green: return "green";
    case Color::blue: return "blue";
    case Color::yellow: return "yellow";
  }
  throw ConfigError("bad color");
}

ShapeKind parse_shape(const std::string& s) {
  for (int i = 0; i < kNumShapes; ++i)
    if (s == shape_name(static_cast<ShapeKind>(i))) return static_cast<ShapeKind>(i);
  throw ConfigError("unknown shape '" + s + "'");
}

Color parse_color(const std::string& s) {
  for (int i = 0; i < kNumColors; ++i)
    if (s == color_name(static_cast<Color>(i))) return static_cast<Color>(i);
  throw ConfigError("unknown color '" + s + "'");
}

std::array<float, 3> color_rgb(Color c) {
  switch (c) {
    case Color::red: return {1.f, 0.f, 0.f};
    case Color::green: return {0.f, 1.f, 0.f};
    case Color::blue: return {0.f, 0.f, 1.f};
    case Color::yellow: return {1.f, 1.f, 0.f};
  }
  throw ConfigError("bad color");
}

std::array<float, 3> background_rgb(Background b) {
  return b == Background::white ? std::array<float, 3>{1.f, 1.f, 1.f} : std::array<float, 3>{0.f, 0.f, 0.f};
}

void DataConfig::validate() const {
  if (image_size < 8) throw ConfigError("data image_size must be >= 8");
  if (min_objects < 1 || max_objects > 3 || min_objects > max_objects)
    throw ConfigError("object count range must lie in [1,3]");
  if (min_size < 3 || min_size > max_size) throw ConfigError("object size range invalid (min size is 3)");
  if (2 * max_size + 1 > image_size) throw ConfigError("max object size does not fit the frame");
  if (prompt_len < 2 * max_objects) throw ConfigError("prompt_len too short for the caption");
  if (margin < 0) throw ConfigError("margin must be >= 0");
}

Box bounding_box(const SceneObject& o) { return {o.cx - o.size, o.cy - o.size, o.cx + o.size, o.cy + o.size}; }

void validate_scene(const SceneSpec& spec, const DataConfig& cfg) {
  const int n = static_cast<int>(spec.objects.size());
  if (n < 1 || n > 3) throw ConfigError("scene must hold 1 to 3 objects, got " + std::to_string(n));
  for (int i = 0; i < n; ++i) {
    const auto& o = spec.objects[i];
    if (o.size < 3) throw ConfigError("object " + std::to_string(i) + " smaller than 3 pixels");
    const Box b = bounding_box(o);
    if (b.x0 < 0 || b.y0 < 0 || b.x1 >= cfg.image_size || b.y1 >= cfg.image_size)
      throw ConfigError("object " + std::to_string(i) + " leaves the frame");
    for (int j = 0; j < i; ++j) {
      const Box c = bounding_box(spec.objects[j]);
      const int gap_x = std::max(c.x0 - b.x1, b.x0 - c.x1) - 1;
      const int gap_y = std::max(c.y0 - b.y1, b.y0 - c.y1) - 1;
      if (std::max(gap_x, gap_y) < cfg.margin)
        throw ConfigError("objects " + std::to_string(j) + " and " + std::to_string(i) + " too close");
      if (spec.objects[j].color == o.color)
        throw ConfigError("objects " + std::to_string(j) + " and " + std::to_string(i) + " share a color");
    }
  }
}

std::vector<std::uint8_t> rasterize(const SceneObject& o, int height, int width) {
  std::vector<std::uint8_t> r(static_cast<std::size_t>(height) * width, 0);
  const int s = o.size;
  for (int y = std::max(0, o.cy - s); y <= std::min(height - 1, o.cy + s); ++y) {
    for (int x = std::max(0, o.cx - s); x <= std::min(width - 1, o.cx + s); ++x) {
      const int dx = x - o.cx, dy = y - o.cy;
      bool in = false;
      switch (o.shape) {
        case ShapeKind::circle: in = dx * dx + dy * dy <= s * s; break;
        case ShapeKind::square: in = true; break;
        // apex up; half-width grows linearly from 0 at the top row to s at the bottom
        case ShapeKind::triangle: in = 2 * std::abs(dx) <= dy + s; break;
      }
      if (in) r[static_cast<std::size_t>(y) * width + x] = 1;
    }
  }
  return r;
}

Scene render_scene(const SceneSpec& spec, const DataConfig& cfg) {
  cfg.validate();
  validate_scene(spec, cfg);
  const int H = cfg.image_size, W = cfg.image_size;
  const auto& vocab = Vocabulary::shapes();

  std::vector<SceneObject> objs = spec.objects;
  std::stable_sort(objs.begin(), objs.end(),
                   [](const SceneObject& a, const SceneObject& b) { return a.cx != b.cx ? a.cx < b.cx : a.cy < b.cy; });

  Scene out;
  out.background = spec.background;
  out.image = Tensor({3, H, W});
  const auto bg = background_rgb(spec.background);
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  for (int c = 0; c < 3; ++c)
    std::fill_n(out.image.data().begin() + c * hw, hw, 2.f * bg[c] - 1.f);

  out.mask.height = H;
  out.mask.width = W;
  out.caption.assign(static_cast<std::size_t>(cfg.prompt_len), Vocabulary::kPad);
  for (std::size_t i = 0; i < objs.size(); ++i) {
    const auto& o = objs[i];
    auto region = rasterize(o, H, W);
    const auto rgb = color_rgb(o.color);
    for (std::size_t p = 0; p < hw; ++p) {
      if (!region[p]) continue;
      for (int c = 0; c < 3; ++c) out.image.data()[c * hw + p] = 2.f * rgb[c] - 1.f;
    }
    out.mask.regions.push_back(std::move(region));
    out.mask.labels.push_back(std::string(color_name(o.color)) + " " + shape_name(o.shape));
    const int w0 = static_cast<int>(2 * i);
    out.caption[w0] = vocab.id(color_name(o.color));
    out.caption[w0 + 1] = vocab.id(shape_name(o.shape));
    out.correspondence.words.push_back({w0, w0 + 1});
  }
  return out;
}

SceneSpec random_scene(Rng& rng, const DataConfig& cfg) {
  cfg.validate();
  const int H = cfg.image_size;
  for (int attempt = 0; attempt < 100000; ++attempt) {
    SceneSpec spec;
    spec.background = rng.below(2) ? Background::white : Background::black;
    const int n = rng.uniform_int(cfg.min_objects, cfg.max_objects);
    std::array<int, kNumColors> colors{0, 1, 2, 3};
    for (int i = kNumColors - 1; i > 0; --i) std::swap(colors[i], colors[rng.below(static_cast<std::uint64_t>(i + 1))]);
    for (int i = 0; i < n; ++i) {
      SceneObject o;
      o.shape = static_cast<ShapeKind>(rng.below(kNumShapes));
      o.color = static_cast<Color>(colors[i]);
      o.size = rng.uniform_int(cfg.min_size, cfg.max_size);
      o.cx = rng.uniform_int(o.size, H - 1 - o.size);
      o.cy = rng.uniform_int(o.size, H - 1 - o.size);
      spec.objects.push_back(o);
    }
    try {
      validate_scene(spec, cfg);
      return spec;
    } catch (const ConfigError&) {
    }
  }
  throw ConfigError("could not sample a valid scene; object sizes too large for the frame");
}

std::vector<std::uint8_t> encode_record(const Scene& s) {
  io::ByteWriter w;
  w.bytes(std::string_view(kRecordMagic, 4));
  w.u8(static_cast<std::uint8_t>(s.mask.count()));
  w.u8(static_cast<std::uint8_t>(s.background));
  const int H = s.image.dim(1), W = s.image.dim(2);
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  for (std::size_t p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) w.f32(s.image.data()[c * hw + p]);
  for (const auto& r : s.mask.regions) w.bytes(r);
  for (int t : s.caption) w.u16(static_cast<std::uint16_t>(t));
  w.u32(io::crc32(w.data().data(), w.size()));
  return w.data();
}

Scene decode_record(const std::uint8_t* data, std::size_t size, int H, int W, int L, std::size_t base) {
  io::ByteReader r(data, size, "dataset record", base);
  if (r.str(4) != std::string_view(kRecordMagic, 4)) r.fail_at(0, "bad record magic");
  const int n = r.u8();
  if (n < 1 || n > 3) r.fail("bad object count " + std::to_string(n));
  const int bg = r.u8();
  if (bg > 1) r.fail("bad background");
  Scene s;
  s.background = static_cast<Background>(bg);
  s.image = Tensor({3, H, W});
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  for (std::size_t p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) s.image.data()[c * hw + p] = r.f32();
  s.mask.height = H;
  s.mask.width = W;
  const auto& vocab = Vocabulary::shapes();
  for (int i = 0; i < n; ++i) {
    const std::uint8_t* p = r.raw(hw);
    s.mask.regions.emplace_back(p, p + hw);
  }
  s.caption.resize(static_cast<std::size_t>(L));
  for (int i = 0; i < L; ++i) {
    s.caption[i] = r.u16();
    if (s.caption[i] >= vocab.size()) r.fail("caption token out of vocabulary");
  }
  const std::size_t body = r.pos();
  const std::uint32_t stored = r.u32();
  if (stored != io::crc32(data, body)) r.fail("checksum mismatch");
  if (r.remaining() != 0) r.fail("trailing bytes");
  for (int i = 0; i < n; ++i) {
    if (2 * i + 1 >= L) r.fail("caption too short for object count");
    s.mask.labels.push_back(vocab.token(s.caption[2 * i]) + " " + vocab.token(s.caption[2 * i + 1]));
    s.correspondence.words.push_back({2 * i, 2 * i + 1});
  }
  return s;
}

namespace {

std::string index_text(const DatasetIndex& ix) {
  std::ostringstream os;
  os << kIndexHeader << '\n'
     << "seed " << ix.seed << '\n'
     << "count " << ix.count << '\n'
     << "height " << ix.height << '\n'
     << "width " << ix.width << '\n'
     << "prompt_len " << ix.prompt_len << '\n'
     << "vocab_hash " << std::hex << ix.vocab_hash << std::dec << '\n'
     << "offsets";
  for (auto o : ix.offsets) os << ' ' << o;
  os << '\n';
  return os.str();
}

}  // namespace

DatasetIndex generate_dataset(const std::string& dir, std::uint64_t seed, int count, const DataConfig& cfg) {
  if (count < 1) throw ConfigError("dataset count must be >= 1");
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());

  DatasetIndex ix;
  ix.dir = dir;
  ix.seed = seed;
  ix.count = count;
  ix.height = ix.width = cfg.image_size;
  ix.prompt_len = cfg.prompt_len;
  ix.vocab_hash = Vocabulary::shapes().hash();

  std::vector<std::uint8_t> blob;
  for (int i = 0; i < count; ++i) {
    Rng rng(split_seed(seed, static_cast<std::uint64_t>(i)));
    const auto rec = encode_record(render_scene(random_scene(rng, cfg), cfg));
    ix.offsets.push_back(blob.size());
    blob.insert(blob.end(), rec.begin(), rec.end());
  }
  ix.offsets.push_back(blob.size());
  io::write_file(dir + "/records.bin", blob);
  io::write_text(dir + "/index.txt", index_text(ix));
  return ix;
}

DatasetIndex load_index(const std::string& dir) {
  const std::string path = dir + "/index.txt";
  std::istringstream in(io::read_text(path));
  auto bad = [&](const std::string& m) { return FormatError(path + ": " + m); };
  std::string line;
  if (!std::getline(in, line) || line != kIndexHeader) throw bad("missing header");
  DatasetIndex ix;
  ix.dir = dir;
  auto field = [&](const char* key) {
    std::string k;
    if (!(in >> k) || k != key) throw bad(std::string("expected '") + key + "'");
  };
  field("seed");
  in >> ix.seed;
  field("count");
  in >> ix.count;
  field("height");
  in >> ix.height;
  field("width");
  in >> ix.width;
  field("prompt_len");
  in >> ix.prompt_len;
  field("vocab_hash");
  in >> std::hex >> ix.vocab_hash >> std::dec;
  field("offsets");
  if (!in || ix.count < 1 || ix.height < 1 || ix.width < 1 || ix.prompt_len < 1) throw bad("bad header values");
  std::uint64_t o;
  while (in >> o) ix.offsets.push_back(o);
  if (ix.offsets.size() != static_cast<std::size_t>(ix.count) + 1) throw bad("offset table length mismatch");
  if (!std::is_sorted(ix.offsets.begin(), ix.offsets.end())) throw bad("offsets not increasing");
  if (ix.vocab_hash != Vocabulary::shapes().hash()) throw bad("vocabulary hash mismatch");
  return ix;
}

Scene load_sample(const DatasetIndex& ix, int i) {
  if (i < 0 || i >= ix.count)
    throw std::out_of_range("sample " + std::to_string(i) + " out of range [0," + std::to_string(ix.count) + ")");
  const std::string path = ix.dir + "/records.bin";
  const auto blob = io::read_file(path);
  if (ix.offsets.back() != blob.size()) throw FormatError(path + ": size does not match index");
  const std::size_t a = ix.offsets[i], b = ix.offsets[i + 1];
  return decode_record(blob.data() + a, b - a, ix.height, ix.width, ix.prompt_len, a);
}

std::vector<Scene> load_all(const DatasetIndex& ix) {
  const std::string path = ix.dir + "/records.bin";
  const auto blob = io::read_file(path);
  if (ix.offsets.back() != blob.size()) throw FormatError(path + ": size does not match index");
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(ix.count));
  for (int i = 0; i < ix.count; ++i) {
    const std::size_t a = ix.offsets[i], b = ix.offsets[i + 1];
    out.push_back(decode_record(blob.data() + a, b - a, ix.height, ix.width, ix.prompt_len, a));
  }
  return out;
}

std::uint64_t dataset_hash(const std::string& dir) {
  const auto a = io::read_file(dir + "/index.txt");
  const auto b = io::read_file(dir + "/records.bin");
  return io::fnv1a64(b.data(), b.size(), io::fnv1a64(a.data(), a.size()));
}

}  // namespace magd
