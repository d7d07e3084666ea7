#include "magd/checkpoint.hpp"

#include "magd/binary_io.hpp"
#include "magd/errors.hpp"

namespace magd {

namespace {

constexpr char kMagic[4] = {'A', 'T', 'G', 'D'};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model& model) {
  model.config.validate();
  io::ByteWriter w;
  w.bytes(std::string_view(kMagic, 4));
  w.u16(kCheckpointVersion);
  const auto& c = model.config;
  for (int v : {c.image_size, c.channels, c.levels, c.heads, c.context_dim, c.max_prompt_len, c.vocab_size, c.groups})
    w.u32(static_cast<std::uint32_t>(v));
  w.u8(c.positional_embedding ? 1 : 0);
  w.u64(model.train_steps);
  w.u32(static_cast<std::uint32_t>(model.weights.size()));
  for (const auto& [name, t] : model.weights) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.data()) w.f32(v);
  }
  w.u32(io::crc32(w.data().data(), w.size()));
  return w.data();
}

Model decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& what) {
  io::ByteReader r(bytes.data(), bytes.size(), what);
  if (bytes.size() < 4 + 2 + 4) r.fail("file too short");
  const std::size_t body = bytes.size() - 4;
  io::ByteReader tail(bytes.data() + body, 4, what, body);
  if (tail.u32() != io::crc32(bytes.data(), body)) r.fail_at(body, "checksum mismatch");

  if (r.str(4) != std::string_view(kMagic, 4)) r.fail_at(0, "bad magic");
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
  Model m;
  auto& c = m.config;
  for (int* f : {&c.image_size, &c.channels, &c.levels, &c.heads, &c.context_dim, &c.max_prompt_len, &c.vocab_size,
                 &c.groups})
    *f = static_cast<int>(r.u32());
  c.positional_embedding = r.u8() != 0;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    r.fail(std::string("invalid config: ") + e.what());
  }
  m.train_steps = r.u64();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.u16());
    const int rank = r.u8();
    Shape shape;
    std::size_t n = 1;
    for (int d = 0; d < rank; ++d) {
      shape.push_back(static_cast<int>(r.u32()));
      if (shape.back() <= 0) r.fail("non-positive dimension in '" + name + "'");
      n *= static_cast<std::size_t>(shape.back());
    }
    if (n * 4 > r.remaining()) r.fail("tensor '" + name + "' exceeds file");
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32();
    if (!m.weights.emplace(name, Tensor(std::move(shape), std::move(data))).second)
      r.fail("duplicate tensor '" + name + "'");
  }
  if (r.pos() != body) r.fail("unexpected trailing bytes");

  // Every expected weight must be present with the expected shape.
  const Weights ref = init_weights(c, 0);
  for (const auto& [name, t] : ref) {
    auto it = m.weights.find(name);
    if (it == m.weights.end()) throw FormatError(what + ": missing tensor '" + name + "'");
    if (it->second.shape() != t.shape())
      throw FormatError(what + ": tensor '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                        shape_str(t.shape()));
  }
  if (m.weights.size() != ref.size()) throw FormatError(what + ": unexpected extra tensors");
  return m;
}

void save_checkpoint(const std::string& path, const Model& model) { io::write_file(path, encode_checkpoint(model)); }

Model load_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path), path); }

}  // namespace magd
