#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cscunet/errors.hpp"
#include "cscunet/unet.hpp"

namespace cscunet {

namespace {

constexpr char kMagic[8] = {'C', 'S', 'C', 'U', 'N', 'E', 'T', '\0'};

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void expect_raw(const char* p, std::size_t n) {
    need(n);
    if (std::memcmp(bytes_.data() + pos_, p, n) != 0) {
      throw DataError("checkpoint: bad magic, not a cscunet checkpoint");
    }
    pos_ += n;
  }
  [[nodiscard]] bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("checkpoint: truncated file");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(Model& model) {
  Writer out;
  out.raw(kMagic, sizeof kMagic);
  out.u32(kCheckpointVersion);
  const VariantSpec& spec = model.spec();
  out.u32(static_cast<std::uint32_t>(spec.variant));
  out.u32(static_cast<std::uint32_t>(spec.encode_unfoldings));
  out.u32(static_cast<std::uint32_t>(spec.decode_unfoldings));
  for (int w : spec.widths) out.u32(static_cast<std::uint32_t>(w));
  out.u32(static_cast<std::uint32_t>(spec.in_channels));
  out.u32(static_cast<std::uint32_t>(spec.num_classes));
  out.u32(spec.batchnorm ? 1U : 0U);

  const auto params = model.parameters();
  out.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    out.str(p.name);
    const Shape s = p.tensor.shape();
    for (int d : {s.n, s.c, s.h, s.w}) out.u32(static_cast<std::uint32_t>(d));
    for (float v : p.tensor.data()) out.f32(v);
  }
  const auto stats = model.batchnorm_stats();
  out.u32(static_cast<std::uint32_t>(stats.size()));
  for (const auto& s : stats) {
    out.str(s.name);
    out.u32(static_cast<std::uint32_t>(s.stats->mean.size()));
    for (float v : s.stats->mean) out.f32(v);
    for (float v : s.stats->var) out.f32(v);
  }
  return out.take();
}

Model deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  in.expect_raw(kMagic, sizeof kMagic);
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  VariantSpec spec;
  const std::uint32_t variant = in.u32();
  if (variant > static_cast<std::uint32_t>(Variant::all)) {
    throw DataError("checkpoint: unknown variant code " + std::to_string(variant));
  }
  spec.variant = static_cast<Variant>(variant);
  spec.encode_unfoldings = static_cast<int>(in.u32());
  spec.decode_unfoldings = static_cast<int>(in.u32());
  for (int& w : spec.widths) w = static_cast<int>(in.u32());
  spec.in_channels = static_cast<int>(in.u32());
  spec.num_classes = static_cast<int>(in.u32());
  spec.batchnorm = in.u32() != 0;

  Model model(spec, 0);
  auto params = model.parameters();
  const std::uint32_t count = in.u32();
  if (count != params.size()) {
    throw DataError("checkpoint: " + std::to_string(count) + " parameters, architecture has " +
                    std::to_string(params.size()));
  }
  for (auto& p : params) {
    const std::string name = in.str();
    if (name != p.name) throw DataError("checkpoint: expected '" + p.name + "', found '" + name + "'");
    Shape s;
    s.n = static_cast<int>(in.u32());
    s.c = static_cast<int>(in.u32());
    s.h = static_cast<int>(in.u32());
    s.w = static_cast<int>(in.u32());
    if (s != p.tensor.shape()) throw DataError("checkpoint: shape mismatch for " + name);
    for (float& v : p.tensor.data()) v = in.f32();
  }
  auto stats = model.batchnorm_stats();
  const std::uint32_t stats_count = in.u32();
  if (stats_count != stats.size()) throw DataError("checkpoint: batch-norm layer count mismatch");
  for (auto& s : stats) {
    const std::string name = in.str();
    if (name != s.name) throw DataError("checkpoint: expected '" + s.name + "', found '" + name + "'");
    const std::uint32_t channels = in.u32();
    if (channels != s.stats->mean.size()) {
      throw DataError("checkpoint: channel mismatch for " + name);
    }
    for (float& v : s.stats->mean) v = in.f32();
    for (float& v : s.stats->var) v = in.f32();
  }
  if (!in.at_end()) throw DataError("checkpoint: trailing bytes");
  return model;
}

void save_checkpoint(Model& model, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write checkpoint " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                        std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace cscunet
