#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "debias/errors.hpp"
#include "debias/harness.hpp"
#include "debias/rng.hpp"

namespace debias::harness {

namespace {

constexpr char kMagic[4] = {'D', 'B', 'C', 'K'};

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(int v) { u32(static_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    buf_.append(s);
  }
  void ints(const std::vector<int>& v) {
    u64(v.size());
    for (int x : v) i32(x);
  }
  void param(const nn::Parameter& p) {
    u64(p.size());
    for (double v : p.value) f64(v);
    for (auto f : p.frozen) u8(f);
  }
  std::string& bytes() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  int i32() { return static_cast<int>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::size_t count(std::size_t elem_bytes) {
    const auto n = u64();
    if (elem_bytes > 0 && n > (end_ - pos_) / elem_bytes) corrupt("length field exceeds file size");
    return static_cast<std::size_t>(n);
  }
  std::string str() {
    const auto n = count(1);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<int> ints() {
    std::vector<int> v(count(4));
    for (int& x : v) x = i32();
    return v;
  }
  nn::Parameter param() {
    nn::Parameter p(count(9));
    for (double& v : p.value) v = f64();
    for (auto& f : p.frozen) f = u8();
    return p;
  }
  void seek(std::size_t p) { pos_ = p; }
  bool done() const { return pos_ == end_; }
  [[noreturn]] static void corrupt(const std::string& why) {
    throw CheckpointError(CheckpointError::Code::Corrupt, "corrupt checkpoint: " + why);
  }

 private:
  void need(std::size_t n) {
    if (end_ - pos_ < n) corrupt("unexpected end of data");
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint64_t checksum(const std::string& bytes, std::size_t n) {
  return fnv1a(std::string_view(bytes.data(), n));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CheckpointFile& f) {
  Writer w;
  w.bytes().append(kMagic, 4);
  w.u32(f.version);
  w.u64(f.config_hash);
  w.u64(f.seed);
  w.i32(f.order_index);
  w.ints(f.order);
  w.i32(f.steps_done);

  const auto& c = f.model.config;
  w.i32(c.in_channels);
  w.i32(c.height);
  w.i32(c.width);
  w.u64(c.conv_layers.size());
  for (const auto& l : c.conv_layers) {
    w.i32(l.out_channels);
    w.i32(l.kernel_size);
  }
  w.i32(c.head_width);
  w.u64(c.seed);

  for (const auto& layer : f.model.params.conv) {
    w.param(layer.weight);
    w.param(layer.bias);
  }
  w.f64(f.model.params.alpha_raw);

  // Memberships are the union of the recorded masks, so masks suffice.
  const auto& masks = f.model.registry.masks();
  w.u64(masks.size());
  for (const auto& [task, m] : masks) {
    w.i32(task);
    for (const auto& layer : m.kept) {
      w.u64(layer.size());
      for (auto k : layer) w.u8(k);
    }
  }
  w.u64(f.model.heads.size());
  for (const auto& h : f.model.heads) {
    w.i32(h.task_id);
    w.ints(h.classes);
    w.param(h.hidden_weight);
    w.param(h.hidden_bias);
    w.param(h.out_weight);
    w.param(h.out_bias);
  }
  w.str(f.rng_state);
  w.u64(checksum(w.bytes(), w.bytes().size()));

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError(CheckpointError::Code::Io, "cannot open " + tmp + " for writing");
    os.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    if (!os) throw CheckpointError(CheckpointError::Code::Io, "failed writing " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointError::Code::Io, "cannot move checkpoint into " + path.string());
}

CheckpointFile load_checkpoint(const std::filesystem::path& path,
                               std::optional<std::uint64_t> expected_hash) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError(CheckpointError::Code::Io, "cannot open " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (buf.size() < 4 + 4 + 8 || std::memcmp(buf.data(), kMagic, 4) != 0) {
    Reader::corrupt("missing magic bytes or file too short");
  }
  {
    Reader hdr(buf, buf.size());
    hdr.seek(4);
    const auto version = hdr.u32();
    if (version != kCheckpointVersion) {
      throw CheckpointError(CheckpointError::Code::VersionMismatch,
                            "checkpoint version " + std::to_string(version) + ", expected " +
                                std::to_string(kCheckpointVersion));
    }
  }
  const std::size_t body_end = buf.size() - 8;
  {
    Reader tail(buf, buf.size());
    tail.seek(body_end);
    if (tail.u64() != checksum(buf, body_end)) Reader::corrupt("checksum mismatch");
  }

  Reader r(buf, body_end);
  r.seek(4);
  CheckpointFile f;
  f.version = r.u32();
  f.config_hash = r.u64();
  if (expected_hash && *expected_hash != f.config_hash) {
    throw CheckpointError(CheckpointError::Code::ConfigMismatch,
                          "checkpoint was written under a different configuration");
  }
  f.seed = r.u64();
  f.order_index = r.i32();
  f.order = r.ints();
  f.steps_done = r.i32();

  nn::NetworkConfig c;
  c.in_channels = r.i32();
  c.height = r.i32();
  c.width = r.i32();
  c.conv_layers.resize(r.count(8));
  for (auto& l : c.conv_layers) {
    l.out_channels = r.i32();
    l.kernel_size = r.i32();
  }
  c.head_width = r.i32();
  c.seed = r.u64();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    Reader::corrupt(std::string("invalid network config: ") + e.what());
  }

  subnet::ContinualModel model;
  model.config = c;
  model.params = nn::ParamStore::initialize(c);  // shapes only; values overwritten
  for (auto& layer : model.params.conv) {
    auto w = r.param();
    auto b = r.param();
    if (w.size() != layer.weight.size() || b.size() != layer.bias.size()) {
      Reader::corrupt("parameter shape does not match the network config");
    }
    layer.weight = std::move(w);
    layer.bias = std::move(b);
  }
  model.params.alpha_raw = r.f64();

  model.registry = subnet::UnitRegistry(c);
  const auto num_masks = r.count(4);
  for (std::size_t i = 0; i < num_masks; ++i) {
    subnet::TaskMask m;
    m.task_id = r.i32();
    m.kept = nn::full_mask(c);
    for (auto& layer : m.kept) {
      if (r.count(1) != layer.size()) Reader::corrupt("mask shape does not match the network config");
      for (auto& k : layer) k = r.u8();
    }
    try {
      model.registry.record(m);
    } catch (const Error& e) {
      Reader::corrupt(e.what());
    }
  }
  const auto num_heads = r.count(4);
  for (std::size_t i = 0; i < num_heads; ++i) {
    nn::TaskHead h;
    h.task_id = r.i32();
    h.classes = r.ints();
    h.hidden_weight = r.param();
    h.hidden_bias = r.param();
    h.out_weight = r.param();
    h.out_bias = r.param();
    const std::size_t in = c.head_width > 0 ? static_cast<std::size_t>(c.head_width)
                                            : static_cast<std::size_t>(c.feature_width());
    if (h.classes.empty() || h.out_weight.size() != h.classes.size() * in ||
        h.out_bias.size() != h.classes.size()) {
      Reader::corrupt("head shape does not match the network config");
    }
    model.heads.push_back(std::move(h));
  }
  f.model = std::move(model);
  f.rng_state = r.str();
  if (!r.done()) Reader::corrupt("trailing bytes");
  return f;
}

}  // namespace debias::harness
