#include "strokenext/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "strokenext/errors.hpp"

namespace strokenext {

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'S', 'N', 'X', 'T', 'C', 'K', 'P', 'T'};
constexpr std::size_t kHeaderSize = 8 + 4 + 4 + 8 + 8 + 4 + 4;

class Writer {
 public:
  template <typename V>
  void pod(const V& v) {
    static_assert(std::is_trivially_copyable_v<V>);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(V));
  }
  void u64(std::uint64_t v) { pod(v); }
  void f64(double v) { pod(v); }
  void str(const std::string& s) {
    u64(s.size());
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  template <typename V>
  void vec(const std::vector<V>& v) {
    u64(v.size());
    const auto* p = reinterpret_cast<const char*>(v.data());
    buf_.insert(buf_.end(), p, p + v.size() * sizeof(V));
  }
  std::vector<char>& bytes() { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const char* data, std::size_t size) : p_(data), end_(data + size) {}

  template <typename V>
  V pod() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, p_, sizeof(V));
    p_ += sizeof(V);
    return v;
  }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  double f64() { return pod<double>(); }
  std::string str() {
    const auto n = u64();
    need(n);
    std::string s(p_, p_ + n);
    p_ += n;
    return s;
  }
  template <typename V>
  std::vector<V> vec() {
    const auto n = u64();
    if (n > static_cast<std::uint64_t>(end_ - p_) / sizeof(V)) fail();
    std::vector<V> v(n);
    std::memcpy(v.data(), p_, n * sizeof(V));
    p_ += n * sizeof(V);
    return v;
  }
  bool done() const { return p_ == end_; }

 private:
  void need(std::uint64_t n) {
    if (n > static_cast<std::uint64_t>(end_ - p_)) fail();
  }
  [[noreturn]] static void fail() { throw IntegrityError("checkpoint payload is truncated"); }
  const char* p_;
  const char* end_;
};

void write_tensors(Writer& w, const std::vector<training::NamedTensor>& ts) {
  w.u64(ts.size());
  for (const auto& t : ts) {
    w.str(t.name);
    w.vec(std::vector<std::uint64_t>(t.shape.begin(), t.shape.end()));
    w.vec(t.values);
  }
}

std::vector<training::NamedTensor> read_tensors(Reader& r) {
  std::vector<training::NamedTensor> ts(r.u64());
  for (auto& t : ts) {
    t.name = r.str();
    const auto shape = r.vec<std::uint64_t>();
    t.shape.assign(shape.begin(), shape.end());
    t.values = r.vec<float>();
  }
  return ts;
}

void write_model_config(Writer& w, const ModelConfig& c) {
  w.u64(static_cast<std::uint64_t>(c.variant.name));
  for (auto v : c.variant.channels) w.u64(v);
  for (auto v : c.variant.depths) w.u64(v);
  w.u64(c.fusion.channels);
  w.u64(c.fusion.hidden_width);
  w.f64(c.fusion.dropout_rate);
  w.u64(c.fusion.num_classes);
  w.u64(static_cast<std::uint64_t>(c.fusion.mode));
  w.u64(static_cast<std::uint64_t>(c.task));
  w.u64(c.branch1_seed);
  w.u64(c.branch2_seed);
  w.u64(c.decoder_seed);
}

ModelConfig read_model_config(Reader& r) {
  ModelConfig c;
  c.variant.name = static_cast<VariantName>(r.u64());
  for (auto& v : c.variant.channels) v = r.u64();
  for (auto& v : c.variant.depths) v = r.u64();
  c.fusion.channels = r.u64();
  c.fusion.hidden_width = r.u64();
  c.fusion.dropout_rate = r.f64();
  c.fusion.num_classes = r.u64();
  c.fusion.mode = static_cast<FusionMode>(r.u64());
  c.task = static_cast<data::Task>(r.u64());
  c.branch1_seed = r.u64();
  c.branch2_seed = r.u64();
  c.decoder_seed = r.u64();
  return c;
}

std::uint32_t checksum(const char* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

void save_checkpoint(const training::Checkpoint& ckpt, const std::filesystem::path& path) {
  Writer w;
  write_model_config(w, ckpt.model);
  write_tensors(w, ckpt.params);
  write_tensors(w, ckpt.buffers);
  const auto& opt = ckpt.optimizer;
  w.f64(opt.config.beta1);
  w.f64(opt.config.beta2);
  w.f64(opt.config.eps);
  w.u64(opt.step);
  w.u64(opt.moments.size());
  for (const auto& m : opt.moments) {
    w.vec(m.m);
    w.vec(m.v);
  }
  w.f64(ckpt.scheduler.lr);
  w.f64(ckpt.scheduler.best);
  w.u64(ckpt.scheduler.bad_epochs);
  w.u64(ckpt.epoch);
  w.u64(ckpt.split_seed);
  for (double r : ckpt.split_ratios) w.f64(r);
  w.u64(ckpt.split_stratified ? 1 : 0);
  w.u64(static_cast<std::uint64_t>(ckpt.image_size));
  w.u64(ckpt.class_names.size());
  for (const auto& n : ckpt.class_names) w.str(n);
  const auto& payload = w.bytes();

  Writer header;
  for (char c : kMagic) header.pod(c);
  header.pod(kCheckpointVersion);
  header.pod(std::uint32_t{0});
  header.u64(ckpt.model.fingerprint());
  header.u64(payload.size());
  header.pod(checksum(payload.data(), payload.size()));
  header.pod(std::uint32_t{0});

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + tmp.string() + "' for writing");
    os.write(header.bytes().data(), static_cast<std::streamsize>(header.bytes().size()));
    os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!os) throw IoError("failed writing checkpoint '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into '" + path.string() + "': " + ec.message());
}

training::Checkpoint load_checkpoint(const std::filesystem::path& path,
                                     const std::optional<ModelConfig>& expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path.string() + "'");
  const std::vector<char> bytes((std::istreambuf_iterator<char>(is)),
                                std::istreambuf_iterator<char>());
  if (bytes.size() < kHeaderSize) throw IntegrityError("checkpoint header is truncated");
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw IntegrityError("'" + path.string() + "' is not a checkpoint file");
  }
  Reader header(bytes.data() + sizeof kMagic, kHeaderSize - sizeof kMagic);
  const auto version = header.pod<std::uint32_t>();
  header.pod<std::uint32_t>();
  const auto fingerprint = header.u64();
  const auto payload_size = header.u64();
  const auto crc = header.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw IntegrityError("unsupported checkpoint version " + std::to_string(version));
  }
  if (bytes.size() - kHeaderSize != payload_size) {
    throw IntegrityError("checkpoint payload is truncated");
  }
  const char* payload = bytes.data() + kHeaderSize;
  if (checksum(payload, payload_size) != crc) {
    throw IntegrityError("checkpoint checksum mismatch");
  }
  if (expected && expected->fingerprint() != fingerprint) {
    throw FingerprintMismatch("checkpoint was trained for a different model configuration");
  }

  Reader r(payload, payload_size);
  training::Checkpoint ckpt;
  ckpt.model = read_model_config(r);
  if (ckpt.model.fingerprint() != fingerprint) {
    throw IntegrityError("checkpoint header fingerprint disagrees with its payload");
  }
  ckpt.params = read_tensors(r);
  ckpt.buffers = read_tensors(r);
  auto& opt = ckpt.optimizer;
  opt.config.beta1 = r.f64();
  opt.config.beta2 = r.f64();
  opt.config.eps = r.f64();
  opt.step = r.u64();
  opt.moments.resize(r.u64());
  for (auto& m : opt.moments) {
    m.m = r.vec<double>();
    m.v = r.vec<double>();
  }
  ckpt.scheduler.lr = r.f64();
  ckpt.scheduler.best = r.f64();
  ckpt.scheduler.bad_epochs = r.u64();
  ckpt.epoch = r.u64();
  ckpt.split_seed = r.u64();
  for (double& v : ckpt.split_ratios) v = r.f64();
  ckpt.split_stratified = r.u64() != 0;
  ckpt.image_size = static_cast<int>(r.u64());
  ckpt.class_names.resize(r.u64());
  for (auto& n : ckpt.class_names) n = r.str();
  if (!r.done()) throw IntegrityError("checkpoint payload has trailing bytes");
  return ckpt;
}

}  // namespace strokenext
