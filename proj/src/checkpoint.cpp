// Binary checkpoint container.
//
//   magic   "PBALCKPT"
//   u32     format version
//   u32     entry count
//   entry*  u8 kind, u16 name length, name bytes, payload
//   u8[32]  SHA-256 of everything before it
//
// Payloads: kind 1 (f64 array) and kind 2 (i64 array) are u32 rank, u64 dims,
// then column-major data; kind 3 (string) is u32 length and bytes. All
// integers and floats are little-endian.

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <fmt/format.h>
#include <openssl/evp.h>

#include "pbal/dpmpb.hpp"

namespace pbal {

namespace {

constexpr std::array<char, 8> kMagic{'P', 'B', 'A', 'L', 'C', 'K', 'P', 'T'};
constexpr std::size_t kDigestSize = 32;

enum class Kind : std::uint8_t { F64 = 1, I64 = 2, String = 3 };

struct Entry {
  Kind kind{};
  std::vector<std::uint64_t> dims;
  std::vector<double> f64;
  std::vector<std::int64_t> i64;
  std::string text;
};

std::array<std::uint8_t, kDigestSize> sha256(std::span<const std::uint8_t> bytes) {
  std::array<std::uint8_t, kDigestSize> out{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
      len != kDigestSize)
    throw CheckpointError("SHA-256 computation failed");
  return out;
}

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  void header(Kind k, std::string_view name) {
    u8(static_cast<std::uint8_t>(k));
    u16(static_cast<std::uint16_t>(name.size()));
    bytes(name);
    ++count_;
  }

  void f64_array(std::string_view name, std::span<const double> data,
                 std::initializer_list<std::uint64_t> dims) {
    header(Kind::F64, name);
    u32(static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) u64(d);
    for (double v : data) f64(v);
  }
  void i64_array(std::string_view name, std::span<const std::int64_t> data) {
    header(Kind::I64, name);
    u32(1);
    u64(data.size());
    for (auto v : data) u64(static_cast<std::uint64_t>(v));
  }
  void string(std::string_view name, std::string_view text) {
    header(Kind::String, name);
    u32(static_cast<std::uint32_t>(text.size()));
    bytes(text);
  }

  std::uint32_t count() const { return count_; }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
  std::uint32_t count_ = 0;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  double f64() { return std::bit_cast<double>(le(8)); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw CheckpointError("corrupt checkpoint: truncated data");
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

void put_matrix(Writer& w, const std::string& name, const Mat& m) {
  w.f64_array(name, std::span<const double>(m.data(), static_cast<std::size_t>(m.size())),
              {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())});
}

void put_vector(Writer& w, const std::string& name, const Vec& v) {
  w.f64_array(name, std::span<const double>(v.data(), static_cast<std::size_t>(v.size())),
              {static_cast<std::uint64_t>(v.size())});
}

void put_optimizer(Writer& w, const std::string& name, const nn::OptimizerConfig& c) {
  const std::array<double, 6> v{c.kind == nn::OptimizerKind::Adam ? 0.0 : 1.0,
                                c.learning_rate, c.beta1, c.beta2, c.epsilon, c.momentum};
  w.f64_array(name, v, {6});
}

const Entry& get(const std::map<std::string, Entry>& m, const std::string& name, Kind kind) {
  auto it = m.find(name);
  if (it == m.end()) throw CheckpointError(fmt::format("corrupt checkpoint: missing entry '{}'", name));
  if (it->second.kind != kind)
    throw CheckpointError(fmt::format("corrupt checkpoint: entry '{}' has wrong kind", name));
  return it->second;
}

Mat get_matrix(const std::map<std::string, Entry>& m, const std::string& name) {
  const Entry& e = get(m, name, Kind::F64);
  if (e.dims.size() != 2) throw CheckpointError(fmt::format("entry '{}' is not a matrix", name));
  Mat out(static_cast<Eigen::Index>(e.dims[0]), static_cast<Eigen::Index>(e.dims[1]));
  std::copy(e.f64.begin(), e.f64.end(), out.data());
  return out;
}

Vec get_vector(const std::map<std::string, Entry>& m, const std::string& name) {
  const Entry& e = get(m, name, Kind::F64);
  if (e.dims.size() != 1) throw CheckpointError(fmt::format("entry '{}' is not a vector", name));
  Vec out(static_cast<Eigen::Index>(e.dims[0]));
  std::copy(e.f64.begin(), e.f64.end(), out.data());
  return out;
}

nn::OptimizerConfig get_optimizer(const std::map<std::string, Entry>& m, const std::string& name) {
  const Vec v = get_vector(m, name);
  if (v.size() != 6) throw CheckpointError(fmt::format("entry '{}' has wrong length", name));
  nn::OptimizerConfig c;
  c.kind = v[0] == 0.0 ? nn::OptimizerKind::Adam : nn::OptimizerKind::MomentumSGD;
  c.learning_rate = v[1];
  c.beta1 = v[2];
  c.beta2 = v[3];
  c.epsilon = v[4];
  c.momentum = v[5];
  return c;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  ckpt.validate();
  Writer w;
  const std::int64_t dims[] = {ckpt.arch.n_muscles, ckpt.arch.n_u, ckpt.arch.n_p};
  w.i64_array("arch.dims", dims);
  std::array<std::int64_t, 10> units{};
  const auto u = ckpt.arch.units();
  std::copy(u.begin(), u.end(), units.begin());
  w.i64_array("arch.units", units);
  const std::int64_t seed[] = {static_cast<std::int64_t>(ckpt.seed)};
  w.i64_array("seed", seed);

  const auto& n = ckpt.net;
  for (std::size_t k = 0; k < n.encoder.size(); ++k) {
    put_matrix(w, fmt::format("net.encoder.{}.W", k), n.encoder[k].W);
    put_vector(w, fmt::format("net.encoder.{}.b", k), n.encoder[k].b);
  }
  for (std::size_t k = 0; k < n.lstm.size(); ++k) {
    put_matrix(w, fmt::format("net.lstm.{}.Wx", k), n.lstm[k].Wx);
    put_matrix(w, fmt::format("net.lstm.{}.Wh", k), n.lstm[k].Wh);
    put_vector(w, fmt::format("net.lstm.{}.b", k), n.lstm[k].b);
  }
  for (std::size_t k = 0; k < n.decoder.size(); ++k) {
    put_matrix(w, fmt::format("net.decoder.{}.W", k), n.decoder[k].W);
    put_vector(w, fmt::format("net.decoder.{}.b", k), n.decoder[k].b);
  }

  put_vector(w, "norm.s_mean", ckpt.norm.s_mean);
  put_vector(w, "norm.s_std", ckpt.norm.s_std);
  put_vector(w, "norm.u_mean", ckpt.norm.u_mean);
  put_vector(w, "norm.u_std", ckpt.norm.u_std);

  const std::int64_t npb[] = {static_cast<std::int64_t>(ckpt.pbs.size())};
  w.i64_array("pb.count", npb);
  for (std::size_t k = 0; k < ckpt.pbs.size(); ++k) {
    w.string(fmt::format("pb.{}.label", k), ckpt.pbs[k].label);
    put_vector(w, fmt::format("pb.{}.p", k), ckpt.pbs[k].p);
  }
  put_optimizer(w, "optimizer.train", ckpt.train_optimizer);
  put_optimizer(w, "optimizer.adapt", ckpt.adapt_optimizer);

  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  Writer head;
  head.u32(Checkpoint::kFormatVersion);
  head.u32(w.count());
  out.insert(out.end(), head.buffer().begin(), head.buffer().end());
  out.insert(out.end(), w.buffer().begin(), w.buffer().end());
  const auto digest = sha256(out);
  out.insert(out.end(), digest.begin(), digest.end());
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagic.size() + 8 + kDigestSize)
    throw CheckpointError("corrupt checkpoint: file too short");
  if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin()))
    throw CheckpointError("corrupt checkpoint: bad magic");

  Reader hr(bytes.subspan(kMagic.size(), 8));
  const auto version = hr.u32();
  if (version != Checkpoint::kFormatVersion)
    throw CheckpointError(fmt::format("checkpoint format version {} is not supported (expected {})",
                                      version, Checkpoint::kFormatVersion));

  const auto body = bytes.first(bytes.size() - kDigestSize);
  const auto digest = sha256(body);
  if (!std::equal(digest.begin(), digest.end(), bytes.end() - kDigestSize))
    throw CheckpointError("corrupt checkpoint: checksum mismatch");

  Reader r(body.subspan(kMagic.size()));
  r.u32();
  const auto count = r.u32();
  std::map<std::string, Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.kind = static_cast<Kind>(r.u8());
    const std::string name = r.str(r.u16());
    switch (e.kind) {
      case Kind::F64:
      case Kind::I64: {
        const auto rank = r.u32();
        std::uint64_t total = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
          e.dims.push_back(r.u64());
          total *= e.dims.back();
        }
        if (total > r.remaining() / 8) throw CheckpointError("corrupt checkpoint: truncated data");
        for (std::uint64_t k = 0; k < total; ++k) {
          if (e.kind == Kind::F64)
            e.f64.push_back(r.f64());
          else
            e.i64.push_back(static_cast<std::int64_t>(r.u64()));
        }
        break;
      }
      case Kind::String:
        e.text = r.str(r.u32());
        break;
      default:
        throw CheckpointError(fmt::format("corrupt checkpoint: unknown entry kind for '{}'", name));
    }
    entries.emplace(name, std::move(e));
  }
  if (r.remaining() != 0) throw CheckpointError("corrupt checkpoint: trailing bytes");

  Checkpoint c;
  const auto& dims = get(entries, "arch.dims", Kind::I64).i64;
  const auto& units = get(entries, "arch.units", Kind::I64).i64;
  if (dims.size() != 3 || units.size() != 10)
    throw CheckpointError("corrupt checkpoint: bad architecture entry");
  c.arch.n_muscles = static_cast<int>(dims[0]);
  c.arch.n_u = static_cast<int>(dims[1]);
  c.arch.n_p = static_cast<int>(dims[2]);
  for (int k = 0; k < 8; ++k) c.arch.hidden[k] = static_cast<int>(units[k + 1]);
  if (units[0] != c.arch.n_in() || units[9] != c.arch.n_s())
    throw CheckpointError("corrupt checkpoint: unit chain inconsistent with dims");
  const auto& seed = get(entries, "seed", Kind::I64).i64;
  if (seed.size() != 1) throw CheckpointError("corrupt checkpoint: bad seed entry");
  c.seed = static_cast<std::uint64_t>(seed[0]);

  auto& n = c.net;
  for (std::size_t k = 0; k < n.encoder.size(); ++k) {
    n.encoder[k].W = get_matrix(entries, fmt::format("net.encoder.{}.W", k));
    n.encoder[k].b = get_vector(entries, fmt::format("net.encoder.{}.b", k));
  }
  for (std::size_t k = 0; k < n.lstm.size(); ++k) {
    n.lstm[k].Wx = get_matrix(entries, fmt::format("net.lstm.{}.Wx", k));
    n.lstm[k].Wh = get_matrix(entries, fmt::format("net.lstm.{}.Wh", k));
    n.lstm[k].b = get_vector(entries, fmt::format("net.lstm.{}.b", k));
  }
  for (std::size_t k = 0; k < n.decoder.size(); ++k) {
    n.decoder[k].W = get_matrix(entries, fmt::format("net.decoder.{}.W", k));
    n.decoder[k].b = get_vector(entries, fmt::format("net.decoder.{}.b", k));
  }
  c.norm.s_mean = get_vector(entries, "norm.s_mean");
  c.norm.s_std = get_vector(entries, "norm.s_std");
  c.norm.u_mean = get_vector(entries, "norm.u_mean");
  c.norm.u_std = get_vector(entries, "norm.u_std");

  const auto& npb = get(entries, "pb.count", Kind::I64).i64;
  if (npb.size() != 1 || npb[0] < 0) throw CheckpointError("corrupt checkpoint: bad pb count");
  for (std::int64_t k = 0; k < npb[0]; ++k) {
    PbEntry e;
    e.label = get(entries, fmt::format("pb.{}.label", k), Kind::String).text;
    e.p = get_vector(entries, fmt::format("pb.{}.p", k));
    c.pbs.push_back(std::move(e));
  }
  c.train_optimizer = get_optimizer(entries, "optimizer.train");
  c.adapt_optimizer = get_optimizer(entries, "optimizer.adapt");

  try {
    c.validate();
  } catch (const CheckpointError& e) {
    throw CheckpointError(fmt::format("corrupt checkpoint: {}", e.what()));
  }
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(fmt::format("cannot open '{}' for writing", path));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(fmt::format("write to '{}' failed", path));
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(fmt::format("cannot open checkpoint '{}'", path));
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace pbal
