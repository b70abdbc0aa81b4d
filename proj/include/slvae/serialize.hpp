#pragma once

// Binary persistence. Every block is: 8-byte magic, u32 version, body,
// u64 FNV-1a checksum of magic+version+body. Integers and doubles are
// little-endian regardless of host.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <string_view>

#include "slvae/mlp.hpp"

namespace slvae {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view s) { buf_.append(s); }

  /// Appends the checksum of everything from `from` onward.
  void checksum_since(std::size_t from) { u64(fnv1a(std::string_view(buf_).substr(from))); }

  std::size_t size() const { return buf_.size(); }
  const std::string& str() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string data) : buf_(std::move(data)) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint32_t u32() {
    auto s = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    auto s = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string_view bytes(std::size_t n) { return take(n); }

  std::size_t position() const { return pos_; }
  bool at_end() const { return pos_ == buf_.size(); }

  void verify_checksum_since(std::size_t from, std::string_view what) {
    const std::uint64_t expect = fnv1a(std::string_view(buf_).substr(from, pos_ - from));
    if (u64() != expect) throw FormatError(std::string(what) + ": checksum mismatch");
  }

 private:
  std::string_view take(std::size_t n) {
    if (pos_ + n > buf_.size()) throw FormatError("unexpected end of data");
    std::string_view s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::string buf_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for '" + path.string() + "'");
}

inline constexpr std::string_view kMlpMagic = "SLVAEMLP";
inline constexpr std::uint32_t kFormatVersion = 1;

inline void begin_block(ByteWriter& w, std::string_view magic) {
  w.bytes(magic);
  w.u32(kFormatVersion);
}

inline void expect_block(ByteReader& r, std::string_view magic) {
  if (r.bytes(magic.size()) != magic) throw FormatError("bad magic, expected " + std::string(magic));
  const auto version = r.u32();
  if (version != kFormatVersion) throw FormatError(std::string(magic) + ": unsupported version " + std::to_string(version));
}

/// Magic, layer count, per-layer (in, out, activation), then the raw payload
/// (weights row-major, then bias, per layer), then checksum.
inline void write_mlp(ByteWriter& w, const MlpParams& p) {
  const std::size_t start = w.size();
  begin_block(w, kMlpMagic);
  w.u32(static_cast<std::uint32_t>(p.layers.size()));
  for (const auto& l : p.layers) {
    w.u32(static_cast<std::uint32_t>(l.in_dim()));
    w.u32(static_cast<std::uint32_t>(l.out_dim()));
    w.u8(static_cast<std::uint8_t>(l.activation));
  }
  for (const auto& l : p.layers) {
    for (double v : l.weight.data()) w.f64(v);
    for (double v : l.bias.data()) w.f64(v);
  }
  w.checksum_since(start);
}

inline MlpParams read_mlp(ByteReader& r) {
  const std::size_t start = r.position();
  expect_block(r, kMlpMagic);
  const auto layers = r.u32();
  if (layers == 0 || layers > 64) throw FormatError("implausible layer count " + std::to_string(layers));
  MlpParams p;
  std::size_t prev_out = 0;
  for (std::uint32_t l = 0; l < layers; ++l) {
    const auto in = r.u32();
    const auto out = r.u32();
    const auto act = r.u8();
    if (act > 2) throw FormatError("unknown activation tag " + std::to_string(act));
    if (l > 0 && in != prev_out) throw FormatError("layer dimensions do not chain");
    prev_out = out;
    p.layers.push_back(DenseLayer{Matrix(out, in), Matrix(1, out), static_cast<Activation>(act)});
  }
  for (auto& l : p.layers) {
    for (double& v : l.weight.data()) v = r.f64();
    for (double& v : l.bias.data()) v = r.f64();
  }
  r.verify_checksum_since(start, "mlp block");
  return p;
}

inline void save_mlp(const MlpParams& p, const std::filesystem::path& path) {
  ByteWriter w;
  write_mlp(w, p);
  write_file(path, w.str());
}

inline MlpParams load_mlp(const std::filesystem::path& path) {
  ByteReader r(read_file(path));
  return read_mlp(r);
}

}  // namespace slvae
