#include "sdreid/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <zlib.h>

#include "sdreid/errors.hpp"

namespace sdreid::io {

namespace {

constexpr char kMagic[8] = {'S', 'D', 'R', 'D', 'C', 'K', 'P', 'T'};
static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

uint32_t crc32_of(const uint8_t* p, size_t n) {
  return static_cast<uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), p, static_cast<uInt>(n)));
}

}  // namespace

void BinaryWriter::u32(uint32_t v) { bytes(&v, 4); }
void BinaryWriter::u64(uint64_t v) { bytes(&v, 8); }
void BinaryWriter::f64(double v) { bytes(&v, 8); }
void BinaryWriter::bytes(const void* p, size_t n) {
  const auto* b = static_cast<const uint8_t*>(p);
  buf_.insert(buf_.end(), b, b + n);
}
void BinaryWriter::str(const std::string& s) {
  u32(static_cast<uint32_t>(s.size()));
  bytes(s.data(), s.size());
}

void BinaryWriter::finish(const std::filesystem::path& path) {
  const uint32_t crc = crc32_of(buf_.data(), buf_.size());
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open '" + tmp + "' for writing");
    f.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    f.write(reinterpret_cast<const char*>(&crc), 4);
    if (!f) throw DataError("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

BinaryReader::BinaryReader(const std::filesystem::path& path, const std::string& what) : what_(what) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + what + " '" + path.string() + "'");
  buf_.assign(std::istreambuf_iterator<char>(f), {});
  if (buf_.size() < 4) throw FormatError(what + " '" + path.string() + "' is truncated");
  end_ = buf_.size() - 4;
  uint32_t stored;
  std::memcpy(&stored, buf_.data() + end_, 4);
  if (stored != crc32_of(buf_.data(), end_)) throw FormatError(what + " '" + path.string() + "' failed its CRC check");
}

void BinaryReader::need(size_t n) {
  if (end_ - pos_ < n) throw FormatError(what_ + " is truncated");
}
uint8_t BinaryReader::u8() {
  need(1);
  return buf_[pos_++];
}
uint32_t BinaryReader::u32() {
  uint32_t v;
  bytes(&v, 4);
  return v;
}
uint64_t BinaryReader::u64() {
  uint64_t v;
  bytes(&v, 8);
  return v;
}
double BinaryReader::f64() {
  double v;
  bytes(&v, 8);
  return v;
}
void BinaryReader::bytes(void* p, size_t n) {
  need(n);
  std::memcpy(p, buf_.data() + pos_, n);
  pos_ += n;
}
std::string BinaryReader::str() {
  const uint32_t n = u32();
  need(n);
  std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
  pos_ += n;
  return s;
}

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

const Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw FormatError("checkpoint has no tensor '" + name + "'");
}

void Checkpoint::put(const std::string& name, Tensor t) {
  for (auto& [n, v] : tensors)
    if (n == name) {
      v = std::move(t);
      return;
    }
  tensors.emplace_back(name, std::move(t));
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  BinaryWriter w;
  w.bytes(kMagic, 8);
  w.u32(Checkpoint::kVersion);
  w.str(ckpt.meta.dump());
  w.u64(ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) {
    w.str(name);
    w.u32(static_cast<uint32_t>(t.ndim()));
    for (size_t i = 0; i < t.ndim(); ++i) w.u64(static_cast<uint64_t>(t.dim(i)));
    w.bytes(t.data(), t.size() * sizeof(double));
  }
  w.finish(path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  BinaryReader r(path, "checkpoint");
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw FormatError("'" + path.string() + "' is not a checkpoint");
  const uint32_t version = r.u32();
  if (version != Checkpoint::kVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(Checkpoint::kVersion) + ")");
  }
  Checkpoint ckpt;
  try {
    ckpt.meta = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  const uint64_t count = r.u64();
  for (uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const uint32_t nd = r.u32();
    if (nd > 8) throw FormatError("checkpoint tensor '" + name + "' has implausible rank");
    Shape shape(nd);
    for (auto& d : shape) d = static_cast<int64_t>(r.u64());
    Tensor t(shape);
    r.bytes(t.data(), t.size() * sizeof(double));
    ckpt.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!r.at_end()) throw FormatError("checkpoint has trailing bytes");
  return ckpt;
}

void store_params(Checkpoint& ckpt, const std::string& prefix, const nn::ParamStore& params) {
  for (const auto& n : params.names()) ckpt.put(prefix + n, params.get(n).value());
  for (const auto& n : params.buffer_names()) ckpt.put(prefix + "buffer/" + n, params.buffer(n));
}

void restore_params(const Checkpoint& ckpt, const std::string& prefix, nn::ParamStore& params) {
  auto check = [](const std::string& name, const Tensor& have, const Tensor& want) {
    if (have.shape() != want.shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(have.shape()) + ", expected " +
                        shape_str(want.shape()));
    }
  };
  for (const auto& n : params.names()) {
    const Tensor& t = ckpt.get(prefix + n);
    check(prefix + n, t, params.get(n).value());
    params.get(n).mutable_value() = t;
  }
  for (const auto& n : params.buffer_names()) {
    const Tensor& t = ckpt.get(prefix + "buffer/" + n);
    check(prefix + "buffer/" + n, t, params.buffer(n));
    params.buffer(n) = t;
  }
}

}  // namespace sdreid::io
