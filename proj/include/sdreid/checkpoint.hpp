#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sdreid/nn.hpp"
#include "sdreid/tensor.hpp"

namespace sdreid::io {

/// Versioned container: JSON metadata plus named float64 tensors, CRC32
/// protected. Layout is described in docs/checkpoint_format.md.
struct Checkpoint {
  static constexpr uint32_t kVersion = 1;

  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  bool contains(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  void put(const std::string& name, Tensor t);
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameters go in as `prefix + name`, buffers as `prefix + "buffer/" + name`.
void store_params(Checkpoint& ckpt, const std::string& prefix, const nn::ParamStore& params);
/// Overwrites every parameter and buffer of `params`; throws FormatError on a
/// missing name or a shape mismatch.
void restore_params(const Checkpoint& ckpt, const std::string& prefix, nn::ParamStore& params);

// Little-endian primitive framing shared by the binary formats.
class BinaryWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u32(uint32_t v);
  void u64(uint64_t v);
  void f64(double v);
  void bytes(const void* p, size_t n);
  void str(const std::string& s);
  const std::vector<uint8_t>& buffer() const { return buf_; }
  /// Appends the CRC32 of everything written so far and writes the file.
  void finish(const std::filesystem::path& path);

 private:
  std::vector<uint8_t> buf_;
};

class BinaryReader {
 public:
  /// Reads the whole file and verifies the trailing CRC32.
  BinaryReader(const std::filesystem::path& path, const std::string& what);
  uint8_t u8();
  uint32_t u32();
  uint64_t u64();
  double f64();
  void bytes(void* p, size_t n);
  std::string str();
  bool at_end() const { return pos_ == end_; }

 private:
  void need(size_t n);
  std::vector<uint8_t> buf_;
  size_t pos_ = 0;
  size_t end_ = 0;
  std::string what_;
};

}  // namespace sdreid::io
