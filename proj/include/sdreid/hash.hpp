#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

namespace sdreid {

/// Incremental SHA-256 with a lowercase hex digest.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::span<const uint8_t> bytes);
  void update(const void* data, size_t n);
  std::string hex_digest();

 private:
  void* ctx_;
};

std::string sha256_hex(std::span<const uint8_t> bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace sdreid
