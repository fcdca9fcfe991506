#pragma once

#include <cstdint>
#include <string>

namespace clens {

// Incremental SHA-256, used for checkpoint content digests in result envelopes.
class Sha256 {
 public:
  Sha256();
  void update(const void* data, size_t len);
  std::string hex_digest();  // finalizes; call once

  static std::string of_file(const std::string& path);
  static std::string of_bytes(const void* data, size_t len);

 private:
  void process_block(const uint8_t* block);
  uint32_t state_[8];
  uint64_t total_len_ = 0;
  uint8_t buffer_[64];
  size_t buffer_len_ = 0;
};

}  // namespace clens
