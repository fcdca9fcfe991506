#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace clens {

// Binary named-tensor archive:
//   [8-byte little-endian header length][UTF-8 JSON header][raw data buffer]
// The header maps tensor names to {"dtype", "shape", "data_offsets":[begin,end)},
// offsets relative to the start of the data buffer. The reserved key
// "__metadata__" holds a flat string-to-string map.

enum class Dtype { f32, f64, bf16 };

size_t dtype_size(Dtype d);
const char* dtype_name(Dtype d);
Dtype parse_dtype(const std::string& name);

struct HostTensor {
  Dtype dtype = Dtype::f32;
  std::vector<int64_t> shape;
  std::vector<uint8_t> data;  // raw little-endian

  int64_t numel() const;
  size_t byte_size() const { return data.size(); }

  std::vector<float> to_f32() const;
  std::vector<double> to_f64() const;

  static HostTensor from_f32(std::vector<int64_t> shape, std::span<const float> values);
  static HostTensor from_f64(std::vector<int64_t> shape, std::span<const double> values);
  static HostTensor from_bf16_of(std::vector<int64_t> shape, std::span<const float> values);
};

float bf16_to_f32(uint16_t bits);
uint16_t f32_to_bf16(float value);

// High-water-mark accounting for resident tensor bytes. Shard streaming
// registers buffers here so tests can probe peak usage.
class MemoryMeter {
 public:
  void add(int64_t bytes);
  void sub(int64_t bytes);
  int64_t current() const { return current_.load(); }
  int64_t peak() const { return peak_.load(); }
  void reset();

 private:
  std::atomic<int64_t> current_{0};
  std::atomic<int64_t> peak_{0};
};

struct TensorEntry {
  Dtype dtype;
  std::vector<int64_t> shape;
  uint64_t begin = 0;  // relative to data section
  uint64_t end = 0;
};

class TensorFileReader {
 public:
  explicit TensorFileReader(const std::string& path);

  const std::map<std::string, TensorEntry>& entries() const { return entries_; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }
  bool contains(const std::string& name) const;
  const TensorEntry& entry(const std::string& name) const;

  HostTensor read(const std::string& name) const;
  std::string metadata_value(const std::string& key) const;  // throws if missing
  std::optional<std::string> metadata_value_opt(const std::string& key) const;

  const std::string& path() const { return path_; }

 private:
  std::string path_;
  uint64_t data_offset_ = 0;
  uint64_t file_size_ = 0;
  std::map<std::string, TensorEntry> entries_;
  std::map<std::string, std::string> metadata_;
};

class TensorFileWriter {
 public:
  void add(const std::string& name, HostTensor tensor);
  void set_metadata(const std::string& key, const std::string& value);
  // Writes header + data with offsets assigned in name order, so identical
  // content produces identical bytes.
  void write(const std::string& path) const;

 private:
  std::map<std::string, HostTensor> tensors_;
  std::map<std::string, std::string> metadata_;
};

}  // namespace clens
