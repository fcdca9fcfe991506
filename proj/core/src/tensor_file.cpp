#include "clens/tensor_file.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace clens {

using nlohmann::json;

size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::f32: return 4;
    case Dtype::f64: return 8;
    case Dtype::bf16: return 2;
  }
  throw std::logic_error("bad dtype");
}

const char* dtype_name(Dtype d) {
  switch (d) {
    case Dtype::f32: return "F32";
    case Dtype::f64: return "F64";
    case Dtype::bf16: return "BF16";
  }
  throw std::logic_error("bad dtype");
}

Dtype parse_dtype(const std::string& name) {
  if (name == "F32") return Dtype::f32;
  if (name == "F64") return Dtype::f64;
  if (name == "BF16") return Dtype::bf16;
  throw std::runtime_error("unsupported tensor dtype: " + name);
}

float bf16_to_f32(uint16_t bits) {
  uint32_t w = uint32_t(bits) << 16;
  float out;
  std::memcpy(&out, &w, 4);
  return out;
}

uint16_t f32_to_bf16(float value) {
  uint32_t w;
  std::memcpy(&w, &value, 4);
  // round to nearest even
  uint32_t rounding = 0x7fff + ((w >> 16) & 1);
  return uint16_t((w + rounding) >> 16);
}

int64_t HostTensor::numel() const {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::vector<float> HostTensor::to_f32() const {
  int64_t n = numel();
  std::vector<float> out(static_cast<size_t>(n), 0.0f);
  switch (dtype) {
    case Dtype::f32:
      std::memcpy(out.data(), data.data(), size_t(n) * 4);
      break;
    case Dtype::f64: {
      const double* p = reinterpret_cast<const double*>(data.data());
      for (int64_t i = 0; i < n; ++i) out[size_t(i)] = float(p[i]);
      break;
    }
    case Dtype::bf16: {
      const uint16_t* p = reinterpret_cast<const uint16_t*>(data.data());
      for (int64_t i = 0; i < n; ++i) out[size_t(i)] = bf16_to_f32(p[i]);
      break;
    }
  }
  return out;
}

std::vector<double> HostTensor::to_f64() const {
  int64_t n = numel();
  std::vector<double> out(static_cast<size_t>(n), 0.0);
  switch (dtype) {
    case Dtype::f64:
      std::memcpy(out.data(), data.data(), size_t(n) * 8);
      break;
    case Dtype::f32: {
      const float* p = reinterpret_cast<const float*>(data.data());
      for (int64_t i = 0; i < n; ++i) out[size_t(i)] = double(p[i]);
      break;
    }
    case Dtype::bf16: {
      const uint16_t* p = reinterpret_cast<const uint16_t*>(data.data());
      for (int64_t i = 0; i < n; ++i) out[size_t(i)] = double(bf16_to_f32(p[i]));
      break;
    }
  }
  return out;
}

HostTensor HostTensor::from_f32(std::vector<int64_t> shape, std::span<const float> values) {
  HostTensor t;
  t.dtype = Dtype::f32;
  t.shape = std::move(shape);
  if (int64_t(values.size()) != t.numel())
    throw std::invalid_argument("from_f32: value count does not match shape");
  t.data.resize(values.size() * 4);
  std::memcpy(t.data.data(), values.data(), t.data.size());
  return t;
}

HostTensor HostTensor::from_f64(std::vector<int64_t> shape, std::span<const double> values) {
  HostTensor t;
  t.dtype = Dtype::f64;
  t.shape = std::move(shape);
  if (int64_t(values.size()) != t.numel())
    throw std::invalid_argument("from_f64: value count does not match shape");
  t.data.resize(values.size() * 8);
  std::memcpy(t.data.data(), values.data(), t.data.size());
  return t;
}

HostTensor HostTensor::from_bf16_of(std::vector<int64_t> shape, std::span<const float> values) {
  HostTensor t;
  t.dtype = Dtype::bf16;
  t.shape = std::move(shape);
  if (int64_t(values.size()) != t.numel())
    throw std::invalid_argument("from_bf16_of: value count does not match shape");
  t.data.resize(values.size() * 2);
  uint16_t* p = reinterpret_cast<uint16_t*>(t.data.data());
  for (size_t i = 0; i < values.size(); ++i) p[i] = f32_to_bf16(values[i]);
  return t;
}

void MemoryMeter::add(int64_t bytes) {
  int64_t cur = current_.fetch_add(bytes) + bytes;
  int64_t prev = peak_.load();
  while (cur > prev && !peak_.compare_exchange_weak(prev, cur)) {
  }
}

void MemoryMeter::sub(int64_t bytes) { current_.fetch_sub(bytes); }

void MemoryMeter::reset() {
  current_.store(0);
  peak_.store(0);
}

TensorFileReader::TensorFileReader(const std::string& path) : path_(path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("tensor archive: cannot open " + path);
  file_size_ = uint64_t(in.tellg());
  in.seekg(0);
  if (file_size_ < 8) throw std::runtime_error("tensor archive: truncated header length in " + path);

  uint8_t len_bytes[8];
  in.read(reinterpret_cast<char*>(len_bytes), 8);
  uint64_t header_len = 0;
  for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | len_bytes[i];
  if (8 + header_len > file_size_)
    throw std::runtime_error("tensor archive: header overruns file in " + path);

  std::string header(header_len, '\0');
  in.read(header.data(), std::streamsize(header_len));
  data_offset_ = 8 + header_len;

  json h;
  try {
    h = json::parse(header);
  } catch (const std::exception& e) {
    throw std::runtime_error("tensor archive: bad JSON header in " + path + ": " + e.what());
  }
  uint64_t data_size = file_size_ - data_offset_;
  for (auto& [name, value] : h.items()) {
    if (name == "__metadata__") {
      for (auto& [k, v] : value.items()) metadata_[k] = v.get<std::string>();
      continue;
    }
    TensorEntry e;
    e.dtype = parse_dtype(value.at("dtype").get<std::string>());
    e.shape = value.at("shape").get<std::vector<int64_t>>();
    auto off = value.at("data_offsets").get<std::vector<uint64_t>>();
    if (off.size() != 2 || off[1] < off[0])
      throw std::runtime_error("tensor archive: bad data_offsets for " + name);
    e.begin = off[0];
    e.end = off[1];
    if (e.end > data_size)
      throw std::runtime_error("tensor archive: tensor " + name + " overruns data section");
    int64_t n = 1;
    for (int64_t d : e.shape) {
      if (d < 0) throw std::runtime_error("tensor archive: negative dim for " + name);
      n *= d;
    }
    if (uint64_t(n) * dtype_size(e.dtype) != e.end - e.begin)
      throw std::runtime_error("tensor archive: size/shape mismatch for " + name);
    entries_[name] = std::move(e);
  }
}

bool TensorFileReader::contains(const std::string& name) const {
  return entries_.count(name) != 0;
}

const TensorEntry& TensorFileReader::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end())
    throw std::runtime_error("tensor archive: missing tensor " + name + " in " + path_);
  return it->second;
}

HostTensor TensorFileReader::read(const std::string& name) const {
  const TensorEntry& e = entry(name);
  HostTensor t;
  t.dtype = e.dtype;
  t.shape = e.shape;
  t.data.resize(size_t(e.end - e.begin));
  std::ifstream in(path_, std::ios::binary);
  if (!in) throw std::runtime_error("tensor archive: cannot reopen " + path_);
  in.seekg(std::streamoff(data_offset_ + e.begin));
  in.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(t.data.size()));
  if (!in) throw std::runtime_error("tensor archive: short read for " + name);
  return t;
}

std::string TensorFileReader::metadata_value(const std::string& key) const {
  auto it = metadata_.find(key);
  if (it == metadata_.end())
    throw std::runtime_error("tensor archive: missing metadata key " + key + " in " + path_);
  return it->second;
}

std::optional<std::string> TensorFileReader::metadata_value_opt(const std::string& key) const {
  auto it = metadata_.find(key);
  if (it == metadata_.end()) return std::nullopt;
  return it->second;
}

void TensorFileWriter::add(const std::string& name, HostTensor tensor) {
  if (name == "__metadata__") throw std::invalid_argument("__metadata__ is reserved");
  tensors_[name] = std::move(tensor);
}

void TensorFileWriter::set_metadata(const std::string& key, const std::string& value) {
  metadata_[key] = value;
}

void TensorFileWriter::write(const std::string& path) const {
  json header = json::object();
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors_) {
    uint64_t end = offset + t.data.size();
    header[name] = {{"dtype", dtype_name(t.dtype)},
                    {"shape", t.shape},
                    {"data_offsets", {offset, end}}};
    offset = end;
  }
  if (!metadata_.empty()) header["__metadata__"] = metadata_;

  std::string header_str = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("tensor archive: cannot write " + path);
  uint64_t header_len = header_str.size();
  uint8_t len_bytes[8];
  for (int i = 0; i < 8; ++i) len_bytes[i] = uint8_t(header_len >> (8 * i));
  out.write(reinterpret_cast<const char*>(len_bytes), 8);
  out.write(header_str.data(), std::streamsize(header_str.size()));
  for (const auto& [name, t] : tensors_) {
    (void)name;
    out.write(reinterpret_cast<const char*>(t.data.data()), std::streamsize(t.data.size()));
  }
  if (!out) throw std::runtime_error("tensor archive: write failed for " + path);
}

}  // namespace clens
