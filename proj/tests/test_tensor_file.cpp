#include <doctest.h>

#include <fstream>

#include "clens/sha256.hpp"
#include "clens/tensor_file.hpp"
#include "helpers.hpp"

using namespace clens;

TEST_CASE("archive round-trips tensors and metadata") {
  test::TempDir tmp("archive");
  test::Rng rng(7);

  std::vector<float> a(24), b(6);
  for (auto& v : a) v = float(rng.gauss());
  for (auto& v : b) v = float(rng.gauss());
  std::vector<double> c(10);
  for (auto& v : c) v = rng.gauss();

  TensorFileWriter w;
  w.add("block.0.weight", HostTensor::from_f32({4, 6}, a));
  w.add("bias", HostTensor::from_f32({6}, b));
  w.add("reference", HostTensor::from_f64({2, 5}, c));
  w.set_metadata("kind", "test");
  std::string path = tmp.file("t.nt");
  w.write(path);

  TensorFileReader r(path);
  CHECK(r.entries().size() == 3);
  CHECK(r.metadata_value("kind") == "test");
  CHECK(r.contains("bias"));
  CHECK_FALSE(r.contains("nope"));

  HostTensor a2 = r.read("block.0.weight");
  CHECK(a2.shape == std::vector<int64_t>{4, 6});
  CHECK(a2.to_f32() == a);
  CHECK(r.read("reference").to_f64() == c);
}

TEST_CASE("archive writes are byte-deterministic") {
  test::TempDir tmp("archive_det");
  std::vector<float> a(12, 1.5f);
  auto write_one = [&](const std::string& p) {
    TensorFileWriter w;
    w.add("z", HostTensor::from_f32({12}, a));
    w.add("a", HostTensor::from_f32({3, 4}, a));
    w.set_metadata("m", "1");
    w.write(p);
  };
  write_one(tmp.file("one.nt"));
  write_one(tmp.file("two.nt"));
  CHECK(Sha256::of_file(tmp.file("one.nt")) == Sha256::of_file(tmp.file("two.nt")));
}

TEST_CASE("bf16 conversion round-trip is close") {
  for (float v : {0.0f, 1.0f, -2.5f, 3.14159f, 1e-3f, 123.456f}) {
    float back = bf16_to_f32(f32_to_bf16(v));
    CHECK(back == doctest::Approx(v).epsilon(0.01));
  }
}

TEST_CASE("corrupt archives are rejected with context") {
  test::TempDir tmp("archive_bad");

  SUBCASE("truncated file") {
    std::ofstream(tmp.file("bad.nt"), std::ios::binary) << "abc";
    CHECK_THROWS_WITH_AS(TensorFileReader(tmp.file("bad.nt")),
                         doctest::Contains("truncated"), std::runtime_error);
  }
  SUBCASE("offsets overrun data") {
    std::string header = R"({"t":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}})";
    std::ofstream out(tmp.file("bad2.nt"), std::ios::binary);
    uint64_t len = header.size();
    for (int i = 0; i < 8; ++i) out.put(char(len >> (8 * i)));
    out << header << "xx";  // only 2 data bytes
    out.close();
    CHECK_THROWS_WITH_AS(TensorFileReader(tmp.file("bad2.nt")),
                         doctest::Contains("overruns"), std::runtime_error);
  }
  SUBCASE("shape/size mismatch") {
    std::string header = R"({"t":{"dtype":"F32","shape":[5],"data_offsets":[0,16]}})";
    std::ofstream out(tmp.file("bad3.nt"), std::ios::binary);
    uint64_t len = header.size();
    for (int i = 0; i < 8; ++i) out.put(char(len >> (8 * i)));
    out << header << std::string(16, '\0');
    out.close();
    CHECK_THROWS_WITH_AS(TensorFileReader(tmp.file("bad3.nt")),
                         doctest::Contains("mismatch"), std::runtime_error);
  }
}

TEST_CASE("sha256 known vectors") {
  CHECK(Sha256::of_bytes("", 0) ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(Sha256::of_bytes("abc", 3) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("memory meter tracks a high-water mark") {
  MemoryMeter m;
  m.add(100);
  m.add(50);
  m.sub(120);
  m.add(10);
  CHECK(m.peak() == 150);
  CHECK(m.current() == 40);
}
