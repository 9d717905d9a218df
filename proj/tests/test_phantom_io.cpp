#include "doctest.h"

#include <filesystem>
#include <string>

#include "lesionforge/io.hpp"
#include "lesionforge/phantom.hpp"

using namespace lesionforge;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("lesionforge_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("grade follows microaneurysm thresholds") {
  const std::vector<int> t{1, 3, 6, 10};
  CHECK(grade_from_microaneurysms(0, t) == 0);
  CHECK(grade_from_microaneurysms(1, t) == 1);
  CHECK(grade_from_microaneurysms(2, t) == 1);
  CHECK(grade_from_microaneurysms(3, t) == 2);
  CHECK(grade_from_microaneurysms(7, t) == 3);
  CHECK(grade_from_microaneurysms(10, t) == 4);
  CHECK(grade_from_microaneurysms(12, t) == 4);
}

TEST_CASE("phantom grade matches its lesion truth") {
  PhantomConfig cfg;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const PhantomSample s = generate_phantom(cfg, seed);
    CHECK(s.grade == grade_from_microaneurysms(s.microaneurysm_count(), cfg.ma_thresholds));
    for (const Lesion& l : s.lesions) {
      CHECK(s.fov.contains(l.row, l.col));
      CHECK_FALSE(s.fov.in_disc(l.row, l.col));
    }
  }
  cfg.grade = 0;
  const PhantomSample healthy = generate_phantom(cfg, 3);
  CHECK(healthy.grade == 0);
  CHECK(healthy.microaneurysm_count() == 0);
}

TEST_CASE("forced grades produce that grade") {
  PhantomConfig cfg;
  for (int g = 0; g <= 4; ++g) {
    cfg.grade = g;
    CHECK(generate_phantom(cfg, 40 + g).grade == g);
  }
}

TEST_CASE("phantom generation is deterministic") {
  PhantomConfig cfg;
  const PhantomSample a = generate_phantom(cfg, 17);
  const PhantomSample b = generate_phantom(cfg, 17);
  CHECK(a.fundus == b.fundus);
  CHECK(a.vessel_mask == b.vessel_mask);
  CHECK(a.grade == b.grade);
  CHECK_FALSE(generate_phantom(cfg, 18).fundus == a.fundus);
}

TEST_CASE("phantom value ranges") {
  const PhantomSample s = generate_phantom(PhantomConfig{}, 2);
  CHECK(s.fundus.shape() == Shape{64, 64, 3});
  CHECK(s.vessel_mask.shape() == Shape{64, 64, 1});
  for (double v : s.fundus.values()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  double set = 0.0;
  for (double v : s.vessel_mask.values()) {
    CHECK((v == 0.0 || v == 1.0));
    set += v;
  }
  CHECK(set > 0.0);
}

TEST_CASE("phantom config validation") {
  PhantomConfig cfg;
  cfg.grade = 5;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = PhantomConfig{};
  cfg.ma_thresholds = {1, 3, 3, 10};
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = PhantomConfig{};
  cfg.image_size = 60;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("rotate_flip quarter turns compose to identity") {
  FeatureMap m(3, 3, 1);
  for (int i = 0; i < 9; ++i) m.values()[i] = i;
  const FeatureMap r = rotate_flip(m, 1, false, false);
  CHECK_FALSE(r == m);
  CHECK(rotate_flip(r, 3, false, false) == m);
  CHECK(rotate_flip(rotate_flip(m, 0, true, false), 0, true, false) == m);
}

TEST_CASE("preprocessing maps 8-bit values to [-1, 1]") {
  const fs::path dir = scratch_dir("preprocess");
  FeatureMap img(4, 4, 3);
  for (int c = 0; c < 3; ++c) {
    img.at(0, 0, c) = 0.0;
    img.at(0, 1, c) = 255.0;
    img.at(0, 2, c) = 128.0;
  }
  write_png(dir / "x.png", img);
  const FeatureMap x = load_and_preprocess(dir / "x.png", 4);
  CHECK(x.shape() == Shape{4, 4, 3});
  CHECK(x.at(0, 0, 0) == doctest::Approx(-1.0));
  CHECK(x.at(0, 1, 1) == doctest::Approx(1.0));
  CHECK(x.at(0, 2, 2) == doctest::Approx(0.00392).epsilon(1e-3));
}

TEST_CASE("mask loading thresholds at half scale") {
  const fs::path dir = scratch_dir("mask");
  FeatureMap m(4, 4, 1);
  m.at(1, 2, 0) = 255.0;
  m.at(3, 3, 0) = 128.0;
  m.at(0, 0, 0) = 127.0;
  write_png(dir / "m.png", m);
  const FeatureMap y = load_mask(dir / "m.png", 4);
  CHECK(y.at(1, 2, 0) == 1.0);
  CHECK(y.at(3, 3, 0) == 1.0);
  CHECK(y.sum() == 2.0);
}

TEST_CASE("checksums match reference vectors") {
  CHECK(crc32(bytes_of("123456789")) == 0xCBF43926u);
  CHECK(sha256_hex(bytes_of("abc")) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("byte writer is little-endian and reader detects truncation") {
  ByteWriter w;
  w.u16(0x0102);
  w.u32(0x03040506);
  w.f32(1.0f);
  const std::vector<std::uint8_t> expect{0x02, 0x01, 0x06, 0x05, 0x04, 0x03, 0x00, 0x00, 0x80, 0x3f};
  CHECK(w.bytes() == expect);
  ByteReader r(w.bytes());
  CHECK(r.u16() == 0x0102);
  CHECK(r.u32() == 0x03040506u);
  CHECK(r.f32() == 1.0f);
  CHECK_THROWS_AS(r.u8(), Error);
}

TEST_CASE("tensor archive round trip and corruption") {
  const fs::path dir = scratch_dir("archive");
  TensorArchive a;
  a.magic = "TEST";
  a.version = 3;
  a.metadata = R"({"k":1})";
  a.arrays.push_back({"w", {2, 3}, Buffer{0.5, -1.0, 2.0, 0.25, 0.0, 8.0}});
  save_archive(dir / "a.bin", a);
  const TensorArchive b = load_archive(dir / "a.bin", "TEST", 3);
  CHECK(b.metadata == a.metadata);
  CHECK(b.find("w").dims == a.arrays[0].dims);
  CHECK(b.find("w").values == a.arrays[0].values);
  CHECK_THROWS_AS(b.find("missing"), Error);
  CHECK_THROWS_AS(load_archive(dir / "a.bin", "NOPE", 3), Error);
  CHECK_THROWS_AS(load_archive(dir / "a.bin", "TEST", 4), Error);

  std::vector<std::uint8_t> raw = read_bytes(dir / "a.bin");
  raw[raw.size() / 2] ^= 0x10;
  write_bytes(dir / "bad.bin", raw);
  try {
    load_archive(dir / "bad.bin", "TEST", 3);
    FAIL("corruption not detected");
  } catch (const Error& e) {
    CHECK(e.code() == "checksum");
  }
}

TEST_CASE("dataset write and read agree") {
  const fs::path dir = scratch_dir("dataset");
  PhantomConfig cfg;
  write_dataset(dir, cfg, {11, 12, 13});
  const std::vector<DatasetEntry> entries = read_dataset(dir);
  REQUIRE(entries.size() == 3);
  const PhantomSample s = generate_phantom(cfg, 12);
  CHECK(entries[1].grade == s.grade);
  CHECK(entries[1].lesions.size() == s.lesions.size());
  CHECK(entries[1].vessel_mask == s.vessel_mask);
  // 8-bit storage quantizes the fundus
  for (std::size_t i = 0; i < s.fundus.size(); ++i)
    CHECK(std::abs(entries[1].fundus.values()[i] - s.fundus.values()[i]) <= 1.0 / 127.5 + 1e-9);
}
