#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lesionforge/tensor.hpp"

namespace lesionforge {

// Little-endian byte sink used by every binary format in the project.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void f32(float v);
  void raw(std::span<const std::uint8_t> data);
  void raw(const std::string& s);
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  float f32();
  std::string str(std::size_t n);
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const;
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32(std::span<const std::uint8_t> data);
std::string sha256_hex(std::span<const std::uint8_t> data);
std::string sha256_file(const std::filesystem::path& path);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> data);
void write_text(const std::filesystem::path& path, const std::string& text);

// Appends the CRC32 of everything written so far.
void seal_with_crc(ByteWriter& w);
// Verifies the trailing CRC32 and returns the sealed body.
std::span<const std::uint8_t> open_sealed(std::span<const std::uint8_t> data,
                                          const std::string& what);

struct NamedArray {
  std::string name;
  std::vector<std::uint32_t> dims;
  Buffer values;  // float32-representable
};

// Chunked tensor archive shared by the detector and GAN checkpoints:
//   magic[4] | version u16 | metadata u32 len + UTF-8 JSON |
//   array count u32 | per array: name u16 len + bytes, ndims u32, dims u32...,
//   float32 payload | CRC32 u32 over all preceding bytes.
struct TensorArchive {
  std::string magic;
  std::uint16_t version = 1;
  std::string metadata;
  std::vector<NamedArray> arrays;

  const NamedArray& find(const std::string& name) const;
};

void save_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive load_archive(const std::filesystem::path& path, const std::string& magic,
                           std::uint16_t version);

// Raw 8-bit image as a FeatureMap with values 0..255 and 1 or 3 channels.
FeatureMap read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const FeatureMap& image_0_255);

// Maps [-1, 1] to 8-bit and writes a PNG.
void write_png_signed(const std::filesystem::path& path, const FeatureMap& image);
// Writes a heatmap of channel-wise max magnitude, scaled to the map maximum.
void write_heatmap_png(const std::filesystem::path& path, const FeatureMap& map);

FeatureMap resize_bilinear(const FeatureMap& image, int height, int width);

// Reads a PNG/PGM/PPM file, resizes to target_size x target_size and maps
// [0, 255] to [-1, 1].
FeatureMap load_and_preprocess(const std::filesystem::path& path, int target_size);

// Single-channel {0, 1} mask from an image file: channel max, resized, then
// set where the value reaches half of full scale.
FeatureMap load_mask(const std::filesystem::path& path, int target_size);

}  // namespace lesionforge
