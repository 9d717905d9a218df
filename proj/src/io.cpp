#include "lesionforge/io.hpp"

#include <openssl/evp.h>
#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lesionforge {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

void ByteWriter::u16(std::uint16_t v) {
  u8(static_cast<std::uint8_t>(v));
  u8(static_cast<std::uint8_t>(v >> 8));
}

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void ByteWriter::raw(std::span<const std::uint8_t> data) {
  bytes_.insert(bytes_.end(), data.begin(), data.end());
}

void ByteWriter::raw(const std::string& s) {
  bytes_.insert(bytes_.end(), s.begin(), s.end());
}

void ByteReader::need(std::size_t n) const {
  if (pos_ + n > data_.size()) {
    throw Error("truncated", "unexpected end of data at byte " + std::to_string(pos_));
  }
}

std::uint8_t ByteReader::u8() {
  need(1);
  return data_[pos_++];
}

std::uint16_t ByteReader::u16() {
  need(2);
  const std::uint16_t v = static_cast<std::uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
  pos_ += 2;
  return v;
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

std::string ByteReader::str(std::size_t n) {
  need(n);
  std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::uint32_t crc32(std::span<const std::uint8_t> data) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  c = ::crc32_z(c, data.data(), data.size());
  return static_cast<std::uint32_t>(c);
}

std::string sha256_hex(std::span<const std::uint8_t> data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("hash_failed", "SHA-256 computation failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) {
  return sha256_hex(read_bytes(path));
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("unreadable_file", "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("unwritable_file", "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw Error("unwritable_file", "short write to " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void seal_with_crc(ByteWriter& w) { w.u32(crc32(w.bytes())); }

std::span<const std::uint8_t> open_sealed(std::span<const std::uint8_t> data,
                                          const std::string& what) {
  if (data.size() < 4) throw Error("truncated", what + " is too short");
  const auto body = data.first(data.size() - 4);
  ByteReader tail(data.last(4));
  if (tail.u32() != crc32(body)) {
    throw Error("checksum", what + " failed CRC32 verification");
  }
  return body;
}

const NamedArray& TensorArchive::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw Error("missing_array", "archive has no array named '" + name + "'");
}

void save_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  if (archive.magic.size() != 4) throw Error("bad_magic", "archive magic must be 4 bytes");
  ByteWriter w;
  w.raw(archive.magic);
  w.u16(archive.version);
  w.u32(static_cast<std::uint32_t>(archive.metadata.size()));
  w.raw(archive.metadata);
  w.u32(static_cast<std::uint32_t>(archive.arrays.size()));
  for (const auto& a : archive.arrays) {
    std::size_t n = 1;
    for (auto d : a.dims) n *= d;
    if (n != a.values.size()) {
      throw Error("bad_shape", "array '" + a.name + "' dims do not match its length");
    }
    w.u16(static_cast<std::uint16_t>(a.name.size()));
    w.raw(a.name);
    w.u32(static_cast<std::uint32_t>(a.dims.size()));
    for (auto d : a.dims) w.u32(d);
    for (double v : a.values) w.f32(static_cast<float>(v));
  }
  seal_with_crc(w);
  write_bytes(path, w.bytes());
}

TensorArchive load_archive(const std::filesystem::path& path, const std::string& magic,
                           std::uint16_t version) {
  const auto bytes = read_bytes(path);
  ByteReader r(open_sealed(bytes, path.string()));
  TensorArchive archive;
  archive.magic = r.str(4);
  if (archive.magic != magic) {
    throw Error("bad_magic", path.string() + " is not a '" + magic + "' archive");
  }
  archive.version = r.u16();
  if (archive.version != version) {
    throw Error("version_mismatch", path.string() + " has version " +
                                        std::to_string(archive.version) + ", expected " +
                                        std::to_string(version));
  }
  archive.metadata = r.str(r.u32());
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.str(r.u16());
    const std::uint32_t nd = r.u32();
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < nd; ++d) {
      a.dims.push_back(r.u32());
      n *= a.dims.back();
    }
    if (n * 4 > r.remaining()) throw Error("truncated", "array payload truncated");
    a.values.resize(n);
    for (auto& v : a.values) v = r.f32();
    archive.arrays.push_back(std::move(a));
  }
  if (r.remaining() != 0) throw Error("trailing_bytes", path.string() + " has trailing data");
  return archive;
}

namespace {

FeatureMap read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw Error("bad_image", path.string() + ": " + img.message);
  }
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw Error("bad_image", path.string() + ": " + msg);
  }
  FeatureMap out(static_cast<int>(img.height), static_cast<int>(img.width), gray ? 1 : 3);
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = buf[i];
  return out;
}

// Netpbm P2/P3/P5/P6 with maxval <= 255.
FeatureMap read_pnm(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  std::size_t pos = 0;
  auto skip = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&] {
    skip();
    int v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      any = true;
    }
    if (!any) throw Error("bad_image", name + ": malformed netpbm header");
    return v;
  };
  const char kind = static_cast<char>(bytes[1]);
  const int w = number();
  const int h = number();
  const int maxval = number();
  if (w < 1 || h < 1 || maxval < 1 || maxval > 255) {
    throw Error("bad_image", name + ": unsupported netpbm dimensions or depth");
  }
  const int ch = (kind == '3' || kind == '6') ? 3 : 1;
  FeatureMap out(h, w, ch);
  const double scale = 255.0 / maxval;
  if (kind == '5' || kind == '6') {
    ++pos;
    if (pos + out.size() > bytes.size()) throw Error("bad_image", name + ": truncated pixels");
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = bytes[pos + i] * scale;
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = number() * scale;
  }
  return out;
}

}  // namespace

FeatureMap read_image(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  static constexpr std::uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (bytes.size() >= 8 && std::equal(png_sig, png_sig + 8, bytes.begin())) {
    return read_png(path);
  }
  if (bytes.size() >= 2 && bytes[0] == 'P' &&
      (bytes[1] == '2' || bytes[1] == '3' || bytes[1] == '5' || bytes[1] == '6')) {
    return read_pnm(bytes, path.string());
  }
  throw Error("bad_image", path.string() + " is not a PNG or netpbm image");
}

void write_png(const std::filesystem::path& path, const FeatureMap& image) {
  if (image.channels() != 1 && image.channels() != 3) {
    throw Error("bad_image", "PNG output needs 1 or 3 channels");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width());
  img.height = static_cast<png_uint_32>(image.height());
  img.format = image.channels() == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<png_byte> buf(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    buf[i] = static_cast<png_byte>(std::clamp(std::lround(image.data()[i]), 0L, 255L));
  }
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw Error("unwritable_file", path.string() + ": " + img.message);
  }
}

void write_png_signed(const std::filesystem::path& path, const FeatureMap& image) {
  FeatureMap scaled = image;
  for (double& v : scaled.values()) v = (std::clamp(v, -1.0, 1.0) + 1.0) * 127.5;
  write_png(path, scaled);
}

void write_heatmap_png(const std::filesystem::path& path, const FeatureMap& map) {
  FeatureMap heat(map.height(), map.width(), 1);
  for (int y = 0; y < map.height(); ++y) {
    for (int x = 0; x < map.width(); ++x) {
      double m = 0.0;
      for (int c = 0; c < map.channels(); ++c) m = std::max(m, std::abs(map.at(y, x, c)));
      heat.at(y, x, 0) = m;
    }
  }
  const double peak = heat.max_abs();
  if (peak > 0.0) heat *= 255.0 / peak;
  write_png(path, heat);
}

FeatureMap resize_bilinear(const FeatureMap& image, int height, int width) {
  if (image.height() == height && image.width() == width) return image;
  FeatureMap out(height, width, image.channels());
  const double sy = static_cast<double>(image.height()) / height;
  const double sx = static_cast<double>(image.width()) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, image.height() - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, image.height() - 1);
    const double ty = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, image.width() - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, image.width() - 1);
      const double tx = fx - x0;
      for (int c = 0; c < image.channels(); ++c) {
        const double top = image.at(y0, x0, c) * (1 - tx) + image.at(y0, x1, c) * tx;
        const double bot = image.at(y1, x0, c) * (1 - tx) + image.at(y1, x1, c) * tx;
        out.at(y, x, c) = top * (1 - ty) + bot * ty;
      }
    }
  }
  return out;
}

FeatureMap load_and_preprocess(const std::filesystem::path& path, int target_size) {
  if (target_size < 1) throw Error("bad_size", "target size must be positive");
  FeatureMap img = resize_bilinear(read_image(path), target_size, target_size);
  for (double& v : img.values()) v = v / 255.0 * 2.0 - 1.0;
  return img;
}

FeatureMap load_mask(const std::filesystem::path& path, int target_size) {
  FeatureMap raw = read_image(path);
  FeatureMap gray(raw.height(), raw.width(), 1);
  for (int y = 0; y < raw.height(); ++y) {
    for (int x = 0; x < raw.width(); ++x) {
      double m = 0.0;
      for (int c = 0; c < raw.channels(); ++c) m = std::max(m, raw.at(y, x, c));
      gray.at(y, x, 0) = m;
    }
  }
  FeatureMap mask = resize_bilinear(gray, target_size, target_size);
  for (double& v : mask.values()) v = v >= 127.5 ? 1.0 : 0.0;
  return mask;
}

}  // namespace lesionforge
