#include "neuro3d/image.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace neuro3d {

void Image::fill(double r, double g, double b) {
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      at(y, x, 0) = r;
      at(y, x, 1) = g;
      at(y, x, 2) = b;
    }
}

bool Image::in_unit_range(double tol) const {
  for (double v : pixels)
    if (!(v >= -tol && v <= 1.0 + tol)) return false;
  return true;
}

void Image::clamp01() {
  for (double& v : pixels) v = std::clamp(v, 0.0, 1.0);
}

Tensor Image::to_chw() const {
  Tensor t({3, height, width});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) t.at(c, y, x) = at(y, x, c);
  return t;
}

Image Image::from_chw(const Tensor& t) {
  Image img(t.dim(1), t.dim(2));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) img.at(y, x, c) = t.at(c, y, x);
  return img;
}

namespace {

void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t read_u32_be(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                  const std::vector<std::uint8_t>& payload) {
  put_u32_be(out, static_cast<std::uint32_t>(payload.size()));
  const std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const auto crc =
      crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
  put_u32_be(out, static_cast<std::uint32_t>(crc));
}

std::vector<std::uint8_t> zlib_deflate(const std::vector<std::uint8_t>& raw) {
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> out(bound);
  if (compress2(out.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("png: zlib compression failed");
  out.resize(bound);
  return out;
}

std::vector<std::uint8_t> zlib_inflate(const std::vector<std::uint8_t>& comp,
                                       std::size_t expected) {
  std::vector<std::uint8_t> out(expected);
  uLongf len = static_cast<uLongf>(expected);
  if (uncompress(out.data(), &len, comp.data(), static_cast<uLong>(comp.size())) != Z_OK ||
      len != expected)
    throw std::runtime_error("png: zlib decompression failed");
  return out;
}

void write_png(const std::string& path, int w, int h, int channels,
               const std::vector<std::uint8_t>& bytes) {
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(h) * (1 + static_cast<std::size_t>(w) * channels));
  for (int y = 0; y < h; ++y) {
    raw.push_back(0);  // filter: none
    const auto* row = bytes.data() + static_cast<std::size_t>(y) * w * channels;
    raw.insert(raw.end(), row, row + static_cast<std::size_t>(w) * channels);
  }

  std::vector<std::uint8_t> file = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<std::uint8_t> ihdr;
  put_u32_be(ihdr, static_cast<std::uint32_t>(w));
  put_u32_be(ihdr, static_cast<std::uint32_t>(h));
  ihdr.push_back(8);                                  // bit depth
  ihdr.push_back(channels == 3 ? 2 : 0);              // color type: rgb or gray
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  append_chunk(file, "IHDR", ihdr);
  append_chunk(file, "IDAT", zlib_deflate(raw));
  append_chunk(file, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("png: cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(file.data()), static_cast<std::streamsize>(file.size()));
}

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

struct DecodedPng {
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> bytes;
};

DecodedPng read_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("png: cannot open: " + path);
  std::vector<std::uint8_t> file((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (file.size() < 8 || std::memcmp(file.data(), sig, 8) != 0)
    throw std::runtime_error("png: bad signature: " + path);

  DecodedPng out;
  int file_channels = 0;
  std::vector<std::uint8_t> idat;
  std::size_t pos = 8;
  while (pos + 8 <= file.size()) {
    const std::uint32_t len = read_u32_be(&file[pos]);
    const char* type = reinterpret_cast<const char*>(&file[pos + 4]);
    const std::uint8_t* payload = &file[pos + 8];
    if (std::memcmp(type, "IHDR", 4) == 0) {
      out.width = static_cast<int>(read_u32_be(payload));
      out.height = static_cast<int>(read_u32_be(payload + 4));
      const int depth = payload[8], color = payload[9], interlace = payload[12];
      if (depth != 8 || interlace != 0)
        throw std::runtime_error("png: only 8-bit non-interlaced supported");
      switch (color) {
        case 0: file_channels = 1; break;
        case 2: file_channels = 3; break;
        case 6: file_channels = 4; break;
        default: throw std::runtime_error("png: unsupported color type");
      }
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  if (out.width <= 0 || out.height <= 0 || file_channels == 0)
    throw std::runtime_error("png: missing IHDR: " + path);

  const std::size_t stride = static_cast<std::size_t>(out.width) * file_channels;
  std::vector<std::uint8_t> raw = zlib_inflate(idat, (stride + 1) * out.height);

  std::vector<std::uint8_t> pix(stride * out.height);
  const int bpp = file_channels;
  for (int y = 0; y < out.height; ++y) {
    const std::uint8_t filter = raw[y * (stride + 1)];
    const std::uint8_t* src = &raw[y * (stride + 1) + 1];
    std::uint8_t* dst = &pix[y * stride];
    const std::uint8_t* up = y > 0 ? &pix[(y - 1) * stride] : nullptr;
    for (std::size_t x = 0; x < stride; ++x) {
      const int a = x >= static_cast<std::size_t>(bpp) ? dst[x - bpp] : 0;
      const int b = up ? up[x] : 0;
      const int c = (up && x >= static_cast<std::size_t>(bpp)) ? up[x - bpp] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw std::runtime_error("png: bad filter byte");
      }
      dst[x] = static_cast<std::uint8_t>(v & 0xff);
    }
  }

  out.channels = file_channels == 4 ? 3 : file_channels;
  if (file_channels == 4) {
    out.bytes.resize(static_cast<std::size_t>(out.width) * out.height * 3);
    for (std::size_t i = 0; i < static_cast<std::size_t>(out.width) * out.height; ++i)
      for (int c = 0; c < 3; ++c) out.bytes[i * 3 + c] = pix[i * 4 + c];
  } else {
    out.bytes = std::move(pix);
  }
  return out;
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

void write_png_rgb(const std::string& path, const Image& img) {
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(img.height) * img.width * 3);
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(img.pixels[i]);
  write_png(path, img.width, img.height, 3, bytes);
}

Image read_png_rgb(const std::string& path) {
  DecodedPng d = read_png(path);
  Image img(d.height, d.width);
  if (d.channels == 1) {
    for (std::size_t i = 0; i < d.bytes.size(); ++i) {
      const double v = d.bytes[i] / 255.0;
      img.pixels[i * 3 + 0] = img.pixels[i * 3 + 1] = img.pixels[i * 3 + 2] = v;
    }
  } else {
    for (std::size_t i = 0; i < d.bytes.size(); ++i) img.pixels[i] = d.bytes[i] / 255.0;
  }
  return img;
}

void write_png_gray(const std::string& path, const LabelMap& map) {
  write_png(path, map.width, map.height, 1, map.labels);
}

LabelMap read_png_gray(const std::string& path) {
  DecodedPng d = read_png(path);
  if (d.channels != 1) throw std::runtime_error("png: expected grayscale: " + path);
  LabelMap map(d.height, d.width);
  map.labels = std::move(d.bytes);
  return map;
}

std::vector<double> color_histogram(const Image& img, int bins) {
  std::vector<double> h(static_cast<std::size_t>(bins) * 3, 0.0);
  const double n = static_cast<double>(img.height) * img.width;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        int b = static_cast<int>(std::clamp(img.at(y, x, c), 0.0, 1.0) * bins);
        if (b == bins) b = bins - 1;
        h[static_cast<std::size_t>(c) * bins + b] += 1.0 / n;
      }
  return h;
}

double histogram_l1(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("histogram_l1: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / 3.0;
}

double psnr(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width)
    throw std::invalid_argument("psnr: shape mismatch");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.pixels.size());
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

}  // namespace neuro3d
