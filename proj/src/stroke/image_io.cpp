#include "paintnext/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/binary_from_base64.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <cmath>
#include <fstream>
#include <iterator>

namespace paintnext {

namespace {

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::vector<std::uint8_t> encode_raw(const std::vector<std::uint8_t>& raw, int height, int width,
                                     png_uint_32 format) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = format;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, raw.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("png sizing failed: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, raw.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("png encoding failed: ") + image.message);
  }
  out.resize(size);
  return out;
}

struct Decoded {
  int height;
  int width;
  std::vector<std::uint8_t> raw;
};

Decoded decode_raw(std::span<const std::uint8_t> bytes, png_uint_32 format) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (bytes.empty() || !png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw ImageDecodeError(std::string("not a decodable PNG: ") + (bytes.empty() ? "empty input" : image.message));
  }
  image.format = format;
  Decoded d{static_cast<int>(image.height), static_cast<int>(image.width), {}};
  d.raw.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, d.raw.data(), 0, nullptr)) {
    png_image_free(&image);
    throw ImageDecodeError(std::string("PNG decode failed: ") + image.message);
  }
  return d;
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Canvas& canvas) {
  const auto px = canvas.pixels();
  std::vector<std::uint8_t> raw(px.size());
  std::transform(px.begin(), px.end(), raw.begin(), [](float v) { return quantize(v); });
  return encode_raw(raw, canvas.height(), canvas.width(), PNG_FORMAT_RGB);
}

std::vector<std::uint8_t> encode_gray_png(std::span<const double> values, int height, int width) {
  if (values.size() != static_cast<std::size_t>(height) * width) {
    throw std::invalid_argument("gray map size does not match dimensions");
  }
  std::vector<std::uint8_t> raw(values.size());
  std::transform(values.begin(), values.end(), raw.begin(), quantize);
  return encode_raw(raw, height, width, PNG_FORMAT_GRAY);
}

Canvas decode_png(std::span<const std::uint8_t> bytes) {
  const Decoded d = decode_raw(bytes, PNG_FORMAT_RGB);
  Canvas c(d.height, d.width, 0.0f);
  auto px = c.pixels();
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(d.raw[i] / 255.0);
  return c;
}

void write_png(const std::filesystem::path& path, const Canvas& canvas) { spit(path, encode_png(canvas)); }

void write_gray_png(const std::filesystem::path& path, std::span<const double> values, int height, int width) {
  spit(path, encode_gray_png(values, height, width));
}

Canvas read_png(const std::filesystem::path& path) { return decode_png(slurp(path)); }

LabelMap read_label_png(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  const Decoded d = decode_raw(bytes, PNG_FORMAT_GRAY);
  LabelMap m{d.height, d.width, {}};
  m.labels.assign(d.raw.begin(), d.raw.end());
  return m;
}

void write_label_png(const std::filesystem::path& path, const LabelMap& map) {
  std::vector<std::uint8_t> raw(map.labels.size());
  std::transform(map.labels.begin(), map.labels.end(), raw.begin(),
                 [](int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); });
  spit(path, encode_raw(raw, map.height, map.width, PNG_FORMAT_GRAY));
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  using namespace boost::archive::iterators;
  using It = base64_from_binary<transform_width<const std::uint8_t*, 6, 8>>;
  std::string out(It(bytes.data()), It(bytes.data() + bytes.size()));
  out.append((3 - bytes.size() % 3) % 3, '=');
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  using namespace boost::archive::iterators;
  using It = transform_width<binary_from_base64<const char*>, 8, 6>;
  std::string trimmed(text);
  std::erase_if(trimmed, [](char ch) { return ch == '\n' || ch == '\r' || ch == ' '; });
  std::size_t pad = 0;
  while (!trimmed.empty() && trimmed.back() == '=') {
    trimmed.pop_back();
    ++pad;
  }
  if (pad > 2) throw ImageDecodeError("malformed base64 padding");
  try {
    std::vector<std::uint8_t> out(It(trimmed.data()), It(trimmed.data() + trimmed.size()));
    return out;
  } catch (const std::exception& e) {
    throw ImageDecodeError(std::string("malformed base64: ") + e.what());
  }
}

}  // namespace paintnext
