#include "reffeat/io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <png.h>

#include "reffeat/error.hpp"

namespace reffeat {

namespace {

std::vector<uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string lower_ext(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  return ext;
}

Tensor decode_png(std::span<const uint8_t> bytes, const std::string& name) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw DataError(name + ": invalid PNG (" + image.message + ")");
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<uint8_t> pixels(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DataError(name + ": truncated or corrupt PNG (" + msg + ")");
  }
  const int64_t H = image.height, W = image.width;
  Tensor out({1, 3, H, W});
  for (int64_t i = 0; i < H * W; ++i) {
    for (int64_t c = 0; c < 3; ++c) out[c * H * W + i] = float(pixels[static_cast<size_t>(3 * i + c)]) / 255.0f;
  }
  return out;
}

// Binary netpbm header: magic, width, height, maxval, separated by
// whitespace and '#' comments, then a single whitespace byte.
Tensor decode_pnm(std::span<const uint8_t> bytes, const std::string& name) {
  const int channels = bytes[1] == '6' ? 3 : 1;
  size_t pos = 2;
  auto next_int = [&]() -> long {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw DataError(name + ": malformed netpbm header");
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > 1'000'000'000L) throw DataError(name + ": netpbm header value out of range");
    }
    return v;
  };
  const long W = next_int(), H = next_int(), maxval = next_int();
  if (W <= 0 || H <= 0) throw DataError(name + ": image has zero size");
  if (maxval <= 0 || maxval > 65535) throw DataError(name + ": unsupported maxval " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw DataError(name + ": malformed netpbm header");
  ++pos;
  const size_t sample_bytes = maxval > 255 ? 2 : 1;
  const size_t needed = size_t(W) * size_t(H) * size_t(channels) * sample_bytes;
  if (bytes.size() - pos < needed) {
    throw DataError(name + ": truncated image data (" + std::to_string(bytes.size() - pos) + " of " +
                    std::to_string(needed) + " bytes)");
  }
  Tensor out({1, 3, H, W});
  const int64_t hw = int64_t(H) * W;
  for (int64_t i = 0; i < hw; ++i) {
    for (int c = 0; c < channels; ++c) {
      const size_t o = pos + (size_t(i) * size_t(channels) + size_t(c)) * sample_bytes;
      const unsigned v = sample_bytes == 2 ? (unsigned(bytes[o]) << 8 | bytes[o + 1]) : bytes[o];
      out[c * hw + i] = float(v) / float(maxval);
    }
    if (channels == 1) out[hw + i] = out[2 * hw + i] = out[i];
  }
  return out;
}

uint8_t quantize(float v) { return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

}  // namespace

Tensor decode_image(std::span<const uint8_t> bytes, const std::string& name) {
  static const uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), png_sig, 8) == 0) return decode_png(bytes, name);
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) return decode_pnm(bytes, name);
  throw DataError(name + ": unsupported image format (expected PNG, binary PPM or PGM)");
}

Tensor load_image(const std::filesystem::path& path) { return decode_image(read_bytes(path), path.string()); }

void save_image(const std::filesystem::path& path, const Tensor& image) {
  require_4d(image, "save_image");
  if (image.dim(0) != 1 || (image.dim(1) != 3 && image.dim(1) != 1)) {
    throw ShapeError("save_image expects (1, 3, H, W) or (1, 1, H, W), got " + shape_to_string(image.shape()));
  }
  const int64_t C = image.dim(1), H = image.dim(2), W = image.dim(3), hw = H * W;
  auto channel = [&](int64_t c, int64_t i) { return image[(C == 1 ? 0 : c) * hw + i]; };
  const std::string ext = lower_ext(path);
  if (ext == ".png") {
    std::vector<uint8_t> pixels(static_cast<size_t>(3 * hw));
    for (int64_t i = 0; i < hw; ++i) {
      for (int64_t c = 0; c < 3; ++c) pixels[static_cast<size_t>(3 * i + c)] = quantize(channel(c, i));
    }
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(W);
    img.height = static_cast<png_uint_32>(H);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.string().c_str(), 0, pixels.data(), 0, nullptr)) {
      throw DataError("cannot write PNG " + path.string() + ": " + img.message);
    }
    return;
  }
  if (ext != ".ppm" && ext != ".pgm") throw DataError("unsupported output image format: " + path.string());
  const bool gray = ext == ".pgm";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << (gray ? "P5\n" : "P6\n") << W << ' ' << H << "\n255\n";
  std::vector<uint8_t> buf;
  buf.reserve(static_cast<size_t>(hw * (gray ? 1 : 3)));
  for (int64_t i = 0; i < hw; ++i) {
    if (gray) {
      buf.push_back(quantize((channel(0, i) + channel(1, i) + channel(2, i)) / 3.0f));
    } else {
      for (int64_t c = 0; c < 3; ++c) buf.push_back(quantize(channel(c, i)));
    }
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

std::string base64_encode(std::span<const uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<size_t>(n));
  return out;
}

std::vector<uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw DataError("base64 payload length is not a multiple of 4");
  std::vector<uint8_t> out(3 * text.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw DataError("invalid base64 payload");
  // EVP_DecodeBlock keeps the zero bytes produced by '=' padding.
  size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<size_t>(n) - pad);
  return out;
}

void write_descriptor_file(const std::filesystem::path& path, const DescriptorSet& set, const std::string& image,
                           BlobMode mode) {
  nlohmann::json kps = nlohmann::json::array();
  for (const auto& k : set.keypoints) kps.push_back({k.x, k.y, k.score});
  nlohmann::json j = {{"image", image},
                      {"source", set.source},
                      {"dim", set.dim},
                      {"count", set.size()},
                      {"keypoints", std::move(kps)},
                      {"encoding", mode == BlobMode::base64 ? "base64" : "sidecar"}};
  const auto* raw = reinterpret_cast<const uint8_t*>(set.descriptors.data());
  const std::span<const uint8_t> blob(raw, set.descriptors.size() * sizeof(float));
  if (mode == BlobMode::base64) {
    j["data"] = base64_encode(blob);
  } else {
    std::filesystem::path side = path;
    side += ".bin";
    std::ofstream b(side, std::ios::binary);
    if (!b) throw DataError("cannot write descriptor blob " + side.string());
    b.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    j["blob"] = side.filename().string();
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write descriptor file " + path.string());
  out << j.dump(1) << '\n';
}

DescriptorFile read_descriptor_file(const std::filesystem::path& path) {
  const std::string where = path.string();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": " + e.what());
  }
  DescriptorFile f;
  try {
    f.image = j.at("image").get<std::string>();
    f.set.source = j.at("source").get<std::string>();
    f.set.dim = j.at("dim").get<int64_t>();
    const auto count = j.at("count").get<size_t>();
    for (const auto& k : j.at("keypoints")) {
      f.set.keypoints.push_back({k.at(0).get<double>(), k.at(1).get<double>(), k.at(2).get<float>()});
    }
    if (f.set.keypoints.size() != count) throw DataError(where + ": keypoint count does not match header");
    std::vector<uint8_t> blob;
    const std::string enc = j.at("encoding").get<std::string>();
    if (enc == "base64") {
      blob = base64_decode(j.at("data").get<std::string>());
    } else if (enc == "sidecar") {
      blob = read_bytes(path.parent_path() / j.at("blob").get<std::string>());
    } else {
      throw DataError(where + ": unknown descriptor encoding '" + enc + "'");
    }
    const size_t expected = count * static_cast<size_t>(f.set.dim) * sizeof(float);
    if (blob.size() != expected) {
      throw DataError(where + ": descriptor payload has " + std::to_string(blob.size()) + " bytes, expected " +
                      std::to_string(expected));
    }
    f.set.descriptors.resize(count * static_cast<size_t>(f.set.dim));
    std::memcpy(f.set.descriptors.data(), blob.data(), blob.size());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": malformed descriptor file: " + e.what());
  }
  return f;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace reffeat
