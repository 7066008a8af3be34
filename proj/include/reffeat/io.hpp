#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "reffeat/matching.hpp"
#include "reffeat/tensor.hpp"

namespace reffeat {

// PNG and binary PPM (P6) / PGM (P5). Returns (1, 3, H, W) in [0, 1];
// grayscale is replicated to three channels. Errors name the path.
Tensor load_image(const std::filesystem::path& path);
Tensor decode_image(std::span<const uint8_t> bytes, const std::string& name);

// Format from the extension (.png, .ppm, .pgm). Values are clamped to
// [0, 1] and rounded to 8 bits. PGM stores the channel mean.
void save_image(const std::filesystem::path& path, const Tensor& image);

std::string base64_encode(std::span<const uint8_t> bytes);
std::vector<uint8_t> base64_decode(const std::string& text);

enum class BlobMode { base64, sidecar };

// JSON header {image, source, dim, count, keypoints: [[x, y, score]...],
// encoding} plus the float32 descriptor rows, either inline as base64
// ("data") or in a sidecar file named by "blob" (path.bin).
void write_descriptor_file(const std::filesystem::path& path, const DescriptorSet& set, const std::string& image,
                           BlobMode mode);
struct DescriptorFile {
  std::string image;
  DescriptorSet set;
};
DescriptorFile read_descriptor_file(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);

}  // namespace reffeat
