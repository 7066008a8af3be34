#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "reffeat/geometry.hpp"
#include "reffeat/network.hpp"
#include "reffeat/steerable.hpp"
#include "reffeat/tensor.hpp"

namespace reffeat {

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  float score = 0.0f;
};

// Keypoints with one unit-norm descriptor row each.
struct DescriptorSet {
  std::vector<Keypoint> keypoints;
  std::vector<float> descriptors;  // size() x dim, row-major
  int64_t dim = 0;
  std::string source = "ref";

  size_t size() const { return keypoints.size(); }
  std::span<const float> row(size_t i) const {
    return {descriptors.data() + i * static_cast<size_t>(dim), static_cast<size_t>(dim)};
  }
};

struct Correspondence {
  int64_t index_a = -1;  // -1 when imported from a file without keypoint indices
  int64_t index_b = -1;
  double xa = 0, ya = 0, xb = 0, yb = 0;
  double similarity = 0.0;
  std::string source;
};

struct MatchSet {
  std::vector<Correspondence> matches;
  std::optional<std::vector<uint8_t>> inliers;  // set by ransac_filter

  size_t size() const { return matches.size(); }
  bool empty() const { return matches.empty(); }
  std::vector<PointPair> point_pairs() const;
  // Matches flagged as inliers (all of them when no mask is present).
  MatchSet inlier_subset() const;
};

struct KeypointOptions {
  int max_keypoints = 1000;
  int nms_radius = 1;  // (2r+1)^2 window
};

// Score map keypoint selection. scores is (H, W) row-major. A pixel
// survives when its score is positive, it lies at least nms_radius from the
// border, it is not excluded, and it beats every neighbour in its window
// (equal scores: the lexicographically smaller (y, x) wins). Survivors are
// ordered by score, then (y, x), and truncated to max_keypoints.
std::vector<Keypoint> select_keypoints(std::span<const float> scores, int64_t height, int64_t width,
                                       const KeypointOptions& options, std::span<const uint8_t> excluded = {});

// Descriptor rows gathered at integer keypoint positions of batch item b.
DescriptorSet gather_descriptors(const Tensor& descriptors, const std::vector<Keypoint>& keypoints, int64_t b,
                                 std::string source);

// Score = repeatability * reliability; pixels with a zero descriptor are
// never selected.
DescriptorSet extract_keypoints(const RefOutput& output, const KeypointOptions& options, int64_t b = 0,
                                std::string source = "ref");
// Same keypoints as extract_keypoints, described by the unpooled features.
DescriptorSet extract_unpooled(const RefOutput& output, const KeypointOptions& options, int64_t b = 0,
                               std::string source = "ref-unpooled");

// Pairs (i, j) where each is the other's most similar row (ties go to the
// lower index). Throws ShapeError on a dimension mismatch.
MatchSet mutual_nn_match(const DescriptorSet& a, const DescriptorSet& b);

// Union of both sets (an identical pixel pair is kept once, with its higher
// similarity), sorted by similarity, then source tag, then original index,
// truncated to ceil(keep_fraction * |union|).
MatchSet ensemble_correspondences(const MatchSet& m1, const MatchSet& m2, double keep_fraction = 0.5);

// Undoes a known relative rotation of b by theta_p: every orientation block
// of b's unpooled descriptors is shifted back by prior_p before matching.
MatchSet rotation_prior_match(const DescriptorSet& a_unpooled, const DescriptorSet& b_unpooled, int prior_p,
                              const GroupSpec& group);

// Runs RANSAC on the match coordinates and stores the inlier mask. Returns
// std::nullopt (and an all-zero mask) when no model is found.
std::optional<RansacResult> ransac_filter(MatchSet& matches, const RansacOptions& options);

// Correspondence interchange file:
// {image_a, image_b, model, matches: [{xa, ya, xb, yb, similarity}]}
struct CorrespondenceFile {
  std::string image_a;
  std::string image_b;
  std::string model;
  MatchSet matches;
  int frame_width = 300;  // coordinate frame of the match positions
  int frame_height = 300;
};

nlohmann::json correspondence_to_json(const CorrespondenceFile& file);
CorrespondenceFile correspondence_from_json(const nlohmann::json& j);
void write_correspondences(const std::filesystem::path& path, const CorrespondenceFile& file);
CorrespondenceFile read_correspondences(const std::filesystem::path& path);

}  // namespace reffeat
