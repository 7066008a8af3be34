#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "reffeat/mat3.hpp"

namespace reffeat {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

struct PointPair {
  Point2 a;
  Point2 b;
};

// Planar projective transform, stored with H(2,2) = 1 whenever it is nonzero.
class Homography {
 public:
  Homography() : m_(Eigen::Matrix3d::Identity()) {}
  explicit Homography(const Eigen::Matrix3d& m);
  static Homography from_mat3(const Mat3& m);
  static Homography translation(double tx, double ty);
  static Homography scaling(double sx, double sy);

  const Eigen::Matrix3d& matrix() const { return m_; }
  Mat3 to_mat3() const;
  double determinant() const { return m_.determinant(); }

  // Throws DegenerateError when |det| <= 1e-12.
  Homography inverse() const;
  // Throws DegenerateError for a point mapped to infinity (|w| < 1e-12).
  Point2 apply(const Point2& p) const;
  std::optional<Point2> try_apply(const Point2& p) const;

  // (*this) after `first`: x -> this(first(x)).
  Homography after(const Homography& first) const;

 private:
  Eigen::Matrix3d m_;
};

// T(c) R(angle) T(-c) with c = ((width-1)/2, (height-1)/2), the same map the
// image rotation uses.
Homography rotation_homography(double angle_deg, int width, int height);

// S_b * h * S_a^-1: maps coordinates of image a scaled by (sx_a, sy_a) to
// image b scaled by (sx_b, sy_b).
Homography rescale_homography(const Homography& h, double sx_a, double sy_a, double sx_b, double sy_b);

// Normalised DLT. Four pairs give an exact fit; more give the algebraic
// least-squares solution. Throws DegenerateError on collinear minimal sets
// or a rank-deficient system.
Homography dlt_homography(std::span<const PointPair> pairs);

// True when the three points are collinear to within a relative tolerance.
bool collinear(const Point2& p, const Point2& q, const Point2& r);

// Mean of forward and backward reprojection distances; infinity when either
// direction maps to infinity.
double symmetric_transfer_error(const Homography& h, const Homography& h_inv, const PointPair& pair);

struct RansacOptions {
  double threshold_px = 3.0;
  int max_iters = 2000;
  double confidence = 0.995;
  uint64_t seed = 0;
};

struct RansacResult {
  Homography model;
  std::vector<uint8_t> inliers;
  int inlier_count = 0;
  int iterations = 0;
  uint64_t seed = 0;
};

// Seeded 4-point RANSAC with adaptive iteration count and a final
// least-squares refit on the consensus set. Throws NoModelError below four
// pairs or when no model gathers four inliers.
RansacResult ransac_homography(std::span<const PointPair> pairs, const RansacOptions& options);

// HPatches text layout: three rows of three whitespace-separated numbers.
Homography parse_homography(const std::string& text);
Homography read_homography(const std::filesystem::path& path);
std::string format_homography(const Homography& h);
void write_homography(const std::filesystem::path& path, const Homography& h);

}  // namespace reffeat
