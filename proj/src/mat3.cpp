#include "reffeat/mat3.hpp"

#include <cmath>
#include <numbers>

#include "reffeat/error.hpp"

namespace reffeat {

Mat3 mat3_identity() { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }

Mat3 mat3_multiply(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 3 + j];
      r[i * 3 + j] = s;
    }
  }
  return r;
}

double mat3_determinant(const Mat3& m) {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

Mat3 mat3_inverse(const Mat3& m) {
  const double det = mat3_determinant(m);
  if (std::abs(det) <= 1e-12) throw DegenerateError("matrix is singular (|det| <= 1e-12)");
  Mat3 adj{
      m[4] * m[8] - m[5] * m[7], m[2] * m[7] - m[1] * m[8], m[1] * m[5] - m[2] * m[4],
      m[5] * m[6] - m[3] * m[8], m[0] * m[8] - m[2] * m[6], m[2] * m[3] - m[0] * m[5],
      m[3] * m[7] - m[4] * m[6], m[1] * m[6] - m[0] * m[7], m[0] * m[4] - m[1] * m[3],
  };
  for (double& v : adj) v /= det;
  return adj;
}

bool is_quarter_turn(double angle_deg) {
  const double q = angle_deg / 90.0;
  return std::abs(q - std::round(q)) < 1e-9 / 90.0;
}

Mat3 rotation_about_center(double angle_deg, double width, double height) {
  double c = 0.0;
  double s = 0.0;
  if (is_quarter_turn(angle_deg)) {
    long q = std::lround(angle_deg / 90.0) % 4;
    if (q < 0) q += 4;
    constexpr double kCos[4] = {1, 0, -1, 0};
    constexpr double kSin[4] = {0, 1, 0, -1};
    c = kCos[q];
    s = kSin[q];
  } else {
    const double rad = angle_deg * std::numbers::pi / 180.0;
    c = std::cos(rad);
    s = std::sin(rad);
  }
  const double cx = (width - 1.0) / 2.0;
  const double cy = (height - 1.0) / 2.0;
  // x' = cx + c*(x-cx) + s*(y-cy); y' = cy - s*(x-cx) + c*(y-cy)
  return {c, s, cx - c * cx - s * cy, -s, c, cy + s * cx - c * cy, 0, 0, 1};
}

}  // namespace reffeat
