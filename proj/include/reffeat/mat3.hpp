#pragma once

#include <array>

namespace reffeat {

// Row-major 3x3 matrix used for planar projective maps. The geometry
// module wraps this in Homography; the resampler consumes it directly.
using Mat3 = std::array<double, 9>;

Mat3 mat3_identity();
Mat3 mat3_multiply(const Mat3& a, const Mat3& b);
double mat3_determinant(const Mat3& m);
// Inverse through the adjugate; throws DegenerateError when |det| <= 1e-12.
Mat3 mat3_inverse(const Mat3& m);

// Rotation about ((width-1)/2, (height-1)/2) by angle_deg, counter-clockwise
// as seen on screen with the y axis pointing down. Multiples of 90 degrees
// use exact 0/+-1 entries.
Mat3 rotation_about_center(double angle_deg, double width, double height);

// True when angle_deg is a multiple of 90 up to 1e-9.
bool is_quarter_turn(double angle_deg);

}  // namespace reffeat
