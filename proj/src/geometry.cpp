#include "reffeat/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include <Eigen/LU>
#include <Eigen/SVD>

#include "reffeat/error.hpp"
#include "reffeat/random.hpp"

namespace reffeat {

Homography::Homography(const Eigen::Matrix3d& m) : m_(m) {
  if (std::abs(m_(2, 2)) > 1e-15) m_ /= m_(2, 2);
}

Homography Homography::from_mat3(const Mat3& m) {
  Eigen::Matrix3d e;
  e << m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7], m[8];
  return Homography(e);
}

Homography Homography::translation(double tx, double ty) {
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
  m(0, 2) = tx;
  m(1, 2) = ty;
  return Homography(m);
}

Homography Homography::scaling(double sx, double sy) {
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
  m(0, 0) = sx;
  m(1, 1) = sy;
  return Homography(m);
}

Mat3 Homography::to_mat3() const {
  return {m_(0, 0), m_(0, 1), m_(0, 2), m_(1, 0), m_(1, 1), m_(1, 2), m_(2, 0), m_(2, 1), m_(2, 2)};
}

Homography Homography::inverse() const { return from_mat3(mat3_inverse(to_mat3())); }

std::optional<Point2> Homography::try_apply(const Point2& p) const {
  const double w = m_(2, 0) * p.x + m_(2, 1) * p.y + m_(2, 2);
  if (std::abs(w) < 1e-12) return std::nullopt;
  return Point2{(m_(0, 0) * p.x + m_(0, 1) * p.y + m_(0, 2)) / w, (m_(1, 0) * p.x + m_(1, 1) * p.y + m_(1, 2)) / w};
}

Point2 Homography::apply(const Point2& p) const {
  auto q = try_apply(p);
  if (!q) {
    std::ostringstream os;
    os << "point (" << p.x << ", " << p.y << ") maps to infinity";
    throw DegenerateError(os.str());
  }
  return *q;
}

Homography Homography::after(const Homography& first) const { return Homography(m_ * first.m_); }

Homography rotation_homography(double angle_deg, int width, int height) {
  return Homography::from_mat3(rotation_about_center(angle_deg, width, height));
}

Homography rescale_homography(const Homography& h, double sx_a, double sy_a, double sx_b, double sy_b) {
  if (sx_a <= 0 || sy_a <= 0 || sx_b <= 0 || sy_b <= 0) throw ValueError("rescale factors must be positive");
  const Homography sa_inv = Homography::scaling(1.0 / sx_a, 1.0 / sy_a);
  return Homography::scaling(sx_b, sy_b).after(h).after(sa_inv);
}

bool collinear(const Point2& p, const Point2& q, const Point2& r) {
  const double ux = q.x - p.x, uy = q.y - p.y, vx = r.x - p.x, vy = r.y - p.y;
  const double cross = ux * vy - uy * vx;
  const double scale = std::max({ux * ux + uy * uy, vx * vx + vy * vy, 1e-300});
  return std::abs(cross) <= 1e-9 * scale;
}

namespace {

// Translate the centroid to the origin and scale the mean distance to sqrt(2).
Eigen::Matrix3d normalizing_transform(std::span<const PointPair> pairs, bool use_a) {
  double cx = 0, cy = 0;
  for (const auto& pp : pairs) {
    const Point2& p = use_a ? pp.a : pp.b;
    cx += p.x;
    cy += p.y;
  }
  cx /= double(pairs.size());
  cy /= double(pairs.size());
  double mean_dist = 0;
  for (const auto& pp : pairs) {
    const Point2& p = use_a ? pp.a : pp.b;
    mean_dist += std::hypot(p.x - cx, p.y - cy);
  }
  mean_dist /= double(pairs.size());
  if (mean_dist <= 0) throw DegenerateError("all points coincide");
  const double s = std::sqrt(2.0) / mean_dist;
  Eigen::Matrix3d t;
  t << s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1;
  return t;
}

bool any_collinear_triple(std::span<const PointPair> pairs, bool use_a) {
  const size_t n = pairs.size();
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      for (size_t k = j + 1; k < n; ++k) {
        const auto& P = use_a ? pairs[i].a : pairs[i].b;
        const auto& Q = use_a ? pairs[j].a : pairs[j].b;
        const auto& R = use_a ? pairs[k].a : pairs[k].b;
        if (collinear(P, Q, R)) return true;
      }
    }
  }
  return false;
}

}  // namespace

Homography dlt_homography(std::span<const PointPair> pairs) {
  const size_t n = pairs.size();
  if (n < 4) throw DegenerateError("homography estimation needs at least 4 pairs, got " + std::to_string(n));
  if (n == 4 && (any_collinear_triple(pairs, true) || any_collinear_triple(pairs, false))) {
    throw DegenerateError("degenerate configuration: three of the four points are collinear");
  }
  const Eigen::Matrix3d ta = normalizing_transform(pairs, true);
  const Eigen::Matrix3d tb = normalizing_transform(pairs, false);
  Eigen::MatrixXd A(2 * n, 9);
  for (size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d a = ta * Eigen::Vector3d(pairs[i].a.x, pairs[i].a.y, 1.0);
    const Eigen::Vector3d b = tb * Eigen::Vector3d(pairs[i].b.x, pairs[i].b.y, 1.0);
    const double x = a.x(), y = a.y(), u = b.x(), v = b.y();
    A.row(Eigen::Index(2 * i)) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
    A.row(Eigen::Index(2 * i + 1)) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const Eigen::VectorXd sv = svd.singularValues();
  // A minimal set has 8 nonzero singular values; a smaller rank means the
  // solution is not unique.
  if (sv.size() >= 8 && sv(7) <= 1e-10 * sv(0)) {
    throw DegenerateError("degenerate configuration: correspondence system is rank deficient");
  }
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Eigen::Matrix3d hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  const Eigen::Matrix3d m = tb.inverse() * hn * ta;
  if (std::abs(m.determinant()) <= 1e-12 * std::pow(m.norm(), 3)) {
    throw DegenerateError("degenerate configuration: estimated homography is singular");
  }
  return Homography(m);
}

double symmetric_transfer_error(const Homography& h, const Homography& h_inv, const PointPair& pair) {
  const auto fwd = h.try_apply(pair.a);
  const auto bwd = h_inv.try_apply(pair.b);
  if (!fwd || !bwd) return std::numeric_limits<double>::infinity();
  return 0.5 * (std::hypot(fwd->x - pair.b.x, fwd->y - pair.b.y) + std::hypot(bwd->x - pair.a.x, bwd->y - pair.a.y));
}

namespace {

int count_inliers(const Homography& h, std::span<const PointPair> pairs, double threshold,
                  std::vector<uint8_t>& mask) {
  Homography h_inv;
  try {
    h_inv = h.inverse();
  } catch (const DegenerateError&) {
    return -1;
  }
  mask.assign(pairs.size(), 0);
  int count = 0;
  for (size_t i = 0; i < pairs.size(); ++i) {
    if (symmetric_transfer_error(h, h_inv, pairs[i]) <= threshold) {
      mask[i] = 1;
      ++count;
    }
  }
  return count;
}

}  // namespace

RansacResult ransac_homography(std::span<const PointPair> pairs, const RansacOptions& options) {
  const size_t n = pairs.size();
  if (n < 4) throw NoModelError("RANSAC needs at least 4 matches, got " + std::to_string(n));
  if (options.max_iters < 1) throw ValueError("RANSAC max_iters must be >= 1");
  Rng rng(options.seed);
  RansacResult best;
  best.seed = options.seed;
  best.inlier_count = -1;
  std::vector<uint8_t> mask;
  int needed = options.max_iters;
  int iter = 0;
  while (iter < needed) {
    ++iter;
    size_t idx[4];
    for (int s = 0; s < 4; ++s) {
      bool fresh;
      do {
        idx[s] = static_cast<size_t>(uniform_index(rng, n));
        fresh = true;
        for (int t = 0; t < s; ++t) fresh = fresh && idx[t] != idx[s];
      } while (!fresh);
    }
    const PointPair sample[4] = {pairs[idx[0]], pairs[idx[1]], pairs[idx[2]], pairs[idx[3]]};
    Homography h;
    try {
      h = dlt_homography(sample);
    } catch (const DegenerateError&) {
      continue;
    }
    const int count = count_inliers(h, pairs, options.threshold_px, mask);
    if (count > best.inlier_count) {
      best.inlier_count = count;
      best.model = h;
      best.inliers = mask;
      const double w = double(count) / double(n);
      const double p_fail = 1.0 - std::pow(w, 4);
      if (p_fail <= 0.0) {
        needed = iter;
      } else if (p_fail < 1.0) {
        const double k = std::log(1.0 - options.confidence) / std::log(p_fail);
        if (std::isfinite(k)) needed = std::min(options.max_iters, std::max(iter, static_cast<int>(std::ceil(k))));
      }
    }
  }
  best.iterations = iter;
  if (best.inlier_count < 4) throw NoModelError("RANSAC found no model with at least 4 inliers");

  std::vector<PointPair> consensus;
  for (size_t i = 0; i < n; ++i) {
    if (best.inliers[i]) consensus.push_back(pairs[i]);
  }
  try {
    const Homography refit = dlt_homography(consensus);
    const int count = count_inliers(refit, pairs, options.threshold_px, mask);
    if (count >= best.inlier_count) {
      best.model = refit;
      best.inliers = mask;
      best.inlier_count = count;
    }
  } catch (const DegenerateError&) {
    // keep the minimal-sample model
  }
  return best;
}

Homography parse_homography(const std::string& text) {
  std::istringstream is(text);
  Mat3 m{};
  for (int i = 0; i < 9; ++i) {
    if (!(is >> m[static_cast<size_t>(i)])) throw DataError("homography text needs 9 numbers, found " + std::to_string(i));
  }
  std::string rest;
  if (is >> rest) throw DataError("unexpected trailing token in homography text: " + rest);
  return Homography::from_mat3(m);
}

Homography read_homography(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open homography file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_homography(ss.str());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::string format_homography(const Homography& h) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) os << (c ? " " : "") << h.matrix()(r, c);
    os << '\n';
  }
  return os.str();
}

void write_homography(const std::filesystem::path& path, const Homography& h) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write homography file " + path.string());
  out << format_homography(h);
}

}  // namespace reffeat
