#pragma once

// Independent reference computations. None of these call the library code
// they are compared against.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <span>
#include <utility>
#include <vector>

#include "reffeat/geometry.hpp"
#include "reffeat/matching.hpp"
#include "reffeat/tensor.hpp"

namespace reffeat::testing {

inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, const std::vector<float>& bias, int stride, int pad) {
  const int64_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Co = w.dim(0), k = w.dim(2);
  const int64_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  Tensor out({B, Co, Ho, Wo});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t o = 0; o < Co; ++o)
      for (int64_t oy = 0; oy < Ho; ++oy)
        for (int64_t ox = 0; ox < Wo; ++ox) {
          double acc = bias.empty() ? 0.0 : bias[static_cast<size_t>(o)];
          for (int64_t c = 0; c < Ci; ++c)
            for (int64_t ky = 0; ky < k; ++ky)
              for (int64_t kx = 0; kx < k; ++kx) {
                const int64_t iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += double(x.at(b, c, iy, ix)) * double(w.at(o, c, ky, kx));
              }
          out.at(b, o, oy, ox) = static_cast<float>(acc);
        }
  return out;
}

// Quarter turn counter-clockwise on screen (y down) of a square map:
// out[y][x] = in[x][W-1-y], applied q times.
inline Tensor quarter_turn(const Tensor& in, int q) {
  Tensor cur = in;
  const int64_t B = in.dim(0), C = in.dim(1), S = in.dim(2);
  for (int t = 0; t < ((q % 4) + 4) % 4; ++t) {
    Tensor next(cur.shape());
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < S; ++y)
          for (int64_t x = 0; x < S; ++x) next.at(b, c, y, x) = cur.at(b, c, x, S - 1 - y);
    cur = std::move(next);
  }
  return cur;
}

// out[f*n + r] = in[f*n + (r - p) mod n]
inline Tensor cyclic_shift(const Tensor& in, int n, int p) {
  Tensor out(in.shape());
  const int64_t B = in.dim(0), C = in.dim(1), HW = in.dim(2) * in.dim(3);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const int64_t f = c / n, r = c % n;
      const int64_t src = f * n + ((r - p) % n + n) % n;
      for (int64_t i = 0; i < HW; ++i) out[(b * C + c) * HW + i] = in[(b * C + src) * HW + i];
    }
  return out;
}

// Mean precision at the rank of every positive, ranks by descending
// similarity (stable on input order).
inline double exact_average_precision(const std::vector<double>& sims, const std::vector<uint8_t>& positive) {
  std::vector<size_t> order(sims.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return sims[a] > sims[b]; });
  double sum = 0.0;
  int hits = 0;
  for (size_t r = 0; r < order.size(); ++r) {
    if (positive[order[r]]) {
      ++hits;
      sum += double(hits) / double(r + 1);
    }
  }
  return hits == 0 ? 0.0 : sum / hits;
}

inline double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += double(a[i]) * double(b[i]);
  return s;
}

// Exhaustive mutual nearest neighbours with first-maximum tie breaking.
inline std::set<std::pair<size_t, size_t>> brute_mutual_nn(const DescriptorSet& a, const DescriptorSet& b) {
  std::set<std::pair<size_t, size_t>> out;
  if (a.size() == 0 || b.size() == 0) return out;
  auto best_b = [&](size_t i) {
    size_t arg = 0;
    double best = -1e300;
    for (size_t j = 0; j < b.size(); ++j) {
      const double s = dot(a.row(i), b.row(j));
      if (s > best) best = s, arg = j;
    }
    return arg;
  };
  auto best_a = [&](size_t j) {
    size_t arg = 0;
    double best = -1e300;
    for (size_t i = 0; i < a.size(); ++i) {
      const double s = dot(a.row(i), b.row(j));
      if (s > best) best = s, arg = i;
    }
    return arg;
  };
  for (size_t i = 0; i < a.size(); ++i) {
    const size_t j = best_b(i);
    if (best_a(j) == i) out.insert({i, j});
  }
  return out;
}

inline double brute_mma(const MatchSet& m, const Eigen::Matrix3d& gt, double thr) {
  if (m.matches.empty()) return 0.0;
  int64_t good = 0;
  for (const auto& c : m.matches) {
    const Eigen::Vector3d p = gt * Eigen::Vector3d(c.xa, c.ya, 1.0);
    const double dx = p.x() / p.z() - c.xb, dy = p.y() / p.z() - c.yb;
    if (std::sqrt(dx * dx + dy * dy) <= thr) ++good;
  }
  return double(good) / double(m.matches.size());
}

inline Eigen::Matrix3d adjugate_inverse(const Eigen::Matrix3d& m) {
  Eigen::Matrix3d adj;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      const int r0 = (c + 1) % 3, r1 = (c + 2) % 3, c0 = (r + 1) % 3, c1 = (r + 2) % 3;
      adj(r, c) = m(r0, c0) * m(r1, c1) - m(r0, c1) * m(r1, c0);
    }
  const double det = m(0, 0) * adj(0, 0) + m(0, 1) * adj(1, 0) + m(0, 2) * adj(2, 0);
  return adj / det;
}

}  // namespace reffeat::testing
