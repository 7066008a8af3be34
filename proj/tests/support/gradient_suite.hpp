#pragma once

// Finite-difference checks of every differentiable op and the three
// training losses, shared by the unit tests and the acceptance run.

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "gradcheck.hpp"
#include "reffeat/autodiff.hpp"
#include "reffeat/geometry.hpp"
#include "reffeat/ops.hpp"
#include "reffeat/steerable.hpp"
#include "reffeat/training.hpp"

namespace reffeat::testing {

inline Tensor rand_tensor(const Shape& shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  return random_uniform(shape, rng, lo, hi);
}

// Values at least `gap` away from zero, for ops with a kink at 0.
inline Tensor away_from_zero(const Shape& shape, uint64_t seed, double gap) {
  Tensor t = rand_tensor(shape, seed);
  for (float& v : t.data()) v = static_cast<float>(v >= 0 ? v + gap : v - gap);
  return t;
}

// Blocks of n channels whose values per pixel are pairwise at least 0.05
// apart, so the block max cannot switch under a 1e-3 perturbation.
inline Tensor separated_blocks(const Shape& shape, int n, uint64_t seed) {
  Tensor t(shape);
  Rng rng(seed);
  const int64_t B = shape[0], C = shape[1], HW = shape[2] * shape[3];
  for (int64_t b = 0; b < B; ++b)
    for (int64_t f = 0; f < C / n; ++f)
      for (int64_t i = 0; i < HW; ++i) {
        std::vector<int> order(static_cast<size_t>(n));
        for (int r = 0; r < n; ++r) order[static_cast<size_t>(r)] = r;
        for (int r = n - 1; r > 0; --r) std::swap(order[static_cast<size_t>(r)], order[uniform_index(rng, uint64_t(r) + 1)]);
        for (int r = 0; r < n; ++r) {
          t[((b * C) + f * n + r) * HW + i] = static_cast<float>(0.1 * order[static_cast<size_t>(r)] + 0.03 * uniform01(rng));
        }
      }
  return t;
}

inline Tensor unit_channels(const Shape& shape, uint64_t seed) {
  Tensor t = rand_tensor(shape, seed);
  const int64_t C = shape[1], HW = shape[2] * shape[3];
  for (int64_t i = 0; i < HW; ++i) {
    double n = 0;
    for (int64_t c = 0; c < C; ++c) n += double(t[c * HW + i]) * t[c * HW + i];
    n = std::sqrt(n);
    for (int64_t c = 0; c < C; ++c) t[c * HW + i] = static_cast<float>(t[c * HW + i] / n);
  }
  return t;
}

// elementwise is empty for the losses, which are checked along random
// directions only.
struct NamedCheck {
  std::string name;
  GradCheck directional;
  GradCheck elementwise;
};

inline std::vector<NamedCheck> op_gradient_checks() {
  std::vector<NamedCheck> out;
  auto add = [&](std::string name, const Builder& b, std::vector<Tensor> in, uint64_t seed) {
    Rng rng(seed);
    const Tensor w = random_uniform(forward_value(b, in).shape(), rng);
    const Builder weighted = [&b, w](Tape& t, const std::vector<Var>& v) {
      return ad::sum(ad::mul(b(t, v), t.constant(w)));
    };
    out.push_back({std::move(name), check_loss(weighted, in, seed + 1, 4), check_op(b, in, seed)});
  };

  add("conv2d stride 1 pad 1",
      [](Tape&, const std::vector<Var>& v) { return ad::conv2d(v[0], v[1], v[2], 1, 1); },
      {rand_tensor({1, 2, 5, 5}, 1), rand_tensor({3, 2, 3, 3}, 2), rand_tensor({3}, 3)}, 10);
  add("conv2d stride 2 pad 0",
      [](Tape&, const std::vector<Var>& v) { return ad::conv2d(v[0], v[1], std::nullopt, 2, 0); },
      {rand_tensor({2, 2, 7, 7}, 4), rand_tensor({2, 2, 3, 3}, 5)}, 11);

  for (int group : {1, 2}) {
    for (bool training : {true, false}) {
      const int64_t C = 4;
      add("batchnorm group " + std::to_string(group) + (training ? " training" : " inference"),
          [=](Tape&, const std::vector<Var>& v) {
            ad::BatchNormState state{std::vector<float>(size_t(C / group), 0.1f),
                                     std::vector<float>(size_t(C / group), 0.8f)};
            return ad::batchnorm(v[0], v[1], v[2], group, state, training, 0.1f, 1e-5f);
          },
          {rand_tensor({2, C, 3, 3}, 20 + group), rand_tensor({C / group}, 30, 0.5, 1.5), rand_tensor({C / group}, 31)},
          40);
    }
  }

  add("relu", [](Tape&, const std::vector<Var>& v) { return ad::relu(v[0]); }, {away_from_zero({1, 2, 3, 3}, 50, 0.05)},
      51);
  add("softplus", [](Tape&, const std::vector<Var>& v) { return ad::softplus(v[0]); },
      {rand_tensor({1, 2, 3, 3}, 52, -3, 3)}, 53);
  add("softmax_channel", [](Tape&, const std::vector<Var>& v) { return ad::softmax_channel(v[0]); },
      {rand_tensor({2, 3, 3, 3}, 54, -2, 2)}, 55);
  add("l2_normalize_channel", [](Tape&, const std::vector<Var>& v) { return ad::l2_normalize_channel(v[0]); },
      {rand_tensor({1, 4, 3, 3}, 56)}, 57);
  add("squash", [](Tape&, const std::vector<Var>& v) { return ad::squash(v[0]); }, {rand_tensor({1, 1, 4, 4}, 58, 0.1, 3)},
      59);
  add("group_pool C4", [](Tape&, const std::vector<Var>& v) { return ad::group_pool(v[0], 4); },
      {separated_blocks({1, 8, 3, 3}, 4, 60)}, 61);
  add("shift_channel_blocks", [](Tape&, const std::vector<Var>& v) { return ad::shift_channel_blocks(v[0], 4, 3); },
      {rand_tensor({1, 8, 2, 2}, 62)}, 63);
  {
    const Mat3 map = Homography::translation(0.4, -0.3).after(rotation_homography(20.0, 6, 6)).to_mat3();
    auto plan = std::make_shared<const ops::BilinearPlan>(ops::make_warp_plan(map, 6, 6, 6, 6));
    add("resample", [plan](Tape&, const std::vector<Var>& v) { return ad::resample(v[0], plan); },
        {rand_tensor({1, 2, 6, 6}, 64)}, 65);
  }
  add("rotate_bilinear 30", [](Tape&, const std::vector<Var>& v) { return ad::rotate_bilinear(v[0], 30.0); },
      {rand_tensor({1, 1, 7, 7}, 66)}, 67);
  add("repeat_interleave", [](Tape&, const std::vector<Var>& v) { return ad::repeat_interleave(v[0], 4); },
      {rand_tensor({3}, 68)}, 69);
  add("select_channel", [](Tape&, const std::vector<Var>& v) { return ad::select_channel(v[0], 1); },
      {rand_tensor({2, 3, 2, 2}, 70)}, 71);
  add("select_batch", [](Tape&, const std::vector<Var>& v) { return ad::select_batch(v[0], 1); },
      {rand_tensor({2, 2, 2, 2}, 72)}, 73);
  add("concat_batch", [](Tape&, const std::vector<Var>& v) { return ad::concat_batch({v[0], v[1]}); },
      {rand_tensor({1, 2, 2, 2}, 74), rand_tensor({2, 2, 2, 2}, 75)}, 76);
  add("add", [](Tape&, const std::vector<Var>& v) { return ad::add(v[0], v[1]); },
      {rand_tensor({1, 2, 2, 2}, 77), rand_tensor({1, 2, 2, 2}, 78)}, 79);
  add("mul", [](Tape&, const std::vector<Var>& v) { return ad::mul(v[0], v[1]); },
      {rand_tensor({1, 2, 2, 2}, 80), rand_tensor({1, 2, 2, 2}, 81)}, 82);
  add("mul with shared operand", [](Tape&, const std::vector<Var>& v) { return ad::mul(v[0], v[0]); },
      {rand_tensor({1, 1, 3, 3}, 83)}, 84);
  add("scale", [](Tape&, const std::vector<Var>& v) { return ad::scale(v[0], -0.7); }, {rand_tensor({4}, 85)}, 86);
  add("sum", [](Tape&, const std::vector<Var>& v) { return ad::sum(v[0]); }, {rand_tensor({1, 2, 3, 3}, 87)}, 88);
  add("mean", [](Tape&, const std::vector<Var>& v) { return ad::mean(v[0]); }, {rand_tensor({1, 2, 3, 3}, 89)}, 90);
  add("weighted_sum",
      [](Tape&, const std::vector<Var>& v) {
        return ad::weighted_sum({ad::sum(v[0]), ad::mean(v[1])}, {0.3, 2.0});
      },
      {rand_tensor({2, 2}, 91), rand_tensor({3}, 92)}, 93);

  struct ExpandCase {
    std::string name;
    FieldType in, out;
  };
  const std::vector<ExpandCase> cases{
      {"expand_kernel C4 trivial->regular", {GroupSpec(4), FieldKind::trivial, 2}, {GroupSpec(4), FieldKind::regular, 2}},
      {"expand_kernel C4 regular->regular", {GroupSpec(4), FieldKind::regular, 1}, {GroupSpec(4), FieldKind::regular, 2}},
      {"expand_kernel C8 regular->regular", {GroupSpec(8), FieldKind::regular, 1}, {GroupSpec(8), FieldKind::regular, 1}},
  };
  uint64_t seed = 100;
  for (const auto& c : cases) {
    auto expansion = std::make_shared<const KernelExpansion>(c.in, c.out, 3);
    add(c.name, [expansion](Tape&, const std::vector<Var>& v) { return ad::expand_kernel(v[0], expansion); },
        {rand_tensor(expansion->base_shape(), seed)}, seed + 1);
    seed += 2;
  }
  return out;
}

// Bin index of every similarity between query rows of a and all rows of
// b; a direction is rejected when any index differs between the two ends.
inline bool ap_crosses_bin(const Tensor& da_p, const Tensor& db_p, const Tensor& da_m, const Tensor& db_m,
                           const std::vector<QueryPixel>& queries, int bins) {
  const int64_t D = da_p.dim(1), HW = da_p.dim(2) * da_p.dim(3), W = da_p.dim(3), HWb = db_p.dim(2) * db_p.dim(3);
  const double delta = 2.0 / (bins - 1);
  for (const auto& q : queries) {
    const int64_t pix = q.y * W + q.x;
    for (int64_t j = 0; j < HWb; ++j) {
      double sp = 0, sm = 0;
      for (int64_t c = 0; c < D; ++c) {
        sp += double(da_p[c * HW + pix]) * db_p[c * HWb + j];
        sm += double(da_m[c * HW + pix]) * db_m[c * HWb + j];
      }
      if (std::floor((1.0 - sp) / delta) != std::floor((1.0 - sm) / delta)) return true;
    }
  }
  return false;
}

inline std::vector<NamedCheck> loss_gradient_checks() {
  std::vector<NamedCheck> out;
  const int directions = 6;

  {
    LossOptions opt;
    opt.cosim_window = 8;
    opt.cosim_stride = 4;
    const Homography gt = Homography::translation(0.6, -0.4).after(rotation_homography(10.0, 16, 16));
    out.push_back({"repeatability cosine loss",
                   check_loss([=](Tape&, const std::vector<Var>& v) { return loss_repeatability_cosim(v[0], v[1], gt, opt); },
                              {rand_tensor({1, 1, 16, 16}, 200, 0.1, 1.0), rand_tensor({1, 1, 16, 16}, 201, 0.1, 1.0)}, 202,
                              directions),
                   {}});
  }
  {
    const int win = 4, stride = 4;
    auto argmaxes = [=](const Tensor& r) {
      std::vector<int64_t> idx;
      for (int64_t y0 = 0; y0 + win <= r.dim(2); y0 += stride)
        for (int64_t x0 = 0; x0 + win <= r.dim(3); x0 += stride) {
          int64_t best = -1;
          for (int64_t y = y0; y < y0 + win; ++y)
            for (int64_t x = x0; x < x0 + win; ++x) {
              const int64_t i = y * r.dim(3) + x;
              if (best < 0 || r[i] > r[best]) best = i;
            }
          idx.push_back(best);
        }
      return idx;
    };
    out.push_back({"peakiness loss",
                   check_loss([=](Tape&, const std::vector<Var>& v) { return loss_peakiness(v[0], win, stride); },
                              {rand_tensor({1, 1, 8, 8}, 210, 0.0, 1.0)}, 211, directions, 1e-3,
                              [=](const std::vector<Tensor>& p, const std::vector<Tensor>& m) {
                                return argmaxes(p[0]) != argmaxes(m[0]);
                              }),
                   {}});
  }
  for (bool reliability : {false, true}) {
    LossOptions opt;
    opt.ap_positive_radius = 1.0;
    opt.ap_negative_radius = 2.5;
    opt.ap_reliability = reliability;
    const Homography gt = Homography::translation(1.0, 0.5);
    const std::vector<QueryPixel> queries{{1, 1}, {3, 2}};
    Builder build = [=](Tape&, const std::vector<Var>& v) {
      return reliability ? loss_average_precision(v[0], v[1], gt, queries, opt, v[2])
                         : loss_average_precision(v[0], v[1], gt, queries, opt);
    };
    std::vector<Tensor> in{unit_channels({1, 4, 6, 6}, 220), unit_channels({1, 4, 6, 6}, 221)};
    if (reliability) in.push_back(rand_tensor({1, 1, 6, 6}, 222, 0.2, 0.9));
    out.push_back({reliability ? "average precision loss with reliability" : "average precision loss",
                   check_loss(build, in, 223, directions, 5e-4,
                              [=](const std::vector<Tensor>& p, const std::vector<Tensor>& m) {
                                return ap_crosses_bin(p[0], p[1], m[0], m[1], queries, opt.ap_bins);
                              },
                              1e-6, true),
                   {}});
  }
  return out;
}

}  // namespace reffeat::testing
