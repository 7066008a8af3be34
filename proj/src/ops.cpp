#include "reffeat/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "reffeat/error.hpp"

namespace reffeat::ops {
namespace {

constexpr int kBlock = 8;

struct ConvGeom {
  int64_t batch, in_c, in_h, in_w, out_c, k, out_h, out_w;
  int stride, pad;
};

ConvGeom conv_geometry(const Shape& input, const Shape& weight, int stride, int padding) {
  if (input.size() != 4) throw ShapeError("conv2d expects a (B,C,H,W) input, got " + shape_to_string(input));
  if (weight.size() != 4) throw ShapeError("conv2d expects a (Co,Ci,k,k) weight, got " + shape_to_string(weight));
  if (input[1] != weight[1]) {
    throw ShapeError("conv2d channel mismatch: input " + shape_to_string(input) + " vs weight " +
                     shape_to_string(weight));
  }
  if (weight[2] != weight[3] || weight[2] % 2 == 0) {
    throw ShapeError("conv2d needs a square odd kernel, got weight " + shape_to_string(weight));
  }
  if (stride < 1) throw ValueError("conv2d stride must be >= 1");
  if (padding < 0) throw ValueError("conv2d padding must be >= 0");
  ConvGeom g{input[0], input[1], input[2], input[3], weight[0], weight[2], 0, 0, stride, padding};
  g.out_h = conv_output_size(g.in_h, g.k, stride, padding);
  g.out_w = conv_output_size(g.in_w, g.k, stride, padding);
  if (g.out_h <= 0 || g.out_w <= 0) {
    throw ShapeError("conv2d input " + shape_to_string(input) + " is smaller than kernel " + shape_to_string(weight));
  }
  return g;
}

// Output columns xo with 0 <= xo*stride + kx - pad < in_w.
inline void valid_columns(const ConvGeom& g, int64_t kx, int64_t& lo, int64_t& hi) {
  const int64_t shift = kx - g.pad;
  lo = shift >= 0 ? 0 : (-shift + g.stride - 1) / g.stride;
  const int64_t last = g.in_w - 1 - shift;
  hi = last < 0 ? 0 : std::min<int64_t>(g.out_w, last / g.stride + 1);
}

// Dot product with double accumulation over independent lanes.
inline double dot_lanes(const float* a, const float* b, int64_t n, int stride_b) {
  double lanes[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int64_t i = 0;
  if (stride_b == 1) {
    for (; i + 8 <= n; i += 8) {
      for (int l = 0; l < 8; ++l) lanes[l] += double(a[i + l]) * double(b[i + l]);
    }
  }
  double s = 0.0;
  for (; i < n; ++i) s += double(a[i]) * double(b[i * stride_b]);
  for (double v : lanes) s += v;
  return s;
}

}  // namespace

int64_t conv_output_size(int64_t size, int64_t kernel, int stride, int padding) {
  return (size + 2 * padding - kernel) / stride + 1;
}

Tensor conv2d(const Tensor& input, const Tensor& weight, std::span<const float> bias, int stride, int padding) {
  const ConvGeom g = conv_geometry(input.shape(), weight.shape(), stride, padding);
  if (!bias.empty() && static_cast<int64_t>(bias.size()) != g.out_c) {
    throw ShapeError("conv2d bias has " + std::to_string(bias.size()) + " entries, expected " +
                     std::to_string(g.out_c));
  }
  Tensor out({g.batch, g.out_c, g.out_h, g.out_w});
  std::vector<double> acc(static_cast<size_t>(kBlock * g.out_w));
  const int64_t kk = g.k * g.k;
  for (int64_t b = 0; b < g.batch; ++b) {
    for (int64_t co0 = 0; co0 < g.out_c; co0 += kBlock) {
      const int64_t nb = std::min<int64_t>(kBlock, g.out_c - co0);
      for (int64_t yo = 0; yo < g.out_h; ++yo) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int64_t ci = 0; ci < g.in_c; ++ci) {
          for (int64_t ky = 0; ky < g.k; ++ky) {
            const int64_t yi = yo * g.stride + ky - g.pad;
            if (yi < 0 || yi >= g.in_h) continue;
            const float* row = input.ptr() + ((b * g.in_c + ci) * g.in_h + yi) * g.in_w;
            for (int64_t kx = 0; kx < g.k; ++kx) {
              std::array<double, kBlock> w{};
              for (int64_t j = 0; j < nb; ++j) {
                w[j] = weight[((co0 + j) * g.in_c + ci) * kk + ky * g.k + kx];
              }
              int64_t lo, hi;
              valid_columns(g, kx, lo, hi);
              const float* src = row + kx - g.pad;
              if (g.stride == 1) {
                for (int j = 0; j < kBlock; ++j) {
                  double* a = acc.data() + j * g.out_w;
                  const double wj = w[j];
                  for (int64_t xo = lo; xo < hi; ++xo) a[xo] += wj * double(src[xo]);
                }
              } else {
                for (int j = 0; j < kBlock; ++j) {
                  double* a = acc.data() + j * g.out_w;
                  const double wj = w[j];
                  for (int64_t xo = lo; xo < hi; ++xo) a[xo] += wj * double(src[xo * g.stride]);
                }
              }
            }
          }
        }
        for (int64_t j = 0; j < nb; ++j) {
          const double bj = bias.empty() ? 0.0 : double(bias[co0 + j]);
          float* dst = out.ptr() + ((b * g.out_c + co0 + j) * g.out_h + yo) * g.out_w;
          const double* a = acc.data() + j * g.out_w;
          for (int64_t xo = 0; xo < g.out_w; ++xo) dst[xo] = static_cast<float>(a[xo] + bj);
        }
      }
    }
  }
  return out;
}

Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& weight, const Shape& input_shape, int stride,
                         int padding) {
  const ConvGeom g = conv_geometry(input_shape, weight.shape(), stride, padding);
  if (grad_out.shape() != Shape{g.batch, g.out_c, g.out_h, g.out_w}) {
    throw ShapeError("conv2d_grad_input: gradient shape " + shape_to_string(grad_out.shape()) + " mismatch");
  }
  Tensor gin(input_shape);
  std::vector<double> acc(static_cast<size_t>(kBlock * g.in_w));
  const int64_t kk = g.k * g.k;
  for (int64_t b = 0; b < g.batch; ++b) {
    for (int64_t ci0 = 0; ci0 < g.in_c; ci0 += kBlock) {
      const int64_t nb = std::min<int64_t>(kBlock, g.in_c - ci0);
      for (int64_t yi = 0; yi < g.in_h; ++yi) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int64_t co = 0; co < g.out_c; ++co) {
          for (int64_t ky = 0; ky < g.k; ++ky) {
            const int64_t t = yi - ky + g.pad;
            if (t < 0 || t % g.stride != 0) continue;
            const int64_t yo = t / g.stride;
            if (yo >= g.out_h) continue;
            const float* grow = grad_out.ptr() + ((b * g.out_c + co) * g.out_h + yo) * g.out_w;
            for (int64_t kx = 0; kx < g.k; ++kx) {
              std::array<double, kBlock> w{};
              for (int64_t j = 0; j < nb; ++j) w[j] = weight[(co * g.in_c + ci0 + j) * kk + ky * g.k + kx];
              int64_t lo, hi;
              valid_columns(g, kx, lo, hi);
              const int64_t shift = kx - g.pad;
              for (int j = 0; j < kBlock; ++j) {
                double* a = acc.data() + j * g.in_w + shift;
                const double wj = w[j];
                if (g.stride == 1) {
                  for (int64_t xo = lo; xo < hi; ++xo) a[xo] += wj * double(grow[xo]);
                } else {
                  for (int64_t xo = lo; xo < hi; ++xo) a[xo * g.stride] += wj * double(grow[xo]);
                }
              }
            }
          }
        }
        for (int64_t j = 0; j < nb; ++j) {
          float* dst = gin.ptr() + ((b * g.in_c + ci0 + j) * g.in_h + yi) * g.in_w;
          const double* a = acc.data() + j * g.in_w;
          for (int64_t x = 0; x < g.in_w; ++x) dst[x] = static_cast<float>(a[x]);
        }
      }
    }
  }
  return gin;
}

Tensor conv2d_grad_weight(const Tensor& grad_out, const Tensor& input, const Shape& weight_shape, int stride,
                          int padding) {
  const ConvGeom g = conv_geometry(input.shape(), weight_shape, stride, padding);
  if (grad_out.shape() != Shape{g.batch, g.out_c, g.out_h, g.out_w}) {
    throw ShapeError("conv2d_grad_weight: gradient shape " + shape_to_string(grad_out.shape()) + " mismatch");
  }
  const int64_t kk = g.k * g.k;
  std::vector<double> acc(static_cast<size_t>(g.out_c * g.in_c * kk), 0.0);
  for (int64_t b = 0; b < g.batch; ++b) {
    for (int64_t co = 0; co < g.out_c; ++co) {
      for (int64_t yo = 0; yo < g.out_h; ++yo) {
        const float* grow = grad_out.ptr() + ((b * g.out_c + co) * g.out_h + yo) * g.out_w;
        for (int64_t ci = 0; ci < g.in_c; ++ci) {
          double* a = acc.data() + (co * g.in_c + ci) * kk;
          for (int64_t ky = 0; ky < g.k; ++ky) {
            const int64_t yi = yo * g.stride + ky - g.pad;
            if (yi < 0 || yi >= g.in_h) continue;
            const float* row = input.ptr() + ((b * g.in_c + ci) * g.in_h + yi) * g.in_w;
            for (int64_t kx = 0; kx < g.k; ++kx) {
              int64_t lo, hi;
              valid_columns(g, kx, lo, hi);
              if (hi <= lo) continue;
              a[ky * g.k + kx] += dot_lanes(grow + lo, row + lo * g.stride + kx - g.pad, hi - lo, g.stride);
            }
          }
        }
      }
    }
  }
  Tensor gw(weight_shape);
  for (size_t i = 0; i < acc.size(); ++i) gw[static_cast<int64_t>(i)] = static_cast<float>(acc[i]);
  return gw;
}

std::vector<float> conv2d_grad_bias(const Tensor& grad_out) {
  require_4d(grad_out, "conv2d_grad_bias");
  const int64_t B = grad_out.dim(0), C = grad_out.dim(1), HW = grad_out.dim(2) * grad_out.dim(3);
  std::vector<float> gb(static_cast<size_t>(C));
  for (int64_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (int64_t b = 0; b < B; ++b) {
      const float* p = grad_out.ptr() + (b * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) s += p[i];
    }
    gb[static_cast<size_t>(c)] = static_cast<float>(s);
  }
  return gb;
}

Tensor batchnorm_infer(const Tensor& input, std::span<const float> mean, std::span<const float> var,
                       std::span<const float> gamma, std::span<const float> beta, float eps) {
  require_4d(input, "batchnorm_infer");
  const int64_t B = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  const auto c_size = static_cast<size_t>(C);
  if (mean.size() != c_size || var.size() != c_size || gamma.size() != c_size || beta.size() != c_size) {
    throw ShapeError("batchnorm_infer parameter vectors must have " + std::to_string(C) + " entries");
  }
  if (eps < 0.0f) throw ValueError("batchnorm eps must be non-negative");
  Tensor out(input.shape());
  for (int64_t c = 0; c < C; ++c) {
    if (var[c] < 0.0f) throw ValueError("batchnorm variance is negative at channel " + std::to_string(c));
    const double denom = std::sqrt(double(var[c]) + double(eps));
    const double scale = denom > 0.0 ? double(gamma[c]) / denom : 0.0;
    for (int64_t b = 0; b < B; ++b) {
      const float* src = input.ptr() + (b * C + c) * HW;
      float* dst = out.ptr() + (b * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) {
        dst[i] = static_cast<float>((double(src[i]) - double(mean[c])) * scale + double(beta[c]));
      }
    }
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
  return out;
}

Tensor softplus(const Tensor& x) {
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double v = x[i];
    // log1p(exp(v)) without overflow
    out[i] = static_cast<float>(v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)));
  }
  return out;
}

Tensor softmax_channel(const Tensor& x) {
  require_4d(x, "softmax_channel");
  const int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor out(x.shape());
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t i = 0; i < HW; ++i) {
      double mx = -INFINITY;
      for (int64_t c = 0; c < C; ++c) mx = std::max(mx, double(x[(b * C + c) * HW + i]));
      double sum = 0.0;
      for (int64_t c = 0; c < C; ++c) sum += std::exp(double(x[(b * C + c) * HW + i]) - mx);
      for (int64_t c = 0; c < C; ++c) {
        out[(b * C + c) * HW + i] = static_cast<float>(std::exp(double(x[(b * C + c) * HW + i]) - mx) / sum);
      }
    }
  }
  return out;
}

Tensor l2_normalize_channel(const Tensor& x, std::vector<uint8_t>* zero_mask) {
  require_4d(x, "l2_normalize_channel");
  const int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor out(x.shape());
  if (zero_mask) zero_mask->assign(static_cast<size_t>(B * HW), 0);
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t i = 0; i < HW; ++i) {
      double ss = 0.0;
      for (int64_t c = 0; c < C; ++c) {
        const double v = x[(b * C + c) * HW + i];
        ss += v * v;
      }
      if (ss == 0.0) {
        if (zero_mask) (*zero_mask)[static_cast<size_t>(b * HW + i)] = 1;
        continue;
      }
      const double inv = 1.0 / std::sqrt(ss);
      for (int64_t c = 0; c < C; ++c) {
        out[(b * C + c) * HW + i] = static_cast<float>(double(x[(b * C + c) * HW + i]) * inv);
      }
    }
  }
  return out;
}

BilinearPlan make_warp_plan(const Mat3& forward_map, int64_t in_h, int64_t in_w, int64_t out_h, int64_t out_w) {
  const Mat3 inv = mat3_inverse(forward_map);
  BilinearPlan plan{in_h, in_w, out_h, out_w, {}, {}};
  const auto n = static_cast<size_t>(4 * out_h * out_w);
  plan.index.assign(n, -1);
  plan.weight.assign(n, 0.0f);
  for (int64_t y = 0; y < out_h; ++y) {
    for (int64_t x = 0; x < out_w; ++x) {
      const size_t o = static_cast<size_t>(4 * (y * out_w + x));
      const double w = inv[6] * x + inv[7] * y + inv[8];
      if (std::abs(w) < 1e-12) continue;
      const double sx = (inv[0] * x + inv[1] * y + inv[2]) / w;
      const double sy = (inv[3] * x + inv[4] * y + inv[5]) / w;
      if (!std::isfinite(sx) || !std::isfinite(sy)) continue;
      if (sx <= -1.0 || sy <= -1.0 || sx >= double(in_w) || sy >= double(in_h)) continue;
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const double fx = sx - fx0, fy = sy - fy0;
      const auto x0 = static_cast<int64_t>(fx0), y0 = static_cast<int64_t>(fy0);
      const double wts[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      const int64_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const int64_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
      for (int t = 0; t < 4; ++t) {
        if (wts[t] == 0.0 || xs[t] < 0 || ys[t] < 0 || xs[t] >= in_w || ys[t] >= in_h) continue;
        plan.index[o + t] = static_cast<int32_t>(ys[t] * in_w + xs[t]);
        plan.weight[o + t] = static_cast<float>(wts[t]);
      }
    }
  }
  return plan;
}

Tensor apply_plan(const Tensor& input, const BilinearPlan& plan) {
  require_4d(input, "apply_plan");
  if (input.dim(2) != plan.in_h || input.dim(3) != plan.in_w) {
    throw ShapeError("resampling plan built for a different input size than " + shape_to_string(input.shape()));
  }
  const int64_t planes = input.dim(0) * input.dim(1);
  const int64_t in_hw = plan.in_h * plan.in_w, out_hw = plan.out_h * plan.out_w;
  Tensor out({input.dim(0), input.dim(1), plan.out_h, plan.out_w});
  for (int64_t p = 0; p < planes; ++p) {
    const float* src = input.ptr() + p * in_hw;
    float* dst = out.ptr() + p * out_hw;
    for (int64_t i = 0; i < out_hw; ++i) {
      double s = 0.0;
      for (int t = 0; t < 4; ++t) {
        const int32_t idx = plan.index[static_cast<size_t>(4 * i + t)];
        if (idx >= 0) s += double(plan.weight[static_cast<size_t>(4 * i + t)]) * double(src[idx]);
      }
      dst[i] = static_cast<float>(s);
    }
  }
  return out;
}

Tensor apply_plan_adjoint(const Tensor& grad_out, const BilinearPlan& plan, const Shape& input_shape) {
  require_4d(grad_out, "apply_plan_adjoint");
  const int64_t planes = grad_out.dim(0) * grad_out.dim(1);
  const int64_t in_hw = plan.in_h * plan.in_w, out_hw = plan.out_h * plan.out_w;
  std::vector<double> acc(static_cast<size_t>(in_hw));
  Tensor gin(input_shape);
  for (int64_t p = 0; p < planes; ++p) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const float* g = grad_out.ptr() + p * out_hw;
    for (int64_t i = 0; i < out_hw; ++i) {
      for (int t = 0; t < 4; ++t) {
        const int32_t idx = plan.index[static_cast<size_t>(4 * i + t)];
        if (idx >= 0) acc[static_cast<size_t>(idx)] += double(plan.weight[static_cast<size_t>(4 * i + t)]) * g[i];
      }
    }
    float* dst = gin.ptr() + p * in_hw;
    for (int64_t i = 0; i < in_hw; ++i) dst[i] = static_cast<float>(acc[static_cast<size_t>(i)]);
  }
  return gin;
}

Tensor rotate_bilinear(const Tensor& input, double angle_deg) {
  require_4d(input, "rotate_bilinear");
  const int64_t h = input.dim(2), w = input.dim(3);
  const Mat3 rot = rotation_about_center(angle_deg, double(w), double(h));
  return apply_plan(input, make_warp_plan(rot, h, w, h, w));
}

Tensor warp_homography(const Tensor& input, const Mat3& forward_map, int64_t out_h, int64_t out_w) {
  require_4d(input, "warp_homography");
  return apply_plan(input, make_warp_plan(forward_map, input.dim(2), input.dim(3), out_h, out_w));
}

Tensor resize_bilinear(const Tensor& input, int64_t out_h, int64_t out_w) {
  require_4d(input, "resize_bilinear");
  const double sx = double(out_w) / double(input.dim(3));
  const double sy = double(out_h) / double(input.dim(2));
  const Mat3 scale{sx, 0, 0, 0, sy, 0, 0, 0, 1};
  return warp_homography(input, scale, out_h, out_w);
}

Tensor shift_channel_blocks(const Tensor& x, int n, int p) {
  require_4d(x, "shift_channel_blocks");
  const int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (n < 1 || C % n != 0) {
    throw ShapeError("channel count " + std::to_string(C) + " is not a multiple of group order " + std::to_string(n));
  }
  const int shift = ((p % n) + n) % n;
  Tensor out(x.shape());
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t f = 0; f < C / n; ++f) {
      for (int r = 0; r < n; ++r) {
        const int64_t src_c = f * n + (r - shift + n) % n;
        const float* src = x.ptr() + (b * C + src_c) * HW;
        std::copy(src, src + HW, out.ptr() + (b * C + f * n + r) * HW);
      }
    }
  }
  return out;
}

}  // namespace reffeat::ops
