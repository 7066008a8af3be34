#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "reffeat/mat3.hpp"
#include "reffeat/tensor.hpp"

// Forward kernels and their adjoints on plain tensors. The autodiff layer
// (autodiff.hpp) records these; inference calls them directly.
namespace reffeat::ops {

int64_t conv_output_size(int64_t size, int64_t kernel, int stride, int padding);

// Cross-correlation. input (B,Ci,H,W), weight (Co,Ci,k,k), bias empty or Co.
Tensor conv2d(const Tensor& input, const Tensor& weight, std::span<const float> bias, int stride,
              int padding);
Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& weight, const Shape& input_shape,
                         int stride, int padding);
Tensor conv2d_grad_weight(const Tensor& grad_out, const Tensor& input, const Shape& weight_shape,
                          int stride, int padding);
// Sum of grad_out over batch and space, per output channel.
std::vector<float> conv2d_grad_bias(const Tensor& grad_out);

// Per-channel (x - mean) / sqrt(var + eps) * gamma + beta.
Tensor batchnorm_infer(const Tensor& input, std::span<const float> mean, std::span<const float> var,
                       std::span<const float> gamma, std::span<const float> beta, float eps);

Tensor relu(const Tensor& x);
Tensor softplus(const Tensor& x);
// Softmax across the channel axis independently at every (b, y, x).
Tensor softmax_channel(const Tensor& x);
// Unit channel vectors per pixel. An exactly-zero channel vector stays zero
// and, when zero_mask is given, is flagged there (one byte per (b, y, x)).
Tensor l2_normalize_channel(const Tensor& x, std::vector<uint8_t>* zero_mask = nullptr);

// Precomputed bilinear resampling: four source taps per output pixel.
// Taps outside the source grid have index -1 and read as zero.
struct BilinearPlan {
  int64_t in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  std::vector<int32_t> index;  // 4 * out_h * out_w
  std::vector<float> weight;   // 4 * out_h * out_w
};

// out(u) = in(inverse(forward_map) * u)
BilinearPlan make_warp_plan(const Mat3& forward_map, int64_t in_h, int64_t in_w, int64_t out_h,
                            int64_t out_w);
Tensor apply_plan(const Tensor& input, const BilinearPlan& plan);
// Adjoint of apply_plan (scatter of output gradients onto the source grid).
Tensor apply_plan_adjoint(const Tensor& grad_out, const BilinearPlan& plan, const Shape& input_shape);

// Rotation about the spatial centre, counter-clockwise with y down. Quarter
// turns on square maps are exact index permutations.
Tensor rotate_bilinear(const Tensor& input, double angle_deg);
Tensor warp_homography(const Tensor& input, const Mat3& forward_map, int64_t out_h, int64_t out_w);
// Scale-only resample using the same bilinear sampler (x' = x * out_w / in_w).
Tensor resize_bilinear(const Tensor& input, int64_t out_h, int64_t out_w);

// Cyclic shift of every block of n consecutive channels by p:
// out[f*n + r] = in[f*n + (r - p) mod n].
Tensor shift_channel_blocks(const Tensor& x, int n, int p);

}  // namespace reffeat::ops
