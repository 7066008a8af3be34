#include "reffeat/steerable.hpp"

#include <algorithm>
#include <cmath>

#include "reffeat/error.hpp"
#include "reffeat/random.hpp"

namespace reffeat {

GroupSpec::GroupSpec(int order) : order_(order) {
  if (order < 1) throw ValueError("cyclic group order must be >= 1, got " + std::to_string(order));
}

double GroupSpec::angle_deg(int p) const { return 360.0 * double(p) / double(order_); }

std::string FieldType::to_string() const {
  return std::string(kind == FieldKind::regular ? "regular" : "trivial") + "(C" + std::to_string(group.order()) +
         ", x" + std::to_string(multiplicity) + ")";
}

void validate_field(const FeatureField& field) {
  require_4d(field.tensor, "feature field");
  if (field.tensor.dim(1) != field.type.channels()) {
    throw ShapeError("field type " + field.type.to_string() + " needs " + std::to_string(field.type.channels()) +
                     " channels, tensor has shape " + shape_to_string(field.tensor.shape()));
  }
}

namespace {

int check_element(const GroupSpec& g, int p) {
  if (p < 0 || p >= g.order()) {
    throw ValueError("group element " + std::to_string(p) + " out of range for C" + std::to_string(g.order()));
  }
  return p;
}

}  // namespace

FeatureField regular_action(const FeatureField& field, int p) {
  validate_field(field);
  if (field.type.kind != FieldKind::regular) {
    throw ValueError("regular_action needs a regular field, got " + field.type.to_string());
  }
  check_element(field.type.group, p);
  const int n = field.type.group.order();
  Tensor rotated = ops::rotate_bilinear(field.tensor, field.type.group.angle_deg(p));
  return {ops::shift_channel_blocks(rotated, n, p), field.type};
}

FeatureField group_action(const FeatureField& field, int p) {
  if (field.type.kind == FieldKind::regular) return regular_action(field, p);
  validate_field(field);
  check_element(field.type.group, p);
  return {ops::rotate_bilinear(field.tensor, field.type.group.angle_deg(p)), field.type};
}

FeatureField shift_orientations(const FeatureField& field, int p) {
  validate_field(field);
  if (field.type.kind != FieldKind::regular) return field;
  check_element(field.type.group, p);
  return {ops::shift_channel_blocks(field.tensor, field.type.group.order(), p), field.type};
}

FeatureField group_pool(const FeatureField& field) {
  validate_field(field);
  if (field.type.kind != FieldKind::regular) {
    throw ValueError("group_pool needs a regular field, got " + field.type.to_string());
  }
  const Tensor& x = field.tensor;
  const int n = field.type.group.order();
  const int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3), F = C / n;
  Tensor out({B, F, x.dim(2), x.dim(3)});
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t f = 0; f < F; ++f) {
      float* dst = out.ptr() + (b * F + f) * HW;
      const float* first = x.ptr() + (b * C + f * n) * HW;
      std::copy_n(first, HW, dst);
      for (int r = 1; r < n; ++r) {
        const float* src = x.ptr() + (b * C + f * n + r) * HW;
        for (int64_t i = 0; i < HW; ++i) dst[i] = std::max(dst[i], src[i]);
      }
    }
  }
  FieldType type = field.type;
  type.kind = FieldKind::trivial;
  FeatureField result{std::move(out), type};
#ifndef NDEBUG
  validate_field(result);
#endif
  return result;
}

KernelExpansion::KernelExpansion(const FieldType& in, const FieldType& out, int kernel_size)
    : in_(in), out_(out), k_(kernel_size) {
  if (out.kind != FieldKind::regular) throw ValueError("steerable kernels produce regular fields, got " + out.to_string());
  if (in.kind == FieldKind::regular && !(in.group == out.group)) {
    throw ValueError("input " + in.to_string() + " and output " + out.to_string() + " use different groups");
  }
  if (kernel_size < 1 || kernel_size % 2 == 0) throw ValueError("kernel size must be odd");
  const int n = out.group.order();
  rotations_.reserve(static_cast<size_t>(n));
  for (int p = 0; p < n; ++p) {
    const Mat3 rot = rotation_about_center(out.group.angle_deg(p), k_, k_);
    rotations_.push_back(ops::make_warp_plan(rot, k_, k_, k_, k_));
  }
}

Shape KernelExpansion::base_shape() const { return {out_.multiplicity, in_.channels(), k_, k_}; }

Shape KernelExpansion::expanded_shape() const { return {out_.channels(), in_.channels(), k_, k_}; }

Tensor KernelExpansion::expand(const Tensor& base) const {
  if (base.shape() != base_shape()) {
    throw ShapeError("base filter shape " + shape_to_string(base.shape()) + " does not match " +
                     shape_to_string(base_shape()) + " for " + in_.to_string() + " -> " + out_.to_string());
  }
  const int n = out_.group.order();
  const int64_t ci_count = in_.channels(), kk = int64_t(k_) * k_;
  const bool shift = in_.kind == FieldKind::regular;
  Tensor out(expanded_shape());
  for (int64_t o = 0; o < out_.multiplicity; ++o) {
    for (int p = 0; p < n; ++p) {
      const ops::BilinearPlan& plan = rotations_[static_cast<size_t>(p)];
      for (int64_t c = 0; c < ci_count; ++c) {
        const int64_t src_c = shift ? (c / n) * n + ((c % n) - p + n) % n : c;
        const float* src = base.ptr() + (o * ci_count + src_c) * kk;
        float* dst = out.ptr() + ((o * n + p) * ci_count + c) * kk;
        for (int64_t i = 0; i < kk; ++i) {
          double s = 0.0;
          for (int t = 0; t < 4; ++t) {
            const int32_t idx = plan.index[static_cast<size_t>(4 * i + t)];
            if (idx >= 0) s += double(plan.weight[static_cast<size_t>(4 * i + t)]) * src[idx];
          }
          dst[i] = static_cast<float>(s);
        }
      }
    }
  }
  return out;
}

Tensor KernelExpansion::adjoint(const Tensor& grad_expanded) const {
  if (grad_expanded.shape() != expanded_shape()) {
    throw ShapeError("expanded gradient shape " + shape_to_string(grad_expanded.shape()) + " mismatch");
  }
  const int n = out_.group.order();
  const int64_t ci_count = in_.channels(), kk = int64_t(k_) * k_;
  const bool shift = in_.kind == FieldKind::regular;
  std::vector<double> acc(static_cast<size_t>(shape_numel(base_shape())), 0.0);
  for (int64_t o = 0; o < out_.multiplicity; ++o) {
    for (int p = 0; p < n; ++p) {
      const ops::BilinearPlan& plan = rotations_[static_cast<size_t>(p)];
      for (int64_t c = 0; c < ci_count; ++c) {
        const int64_t src_c = shift ? (c / n) * n + ((c % n) - p + n) % n : c;
        double* dst = acc.data() + (o * ci_count + src_c) * kk;
        const float* g = grad_expanded.ptr() + ((o * n + p) * ci_count + c) * kk;
        for (int64_t i = 0; i < kk; ++i) {
          for (int t = 0; t < 4; ++t) {
            const int32_t idx = plan.index[static_cast<size_t>(4 * i + t)];
            if (idx >= 0) dst[idx] += double(plan.weight[static_cast<size_t>(4 * i + t)]) * g[i];
          }
        }
      }
    }
  }
  Tensor base(base_shape());
  for (size_t i = 0; i < acc.size(); ++i) base[static_cast<int64_t>(i)] = static_cast<float>(acc[i]);
  return base;
}

SteerableKernel::SteerableKernel(const FieldType& in, const FieldType& out, Tensor base)
    : expansion_(std::make_shared<const KernelExpansion>(in, out, static_cast<int>(base.rank() == 4 ? base.dim(3) : 1))),
      base_(std::move(base)) {
  if (base_.shape() != expansion_->base_shape()) {
    throw ShapeError("base filter shape " + shape_to_string(base_.shape()) + " does not match " +
                     shape_to_string(expansion_->base_shape()));
  }
}

FeatureField gconv_forward(const FeatureField& input, const SteerableKernel& kernel, std::span<const float> bias) {
  validate_field(input);
  if (!(input.type == kernel.in_type())) {
    throw ValueError("gconv field type mismatch: expected " + kernel.in_type().to_string() + ", got " +
                     input.type.to_string());
  }
  const FieldType& out_type = kernel.out_type();
  const int n = out_type.group.order();
  std::vector<float> expanded_bias;
  if (!bias.empty()) {
    if (static_cast<int64_t>(bias.size()) != out_type.multiplicity) {
      throw ShapeError("gconv bias needs one entry per output field (" + std::to_string(out_type.multiplicity) + ")");
    }
    for (float b : bias) expanded_bias.insert(expanded_bias.end(), static_cast<size_t>(n), b);
  }
  const int k = kernel.expansion()->kernel_size();
  Tensor out = ops::conv2d(input.tensor, kernel.expanded(), expanded_bias, 1, (k - 1) / 2);
  return {std::move(out), out_type};
}

namespace ad {

Var expand_kernel(const Var& base, std::shared_ptr<const KernelExpansion> expansion) {
  Tape& tape = *base.tape();
  const int id = base.id();
  return tape.record(expansion->expand(base.value()), {base},
                     [id, expansion](Tape& t, const Tensor& g) { t.accumulate(id, expansion->adjoint(g)); });
}

}  // namespace ad

double EquivarianceReport::worst() const {
  double w = 0.0;
  for (double d : max_abs_deviation) w = std::max(w, d);
  return w;
}

std::vector<uint8_t> comparison_mask(int64_t size, double angle_deg, int border) {
  std::vector<uint8_t> mask(static_cast<size_t>(size * size), 0);
  const double c = (double(size) - 1.0) / 2.0;
  const double radius = c - border;
  const bool quarter = is_quarter_turn(angle_deg);
  for (int64_t y = 0; y < size; ++y) {
    for (int64_t x = 0; x < size; ++x) {
      bool keep;
      if (quarter) {
        keep = x >= border && y >= border && x < size - border && y < size - border;
      } else {
        keep = std::hypot(double(x) - c, double(y) - c) <= radius;
      }
      mask[static_cast<size_t>(y * size + x)] = keep ? 1 : 0;
    }
  }
  return mask;
}

namespace {

void blur_121(Tensor& t) {
  const int64_t planes = t.dim(0) * t.dim(1), h = t.dim(2), w = t.dim(3);
  std::vector<float> tmp(static_cast<size_t>(h * w));
  for (int64_t p = 0; p < planes; ++p) {
    float* d = t.ptr() + p * h * w;
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const float l = d[y * w + std::max<int64_t>(x - 1, 0)], r = d[y * w + std::min<int64_t>(x + 1, w - 1)];
        tmp[static_cast<size_t>(y * w + x)] = 0.25f * l + 0.5f * d[y * w + x] + 0.25f * r;
      }
    }
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const float u = tmp[static_cast<size_t>(std::max<int64_t>(y - 1, 0) * w + x)];
        const float v = tmp[static_cast<size_t>(std::min<int64_t>(y + 1, h - 1) * w + x)];
        d[y * w + x] = 0.25f * u + 0.5f * tmp[static_cast<size_t>(y * w + x)] + 0.25f * v;
      }
    }
  }
}

}  // namespace

EquivarianceReport check_equivariance(const Fragment& fragment, const FieldType& in_type, int trials,
                                      const EquivarianceOptions& options) {
  const GroupSpec& group = in_type.group;
  const int n = group.order();
  EquivarianceReport report;
  report.order = n;
  report.trials = trials;
  report.max_abs_deviation.assign(static_cast<size_t>(n), 0.0);
  report.relative_deviation.assign(static_cast<size_t>(n), 0.0);
  std::vector<double> max_ref(static_cast<size_t>(n), 0.0);
  Rng rng(options.seed);
  const int64_t S = options.size;
  for (int trial = 0; trial < trials; ++trial) {
    FeatureField x{random_uniform({options.batch, in_type.channels(), S, S}, rng), in_type};
    for (int i = 0; i < options.smoothing_passes; ++i) blur_121(x.tensor);
    const FeatureField fx = fragment(x);
    validate_field(fx);
    for (int p = 0; p < n; ++p) {
      const FeatureField lhs = fragment(group_action(x, p));
      const FeatureField rhs = group_action(fx, p);
      const auto mask = comparison_mask(S, group.angle_deg(p), options.border);
      const Tensor& a = lhs.tensor;
      const Tensor& b = rhs.tensor;
      const int64_t planes = a.dim(0) * a.dim(1);
      for (int64_t pl = 0; pl < planes; ++pl) {
        for (int64_t i = 0; i < S * S; ++i) {
          if (!mask[static_cast<size_t>(i)]) continue;
          const double ref = b[pl * S * S + i];
          const double dev = std::abs(double(a[pl * S * S + i]) - ref);
          auto& m = report.max_abs_deviation[static_cast<size_t>(p)];
          m = std::max(m, dev);
          auto& r = max_ref[static_cast<size_t>(p)];
          r = std::max(r, std::abs(ref));
        }
      }
    }
  }
  for (int p = 0; p < n; ++p) {
    const double r = max_ref[static_cast<size_t>(p)];
    report.relative_deviation[static_cast<size_t>(p)] = r > 0.0 ? report.max_abs_deviation[static_cast<size_t>(p)] / r : 0.0;
  }
  return report;
}

}  // namespace reffeat
