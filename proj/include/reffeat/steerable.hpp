#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "reffeat/autodiff.hpp"
#include "reffeat/ops.hpp"
#include "reffeat/tensor.hpp"

namespace reffeat {

// Cyclic rotation group C_n acting through the angles 360 * p / n degrees.
class GroupSpec {
 public:
  explicit GroupSpec(int order);
  int order() const { return order_; }
  double angle_deg(int p) const;
  bool operator==(const GroupSpec&) const = default;

 private:
  int order_;
};

enum class FieldKind { trivial, regular };

// Representation attached to a feature tensor: multiplicity independent
// fields, each using 1 (trivial) or n (regular) channels.
struct FieldType {
  GroupSpec group{1};
  FieldKind kind = FieldKind::trivial;
  int multiplicity = 0;

  int64_t channels() const { return int64_t(multiplicity) * (kind == FieldKind::regular ? group.order() : 1); }
  std::string to_string() const;
  bool operator==(const FieldType&) const = default;
};

struct FeatureField {
  Tensor tensor;
  FieldType type;
};

// Throws ShapeError when the tensor's channel axis disagrees with the type.
void validate_field(const FeatureField& field);

// Regular-representation action: spatial rotation by theta_p plus a cyclic
// shift of every orientation block by p. Requires a regular field.
FeatureField regular_action(const FeatureField& field, int p);
// Trivial fields rotate only; regular fields use regular_action.
FeatureField group_action(const FeatureField& field, int p);
// Channel-shift part of the action alone (no spatial rotation).
FeatureField shift_orientations(const FeatureField& field, int p);
// Per-field max over orientation channels. Regular in, trivial out.
FeatureField group_pool(const FeatureField& field);

// Linear map from learnable base filters to the n rotated copies used by
// the convolution. Output channel o*n + p holds base filter o rotated by
// theta_p; for a regular input its orientation blocks are also shifted by p.
class KernelExpansion {
 public:
  KernelExpansion(const FieldType& in, const FieldType& out, int kernel_size);

  Shape base_shape() const;
  Shape expanded_shape() const;
  Tensor expand(const Tensor& base) const;
  Tensor adjoint(const Tensor& grad_expanded) const;

  const FieldType& in_type() const { return in_; }
  const FieldType& out_type() const { return out_; }
  int kernel_size() const { return k_; }

 private:
  FieldType in_, out_;
  int k_;
  std::vector<ops::BilinearPlan> rotations_;  // one k x k plan per group element
};

class SteerableKernel {
 public:
  SteerableKernel(const FieldType& in, const FieldType& out, Tensor base);

  const Tensor& base() const { return base_; }
  Tensor expanded() const { return expansion_->expand(base_); }
  std::shared_ptr<const KernelExpansion> expansion() const { return expansion_; }
  const FieldType& in_type() const { return expansion_->in_type(); }
  const FieldType& out_type() const { return expansion_->out_type(); }

 private:
  std::shared_ptr<const KernelExpansion> expansion_;
  Tensor base_;
};

// Steerable convolution: expand, then stride-1 same-padded conv2d. bias has
// one entry per output field, shared by its n orientations.
FeatureField gconv_forward(const FeatureField& input, const SteerableKernel& kernel, std::span<const float> bias);

namespace ad {
Var expand_kernel(const Var& base, std::shared_ptr<const KernelExpansion> expansion);
}

struct EquivarianceOptions {
  int64_t size = 32;        // square inputs, size x size
  int64_t batch = 1;
  int border = 3;           // pixels excluded from the comparison
  int smoothing_passes = 0; // [1 2 1] blur passes applied to random inputs
  uint64_t seed = 1;
};

struct EquivarianceReport {
  int order = 1;
  int trials = 0;
  std::vector<double> max_abs_deviation;  // per group element p
  std::vector<double> relative_deviation; // max_abs / max |pi_o(p) f(x)|
  double worst() const;
};

using Fragment = std::function<FeatureField(const FeatureField&)>;

// Pixels compared by check_equivariance: a `border`-wide frame is dropped
// for quarter turns; other angles keep the inscribed disk shrunk by border.
std::vector<uint8_t> comparison_mask(int64_t size, double angle_deg, int border);

// Worst |f(pi_i(p) x) - pi_o(p) f(x)| per p over random inputs.
EquivarianceReport check_equivariance(const Fragment& fragment, const FieldType& in_type, int trials,
                                      const EquivarianceOptions& options = {});

}  // namespace reffeat
