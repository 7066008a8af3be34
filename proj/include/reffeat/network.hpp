#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "reffeat/autodiff.hpp"
#include "reffeat/steerable.hpp"
#include "reffeat/tensor.hpp"

namespace reffeat {

enum class Variant {
  pooled,         // group-pooled descriptors
  unpooled,       // pooled descriptors plus the pre-pool regular features
  post_pool_cnn,  // three ordinary conv layers on the pooled descriptors
  standard_cnn,   // same shapes, ordinary convolutions throughout (control)
};

std::string variant_name(Variant v);
Variant parse_variant(const std::string& name);

struct RefConfig {
  int group_order = 8;
  // Channels of each backbone layer's regular output (multiplicity * n).
  std::vector<int> channels{32, 64, 128, 256, 512};
  int kernel_size = 3;
  int head_width = 64;
  // 1x1 heads keep keypoint scores covariant with rotations of the input.
  int head_kernel = 1;
  int post_pool_layers = 3;
  int post_pool_kernel = 3;
  Variant variant = Variant::pooled;
  float bn_eps = 1e-5f;
  float bn_momentum = 0.1f;

  void validate() const;
  int descriptor_dim() const { return channels.back() / group_order; }
  int unpooled_dim() const { return channels.back(); }
  // Smallest accepted input side: the backbone's receptive field.
  int receptive_field() const { return 1 + static_cast<int>(channels.size()) * (kernel_size - 1); }

  nlohmann::json to_json() const;
  static RefConfig from_json(const nlohmann::json& j);

  // Desk-scale configuration used by training tests and the CLI default.
  static RefConfig toy(int group_order, Variant variant = Variant::pooled);
};

struct RefOutput {
  Tensor descriptors;    // (B, D, H, W), unit or zero channel vectors
  Tensor reliability;    // (B, 1, H, W) in (0, 1)
  Tensor repeatability;  // (B, 1, H, W) >= 0
  std::optional<Tensor> unpooled;    // (B, D*n, H, W), unit or zero vectors
  std::vector<uint8_t> zero_descriptor;  // (B*H*W) flags from the L2 step
};

// Named parameter or buffer. Buffers (batch-norm running statistics) are
// saved with the model but receive no gradient.
struct NamedTensor {
  std::string name;
  Tensor value;
  bool trainable = true;
};

class RefNet {
 public:
  RefNet(RefConfig config, uint64_t seed);

  const RefConfig& config() const { return config_; }
  int64_t step() const { return step_; }
  void set_step(int64_t s) { step_ = s; }
  // pooled and unpooled share parameters, so a model can switch between
  // them; other changes throw ConfigError.
  void set_variant(Variant v);

  // Inference with running batch-norm statistics.
  RefOutput forward(const Tensor& image) const;
  // Regular features after the last backbone layer (before pooling).
  FeatureField backbone(const Tensor& image) const;
  FeatureField backbone(const FeatureField& input) const;
  // Descriptors of the configured variant before L2 normalisation.
  FeatureField descriptor_features(const Tensor& image) const;

  struct Graph {
    Var descriptors;
    Var reliability;
    Var repeatability;
    std::optional<Var> unpooled;
  };
  // Records the forward pass on `tape`. params must come from bind(). In
  // training mode batch statistics are used and running averages updated.
  Graph forward_graph(Tape& tape, const Var& image, const std::vector<Var>& params, bool training);
  // One tape leaf per entry of parameters(), trainable ones requiring grad.
  std::vector<Var> bind(Tape& tape) const;

  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  const Tensor& parameter(const std::string& name) const;
  Tensor& parameter(const std::string& name);

 private:
  void build(uint64_t seed);
  int index_of(const std::string& name) const;
  FeatureField run_backbone(const Tensor& x, FieldType type) const;
  Tensor head(const Tensor& pooled, const std::string& prefix) const;

  RefConfig config_;
  std::vector<NamedTensor> params_;
  std::map<std::string, int> index_;
  std::vector<std::shared_ptr<const KernelExpansion>> expansions_;
  int64_t step_ = 0;
};

// Checkpoint layout (little endian): 8-byte magic "REFNETv1", uint64 header
// length, UTF-8 JSON header {format_version, config, step, tensors:[{name,
// shape, offset, nbytes, trainable}]}, then the raw float32 payloads.
inline constexpr char kCheckpointMagic[9] = "REFNETv1";
inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const RefNet& model, const std::filesystem::path& path);
std::vector<uint8_t> checkpoint_bytes(const RefNet& model);
// expected_group_order, when set, must match the stored configuration.
RefNet load_checkpoint(const std::filesystem::path& path, std::optional<int> expected_group_order = std::nullopt);

}  // namespace reffeat
