#include "reffeat/network.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "reffeat/error.hpp"
#include "reffeat/random.hpp"

namespace reffeat {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::pooled: return "pooled";
    case Variant::unpooled: return "unpooled";
    case Variant::post_pool_cnn: return "post_pool_cnn";
    case Variant::standard_cnn: return "standard_cnn";
  }
  return "pooled";
}

Variant parse_variant(const std::string& name) {
  if (name == "pooled") return Variant::pooled;
  if (name == "unpooled") return Variant::unpooled;
  if (name == "post_pool_cnn") return Variant::post_pool_cnn;
  if (name == "standard_cnn") return Variant::standard_cnn;
  throw ConfigError("unknown variant '" + name + "' (expected pooled, unpooled, post_pool_cnn or standard_cnn)");
}

void RefConfig::validate() const {
  if (group_order < 1) throw ConfigError("group_order must be >= 1");
  if (channels.empty()) throw ConfigError("backbone needs at least one layer");
  for (int c : channels) {
    if (c < 1 || c % group_order != 0) {
      throw ConfigError("backbone channel count " + std::to_string(c) + " is not a positive multiple of group order " +
                        std::to_string(group_order));
    }
  }
  if (kernel_size < 1 || kernel_size % 2 == 0) throw ConfigError("kernel_size must be odd");
  if (post_pool_kernel < 1 || post_pool_kernel % 2 == 0) throw ConfigError("post_pool_kernel must be odd");
  if (head_width < 1) throw ConfigError("head_width must be >= 1");
  if (head_kernel < 1 || head_kernel % 2 == 0) throw ConfigError("head_kernel must be odd");
  if (post_pool_layers < 0) throw ConfigError("post_pool_layers must be >= 0");
  if (!(bn_eps > 0.0f)) throw ConfigError("bn_eps must be > 0");
  if (bn_momentum < 0.0f || bn_momentum > 1.0f) throw ConfigError("bn_momentum must be in [0, 1]");
}

nlohmann::json RefConfig::to_json() const {
  return {{"group_order", group_order},       {"channels", channels},
          {"kernel_size", kernel_size},       {"head_width", head_width},
          {"head_kernel", head_kernel},
          {"post_pool_layers", post_pool_layers}, {"post_pool_kernel", post_pool_kernel},
          {"variant", variant_name(variant)}, {"bn_eps", bn_eps},
          {"bn_momentum", bn_momentum}};
}

RefConfig RefConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  RefConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "group_order") c.group_order = value.get<int>();
      else if (key == "channels") c.channels = value.get<std::vector<int>>();
      else if (key == "kernel_size") c.kernel_size = value.get<int>();
      else if (key == "head_width") c.head_width = value.get<int>();
      else if (key == "head_kernel") c.head_kernel = value.get<int>();
      else if (key == "post_pool_layers") c.post_pool_layers = value.get<int>();
      else if (key == "post_pool_kernel") c.post_pool_kernel = value.get<int>();
      else if (key == "variant") c.variant = parse_variant(value.get<std::string>());
      else if (key == "bn_eps") c.bn_eps = value.get<float>();
      else if (key == "bn_momentum") c.bn_momentum = value.get<float>();
      else throw ConfigError("unknown model config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("model config key '" + key + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

RefConfig RefConfig::toy(int group_order, Variant variant) {
  RefConfig c;
  c.group_order = group_order;
  const int n = group_order;
  // Roughly constant cost across n: multiplicities shrink as n grows.
  if (n <= 4) {
    c.channels = {4 * n, 8 * n, 8 * n, 16 * n, 16 * n};
  } else {
    c.channels = {2 * n, 4 * n, 4 * n, 8 * n, 8 * n};
  }
  c.head_width = 32;
  c.variant = variant;
  c.validate();
  return c;
}

namespace {

std::string layer_name(int i, const char* what) { return "backbone." + std::to_string(i) + "." + what; }

Tensor fan_in_uniform(const Shape& shape, int64_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / double(fan_in));
  return random_uniform(shape, rng, -bound, bound);
}

std::vector<float> repeat_each(std::span<const float> v, int n) {
  std::vector<float> out;
  out.reserve(v.size() * static_cast<size_t>(n));
  for (float x : v) out.insert(out.end(), static_cast<size_t>(n), x);
  return out;
}

}  // namespace

RefNet::RefNet(RefConfig config, uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  build(seed);
}

void RefNet::build(uint64_t seed) {
  Rng rng(seed);
  const int n = config_.group_order;
  const int k = config_.kernel_size;
  const bool standard = config_.variant == Variant::standard_cnn;
  const GroupSpec group(n);
  auto add = [&](std::string name, Tensor t, bool trainable = true) {
    index_[name] = static_cast<int>(params_.size());
    params_.push_back({std::move(name), std::move(t), trainable});
  };
  FieldType in{group, FieldKind::trivial, 3};
  for (size_t i = 0; i < config_.channels.size(); ++i) {
    const int li = static_cast<int>(i);
    const FieldType out{group, FieldKind::regular, config_.channels[i] / n};
    const int64_t units = standard ? out.channels() : out.multiplicity;
    if (standard) {
      expansions_.push_back(nullptr);
      add(layer_name(li, "weight"), fan_in_uniform({units, in.channels(), k, k}, in.channels() * k * k, rng));
    } else {
      auto e = std::make_shared<const KernelExpansion>(in, out, k);
      add(layer_name(li, "weight"), fan_in_uniform(e->base_shape(), in.channels() * k * k, rng));
      expansions_.push_back(std::move(e));
    }
    add(layer_name(li, "bias"), Tensor({units}, 0.0f));
    add(layer_name(li, "bn.gamma"), Tensor({units}, 1.0f));
    add(layer_name(li, "bn.beta"), Tensor({units}, 0.0f));
    add(layer_name(li, "bn.running_mean"), Tensor({units}, 0.0f), false);
    add(layer_name(li, "bn.running_var"), Tensor({units}, 1.0f), false);
    in = out;
  }
  const int64_t d = config_.descriptor_dim();
  if (config_.variant == Variant::post_pool_cnn) {
    const int pk = config_.post_pool_kernel;
    for (int j = 0; j < config_.post_pool_layers; ++j) {
      add("post." + std::to_string(j) + ".weight", fan_in_uniform({d, d, pk, pk}, d * pk * pk, rng));
      add("post." + std::to_string(j) + ".bias", Tensor({d}, 0.0f));
    }
  }
  const int64_t hw = config_.head_width;
  const int hk = config_.head_kernel;
  for (const auto& [prefix, outputs] : {std::pair<std::string, int64_t>{"reliability", 2}, {"repeatability", 1}}) {
    add(prefix + ".0.weight", fan_in_uniform({hw, d, hk, hk}, d * hk * hk, rng));
    add(prefix + ".0.bias", Tensor({hw}, 0.0f));
    add(prefix + ".1.weight", fan_in_uniform({outputs, hw, hk, hk}, hw * hk * hk, rng));
    add(prefix + ".1.bias", Tensor({outputs}, 0.0f));
  }
}

void RefNet::set_variant(Variant v) {
  auto interchangeable = [](Variant x) { return x == Variant::pooled || x == Variant::unpooled; };
  if (v == config_.variant) return;
  if (!interchangeable(v) || !interchangeable(config_.variant)) {
    throw ConfigError("cannot switch a " + variant_name(config_.variant) + " model to " + variant_name(v));
  }
  config_.variant = v;
}

int RefNet::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValueError("model has no parameter named '" + name + "'");
  return it->second;
}

const Tensor& RefNet::parameter(const std::string& name) const { return params_[static_cast<size_t>(index_of(name))].value; }
Tensor& RefNet::parameter(const std::string& name) { return params_[static_cast<size_t>(index_of(name))].value; }

FeatureField RefNet::run_backbone(const Tensor& x, FieldType type) const {
  const int n = config_.group_order;
  const int k = config_.kernel_size;
  const bool standard = config_.variant == Variant::standard_cnn;
  const GroupSpec group(n);
  FeatureField field{x, type};
  validate_field(field);
  for (size_t i = 0; i < config_.channels.size(); ++i) {
    const int li = static_cast<int>(i);
    const FieldType out{group, FieldKind::regular, config_.channels[i] / n};
    const Tensor& w = parameter(layer_name(li, "weight"));
    const Tensor& b = parameter(layer_name(li, "bias"));
    const int rep = standard ? 1 : n;
    Tensor y;
    if (standard) {
      y = ops::conv2d(field.tensor, w, b.data(), 1, (k - 1) / 2);
    } else {
      y = ops::conv2d(field.tensor, expansions_[i]->expand(w), repeat_each(b.data(), n), 1, (k - 1) / 2);
    }
    y = ops::batchnorm_infer(y, repeat_each(parameter(layer_name(li, "bn.running_mean")).data(), rep),
                             repeat_each(parameter(layer_name(li, "bn.running_var")).data(), rep),
                             repeat_each(parameter(layer_name(li, "bn.gamma")).data(), rep),
                             repeat_each(parameter(layer_name(li, "bn.beta")).data(), rep), config_.bn_eps);
    field = FeatureField{ops::relu(y), out};
  }
  return field;
}

FeatureField RefNet::backbone(const Tensor& image) const {
  require_4d(image, "RefNet input");
  if (image.dim(1) != 3) throw ShapeError("RefNet expects 3-channel images, got " + shape_to_string(image.shape()));
  const int rf = config_.receptive_field();
  if (image.dim(2) < rf || image.dim(3) < rf) {
    throw ShapeError("image " + shape_to_string(image.shape()) + " is smaller than the receptive field (" +
                     std::to_string(rf) + " px)");
  }
  return run_backbone(image, FieldType{GroupSpec(config_.group_order), FieldKind::trivial, 3});
}

FeatureField RefNet::backbone(const FeatureField& input) const { return backbone(input.tensor); }

Tensor RefNet::head(const Tensor& pooled, const std::string& prefix) const {
  const int pad = (config_.head_kernel - 1) / 2;
  Tensor h = ops::conv2d(pooled, parameter(prefix + ".0.weight"), parameter(prefix + ".0.bias").data(), 1, pad);
  h = ops::relu(h);
  return ops::conv2d(h, parameter(prefix + ".1.weight"), parameter(prefix + ".1.bias").data(), 1, pad);
}

FeatureField RefNet::descriptor_features(const Tensor& image) const {
  FeatureField pooled = group_pool(backbone(image));
  if (config_.variant == Variant::post_pool_cnn) {
    const int pad = (config_.post_pool_kernel - 1) / 2;
    for (int j = 0; j < config_.post_pool_layers; ++j) {
      const std::string p = "post." + std::to_string(j);
      pooled.tensor = ops::conv2d(pooled.tensor, parameter(p + ".weight"), parameter(p + ".bias").data(), 1, pad);
      if (j + 1 < config_.post_pool_layers) pooled.tensor = ops::relu(pooled.tensor);
    }
  }
  return pooled;
}

RefOutput RefNet::forward(const Tensor& image) const {
  const FeatureField features = backbone(image);
  const FeatureField pooled = group_pool(features);
  RefOutput out;
  Tensor desc = pooled.tensor;
  if (config_.variant == Variant::post_pool_cnn) {
    const int pad = (config_.post_pool_kernel - 1) / 2;
    for (int j = 0; j < config_.post_pool_layers; ++j) {
      const std::string p = "post." + std::to_string(j);
      desc = ops::conv2d(desc, parameter(p + ".weight"), parameter(p + ".bias").data(), 1, pad);
      if (j + 1 < config_.post_pool_layers) desc = ops::relu(desc);
    }
  }
  out.descriptors = ops::l2_normalize_channel(desc, &out.zero_descriptor);
  const Tensor rel = ops::softmax_channel(head(pooled.tensor, "reliability"));
  const int64_t B = rel.dim(0), HW = rel.dim(2) * rel.dim(3);
  out.reliability = Tensor({B, 1, rel.dim(2), rel.dim(3)});
  for (int64_t b = 0; b < B; ++b) std::copy_n(rel.ptr() + (b * 2 + 1) * HW, HW, out.reliability.ptr() + b * HW);
  Tensor rep = ops::softplus(head(pooled.tensor, "repeatability"));
  for (float& v : rep.data()) v = static_cast<float>(double(v) / (1.0 + v));
  out.repeatability = std::move(rep);
  if (config_.variant == Variant::unpooled) out.unpooled = ops::l2_normalize_channel(features.tensor);
  return out;
}

std::vector<Var> RefNet::bind(Tape& tape) const {
  std::vector<Var> vars;
  vars.reserve(params_.size());
  for (const auto& p : params_) vars.push_back(tape.leaf(p.value, p.trainable));
  return vars;
}

RefNet::Graph RefNet::forward_graph(Tape& tape, const Var& image, const std::vector<Var>& params, bool training) {
  if (image.tape() != &tape) throw InvariantError("forward_graph: image belongs to a different tape");
  if (params.size() != params_.size()) throw InvariantError("forward_graph: parameter list does not match the model");
  const Tensor& img = image.value();
  require_4d(img, "RefNet input");
  const int rf = config_.receptive_field();
  if (img.dim(1) != 3 || img.dim(2) < rf || img.dim(3) < rf) {
    throw ShapeError("image " + shape_to_string(img.shape()) + " must be 3-channel and at least " + std::to_string(rf) +
                     " px per side");
  }
  const int n = config_.group_order;
  const int k = config_.kernel_size;
  const int pad = (k - 1) / 2;
  const bool standard = config_.variant == Variant::standard_cnn;
  auto P = [&](const std::string& name) { return params[static_cast<size_t>(index_of(name))]; };

  Var x = image;
  for (size_t i = 0; i < config_.channels.size(); ++i) {
    const int li = static_cast<int>(i);
    Var y;
    if (standard) {
      y = ad::conv2d(x, P(layer_name(li, "weight")), P(layer_name(li, "bias")), 1, pad);
    } else {
      Var w = ad::expand_kernel(P(layer_name(li, "weight")), expansions_[i]);
      y = ad::conv2d(x, w, ad::repeat_interleave(P(layer_name(li, "bias")), n), 1, pad);
    }
    Tensor& rm = parameter(layer_name(li, "bn.running_mean"));
    Tensor& rv = parameter(layer_name(li, "bn.running_var"));
    ad::BatchNormState state{std::vector<float>(rm.data().begin(), rm.data().end()),
                             std::vector<float>(rv.data().begin(), rv.data().end())};
    y = ad::batchnorm(y, P(layer_name(li, "bn.gamma")), P(layer_name(li, "bn.beta")), standard ? 1 : n, state, training,
                      config_.bn_momentum, config_.bn_eps);
    if (training) {
      std::copy(state.running_mean.begin(), state.running_mean.end(), rm.data().begin());
      std::copy(state.running_var.begin(), state.running_var.end(), rv.data().begin());
    }
    x = ad::relu(y);
  }
  Graph g;
  const Var pooled = ad::group_pool(x, n);
  Var desc = pooled;
  if (config_.variant == Variant::post_pool_cnn) {
    const int pp = (config_.post_pool_kernel - 1) / 2;
    for (int j = 0; j < config_.post_pool_layers; ++j) {
      const std::string p = "post." + std::to_string(j);
      desc = ad::conv2d(desc, P(p + ".weight"), P(p + ".bias"), 1, pp);
      if (j + 1 < config_.post_pool_layers) desc = ad::relu(desc);
    }
  }
  g.descriptors = ad::l2_normalize_channel(desc);
  const int hp = (config_.head_kernel - 1) / 2;
  auto head = [&](const std::string& prefix) {
    Var h = ad::relu(ad::conv2d(pooled, P(prefix + ".0.weight"), P(prefix + ".0.bias"), 1, hp));
    return ad::conv2d(h, P(prefix + ".1.weight"), P(prefix + ".1.bias"), 1, hp);
  };
  g.reliability = ad::select_channel(ad::softmax_channel(head("reliability")), 1);
  g.repeatability = ad::squash(ad::softplus(head("repeatability")));
  if (config_.variant == Variant::unpooled) g.unpooled = ad::l2_normalize_channel(x);
  return g;
}

std::vector<uint8_t> checkpoint_bytes(const RefNet& model) {
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["config"] = model.config().to_json();
  header["step"] = model.step();
  nlohmann::json manifest = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& p : model.parameters()) {
    const uint64_t nbytes = static_cast<uint64_t>(p.value.numel()) * sizeof(float);
    manifest.push_back({{"name", p.name},
                        {"shape", p.value.shape()},
                        {"offset", offset},
                        {"nbytes", nbytes},
                        {"trainable", p.trainable}});
    offset += nbytes;
  }
  header["tensors"] = manifest;
  const std::string text = header.dump();
  std::vector<uint8_t> bytes(kCheckpointMagic, kCheckpointMagic + 8);
  const uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<uint8_t>(len >> (8 * i)));
  bytes.insert(bytes.end(), text.begin(), text.end());
  for (const auto& p : model.parameters()) {
    const auto* raw = reinterpret_cast<const uint8_t*>(p.value.ptr());
    bytes.insert(bytes.end(), raw, raw + p.value.numel() * sizeof(float));
  }
  return bytes;
}

void save_checkpoint(const RefNet& model, const std::filesystem::path& path) {
  const auto bytes = checkpoint_bytes(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

RefNet load_checkpoint(const std::filesystem::path& path, std::optional<int> expected_group_order) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = "checkpoint " + path.string();
  if (bytes.size() < 16) throw DataError(where + " is truncated (no header)");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw DataError(where + ": bad magic bytes, expected \"REFNETv1\"");
  }
  uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= uint64_t(bytes[static_cast<size_t>(8 + i)]) << (8 * i);
  if (len > bytes.size() - 16) throw DataError(where + " is truncated (header)");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": malformed header: " + e.what());
  }
  const int version = header.value("format_version", -1);
  if (version != kCheckpointVersion) {
    throw DataError(where + ": unknown format version " + std::to_string(version) + " (supported: " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  RefConfig config;
  try {
    config = RefConfig::from_json(header.at("config"));
  } catch (const Error& e) {
    throw DataError(where + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": " + e.what());
  }
  if (expected_group_order && *expected_group_order != config.group_order) {
    throw ConfigError(where + " was trained for group C" + std::to_string(config.group_order) +
                      " but C" + std::to_string(*expected_group_order) + " was requested");
  }
  RefNet model(config, 0);
  const size_t payload = 16 + static_cast<size_t>(len);
  try {
    model.set_step(header.at("step").get<int64_t>());
    const auto& tensors = header.at("tensors");
    if (tensors.size() != model.parameters().size()) {
      throw DataError(where + ": expected " + std::to_string(model.parameters().size()) + " tensors, found " +
                      std::to_string(tensors.size()));
    }
    for (const auto& entry : tensors) {
      const std::string name = entry.at("name").get<std::string>();
      Tensor& dst = model.parameter(name);
      const Shape shape = entry.at("shape").get<Shape>();
      if (shape != dst.shape()) {
        throw DataError(where + ": tensor '" + name + "' has shape " + shape_to_string(shape) + ", expected " +
                        shape_to_string(dst.shape()));
      }
      const uint64_t offset = entry.at("offset").get<uint64_t>();
      const uint64_t nbytes = entry.at("nbytes").get<uint64_t>();
      if (nbytes != static_cast<uint64_t>(dst.numel()) * sizeof(float)) throw DataError(where + ": bad size for " + name);
      if (payload + offset + nbytes > bytes.size()) throw DataError(where + " is truncated (tensor '" + name + "')");
      std::memcpy(dst.ptr(), bytes.data() + payload + offset, nbytes);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": malformed manifest: " + e.what());
  } catch (const ValueError& e) {
    throw DataError(where + ": " + e.what());
  }
  return model;
}

}  // namespace reffeat
