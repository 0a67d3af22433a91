#pragma once

// Small deterministic conv network: conv+ReLU stack, global average pool,
// per-task dense heads, channel masks and per-parameter freeze flags.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace debias::nn {

struct ConvSpec {
  int out_channels = 0;
  int kernel_size = 0;  // odd, valid padding, stride 1
  bool operator==(const ConvSpec&) const = default;
};

struct NetworkConfig {
  int in_channels = 3;
  int height = 16;
  int width = 16;
  std::vector<ConvSpec> conv_layers{{8, 3}, {16, 3}};
  int head_width = 0;  // 0: heads map pooled features straight to logits
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;

  int num_layers() const { return static_cast<int>(conv_layers.size()); }
  int layer_in_channels(int layer) const;
  int layer_out_height(int layer) const;
  int layer_out_width(int layer) const;
  int feature_width() const { return conv_layers.back().out_channels; }
  int total_units() const;
  std::size_t image_size() const {
    return static_cast<std::size_t>(in_channels) * height * width;
  }

  bool operator==(const NetworkConfig&) const = default;
};

// Image stored channel-major: pixels[(c * height + y) * width + x].
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  double at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  bool operator==(const Image&) const = default;
};

// kept[layer][channel] != 0 means the channel participates.
using ChannelMask = std::vector<std::vector<std::uint8_t>>;

ChannelMask full_mask(const NetworkConfig& config);

// One trainable array with an entry-wise freeze flag.
struct Parameter {
  std::vector<double> value;
  std::vector<std::uint8_t> frozen;

  Parameter() = default;
  explicit Parameter(std::size_t n) : value(n, 0.0), frozen(n, 0) {}
  std::size_t size() const { return value.size(); }
  void freeze_all() { std::fill(frozen.begin(), frozen.end(), std::uint8_t{1}); }
  bool operator==(const Parameter&) const = default;
};

struct ConvLayerParams {
  Parameter weight;  // [out][in][k][k]
  Parameter bias;    // [out]
  bool operator==(const ConvLayerParams&) const = default;
};

// Shared trunk parameters plus the raw (unsquashed) WCE weight parameter.
struct ParamStore {
  std::vector<ConvLayerParams> conv;
  double alpha_raw = 0.0;

  static ParamStore initialize(const NetworkConfig& config);
  // Freezes the filter (weights over all inputs and the bias) producing one channel.
  void freeze_unit(const NetworkConfig& config, int layer, int channel);
  bool unit_frozen(const NetworkConfig& config, int layer, int channel) const;
  bool operator==(const ParamStore&) const = default;
};

// Per-task classifier over pooled trunk features.
struct TaskHead {
  int task_id = 0;
  std::vector<int> classes;  // global class id of each logit
  Parameter hidden_weight;   // [head_width][feature_width], empty when head_width == 0
  Parameter hidden_bias;
  Parameter out_weight;      // [num_classes][in]
  Parameter out_bias;

  static TaskHead initialize(const NetworkConfig& config, int task_id, std::vector<int> classes,
                             std::uint64_t seed);
  int num_classes() const { return static_cast<int>(classes.size()); }
  void freeze_all();
  bool operator==(const TaskHead&) const = default;
};

// Gradients mirror the shapes of ParamStore and TaskHead.
struct Gradients {
  std::vector<std::vector<double>> conv_weight;
  std::vector<std::vector<double>> conv_bias;
  std::vector<double> hidden_weight;
  std::vector<double> hidden_bias;
  std::vector<double> out_weight;
  std::vector<double> out_bias;
};

// Pixels are shifted by this before the first convolution so that inputs in
// [0, 1] do not silence filters with a negative weight sum.
inline constexpr double kInputCentre = 0.5;

// Everything the backward pass needs, plus the outputs callers read.
struct ForwardResult {
  int batch = 0;
  int num_classes = 0;
  std::vector<double> logits;  // [batch][num_classes]
  // Post-ReLU, post-mask feature maps per layer: [batch][channels][h][w].
  std::vector<std::vector<double>> activations;
  std::vector<double> pooled;  // [batch][feature_width]
  std::vector<double> hidden;  // [batch][head_width], post-ReLU
  std::vector<double> input;   // centred pixels: [batch][channels][h][w]

  std::span<const double> logits_of(int sample) const {
    return {logits.data() + static_cast<std::size_t>(sample) * num_classes,
            static_cast<std::size_t>(num_classes)};
  }
};

class Network {
 public:
  explicit Network(NetworkConfig config);

  const NetworkConfig& config() const { return config_; }

  // mask == nullptr runs every channel.
  ForwardResult forward(const ParamStore& params, const TaskHead& head,
                        std::span<const Image* const> batch,
                        const ChannelMask* mask = nullptr) const;
  ForwardResult forward(const ParamStore& params, const TaskHead& head,
                        std::span<const Image> batch, const ChannelMask* mask = nullptr) const;

  // Trunk only: activations and pooled features, no logits.
  ForwardResult forward_features(const ParamStore& params, std::span<const Image* const> batch,
                                 const ChannelMask* mask = nullptr) const;

  // Feature maps of one unit for one sample out of a forward result.
  std::span<const double> unit_map(const ForwardResult& fr, int layer, int channel,
                                   int sample) const;

  // dlogits: [batch][num_classes], already scaled by whatever reduction the loss uses.
  // Gradients pass through frozen parameters; freezing only matters to the optimizer.
  Gradients backward(const ParamStore& params, const TaskHead& head,
                     std::span<const Image* const> batch, const ChannelMask* mask,
                     const ForwardResult& fr, std::span<const double> dlogits) const;

 private:
  void check_batch(std::span<const Image* const> batch) const;
  void check_mask(const ChannelMask* mask) const;

  NetworkConfig config_;
};

enum class OptimizerKind { Adam, Sgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// First-order optimizer over Parameters. Frozen entries are skipped entirely,
// so their values and moment estimates never change.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {}) : config_(config) {}

  // slot identifies the moment buffers; callers keep slots stable across steps.
  void step(std::size_t slot, Parameter& param, std::span<const double> grad);
  // Scalar parameters (alpha_raw) that have no freeze flag.
  void step_scalar(std::size_t slot, double& value, double grad);
  // Call once per batch before the per-parameter steps.
  void begin_step() { ++t_; }

  const OptimizerConfig& config() const { return config_; }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  void update(double& w, double g, double& m, double& v) const;

  OptimizerConfig config_;
  long t_ = 0;
  std::vector<Moments> state_;
  Moments& moments_for(std::size_t slot, std::size_t n);
};

// Forward + step bound to one ParamStore and one head.
class TrainingSession {
 public:
  TrainingSession(const Network& network, ParamStore& params, TaskHead& head,
                  OptimizerConfig optimizer, std::optional<ChannelMask> mask = std::nullopt);

  const ForwardResult& forward(std::span<const Image* const> batch);
  // Throws StateError if no forward pass is pending.
  void backward_and_step(std::span<const double> dlogits);
  // Applies a gradient to alpha_raw within the step just taken.
  void step_alpha(double grad);

  Optimizer& optimizer() { return optimizer_; }
  const ChannelMask* mask() const { return mask_ ? &*mask_ : nullptr; }

 private:
  const Network& network_;
  ParamStore& params_;
  TaskHead& head_;
  Optimizer optimizer_;
  std::optional<ChannelMask> mask_;
  std::vector<const Image*> batch_;
  std::optional<ForwardResult> pending_;
};

// Immutable evaluation copy of a network, its params and a set of heads.
class Snapshot {
 public:
  Snapshot(NetworkConfig config, ParamStore params, std::vector<TaskHead> heads);

  const NetworkConfig& config() const { return network_->config(); }
  const ParamStore& params() const { return *params_; }
  const std::vector<TaskHead>& heads() const { return *heads_; }
  const TaskHead& head(int task_id) const;
  const Network& network() const { return *network_; }

  ForwardResult forward(int task_id, std::span<const Image* const> batch,
                        const ChannelMask* mask = nullptr) const;

 private:
  std::shared_ptr<const Network> network_;
  std::shared_ptr<const ParamStore> params_;
  std::shared_ptr<const std::vector<TaskHead>> heads_;
};

// FNV-1a over the raw bytes of every parameter value (not freeze flags).
std::uint64_t hash_params(const ParamStore& params);
std::uint64_t hash_head(const TaskHead& head);

}  // namespace debias::nn
