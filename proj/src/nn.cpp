#include "debias/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "debias/errors.hpp"
#include "debias/rng.hpp"

namespace debias::nn {

void NetworkConfig::validate() const {
  if (in_channels <= 0 || height <= 0 || width <= 0) {
    throw ConfigError("input shape must be positive");
  }
  if (conv_layers.empty()) throw ConfigError("network needs at least one conv layer");
  if (head_width < 0) throw ConfigError("head_width must be >= 0");
  int h = height;
  int w = width;
  for (std::size_t l = 0; l < conv_layers.size(); ++l) {
    const auto& c = conv_layers[l];
    if (c.out_channels < 2) {
      throw ConfigError("conv layer " + std::to_string(l) + " needs at least 2 output channels");
    }
    if (c.kernel_size <= 0 || c.kernel_size % 2 == 0) {
      throw ConfigError("conv layer " + std::to_string(l) + " kernel size must be a positive odd integer");
    }
    h = h - c.kernel_size + 1;
    w = w - c.kernel_size + 1;
    if (h < 1 || w < 1 || h * w < 2) {
      throw ConfigError("conv layer " + std::to_string(l) +
                        " output has spatial extent < 2; enlarge the input or shrink kernels");
    }
  }
}

int NetworkConfig::layer_in_channels(int layer) const {
  return layer == 0 ? in_channels : conv_layers[layer - 1].out_channels;
}

int NetworkConfig::layer_out_height(int layer) const {
  int h = height;
  for (int l = 0; l <= layer; ++l) h -= conv_layers[l].kernel_size - 1;
  return h;
}

int NetworkConfig::layer_out_width(int layer) const {
  int w = width;
  for (int l = 0; l <= layer; ++l) w -= conv_layers[l].kernel_size - 1;
  return w;
}

int NetworkConfig::total_units() const {
  int n = 0;
  for (const auto& c : conv_layers) n += c.out_channels;
  return n;
}

ChannelMask full_mask(const NetworkConfig& config) {
  ChannelMask m;
  for (const auto& c : config.conv_layers) m.emplace_back(c.out_channels, std::uint8_t{1});
  return m;
}

ParamStore ParamStore::initialize(const NetworkConfig& config) {
  config.validate();
  ParamStore p;
  for (int l = 0; l < config.num_layers(); ++l) {
    const int out = config.conv_layers[l].out_channels;
    const int k = config.conv_layers[l].kernel_size;
    const int fan_in = config.layer_in_channels(l) * k * k;
    ConvLayerParams layer;
    layer.weight = Parameter(static_cast<std::size_t>(out) * fan_in);
    layer.bias = Parameter(out);
    Rng rng = derive_rng(config.seed, "conv-init", l);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (double& v : layer.weight.value) v = dist(rng);
    std::fill(layer.bias.value.begin(), layer.bias.value.end(), 0.01);
    p.conv.push_back(std::move(layer));
  }
  return p;
}

void ParamStore::freeze_unit(const NetworkConfig& config, int layer, int channel) {
  auto& lp = conv.at(layer);
  const int k = config.conv_layers[layer].kernel_size;
  const std::size_t fan_in = static_cast<std::size_t>(config.layer_in_channels(layer)) * k * k;
  std::fill_n(lp.weight.frozen.begin() + channel * fan_in, fan_in, std::uint8_t{1});
  lp.bias.frozen.at(channel) = 1;
}

bool ParamStore::unit_frozen(const NetworkConfig& config, int layer, int channel) const {
  const auto& lp = conv.at(layer);
  const int k = config.conv_layers[layer].kernel_size;
  const std::size_t fan_in = static_cast<std::size_t>(config.layer_in_channels(layer)) * k * k;
  if (!lp.bias.frozen.at(channel)) return false;
  return std::all_of(lp.weight.frozen.begin() + channel * fan_in,
                     lp.weight.frozen.begin() + (channel + 1) * fan_in,
                     [](std::uint8_t f) { return f != 0; });
}

TaskHead TaskHead::initialize(const NetworkConfig& config, int task_id, std::vector<int> classes,
                              std::uint64_t seed) {
  if (classes.empty()) throw ConfigError("task head needs at least one class");
  TaskHead h;
  h.task_id = task_id;
  h.classes = std::move(classes);
  Rng rng = derive_rng(seed, "head-init", static_cast<std::uint64_t>(task_id));
  auto fill_uniform = [&rng](Parameter& p, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : p.value) v = dist(rng);
  };
  const int features = config.feature_width();
  int in = features;
  if (config.head_width > 0) {
    h.hidden_weight = Parameter(static_cast<std::size_t>(config.head_width) * features);
    h.hidden_bias = Parameter(config.head_width);
    fill_uniform(h.hidden_weight, features);
    fill_uniform(h.hidden_bias, features);
    in = config.head_width;
  }
  h.out_weight = Parameter(static_cast<std::size_t>(h.num_classes()) * in);
  h.out_bias = Parameter(h.num_classes());
  fill_uniform(h.out_weight, in);
  fill_uniform(h.out_bias, in);
  return h;
}

void TaskHead::freeze_all() {
  hidden_weight.freeze_all();
  hidden_bias.freeze_all();
  out_weight.freeze_all();
  out_bias.freeze_all();
}

Network::Network(NetworkConfig config) : config_(std::move(config)) { config_.validate(); }

void Network::check_batch(std::span<const Image* const> batch) const {
  if (batch.empty()) throw InvalidInput("empty batch");
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Image& im = *batch[i];
    if (im.channels != config_.in_channels || im.height != config_.height ||
        im.width != config_.width || im.pixels.size() != config_.image_size()) {
      throw InvalidInput("batch image " + std::to_string(i) + " has shape (" +
                         std::to_string(im.channels) + "," + std::to_string(im.height) + "," +
                         std::to_string(im.width) + "), network expects (" +
                         std::to_string(config_.in_channels) + "," +
                         std::to_string(config_.height) + "," + std::to_string(config_.width) +
                         ")");
    }
  }
}

void Network::check_mask(const ChannelMask* mask) const {
  if (!mask) return;
  if (static_cast<int>(mask->size()) != config_.num_layers()) {
    throw ConfigError("mask covers " + std::to_string(mask->size()) + " layers, network has " +
                      std::to_string(config_.num_layers()));
  }
  for (int l = 0; l < config_.num_layers(); ++l) {
    if (static_cast<int>((*mask)[l].size()) != config_.conv_layers[l].out_channels) {
      throw ConfigError("mask layer " + std::to_string(l) + " has wrong channel count");
    }
  }
}

ForwardResult Network::forward(const ParamStore& params, const TaskHead& head,
                               std::span<const Image> batch, const ChannelMask* mask) const {
  std::vector<const Image*> ptrs;
  ptrs.reserve(batch.size());
  for (const auto& im : batch) ptrs.push_back(&im);
  return forward(params, head, ptrs, mask);
}

ForwardResult Network::forward_features(const ParamStore& params,
                                        std::span<const Image* const> batch,
                                        const ChannelMask* mask) const {
  check_batch(batch);
  check_mask(mask);
  if (static_cast<int>(params.conv.size()) != config_.num_layers()) {
    throw ConfigError("parameter store does not match the network config");
  }
  const int B = static_cast<int>(batch.size());
  const int L = config_.num_layers();
  ForwardResult fr;
  fr.batch = B;
  fr.activations.resize(L);
  const std::size_t image_size = config_.image_size();
  fr.input.resize(static_cast<std::size_t>(B) * image_size);
  for (int b = 0; b < B; ++b) {
    const auto& px = batch[b]->pixels;
    for (std::size_t i = 0; i < image_size; ++i) fr.input[b * image_size + i] = px[i] - kInputCentre;
  }

  for (int l = 0; l < L; ++l) {
    const int ci = config_.layer_in_channels(l);
    const int hi = l == 0 ? config_.height : config_.layer_out_height(l - 1);
    const int wi = l == 0 ? config_.width : config_.layer_out_width(l - 1);
    const int co = config_.conv_layers[l].out_channels;
    const int k = config_.conv_layers[l].kernel_size;
    const int ho = config_.layer_out_height(l);
    const int wo = config_.layer_out_width(l);
    const std::size_t in_plane = static_cast<std::size_t>(hi) * wi;
    const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;
    const double* weight = params.conv[l].weight.value.data();
    const double* bias = params.conv[l].bias.value.data();
    auto& out = fr.activations[l];
    out.assign(static_cast<std::size_t>(B) * co * out_plane, 0.0);

    for (int b = 0; b < B; ++b) {
      const double* in = l == 0 ? fr.input.data() + static_cast<std::size_t>(b) * image_size
                                : fr.activations[l - 1].data() + static_cast<std::size_t>(b) * ci * in_plane;
      for (int o = 0; o < co; ++o) {
        if (mask && !(*mask)[l][o]) continue;
        double* op = out.data() + (static_cast<std::size_t>(b) * co + o) * out_plane;
        std::fill_n(op, out_plane, bias[o]);
        for (int i = 0; i < ci; ++i) {
          const double* ip = in + i * in_plane;
          const double* wp = weight + (static_cast<std::size_t>(o) * ci + i) * k * k;
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const double w = wp[ky * k + kx];
              for (int y = 0; y < ho; ++y) {
                const double* irow = ip + (y + ky) * wi + kx;
                double* orow = op + y * wo;
                for (int x = 0; x < wo; ++x) orow[x] += w * irow[x];
              }
            }
          }
        }
        for (std::size_t p = 0; p < out_plane; ++p) op[p] = op[p] > 0.0 ? op[p] : 0.0;
      }
    }
  }

  const int F = config_.feature_width();
  const std::size_t last_plane =
      static_cast<std::size_t>(config_.layer_out_height(L - 1)) * config_.layer_out_width(L - 1);
  fr.pooled.assign(static_cast<std::size_t>(B) * F, 0.0);
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < F; ++c) {
      const double* p = fr.activations[L - 1].data() + (static_cast<std::size_t>(b) * F + c) * last_plane;
      double s = 0.0;
      for (std::size_t q = 0; q < last_plane; ++q) s += p[q];
      fr.pooled[static_cast<std::size_t>(b) * F + c] = s / static_cast<double>(last_plane);
    }
  }
  return fr;
}

ForwardResult Network::forward(const ParamStore& params, const TaskHead& head,
                               std::span<const Image* const> batch, const ChannelMask* mask) const {
  ForwardResult fr = forward_features(params, batch, mask);
  const int B = fr.batch;
  const int F = config_.feature_width();
  fr.num_classes = head.num_classes();
  const int H = config_.head_width;
  const int K = head.num_classes();
  const int in_dim = H > 0 ? H : F;
  if (head.out_weight.size() != static_cast<std::size_t>(K) * in_dim ||
      (H > 0 && head.hidden_weight.size() != static_cast<std::size_t>(H) * F)) {
    throw ConfigError("task head shape does not match the network config");
  }
  if (H > 0) {
    fr.hidden.assign(static_cast<std::size_t>(B) * H, 0.0);
    for (int b = 0; b < B; ++b) {
      for (int j = 0; j < H; ++j) {
        double s = head.hidden_bias.value[j];
        for (int c = 0; c < F; ++c) {
          s += head.hidden_weight.value[static_cast<std::size_t>(j) * F + c] *
               fr.pooled[static_cast<std::size_t>(b) * F + c];
        }
        fr.hidden[static_cast<std::size_t>(b) * H + j] = s > 0.0 ? s : 0.0;
      }
    }
  }
  const std::vector<double>& head_in = H > 0 ? fr.hidden : fr.pooled;
  fr.logits.assign(static_cast<std::size_t>(B) * K, 0.0);
  for (int b = 0; b < B; ++b) {
    for (int j = 0; j < K; ++j) {
      double s = head.out_bias.value[j];
      for (int c = 0; c < in_dim; ++c) {
        s += head.out_weight.value[static_cast<std::size_t>(j) * in_dim + c] *
             head_in[static_cast<std::size_t>(b) * in_dim + c];
      }
      fr.logits[static_cast<std::size_t>(b) * K + j] = s;
    }
  }
  return fr;
}

std::span<const double> Network::unit_map(const ForwardResult& fr, int layer, int channel,
                                          int sample) const {
  const std::size_t plane =
      static_cast<std::size_t>(config_.layer_out_height(layer)) * config_.layer_out_width(layer);
  const int co = config_.conv_layers[layer].out_channels;
  return {fr.activations[layer].data() + (static_cast<std::size_t>(sample) * co + channel) * plane,
          plane};
}

Gradients Network::backward(const ParamStore& params, const TaskHead& head,
                            std::span<const Image* const> batch, const ChannelMask* mask,
                            const ForwardResult& fr, std::span<const double> dlogits) const {
  const int B = fr.batch;
  const int K = fr.num_classes;
  if (static_cast<int>(batch.size()) != B || dlogits.size() != static_cast<std::size_t>(B) * K) {
    throw InvalidInput("backward: batch or logit-gradient size does not match the forward pass");
  }
  const int L = config_.num_layers();
  const int F = config_.feature_width();
  const int H = config_.head_width;
  const int in_dim = H > 0 ? H : F;
  Gradients g;

  const std::vector<double>& head_in = H > 0 ? fr.hidden : fr.pooled;
  g.out_weight.assign(head.out_weight.size(), 0.0);
  g.out_bias.assign(head.out_bias.size(), 0.0);
  std::vector<double> dhead_in(static_cast<std::size_t>(B) * in_dim, 0.0);
  for (int b = 0; b < B; ++b) {
    for (int j = 0; j < K; ++j) {
      const double d = dlogits[static_cast<std::size_t>(b) * K + j];
      g.out_bias[j] += d;
      for (int c = 0; c < in_dim; ++c) {
        g.out_weight[static_cast<std::size_t>(j) * in_dim + c] +=
            d * head_in[static_cast<std::size_t>(b) * in_dim + c];
        dhead_in[static_cast<std::size_t>(b) * in_dim + c] +=
            d * head.out_weight.value[static_cast<std::size_t>(j) * in_dim + c];
      }
    }
  }

  std::vector<double> dpooled;
  if (H > 0) {
    g.hidden_weight.assign(head.hidden_weight.size(), 0.0);
    g.hidden_bias.assign(head.hidden_bias.size(), 0.0);
    dpooled.assign(static_cast<std::size_t>(B) * F, 0.0);
    for (int b = 0; b < B; ++b) {
      for (int j = 0; j < H; ++j) {
        if (fr.hidden[static_cast<std::size_t>(b) * H + j] <= 0.0) continue;
        const double d = dhead_in[static_cast<std::size_t>(b) * H + j];
        g.hidden_bias[j] += d;
        for (int c = 0; c < F; ++c) {
          g.hidden_weight[static_cast<std::size_t>(j) * F + c] +=
              d * fr.pooled[static_cast<std::size_t>(b) * F + c];
          dpooled[static_cast<std::size_t>(b) * F + c] +=
              d * head.hidden_weight.value[static_cast<std::size_t>(j) * F + c];
        }
      }
    }
  } else {
    dpooled = std::move(dhead_in);
  }

  g.conv_weight.resize(L);
  g.conv_bias.resize(L);
  // Gradient w.r.t. the post-ReLU output of the current layer.
  const std::size_t last_plane =
      static_cast<std::size_t>(config_.layer_out_height(L - 1)) * config_.layer_out_width(L - 1);
  std::vector<double> dact(static_cast<std::size_t>(B) * F * last_plane);
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < F; ++c) {
      const double d = dpooled[static_cast<std::size_t>(b) * F + c] / static_cast<double>(last_plane);
      std::fill_n(dact.begin() + (static_cast<std::size_t>(b) * F + c) * last_plane, last_plane, d);
    }
  }

  for (int l = L - 1; l >= 0; --l) {
    const int ci = config_.layer_in_channels(l);
    const int hi = l == 0 ? config_.height : config_.layer_out_height(l - 1);
    const int wi = l == 0 ? config_.width : config_.layer_out_width(l - 1);
    const int co = config_.conv_layers[l].out_channels;
    const int k = config_.conv_layers[l].kernel_size;
    const int ho = config_.layer_out_height(l);
    const int wo = config_.layer_out_width(l);
    const std::size_t in_plane = static_cast<std::size_t>(hi) * wi;
    const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;
    const double* weight = params.conv[l].weight.value.data();
    auto& gw = g.conv_weight[l];
    auto& gb = g.conv_bias[l];
    gw.assign(params.conv[l].weight.size(), 0.0);
    gb.assign(params.conv[l].bias.size(), 0.0);
    std::vector<double> dinput;
    if (l > 0) dinput.assign(static_cast<std::size_t>(B) * ci * in_plane, 0.0);
    std::vector<double> dpre(out_plane);

    for (int b = 0; b < B; ++b) {
      const double* in = l == 0 ? fr.input.data() + static_cast<std::size_t>(b) * config_.image_size()
                                : fr.activations[l - 1].data() + static_cast<std::size_t>(b) * ci * in_plane;
      for (int o = 0; o < co; ++o) {
        if (mask && !(*mask)[l][o]) continue;
        const std::size_t off = (static_cast<std::size_t>(b) * co + o) * out_plane;
        const double* act = fr.activations[l].data() + off;
        const double* da = dact.data() + off;
        double bsum = 0.0;
        for (std::size_t p = 0; p < out_plane; ++p) {
          dpre[p] = act[p] > 0.0 ? da[p] : 0.0;
          bsum += dpre[p];
        }
        gb[o] += bsum;
        for (int i = 0; i < ci; ++i) {
          const double* ip = in + i * in_plane;
          double* gwp = gw.data() + (static_cast<std::size_t>(o) * ci + i) * k * k;
          const double* wp = weight + (static_cast<std::size_t>(o) * ci + i) * k * k;
          double* dip = l > 0 ? dinput.data() + (static_cast<std::size_t>(b) * ci + i) * in_plane : nullptr;
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              double s = 0.0;
              const double w = wp[ky * k + kx];
              for (int y = 0; y < ho; ++y) {
                const double* irow = ip + (y + ky) * wi + kx;
                const double* drow = dpre.data() + y * wo;
                for (int x = 0; x < wo; ++x) s += drow[x] * irow[x];
                if (dip) {
                  double* dirow = dip + (y + ky) * wi + kx;
                  for (int x = 0; x < wo; ++x) dirow[x] += w * drow[x];
                }
              }
              gwp[ky * k + kx] += s;
            }
          }
        }
      }
    }
    dact = std::move(dinput);
  }
  return g;
}

Optimizer::Moments& Optimizer::moments_for(std::size_t slot, std::size_t n) {
  if (state_.size() <= slot) state_.resize(slot + 1);
  auto& m = state_[slot];
  if (m.m.size() != n) {
    m.m.assign(n, 0.0);
    m.v.assign(n, 0.0);
  }
  return m;
}

void Optimizer::update(double& w, double g, double& m, double& v) const {
  if (config_.kind == OptimizerKind::Sgd) {
    w -= config_.learning_rate * g;
    return;
  }
  m = config_.beta1 * m + (1.0 - config_.beta1) * g;
  v = config_.beta2 * v + (1.0 - config_.beta2) * g * g;
  const double t = static_cast<double>(std::max(t_, 1L));
  const double mhat = m / (1.0 - std::pow(config_.beta1, t));
  const double vhat = v / (1.0 - std::pow(config_.beta2, t));
  w -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
}

void Optimizer::step(std::size_t slot, Parameter& param, std::span<const double> grad) {
  if (grad.size() != param.size()) throw InvalidInput("gradient size does not match parameter");
  auto& mom = moments_for(slot, param.size());
  for (std::size_t i = 0; i < param.size(); ++i) {
    if (param.frozen[i]) continue;
    update(param.value[i], grad[i], mom.m[i], mom.v[i]);
  }
}

void Optimizer::step_scalar(std::size_t slot, double& value, double grad) {
  auto& mom = moments_for(slot, 1);
  update(value, grad, mom.m[0], mom.v[0]);
}

TrainingSession::TrainingSession(const Network& network, ParamStore& params, TaskHead& head,
                                 OptimizerConfig optimizer, std::optional<ChannelMask> mask)
    : network_(network), params_(params), head_(head), optimizer_(optimizer), mask_(std::move(mask)) {}

const ForwardResult& TrainingSession::forward(std::span<const Image* const> batch) {
  batch_.assign(batch.begin(), batch.end());
  pending_ = network_.forward(params_, head_, batch_, mask());
  return *pending_;
}

void TrainingSession::backward_and_step(std::span<const double> dlogits) {
  if (!pending_) throw StateError("backward_and_step called without a pending forward pass");
  Gradients g = network_.backward(params_, head_, batch_, mask(), *pending_, dlogits);
  pending_.reset();
  optimizer_.begin_step();
  std::size_t slot = 0;
  for (std::size_t l = 0; l < params_.conv.size(); ++l) {
    optimizer_.step(slot++, params_.conv[l].weight, g.conv_weight[l]);
    optimizer_.step(slot++, params_.conv[l].bias, g.conv_bias[l]);
  }
  if (!g.hidden_weight.empty()) {
    optimizer_.step(slot, head_.hidden_weight, g.hidden_weight);
    optimizer_.step(slot + 1, head_.hidden_bias, g.hidden_bias);
  }
  slot += 2;
  optimizer_.step(slot++, head_.out_weight, g.out_weight);
  optimizer_.step(slot++, head_.out_bias, g.out_bias);
}

void TrainingSession::step_alpha(double grad) {
  // Slot after the trunk and head parameters.
  optimizer_.step_scalar(params_.conv.size() * 2 + 4, params_.alpha_raw, grad);
}

Snapshot::Snapshot(NetworkConfig config, ParamStore params, std::vector<TaskHead> heads)
    : network_(std::make_shared<const Network>(std::move(config))),
      params_(std::make_shared<const ParamStore>(std::move(params))),
      heads_(std::make_shared<const std::vector<TaskHead>>(std::move(heads))) {}

const TaskHead& Snapshot::head(int task_id) const {
  for (const auto& h : *heads_) {
    if (h.task_id == task_id) return h;
  }
  throw StateError("snapshot has no head for task " + std::to_string(task_id));
}

ForwardResult Snapshot::forward(int task_id, std::span<const Image* const> batch,
                                const ChannelMask* mask) const {
  return network_->forward(*params_, head(task_id), batch, mask);
}

namespace {

std::uint64_t hash_values(const std::vector<double>& v, std::uint64_t h) {
  return fnv1a(std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double)), h);
}

}  // namespace

std::uint64_t hash_params(const ParamStore& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& l : params.conv) {
    h = hash_values(l.weight.value, h);
    h = hash_values(l.bias.value, h);
  }
  return h;
}

std::uint64_t hash_head(const TaskHead& head) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  h = hash_values(head.hidden_weight.value, h);
  h = hash_values(head.hidden_bias.value, h);
  h = hash_values(head.out_weight.value, h);
  h = hash_values(head.out_bias.value, h);
  return h;
}

}  // namespace debias::nn
