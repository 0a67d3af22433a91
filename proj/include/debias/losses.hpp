#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

namespace debias::loss {

struct GceConfig {
  double q = 0.7;
  double epsilon = 1e-12;  // p_y floor
  void validate() const;
};

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;  // d loss / d logits
};

std::vector<double> softmax(std::span<const double> logits);

// -log softmax(logits)[target], gradient softmax - onehot.
LossAndGrad ce_loss(std::span<const double> logits, int target);

struct GceValue {
  double loss = 0.0;
  double dloss_dp = 0.0;
};

// (1 - p^q) / q. p == 0 is clamped to config.epsilon with a warning.
GceValue gce_loss(double p_target, const GceConfig& config = {});

// GCE through the softmax: gradient w.r.t. logits is p_y^q times the CE gradient.
LossAndGrad gce_loss_logits(std::span<const double> logits, int target, const GceConfig& config = {});

double wce_weight(double cached_gce, double alpha);

// Logistic squashing of the raw trainable parameter into (0, 1).
double alpha_value(double alpha_raw);
double alpha_derivative(double alpha_raw);
// Inverse of alpha_value; alpha must lie in (0, 1).
double alpha_raw_for(double alpha);

// Per-sample GCE values of the stage-1 biased network, written once per task.
class SampleWeightCache {
 public:
  void populate(std::map<std::uint64_t, double> values);
  bool populated() const { return populated_; }
  double at(std::uint64_t sample_id) const;
  const std::map<std::uint64_t, double>& values() const { return values_; }

 private:
  std::map<std::uint64_t, double> values_;
  bool populated_ = false;
};

}  // namespace debias::loss
