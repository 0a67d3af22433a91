#include "debias/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "debias/errors.hpp"
#include "debias/log.hpp"

namespace debias::loss {

void GceConfig::validate() const {
  if (!(q > 0.0 && q <= 1.0)) throw ConfigError("GCE q must lie in (0, 1]");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("GCE epsilon must lie in (0, 1)");
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw InvalidInput("softmax of empty logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

LossAndGrad ce_loss(std::span<const double> logits, int target) {
  if (logits.empty()) throw InvalidInput("cross-entropy of empty logits");
  if (target < 0 || target >= static_cast<int>(logits.size())) {
    throw InvalidInput("target " + std::to_string(target) + " out of range");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  const double log_z = mx + std::log(z);
  LossAndGrad out;
  out.loss = log_z - logits[target];
  out.grad.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out.grad[i] = std::exp(logits[i] - log_z);
  out.grad[target] -= 1.0;
  return out;
}

GceValue gce_loss(double p_target, const GceConfig& config) {
  if (!(p_target >= 0.0 && p_target <= 1.0)) {
    throw InvalidInput("GCE probability must lie in [0, 1]");
  }
  double p = p_target;
  if (p < config.epsilon) {
    logger()->warn("GCE: target probability {} clamped to {}", p_target, config.epsilon);
    p = config.epsilon;
  }
  const double pq = std::pow(p, config.q);
  return {(1.0 - pq) / config.q, -pq / p};
}

LossAndGrad gce_loss_logits(std::span<const double> logits, int target, const GceConfig& config) {
  LossAndGrad ce = ce_loss(logits, target);
  // p_y = exp(-ce); clamping matters only far outside double range.
  const double p = std::max(std::exp(-ce.loss), config.epsilon);
  const double pq = std::pow(p, config.q);
  LossAndGrad out;
  out.loss = (1.0 - pq) / config.q;
  out.grad = std::move(ce.grad);
  for (double& g : out.grad) g *= pq;
  return out;
}

double wce_weight(double cached_gce, double alpha) { return std::exp(alpha * cached_gce); }

double alpha_value(double alpha_raw) {
  // Clamped so the result stays strictly inside (0, 1) in floating point.
  double a = alpha_raw >= 0.0 ? 1.0 / (1.0 + std::exp(-alpha_raw))
                              : std::exp(alpha_raw) / (1.0 + std::exp(alpha_raw));
  return std::clamp(a, std::nextafter(0.0, 1.0), std::nextafter(1.0, 0.0));
}

double alpha_derivative(double alpha_raw) {
  const double a = alpha_value(alpha_raw);
  return a * (1.0 - a);
}

double alpha_raw_for(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  return std::log(alpha / (1.0 - alpha));
}

void SampleWeightCache::populate(std::map<std::uint64_t, double> values) {
  if (populated_) throw StateError("sample weight cache already populated for this task");
  for (const auto& [id, v] : values) {
    if (!(v >= 0.0)) throw InvalidInput("cached GCE value must be non-negative");
  }
  values_ = std::move(values);
  populated_ = true;
}

double SampleWeightCache::at(std::uint64_t sample_id) const {
  if (!populated_) throw StateError("sample weight cache read before it was populated");
  auto it = values_.find(sample_id);
  if (it == values_.end()) throw InvalidInput("no cached GCE value for sample " + std::to_string(sample_id));
  return it->second;
}

}  // namespace debias::loss
