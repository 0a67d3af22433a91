#pragma once

// Easy/hard partition of a task's training samples under the biased network,
// and per-unit bias scores from the spatial variance of unit activations.

#include <cstdint>
#include <map>
#include <ostream>
#include <set>
#include <span>
#include <utility>
#include <vector>

#include "debias/datagen.hpp"
#include "debias/nn.hpp"
#include "debias/units.hpp"

namespace debias::bias {

enum class HardRule {
  // Misclassified with top-1 confidence >= tau; classes left empty fall back
  // to every misclassified sample.
  ConfidentWithFallback,
  // Every misclassified sample.
  AnyMisclassified,
};

struct PartitionConfig {
  double tau = 0.70;
  HardRule hard_rule = HardRule::ConfidentWithFallback;
  void validate() const;
};

struct SamplePartition {
  int task_id = 0;
  std::map<int, std::set<std::uint64_t>> easy;  // ground-truth class -> ids
  std::map<int, std::set<std::uint64_t>> hard;
  std::set<std::uint64_t> excluded;

  std::size_t total() const;
};

struct Prediction {
  std::uint64_t id = 0;
  int label = 0;      // ground truth, global id
  int predicted = 0;  // global id
  double confidence = 0.0;  // top-1 softmax probability
};

SamplePartition partition_from_predictions(int task_id, std::span<const Prediction> predictions,
                                           const PartitionConfig& config = {});

// Predictions of `snapshot`'s head for `task_id` with `availability` applied.
std::vector<Prediction> predict(const nn::Snapshot& snapshot, int task_id,
                                const std::vector<data::SampleRecord>& samples,
                                const nn::ChannelMask* availability);

SamplePartition partition_samples(const nn::Snapshot& snapshot, int task_id,
                                  const std::vector<data::SampleRecord>& samples,
                                  const nn::ChannelMask* availability,
                                  const PartitionConfig& config = {});

// Population variance over every cell. Throws ConfigError for fewer than 2 cells.
double spatial_variance(std::span<const double> map);

struct BiasScoreTable {
  int task_id = 0;
  std::map<std::pair<int, UnitId>, double> per_class;  // (class, unit) -> S
  std::map<UnitId, double> averaged;                   // unit -> mean over scored classes
  std::vector<int> scored_classes;
  std::vector<int> skipped_classes;
};

// variances[sample id][k] is Var(a^n) of units[k] for that sample.
BiasScoreTable scores_from_variances(const SamplePartition& partition, std::span<const UnitId> units,
                                     const std::map<std::uint64_t, std::vector<double>>& variances);

BiasScoreTable bias_scores(const nn::Snapshot& snapshot, const SamplePartition& partition,
                           const std::vector<data::SampleRecord>& samples,
                           const nn::ChannelMask* availability);

// CSV with columns task,class,layer,channel,score. Averaged rows use class "avg".
void write_scores_csv(const BiasScoreTable& table, std::ostream& os);

}  // namespace debias::bias
