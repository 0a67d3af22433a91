#pragma once

// Classification and group-fairness metrics plus the frozen-feature
// sensitive-attribute probe.
//
// Multi-class / multi-group reductions used throughout:
//   DPR: per class c, min_a P(yhat=c|A=a) / max_a P(yhat=c|A=a); mean over
//        classes that some group is predicted as.
//   EOD: per class c, max over group pairs |TPR_a - TPR_b|; mean over classes
//        where every present group has at least one positive.
// Predictions outside [0, num_classes) count as wrong for every class.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "debias/nn.hpp"

namespace debias::metrics {

inline constexpr const char* kDprRule = "per-class min/max group positive-rate ratio, mean over predicted classes";
inline constexpr const char* kEodRule = "per-class max pairwise group TPR gap, mean over classes with positives in every group";

struct ClassificationScores {
  double macro_f1 = 0.0;
  double balanced_acc = 0.0;
};

ClassificationScores classification_metrics(std::span<const int> preds, std::span<const int> labels,
                                            int num_classes);

// Throws UndefinedMetric when fewer than two groups are present or no class qualifies.
double dpr(std::span<const int> preds, std::span<const int> attributes, int num_classes,
           int num_groups);
double eod(std::span<const int> preds, std::span<const int> labels,
           std::span<const int> attributes, int num_classes, int num_groups);

// Balanced accuracy restricted to each group; nullopt for groups with no samples.
std::vector<std::optional<double>> per_group_balanced_acc(std::span<const int> preds,
                                                          std::span<const int> labels,
                                                          std::span<const int> attributes,
                                                          int num_classes, int num_groups);

// Mann-Whitney AUC; ties count one half. Throws UndefinedMetric if a side is empty.
double auc(std::span<const double> positive_scores, std::span<const double> negative_scores);

struct TaskMetrics {
  int task_id = 0;  // 0 for the across-task average
  double macro_f1 = 0.0;
  double balanced_acc = 0.0;
  std::vector<std::optional<double>> per_group_acc;
  std::optional<double> dpr;
  std::optional<double> eod;
  std::optional<double> task_selection_acc;  // nullopt for methods without task selection
  std::optional<double> probe_auc;
  int num_batches = 0;
  int mixed_batches = 0;
};

struct MetricsReport {
  std::vector<TaskMetrics> per_task;
  TaskMetrics averaged;
  std::string dpr_rule = kDprRule;
  std::string eod_rule = kEodRule;
  std::string batch_rule;
};

// Scores for one task from global-id predictions; labels are global ids and
// `classes` lists the task's global class ids.
TaskMetrics task_metrics(int task_id, std::span<const int> preds, std::span<const int> labels,
                         std::span<const int> attributes, std::span<const int> classes,
                         int num_groups);

// Mean of each metric over tasks, skipping undefined entries.
TaskMetrics average(std::span<const TaskMetrics> tasks, int num_groups);

struct ProbeConfig {
  int epochs = 50;
  double learning_rate = 1e-2;
  int batch_size = 32;
  bool standardize = true;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  std::map<std::pair<int, int>, double> auc;  // one-vs-one, keyed (a, b) with a < b
  double mean_auc() const;
};

// Linear softmax probe from features (row-major, `dim` columns) to attribute.
ProbeResult attribute_probe_features(std::span<const double> train_features,
                                     std::span<const int> train_attributes,
                                     std::span<const double> test_features,
                                     std::span<const int> test_attributes, int dim,
                                     int num_groups, const ProbeConfig& config = {});

// Pooled trunk features of `images` under `mask`.
std::vector<double> pooled_features(const nn::Snapshot& extractor,
                                    std::span<const nn::Image* const> images,
                                    const nn::ChannelMask* mask, int batch_size = 64);

ProbeResult attribute_probe(const nn::Snapshot& extractor, const nn::ChannelMask* mask,
                            std::span<const nn::Image* const> train_images,
                            std::span<const int> train_attributes,
                            std::span<const nn::Image* const> test_images,
                            std::span<const int> test_attributes, int num_groups,
                            const ProbeConfig& config = {});

}  // namespace debias::metrics
