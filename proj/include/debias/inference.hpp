#pragma once

// Task-agnostic prediction by the max-output rule, and batch-wise evaluation
// of a task stream.

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "debias/datagen.hpp"
#include "debias/metrics.hpp"
#include "debias/nn.hpp"

namespace debias::infer {

enum class ScoreMode { RawLogits, Softmax };

struct TaskPrediction {
  int selected_task = 0;
  std::map<int, double> per_task_scores;
  std::vector<int> predictions;  // global class ids from the selected head
};

// Candidate outputs for one batch: logits[task][sample] with the head's classes.
struct CandidateLogits {
  std::vector<int> classes;
  std::vector<std::vector<double>> logits;
};

// Core rule over precomputed logits. Ties go to the lowest task id.
TaskPrediction select_from_logits(const std::map<int, CandidateLogits>& candidates,
                                  ScoreMode mode = ScoreMode::RawLogits);

// Scores every committed task (head + mask) on the batch. Throws StateError
// with no candidates and InvalidInput for an empty batch.
TaskPrediction select_task(const nn::Snapshot& snapshot, const std::map<int, nn::ChannelMask>& masks,
                           std::span<const nn::Image* const> batch,
                           ScoreMode mode = ScoreMode::RawLogits);

// Given the true task of a batch, returns (selected task, global predictions).
// A selected task of -1 means the method has no task selection step.
using BatchPredictor =
    std::function<std::pair<int, std::vector<int>>(int true_task, std::span<const nn::Image* const>)>;

inline constexpr const char* kBatchRule =
    "test batches of size s drawn within one ground-truth task, in stored order";

// Scores `tasks` (test split) batch by batch; per-task metrics plus their average.
metrics::MetricsReport evaluate_batches(std::span<const data::TaskData* const> tasks,
                                        int batch_size, int num_groups,
                                        const BatchPredictor& predictor);

metrics::MetricsReport evaluate_stream(const nn::Snapshot& snapshot,
                                       const std::map<int, nn::ChannelMask>& masks,
                                       std::span<const data::TaskData* const> tasks, int batch_size,
                                       int num_groups, bool oracle_mode,
                                       ScoreMode mode = ScoreMode::RawLogits);

}  // namespace debias::infer
