#include "debias/inference.hpp"

#include <algorithm>
#include <numeric>

#include "debias/errors.hpp"
#include "debias/losses.hpp"

namespace debias::infer {

TaskPrediction select_from_logits(const std::map<int, CandidateLogits>& candidates, ScoreMode mode) {
  if (candidates.empty()) throw StateError("no committed tasks to select from");
  TaskPrediction out;
  bool first = true;
  double best = 0.0;
  for (const auto& [task, cand] : candidates) {  // ascending task id
    if (cand.logits.empty()) throw InvalidInput("empty batch");
    std::vector<double> maxima;
    maxima.reserve(cand.logits.size());
    for (const auto& row : cand.logits) {
      if (mode == ScoreMode::Softmax) {
        const auto p = loss::softmax(row);
        maxima.push_back(*std::max_element(p.begin(), p.end()));
      } else {
        maxima.push_back(*std::max_element(row.begin(), row.end()));
      }
    }
    // Summed in sorted order so that the score does not depend on sample order.
    std::sort(maxima.begin(), maxima.end());
    const double score = std::accumulate(maxima.begin(), maxima.end(), 0.0);
    out.per_task_scores[task] = score;
    if (first || score > best) {
      best = score;
      out.selected_task = task;
      first = false;
    }
  }
  const auto& winner = candidates.at(out.selected_task);
  for (const auto& row : winner.logits) {
    out.predictions.push_back(winner.classes[std::max_element(row.begin(), row.end()) - row.begin()]);
  }
  return out;
}

namespace {

CandidateLogits candidate(const nn::Snapshot& snapshot, int task, const nn::ChannelMask* mask,
                          std::span<const nn::Image* const> batch) {
  const auto fr = snapshot.forward(task, batch, mask);
  CandidateLogits c;
  c.classes = snapshot.head(task).classes;
  for (int b = 0; b < fr.batch; ++b) {
    const auto lg = fr.logits_of(b);
    c.logits.emplace_back(lg.begin(), lg.end());
  }
  return c;
}

}  // namespace

TaskPrediction select_task(const nn::Snapshot& snapshot, const std::map<int, nn::ChannelMask>& masks,
                           std::span<const nn::Image* const> batch, ScoreMode mode) {
  if (masks.empty()) throw StateError("no committed tasks to select from");
  if (batch.empty()) throw InvalidInput("empty batch");
  std::map<int, CandidateLogits> cands;
  for (const auto& [task, mask] : masks) cands.emplace(task, candidate(snapshot, task, &mask, batch));
  return select_from_logits(cands, mode);
}

metrics::MetricsReport evaluate_batches(std::span<const data::TaskData* const> tasks,
                                        int batch_size, int num_groups,
                                        const BatchPredictor& predictor) {
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  metrics::MetricsReport report;
  report.batch_rule = kBatchRule;
  for (const auto* task : tasks) {
    const auto& test = task->test;
    std::vector<int> preds;
    std::vector<int> labels;
    std::vector<int> attrs;
    int batches = 0;
    int correct_selection = 0;
    bool has_selection = true;
    for (std::size_t start = 0; start < test.size(); start += batch_size) {
      const std::size_t end = std::min(test.size(), start + static_cast<std::size_t>(batch_size));
      std::vector<const nn::Image*> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(&test[i].image);
      auto [selected, p] = predictor(task->task_id, batch);
      if (p.size() != batch.size()) throw InvalidInput("predictor returned the wrong number of labels");
      ++batches;
      if (selected < 0) has_selection = false;
      correct_selection += selected == task->task_id;
      for (std::size_t i = start; i < end; ++i) {
        preds.push_back(p[i - start]);
        labels.push_back(test[i].label);
        attrs.push_back(test[i].attribute);
      }
    }
    if (test.empty()) throw InvalidInput("task " + std::to_string(task->task_id) + " has no test data");
    auto m = metrics::task_metrics(task->task_id, preds, labels, attrs, task->classes, num_groups);
    m.num_batches = batches;
    if (has_selection) m.task_selection_acc = static_cast<double>(correct_selection) / batches;
    report.per_task.push_back(std::move(m));
  }
  report.averaged = metrics::average(report.per_task, num_groups);
  return report;
}

metrics::MetricsReport evaluate_stream(const nn::Snapshot& snapshot,
                                       const std::map<int, nn::ChannelMask>& masks,
                                       std::span<const data::TaskData* const> tasks, int batch_size,
                                       int num_groups, bool oracle_mode, ScoreMode mode) {
  if (masks.empty()) throw StateError("no committed tasks to evaluate");
  auto predictor = [&](int true_task, std::span<const nn::Image* const> batch) {
    if (oracle_mode) {
      std::map<int, CandidateLogits> one;
      one.emplace(true_task, candidate(snapshot, true_task, &masks.at(true_task), batch));
      auto tp = select_from_logits(one, mode);
      return std::pair{tp.selected_task, std::move(tp.predictions)};
    }
    auto tp = select_task(snapshot, masks, batch, mode);
    return std::pair{tp.selected_task, std::move(tp.predictions)};
  };
  return evaluate_batches(tasks, batch_size, num_groups, predictor);
}

}  // namespace debias::infer
