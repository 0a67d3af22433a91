#pragma once

// Unit lifecycle across tasks: biased stage-1 training, bias-aware pruning into
// a task mask, weighted finetuning under the mask, and commit (freeze).

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "debias/bias_analysis.hpp"
#include "debias/datagen.hpp"
#include "debias/losses.hpp"
#include "debias/metrics.hpp"
#include "debias/nn.hpp"
#include "debias/rng.hpp"
#include "debias/units.hpp"

namespace debias::subnet {

struct TaskMask {
  int task_id = 0;
  nn::ChannelMask kept;

  int kept_count() const;
  bool contains(UnitId u) const { return kept[u.layer][u.channel] != 0; }
  std::vector<UnitId> kept_units() const;
  bool operator==(const TaskMask&) const = default;
};

class UnitRegistry {
 public:
  UnitRegistry() = default;
  explicit UnitRegistry(const nn::NetworkConfig& config);

  const std::set<int>& memberships(UnitId u) const;
  bool frozen(UnitId u) const { return !memberships(u).empty(); }
  std::vector<UnitId> free_units() const;
  nn::ChannelMask free_mask() const;
  bool committed(int task_id) const { return masks_.count(task_id) != 0; }
  const TaskMask& mask(int task_id) const;
  const std::map<int, TaskMask>& masks() const { return masks_; }
  const nn::NetworkConfig& config() const { return config_; }

  // Records a finalized mask; kept units gain the task's membership.
  // Throws StateError when the task id was already committed.
  void record(const TaskMask& mask);

  bool operator==(const UnitRegistry&) const = default;

 private:
  nn::NetworkConfig config_;
  std::map<UnitId, std::set<int>> memberships_;
  std::map<int, TaskMask> masks_;
};

struct Ablations {
  bool ce_for_gce = false;         // stage 1 trained with plain CE
  bool random_prune = false;       // random scores instead of bias scores
  bool plain_ce_finetune = false;  // finetune without the per-sample weight
  bool no_kt = false;              // new masks may only use free units
  bool operator==(const Ablations&) const = default;
};

struct TrainConfig {
  loss::GceConfig gce;
  bias::PartitionConfig partition;
  double gamma = 0.6;
  int batch_size = 32;
  int stage1_epochs = 200;
  int patience = 20;  // stage-1 early stopping on validation GCE loss
  int finetune_epochs = 20;
  nn::OptimizerConfig optimizer;
  double alpha = 0.5;        // initial alpha; the fixed value unless train_alpha
  bool train_alpha = false;
  double selection_eod_weight = 1.0;  // model selection: bacc + w * (1 - EOD)
  Ablations ablations;

  void validate() const;  // throws ConfigError
};

// Mutable state of one continual learner.
struct ContinualModel {
  nn::NetworkConfig config;
  nn::ParamStore params;
  UnitRegistry registry;
  std::vector<nn::TaskHead> heads;

  static ContinualModel create(const nn::NetworkConfig& config);
  nn::Snapshot snapshot() const;
  bool operator==(const ContinualModel&) const = default;
};

struct BiasedStageResult {
  nn::Snapshot snapshot;  // params plus the stage-1 head
  loss::SampleWeightCache weights;
  int epochs_run = 0;
  int best_epoch = 0;
  std::vector<double> train_loss;  // mean per epoch
};

// Stage 1. `availability` restricts the forward pass (nullptr: all units).
// Only unfrozen trunk entries and the head move.
BiasedStageResult train_biased_stage(const nn::Network& network, nn::ParamStore& params,
                                     nn::TaskHead& head, const data::TaskData& task,
                                     const nn::ChannelMask* availability, const TrainConfig& config,
                                     std::uint64_t seed);

// Keeps the N - floor(gamma * N) lowest-scoring units of `scores.averaged`,
// ties kept in ascending UnitId order; then restores one unit in any layer
// left empty. Throws ConfigError for gamma outside (0, 1).
TaskMask prune_to_mask(const bias::BiasScoreTable& scores, double gamma,
                       const nn::NetworkConfig& config, int task_id);

// Uniform random scores over `units`, for the random-prune ablation and the
// unscoreable-task fallback.
bias::BiasScoreTable random_scores(int task_id, std::span<const UnitId> units, std::uint64_t seed);

struct FinetuneResult {
  int selected_epoch = 0;  // 1-based; 0 only when no finetune epoch ran
  std::vector<double> selection_scores;  // per finetune epoch; empty without validation data
  std::vector<double> train_loss;
};

FinetuneResult finetune_debiased(const nn::Network& network, nn::ParamStore& params,
                                 nn::TaskHead& head, const TaskMask& mask,
                                 const data::TaskData& task, const loss::SampleWeightCache& weights,
                                 int num_groups, const TrainConfig& config, std::uint64_t seed);

// Validation score used for model selection.
double selection_score(const nn::Network& network, const nn::ParamStore& params,
                       const nn::TaskHead& head, const nn::ChannelMask* mask,
                       const std::vector<data::SampleRecord>& samples, int num_groups,
                       double eod_weight);

// Freezes the kept units' filters and the head and records the mask.
void commit_task(const TaskMask& mask, UnitRegistry& registry, nn::ParamStore& params,
                 nn::TaskHead& head);

struct PipelineResult {
  TaskMask mask;
  std::optional<nn::Snapshot> biased;  // stage-1 network
  std::optional<nn::ChannelMask> availability;  // units stage 1 could use; nullopt: all
  std::optional<bias::BiasScoreTable> scores;
  bool random_fallback = false;
  int stage1_epochs = 0;
  FinetuneResult finetune;
  metrics::TaskMetrics validation;  // oracle-task metrics of the committed subnetwork
};

// Stage 1, scoring, pruning, finetuning and commit for one task.
PipelineResult run_task_pipeline(ContinualModel& model, const data::TaskData& task, int num_groups,
                                 const TrainConfig& config, std::uint64_t seed);

// Oracle-task predictions (global class ids) of one head under a mask.
std::vector<int> predict_classes(const nn::Network& network, const nn::ParamStore& params,
                                 const nn::TaskHead& head, const nn::ChannelMask* mask,
                                 std::span<const data::SampleRecord> samples);

enum class LossKind { Ce, Gce };

struct SupervisedResult {
  int epochs_run = 0;
  int best_epoch = 0;  // lowest validation loss (epochs_run without validation data)
  std::vector<double> train_loss;
};

// Mean-loss minibatch training of the head and the unfrozen trunk entries.
// Labels are mapped through head.classes. With validation samples, stops after
// `patience` epochs without improving the validation loss, then restores the
// best weights if `restore_best`; patience <= 0 disables stopping.
SupervisedResult train_supervised(const nn::Network& network, nn::ParamStore& params,
                                  nn::TaskHead& head, std::span<const data::SampleRecord> train,
                                  std::span<const data::SampleRecord> val,
                                  const nn::ChannelMask* mask, LossKind kind,
                                  const loss::GceConfig& gce, int epochs, int patience,
                                  int batch_size, const nn::OptimizerConfig& optimizer, Rng& shuffle,
                                  bool restore_best = true);

}  // namespace debias::subnet
