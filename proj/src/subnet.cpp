#include "debias/subnet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "debias/errors.hpp"
#include "debias/log.hpp"

namespace debias::subnet {

namespace {

int local_label(const nn::TaskHead& head, int global) {
  auto it = std::find(head.classes.begin(), head.classes.end(), global);
  if (it == head.classes.end()) {
    throw InvalidInput("label " + std::to_string(global) + " is not a class of head " +
                       std::to_string(head.task_id));
  }
  return static_cast<int>(it - head.classes.begin());
}

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

loss::LossAndGrad loss_of(LossKind kind, std::span<const double> logits, int target,
                          const loss::GceConfig& gce) {
  return kind == LossKind::Gce ? loss::gce_loss_logits(logits, target, gce)
                               : loss::ce_loss(logits, target);
}

// Mean loss over `samples` evaluated in batches.
double mean_loss(const nn::Network& network, const nn::ParamStore& params, const nn::TaskHead& head,
                 const nn::ChannelMask* mask, std::span<const data::SampleRecord> samples,
                 LossKind kind, const loss::GceConfig& gce) {
  double total = 0.0;
  constexpr std::size_t kBatch = 64;
  for (std::size_t start = 0; start < samples.size(); start += kBatch) {
    const std::size_t end = std::min(samples.size(), start + kBatch);
    std::vector<const nn::Image*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&samples[i].image);
    const auto fr = network.forward(params, head, batch, mask);
    for (std::size_t i = start; i < end; ++i) {
      total += loss_of(kind, fr.logits_of(static_cast<int>(i - start)),
                       local_label(head, samples[i].label), gce).loss;
    }
  }
  return total / static_cast<double>(samples.size());
}

bool any_free(const nn::NetworkConfig& config, const nn::ParamStore& params,
              const nn::ChannelMask* mask) {
  for (const auto& u : units_in(config, mask)) {
    if (!params.unit_frozen(config, u.layer, u.channel)) return true;
  }
  return false;
}

}  // namespace

int TaskMask::kept_count() const {
  int n = 0;
  for (const auto& layer : kept) {
    for (auto k : layer) n += k != 0;
  }
  return n;
}

std::vector<UnitId> TaskMask::kept_units() const {
  std::vector<UnitId> out;
  for (int l = 0; l < static_cast<int>(kept.size()); ++l) {
    for (int c = 0; c < static_cast<int>(kept[l].size()); ++c) {
      if (kept[l][c]) out.push_back({l, c});
    }
  }
  return out;
}

UnitRegistry::UnitRegistry(const nn::NetworkConfig& config) : config_(config) {
  for (const auto& u : units_in(config, nullptr)) memberships_[u];
}

const std::set<int>& UnitRegistry::memberships(UnitId u) const {
  auto it = memberships_.find(u);
  if (it == memberships_.end()) throw InvalidInput("unknown unit " + to_string(u));
  return it->second;
}

std::vector<UnitId> UnitRegistry::free_units() const {
  std::vector<UnitId> out;
  for (const auto& [u, m] : memberships_) {
    if (m.empty()) out.push_back(u);
  }
  return out;
}

nn::ChannelMask UnitRegistry::free_mask() const {
  nn::ChannelMask mask = nn::full_mask(config_);
  for (const auto& [u, m] : memberships_) mask[u.layer][u.channel] = m.empty() ? 1 : 0;
  return mask;
}

const TaskMask& UnitRegistry::mask(int task_id) const {
  auto it = masks_.find(task_id);
  if (it == masks_.end()) throw StateError("task " + std::to_string(task_id) + " is not committed");
  return it->second;
}

void UnitRegistry::record(const TaskMask& mask) {
  if (committed(mask.task_id)) {
    throw StateError("task " + std::to_string(mask.task_id) + " is already committed");
  }
  if (mask.kept.size() != static_cast<std::size_t>(config_.num_layers())) {
    throw InvalidInput("mask layer count does not match the network");
  }
  for (const auto& u : mask.kept_units()) memberships_.at(u).insert(mask.task_id);
  masks_.emplace(mask.task_id, mask);
}

void TrainConfig::validate() const {
  gce.validate();
  partition.validate();
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in (0, 1)");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (stage1_epochs < 0 || finetune_epochs < 0) throw ConfigError("epoch counts must be non-negative");
  if (optimizer.learning_rate <= 0.0) throw ConfigError("learning rate must be positive");
  if (selection_eod_weight < 0.0) throw ConfigError("selection_eod_weight must be non-negative");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
}

ContinualModel ContinualModel::create(const nn::NetworkConfig& config) {
  config.validate();
  return {config, nn::ParamStore::initialize(config), UnitRegistry(config), {}};
}

nn::Snapshot ContinualModel::snapshot() const { return nn::Snapshot(config, params, heads); }

SupervisedResult train_supervised(const nn::Network& network, nn::ParamStore& params,
                                  nn::TaskHead& head, std::span<const data::SampleRecord> train,
                                  std::span<const data::SampleRecord> val,
                                  const nn::ChannelMask* mask, LossKind kind,
                                  const loss::GceConfig& gce, int epochs, int patience,
                                  int batch_size, const nn::OptimizerConfig& optimizer, Rng& shuffle,
                                  bool restore_best) {
  if (train.empty()) throw InvalidInput("training split is empty");
  std::optional<nn::ChannelMask> owned;
  if (mask) owned = *mask;
  nn::TrainingSession session(network, params, head, optimizer, owned);

  SupervisedResult result;
  const bool early_stop = !val.empty() && patience > 0;
  double best_val = std::numeric_limits<double>::infinity();
  nn::ParamStore best_params;
  nn::TaskHead best_head;
  int since_best = 0;

  for (int epoch = 1; epoch <= epochs; ++epoch) {
    const auto order = shuffled_indices(train.size(), shuffle);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
      std::vector<const nn::Image*> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(&train[order[i]].image);
      const auto& fr = session.forward(batch);
      const double scale = 1.0 / static_cast<double>(batch.size());
      std::vector<double> dlogits(fr.logits.size());
      for (std::size_t i = start; i < end; ++i) {
        const int b = static_cast<int>(i - start);
        const auto lg = loss_of(kind, fr.logits_of(b), local_label(head, train[order[i]].label), gce);
        epoch_loss += lg.loss;
        for (int k = 0; k < fr.num_classes; ++k) {
          dlogits[static_cast<std::size_t>(b) * fr.num_classes + k] = lg.grad[k] * scale;
        }
      }
      session.backward_and_step(dlogits);
    }
    result.train_loss.push_back(epoch_loss / static_cast<double>(train.size()));
    result.epochs_run = epoch;
    if (!early_stop) continue;
    const double v = mean_loss(network, params, head, mask, val, kind, gce);
    if (v < best_val) {
      best_val = v;
      if (restore_best) {
        best_params = params;
        best_head = head;
      }
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= patience) {
      break;
    }
  }
  if (!early_stop) {
    result.best_epoch = result.epochs_run;
  } else if (restore_best && result.best_epoch > 0) {
    params = std::move(best_params);
    head = std::move(best_head);
  }
  return result;
}

BiasedStageResult train_biased_stage(const nn::Network& network, nn::ParamStore& params,
                                     nn::TaskHead& head, const data::TaskData& task,
                                     const nn::ChannelMask* availability, const TrainConfig& config,
                                     std::uint64_t seed) {
  config.validate();
  if (task.train.empty()) throw InvalidInput("task " + std::to_string(task.task_id) + " has no training data");
  if (!any_free(network.config(), params, availability)) {
    logger()->warn("task {}: no free units; stage 1 trains the head only", task.task_id);
  }
  const LossKind kind = config.ablations.ce_for_gce ? LossKind::Ce : LossKind::Gce;
  Rng shuffle = derive_rng(seed, "stage1-shuffle", static_cast<std::uint64_t>(task.task_id));
  const auto sup = train_supervised(network, params, head, task.train, task.val, availability, kind,
                                    config.gce, config.stage1_epochs, config.patience,
                                    config.batch_size, config.optimizer, shuffle,
                                    /*restore_best=*/false);

  std::map<std::uint64_t, double> gce_values;
  constexpr std::size_t kBatch = 64;
  for (std::size_t start = 0; start < task.train.size(); start += kBatch) {
    const std::size_t end = std::min(task.train.size(), start + kBatch);
    std::vector<const nn::Image*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&task.train[i].image);
    const auto fr = network.forward(params, head, batch, availability);
    for (std::size_t i = start; i < end; ++i) {
      const auto lg = loss::gce_loss_logits(fr.logits_of(static_cast<int>(i - start)),
                                            local_label(head, task.train[i].label), config.gce);
      gce_values.emplace(task.train[i].id, lg.loss);
    }
  }
  loss::SampleWeightCache cache;
  cache.populate(std::move(gce_values));
  return {nn::Snapshot(network.config(), params, {head}), std::move(cache), sup.epochs_run,
          sup.best_epoch, sup.train_loss};
}

TaskMask prune_to_mask(const bias::BiasScoreTable& scores, double gamma,
                       const nn::NetworkConfig& config, int task_id) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in (0, 1)");
  if (scores.averaged.empty()) throw InvalidInput("score table has no units");
  std::vector<std::pair<double, UnitId>> ranked;
  for (const auto& [u, s] : scores.averaged) {
    if (u.layer < 0 || u.layer >= config.num_layers() || u.channel < 0 ||
        u.channel >= config.conv_layers[u.layer].out_channels) {
      throw InvalidInput("score table names unit " + to_string(u) + " outside the network");
    }
    if (std::isnan(s)) throw InvalidInput("score of unit " + to_string(u) + " is NaN");
    ranked.emplace_back(s, u);
  }
  std::sort(ranked.begin(), ranked.end());
  const auto n = ranked.size();
  const auto pruned = static_cast<std::size_t>(std::floor(gamma * static_cast<double>(n)));
  const auto keep = n - pruned;

  TaskMask mask{task_id, nn::full_mask(config)};
  for (auto& layer : mask.kept) std::fill(layer.begin(), layer.end(), std::uint8_t{0});
  for (std::size_t i = 0; i < keep; ++i) mask.kept[ranked[i].second.layer][ranked[i].second.channel] = 1;

  for (int l = 0; l < config.num_layers(); ++l) {
    if (std::any_of(mask.kept[l].begin(), mask.kept[l].end(), [](auto k) { return k != 0; })) continue;
    // Lowest-scoring pruned unit of this layer; ranked is ascending.
    auto it = std::find_if(ranked.begin() + static_cast<std::ptrdiff_t>(keep), ranked.end(),
                           [l](const auto& r) { return r.second.layer == l; });
    if (it == ranked.end()) {
      throw StateError("layer " + std::to_string(l) + " has no available unit for task " +
                       std::to_string(task_id));
    }
    logger()->info("task {}: layer {} emptied by pruning; keeping {}", task_id, l,
                   to_string(it->second));
    mask.kept[l][it->second.channel] = 1;
  }
  return mask;
}

bias::BiasScoreTable random_scores(int task_id, std::span<const UnitId> units, std::uint64_t seed) {
  Rng rng = derive_rng(seed, "random-prune", static_cast<std::uint64_t>(task_id));
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  bias::BiasScoreTable table;
  table.task_id = task_id;
  for (const auto& u : units) table.averaged[u] = dist(rng);
  return table;
}

std::vector<int> predict_classes(const nn::Network& network, const nn::ParamStore& params,
                                 const nn::TaskHead& head, const nn::ChannelMask* mask,
                                 std::span<const data::SampleRecord> samples) {
  std::vector<int> out;
  out.reserve(samples.size());
  constexpr std::size_t kBatch = 64;
  for (std::size_t start = 0; start < samples.size(); start += kBatch) {
    const std::size_t end = std::min(samples.size(), start + kBatch);
    std::vector<const nn::Image*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&samples[i].image);
    const auto fr = network.forward(params, head, batch, mask);
    for (int b = 0; b < fr.batch; ++b) {
      const auto lg = fr.logits_of(b);
      out.push_back(head.classes[std::max_element(lg.begin(), lg.end()) - lg.begin()]);
    }
  }
  return out;
}

namespace {

metrics::TaskMetrics oracle_metrics(const nn::Network& network, const nn::ParamStore& params,
                                    const nn::TaskHead& head, const nn::ChannelMask* mask,
                                    const std::vector<data::SampleRecord>& samples, int num_groups) {
  const auto preds = predict_classes(network, params, head, mask, samples);
  std::vector<int> labels;
  std::vector<int> attrs;
  for (const auto& s : samples) {
    labels.push_back(s.label);
    attrs.push_back(s.attribute);
  }
  return metrics::task_metrics(head.task_id, preds, labels, attrs, head.classes, num_groups);
}

}  // namespace

double selection_score(const nn::Network& network, const nn::ParamStore& params,
                       const nn::TaskHead& head, const nn::ChannelMask* mask,
                       const std::vector<data::SampleRecord>& samples, int num_groups,
                       double eod_weight) {
  const auto m = oracle_metrics(network, params, head, mask, samples, num_groups);
  // An undefined EOD earns no fairness credit.
  return m.balanced_acc + eod_weight * (m.eod ? 1.0 - *m.eod : 0.0);
}

FinetuneResult finetune_debiased(const nn::Network& network, nn::ParamStore& params,
                                 nn::TaskHead& head, const TaskMask& mask,
                                 const data::TaskData& task, const loss::SampleWeightCache& weights,
                                 int num_groups, const TrainConfig& config, std::uint64_t seed) {
  config.validate();
  if (task.train.empty()) throw InvalidInput("task " + std::to_string(task.task_id) + " has no training data");
  const bool weighted = !config.ablations.plain_ce_finetune;
  if (weighted && !weights.populated()) throw StateError("sample weight cache is not populated");

  nn::TrainingSession session(network, params, head, config.optimizer, mask.kept);
  Rng shuffle = derive_rng(seed, "finetune-shuffle", static_cast<std::uint64_t>(task.task_id));
  FinetuneResult result;
  const bool select = !task.val.empty();
  if (!select) {
    logger()->info("task {}: empty validation split; keeping last-epoch finetune weights",
                   task.task_id);
  }
  double best = -std::numeric_limits<double>::infinity();
  nn::ParamStore best_params;
  nn::TaskHead best_head;
  auto consider = [&](int epoch) {
    const double s = selection_score(network, params, head, &mask.kept, task.val, num_groups,
                                     config.selection_eod_weight);
    result.selection_scores.push_back(s);
    if (s > best) {
      best = s;
      best_params = params;
      best_head = head;
      result.selected_epoch = epoch;
    }
  };

  for (int epoch = 1; epoch <= config.finetune_epochs; ++epoch) {
    const auto order = shuffled_indices(task.train.size(), shuffle);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<const nn::Image*> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(&task.train[order[i]].image);
      const auto& fr = session.forward(batch);
      const double scale = 1.0 / static_cast<double>(batch.size());
      const double alpha = loss::alpha_value(params.alpha_raw);
      std::vector<double> dlogits(fr.logits.size());
      double dalpha = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const int b = static_cast<int>(i - start);
        const auto& sample = task.train[order[i]];
        const auto ce = loss::ce_loss(fr.logits_of(b), local_label(head, sample.label));
        double w = 1.0;
        double g = 0.0;
        if (weighted) {
          g = weights.at(sample.id);
          w = loss::wce_weight(g, alpha);
        }
        epoch_loss += w * ce.loss;
        dalpha += g * w * ce.loss * scale;
        for (int k = 0; k < fr.num_classes; ++k) {
          dlogits[static_cast<std::size_t>(b) * fr.num_classes + k] = w * ce.grad[k] * scale;
        }
      }
      session.backward_and_step(dlogits);
      if (weighted && config.train_alpha) {
        session.step_alpha(dalpha * loss::alpha_derivative(params.alpha_raw));
      }
    }
    result.train_loss.push_back(epoch_loss / static_cast<double>(task.train.size()));
    if (select) consider(epoch);
  }
  if (select && config.finetune_epochs > 0) {
    params = std::move(best_params);
    head = std::move(best_head);
  } else {
    result.selected_epoch = config.finetune_epochs;
  }
  return result;
}

void commit_task(const TaskMask& mask, UnitRegistry& registry, nn::ParamStore& params,
                 nn::TaskHead& head) {
  if (head.task_id != mask.task_id) throw InvalidInput("head and mask belong to different tasks");
  registry.record(mask);
  for (const auto& u : mask.kept_units()) params.freeze_unit(registry.config(), u.layer, u.channel);
  head.freeze_all();
}

PipelineResult run_task_pipeline(ContinualModel& model, const data::TaskData& task, int num_groups,
                                 const TrainConfig& config, std::uint64_t seed) {
  config.validate();
  if (model.registry.committed(task.task_id)) {
    throw StateError("task " + std::to_string(task.task_id) + " is already committed");
  }
  const nn::Network network(model.config);
  auto head = nn::TaskHead::initialize(model.config, task.task_id, task.classes,
                                       seed);
  std::optional<nn::ChannelMask> availability;
  if (config.ablations.no_kt) availability = model.registry.free_mask();
  const nn::ChannelMask* avail = availability ? &*availability : nullptr;

  PipelineResult result;
  auto stage1 = train_biased_stage(network, model.params, head, task, avail, config, seed);
  result.stage1_epochs = stage1.epochs_run;
  const auto units = units_in(model.config, avail);

  bias::BiasScoreTable table;
  if (config.ablations.random_prune) {
    table = random_scores(task.task_id, units, seed);
  } else {
    try {
      const auto part = bias::partition_samples(stage1.snapshot, task.task_id, task.train, avail,
                                                config.partition);
      table = bias::bias_scores(stage1.snapshot, part, task.train, avail);
    } catch (const UnscoreableTask& e) {
      logger()->warn("{}; falling back to random pruning", e.what());
      table = random_scores(task.task_id, units, seed);
      result.random_fallback = true;
    }
  }
  result.mask = prune_to_mask(table, config.gamma, model.config, task.task_id);
  result.scores = std::move(table);
  result.biased = stage1.snapshot;
  result.availability = availability;

  result.finetune = finetune_debiased(network, model.params, head, result.mask, task,
                                      stage1.weights, num_groups, config, seed);
  if (!task.val.empty()) {
    result.validation = oracle_metrics(network, model.params, head, &result.mask.kept, task.val,
                                       num_groups);
  }
  commit_task(result.mask, model.registry, model.params, head);
  model.heads.push_back(std::move(head));
  return result;
}

}  // namespace debias::subnet
