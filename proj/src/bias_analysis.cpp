#include "debias/bias_analysis.hpp"

#include <algorithm>
#include <string>
#include <unordered_map>

#include "debias/errors.hpp"
#include "debias/log.hpp"
#include "debias/losses.hpp"

namespace debias::bias {

void PartitionConfig::validate() const {
  if (!(tau > 0.5 && tau < 1.0)) throw ConfigError("confidence threshold tau must lie in (0.5, 1)");
}

std::size_t SamplePartition::total() const {
  std::size_t n = excluded.size();
  for (const auto& [c, s] : easy) n += s.size();
  for (const auto& [c, s] : hard) n += s.size();
  return n;
}

SamplePartition partition_from_predictions(int task_id, std::span<const Prediction> predictions,
                                           const PartitionConfig& config) {
  config.validate();
  if (predictions.empty()) throw InvalidInput("cannot partition an empty dataset");
  SamplePartition part;
  part.task_id = task_id;
  std::map<int, std::vector<std::uint64_t>> unconfident_wrong;
  for (const auto& p : predictions) {
    part.easy[p.label];
    part.hard[p.label];
    const bool correct = p.predicted == p.label;
    const bool confident = p.confidence >= config.tau;
    if (correct && confident) {
      part.easy[p.label].insert(p.id);
    } else if (!correct && (confident || config.hard_rule == HardRule::AnyMisclassified)) {
      part.hard[p.label].insert(p.id);
    } else {
      part.excluded.insert(p.id);
      if (!correct) unconfident_wrong[p.label].push_back(p.id);
    }
  }
  if (config.hard_rule == HardRule::ConfidentWithFallback) {
    for (auto& [cls, ids] : part.hard) {
      if (!ids.empty()) continue;
      auto it = unconfident_wrong.find(cls);
      if (it == unconfident_wrong.end()) {
        logger()->info("task {}: class {} has no misclassified samples; it will not be scored",
                       task_id, cls);
        continue;
      }
      logger()->info("task {}: class {} has no confident misclassifications; using all {} misclassified samples",
                     task_id, cls, it->second.size());
      for (auto id : it->second) {
        ids.insert(id);
        part.excluded.erase(id);
      }
    }
  }
  return part;
}

std::vector<Prediction> predict(const nn::Snapshot& snapshot, int task_id,
                                const std::vector<data::SampleRecord>& samples,
                                const nn::ChannelMask* availability) {
  const auto& head = snapshot.head(task_id);
  std::vector<Prediction> out;
  out.reserve(samples.size());
  constexpr std::size_t kBatch = 64;
  for (std::size_t start = 0; start < samples.size(); start += kBatch) {
    const std::size_t end = std::min(samples.size(), start + kBatch);
    std::vector<const nn::Image*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&samples[i].image);
    const auto fr = snapshot.forward(task_id, batch, availability);
    for (std::size_t i = start; i < end; ++i) {
      const auto probs = loss::softmax(fr.logits_of(static_cast<int>(i - start)));
      const auto top = std::max_element(probs.begin(), probs.end()) - probs.begin();
      out.push_back({samples[i].id, samples[i].label, head.classes[top], probs[top]});
    }
  }
  return out;
}

SamplePartition partition_samples(const nn::Snapshot& snapshot, int task_id,
                                  const std::vector<data::SampleRecord>& samples,
                                  const nn::ChannelMask* availability,
                                  const PartitionConfig& config) {
  config.validate();
  if (samples.empty()) throw InvalidInput("cannot partition an empty dataset");
  const auto preds = predict(snapshot, task_id, samples, availability);
  return partition_from_predictions(task_id, preds, config);
}

double spatial_variance(std::span<const double> map) {
  if (map.size() < 2) throw ConfigError("spatial variance needs a feature map with at least 2 cells");
  double mean = 0.0;
  for (double v : map) mean += v;
  mean /= static_cast<double>(map.size());
  double acc = 0.0;
  for (double v : map) acc += (v - mean) * (v - mean);
  return acc / static_cast<double>(map.size());
}

BiasScoreTable scores_from_variances(const SamplePartition& partition, std::span<const UnitId> units,
                                     const std::map<std::uint64_t, std::vector<double>>& variances) {
  BiasScoreTable table;
  table.task_id = partition.task_id;
  auto mean_over = [&](const std::set<std::uint64_t>& ids, std::size_t k) {
    double s = 0.0;
    for (auto id : ids) {  // ascending id: fixed summation order
      auto it = variances.find(id);
      if (it == variances.end()) throw InvalidInput("no activation variances for sample " + std::to_string(id));
      s += it->second.at(k);
    }
    return s / static_cast<double>(ids.size());
  };
  for (const auto& [cls, easy] : partition.easy) {
    auto hit = partition.hard.find(cls);
    if (easy.empty() || hit == partition.hard.end() || hit->second.empty()) {
      logger()->info("task {}: class {} lacks a nonempty easy or hard set; omitted from the average",
                     partition.task_id, cls);
      table.skipped_classes.push_back(cls);
      continue;
    }
    table.scored_classes.push_back(cls);
    for (std::size_t k = 0; k < units.size(); ++k) {
      table.per_class[{cls, units[k]}] = mean_over(easy, k) - mean_over(hit->second, k);
    }
  }
  if (table.scored_classes.empty()) {
    throw UnscoreableTask("task " + std::to_string(partition.task_id) +
                          ": no class has both easy and hard samples");
  }
  for (const auto& u : units) {
    double s = 0.0;
    for (int cls : table.scored_classes) s += table.per_class.at({cls, u});
    table.averaged[u] = s / static_cast<double>(table.scored_classes.size());
  }
  return table;
}

BiasScoreTable bias_scores(const nn::Snapshot& snapshot, const SamplePartition& partition,
                           const std::vector<data::SampleRecord>& samples,
                           const nn::ChannelMask* availability) {
  std::set<std::uint64_t> needed;
  for (const auto& [c, ids] : partition.easy) needed.insert(ids.begin(), ids.end());
  for (const auto& [c, ids] : partition.hard) needed.insert(ids.begin(), ids.end());
  std::unordered_map<std::uint64_t, const data::SampleRecord*> by_id;
  for (const auto& s : samples) by_id[s.id] = &s;

  const auto units = units_in(snapshot.config(), availability);
  std::map<std::uint64_t, std::vector<double>> variances;
  std::vector<std::uint64_t> ids(needed.begin(), needed.end());
  constexpr std::size_t kBatch = 64;
  for (std::size_t start = 0; start < ids.size(); start += kBatch) {
    const std::size_t end = std::min(ids.size(), start + kBatch);
    std::vector<const nn::Image*> batch;
    for (std::size_t i = start; i < end; ++i) {
      auto it = by_id.find(ids[i]);
      if (it == by_id.end()) throw InvalidInput("partition refers to unknown sample " + std::to_string(ids[i]));
      batch.push_back(&it->second->image);
    }
    const auto fr = snapshot.network().forward_features(snapshot.params(), batch, availability);
    for (std::size_t i = start; i < end; ++i) {
      std::vector<double> v(units.size());
      for (std::size_t k = 0; k < units.size(); ++k) {
        v[k] = spatial_variance(snapshot.network().unit_map(fr, units[k].layer, units[k].channel,
                                                            static_cast<int>(i - start)));
      }
      variances.emplace(ids[i], std::move(v));
    }
  }
  return scores_from_variances(partition, units, variances);
}

void write_scores_csv(const BiasScoreTable& table, std::ostream& os) {
  os << "task,class,layer,channel,score\n";
  os.precision(17);
  for (const auto& [key, score] : table.per_class) {
    os << table.task_id << ',' << key.first << ',' << key.second.layer << ','
       << key.second.channel << ',' << score << '\n';
  }
  for (const auto& [unit, score] : table.averaged) {
    os << table.task_id << ",avg," << unit.layer << ',' << unit.channel << ',' << score << '\n';
  }
}

}  // namespace debias::bias
