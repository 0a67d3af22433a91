#include "debias/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "debias/errors.hpp"
#include "debias/log.hpp"
#include "debias/losses.hpp"
#include "debias/rng.hpp"

namespace debias::metrics {

namespace {

void check_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw InvalidInput(std::string(what) + ": input lengths differ");
  if (a == 0) throw InvalidInput(std::string(what) + ": empty input");
}

bool in_range(int v, int n) { return v >= 0 && v < n; }

}  // namespace

ClassificationScores classification_metrics(std::span<const int> preds, std::span<const int> labels,
                                            int num_classes) {
  check_lengths(preds.size(), labels.size(), "classification_metrics");
  std::vector<double> tp(num_classes, 0.0);
  std::vector<double> support(num_classes, 0.0);
  std::vector<double> predicted(num_classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!in_range(labels[i], num_classes)) throw InvalidInput("label out of range");
    support[labels[i]] += 1.0;
    if (in_range(preds[i], num_classes)) {
      predicted[preds[i]] += 1.0;
      if (preds[i] == labels[i]) tp[labels[i]] += 1.0;
    }
  }
  double recall_sum = 0.0;
  double f1_sum = 0.0;
  int included = 0;
  for (int c = 0; c < num_classes; ++c) {
    if (support[c] == 0.0) {
      logger()->debug("classification_metrics: class {} has no support, excluded", c);
      continue;
    }
    ++included;
    const double recall = tp[c] / support[c];
    const double precision = predicted[c] > 0.0 ? tp[c] / predicted[c] : 0.0;
    recall_sum += recall;
    f1_sum += precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  }
  return {f1_sum / included, recall_sum / included};
}

double dpr(std::span<const int> preds, std::span<const int> attributes, int num_classes,
           int num_groups) {
  check_lengths(preds.size(), attributes.size(), "dpr");
  std::vector<double> group_n(num_groups, 0.0);
  std::vector<double> hits(static_cast<std::size_t>(num_groups) * num_classes, 0.0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!in_range(attributes[i], num_groups)) throw InvalidInput("attribute out of range");
    group_n[attributes[i]] += 1.0;
    if (in_range(preds[i], num_classes)) hits[attributes[i] * num_classes + preds[i]] += 1.0;
  }
  const int present = static_cast<int>(std::count_if(group_n.begin(), group_n.end(),
                                                     [](double n) { return n > 0.0; }));
  if (present < 2) throw UndefinedMetric("dpr needs at least two groups present");
  double sum = 0.0;
  int included = 0;
  for (int c = 0; c < num_classes; ++c) {
    double lo = 1.0;
    double hi = 0.0;
    for (int a = 0; a < num_groups; ++a) {
      if (group_n[a] == 0.0) continue;
      const double rate = hits[a * num_classes + c] / group_n[a];
      lo = std::min(lo, rate);
      hi = std::max(hi, rate);
    }
    if (hi == 0.0) {
      logger()->debug("dpr: class {} never predicted, skipped", c);
      continue;
    }
    sum += lo / hi;
    ++included;
  }
  if (included == 0) throw UndefinedMetric("dpr: no class is ever predicted");
  return sum / included;
}

double eod(std::span<const int> preds, std::span<const int> labels,
           std::span<const int> attributes, int num_classes, int num_groups) {
  check_lengths(preds.size(), labels.size(), "eod");
  check_lengths(preds.size(), attributes.size(), "eod");
  std::vector<double> group_n(num_groups, 0.0);
  std::vector<double> pos(static_cast<std::size_t>(num_groups) * num_classes, 0.0);
  std::vector<double> tp(static_cast<std::size_t>(num_groups) * num_classes, 0.0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!in_range(attributes[i], num_groups)) throw InvalidInput("attribute out of range");
    if (!in_range(labels[i], num_classes)) throw InvalidInput("label out of range");
    const int a = attributes[i];
    group_n[a] += 1.0;
    pos[a * num_classes + labels[i]] += 1.0;
    if (preds[i] == labels[i]) tp[a * num_classes + labels[i]] += 1.0;
  }
  const int present = static_cast<int>(std::count_if(group_n.begin(), group_n.end(),
                                                     [](double n) { return n > 0.0; }));
  if (present < 2) throw UndefinedMetric("eod needs at least two groups present");
  double sum = 0.0;
  int included = 0;
  for (int c = 0; c < num_classes; ++c) {
    double lo = 1.0;
    double hi = 0.0;
    bool ok = true;
    for (int a = 0; a < num_groups; ++a) {
      if (group_n[a] == 0.0) continue;
      const double p = pos[a * num_classes + c];
      if (p == 0.0) {
        ok = false;
        break;
      }
      const double tpr = tp[a * num_classes + c] / p;
      lo = std::min(lo, tpr);
      hi = std::max(hi, tpr);
    }
    if (!ok) {
      logger()->debug("eod: class {} lacks positives in some group, skipped", c);
      continue;
    }
    sum += hi - lo;
    ++included;
  }
  if (included == 0) throw UndefinedMetric("eod: no class has positives in every group");
  return sum / included;
}

std::vector<std::optional<double>> per_group_balanced_acc(std::span<const int> preds,
                                                          std::span<const int> labels,
                                                          std::span<const int> attributes,
                                                          int num_classes, int num_groups) {
  check_lengths(preds.size(), labels.size(), "per_group_balanced_acc");
  check_lengths(preds.size(), attributes.size(), "per_group_balanced_acc");
  std::vector<std::optional<double>> out(num_groups);
  for (int g = 0; g < num_groups; ++g) {
    std::vector<int> p;
    std::vector<int> l;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (attributes[i] == g) {
        p.push_back(preds[i]);
        l.push_back(labels[i]);
      }
    }
    if (!p.empty()) out[g] = classification_metrics(p, l, num_classes).balanced_acc;
  }
  return out;
}

double auc(std::span<const double> positive_scores, std::span<const double> negative_scores) {
  if (positive_scores.empty() || negative_scores.empty()) {
    throw UndefinedMetric("auc needs both positive and negative samples");
  }
  // Rank-sum with average ranks for ties.
  std::vector<std::pair<double, int>> all;
  all.reserve(positive_scores.size() + negative_scores.size());
  for (double s : positive_scores) all.emplace_back(s, 1);
  for (double s : negative_scores) all.emplace_back(s, 0);
  std::sort(all.begin(), all.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].second == 1) rank_sum += avg_rank;
    }
    i = j;
  }
  const double np = static_cast<double>(positive_scores.size());
  const double nn = static_cast<double>(negative_scores.size());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

TaskMetrics task_metrics(int task_id, std::span<const int> preds, std::span<const int> labels,
                         std::span<const int> attributes, std::span<const int> classes,
                         int num_groups) {
  check_lengths(preds.size(), labels.size(), "task_metrics");
  auto local = [&classes](int global) {
    auto it = std::find(classes.begin(), classes.end(), global);
    return it == classes.end() ? -1 : static_cast<int>(it - classes.begin());
  };
  const int k = static_cast<int>(classes.size());
  std::vector<int> lp(preds.size());
  std::vector<int> ll(labels.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    lp[i] = local(preds[i]);
    ll[i] = local(labels[i]);
    if (ll[i] < 0) throw InvalidInput("label outside the task's classes");
  }
  TaskMetrics m;
  m.task_id = task_id;
  const auto cls = classification_metrics(lp, ll, k);
  m.macro_f1 = cls.macro_f1;
  m.balanced_acc = cls.balanced_acc;
  m.per_group_acc = per_group_balanced_acc(lp, ll, attributes, k, num_groups);
  try {
    m.dpr = dpr(lp, attributes, k, num_groups);
  } catch (const UndefinedMetric& e) {
    logger()->info("task {}: {}", task_id, e.what());
  }
  try {
    m.eod = eod(lp, ll, attributes, k, num_groups);
  } catch (const UndefinedMetric& e) {
    logger()->info("task {}: {}", task_id, e.what());
  }
  return m;
}

TaskMetrics average(std::span<const TaskMetrics> tasks, int num_groups) {
  TaskMetrics avg;
  avg.per_group_acc.assign(num_groups, std::nullopt);
  if (tasks.empty()) return avg;
  auto mean_opt = [&tasks](auto getter) -> std::optional<double> {
    double s = 0.0;
    int n = 0;
    for (const auto& t : tasks) {
      if (auto v = getter(t)) {
        s += *v;
        ++n;
      }
    }
    if (n == 0) return std::nullopt;
    return s / n;
  };
  const double n = static_cast<double>(tasks.size());
  for (const auto& t : tasks) {
    avg.macro_f1 += t.macro_f1 / n;
    avg.balanced_acc += t.balanced_acc / n;
    avg.num_batches += t.num_batches;
    avg.mixed_batches += t.mixed_batches;
  }
  for (int g = 0; g < num_groups; ++g) {
    avg.per_group_acc[g] = mean_opt([g](const TaskMetrics& t) -> std::optional<double> {
      return g < static_cast<int>(t.per_group_acc.size()) ? t.per_group_acc[g] : std::nullopt;
    });
  }
  avg.dpr = mean_opt([](const TaskMetrics& t) { return t.dpr; });
  avg.eod = mean_opt([](const TaskMetrics& t) { return t.eod; });
  avg.probe_auc = mean_opt([](const TaskMetrics& t) { return t.probe_auc; });
  avg.task_selection_acc = mean_opt([](const TaskMetrics& t) { return t.task_selection_acc; });
  return avg;
}

double ProbeResult::mean_auc() const {
  if (auc.empty()) throw UndefinedMetric("probe produced no group pairs");
  double s = 0.0;
  for (const auto& [k, v] : auc) s += v;
  return s / static_cast<double>(auc.size());
}

ProbeResult attribute_probe_features(std::span<const double> train_features,
                                     std::span<const int> train_attributes,
                                     std::span<const double> test_features,
                                     std::span<const int> test_attributes, int dim,
                                     int num_groups, const ProbeConfig& config) {
  if (num_groups < 2) throw UndefinedMetric("attribute probe needs at least two groups");
  if (dim <= 0) throw InvalidInput("probe feature dimension must be positive");
  const std::size_t n_train = train_attributes.size();
  const std::size_t n_test = test_attributes.size();
  if (train_features.size() != n_train * dim || test_features.size() != n_test * dim) {
    throw InvalidInput("probe feature matrix does not match attribute count");
  }
  if (n_train == 0 || n_test == 0) throw InvalidInput("probe needs train and test samples");

  std::vector<double> mean(dim, 0.0);
  std::vector<double> scale(dim, 1.0);
  if (config.standardize) {
    for (std::size_t i = 0; i < n_train; ++i) {
      for (int d = 0; d < dim; ++d) mean[d] += train_features[i * dim + d];
    }
    for (double& m : mean) m /= static_cast<double>(n_train);
    std::vector<double> var(dim, 0.0);
    for (std::size_t i = 0; i < n_train; ++i) {
      for (int d = 0; d < dim; ++d) {
        const double c = train_features[i * dim + d] - mean[d];
        var[d] += c * c;
      }
    }
    for (int d = 0; d < dim; ++d) {
      const double sd = std::sqrt(var[d] / static_cast<double>(n_train));
      scale[d] = sd > 1e-12 ? 1.0 / sd : 0.0;
    }
  }
  auto feature = [&](std::span<const double> feats, std::size_t i, int d) {
    return (feats[i * dim + d] - mean[d]) * scale[d];
  };

  nn::Parameter weight(static_cast<std::size_t>(num_groups) * dim);
  nn::Parameter bias(num_groups);
  nn::Optimizer opt({nn::OptimizerKind::Adam, config.learning_rate});
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = derive_rng(config.seed, "probe-shuffle");
  std::vector<double> gw(weight.size());
  std::vector<double> gb(bias.size());
  std::vector<double> logits(num_groups);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n_train; start += config.batch_size) {
      const std::size_t end = std::min(n_train, start + config.batch_size);
      const double inv = 1.0 / static_cast<double>(end - start);
      std::fill(gw.begin(), gw.end(), 0.0);
      std::fill(gb.begin(), gb.end(), 0.0);
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t i = order[b];
        for (int g = 0; g < num_groups; ++g) {
          double s = bias.value[g];
          for (int d = 0; d < dim; ++d) s += weight.value[g * dim + d] * feature(train_features, i, d);
          logits[g] = s;
        }
        const auto ce = loss::ce_loss(logits, train_attributes[i]);
        for (int g = 0; g < num_groups; ++g) {
          gb[g] += ce.grad[g] * inv;
          for (int d = 0; d < dim; ++d) gw[g * dim + d] += ce.grad[g] * feature(train_features, i, d) * inv;
        }
      }
      opt.begin_step();
      opt.step(0, weight, gw);
      opt.step(1, bias, gb);
    }
  }

  std::vector<std::vector<double>> test_logits(n_test, std::vector<double>(num_groups));
  for (std::size_t i = 0; i < n_test; ++i) {
    for (int g = 0; g < num_groups; ++g) {
      double s = bias.value[g];
      for (int d = 0; d < dim; ++d) s += weight.value[g * dim + d] * feature(test_features, i, d);
      test_logits[i][g] = s;
    }
  }
  ProbeResult result;
  for (int a = 0; a < num_groups; ++a) {
    for (int b = a + 1; b < num_groups; ++b) {
      std::vector<double> pos;
      std::vector<double> neg;
      for (std::size_t i = 0; i < n_test; ++i) {
        const double score = test_logits[i][a] - test_logits[i][b];
        if (test_attributes[i] == a) pos.push_back(score);
        if (test_attributes[i] == b) neg.push_back(score);
      }
      if (pos.empty() || neg.empty()) {
        logger()->warn("probe: group pair ({}, {}) missing from test data", a, b);
        continue;
      }
      result.auc[{a, b}] = auc(pos, neg);
    }
  }
  return result;
}

std::vector<double> pooled_features(const nn::Snapshot& extractor,
                                    std::span<const nn::Image* const> images,
                                    const nn::ChannelMask* mask, int batch_size) {
  const int dim = extractor.config().feature_width();
  std::vector<double> out;
  out.reserve(images.size() * dim);
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const std::size_t end = std::min(images.size(), start + static_cast<std::size_t>(batch_size));
    auto fr = extractor.network().forward_features(extractor.params(), images.subspan(start, end - start), mask);
    out.insert(out.end(), fr.pooled.begin(), fr.pooled.end());
  }
  return out;
}

ProbeResult attribute_probe(const nn::Snapshot& extractor, const nn::ChannelMask* mask,
                            std::span<const nn::Image* const> train_images,
                            std::span<const int> train_attributes,
                            std::span<const nn::Image* const> test_images,
                            std::span<const int> test_attributes, int num_groups,
                            const ProbeConfig& config) {
  const auto train = pooled_features(extractor, train_images, mask);
  const auto test = pooled_features(extractor, test_images, mask);
  return attribute_probe_features(train, train_attributes, test, test_attributes,
                                  extractor.config().feature_width(), num_groups, config);
}

}  // namespace debias::metrics
