#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "debias/bias_analysis.hpp"
#include "debias/errors.hpp"
#include "debias/subnet.hpp"
#include "test_util.hpp"

using namespace debias;
using namespace debias::bias;

namespace {

SamplePartition make_partition(std::map<int, std::set<std::uint64_t>> easy,
                               std::map<int, std::set<std::uint64_t>> hard) {
  SamplePartition p;
  p.task_id = 1;
  p.easy = std::move(easy);
  p.hard = std::move(hard);
  return p;
}

SamplePartition swapped(const SamplePartition& p) {
  auto s = p;
  std::swap(s.easy, s.hard);
  return s;
}

}  // namespace

TEST(Partition, MembershipByConfidence) {
  const std::vector<Prediction> preds{
      {1, 0, 0, 0.9},  // correct, confident
      {2, 0, 0, 0.6},  // correct, below tau
      {3, 0, 1, 0.8},  // wrong, confident
      {4, 1, 1, 0.95},
      {5, 1, 0, 0.55},  // wrong, unconfident
  };
  const auto p = partition_from_predictions(1, preds);
  EXPECT_EQ(p.easy.at(0), (std::set<std::uint64_t>{1}));
  EXPECT_EQ(p.hard.at(0), (std::set<std::uint64_t>{3}));
  EXPECT_EQ(p.excluded, (std::set<std::uint64_t>{2}));
  // Class 1 has no confident error, so its unconfident one is used.
  EXPECT_EQ(p.hard.at(1), (std::set<std::uint64_t>{5}));
  EXPECT_EQ(p.total(), preds.size());
}

TEST(Partition, AnyMisclassifiedRule) {
  const std::vector<Prediction> preds{{1, 0, 1, 0.55}, {2, 0, 1, 0.9}, {3, 0, 0, 0.6}};
  PartitionConfig cfg;
  cfg.hard_rule = HardRule::AnyMisclassified;
  const auto p = partition_from_predictions(1, preds, cfg);
  EXPECT_EQ(p.hard.at(0), (std::set<std::uint64_t>{1, 2}));
  EXPECT_EQ(p.excluded, (std::set<std::uint64_t>{3}));
}

TEST(Partition, RejectsBadInput) {
  EXPECT_THROW(partition_from_predictions(1, std::vector<Prediction>{}), InvalidInput);
  PartitionConfig cfg;
  cfg.tau = 0.5;
  EXPECT_THROW(partition_from_predictions(1, std::vector<Prediction>{{1, 0, 0, 1.0}}, cfg), ConfigError);
}

TEST(Partition, SetsAreDisjointAndCover) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Prediction> preds;
    const int n = 1 + static_cast<int>(rng() % 60);
    for (int i = 0; i < n; ++i) {
      const int label = static_cast<int>(rng() % 3);
      const int pred = rng() % 3 == 0 ? label : static_cast<int>(rng() % 3);
      preds.push_back({static_cast<std::uint64_t>(i), label, pred, 0.34 + 0.66 * (rng() % 1000) / 1000.0});
    }
    const auto p = partition_from_predictions(1, preds);
    std::multiset<std::uint64_t> all(p.excluded.begin(), p.excluded.end());
    for (const auto& [c, s] : p.easy) all.insert(s.begin(), s.end());
    for (const auto& [c, s] : p.hard) all.insert(s.begin(), s.end());
    ASSERT_EQ(all.size(), static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) EXPECT_EQ(all.count(static_cast<std::uint64_t>(i)), 1u);
  }
}

TEST(SpatialVariance, HandValues) {
  EXPECT_DOUBLE_EQ(spatial_variance(std::vector<double>{3, 3, 3, 3}), 0.0);
  EXPECT_DOUBLE_EQ(spatial_variance(std::vector<double>{0, 0, 2, 2}), 1.0);
  EXPECT_THROW(spatial_variance(std::vector<double>{1.0}), ConfigError);
}

TEST(SpatialVariance, ScalesQuadratically) {
  Rng rng(4);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> m(9);
    for (double& v : m) v = u(rng);
    const double k = u(rng);
    auto scaled = m;
    for (double& v : scaled) v *= k;
    EXPECT_NEAR(spatial_variance(scaled), k * k * spatial_variance(m), 1e-12);
  }
}

TEST(Scores, HandExample) {
  const std::vector<UnitId> units{{0, 0}};
  const auto p = make_partition({{0, {1, 2}}}, {{0, {3}}});
  const std::map<std::uint64_t, std::vector<double>> var{{1, {4.0}}, {2, {2.0}}, {3, {1.0}}};
  const auto t = scores_from_variances(p, units, var);
  EXPECT_DOUBLE_EQ(t.per_class.at({0, {0, 0}}), 2.0);
  EXPECT_DOUBLE_EQ(t.averaged.at({0, 0}), 2.0);
}

TEST(Scores, IdenticalDistributionsScoreZero) {
  const std::vector<UnitId> units{{0, 0}, {1, 3}};
  const auto p = make_partition({{0, {1, 2}}}, {{0, {3, 4}}});
  const std::map<std::uint64_t, std::vector<double>> var{
      {1, {0.5, 7}}, {2, {1.5, 1}}, {3, {1.5, 1}}, {4, {0.5, 7}}};
  const auto t = scores_from_variances(p, units, var);
  for (const auto& [k, s] : t.per_class) EXPECT_EQ(s, 0.0);
}

TEST(Scores, UnrolledOracleTwoUnitsFourSamples) {
  // Two units with 2x2 maps; class 0: easy {10, 11}, hard {12}; class 1:
  // easy {13}, hard {} so it is skipped.
  const std::map<std::uint64_t, std::vector<std::vector<double>>> maps{
      {10, {{0, 0, 2, 2}, {1, 2, 3, 4}}},
      {11, {{1, 1, 1, 1}, {0, 4, 0, 4}}},
      {12, {{0, 6, 0, 6}, {5, 5, 5, 9}}},
      {13, {{9, 0, 0, 0}, {2, 2, 2, 2}}},
  };
  std::map<std::uint64_t, std::vector<double>> var;
  for (const auto& [id, m] : maps) var[id] = {spatial_variance(m[0]), spatial_variance(m[1])};
  // Unit 0: Var = {1, 0 | 9} -> (1 + 0) / 2 - 9 = -8.5.
  // Unit 1: Var = {1.25, 4 | 3} -> (1.25 + 4) / 2 - 3 = -0.375.
  const auto p = make_partition({{0, {10, 11}}, {1, {13}}}, {{0, {12}}, {1, {}}});
  const std::vector<UnitId> units{{0, 0}, {0, 1}};
  const auto t = scores_from_variances(p, units, var);
  EXPECT_NEAR(t.per_class.at({0, {0, 0}}), -8.5, 1e-12);
  EXPECT_NEAR(t.per_class.at({0, {0, 1}}), -0.375, 1e-12);
  EXPECT_NEAR(t.averaged.at({0, 0}), -8.5, 1e-12);
  EXPECT_NEAR(t.averaged.at({0, 1}), -0.375, 1e-12);
  EXPECT_EQ(t.scored_classes, std::vector<int>{0});
  EXPECT_EQ(t.skipped_classes, std::vector<int>{1});
  EXPECT_EQ(t.per_class.count({1, {0, 0}}), 0u);
}

TEST(Scores, AntisymmetryAndPermutationInvariance) {
  Rng rng(5);
  std::uniform_real_distribution<double> u(0, 3);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 6 + static_cast<int>(rng() % 20);
    std::vector<UnitId> units{{0, 0}, {0, 1}, {1, 0}};
    std::map<std::uint64_t, std::vector<double>> var;
    std::map<int, std::set<std::uint64_t>> easy, hard;
    for (int i = 0; i < n; ++i) {
      const auto id = static_cast<std::uint64_t>(rng() % 1000000);
      if (var.count(id)) continue;
      var[id] = {u(rng), u(rng), u(rng)};
      const int cls = static_cast<int>(rng() % 2);
      (i % 2 ? easy : hard)[cls].insert(id);
    }
    for (int c : {0, 1}) {
      easy[c];
      hard[c];
    }
    const auto p = make_partition(easy, hard);
    BiasScoreTable a;
    try {
      a = scores_from_variances(p, units, var);
    } catch (const UnscoreableTask&) {
      continue;
    }
    const auto b = scores_from_variances(swapped(p), units, var);
    for (const auto& [k, s] : a.per_class) EXPECT_EQ(b.per_class.at(k), -s);
    for (const auto& [k, s] : a.averaged) EXPECT_EQ(b.averaged.at(k), -s);
    // Reinserting the same ids in another order leaves every score unchanged.
    auto shuffled = p;
    for (auto* side : {&shuffled.easy, &shuffled.hard}) {
      for (auto& [c, ids] : *side) {
        std::vector<std::uint64_t> v(ids.begin(), ids.end());
        std::shuffle(v.begin(), v.end(), rng);
        ids.clear();
        for (auto id : v) ids.insert(id);
      }
    }
    EXPECT_EQ(scores_from_variances(shuffled, units, var).per_class, a.per_class);
  }
}

TEST(Scores, UnscoreableTask) {
  const std::vector<UnitId> units{{0, 0}};
  const auto p = make_partition({{0, {1}}, {1, {}}}, {{0, {}}, {1, {2}}});
  const std::map<std::uint64_t, std::vector<double>> var{{1, {1.0}}, {2, {1.0}}};
  EXPECT_THROW(scores_from_variances(p, units, var), UnscoreableTask);
}

TEST(Scores, RankingInvariantUnderConstantShift) {
  nn::NetworkConfig cfg;
  Rng rng(6);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 50; ++trial) {
    BiasScoreTable t;
    for (const auto& unit : units_in(cfg, nullptr)) {
      // Coarse values force ties that the UnitId tie-break must resolve.
      t.averaged[unit] = std::round(u(rng) * 4) / 4;
    }
    auto shifted = t;
    const double k = 16 * u(rng);
    for (auto& [unit, s] : shifted.averaged) s += k;
    EXPECT_EQ(subnet::prune_to_mask(t, 0.6, cfg, 1), subnet::prune_to_mask(shifted, 0.6, cfg, 1));
  }
}

TEST(Scores, SnapshotScoresMatchManualForward) {
  // Oracle: one-sample forward passes, explicit population variance, explicit
  // per-class means, against the batched library path.
  nn::NetworkConfig cfg;
  cfg.seed = 9;
  auto params = nn::ParamStore::initialize(cfg);
  const auto head = nn::TaskHead::initialize(cfg, 1, {0, 1}, 9);
  const nn::Snapshot snap(cfg, params, {head});
  Rng rng(7);
  std::vector<data::SampleRecord> samples;
  for (int i = 0; i < 12; ++i) {
    data::SampleRecord s;
    s.id = 100 + static_cast<std::uint64_t>(i);
    s.label = i % 2;
    s.task_id = 1;
    s.image = testutil::random_image(cfg, rng);
    samples.push_back(std::move(s));
  }
  auto mask = nn::full_mask(cfg);
  mask[0][2] = 0;
  mask[1][7] = 0;
  const auto p = make_partition({{0, {100, 102, 104}}, {1, {101, 103}}}, {{0, {106}}, {1, {105, 107, 109}}});
  const auto t = bias_scores(snap, p, samples, &mask);
  EXPECT_EQ(t.averaged.size(), static_cast<std::size_t>(cfg.total_units() - 2));
  EXPECT_EQ(t.averaged.count({0, 2}), 0u);

  auto var_of = [&](std::uint64_t id, UnitId unit) {
    const nn::Image* img = &samples[id - 100].image;
    const auto fr = snap.network().forward_features(snap.params(), std::span(&img, 1), &mask);
    const auto m = snap.network().unit_map(fr, unit.layer, unit.channel, 0);
    long double mean = 0;
    for (double v : m) mean += v;
    mean /= m.size();
    long double acc = 0;
    for (double v : m) acc += (v - mean) * (v - mean);
    return static_cast<double>(acc / m.size());
  };
  for (const auto& [unit, avg] : t.averaged) {
    double sum = 0;
    for (int c : {0, 1}) {
      double e = 0, h = 0;
      for (auto id : p.easy.at(c)) e += var_of(id, unit);
      for (auto id : p.hard.at(c)) h += var_of(id, unit);
      const double s = e / p.easy.at(c).size() - h / p.hard.at(c).size();
      EXPECT_NEAR(t.per_class.at({c, unit}), s, 1e-12);
      sum += s;
    }
    EXPECT_NEAR(avg, sum / 2, 1e-12);
  }
}

TEST(Scores, CsvDump) {
  const auto p = make_partition({{0, {1}}}, {{0, {2}}});
  const std::map<std::uint64_t, std::vector<double>> var{{1, {2.5}}, {2, {1.0}}};
  const std::vector<UnitId> units{{1, 4}};
  std::ostringstream os;
  write_scores_csv(scores_from_variances(p, units, var), os);
  EXPECT_EQ(os.str(), "task,class,layer,channel,score\n1,0,1,4,1.5\n1,avg,1,4,1.5\n");
}
