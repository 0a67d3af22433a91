#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "debias/errors.hpp"
#include "debias/inference.hpp"
#include "debias/subnet.hpp"
#include "test_util.hpp"

using namespace debias;
using namespace debias::infer;

namespace {

CandidateLogits cand(std::vector<int> classes, std::vector<std::vector<double>> logits) {
  return {std::move(classes), std::move(logits)};
}

// Literal max-output rule: t* = argmax_t sum_i max_k phi_t(x_i)_k, first
// maximum wins, in extended precision.
int literal_argmax(const std::map<int, CandidateLogits>& c) {
  int best_t = 0;
  long double best = 0;
  bool first = true;
  for (const auto& [t, cl] : c) {
    long double s = 0;
    for (const auto& row : cl.logits) {
      long double m = row[0];
      for (double v : row) m = std::max<long double>(m, v);
      s += m;
    }
    if (first || s > best) {
      best = s;
      best_t = t;
      first = false;
    }
  }
  return best_t;
}

std::map<int, CandidateLogits> random_candidates(Rng& rng) {
  std::normal_distribution<double> z(0, 2);
  std::map<int, CandidateLogits> c;
  const int tasks = 1 + static_cast<int>(rng() % 5);
  const int batch = 1 + static_cast<int>(rng() % 10);
  int next = 0;
  for (int t = 1; t <= tasks; ++t) {
    const int k = 2 + static_cast<int>(rng() % 3);
    CandidateLogits cl;
    for (int j = 0; j < k; ++j) cl.classes.push_back(next++);
    for (int b = 0; b < batch; ++b) {
      std::vector<double> row(k);
      for (double& v : row) v = z(rng);
      cl.logits.push_back(row);
    }
    c.emplace(t * 3, std::move(cl));  // sparse task ids
  }
  return c;
}

struct Trained {
  data::TaskStream stream;
  subnet::ContinualModel model;
  std::map<int, nn::ChannelMask> masks;
};

Trained train_small(std::vector<int> classes_per_task) {
  Trained t{data::generate(testutil::small_spec(std::move(classes_per_task), 40)),
            subnet::ContinualModel::create({}), {}};
  subnet::TrainConfig c;
  c.stage1_epochs = 2;
  c.finetune_epochs = 2;
  c.patience = 0;
  c.optimizer.learning_rate = 1e-2;
  for (const auto& task : t.stream.tasks) subnet::run_task_pipeline(t.model, task, 2, c, 1);
  for (const auto& [id, m] : t.model.registry.masks()) t.masks.emplace(id, m.kept);
  return t;
}

std::vector<const data::TaskData*> all_tasks(const data::TaskStream& s) {
  std::vector<const data::TaskData*> out;
  for (const auto& t : s.tasks) out.push_back(&t);
  return out;
}

}  // namespace

TEST(MaxOutput, HandExamples) {
  std::map<int, CandidateLogits> c;
  c.emplace(1, cand({0, 1}, {{3.0, 1.0}}));
  c.emplace(2, cand({2, 3}, {{0.0, 5.0}}));
  auto r = select_from_logits(c);
  EXPECT_EQ(r.selected_task, 2);
  EXPECT_EQ(r.predictions, std::vector<int>{3});
  EXPECT_DOUBLE_EQ(r.per_task_scores.at(1), 3.0);

  c.clear();
  c.emplace(1, cand({0, 1}, {{2.0, 1.0}}));
  c.emplace(2, cand({2, 3}, {{1.0, 2.0}}));
  EXPECT_EQ(select_from_logits(c).selected_task, 1);

  // Batch sums 8 vs 9: task 2 wins although task 1 wins sample 2.
  c.clear();
  c.emplace(1, cand({0, 1}, {{4.0, 0.0}, {0.0, 4.0}}));
  c.emplace(2, cand({2, 3}, {{9.0, 0.0}, {0.0, 0.0}}));
  r = select_from_logits(c);
  EXPECT_EQ(r.selected_task, 2);
  EXPECT_DOUBLE_EQ(r.per_task_scores.at(1), 8.0);
  EXPECT_DOUBLE_EQ(r.per_task_scores.at(2), 9.0);
  EXPECT_EQ(r.predictions, (std::vector<int>{2, 2}));
}

TEST(MaxOutput, SoftmaxModeScoresProbabilities) {
  std::map<int, CandidateLogits> c;
  c.emplace(1, cand({0, 1}, {{10.0, 9.0}}));  // max prob ~0.73
  c.emplace(2, cand({2, 3}, {{0.0, 5.0}}));   // max prob ~0.99
  EXPECT_EQ(select_from_logits(c, ScoreMode::RawLogits).selected_task, 1);
  const auto r = select_from_logits(c, ScoreMode::Softmax);
  EXPECT_EQ(r.selected_task, 2);
  EXPECT_NEAR(r.per_task_scores.at(1), 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
}

TEST(MaxOutput, Errors) {
  EXPECT_THROW(select_from_logits({}), StateError);
  std::map<int, CandidateLogits> c;
  c.emplace(1, cand({0}, {}));
  EXPECT_THROW(select_from_logits(c), InvalidInput);
}

TEST(MaxOutput, AgreesWithLiteralFormula) {
  Rng rng(41);
  for (int i = 0; i < 1000; ++i) {
    const auto c = random_candidates(rng);
    const auto r = select_from_logits(c);
    ASSERT_EQ(r.selected_task, literal_argmax(c));
    const auto& w = c.at(r.selected_task);
    for (std::size_t b = 0; b < w.logits.size(); ++b) {
      const auto& row = w.logits[b];
      EXPECT_EQ(r.predictions[b], w.classes[std::max_element(row.begin(), row.end()) - row.begin()]);
      EXPECT_NE(std::find(w.classes.begin(), w.classes.end(), r.predictions[b]), w.classes.end());
    }
  }
}

TEST(MaxOutput, BatchOrderInvariance) {
  Rng rng(42);
  for (int i = 0; i < 500; ++i) {
    const auto c = random_candidates(rng);
    const auto r = select_from_logits(c);
    const std::size_t n = c.begin()->second.logits.size();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto shuffled = c;
    for (auto& [t, cl] : shuffled) {
      for (std::size_t b = 0; b < n; ++b) cl.logits[b] = c.at(t).logits[perm[b]];
    }
    const auto s = select_from_logits(shuffled);
    EXPECT_EQ(s.selected_task, r.selected_task);
    EXPECT_EQ(s.per_task_scores, r.per_task_scores);
    for (std::size_t b = 0; b < n; ++b) EXPECT_EQ(s.predictions[b], r.predictions[perm[b]]);
  }
}

TEST(MaxOutput, ScalingOneTaskCanChangeTheChoice) {
  std::map<int, CandidateLogits> c;
  c.emplace(1, cand({0, 1}, {{2.0, 0.0}}));
  c.emplace(2, cand({2, 3}, {{1.5, 0.0}}));
  EXPECT_EQ(select_from_logits(c).selected_task, 1);
  for (auto& v : c.at(2).logits[0]) v *= 2;
  EXPECT_EQ(select_from_logits(c).selected_task, 2);
}

TEST(SelectTask, SnapshotPathMatchesLogitPath) {
  const auto t = train_small({2, 2});
  const auto snap = t.model.snapshot();
  std::vector<const nn::Image*> batch;
  for (const auto& s : t.stream.tasks[1].test) batch.push_back(&s.image);
  const auto r = select_task(snap, t.masks, batch);
  std::map<int, CandidateLogits> c;
  for (const auto& [id, m] : t.masks) {
    const auto fr = snap.forward(id, batch, &m);
    CandidateLogits cl{snap.head(id).classes, {}};
    for (int b = 0; b < fr.batch; ++b) cl.logits.emplace_back(fr.logits_of(b).begin(), fr.logits_of(b).end());
    c.emplace(id, cl);
  }
  EXPECT_EQ(r.selected_task, literal_argmax(c));
  EXPECT_EQ(r.predictions, select_from_logits(c).predictions);
  EXPECT_THROW(select_task(snap, {}, batch), StateError);
  EXPECT_THROW(select_task(snap, t.masks, std::span<const nn::Image* const>{}), InvalidInput);
}

TEST(EvaluateStream, OracleModeSelectsTheTrueTask) {
  const auto t = train_small({2, 2});
  const auto tasks = all_tasks(t.stream);
  const auto rep = evaluate_stream(t.model.snapshot(), t.masks, tasks, 8, 2, /*oracle_mode=*/true);
  ASSERT_EQ(rep.per_task.size(), 2u);
  for (const auto& m : rep.per_task) EXPECT_EQ(m.task_selection_acc, 1.0);
  EXPECT_EQ(rep.batch_rule, kBatchRule);
  EXPECT_EQ(rep.per_task[0].num_batches, 2);  // 16 test samples in batches of 8
}

TEST(EvaluateStream, SingleTaskEqualsOracle) {
  const auto t = train_small({3});
  const auto tasks = all_tasks(t.stream);
  const auto a = evaluate_stream(t.model.snapshot(), t.masks, tasks, 8, 2, false);
  const auto b = evaluate_stream(t.model.snapshot(), t.masks, tasks, 8, 2, true);
  EXPECT_EQ(a.per_task[0].balanced_acc, b.per_task[0].balanced_acc);
  EXPECT_EQ(a.per_task[0].macro_f1, b.per_task[0].macro_f1);
  EXPECT_EQ(a.per_task[0].dpr, b.per_task[0].dpr);
  EXPECT_EQ(a.per_task[0].eod, b.per_task[0].eod);
  EXPECT_EQ(a.per_task[0].task_selection_acc, 1.0);
}

TEST(EvaluateBatches, WrongSelectionCountsAgainstGlobalLabels) {
  // Task 1 has classes {0, 1}; four test samples, batches of 2. The predictor
  // picks task 2 for the second batch and so emits foreign class ids.
  data::TaskData task;
  task.task_id = 1;
  task.classes = {0, 1};
  for (int i = 0; i < 4; ++i) {
    data::SampleRecord s;
    s.id = static_cast<std::uint64_t>(i);
    s.label = i % 2;
    s.attribute = i / 2;
    s.image = nn::Image{3, 2, 2, std::vector<double>(12, 0.0)};
    task.test.push_back(s);
  }
  int call = 0;
  const BatchPredictor predictor = [&call](int, std::span<const nn::Image* const> batch) {
    ++call;
    if (call == 1) return std::pair{1, std::vector<int>{0, 1}};
    return std::pair{2, std::vector<int>(batch.size(), 2)};
  };
  const std::vector<const data::TaskData*> tasks{&task};
  const auto rep = evaluate_batches(tasks, 2, 2, predictor);
  const auto& m = rep.per_task[0];
  EXPECT_DOUBLE_EQ(*m.task_selection_acc, 0.5);
  EXPECT_DOUBLE_EQ(m.balanced_acc, 0.5);
  // Group 0 is classified perfectly, group 1 entirely wrong.
  EXPECT_DOUBLE_EQ(*m.per_group_acc[0], 1.0);
  EXPECT_DOUBLE_EQ(*m.per_group_acc[1], 0.0);
  EXPECT_DOUBLE_EQ(*m.eod, 1.0);
}

TEST(EvaluateBatches, NoSelectionStepLeavesAccuracyUnset) {
  const auto t = data::generate(testutil::small_spec({2}, 20));
  const std::vector<const data::TaskData*> tasks{&t.tasks[0]};
  const BatchPredictor predictor = [](int, std::span<const nn::Image* const> batch) {
    return std::pair{-1, std::vector<int>(batch.size(), 0)};
  };
  const auto rep = evaluate_batches(tasks, 4, 2, predictor);
  EXPECT_FALSE(rep.per_task[0].task_selection_acc.has_value());
  EXPECT_THROW(evaluate_batches(tasks, 0, 2, predictor), ConfigError);
}
