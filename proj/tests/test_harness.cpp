#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "debias/errors.hpp"
#include "debias/harness.hpp"
#include "test_util.hpp"

using namespace debias;
using namespace debias::harness;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_config(std::vector<int> classes_per_task = {2, 2}) {
  ExperimentConfig c;
  c.dataset = testutil::small_spec(std::move(classes_per_task), 30);
  c.train.stage1_epochs = 2;
  c.train.finetune_epochs = 2;
  c.train.patience = 0;
  c.train.optimizer.learning_rate = 1e-2;
  c.seeds = {0};
  c.task_orders = 1;
  c.eval_batch = 8;
  return c;
}

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("debias_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::string csv_of(const std::vector<RunResult>& runs) {
  std::ostringstream os;
  write_csv(runs, 2, os);
  return os.str();
}

bool contains(const std::vector<std::string>& v, const std::string& needle) {
  return std::any_of(v.begin(), v.end(), [&](const std::string& s) { return s.find(needle) != std::string::npos; });
}

class ScopedEnv {
 public:
  ScopedEnv(const char* name, const std::string& value) : name_(name) { setenv(name, value.c_str(), 1); }
  ~ScopedEnv() { unsetenv(name_); }

 private:
  const char* name_;
};

}  // namespace

TEST(Config, DefaultsAreValid) {
  EXPECT_TRUE(ExperimentConfig{}.issues().empty());
  EXPECT_NO_THROW(ExperimentConfig{}.validate());
}

TEST(Config, ItemizesEveryProblem) {
  ExperimentConfig c;
  c.dataset.num_groups = 1;
  c.train.gamma = 1.5;
  c.seeds = {3, 3};
  c.task_orders = 0;
  c.eval_batch = 0;
  c.output_dir = "";
  const auto issues = c.issues();
  EXPECT_TRUE(contains(issues, "dataset: "));
  EXPECT_TRUE(contains(issues, "train: "));
  EXPECT_TRUE(contains(issues, "seeds must be distinct"));
  EXPECT_TRUE(contains(issues, "task_orders"));
  EXPECT_TRUE(contains(issues, "eval_batch"));
  EXPECT_TRUE(contains(issues, "output_dir"));
  try {
    c.validate();
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.issues(), issues);
  }
}

TEST(Config, AblationsRequireBiasPruner) {
  ExperimentConfig c;
  c.method = Method::SeqFt;
  c.train.ablations.no_kt = true;
  EXPECT_TRUE(contains(c.issues(), "ablation flags are only valid with method biaspruner"));
  c.method = Method::BiasPruner;
  EXPECT_TRUE(c.issues().empty());
}

TEST(Config, MethodNamesRoundTrip) {
  for (auto m : {Method::BiasPruner, Method::Joint, Method::Single, Method::SeqFt}) {
    EXPECT_EQ(parse_method(method_name(m)), m);
  }
  EXPECT_THROW(parse_method("ewc"), ConfigError);
}

TEST(Config, JsonRoundTrip) {
  ExperimentConfig c;
  c.method = Method::Joint;
  c.train.gamma = 0.4;
  c.train.partition.hard_rule = bias::HardRule::AnyMisclassified;
  c.seeds = {4, 9};
  c.inference_mode = infer::ScoreMode::Softmax;
  c.network.conv_layers = {{4, 3}, {6, 3}};
  c.dataset.classes_per_task = {3, 2};
  c.dataset.style.tint_jitter = 0.07;
  const auto j = to_json(c);
  const auto back = config_from_json(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(back.method, Method::Joint);
  EXPECT_EQ(back.network.conv_layers, c.network.conv_layers);
  EXPECT_EQ(back.seeds, c.seeds);
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, PartialJsonKeepsDefaults) {
  const auto c = config_from_json(nlohmann::json{{"gamma", 0.25}});
  EXPECT_DOUBLE_EQ(c.train.gamma, 0.25);
  EXPECT_EQ(to_json(c)["q"], to_json(ExperimentConfig{})["q"]);
}

TEST(Config, JsonErrorsAreCollected) {
  nlohmann::json j = {{"gama", 0.5},
                      {"batch", "sixteen"},
                      {"dataset", {{"rho", 0.9}}},
                      {"hard_rule", "sometimes"},
                      {"method", "ewc"}};
  try {
    config_from_json(j);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    const auto& issues = e.issues();
    EXPECT_TRUE(contains(issues, "gama: unknown key"));
    EXPECT_TRUE(contains(issues, "batch: has the wrong type"));
    EXPECT_TRUE(contains(issues, "dataset.rho: unknown key"));
    EXPECT_TRUE(contains(issues, "hard_rule: expected"));
    EXPECT_TRUE(contains(issues, "method: "));
    EXPECT_GE(issues.size(), 5u);
  }
}

TEST(Config, LoadConfigErrors) {
  const auto dir = temp_dir("load_config");
  EXPECT_THROW(load_config(dir / "missing.json"), ConfigError);
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(load_config(dir / "bad.json"), ConfigError);
  std::ofstream(dir / "ok.json") << R"({"gamma": 0.3, "seeds": [1, 2]})";
  const auto c = load_config(dir / "ok.json");
  EXPECT_DOUBLE_EQ(c.train.gamma, 0.3);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{1, 2}));
}

TEST(Config, HashCoversTrainingButNotBookkeeping) {
  const ExperimentConfig base;
  const auto h = config_hash(base);
  auto c = base;
  c.seeds = {7, 8};
  c.task_orders = 5;
  c.output_dir = "elsewhere";
  c.checkpoints = true;
  c.probe = true;
  c.probe_config.epochs = 3;
  c.probe_config.learning_rate = 0.5;
  c.probe_config.batch_size = 4;
  c.eval_batch = 7;
  c.inference_mode = infer::ScoreMode::Softmax;
  EXPECT_EQ(config_hash(c), h);

  auto g = base;
  g.train.gamma = 0.5;
  EXPECT_NE(config_hash(g), h);
  auto q = base;
  q.train.gce.q = 0.5;
  EXPECT_NE(config_hash(q), h);
  auto d = base;
  d.dataset.rho_train = 0.9;
  EXPECT_NE(config_hash(d), h);
}

TEST(Config, OutputDirEnvOverride) {
  ExperimentConfig c;
  c.output_dir = "from_config";
  unsetenv("DEBIAS_OUTPUT_DIR");
  EXPECT_EQ(output_dir(c), fs::path("from_config"));
  {
    ScopedEnv env("DEBIAS_OUTPUT_DIR", "/tmp/from_env");
    EXPECT_EQ(output_dir(c), fs::path("/tmp/from_env"));
  }
  EXPECT_EQ(output_dir(c), fs::path("from_config"));
}

TEST(TaskOrders, IdentityFirstThenDistinct) {
  const std::vector<int> ids{1, 2, 3, 4};
  const auto orders = make_task_orders(ids, 5);
  ASSERT_EQ(orders.size(), 5u);
  EXPECT_EQ(orders[0], ids);
  const std::set<std::vector<int>> unique(orders.begin(), orders.end());
  EXPECT_EQ(unique.size(), orders.size());
  for (auto o : orders) {
    std::sort(o.begin(), o.end());
    EXPECT_EQ(o, ids);
  }
  EXPECT_EQ(make_task_orders(ids, 5), orders);
}

TEST(TaskOrders, CappedAtFactorial) {
  EXPECT_EQ(make_task_orders({1, 2, 3}, 10).size(), 6u);
  EXPECT_EQ(make_task_orders({5}, 3).size(), 1u);
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto config = small_config();
  const auto stream = load_stream(config);
  std::vector<CheckpointFile> saved;
  RunOptions opts;
  opts.on_commit = [&](const subnet::ContinualModel& m, int step, const Rng& rng) {
    std::ostringstream os;
    os << rng;
    saved.push_back({kCheckpointVersion, config_hash(config), 0, 0, {1, 2}, step, m, os.str()});
  };
  run_biaspruner(stream, {1, 2}, config, 0, 0, opts);
  ASSERT_EQ(saved.size(), 2u);

  const auto dir = temp_dir("ckpt_roundtrip");
  const auto path = dir / "a.ckpt";
  save_checkpoint(path, saved[1]);
  const auto back = load_checkpoint(path, config_hash(config));
  EXPECT_EQ(back, saved[1]);

  // Restored model gives bit-identical logits.
  const auto a = saved[1].model.snapshot();
  const auto b = back.model.snapshot();
  std::vector<const nn::Image*> batch;
  for (const auto& s : stream.task(2).test) batch.push_back(&s.image);
  for (const auto& m : back.model.registry.masks()) {
    const auto fa = a.forward(m.first, batch, &m.second.kept);
    const auto fb = b.forward(m.first, batch, &m.second.kept);
    EXPECT_EQ(fa.logits, fb.logits);
  }
}

TEST(Checkpoint, DetectsDamageAndMismatch) {
  const auto config = small_config({2});
  const auto stream = load_stream(config);
  CheckpointFile f;
  RunOptions opts;
  opts.on_commit = [&](const subnet::ContinualModel& m, int step, const Rng&) {
    f = {kCheckpointVersion, config_hash(config), 0, 0, {1}, step, m, "state"};
  };
  run_biaspruner(stream, {1}, config, 0, 0, opts);
  const auto dir = temp_dir("ckpt_damage");
  const auto path = dir / "a.ckpt";
  save_checkpoint(path, f);
  const auto bytes = read_file(path);

  auto code_of = [](const fs::path& p, std::optional<std::uint64_t> h) {
    try {
      load_checkpoint(p, h);
    } catch (const CheckpointError& e) {
      return static_cast<int>(e.code());
    }
    return -1;
  };
  EXPECT_EQ(code_of(dir / "missing.ckpt", std::nullopt), static_cast<int>(CheckpointError::Code::Io));

  std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  EXPECT_EQ(code_of(dir / "short.ckpt", std::nullopt), static_cast<int>(CheckpointError::Code::Corrupt));

  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  std::ofstream(dir / "flip.ckpt", std::ios::binary) << flipped;
  EXPECT_EQ(code_of(dir / "flip.ckpt", std::nullopt), static_cast<int>(CheckpointError::Code::Corrupt));

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  std::ofstream(dir / "magic.ckpt", std::ios::binary) << bad_magic;
  EXPECT_EQ(code_of(dir / "magic.ckpt", std::nullopt), static_cast<int>(CheckpointError::Code::Corrupt));

  auto v2 = f;
  v2.version = kCheckpointVersion + 1;
  save_checkpoint(dir / "v2.ckpt", v2);
  EXPECT_EQ(code_of(dir / "v2.ckpt", std::nullopt), static_cast<int>(CheckpointError::Code::VersionMismatch));

  auto other = config;
  other.train.gamma = 0.3;
  EXPECT_EQ(code_of(path, config_hash(other)), static_cast<int>(CheckpointError::Code::ConfigMismatch));
  EXPECT_EQ(code_of(path, config_hash(config)), -1);
}

TEST(Experiment, CsvBytesAreReproducible) {
  auto config = small_config();
  config.seeds = {0, 1};
  config.task_orders = 2;
  const auto d1 = temp_dir("repro_a");
  const auto d2 = temp_dir("repro_b");
  config.output_dir = d1.string();
  const auto r1 = run_experiment(config);
  config.output_dir = d2.string();
  const auto r2 = run_experiment(config);
  const auto a = read_file(r1.csv_path);
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, read_file(r2.csv_path));
  auto s1 = nlohmann::json::parse(read_file(r1.summary_path));
  auto s2 = nlohmann::json::parse(read_file(r2.summary_path));
  s1["config"].erase("output_dir");
  s2["config"].erase("output_dir");
  EXPECT_EQ(s1, s2);
  EXPECT_EQ(r1.runs.size(), 4u);
}

TEST(Experiment, EnvDirectoryReceivesReports) {
  auto config = small_config({2});
  config.output_dir = "should_not_be_used";
  const auto dir = temp_dir("env_out");
  ScopedEnv env("DEBIAS_OUTPUT_DIR", dir.string());
  const auto r = run_experiment(config);
  EXPECT_EQ(r.csv_path, dir / "results.csv");
  EXPECT_TRUE(fs::exists(dir / "summary.json"));
  EXPECT_FALSE(fs::exists("should_not_be_used"));
}

TEST(Experiment, InvalidConfigRunsNothing) {
  auto config = small_config();
  config.seeds.clear();
  EXPECT_THROW(run_experiment(config), ValidationError);
}

TEST(Experiment, StepSeriesHaveOneRowPerSeenTaskPlusAverage) {
  const auto config = small_config({2, 2, 2});
  const auto stream = load_stream(config);
  const std::vector<int> order{3, 1, 2};
  for (auto m : {Method::BiasPruner, Method::SeqFt, Method::Joint, Method::Single}) {
    auto c = config;
    c.method = m;
    const auto run = run_method(stream, order, c, 0, 0);
    ASSERT_EQ(run.rows.size(), 2u + 3u + 4u) << method_name(m);
    std::size_t i = 0;
    for (int step = 1; step <= 3; ++step) {
      std::vector<int> tasks;
      for (int k = 0; k < step; ++k, ++i) {
        EXPECT_EQ(run.rows[i].step, step);
        EXPECT_FALSE(run.rows[i].is_average);
        tasks.push_back(run.rows[i].metrics.task_id);
      }
      std::sort(tasks.begin(), tasks.end());
      std::vector<int> expect(order.begin(), order.begin() + step);
      std::sort(expect.begin(), expect.end());
      EXPECT_EQ(tasks, expect);
      EXPECT_TRUE(run.rows[i].is_average);
      EXPECT_EQ(run.rows[i].step, step);
      ++i;
    }
    const bool selects = m != Method::Joint;  // SINGLE reports its oracle selection
    EXPECT_EQ(run.final_report.per_task[0].task_selection_acc.has_value(), selects) << method_name(m);
  }
}

TEST(Baselines, JointEqualsSingleOnOneTask) {
  const auto config = small_config({3});
  const auto stream = load_stream(config);
  const auto joint = run_baseline_joint(stream, {1}, config, 0, 0);
  const auto single = run_single(stream, {1}, config, 0, 0);
  const auto& a = joint.final_report.per_task[0];
  const auto& b = single.final_report.per_task[0];
  EXPECT_EQ(a.balanced_acc, b.balanced_acc);
  EXPECT_EQ(a.macro_f1, b.macro_f1);
  EXPECT_EQ(a.per_group_acc, b.per_group_acc);
  EXPECT_EQ(a.dpr, b.dpr);
  EXPECT_EQ(a.eod, b.eod);
}

TEST(Baselines, PlainModelCoversTheLabelUnion) {
  const auto config = small_config({2, 3});
  const auto stream = load_stream(config);
  std::vector<int> classes;
  std::vector<data::SampleRecord> train;
  std::vector<data::SampleRecord> val;
  for (const auto& t : stream.tasks) {
    classes.insert(classes.end(), t.classes.begin(), t.classes.end());
    train.insert(train.end(), t.train.begin(), t.train.end());
    val.insert(val.end(), t.val.begin(), t.val.end());
  }
  std::sort(classes.begin(), classes.end());
  EXPECT_EQ(classes.size(), 5u);
  EXPECT_EQ(train.size(), stream.tasks[0].train.size() + stream.tasks[1].train.size());
  const auto m = train_plain_model(config, 0, classes, train, val);
  EXPECT_EQ(m.head.classes, classes);
  EXPECT_EQ(m.head.out_bias.size(), classes.size());
  EXPECT_THROW(train_plain_model(config, 0, classes, {}, val), InvalidInput);
}

TEST(Resume, ContinuationMatchesUninterruptedRun) {
  auto config = small_config({2, 2, 2});
  config.checkpoints = true;
  const auto full_dir = temp_dir("resume_full");
  config.output_dir = full_dir.string();
  const auto full = run_experiment(config);
  const auto ckpt = full_dir / "checkpoint_s0_o0_t1.ckpt";
  ASSERT_TRUE(fs::exists(ckpt));
  ASSERT_TRUE(fs::exists(full_dir / "checkpoint_s0_o0_t3.ckpt"));

  const auto resume_dir = temp_dir("resume_rest");
  config.output_dir = resume_dir.string();
  const auto resumed = resume_experiment(config, ckpt);
  ASSERT_EQ(resumed.runs.size(), 1u);

  auto tail = full.runs[0];
  tail.rows.erase(std::remove_if(tail.rows.begin(), tail.rows.end(),
                                 [](const StepRow& r) { return r.step <= 1; }),
                  tail.rows.end());
  EXPECT_EQ(csv_of(resumed.runs), csv_of({tail}));
  EXPECT_EQ(read_file(full_dir / "checkpoint_s0_o0_t3.ckpt"),
            read_file(resume_dir / "checkpoint_s0_o0_t3.ckpt"));

  auto other = config;
  other.train.gamma = 0.3;
  EXPECT_THROW(resume_experiment(other, ckpt), CheckpointError);
  auto seqft = config;
  seqft.method = Method::SeqFt;
  EXPECT_THROW(resume_experiment(seqft, ckpt), ConfigError);
}

TEST(Report, CsvParsesAndRendersSvg) {
  auto config = small_config({2});
  const auto dir = temp_dir("report");
  config.output_dir = dir.string();
  const auto r = run_experiment(config);
  std::ifstream is(r.csv_path);
  const auto table = read_csv(is);
  const std::vector<std::string> header{"method", "seed", "order", "step", "task", "f1", "bacc",
                                        "acc_g0", "acc_g1", "dpr", "eod", "tsel_acc", "probe_auc"};
  EXPECT_EQ(table.header, header);
  ASSERT_EQ(table.rows.size(), 2u);
  EXPECT_EQ(table.rows[1][4], "avg");
  const auto svg = render_svg(table, "bacc", "Balanced accuracy");
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  EXPECT_NE(svg.find("Balanced accuracy"), std::string::npos);
}
