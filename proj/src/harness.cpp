#include "debias/harness.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "debias/errors.hpp"
#include "debias/log.hpp"
#include "debias/rng.hpp"

namespace debias::harness {

namespace {

nn::NetworkConfig network_for(const ExperimentConfig& config, std::uint64_t seed,
                              const data::TaskStream& stream) {
  nn::NetworkConfig n = config.network;
  const auto& img = stream.tasks.at(0).train.at(0).image;
  n.in_channels = img.channels;
  n.height = img.height;
  n.width = img.width;
  n.seed = seed;
  return n;
}

std::vector<const data::TaskData*> seen_tasks(const data::TaskStream& stream,
                                              const std::vector<int>& order, int steps) {
  std::vector<const data::TaskData*> out;
  for (int i = 0; i < steps; ++i) out.push_back(&stream.task(order[i]));
  return out;
}

void append_rows(RunResult& run, int step, const metrics::MetricsReport& report) {
  for (const auto& m : report.per_task) run.rows.push_back({run.method, run.seed, run.order, step, m, false});
  run.rows.push_back({run.method, run.seed, run.order, step, report.averaged, true});
}

std::vector<const nn::Image*> images_of(const std::vector<data::SampleRecord>& samples) {
  std::vector<const nn::Image*> out;
  for (const auto& s : samples) out.push_back(&s.image);
  return out;
}

std::vector<int> attributes_of(const std::vector<data::SampleRecord>& samples) {
  std::vector<int> out;
  for (const auto& s : samples) out.push_back(s.attribute);
  return out;
}

double probe_auc(const nn::Snapshot& extractor, const nn::ChannelMask* mask,
                 const data::TaskData& task, int num_groups, const ExperimentConfig& config,
                 std::uint64_t seed) {
  auto pc = config.probe_config;
  pc.seed = splitmix64(seed ^ static_cast<std::uint64_t>(task.task_id));
  const auto train_imgs = images_of(task.train);
  const auto test_imgs = images_of(task.test);
  return metrics::attribute_probe(extractor, mask, train_imgs, attributes_of(task.train), test_imgs,
                                  attributes_of(task.test), num_groups, pc)
      .mean_auc();
}

std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

RunResult new_run(Method m, std::uint64_t seed, int order_index) {
  RunResult r;
  r.method = m;
  r.seed = seed;
  r.order = order_index;
  return r;
}

}  // namespace

RunResult run_biaspruner(const data::TaskStream& stream, const std::vector<int>& order,
                         const ExperimentConfig& config, std::uint64_t seed, int order_index,
                         const RunOptions& options) {
  RunResult run = new_run(Method::BiasPruner, seed, order_index);
  const int groups = stream.num_groups;
  subnet::ContinualModel model;
  if (options.resume) {
    model = *options.resume;
  } else {
    model = subnet::ContinualModel::create(network_for(config, seed, stream));
    model.params.alpha_raw = loss::alpha_raw_for(config.train.alpha);
  }
  Rng run_rng = derive_rng(seed, "run", static_cast<std::uint64_t>(order_index));
  if (options.resume) {
    std::istringstream is(options.resume_rng_state);
    is >> run_rng;
    if (!is) throw InvalidInput("cannot restore the run RNG state");
  }
  std::map<int, double> probe_final;
  std::vector<double> biased_aucs;
  for (int step = options.start_step; step < static_cast<int>(order.size()); ++step) {
    const auto& task = stream.task(order[step]);
    const std::uint64_t task_seed = run_rng();
    logger()->info("{} seed {} order {}: task {} ({}/{})", method_name(run.method), seed,
                   order_index, task.task_id, step + 1, order.size());
    const auto pipe = subnet::run_task_pipeline(model, task, groups, config.train, task_seed);
    if (config.probe) {
      const nn::ChannelMask* avail = pipe.availability ? &*pipe.availability : nullptr;
      biased_aucs.push_back(probe_auc(*pipe.biased, avail, task, groups, config, seed));
      probe_final[task.task_id] =
          probe_auc(model.snapshot(), &pipe.mask.kept, task, groups, config, seed);
    }
    if (options.on_commit) options.on_commit(model, step + 1, run_rng);

    std::map<int, nn::ChannelMask> masks;
    for (const auto& [t, m] : model.registry.masks()) masks.emplace(t, m.kept);
    const auto seen = seen_tasks(stream, order, step + 1);
    auto report = infer::evaluate_stream(model.snapshot(), masks, seen, config.eval_batch, groups,
                                         false, config.inference_mode);
    for (auto& m : report.per_task) {
      if (auto it = probe_final.find(m.task_id); it != probe_final.end()) m.probe_auc = it->second;
    }
    report.averaged = metrics::average(report.per_task, groups);
    append_rows(run, step + 1, report);
    run.final_report = std::move(report);
  }
  if (config.probe) {
    run.probe_biased = mean_of(biased_aucs);
    std::vector<double> finals;
    for (const auto& [t, v] : probe_final) finals.push_back(v);
    run.probe_final = mean_of(finals);
  }
  return run;
}

RunResult run_seqft(const data::TaskStream& stream, const std::vector<int>& order,
                    const ExperimentConfig& config, std::uint64_t seed, int order_index) {
  RunResult run = new_run(Method::SeqFt, seed, order_index);
  const int groups = stream.num_groups;
  const auto net_config = network_for(config, seed, stream);
  const nn::Network network(net_config);
  auto params = nn::ParamStore::initialize(net_config);
  std::vector<nn::TaskHead> heads;
  const auto& tc = config.train;
  for (int step = 0; step < static_cast<int>(order.size()); ++step) {
    const auto& task = stream.task(order[step]);
    auto head = nn::TaskHead::initialize(net_config, task.task_id, task.classes, seed);
    Rng shuffle = derive_rng(seed, "seqft-shuffle", static_cast<std::uint64_t>(task.task_id));
    subnet::train_supervised(network, params, head, task.train, task.val, nullptr,
                             subnet::LossKind::Ce, tc.gce, tc.stage1_epochs + tc.finetune_epochs,
                             tc.patience, tc.batch_size, tc.optimizer, shuffle);
    heads.push_back(std::move(head));

    const nn::Snapshot snap(net_config, params, heads);
    std::map<int, nn::ChannelMask> masks;
    for (const auto& h : heads) masks.emplace(h.task_id, nn::full_mask(net_config));
    const auto seen = seen_tasks(stream, order, step + 1);
    auto report = infer::evaluate_stream(snap, masks, seen, config.eval_batch, groups, false,
                                         config.inference_mode);
    append_rows(run, step + 1, report);
    run.final_report = std::move(report);
  }
  if (config.probe) {
    const nn::Snapshot snap(net_config, params, heads);
    std::vector<double> aucs;
    for (int t : order) aucs.push_back(probe_auc(snap, nullptr, stream.task(t), groups, config, seed));
    run.probe_final = mean_of(aucs);
  }
  return run;
}

PlainModel train_plain_model(const ExperimentConfig& config, std::uint64_t seed,
                             const std::vector<int>& classes,
                             const std::vector<data::SampleRecord>& train,
                             const std::vector<data::SampleRecord>& val) {
  if (train.empty()) throw InvalidInput("no training data");
  nn::NetworkConfig net = config.network;
  net.in_channels = train.front().image.channels;
  net.height = train.front().image.height;
  net.width = train.front().image.width;
  net.seed = seed;
  PlainModel m{net, nn::ParamStore::initialize(net), nn::TaskHead::initialize(net, 0, classes, seed)};
  const nn::Network network(net);
  Rng shuffle = derive_rng(seed, "plain-shuffle");
  const auto& tc = config.train;
  subnet::train_supervised(network, m.params, m.head, train, val, nullptr, subnet::LossKind::Ce,
                           tc.gce, tc.stage1_epochs + tc.finetune_epochs, tc.patience,
                           tc.batch_size, tc.optimizer, shuffle);
  return m;
}

namespace {

std::vector<int> plain_predict(const PlainModel& m, std::span<const nn::Image* const> batch) {
  const nn::Network network(m.config);
  const auto fr = network.forward(m.params, m.head, batch);
  std::vector<int> out;
  for (int b = 0; b < fr.batch; ++b) {
    const auto lg = fr.logits_of(b);
    out.push_back(m.head.classes[std::max_element(lg.begin(), lg.end()) - lg.begin()]);
  }
  return out;
}

}  // namespace

RunResult run_baseline_joint(const data::TaskStream& stream, const std::vector<int>& order,
                             const ExperimentConfig& config, std::uint64_t seed, int order_index) {
  RunResult run = new_run(Method::Joint, seed, order_index);
  const int groups = stream.num_groups;
  for (int step = 0; step < static_cast<int>(order.size()); ++step) {
    const auto seen = seen_tasks(stream, order, step + 1);
    std::vector<int> classes;
    std::vector<data::SampleRecord> train;
    std::vector<data::SampleRecord> val;
    for (const auto* t : seen) {
      classes.insert(classes.end(), t->classes.begin(), t->classes.end());
      train.insert(train.end(), t->train.begin(), t->train.end());
      val.insert(val.end(), t->val.begin(), t->val.end());
    }
    std::sort(classes.begin(), classes.end());
    const auto model = train_plain_model(config, seed, classes, train, val);
    auto report = infer::evaluate_batches(
        seen, config.eval_batch, groups,
        [&model](int, std::span<const nn::Image* const> batch) {
          return std::pair{-1, plain_predict(model, batch)};
        });
    append_rows(run, step + 1, report);
    if (config.probe && step + 1 == static_cast<int>(order.size())) {
      const nn::Snapshot snap(model.config, model.params, {model.head});
      std::vector<double> aucs;
      for (const auto* t : seen) aucs.push_back(probe_auc(snap, nullptr, *t, groups, config, seed));
      run.probe_final = mean_of(aucs);
    }
    run.final_report = std::move(report);
  }
  return run;
}

RunResult run_single(const data::TaskStream& stream, const std::vector<int>& order,
                     const ExperimentConfig& config, std::uint64_t seed, int order_index) {
  RunResult run = new_run(Method::Single, seed, order_index);
  const int groups = stream.num_groups;
  std::map<int, PlainModel> models;
  for (int step = 0; step < static_cast<int>(order.size()); ++step) {
    const auto& task = stream.task(order[step]);
    models.emplace(task.task_id, train_plain_model(config, seed, task.classes, task.train, task.val));
    const auto seen = seen_tasks(stream, order, step + 1);
    auto report = infer::evaluate_batches(
        seen, config.eval_batch, groups,
        [&models](int true_task, std::span<const nn::Image* const> batch) {
          return std::pair{true_task, plain_predict(models.at(true_task), batch)};
        });
    append_rows(run, step + 1, report);
    run.final_report = std::move(report);
  }
  if (config.probe) {
    std::vector<double> aucs;
    for (const auto& [t, m] : models) {
      const nn::Snapshot snap(m.config, m.params, {m.head});
      aucs.push_back(probe_auc(snap, nullptr, stream.task(t), groups, config, seed));
    }
    run.probe_final = mean_of(aucs);
  }
  return run;
}

RunResult run_method(const data::TaskStream& stream, const std::vector<int>& order,
                     const ExperimentConfig& config, std::uint64_t seed, int order_index) {
  switch (config.method) {
    case Method::BiasPruner: return run_biaspruner(stream, order, config, seed, order_index);
    case Method::SeqFt: return run_seqft(stream, order, config, seed, order_index);
    case Method::Joint: return run_baseline_joint(stream, order, config, seed, order_index);
    case Method::Single: return run_single(stream, order, config, seed, order_index);
  }
  throw ConfigError("unknown method");
}

namespace {

RunOptions checkpointing(const ExperimentConfig& config, const std::filesystem::path& dir,
                         std::uint64_t seed, int order_index, const std::vector<int>& order) {
  RunOptions opts;
  if (!config.checkpoints) return opts;
  const auto hash = config_hash(config);
  opts.on_commit = [dir, seed, order_index, order, hash](const subnet::ContinualModel& model, int step,
                                                          const Rng& rng) {
    std::ostringstream os;
    os << rng;
    CheckpointFile f{kCheckpointVersion, hash, seed, order_index, order, step, model, os.str()};
    save_checkpoint(dir / ("checkpoint_s" + std::to_string(seed) + "_o" + std::to_string(order_index) +
                           "_t" + std::to_string(step) + ".ckpt"),
                    f);
  };
  return opts;
}

void write_reports(const ExperimentConfig& config, int num_groups, const std::filesystem::path& dir,
                   ExperimentResult& result) {
  result.csv_path = dir / "results.csv";
  result.summary_path = dir / "summary.json";
  {
    std::ofstream os(result.csv_path, std::ios::binary);
    if (!os) throw Error("cannot write " + result.csv_path.string());
    write_csv(result.runs, num_groups, os);
  }
  {
    std::ofstream os(result.summary_path, std::ios::binary);
    if (!os) throw Error("cannot write " + result.summary_path.string());
    auto summary = summarize(result.runs, num_groups);
    summary["config"] = to_json(config);
    os << summary.dump(2) << '\n';
  }
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config) {
  config.validate();
  const auto stream = load_stream(config);
  std::vector<int> ids;
  for (const auto& t : stream.tasks) ids.push_back(t.task_id);
  const auto orders = make_task_orders(ids, config.task_orders);
  const auto dir = output_dir(config);
  std::filesystem::create_directories(dir);

  ExperimentResult result;
  for (auto seed : config.seeds) {
    for (int o = 0; o < static_cast<int>(orders.size()); ++o) {
      if (config.method == Method::BiasPruner) {
        result.runs.push_back(
            run_biaspruner(stream, orders[o], config, seed, o, checkpointing(config, dir, seed, o, orders[o])));
      } else {
        result.runs.push_back(run_method(stream, orders[o], config, seed, o));
      }
    }
  }
  write_reports(config, stream.num_groups, dir, result);
  return result;
}

ExperimentResult resume_experiment(const ExperimentConfig& config,
                                   const std::filesystem::path& checkpoint) {
  config.validate();
  if (config.method != Method::BiasPruner) throw ConfigError("only biaspruner runs can be resumed");
  auto ckpt = load_checkpoint(checkpoint, config_hash(config));
  const auto stream = load_stream(config);
  for (int t : ckpt.order) stream.task(t);  // throws on a task the stream lacks
  const auto dir = output_dir(config);
  std::filesystem::create_directories(dir);

  RunOptions opts = checkpointing(config, dir, ckpt.seed, ckpt.order_index, ckpt.order);
  opts.resume = std::move(ckpt.model);
  opts.resume_rng_state = ckpt.rng_state;
  opts.start_step = ckpt.steps_done;
  ExperimentResult result;
  result.runs.push_back(run_biaspruner(stream, ckpt.order, config, ckpt.seed, ckpt.order_index, opts));
  write_reports(config, stream.num_groups, dir, result);
  return result;
}

}  // namespace debias::harness
