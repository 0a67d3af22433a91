// Command-line front end: gen-data, train, eval, probe, report.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>

#include "debias/harness.hpp"
#include "debias/log.hpp"
#include "debias/rng.hpp"

using namespace debias;
using nlohmann::json;

namespace {

struct Overrides {
  std::optional<std::string> method;
  std::optional<double> q, tau, gamma, lr, alpha;
  std::optional<int> batch, stage1_epochs, finetune_epochs, patience, orders, eval_batch;
  std::optional<std::string> inference_mode;
  std::optional<std::string> output_dir, ingest_metadata, ingest_root;
  bool ce_for_gce = false, random_prune = false, plain_ce_finetune = false, no_kt = false;
  bool probe = false, checkpoints = false;

  void attach(CLI::App* app) {
    app->add_option("--method", method, "biaspruner, joint, single or seqft");
    app->add_option("--q", q, "GCE exponent");
    app->add_option("--tau", tau, "confidence threshold for the easy/hard split");
    app->add_option("--gamma", gamma, "fraction of units pruned");
    app->add_option("--lr", lr, "learning rate");
    app->add_option("--alpha", alpha, "initial (or fixed) WCE alpha");
    app->add_option("--batch", batch, "training batch size");
    app->add_option("--stage1-epochs", stage1_epochs);
    app->add_option("--finetune-epochs", finetune_epochs);
    app->add_option("--patience", patience);
    app->add_option("--orders", orders, "number of task orders");
    app->add_option("--eval-batch", eval_batch, "test batch size for task selection");
    app->add_option("--inference-mode", inference_mode, "raw_logits or softmax");
    app->add_option("--output-dir", output_dir);
    app->add_option("--ingest-metadata", ingest_metadata, "metadata CSV to load instead of generating");
    app->add_option("--ingest-root", ingest_root, "image root for --ingest-metadata");
    app->add_flag("--ce-for-gce", ce_for_gce, "ablation: CE instead of GCE in stage 1");
    app->add_flag("--random-prune", random_prune, "ablation: random unit scores");
    app->add_flag("--plain-ce-finetune", plain_ce_finetune, "ablation: unweighted finetuning");
    app->add_flag("--no-kt", no_kt, "ablation: masks may not share units");
    app->add_flag("--probe", probe, "run the attribute probe after each task");
    app->add_flag("--checkpoints", checkpoints, "write a checkpoint after each task");
  }

  // Applied on the JSON form so the usual config validation reports problems.
  json apply(json j) const {
    auto set = [&j](const char* key, const auto& v) {
      if (v) j[key] = *v;
    };
    set("method", method);
    set("q", q);
    set("tau", tau);
    set("gamma", gamma);
    set("learning_rate", lr);
    set("alpha", alpha);
    set("batch", batch);
    set("stage1_epochs", stage1_epochs);
    set("finetune_epochs", finetune_epochs);
    set("patience", patience);
    set("task_orders", orders);
    set("eval_batch", eval_batch);
    set("inference_mode", inference_mode);
    set("output_dir", output_dir);
    if (ingest_metadata) j["dataset"]["ingest_metadata"] = *ingest_metadata;
    if (ingest_root) j["dataset"]["ingest_root"] = *ingest_root;
    if (ce_for_gce) j["ablations"]["ce_for_gce"] = true;
    if (random_prune) j["ablations"]["random_prune"] = true;
    if (plain_ce_finetune) j["ablations"]["plain_ce_finetune"] = true;
    if (no_kt) j["ablations"]["no_kt"] = true;
    if (probe) j["probe"] = true;
    if (checkpoints) j["checkpoints"] = true;
    return j;
  }
};

harness::ExperimentConfig build_config(const std::string& path, const Overrides& ov) {
  json j = json::object();
  if (!path.empty()) j = harness::to_json(harness::load_config(path));
  return harness::config_from_json(ov.apply(j));
}

json metrics_json(const metrics::TaskMetrics& m) {
  auto opt = [](std::optional<double> v) { return v ? json(*v) : json(nullptr); };
  json groups = json::array();
  for (const auto& g : m.per_group_acc) groups.push_back(opt(g));
  return {{"task", m.task_id},  {"f1", m.macro_f1},   {"bacc", m.balanced_acc},
          {"acc_g", groups},    {"dpr", opt(m.dpr)},  {"eod", opt(m.eod)},
          {"tsel_acc", opt(m.task_selection_acc)}, {"probe_auc", opt(m.probe_auc)}};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
}

int cmd_gen_data(const std::string& config_path, std::optional<std::uint64_t> seed,
                 const std::string& out) {
  auto config = build_config(config_path, {});
  if (seed) config.dataset.seed = *seed;
  config.dataset.validate();
  const auto stream = data::generate(config.dataset);
  data::save_stream(stream, out);
  for (const auto& t : stream.tasks) {
    std::cout << "task " << t.task_id << ": " << t.train.size() << " train, " << t.val.size()
              << " val, " << t.test.size() << " test, Cramer's V " << data::cramers_v(t.train)
              << '\n';
  }
  std::cout << "wrote " << out << "/metadata.csv\n";
  return 0;
}

int cmd_train(const std::string& config_path, const Overrides& ov, std::uint64_t seed,
              const std::string& resume) {
  auto config = build_config(config_path, ov);
  config.seeds = {seed};
  const auto result = resume.empty() ? harness::run_experiment(config)
                                     : harness::resume_experiment(config, resume);
  const auto summary = harness::summarize(result.runs, config.dataset.num_groups);
  std::cout << summary["methods"].dump(2) << '\n';
  std::cout << "wrote " << result.csv_path.string() << " and " << result.summary_path.string() << '\n';
  return 0;
}

int cmd_eval(const std::string& config_path, const Overrides& ov, const std::string& ckpt_path,
             bool oracle) {
  const auto config = build_config(config_path, ov);
  const auto ckpt = harness::load_checkpoint(ckpt_path, harness::config_hash(config));
  const auto stream = harness::load_stream(config);
  std::map<int, nn::ChannelMask> masks;
  std::vector<const data::TaskData*> tasks;
  for (const auto& [t, m] : ckpt.model.registry.masks()) {
    masks.emplace(t, m.kept);
    tasks.push_back(&stream.task(t));
  }
  const auto report = infer::evaluate_stream(ckpt.model.snapshot(), masks, tasks, config.eval_batch,
                                             stream.num_groups, oracle, config.inference_mode);
  json out = {{"per_task", json::array()}, {"averaged", metrics_json(report.averaged)}};
  for (const auto& m : report.per_task) out["per_task"].push_back(metrics_json(m));
  std::cout << out.dump(2) << '\n';
  return 0;
}

int cmd_probe(const std::string& config_path, const Overrides& ov, const std::string& ckpt_path) {
  const auto config = build_config(config_path, ov);
  const auto ckpt = harness::load_checkpoint(ckpt_path, harness::config_hash(config));
  const auto stream = harness::load_stream(config);
  const auto snap = ckpt.model.snapshot();
  json out = json::array();
  for (const auto& [t, m] : ckpt.model.registry.masks()) {
    const auto& task = stream.task(t);
    std::vector<const nn::Image*> tr, te;
    std::vector<int> atr, ate;
    for (const auto& s : task.train) {
      tr.push_back(&s.image);
      atr.push_back(s.attribute);
    }
    for (const auto& s : task.test) {
      te.push_back(&s.image);
      ate.push_back(s.attribute);
    }
    auto pc = config.probe_config;
    pc.seed = splitmix64(ckpt.seed ^ static_cast<std::uint64_t>(t));
    const auto r = metrics::attribute_probe(snap, &m.kept, tr, atr, te, ate, stream.num_groups, pc);
    out.push_back({{"task", t}, {"probe_auc", r.mean_auc()}});
  }
  std::cout << out.dump(2) << '\n';
  return 0;
}

int cmd_report(const std::string& csv_path, const std::string& out_dir) {
  std::ifstream is(csv_path, std::ios::binary);
  if (!is) throw Error("cannot open " + csv_path);
  const auto table = harness::read_csv(is);
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  write_text(dir / "bacc.svg", harness::render_svg(table, "bacc", "Balanced accuracy after each task"));
  write_text(dir / "dpr.svg", harness::render_svg(table, "dpr", "DPR after each task"));
  std::cout << "wrote " << (dir / "bacc.svg").string() << " and " << (dir / "dpr.svg").string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bias-aware pruning for fair continual learning on synthetic biased streams"};
  app.require_subcommand(1);
  std::string level = "info";
  app.add_option("--log-level", level, "trace, debug, info, warn, error or off");

  std::string config_path;
  Overrides ov;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic stream and save it to disk");
  std::string gen_out;
  std::optional<std::uint64_t> gen_seed;
  gen->add_option("--config", config_path, "JSON config file");
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--out", gen_out, "output directory")->required();

  auto* train = app.add_subcommand("train", "run an experiment for one seed over all task orders");
  std::uint64_t seed = 0;
  std::string resume;
  train->add_option("--config", config_path, "JSON config file");
  train->add_option("--seed", seed, "run seed")->required();
  train->add_option("--resume", resume, "continue the run stored in this checkpoint");
  ov.attach(train);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split of its tasks");
  std::string ckpt;
  bool oracle = false;
  eval->add_option("--config", config_path, "JSON config the checkpoint was trained with");
  eval->add_option("--checkpoint", ckpt)->required();
  eval->add_flag("--oracle", oracle, "use true task ids instead of task selection");
  ov.attach(eval);

  auto* probe = app.add_subcommand("probe", "attribute probe on each task's subnetwork features");
  probe->add_option("--config", config_path, "JSON config the checkpoint was trained with");
  probe->add_option("--checkpoint", ckpt)->required();
  ov.attach(probe);

  auto* report = app.add_subcommand("report", "render SVG charts from a results CSV");
  std::string csv, report_out = ".";
  report->add_option("--csv", csv)->required();
  report->add_option("--out", report_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  auto log = spdlog::stderr_color_mt("debias");
  log->set_level(spdlog::level::from_str(level));
  set_logger(log);

  try {
    if (*gen) return cmd_gen_data(config_path, gen_seed, gen_out);
    if (*train) return cmd_train(config_path, ov, seed, resume);
    if (*eval) return cmd_eval(config_path, ov, ckpt, oracle);
    if (*probe) return cmd_probe(config_path, ov, ckpt);
    if (*report) return cmd_report(csv, report_out);
  } catch (const harness::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
