#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>

#include "debias/errors.hpp"
#include "debias/harness.hpp"
#include "debias/log.hpp"
#include "debias/rng.hpp"

namespace debias::harness {

using nlohmann::json;

const char* method_name(Method m) {
  switch (m) {
    case Method::BiasPruner: return "biaspruner";
    case Method::Joint: return "joint";
    case Method::Single: return "single";
    case Method::SeqFt: return "seqft";
  }
  return "?";
}

Method parse_method(const std::string& s) {
  for (Method m : {Method::BiasPruner, Method::Joint, Method::Single, Method::SeqFt}) {
    if (s == method_name(m)) return m;
  }
  throw ConfigError("unknown method '" + s + "' (expected biaspruner, joint, single or seqft)");
}

namespace {

const char* hard_rule_name(bias::HardRule r) {
  return r == bias::HardRule::ConfidentWithFallback ? "confident_with_fallback" : "any_misclassified";
}

}  // namespace

std::vector<std::string> ExperimentConfig::issues() const {
  std::vector<std::string> out;
  if (ingest_metadata.empty()) {
    try {
      dataset.validate();
    } catch (const ValidationError& e) {
      for (const auto& i : e.issues()) out.push_back("dataset: " + i);
    }
  } else if (dataset.num_groups < 2) {
    out.push_back("dataset: num_groups must be at least 2");
  }
  auto check = [&out](const char* prefix, auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      out.push_back(std::string(prefix) + e.what());
    }
  };
  check("network: ", [this] {
    auto n = network;
    n.in_channels = dataset.channels;
    n.height = dataset.height;
    n.width = dataset.width;
    n.validate();
  });
  check("train: ", [this] { train.validate(); });
  if (train.patience < 0) out.push_back("train: patience must be non-negative");
  if (method != Method::BiasPruner && train.ablations != subnet::Ablations{}) {
    out.push_back(std::string("ablation flags are only valid with method biaspruner, not ") +
                  method_name(method));
  }
  if (seeds.empty()) out.push_back("seeds must not be empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    out.push_back("seeds must be distinct");
  }
  if (task_orders < 1) out.push_back("task_orders must be at least 1");
  if (eval_batch < 1) out.push_back("eval_batch must be at least 1");
  if (probe_config.epochs < 1) out.push_back("probe_epochs must be at least 1");
  if (probe_config.learning_rate <= 0.0) out.push_back("probe_lr must be positive");
  if (probe_config.batch_size < 1) out.push_back("probe_batch must be at least 1");
  if (output_dir.empty()) out.push_back("output_dir must not be empty");
  return out;
}

void ExperimentConfig::validate() const {
  auto i = issues();
  if (!i.empty()) throw ValidationError(std::move(i));
}

json to_json(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  json layers = json::array();
  for (const auto& l : c.network.conv_layers) layers.push_back({l.out_channels, l.kernel_size});
  return {
      {"method", method_name(c.method)},
      {"ablations",
       {{"ce_for_gce", c.train.ablations.ce_for_gce},
        {"random_prune", c.train.ablations.random_prune},
        {"plain_ce_finetune", c.train.ablations.plain_ce_finetune},
        {"no_kt", c.train.ablations.no_kt}}},
      {"q", c.train.gce.q},
      {"tau", c.train.partition.tau},
      {"hard_rule", hard_rule_name(c.train.partition.hard_rule)},
      {"gamma", c.train.gamma},
      {"batch", c.train.batch_size},
      {"stage1_epochs", c.train.stage1_epochs},
      {"patience", c.train.patience},
      {"finetune_epochs", c.train.finetune_epochs},
      {"learning_rate", c.train.optimizer.learning_rate},
      {"alpha", c.train.alpha},
      {"train_alpha", c.train.train_alpha},
      {"selection_eod_weight", c.train.selection_eod_weight},
      {"seeds", c.seeds},
      {"task_orders", c.task_orders},
      {"eval_batch", c.eval_batch},
      {"inference_mode", c.inference_mode == infer::ScoreMode::Softmax ? "softmax" : "raw_logits"},
      {"probe", c.probe},
      {"probe_epochs", c.probe_config.epochs},
      {"probe_lr", c.probe_config.learning_rate},
      {"probe_batch", c.probe_config.batch_size},
      {"checkpoints", c.checkpoints},
      {"output_dir", c.output_dir},
      {"network", {{"conv_layers", layers}, {"head_width", c.network.head_width}}},
      {"dataset",
       {{"classes_per_task", d.classes_per_task},
        {"num_groups", d.num_groups},
        {"rho_train", d.rho_train},
        {"rho_val", d.rho_val},
        {"rho_test", d.rho_test},
        {"samples_per_class", d.samples_per_class},
        {"seed", d.seed},
        {"channels", d.channels},
        {"height", d.height},
        {"width", d.width},
        {"ingest_metadata", c.ingest_metadata},
        {"ingest_root", c.ingest_root},
        {"style",
         {{"tint_strength", d.style.tint_strength},
          {"tint_jitter", d.style.tint_jitter},
          {"shape_contrast", d.style.shape_contrast},
          {"contrast_jitter", d.style.contrast_jitter},
          {"position_jitter", d.style.position_jitter},
          {"pixel_noise", d.style.pixel_noise}}}}},
  };
}

namespace {

// Reads keys of one JSON object, recording type errors and unknown keys.
class Reader {
 public:
  Reader(const json& j, std::string path, std::vector<std::string>& issues)
      : j_(j), path_(std::move(path)), issues_(issues) {
    if (!j_.is_object()) issues_.push_back(where("") + "must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    try {
      out = j_.at(key).template get<T>();
    } catch (const json::exception&) {
      issues_.push_back(where(key) + "has the wrong type");
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

  std::string where(const std::string& key) const {
    std::string p = path_;
    if (!key.empty()) p += p.empty() ? key : "." + key;
    return p.empty() ? "" : p + ": ";
  }

  void finish() {
    if (!j_.is_object()) return;
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) issues_.push_back(where(k) + "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::vector<std::string>& issues_;
  std::set<std::string> seen_;
};

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  std::vector<std::string> issues;
  Reader r(j, "", issues);

  std::string method = method_name(c.method);
  r.get("method", method);
  try {
    c.method = parse_method(method);
  } catch (const ConfigError& e) {
    issues.push_back(std::string("method: ") + e.what());
  }
  if (const json* a = r.child("ablations")) {
    Reader ar(*a, "ablations", issues);
    ar.get("ce_for_gce", c.train.ablations.ce_for_gce);
    ar.get("random_prune", c.train.ablations.random_prune);
    ar.get("plain_ce_finetune", c.train.ablations.plain_ce_finetune);
    ar.get("no_kt", c.train.ablations.no_kt);
    ar.finish();
  }
  r.get("q", c.train.gce.q);
  r.get("tau", c.train.partition.tau);
  std::string rule = hard_rule_name(c.train.partition.hard_rule);
  r.get("hard_rule", rule);
  if (rule == "confident_with_fallback") {
    c.train.partition.hard_rule = bias::HardRule::ConfidentWithFallback;
  } else if (rule == "any_misclassified") {
    c.train.partition.hard_rule = bias::HardRule::AnyMisclassified;
  } else {
    issues.push_back("hard_rule: expected confident_with_fallback or any_misclassified");
  }
  r.get("gamma", c.train.gamma);
  r.get("batch", c.train.batch_size);
  r.get("stage1_epochs", c.train.stage1_epochs);
  r.get("patience", c.train.patience);
  r.get("finetune_epochs", c.train.finetune_epochs);
  r.get("learning_rate", c.train.optimizer.learning_rate);
  r.get("alpha", c.train.alpha);
  r.get("train_alpha", c.train.train_alpha);
  r.get("selection_eod_weight", c.train.selection_eod_weight);
  r.get("seeds", c.seeds);
  r.get("task_orders", c.task_orders);
  r.get("eval_batch", c.eval_batch);
  std::string mode = c.inference_mode == infer::ScoreMode::Softmax ? "softmax" : "raw_logits";
  r.get("inference_mode", mode);
  if (mode == "raw_logits") {
    c.inference_mode = infer::ScoreMode::RawLogits;
  } else if (mode == "softmax") {
    c.inference_mode = infer::ScoreMode::Softmax;
  } else {
    issues.push_back("inference_mode: expected raw_logits or softmax");
  }
  r.get("probe", c.probe);
  r.get("probe_epochs", c.probe_config.epochs);
  r.get("probe_lr", c.probe_config.learning_rate);
  r.get("probe_batch", c.probe_config.batch_size);
  r.get("checkpoints", c.checkpoints);
  r.get("output_dir", c.output_dir);
  if (const json* n = r.child("network")) {
    Reader nr(*n, "network", issues);
    std::vector<std::vector<int>> layers;
    bool have_layers = n->is_object() && n->contains("conv_layers");
    nr.get("conv_layers", layers);
    if (have_layers) {
      c.network.conv_layers.clear();
      for (const auto& l : layers) {
        if (l.size() != 2) {
          issues.push_back("network.conv_layers: each entry must be [out_channels, kernel_size]");
          continue;
        }
        c.network.conv_layers.push_back({l[0], l[1]});
      }
    }
    nr.get("head_width", c.network.head_width);
    nr.finish();
  }
  if (const json* d = r.child("dataset")) {
    Reader dr(*d, "dataset", issues);
    auto& ds = c.dataset;
    dr.get("classes_per_task", ds.classes_per_task);
    dr.get("num_groups", ds.num_groups);
    dr.get("rho_train", ds.rho_train);
    dr.get("rho_val", ds.rho_val);
    dr.get("rho_test", ds.rho_test);
    dr.get("samples_per_class", ds.samples_per_class);
    dr.get("seed", ds.seed);
    dr.get("channels", ds.channels);
    dr.get("height", ds.height);
    dr.get("width", ds.width);
    dr.get("ingest_metadata", c.ingest_metadata);
    dr.get("ingest_root", c.ingest_root);
    if (const json* s = dr.child("style")) {
      Reader sr(*s, "dataset.style", issues);
      sr.get("tint_strength", ds.style.tint_strength);
      sr.get("tint_jitter", ds.style.tint_jitter);
      sr.get("shape_contrast", ds.style.shape_contrast);
      sr.get("contrast_jitter", ds.style.contrast_jitter);
      sr.get("position_jitter", ds.style.position_jitter);
      sr.get("pixel_noise", ds.style.pixel_noise);
      sr.finish();
    }
    dr.finish();
  }
  r.finish();
  c.network.in_channels = c.dataset.channels;
  c.network.height = c.dataset.height;
  c.network.width = c.dataset.width;
  if (!issues.empty()) throw ValidationError(std::move(issues));
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

std::uint64_t config_hash(const ExperimentConfig& config) {
  json j = to_json(config);
  for (const char* k : {"seeds", "task_orders", "output_dir", "checkpoints", "probe", "probe_epochs",
                        "probe_lr", "probe_batch", "eval_batch", "inference_mode"}) {
    j.erase(k);
  }
  return fnv1a(j.dump());
}

std::filesystem::path output_dir(const ExperimentConfig& config) {
  if (const char* env = std::getenv("DEBIAS_OUTPUT_DIR"); env && *env) return env;
  return config.output_dir;
}

std::vector<std::vector<int>> make_task_orders(const std::vector<int>& task_ids, int count) {
  std::vector<std::vector<int>> orders{task_ids};
  std::vector<int> sorted = task_ids;
  std::sort(sorted.begin(), sorted.end());
  long long distinct = 1;
  for (std::size_t i = 2; i <= sorted.size() && distinct < count; ++i) distinct *= static_cast<long long>(i);
  if (distinct < count) {
    logger()->warn("only {} distinct task orders exist; using all of them", distinct);
    count = static_cast<int>(distinct);
  }
  Rng rng = derive_rng(0, "task-order");
  while (static_cast<int>(orders.size()) < count) {
    auto o = task_ids;
    std::shuffle(o.begin(), o.end(), rng);
    if (std::find(orders.begin(), orders.end(), o) == orders.end()) orders.push_back(std::move(o));
  }
  return orders;
}

data::TaskStream load_stream(const ExperimentConfig& config) {
  if (!config.ingest_metadata.empty()) {
    const std::filesystem::path meta = config.ingest_metadata;
    const std::filesystem::path root =
        config.ingest_root.empty() ? meta.parent_path() : std::filesystem::path(config.ingest_root);
    auto stream = data::ingest_csv(root, meta,
                                   {config.dataset.channels, config.dataset.height, config.dataset.width});
    return stream;
  }
  return data::generate(config.dataset);
}

}  // namespace debias::harness
