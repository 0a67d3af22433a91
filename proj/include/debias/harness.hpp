#pragma once

// Experiment orchestration: configs, methods and baselines over seeds and task
// orders, CSV/JSON/SVG reports, and checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "debias/datagen.hpp"
#include "debias/errors.hpp"
#include "debias/inference.hpp"
#include "debias/metrics.hpp"
#include "debias/nn.hpp"
#include "debias/subnet.hpp"

namespace debias::harness {

enum class Method { BiasPruner, Joint, Single, SeqFt };

const char* method_name(Method m);
Method parse_method(const std::string& s);  // throws ConfigError

struct ExperimentConfig {
  data::BiasSpec dataset;
  std::string ingest_metadata;  // non-empty: load this CSV instead of generating
  std::string ingest_root;
  nn::NetworkConfig network;    // seed is replaced by the run seed
  Method method = Method::BiasPruner;
  subnet::TrainConfig train;
  std::vector<std::uint64_t> seeds{0};
  int task_orders = 3;
  int eval_batch = 32;
  infer::ScoreMode inference_mode = infer::ScoreMode::RawLogits;
  bool probe = false;
  metrics::ProbeConfig probe_config;
  bool checkpoints = false;
  std::string output_dir = "results";

  // Every problem found, empty when valid.
  std::vector<std::string> issues() const;
  void validate() const;  // throws ValidationError
};

nlohmann::json to_json(const ExperimentConfig& config);
// Unknown keys and bad values are collected into one ValidationError.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

// FNV-1a over the canonical JSON of everything that shapes training
// (seeds, orders and output locations excluded).
std::uint64_t config_hash(const ExperimentConfig& config);

// `DEBIAS_OUTPUT_DIR` overrides config.output_dir when set.
std::filesystem::path output_dir(const ExperimentConfig& config);

// Identity first, then distinct random permutations (fixed across seeds).
std::vector<std::vector<int>> make_task_orders(const std::vector<int>& task_ids, int count);

data::TaskStream load_stream(const ExperimentConfig& config);

struct StepRow {
  Method method = Method::BiasPruner;
  std::uint64_t seed = 0;
  int order = 0;
  int step = 0;  // 1-based count of tasks seen
  metrics::TaskMetrics metrics;  // task_id 0 marks the across-task average
  bool is_average = false;
};

struct RunResult {
  Method method = Method::BiasPruner;
  std::uint64_t seed = 0;
  int order = 0;
  std::vector<StepRow> rows;
  metrics::MetricsReport final_report;
  // Mean probe AUC over tasks on stage-1 and on final subnetwork features.
  std::optional<double> probe_biased;
  std::optional<double> probe_final;
};

struct RunOptions {
  // Called after each committed BiasPruner task with the model state and the
  // run RNG that seeds the next task.
  std::function<void(const subnet::ContinualModel&, int step, const Rng&)> on_commit;
  // Resume from a model that already holds the first `start_step` tasks of `order`.
  std::optional<subnet::ContinualModel> resume;
  std::string resume_rng_state;
  int start_step = 0;
};

RunResult run_biaspruner(const data::TaskStream& stream, const std::vector<int>& order,
                         const ExperimentConfig& config, std::uint64_t seed, int order_index,
                         const RunOptions& options = {});
RunResult run_seqft(const data::TaskStream& stream, const std::vector<int>& order,
                    const ExperimentConfig& config, std::uint64_t seed, int order_index);
RunResult run_baseline_joint(const data::TaskStream& stream, const std::vector<int>& order,
                             const ExperimentConfig& config, std::uint64_t seed, int order_index);
RunResult run_single(const data::TaskStream& stream, const std::vector<int>& order,
                     const ExperimentConfig& config, std::uint64_t seed, int order_index);
RunResult run_method(const data::TaskStream& stream, const std::vector<int>& order,
                     const ExperimentConfig& config, std::uint64_t seed, int order_index);

// One trunk and one head over `classes`, trained on the pooled samples with CE.
// Shared by JOINT and SINGLE.
struct PlainModel {
  nn::NetworkConfig config;
  nn::ParamStore params;
  nn::TaskHead head;
};
PlainModel train_plain_model(const ExperimentConfig& config, std::uint64_t seed,
                             const std::vector<int>& classes,
                             const std::vector<data::SampleRecord>& train,
                             const std::vector<data::SampleRecord>& val);

struct ExperimentResult {
  std::vector<RunResult> runs;
  std::filesystem::path csv_path;
  std::filesystem::path summary_path;
};

// Validates, runs every (seed, order) and writes results.csv and summary.json.
ExperimentResult run_experiment(const ExperimentConfig& config);
// Continues the BiasPruner run stored in `checkpoint` (its seed and order) to
// the end of the stream. The checkpoint must match config_hash(config).
ExperimentResult resume_experiment(const ExperimentConfig& config,
                                   const std::filesystem::path& checkpoint);

void write_csv(const std::vector<RunResult>& runs, int num_groups, std::ostream& os);
nlohmann::json summarize(const std::vector<RunResult>& runs, int num_groups);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};
CsvTable read_csv(std::istream& is);

// Line charts of averaged bacc and dpr per step, one series per method/seed/order.
std::string render_svg(const CsvTable& table, const std::string& column, const std::string& title);

// Checkpoint: magic, version, config hash, run identity, model, RNG state, checksum.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointFile {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  int order_index = 0;
  std::vector<int> order;
  int steps_done = 0;
  subnet::ContinualModel model;
  std::string rng_state;  // textual std::mt19937_64 state
  bool operator==(const CheckpointFile&) const = default;
};

class CheckpointError : public Error {
 public:
  enum class Code { Io, Corrupt, VersionMismatch, ConfigMismatch };
  CheckpointError(Code code, const std::string& what) : Error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

void save_checkpoint(const std::filesystem::path& path, const CheckpointFile& file);
// Throws CheckpointError; `expected_hash` is checked when given.
CheckpointFile load_checkpoint(const std::filesystem::path& path,
                               std::optional<std::uint64_t> expected_hash = std::nullopt);

}  // namespace debias::harness
