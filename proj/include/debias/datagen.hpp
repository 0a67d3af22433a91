#pragma once

// Synthetic spuriously-correlated image streams, Cramér's V, and ingestion of
// external datasets described by a metadata CSV.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "debias/nn.hpp"

namespace debias::data {

using nn::Image;

struct SampleRecord {
  std::uint64_t id = 0;
  Image image;
  int label = 0;      // global class id
  int attribute = 0;  // sensitive group id
  int task_id = 0;
  bool operator==(const SampleRecord&) const = default;
};

enum class Split { Train, Val, Test };

const char* split_name(Split s);

struct TaskData {
  int task_id = 0;
  std::vector<int> classes;  // ascending global ids
  std::vector<SampleRecord> train;
  std::vector<SampleRecord> val;
  std::vector<SampleRecord> test;

  const std::vector<SampleRecord>& split(Split s) const;
  int local_index(int global_class) const;  // -1 when not in this task
  bool operator==(const TaskData&) const = default;
};

struct TaskStream {
  int num_groups = 0;
  std::vector<TaskData> tasks;  // ascending task id

  const TaskData& task(int task_id) const;
  int num_classes() const;
  bool operator==(const TaskStream&) const = default;
};

// Rendering knobs for the synthetic images. The attribute cue (background
// tint) is deliberately easier to pick up than the class cue (shape).
struct RenderStyle {
  double tint_strength = 0.30;    // half-distance between group background colours
  double tint_jitter = 0.08;      // per-sample, per-channel background jitter
  double shape_contrast = 0.45;   // foreground intensity offset over the background
  double contrast_jitter = 0.10;
  int position_jitter = 2;        // pixels
  double pixel_noise = 0.06;      // per-pixel Gaussian sigma
};

struct BiasSpec {
  std::vector<int> classes_per_task{2, 2, 3};
  int num_groups = 2;
  double rho_train = 0.95;
  double rho_val = 0.5;
  double rho_test = 0.5;
  int samples_per_class = 715;  // total over train/val/test, split 70/10/20
  std::uint64_t seed = 0;
  int channels = 3;
  int height = 16;
  int width = 16;
  RenderStyle style;

  int num_tasks() const { return static_cast<int>(classes_per_task.size()); }
  // Throws ValidationError listing every problem.
  void validate() const;
};

// Group a class is aligned with: its position within its task, modulo G.
int aligned_group(int local_class_index, int num_groups);

TaskStream generate(const BiasSpec& spec);

// Cramér's V between two categorical sequences. Returns 0 (with a warning)
// when either side has fewer than two distinct values.
double cramers_v(std::span<const int> labels, std::span<const int> attributes);
double cramers_v(const std::vector<SampleRecord>& samples);

// Metadata header, bit-exact.
inline constexpr const char* kMetadataHeader = "id,path,label,attribute,task,split";

struct ImageShape {
  int channels = 3;
  int height = 16;
  int width = 16;
};

// Reads metadata.csv-style rows; images may be .bin tensors or binary PPM/PGM,
// resized bilinearly to `shape`. Throws ValidationError naming every bad row.
TaskStream ingest_csv(const std::filesystem::path& root_dir,
                      const std::filesystem::path& metadata_path, ImageShape shape = {});

// Writes images/<id>.bin plus metadata.csv under dir.
void save_stream(const TaskStream& stream, const std::filesystem::path& dir);

void write_tensor(const std::filesystem::path& path, const Image& image);
Image read_tensor(const std::filesystem::path& path);

// Rebuilds a stream with task ids kept but samples restricted/reordered, used
// by the harness for order sweeps.
std::vector<const TaskData*> ordered_tasks(const TaskStream& stream, std::span<const int> order);

}  // namespace debias::data
