#include "debias/datagen.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "debias/errors.hpp"
#include "debias/log.hpp"
#include "debias/rng.hpp"

namespace debias::data {

namespace fs = std::filesystem;

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

const std::vector<SampleRecord>& TaskData::split(Split s) const {
  switch (s) {
    case Split::Train: return train;
    case Split::Val: return val;
    case Split::Test: return test;
  }
  return train;
}

int TaskData::local_index(int global_class) const {
  auto it = std::lower_bound(classes.begin(), classes.end(), global_class);
  if (it == classes.end() || *it != global_class) return -1;
  return static_cast<int>(it - classes.begin());
}

const TaskData& TaskStream::task(int task_id) const {
  for (const auto& t : tasks) {
    if (t.task_id == task_id) return t;
  }
  throw InvalidInput("stream has no task " + std::to_string(task_id));
}

int TaskStream::num_classes() const {
  int n = 0;
  for (const auto& t : tasks) {
    if (!t.classes.empty()) n = std::max(n, t.classes.back() + 1);
  }
  return n;
}

void BiasSpec::validate() const {
  std::vector<std::string> issues;
  if (classes_per_task.empty()) issues.emplace_back("at least one task is required");
  for (std::size_t t = 0; t < classes_per_task.size(); ++t) {
    if (classes_per_task[t] < 1) {
      issues.push_back("task " + std::to_string(t + 1) + " needs at least one class");
    }
  }
  if (num_groups < 1) issues.emplace_back("num_groups must be >= 1");
  const double lo = num_groups > 0 ? 1.0 / num_groups : 0.0;
  auto check_rho = [&](double rho, const char* name) {
    if (!(rho >= lo - 1e-12 && rho <= 1.0)) {
      issues.push_back(std::string(name) + " must lie in [1/G, 1]");
    }
  };
  check_rho(rho_train, "rho_train");
  check_rho(rho_val, "rho_val");
  check_rho(rho_test, "rho_test");
  if (samples_per_class < num_groups) {
    issues.emplace_back("samples_per_class must be >= num_groups");
  }
  if (channels != 3) issues.emplace_back("synthetic images are rendered with 3 channels");
  if (height < 8 || width < 8) issues.emplace_back("synthetic images need at least 8x8 pixels");
  if (!issues.empty()) throw ValidationError(std::move(issues));
}

int aligned_group(int local_class_index, int num_groups) { return local_class_index % num_groups; }

namespace {

// Background colour per group: evenly spaced hues around a grey midpoint.
std::array<double, 3> group_tint(int group, int num_groups, double strength) {
  const double pi = std::acos(-1.0);
  const double angle = 2.0 * pi * group / std::max(num_groups, 1);
  // Two orthogonal colour-opponent axes: red-vs-blue and green-vs-magenta.
  const double a = std::cos(angle);
  const double b = std::sin(angle);
  return {0.5 + strength * a, 0.5 + 0.8 * strength * b, 0.5 - strength * a};
}

// Binary shape mask for a global class on a size x size canvas centred at (cy, cx).
// Shapes are bar gratings: kind % 4 picks the orientation (horizontal, vertical,
// diagonal, anti-diagonal), kinds 0-3 draw two bars and kinds 4-7 three.
bool shape_pixel(int shape_class, int y, int x, double cy, double cx, double scale) {
  const double dy = (y - cy) / scale;
  const double dx = (x - cx) / scale;
  const int kind = shape_class % 8;
  const int variant = shape_class / 8;
  const double s = 1.0 + 0.15 * (variant % 3);
  if (std::max(std::abs(dy), std::abs(dx)) > 4.5 * s) return false;
  double across = 0.0;
  switch (kind % 4) {
    case 0: across = dy; break;
    case 1: across = dx; break;
    case 2: across = (dx + dy) / std::sqrt(2.0); break;
    default: across = (dx - dy) / std::sqrt(2.0); break;
  }
  if (kind < 4) return std::abs(std::abs(across) - 2.5 * s) <= 0.8;
  return std::abs(across) <= 0.7 || std::abs(std::abs(across) - 3.2 * s) <= 0.7;
}

Image render(const BiasSpec& spec, int global_class, int group, Rng& rng) {
  const auto& st = spec.style;
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> noise(0.0, st.pixel_noise);
  std::uniform_int_distribution<int> shift(-st.position_jitter, st.position_jitter);

  auto tint = group_tint(group, spec.num_groups, st.tint_strength);
  for (double& c : tint) c += st.tint_jitter * unit(rng);
  const double cy = (spec.height - 1) / 2.0 + shift(rng);
  const double cx = (spec.width - 1) / 2.0 + shift(rng);
  const double scale = spec.height / 16.0 * (1.0 + 0.1 * unit(rng));
  const double contrast = st.shape_contrast + st.contrast_jitter * unit(rng);

  Image im{spec.channels, spec.height, spec.width, {}};
  im.pixels.resize(static_cast<std::size_t>(spec.channels) * spec.height * spec.width);
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      const bool fg = shape_pixel(global_class, y, x, cy, cx, scale);
      for (int c = 0; c < spec.channels; ++c) {
        double v = tint[c] + (fg ? contrast : 0.0) + noise(rng);
        im.pixels[(static_cast<std::size_t>(c) * spec.height + y) * spec.width + x] =
            std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return im;
}

int draw_group(int aligned, int num_groups, double rho, Rng& rng) {
  if (num_groups == 1) return 0;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (u(rng) < rho) return aligned;
  std::uniform_int_distribution<int> other(0, num_groups - 2);
  int g = other(rng);
  return g >= aligned ? g + 1 : g;
}

}  // namespace

TaskStream generate(const BiasSpec& spec) {
  spec.validate();
  TaskStream stream;
  stream.num_groups = spec.num_groups;
  std::uint64_t next_id = 0;
  int next_class = 0;
  const int n = spec.samples_per_class;
  const int n_train = static_cast<int>(std::lround(0.7 * n));
  const int n_val = static_cast<int>(std::lround(0.1 * n));
  for (int t = 0; t < spec.num_tasks(); ++t) {
    TaskData task;
    task.task_id = t + 1;
    for (int k = 0; k < spec.classes_per_task[t]; ++k) task.classes.push_back(next_class + k);
    for (int k = 0; k < spec.classes_per_task[t]; ++k) {
      const int global = next_class + k;
      const int aligned = aligned_group(k, spec.num_groups);
      Rng rng = derive_rng(spec.seed, "datagen-class", static_cast<std::uint64_t>(global));
      for (int i = 0; i < n; ++i) {
        const Split split = i < n_train ? Split::Train : (i < n_train + n_val ? Split::Val : Split::Test);
        const double rho = split == Split::Train ? spec.rho_train
                           : split == Split::Val ? spec.rho_val
                                                 : spec.rho_test;
        SampleRecord r;
        r.label = global;
        r.task_id = task.task_id;
        r.attribute = draw_group(aligned, spec.num_groups, rho, rng);
        r.image = render(spec, global, r.attribute, rng);
        auto& dst = split == Split::Train ? task.train : split == Split::Val ? task.val : task.test;
        dst.push_back(std::move(r));
      }
    }
    next_class += spec.classes_per_task[t];
    // Ids interleave classes so that id order is not class-sorted.
    for (auto* part : {&task.train, &task.val, &task.test}) {
      Rng rng = derive_rng(spec.seed, "datagen-order", static_cast<std::uint64_t>(t));
      std::shuffle(part->begin(), part->end(), rng);
      for (auto& r : *part) r.id = next_id++;
    }
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

double cramers_v(std::span<const int> labels, std::span<const int> attributes) {
  if (labels.size() != attributes.size()) throw InvalidInput("cramers_v: length mismatch");
  if (labels.size() < 2) {
    logger()->warn("cramers_v: fewer than two observations, returning 0");
    return 0.0;
  }
  std::map<int, int> rows;
  std::map<int, int> cols;
  for (int v : labels) rows.emplace(v, 0);
  for (int v : attributes) cols.emplace(v, 0);
  if (rows.size() < 2 || cols.size() < 2) {
    logger()->warn("cramers_v: fewer than two distinct values on one side, returning 0");
    return 0.0;
  }
  int idx = 0;
  for (auto& [k, v] : rows) v = idx++;
  idx = 0;
  for (auto& [k, v] : cols) v = idx++;
  const std::size_t r = rows.size();
  const std::size_t c = cols.size();
  std::vector<double> table(r * c, 0.0);
  std::vector<double> row_sum(r, 0.0);
  std::vector<double> col_sum(c, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int a = rows[labels[i]];
    const int b = cols[attributes[i]];
    table[a * c + b] += 1.0;
    row_sum[a] += 1.0;
    col_sum[b] += 1.0;
  }
  const double n = static_cast<double>(labels.size());
  // Terms are summed in sorted order so that transposing or relabelling the
  // table gives a bit-identical result.
  std::vector<double> terms;
  terms.reserve(r * c);
  for (std::size_t a = 0; a < r; ++a) {
    for (std::size_t b = 0; b < c; ++b) {
      const double expected = row_sum[a] * col_sum[b] / n;
      const double d = table[a * c + b] - expected;
      terms.push_back(d * d / expected);
    }
  }
  std::sort(terms.begin(), terms.end());
  const double chi2 = std::accumulate(terms.begin(), terms.end(), 0.0);
  const double k = static_cast<double>(std::min(r, c)) - 1.0;
  return std::min(1.0, std::sqrt(chi2 / (n * k)));
}

double cramers_v(const std::vector<SampleRecord>& samples) {
  std::vector<int> labels;
  std::vector<int> attrs;
  for (const auto& s : samples) {
    labels.push_back(s.label);
    attrs.push_back(s.attribute);
  }
  return cramers_v(labels, attrs);
}

namespace {

constexpr char kTensorMagic[4] = {'D', 'T', 'N', 'S'};
constexpr std::uint32_t kTensorVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw InvalidInput("truncated tensor file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

void put_f64(std::ostream& os, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw InvalidInput("truncated tensor file");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

// Binary PPM (P6) or PGM (P5), maxval <= 255.
Image read_netpbm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6" && magic != "P5") throw InvalidInput(path.string() + ": not a binary PPM/PGM");
  auto next_int = [&in, &path]() {
    int v = 0;
    while (true) {
      in >> std::ws;
      if (in.peek() == '#') {
        std::string line;
        std::getline(in, line);
        continue;
      }
      break;
    }
    if (!(in >> v)) throw InvalidInput(path.string() + ": bad header");
    return v;
  };
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
    throw InvalidInput(path.string() + ": unsupported dimensions or maxval");
  }
  in.get();
  const int ch = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * ch);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw InvalidInput(path.string() + ": truncated pixel data");
  }
  Image im{ch, h, w, std::vector<double>(raw.size())};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < ch; ++c) {
        im.pixels[(static_cast<std::size_t>(c) * h + y) * w + x] =
            raw[(static_cast<std::size_t>(y) * w + x) * ch + c] / static_cast<double>(maxval);
      }
    }
  }
  return im;
}

Image resize_to(const Image& src, ImageShape shape) {
  if (src.channels != shape.channels && !(src.channels == 1 && shape.channels == 3)) {
    throw InvalidInput("cannot convert " + std::to_string(src.channels) + " channels to " +
                       std::to_string(shape.channels));
  }
  if (src.channels == shape.channels && src.height == shape.height && src.width == shape.width) {
    return src;
  }
  Image out{shape.channels, shape.height, shape.width,
            std::vector<double>(static_cast<std::size_t>(shape.channels) * shape.height * shape.width)};
  const double sy = static_cast<double>(src.height) / shape.height;
  const double sx = static_cast<double>(src.width) / shape.width;
  for (int c = 0; c < shape.channels; ++c) {
    const int sc = src.channels == 1 ? 0 : c;
    for (int y = 0; y < shape.height; ++y) {
      const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
      const int y0 = static_cast<int>(fy);
      const int y1 = std::min(y0 + 1, src.height - 1);
      const double wy = fy - y0;
      for (int x = 0; x < shape.width; ++x) {
        const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
        const int x0 = static_cast<int>(fx);
        const int x1 = std::min(x0 + 1, src.width - 1);
        const double wx = fx - x0;
        const double v = (1 - wy) * ((1 - wx) * src.at(sc, y0, x0) + wx * src.at(sc, y0, x1)) +
                         wy * ((1 - wx) * src.at(sc, y1, x0) + wx * src.at(sc, y1, x1));
        out.pixels[(static_cast<std::size_t>(c) * shape.height + y) * shape.width + x] = v;
      }
    }
  }
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

template <typename T>
bool parse_int(const std::string& s, T& out) {
  if (s.empty()) return false;
  std::size_t pos = 0;
  try {
    if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (s[0] == '-') return false;
      out = std::stoull(s, &pos);
    } else {
      out = static_cast<T>(std::stoll(s, &pos));
    }
  } catch (const std::exception&) {
    return false;
  }
  return pos == s.size();
}

}  // namespace

void write_tensor(const fs::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out.write(kTensorMagic, 4);
  put_u32(out, kTensorVersion);
  put_u32(out, static_cast<std::uint32_t>(image.channels));
  put_u32(out, static_cast<std::uint32_t>(image.height));
  put_u32(out, static_cast<std::uint32_t>(image.width));
  for (double v : image.pixels) put_f64(out, v);
}

Image read_tensor(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kTensorMagic, 4) != 0) {
    throw InvalidInput(path.string() + ": not a tensor file");
  }
  if (get_u32(in) != kTensorVersion) throw InvalidInput(path.string() + ": unsupported tensor version");
  Image im;
  im.channels = static_cast<int>(get_u32(in));
  im.height = static_cast<int>(get_u32(in));
  im.width = static_cast<int>(get_u32(in));
  if (im.channels <= 0 || im.height <= 0 || im.width <= 0 || im.channels > 64 ||
      im.height > 4096 || im.width > 4096) {
    throw InvalidInput(path.string() + ": implausible tensor shape");
  }
  im.pixels.resize(static_cast<std::size_t>(im.channels) * im.height * im.width);
  for (double& v : im.pixels) v = get_f64(in);
  return im;
}

TaskStream ingest_csv(const fs::path& root_dir, const fs::path& metadata_path, ImageShape shape) {
  std::ifstream in(metadata_path);
  if (!in) throw ValidationError({"cannot open metadata file " + metadata_path.string()});
  std::string header;
  std::getline(in, header);
  if (!header.empty() && header.back() == '\r') header.pop_back();
  if (header != kMetadataHeader) {
    throw ValidationError({"metadata header must be exactly '" + std::string(kMetadataHeader) +
                           "', found '" + header + "'"});
  }

  struct Row {
    std::uint64_t id;
    std::string path;
    int label;
    int attribute;
    int task;
    Split split;
    int line;
  };
  std::vector<std::string> issues;
  std::vector<Row> rows;
  std::set<std::uint64_t> ids;
  std::map<int, int> class_task;
  std::string line;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const std::string where = "row " + std::to_string(line_no - 1) + " (line " + std::to_string(line_no) + ")";
    auto f = split_csv_line(line);
    if (f.size() != 6) {
      issues.push_back(where + ": expected 6 fields, found " + std::to_string(f.size()));
      continue;
    }
    Row r{};
    r.line = line_no;
    bool ok = true;
    if (!parse_int(f[0], r.id)) {
      issues.push_back(where + ": id '" + f[0] + "' is not a non-negative integer");
      ok = false;
    } else if (!ids.insert(r.id).second) {
      issues.push_back(where + ": duplicate id " + f[0]);
      ok = false;
    }
    r.path = f[1];
    if (r.path.empty()) {
      issues.push_back(where + ": empty path");
      ok = false;
    } else if (!fs::exists(root_dir / r.path)) {
      issues.push_back(where + ": missing file " + (root_dir / r.path).string());
      ok = false;
    }
    if (!parse_int(f[2], r.label) || r.label < 0) {
      issues.push_back(where + ": label '" + f[2] + "' is not a non-negative integer");
      ok = false;
    }
    if (!parse_int(f[3], r.attribute) || r.attribute < 0) {
      issues.push_back(where + ": attribute '" + f[3] + "' is not a non-negative integer");
      ok = false;
    }
    if (!parse_int(f[4], r.task) || r.task < 1) {
      issues.push_back(where + ": task '" + f[4] + "' is not a positive integer");
      ok = false;
    }
    if (f[5] == "train") {
      r.split = Split::Train;
    } else if (f[5] == "val") {
      r.split = Split::Val;
    } else if (f[5] == "test") {
      r.split = Split::Test;
    } else {
      issues.push_back(where + ": unknown split '" + f[5] + "' (expected train, val or test)");
      ok = false;
    }
    if (ok) {
      auto [it, inserted] = class_task.emplace(r.label, r.task);
      if (!inserted && it->second != r.task) {
        issues.push_back(where + ": class " + std::to_string(r.label) + " appears in task " +
                         std::to_string(r.task) + " but was already assigned to task " +
                         std::to_string(it->second));
        ok = false;
      }
    }
    if (ok) rows.push_back(std::move(r));
  }
  if (rows.empty() && issues.empty()) issues.emplace_back("metadata file has no rows");
  if (!issues.empty()) throw ValidationError(std::move(issues));

  std::map<int, TaskData> tasks;
  int max_attr = 0;
  for (const auto& r : rows) {
    SampleRecord s;
    s.id = r.id;
    s.label = r.label;
    s.attribute = r.attribute;
    s.task_id = r.task;
    max_attr = std::max(max_attr, r.attribute);
    const fs::path p = root_dir / r.path;
    try {
      Image raw = p.extension() == ".bin" ? read_tensor(p) : read_netpbm(p);
      s.image = resize_to(raw, shape);
    } catch (const InvalidInput& e) {
      issues.push_back("row " + std::to_string(r.line - 1) + ": " + e.what());
      continue;
    }
    auto& task = tasks[r.task];
    task.task_id = r.task;
    (r.split == Split::Train ? task.train : r.split == Split::Val ? task.val : task.test)
        .push_back(std::move(s));
  }
  for (const auto& [cls, t] : class_task) tasks[t].classes.push_back(cls);
  for (auto& [t, task] : tasks) {
    std::sort(task.classes.begin(), task.classes.end());
    if (task.train.empty()) issues.push_back("task " + std::to_string(t) + " has no training rows");
  }
  if (!issues.empty()) throw ValidationError(std::move(issues));

  TaskStream stream;
  stream.num_groups = max_attr + 1;
  for (auto& [t, task] : tasks) {
    logger()->info("task {}: {} train samples, Cramer's V(label, attribute) = {:.3f}", t,
                   task.train.size(), cramers_v(task.train));
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

void save_stream(const TaskStream& stream, const fs::path& dir) {
  fs::create_directories(dir / "images");
  std::ofstream meta(dir / "metadata.csv", std::ios::trunc);
  if (!meta) throw InvalidInput("cannot write " + (dir / "metadata.csv").string());
  meta << kMetadataHeader << '\n';
  for (const auto& task : stream.tasks) {
    for (Split s : {Split::Train, Split::Val, Split::Test}) {
      for (const auto& r : task.split(s)) {
        const std::string rel = "images/" + std::to_string(r.id) + ".bin";
        write_tensor(dir / rel, r.image);
        meta << r.id << ',' << rel << ',' << r.label << ',' << r.attribute << ',' << r.task_id
             << ',' << split_name(s) << '\n';
      }
    }
  }
}

std::vector<const TaskData*> ordered_tasks(const TaskStream& stream, std::span<const int> order) {
  std::vector<const TaskData*> out;
  for (int idx : order) {
    if (idx < 0 || idx >= static_cast<int>(stream.tasks.size())) {
      throw ConfigError("task order index out of range");
    }
    out.push_back(&stream.tasks[idx]);
  }
  return out;
}

}  // namespace debias::data
