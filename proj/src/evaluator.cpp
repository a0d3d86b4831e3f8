#include "road/evaluator.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace road {

namespace fs = std::filesystem;
using nlohmann::json;

std::int64_t ConfusionMatrix::total() const {
  std::int64_t n = 0;
  for (auto c : counts) n += c;
  return n;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.num_classes != num_classes) throw ValidationError("confusion matrices differ in class count");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  return *this;
}

ConfusionMatrix confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, int num_classes,
                          int ignore_index) {
  if (num_classes < 1) throw ValidationError("confusion needs at least one class");
  if (pred.size() != gt.size()) {
    throw ValidationError("prediction has " + std::to_string(pred.size()) + " pixels, ground truth " +
                          std::to_string(gt.size()));
  }
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const int g = gt[i], p = pred[i];
    if (g == ignore_index) continue;
    if (g >= num_classes || p >= num_classes) {
      throw ValidationError("class index " + std::to_string(std::max(g, p)) + " outside [0," +
                            std::to_string(num_classes) + ")");
    }
    ++cm.at(g, p);
  }
  return cm;
}

IoUReport iou(const ConfusionMatrix& cm) {
  const int k = cm.num_classes;
  IoUReport r;
  r.per_class.assign(static_cast<std::size_t>(k), 0.0);
  r.present.assign(static_cast<std::size_t>(k), false);
  r.matrix = cm;
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    std::int64_t row = 0, col = 0;
    for (int j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::int64_t tp = cm.at(c, c);
    const std::int64_t uni = row + col - tp;
    if (uni == 0) continue;
    r.present[c] = true;
    r.per_class[c] = static_cast<double>(tp) / static_cast<double>(uni);
    sum += r.per_class[c];
    ++present;
  }
  r.mean = present ? sum / present : 0.0;
  return r;
}

std::vector<ConfusionMatrix> region_confusions(const LabelMap& pred, const LabelMap& gt, int num_classes,
                                               const RegionPartition& partition) {
  if (pred.height != gt.height || pred.width != gt.width) throw ValidationError("prediction and labels differ in size");
  if (partition.height != gt.height || partition.width != gt.width) {
    throw ValidationError("partition size does not match the labels");
  }
  std::vector<ConfusionMatrix> out(static_cast<std::size_t>(partition.regions()), ConfusionMatrix(num_classes));
  for (int y = 0; y < gt.height; ++y)
    for (int x = 0; x < gt.width; ++x) {
      const int g = gt.at(y, x), p = pred.at(y, x);
      if (g == kIgnoreLabel) continue;
      if (g >= num_classes || p >= num_classes) throw ValidationError("class index outside range");
      ++out[static_cast<std::size_t>(partition.region_of(y, x))].at(g, p);
    }
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) throw ValidationError("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

const AblationRow& AblationResult::row(const std::string& label) const {
  for (const auto& r : rows) {
    if (r.label == label) return r;
  }
  throw ValidationError("ablation result '" + suite + "' has no row '" + label + "'");
}

AblationResult summarize(const std::string& suite, const std::vector<RunSummary>& runs, const std::string& config) {
  AblationResult result{suite, {}, config};
  std::vector<std::vector<const RunSummary*>> groups;
  for (const auto& run : runs) {
    auto it = std::find_if(result.rows.begin(), result.rows.end(), [&](const AblationRow& r) { return r.label == run.label; });
    if (it == result.rows.end()) {
      result.rows.push_back({run.label, run.variant, run.grid_h, run.grid_w, {}, {}, 0, 0, 0, {}});
      groups.emplace_back();
      it = result.rows.end() - 1;
    }
    groups[static_cast<std::size_t>(it - result.rows.begin())].push_back(&run);
  }
  for (std::size_t i = 0; i < result.rows.size(); ++i) {
    auto& row = result.rows[i];
    for (const auto* run : groups[i]) {
      row.seeds.push_back(run->seed);
      row.miou.push_back(run->miou);
    }
    row.median = median(row.miou);
    row.min = *std::min_element(row.miou.begin(), row.miou.end());
    row.max = *std::max_element(row.miou.begin(), row.miou.end());
    const std::size_t k = groups[i].front()->per_class.size();
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<double> v;
      for (const auto* run : groups[i]) v.push_back(c < run->per_class.size() ? run->per_class[c] : 0.0);
      row.per_class_median.push_back(median(v));
    }
  }
  return result;
}

namespace {

void write_atomically(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

json report_json(const IoUReport& r, const std::vector<std::string>& names) {
  json classes = json::object();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const std::string name = c < names.size() ? names[c] : std::to_string(c);
    classes[name] = r.present[c] ? json(r.per_class[c]) : json(nullptr);
  }
  json j{{"mean_iou", r.mean}, {"per_class", classes}, {"pixels", r.matrix.total()}};
  if (!r.regions.empty()) {
    json regions = json::array();
    for (const auto& sub : r.regions) regions.push_back(report_json(sub, names));
    j["regions"] = regions;
  }
  return j;
}

}  // namespace

void render_tables(const AblationResult& result, const fs::path& dir, const std::vector<std::string>& class_names) {
  if (result.rows.empty()) throw ValidationError("ablation result '" + result.suite + "' has no rows");
  if (!fs::is_directory(dir)) throw IoError("report directory " + dir.string() + " does not exist");

  std::ostringstream csv;
  csv << "label,variant,grid,seeds";
  for (const auto& name : class_names) csv << ',' << name;
  csv << ",miou_median,miou_min,miou_max\n";
  json rows = json::array();
  for (const auto& row : result.rows) {
    const std::string grid = std::to_string(row.grid_h) + "x" + std::to_string(row.grid_w);
    csv << row.label << ',' << row.variant << ',' << grid << ',' << row.seeds.size();
    for (std::size_t c = 0; c < class_names.size(); ++c) {
      csv << ',' << fmt(c < row.per_class_median.size() ? row.per_class_median[c] : 0.0);
    }
    csv << ',' << fmt(row.median) << ',' << fmt(row.min) << ',' << fmt(row.max) << '\n';
    rows.push_back({{"label", row.label},
                    {"variant", row.variant},
                    {"grid", grid},
                    {"seeds", row.seeds},
                    {"miou", row.miou},
                    {"median", row.median},
                    {"min", row.min},
                    {"max", row.max},
                    {"per_class_median", row.per_class_median}});
  }
  json series = json::object();
  for (const auto& row : result.rows) series[row.label] = {{"x", row.label}, {"y", row.median}};
  json doc{{"suite", result.suite}, {"classes", class_names}, {"rows", rows}, {"series", series}, {"config", result.config}};

  write_atomically(dir / (result.suite + ".csv"), csv.str());
  write_atomically(dir / (result.suite + ".json"), doc.dump(2) + "\n");
}

void write_eval_json(const IoUReport& report, const fs::path& path, const std::vector<std::string>& class_names) {
  write_atomically(path, report_json(report, class_names).dump(2) + "\n");
}

}  // namespace road
