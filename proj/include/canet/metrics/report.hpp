#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "canet/data/image_io.hpp"
#include "canet/metrics/metrics.hpp"

namespace canet::metrics {

struct ImageScores {
  std::string id;
  double mae = 0, mean_f = 0, mean_e = 0, s_measure = 0;
};

struct MetricReport {
  std::vector<ImageScores> rows;  // sorted by id
  ImageScores aggregate{"AGGREGATE"};
};

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline ImageScores score(const std::string& id, const Image& pred, const Image& gt) {
  return {id, mae(pred, gt), mean_fbeta(pred, gt), mean_emeasure(pred, gt), smeasure(pred, gt)};
}

struct ScoredPair {
  std::string id;
  Image pred;
  Image gt;
};

inline MetricReport evaluate(std::vector<ScoredPair> pairs) {
  if (pairs.empty()) throw EvaluationError("evaluation set is empty");
  std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  MetricReport r;
  for (const auto& p : pairs) r.rows.push_back(score(p.id, p.pred, p.gt));
  const double n = static_cast<double>(r.rows.size());
  for (const auto& row : r.rows) {
    r.aggregate.mae += row.mae;
    r.aggregate.mean_f += row.mean_f;
    r.aggregate.mean_e += row.mean_e;
    r.aggregate.s_measure += row.s_measure;
  }
  r.aggregate.mae /= n;
  r.aggregate.mean_f /= n;
  r.aggregate.mean_e /= n;
  r.aggregate.s_measure /= n;
  return r;
}

namespace detail {

// "<prefix>_<id>.pgm" -> id, for every PGM directly inside dir.
inline std::map<std::string, std::filesystem::path> pgm_by_id(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::map<std::string, std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().extension() != ".pgm") continue;
    const std::string stem = e.path().stem().string();
    const auto us = stem.find('_');
    out[us == std::string::npos ? stem : stem.substr(us + 1)] = e.path();
  }
  return out;
}

}  // namespace detail

/// Pairs pred_<id>.pgm in `pred_dir` with gt_<id>.pgm in `gt_dir`.
inline MetricReport evaluate_dataset(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir) {
  const auto preds = detail::pgm_by_id(pred_dir);
  std::map<std::string, std::filesystem::path> gts;
  for (const auto& [id, path] : detail::pgm_by_id(gt_dir)) {
    if (path.filename().string().rfind("gt_", 0) == 0) gts[id] = path;
  }
  for (const auto& [id, path] : preds) {
    if (!gts.count(id)) throw EvaluationError("prediction without ground truth: id " + id);
  }
  for (const auto& [id, path] : gts) {
    if (!preds.count(id)) throw EvaluationError("ground truth without prediction: id " + id);
  }
  std::vector<ScoredPair> pairs;
  for (const auto& [id, path] : gts) {
    Image gt = read_pgm(path);
    for (auto& v : gt.data) v = v >= 0.5 ? 1.0 : 0.0;
    pairs.push_back({id, read_pgm(preds.at(id)), std::move(gt)});
  }
  return evaluate(std::move(pairs));
}

inline std::string to_csv(const MetricReport& r) {
  std::string out = "id,mae,mean_f,mean_e,s_measure\n";
  char buf[160];
  auto line = [&](const ImageScores& s) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f\n", s.id.c_str(), s.mae, s.mean_f, s.mean_e, s.s_measure);
    out += buf;
  };
  for (const auto& row : r.rows) line(row);
  line(r.aggregate);
  return out;
}

}  // namespace canet::metrics
