#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ngvi/errors.hpp"
#include "ngvi/metrics.hpp"
#include "ngvi/tensor.hpp"

// CSV / JSON artifact emission. Doubles are printed with %.17g so files are
// byte-reproducible for identical inputs.

namespace ngvi::reports {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::ofstream open_out(const std::string& path) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  return os;
}

// columns: example_id, true_label, p_1 .. p_K
inline void write_predictions_csv(const std::string& path, const Tensor& predictions,
                                  const std::vector<int>& labels) {
  auto os = open_out(path);
  const std::int64_t n = predictions.dim(0), k = predictions.dim(1);
  os << "example_id,true_label";
  for (std::int64_t j = 0; j < k; ++j) os << ",p_" << (j + 1);
  os << "\n";
  for (std::int64_t i = 0; i < n; ++i) {
    os << i << "," << labels[static_cast<std::size_t>(i)];
    for (std::int64_t j = 0; j < k; ++j) os << "," << fmt(predictions[i * k + j]);
    os << "\n";
  }
}

// Read a prediction dump back (the interchange format consumed by metrics).
inline std::pair<Tensor, std::vector<int>> read_predictions_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(is, line)) throw IoError("empty predictions file " + path);
  std::int64_t k = -1;  // columns after example_id,true_label
  std::vector<double> values;
  std::vector<int> labels;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      cells.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (k < 0) k = static_cast<std::int64_t>(cells.size()) - 2;
    if (static_cast<std::int64_t>(cells.size()) != k + 2) {
      throw IoError("ragged row in " + path);
    }
    labels.push_back(std::stoi(cells[1]));
    for (std::int64_t j = 0; j < k; ++j) values.push_back(std::stod(cells[static_cast<std::size_t>(j + 2)]));
  }
  const std::int64_t n = static_cast<std::int64_t>(labels.size());
  return {Tensor({n, k}, std::move(values)), std::move(labels)};
}

inline void write_calibration_csv(const std::string& path, const metrics::CalibrationBins& bins) {
  auto os = open_out(path);
  os << "bin,lower,upper,count,mean_confidence,accuracy\n";
  for (int b = 0; b < bins.m_bins; ++b) {
    const double lower = static_cast<double>(b) / bins.m_bins;
    const double upper = static_cast<double>(b + 1) / bins.m_bins;
    os << (b + 1) << "," << fmt(lower) << "," << fmt(upper) << ","
       << bins.count[static_cast<std::size_t>(b)];
    if (bins.count[static_cast<std::size_t>(b)] > 0) {
      os << "," << fmt(bins.mean_confidence(b)) << "," << fmt(bins.accuracy(b));
    } else {
      os << ",,";  // empty bins carry no confidence/accuracy
    }
    os << "\n";
  }
}

inline void write_entropy_hist_csv(const std::string& path, const metrics::EntropyHistogram& h) {
  auto os = open_out(path);
  os << "bin,lower,upper,count\n";
  for (int b = 0; b < h.bins; ++b) {
    const double lower = h.max_entropy * b / h.bins;
    const double upper = h.max_entropy * (b + 1) / h.bins;
    os << (b + 1) << "," << fmt(lower) << "," << fmt(upper) << ","
       << h.counts[static_cast<std::size_t>(b)] << "\n";
  }
}

inline void write_roc_csv(const std::string& path, const std::vector<metrics::RocPoint>& pts) {
  auto os = open_out(path);
  os << "threshold,fpr,tpr\n";
  for (const auto& p : pts) {
    os << fmt(p.threshold) << "," << fmt(p.fpr) << "," << fmt(p.tpr) << "\n";
  }
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
  auto os = open_out(path);
  os << j.dump(2) << "\n";
}

}  // namespace ngvi::reports
