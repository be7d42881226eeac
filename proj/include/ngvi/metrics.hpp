#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "ngvi/errors.hpp"
#include "ngvi/tensor.hpp"

// Calibration and uncertainty metrics over predictive probabilities.
// All functions are pure; predictions are [N x K] row simplices.

namespace ngvi::metrics {

inline constexpr int kDefaultBins = 20;
inline constexpr double kNllClamp = 1e-12;
inline constexpr int kEntropyHistBins = 50;

inline void check_predictions(const Tensor& p, const char* what) {
  if (p.rank() != 2 || p.dim(0) < 1) {
    throw std::invalid_argument(std::string(what) + ": predictions must be [N x K]");
  }
}

// Confidence c lands in bin ceil(c*M) with right-closed edges; c = 0 maps to
// bin 1. Returned index is 0-based.
inline int bin_index(double confidence, int m_bins) {
  int b = static_cast<int>(std::ceil(confidence * m_bins));
  if (b < 1) b = 1;
  if (b > m_bins) b = m_bins;
  return b - 1;
}

struct NllResult {
  double value = 0.0;
  bool clamped = false;  // a true-label probability hit the 1e-12 floor
};

inline NllResult nll(const Tensor& predictions, const std::vector<int>& labels) {
  check_predictions(predictions, "nll");
  const std::int64_t n = predictions.dim(0), k = predictions.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != n) {
    throw std::invalid_argument("nll: label count mismatch");
  }
  NllResult r;
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) throw std::invalid_argument("nll: label out of range");
    double p = predictions[i * k + y];
    if (p < kNllClamp) {
      p = kNllClamp;
      r.clamped = true;
    }
    acc -= std::log(p);
  }
  r.value = acc / static_cast<double>(n);
  return r;
}

struct CalibrationBins {
  int m_bins = kDefaultBins;
  std::vector<std::int64_t> count;
  std::vector<double> conf_sum;     // sum of confidences per bin
  std::vector<std::int64_t> hits;   // correct predictions per bin

  double mean_confidence(int b) const {
    return count[static_cast<std::size_t>(b)] == 0
               ? 0.0
               : conf_sum[static_cast<std::size_t>(b)] /
                     static_cast<double>(count[static_cast<std::size_t>(b)]);
  }
  double accuracy(int b) const {
    return static_cast<double>(hits[static_cast<std::size_t>(b)]) /
           static_cast<double>(count[static_cast<std::size_t>(b)]);
  }
};

inline CalibrationBins calibration_curve(const Tensor& predictions,
                                         const std::vector<int>& labels,
                                         int m_bins = kDefaultBins) {
  check_predictions(predictions, "calibration_curve");
  const std::int64_t n = predictions.dim(0), k = predictions.dim(1);
  CalibrationBins bins;
  bins.m_bins = m_bins;
  bins.count.assign(static_cast<std::size_t>(m_bins), 0);
  bins.conf_sum.assign(static_cast<std::size_t>(m_bins), 0.0);
  bins.hits.assign(static_cast<std::size_t>(m_bins), 0);
  for (std::int64_t i = 0; i < n; ++i) {
    const double* row = predictions.data() + i * k;
    std::int64_t arg = 0;
    for (std::int64_t j = 1; j < k; ++j) {
      if (row[j] > row[arg]) arg = j;
    }
    const double conf = row[arg];
    const int b = bin_index(conf, m_bins);
    bins.count[static_cast<std::size_t>(b)] += 1;
    bins.conf_sum[static_cast<std::size_t>(b)] += conf;
    if (arg == labels[static_cast<std::size_t>(i)]) bins.hits[static_cast<std::size_t>(b)] += 1;
  }
  return bins;
}

inline double ece_from_bins(const CalibrationBins& bins, std::int64_t n) {
  double e = 0.0;
  for (int b = 0; b < bins.m_bins; ++b) {
    const std::int64_t c = bins.count[static_cast<std::size_t>(b)];
    if (c == 0) continue;
    e += (static_cast<double>(c) / static_cast<double>(n)) *
         std::abs(bins.accuracy(b) - bins.mean_confidence(b));
  }
  return e;
}

inline double ece(const Tensor& predictions, const std::vector<int>& labels,
                  int m_bins = kDefaultBins) {
  return ece_from_bins(calibration_curve(predictions, labels, m_bins), predictions.dim(0));
}

// Mann-Whitney AUROC: probability a random positive outranks a random
// negative, with ties counted one half. Computed through tied ranks; the
// numerator is exact (a multiple of 0.5).
inline double auroc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw std::invalid_argument("auroc: size mismatch");
  std::int64_t n_pos = 0, n_neg = 0;
  for (bool b : positive) (b ? n_pos : n_neg) += 1;
  if (n_pos == 0 || n_neg == 0) {
    throw std::invalid_argument("auroc: need at least one positive and one negative");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;  // average ranks, 1-based
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t t = i; t <= j; ++t) {
      if (positive[order[t]]) rank_sum_pos += avg_rank;
    }
    i = j + 1;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// FPR at the tightest threshold whose in-distribution TPR is still >= 95%.
// Scoring is "classify as in-distribution when score >= threshold"; the
// threshold is the k-th largest in-distribution score with k = ceil(0.95 n).
inline double fpr_at_95_tpr(const std::vector<double>& scores_in,
                            const std::vector<double>& scores_out) {
  if (scores_in.empty() || scores_out.empty()) {
    throw std::invalid_argument("fpr_at_95_tpr: both score sets must be nonempty");
  }
  const std::int64_t n = static_cast<std::int64_t>(scores_in.size());
  const std::int64_t k = (19 * n + 19) / 20;  // ceil(0.95 n), exact in integers
  std::vector<double> sorted = scores_in;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const double threshold = sorted[static_cast<std::size_t>(k - 1)];
  std::int64_t fp = 0;
  for (double s : scores_out) {
    if (s >= threshold) ++fp;
  }
  return static_cast<double>(fp) / static_cast<double>(scores_out.size());
}

// ROC sweep points (threshold, fpr, tpr) over the pooled score set.
struct RocPoint {
  double threshold, fpr, tpr;
};

inline std::vector<RocPoint> roc_points(const std::vector<double>& scores_in,
                                        const std::vector<double>& scores_out) {
  std::vector<double> thresholds = scores_in;
  thresholds.insert(thresholds.end(), scores_out.begin(), scores_out.end());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  std::vector<RocPoint> pts;
  pts.reserve(thresholds.size());
  for (double th : thresholds) {
    std::int64_t tp = 0, fp = 0;
    for (double s : scores_in) {
      if (s >= th) ++tp;
    }
    for (double s : scores_out) {
      if (s >= th) ++fp;
    }
    pts.push_back({th, static_cast<double>(fp) / static_cast<double>(scores_out.size()),
                   static_cast<double>(tp) / static_cast<double>(scores_in.size())});
  }
  return pts;
}

// Shannon entropy of each prediction row, with 0 log 0 := 0. Values lie in
// [0, ln K].
inline std::vector<double> predictive_entropy(const Tensor& predictions) {
  check_predictions(predictions, "predictive_entropy");
  const std::int64_t n = predictions.dim(0), k = predictions.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    double h = 0.0;
    for (std::int64_t j = 0; j < k; ++j) {
      const double p = predictions[i * k + j];
      if (p > 0.0) h -= p * std::log(p);
    }
    out[static_cast<std::size_t>(i)] = h;
  }
  return out;
}

// Fixed-bin histogram over [0, ln K].
struct EntropyHistogram {
  int bins = kEntropyHistBins;
  double max_entropy = 0.0;  // ln K
  std::vector<std::int64_t> counts;
};

inline EntropyHistogram entropy_histogram(const std::vector<double>& entropies,
                                          std::int64_t n_classes,
                                          int bins = kEntropyHistBins) {
  EntropyHistogram h;
  h.bins = bins;
  h.max_entropy = std::log(static_cast<double>(n_classes));
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  for (double e : entropies) {
    int b = static_cast<int>(std::floor(e / h.max_entropy * bins));
    if (b < 0) b = 0;
    if (b >= bins) b = bins - 1;
    h.counts[static_cast<std::size_t>(b)] += 1;
  }
  return h;
}

inline std::vector<double> confidences(const Tensor& predictions) {
  const std::int64_t n = predictions.dim(0), k = predictions.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const double* row = predictions.data() + i * k;
    out[static_cast<std::size_t>(i)] = *std::max_element(row, row + k);
  }
  return out;
}

inline std::vector<bool> correctness(const Tensor& predictions, const std::vector<int>& labels) {
  const std::int64_t n = predictions.dim(0), k = predictions.dim(1);
  std::vector<bool> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const double* row = predictions.data() + i * k;
    std::int64_t arg = 0;
    for (std::int64_t j = 1; j < k; ++j) {
      if (row[j] > row[arg]) arg = j;
    }
    out[static_cast<std::size_t>(i)] = (arg == labels[static_cast<std::size_t>(i)]);
  }
  return out;
}

inline double accuracy(const Tensor& predictions, const std::vector<int>& labels) {
  const auto corr = correctness(predictions, labels);
  std::int64_t hits = 0;
  for (bool b : corr) hits += b ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(corr.size());
}

// Everything reported for one evaluation run. AUROC and FPR@95TPR use the
// correct-vs-incorrect split of max-class confidences; on degenerate inputs
// (all correct or all wrong) they are reported as NaN-free defaults.
struct MetricsReport {
  double nll = 0.0;
  bool nll_clamped = false;
  double ece = 0.0;
  double auroc = 0.0;
  double fpr_at_95tpr = 0.0;
  double accuracy = 0.0;
  CalibrationBins calibration;
  EntropyHistogram entropy_hist;
};

inline MetricsReport compute_report(const Tensor& predictions, const std::vector<int>& labels,
                                    int m_bins = kDefaultBins) {
  MetricsReport r;
  const auto nll_res = nll(predictions, labels);
  r.nll = nll_res.value;
  r.nll_clamped = nll_res.clamped;
  r.calibration = calibration_curve(predictions, labels, m_bins);
  r.ece = ece_from_bins(r.calibration, predictions.dim(0));
  r.accuracy = accuracy(predictions, labels);
  const auto conf = confidences(predictions);
  const auto corr = correctness(predictions, labels);
  const bool has_both = std::find(corr.begin(), corr.end(), true) != corr.end() &&
                        std::find(corr.begin(), corr.end(), false) != corr.end();
  if (has_both) {
    r.auroc = auroc(conf, corr);
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < corr.size(); ++i) (corr[i] ? pos : neg).push_back(conf[i]);
    r.fpr_at_95tpr = fpr_at_95_tpr(pos, neg);
  } else {
    r.auroc = 1.0;
    r.fpr_at_95tpr = 0.0;
  }
  r.entropy_hist = entropy_histogram(predictive_entropy(predictions), predictions.dim(1));
  return r;
}

inline nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json bins = nlohmann::json::array();
  for (int b = 0; b < r.calibration.m_bins; ++b) {
    nlohmann::json jb{{"count", r.calibration.count[static_cast<std::size_t>(b)]},
                      {"mean_confidence", nullptr},
                      {"accuracy", nullptr}};
    if (r.calibration.count[static_cast<std::size_t>(b)] > 0) {
      jb["mean_confidence"] = r.calibration.mean_confidence(b);
      jb["accuracy"] = r.calibration.accuracy(b);
    }
    bins.push_back(jb);
  }
  return nlohmann::json{{"nll", r.nll},
                        {"nll_clamped", r.nll_clamped},
                        {"ece", r.ece},
                        {"auroc", r.auroc},
                        {"fpr_at_95tpr", r.fpr_at_95tpr},
                        {"accuracy", r.accuracy},
                        {"calibration_bins", bins},
                        {"entropy_histogram",
                         {{"bins", r.entropy_hist.bins},
                          {"max_entropy", r.entropy_hist.max_entropy},
                          {"counts", r.entropy_hist.counts}}}};
}

}  // namespace ngvi::metrics
