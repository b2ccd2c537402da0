#include "mmb/metrics.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mmb/error.h"
#include "mmb/ingest.h"

namespace mmb {

PredictionSet::PredictionSet(Matrix probs, std::optional<std::vector<int>> labels)
    : probs_(std::move(probs)), labels_(std::move(labels)) {
  require(probs_.cols() >= 2 || probs_.rows() == 0, ErrorKind::kShape, "need at least two classes");
  if (labels_) {
    require(labels_->size() == probs_.rows(), ErrorKind::kShape, "labels and predictions differ in length");
    for (int y : *labels_) {
      require(y >= 0 && static_cast<std::size_t>(y) < probs_.cols(), ErrorKind::kValidation,
              "label out of range");
    }
  }
  confidences_.resize(probs_.rows());
  predicted_.resize(probs_.rows());
  for (std::size_t i = 0; i < probs_.rows(); ++i) {
    auto row = probs_.row(i);
    double total = 0.0;
    for (double p : row) {
      require(std::isfinite(p) && p >= 0.0, ErrorKind::kValidation, "invalid probability");
      total += p;
    }
    require(std::abs(total - 1.0) <= 1e-9, ErrorKind::kValidation,
            "prediction row " + std::to_string(i) + " does not sum to one");
    const auto it = std::max_element(row.begin(), row.end());
    confidences_[i] = *it;
    predicted_[i] = static_cast<int>(it - row.begin());
  }
}

const std::vector<int>& PredictionSet::require_labels() const {
  require(labels_.has_value(), ErrorKind::kArgument, "metric needs ground-truth labels");
  return *labels_;
}

CalibrationErrors calibration_errors(const PredictionSet& preds, std::size_t n_bins) {
  const auto& labels = preds.require_labels();
  require(n_bins >= 1, ErrorKind::kDomain, "need at least one bin");
  require(preds.size() >= 1, ErrorKind::kDomain, "no predictions");
  CalibrationErrors out;
  out.bins.n_bins = n_bins;
  out.bins.bins.resize(n_bins);
  std::vector<double> conf_sum(n_bins, 0.0), hit_sum(n_bins, 0.0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double c = preds.confidences()[i];
    const auto b = std::min(static_cast<std::size_t>(c * static_cast<double>(n_bins)), n_bins - 1);
    ++out.bins.bins[b].count;
    conf_sum[b] += c;
    hit_sum[b] += preds.predicted()[i] == labels[i] ? 1.0 : 0.0;
  }
  const double m = static_cast<double>(preds.size());
  for (std::size_t b = 0; b < n_bins; ++b) {
    auto& bin = out.bins.bins[b];
    bin.lower = static_cast<double>(b) / static_cast<double>(n_bins);
    bin.upper = static_cast<double>(b + 1) / static_cast<double>(n_bins);
    if (bin.count == 0) continue;
    const double n = static_cast<double>(bin.count);
    bin.mean_confidence = conf_sum[b] / n;
    bin.accuracy = hit_sum[b] / n;
    const double gap = std::abs(bin.accuracy - bin.mean_confidence);
    out.ece += n / m * gap;
    out.mce = std::max(out.mce, gap);
  }
  return out;
}

ProperScores proper_scores(const PredictionSet& preds) {
  const auto& labels = preds.require_labels();
  require(preds.size() >= 1, ErrorKind::kDomain, "no predictions");
  ProperScores out;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    auto row = preds.probs().row(i);
    out.nll -= std::log(std::max(row[labels[i]], 1e-12));
    for (std::size_t c = 0; c < row.size(); ++c) {
      const double target = static_cast<int>(c) == labels[i] ? 1.0 : 0.0;
      out.brier += (row[c] - target) * (row[c] - target);
    }
  }
  out.nll /= static_cast<double>(preds.size());
  out.brier /= static_cast<double>(preds.size());
  return out;
}

ClassificationScores classification_scores(const PredictionSet& preds, int positive_class,
                                           F1Average average) {
  const auto& labels = preds.require_labels();
  require(preds.size() >= 1, ErrorKind::kDomain, "no predictions");
  const std::size_t k = preds.num_classes();
  require(positive_class >= 0 && static_cast<std::size_t>(positive_class) < k, ErrorKind::kDomain,
          "positive class out of range");
  // confusion(true, predicted)
  std::vector<double> confusion(k * k, 0.0);
  for (std::size_t i = 0; i < preds.size(); ++i) confusion[labels[i] * k + preds.predicted()[i]] += 1.0;
  const double m = static_cast<double>(preds.size());

  ClassificationScores out;
  double agree = 0.0, expected = 0.0;
  std::vector<double> row_sum(k, 0.0), col_sum(k, 0.0);
  for (std::size_t t = 0; t < k; ++t) {
    for (std::size_t p = 0; p < k; ++p) {
      row_sum[t] += confusion[t * k + p];
      col_sum[p] += confusion[t * k + p];
    }
    agree += confusion[t * k + t];
  }
  for (std::size_t c = 0; c < k; ++c) expected += (row_sum[c] / m) * (col_sum[c] / m);
  out.accuracy = agree / m;
  if (1.0 - expected <= 0.0) {
    out.kappa = 0.0;
    out.kappa_degenerate = true;
  } else {
    out.kappa = (out.accuracy - expected) / (1.0 - expected);
  }

  auto f1_for = [&](std::size_t c) {
    const double tp = confusion[c * k + c];
    const double fp = col_sum[c] - tp;
    const double fn = row_sum[c] - tp;
    const double denom = 2 * tp + fp + fn;
    return denom == 0.0 ? 0.0 : 2 * tp / denom;
  };
  if (average == F1Average::kBinary) {
    out.f1 = f1_for(static_cast<std::size_t>(positive_class));
  } else {
    for (std::size_t c = 0; c < k; ++c) out.f1 += f1_for(c);
    out.f1 /= static_cast<double>(k);
  }
  return out;
}

RankingScores ranking_scores(const PredictionSet& preds, int positive_class) {
  const auto& labels = preds.require_labels();
  require(positive_class >= 0 && static_cast<std::size_t>(positive_class) < preds.num_classes(),
          ErrorKind::kDomain, "positive class out of range");
  const std::size_t m = preds.size();
  std::vector<double> score(m);
  std::vector<bool> positive(m);
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < m; ++i) {
    score[i] = preds.probs()(i, positive_class);
    positive[i] = labels[i] == positive_class;
    n_pos += positive[i] ? 1 : 0;
  }
  const std::size_t n_neg = m - n_pos;
  require(n_pos > 0 && n_neg > 0, ErrorKind::kDomain, "ranking metrics need both classes present");

  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });

  // Mann-Whitney with mid-ranks (ranks doubled to stay integral).
  double doubled_rank_sum = 0.0;
  for (std::size_t i = 0; i < m;) {
    std::size_t j = i;
    while (j < m && score[order[j]] == score[order[i]]) ++j;
    const double doubled_mid = static_cast<double>(i + 1 + j);  // 2 * mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t) {
      if (positive[order[t]]) doubled_rank_sum += doubled_mid;
    }
    i = j;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  RankingScores out;
  out.roc_auc = (doubled_rank_sum - np * (np + 1)) / (2 * np * nn);

  // Average precision over descending distinct thresholds.
  double tp = 0.0, fp = 0.0, prev_recall = 0.0;
  for (std::size_t i = m; i > 0;) {
    std::size_t j = i;
    while (j > 0 && score[order[j - 1]] == score[order[i - 1]]) {
      --j;
      (positive[order[j]] ? tp : fp) += 1.0;
    }
    const double recall = tp / np;
    out.pr_auc += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
    i = j;
  }
  return out;
}

std::vector<CoveragePoint> error_coverage_curve(std::span<const double> confidences,
                                                const std::vector<bool>& correct,
                                                std::size_t n_points) {
  require(confidences.size() == correct.size(), ErrorKind::kShape, "confidence/correct length mismatch");
  require(n_points >= 1, ErrorKind::kDomain, "need at least one coverage point");
  const std::size_t m = confidences.size();
  require(m >= 1, ErrorKind::kDomain, "no predictions");
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return confidences[a] > confidences[b]; });
  std::vector<std::size_t> errors_in_top(m + 1, 0);
  for (std::size_t r = 0; r < m; ++r) errors_in_top[r + 1] = errors_in_top[r] + (correct[order[r]] ? 0 : 1);

  std::vector<CoveragePoint> curve;
  curve.reserve(n_points);
  for (std::size_t i = 1; i <= n_points; ++i) {
    const std::size_t k = std::max<std::size_t>(1, (i * m + n_points - 1) / n_points);
    CoveragePoint pt;
    pt.coverage = static_cast<double>(i) / static_cast<double>(n_points);
    pt.accepted = k;
    pt.selective_error = static_cast<double>(errors_in_top[k]) / static_cast<double>(k);
    curve.push_back(pt);
  }
  return curve;
}

std::vector<CoveragePoint> error_coverage_curve(const PredictionSet& preds, std::size_t n_points) {
  const auto& labels = preds.require_labels();
  std::vector<bool> correct(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) correct[i] = preds.predicted()[i] == labels[i];
  return error_coverage_curve(preds.confidences(), correct, n_points);
}

double mean_confidence(const PredictionSet& preds) {
  require(preds.size() >= 1, ErrorKind::kDomain, "mean confidence of an empty set");
  double total = 0.0;
  for (double c : preds.confidences()) total += c;
  return total / static_cast<double>(preds.size());
}

std::string reliability_to_csv(const ReliabilityBins& bins) {
  std::ostringstream out;
  out << "bin,lower,upper,count,mean_confidence,accuracy\n";
  for (std::size_t b = 0; b < bins.bins.size(); ++b) {
    const auto& bin = bins.bins[b];
    out << b << ',' << format_double(bin.lower) << ',' << format_double(bin.upper) << ',' << bin.count
        << ',' << format_double(bin.mean_confidence) << ',' << format_double(bin.accuracy) << '\n';
  }
  return out.str();
}

std::string coverage_to_csv(std::span<const CoveragePoint> curve) {
  std::ostringstream out;
  out << "coverage,selective_error,accepted\n";
  for (const auto& pt : curve) {
    out << format_double(pt.coverage) << ',' << format_double(pt.selective_error) << ',' << pt.accepted
        << '\n';
  }
  return out.str();
}

}  // namespace mmb
