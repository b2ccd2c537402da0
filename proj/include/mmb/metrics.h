#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmb/matrix.h"

namespace mmb {

// Predicted class distributions, optionally with ground truth.
class PredictionSet {
 public:
  PredictionSet() = default;
  // Rows must be probability vectors (sum to one within 1e-9).
  explicit PredictionSet(Matrix probs, std::optional<std::vector<int>> labels = std::nullopt);

  const Matrix& probs() const { return probs_; }
  const std::optional<std::vector<int>>& labels() const { return labels_; }
  std::size_t size() const { return probs_.rows(); }
  std::size_t num_classes() const { return probs_.cols(); }

  // Max-class probability and argmax (lowest index on ties) per sample.
  const std::vector<double>& confidences() const { return confidences_; }
  const std::vector<int>& predicted() const { return predicted_; }

  // Throws kArgument when labels are absent.
  const std::vector<int>& require_labels() const;

 private:
  Matrix probs_;
  std::optional<std::vector<int>> labels_;
  std::vector<double> confidences_;
  std::vector<int> predicted_;
};

struct ReliabilityBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  double mean_confidence = 0.0;
  double accuracy = 0.0;
};

struct ReliabilityBins {
  std::size_t n_bins = 0;
  std::vector<ReliabilityBin> bins;
};

struct CalibrationErrors {
  double ece = 0.0;
  double mce = 0.0;
  ReliabilityBins bins;
};

inline constexpr std::size_t kDefaultBins = 15;

// Equal-width bins on [0,1]; confidence c falls in bin min(floor(c*B), B-1).
// MCE is taken over nonempty bins only.
CalibrationErrors calibration_errors(const PredictionSet& preds, std::size_t n_bins = kDefaultBins);

struct ProperScores {
  double nll = 0.0;
  double brier = 0.0;
};

// NLL floors the true-class probability at 1e-12. Brier sums the squared error
// over classes and averages over samples.
ProperScores proper_scores(const PredictionSet& preds);

enum class F1Average { kBinary, kMacro };

struct ClassificationScores {
  double accuracy = 0.0;
  double f1 = 0.0;
  double kappa = 0.0;
  // Expected agreement was 1, kappa reported as 0.
  bool kappa_degenerate = false;
};

ClassificationScores classification_scores(const PredictionSet& preds, int positive_class = 0,
                                           F1Average average = F1Average::kBinary);

struct RankingScores {
  double roc_auc = 0.0;
  double pr_auc = 0.0;
};

// Scores are the probabilities of positive_class. ROC-AUC uses mid-ranks for
// ties; PR-AUC is the step-wise (average precision) integral.
RankingScores ranking_scores(const PredictionSet& preds, int positive_class = 0);

struct CoveragePoint {
  double coverage = 0.0;
  double selective_error = 0.0;
  std::size_t accepted = 0;
};

// Coverages i/n_points for i = 1..n_points; the top ceil(c*M) samples by
// confidence are accepted (stable order on ties).
std::vector<CoveragePoint> error_coverage_curve(const PredictionSet& preds, std::size_t n_points);
std::vector<CoveragePoint> error_coverage_curve(std::span<const double> confidences,
                                                const std::vector<bool>& correct,
                                                std::size_t n_points);

double mean_confidence(const PredictionSet& preds);

std::string reliability_to_csv(const ReliabilityBins& bins);
std::string coverage_to_csv(std::span<const CoveragePoint> curve);

}  // namespace mmb
