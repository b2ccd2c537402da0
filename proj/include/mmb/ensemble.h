#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmb/clustering.h"
#include "mmb/ingest.h"
#include "mmb/lbfgs.h"
#include "mmb/matrix.h"

namespace mmb {

enum class EnsembleKind { kStandard, kBest, kAverage, kBpe, kMmb };

std::string_view to_string(EnsembleKind kind);
EnsembleKind parse_ensemble_kind(std::string_view text);

// Judges may put probability 0 on the true class; logs are floored here.
inline constexpr double kLogProbFloor = 1e-12;

// values(j, i) = log p(y*_j | x_j, a_i); correct(j, i) = 1 when prompt i's
// argmax (lowest index on ties) equals the label.
struct LogLikTensor {
  Matrix values;
  Matrix correct;
  std::vector<std::string> sample_ids;
  std::vector<std::string> prompt_ids;

  std::size_t m() const { return values.rows(); }
  std::size_t n() const { return values.cols(); }
};

// Builds the tensor over the bundle's validation split for the given prompts
// (all of the bundle's prompts when empty).
LogLikTensor build_loglik_tensor(const DatasetBundle& bundle,
                                 std::span<const std::string> prompt_ids = {});

// Same, over an explicit sample list.
LogLikTensor build_loglik_tensor(const DatasetBundle& bundle,
                                 std::span<const std::string> sample_ids,
                                 std::span<const std::string> prompt_ids);

// Row z holds q(a|z). K = 1 for every kind except mmb.
struct EnsembleWeights {
  EnsembleKind kind = EnsembleKind::kAverage;
  Matrix weights;
  std::vector<std::string> prompt_ids;
  std::optional<ClusterModel> cluster_model;

  std::size_t k() const { return weights.rows(); }
  std::size_t n() const { return weights.cols(); }

  // Rows nonnegative and summing to one within 1e-9; shape consistent.
  void validate() const;
};

struct FitReport {
  double final_objective = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
  // Max abs deviation of the optimized weights from the analytic maximizer.
  double closed_form_gap = 0.0;
  std::string stop_reason;
};

struct EnsembleFit {
  EnsembleWeights weights;
  FitReport report;
};

// Default optimizer settings used for the ensemble fits.
LbfgsOptions default_ensemble_optimizer();

// Sum_z [ sum_a w_za s_za - beta_z sum_a w_za log w_za ] with w = row-softmax
// of logits, and its exact gradient with respect to the logits.
struct ObjectiveValue {
  double objective = 0.0;
  Matrix gradient;
};
ObjectiveValue entropy_regularized_objective(const Matrix& logits, const Matrix& scores,
                                             std::span<const double> entropy_weights);

// The mixture-of-groups training objective evaluated at row-softmax(logits):
// sum_j sum_z p(z|x_j) [ sum_a w_za ll(j,a) - sum_a w_za log w_za ].
ObjectiveValue objective_and_gradient(const Matrix& logits, const LogLikTensor& loglik,
                                      const Matrix& assignments);

// Entropy-regularized prompt weights: maximizes sum_a w_a L_a - sum_a w_a log w_a
// with L_a = sum_j ll(j,a). M = 0 yields uniform weights.
EnsembleFit fit_bpe(const LogLikTensor& loglik,
                    const LbfgsOptions& optimizer = default_ensemble_optimizer());

// Per-group weights maximizing the soft-assignment weighted objective.
// assignments is M x K, rows are p(z|x_j). Groups without mass get uniform rows.
EnsembleFit fit_mmb(const LogLikTensor& loglik, const Matrix& assignments,
                    std::optional<ClusterModel> cluster_model = std::nullopt,
                    const LbfgsOptions& optimizer = default_ensemble_optimizer());

// standard: one-hot at a seed-chosen prompt. best: one-hot at the highest
// validation accuracy (ties: higher log-likelihood, then lower index).
// average: uniform.
EnsembleWeights select_baseline(EnsembleKind kind, const LogLikTensor& loglik, std::uint64_t seed);

// Mixture of the per-prompt class probabilities (rows aligned with
// weights.prompt_ids) under the given group assignment (size K).
std::vector<double> predict_with_assignment(const EnsembleWeights& weights,
                                            const Matrix& prompt_probs,
                                            std::span<const double> assignment);

// mmb needs the sample's embedding and a cluster model on the weights.
std::vector<double> predict(const EnsembleWeights& weights, const Matrix& prompt_probs,
                            std::optional<std::span<const double>> embedding = std::nullopt);

// Looks the sample up in the bundle. Missing prompt rows are an integrity error.
std::vector<double> predict_sample(const EnsembleWeights& weights, const DatasetBundle& bundle,
                                   const std::string& sample_id);

std::string weights_to_json(const EnsembleWeights& weights);
EnsembleWeights weights_from_json(const std::string& text);
void save_weights(const std::filesystem::path& path, const EnsembleWeights& weights);
EnsembleWeights load_weights(const std::filesystem::path& path);

}  // namespace mmb
