#include "mmb/ensemble.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "json.hpp"
#include "mmb/error.h"

namespace mmb {

namespace {

double log_sum_exp(std::span<const double> v) {
  const double top = *std::max_element(v.begin(), v.end());
  double total = 0.0;
  for (double x : v) total += std::exp(x - top);
  return top + std::log(total);
}

// softmax(scores / beta); uniform when beta is zero.
std::vector<double> tempered_softmax(std::span<const double> scores, double beta) {
  std::vector<double> w(scores.size(), 1.0 / static_cast<double>(scores.size()));
  if (beta <= 0.0) return w;
  for (std::size_t a = 0; a < scores.size(); ++a) w[a] = scores[a] / beta;
  const double lse = log_sum_exp(w);
  for (double& v : w) v = std::exp(v - lse);
  return w;
}

Matrix row_softmax(const Matrix& logits) {
  Matrix w(logits.rows(), logits.cols());
  for (std::size_t z = 0; z < logits.rows(); ++z) {
    const double lse = log_sum_exp(logits.row(z));
    for (std::size_t a = 0; a < logits.cols(); ++a) w(z, a) = std::exp(logits(z, a) - lse);
  }
  return w;
}

void require_finite(const Matrix& m, const char* what) {
  for (double v : m.flat()) {
    require(std::isfinite(v), ErrorKind::kDomain, std::string("non-finite value in ") + what);
  }
}

struct CoreFit {
  Matrix weights;
  FitReport report;
};

// Maximizes sum_z [ s_z . w_z - beta_z H(w_z) ] row by row, optimizing all
// active rows jointly in logit space. Each active row is divided by its beta
// first; the maximizer is unchanged and the curvature stays O(1).
CoreFit fit_entropy_regularized(const Matrix& scores, std::span<const double> betas,
                                const LbfgsOptions& optimizer) {
  const std::size_t k = scores.rows();
  const std::size_t n = scores.cols();
  require(n >= 1, ErrorKind::kDomain, "need at least one prompt");

  std::vector<std::size_t> active;
  for (std::size_t z = 0; z < k; ++z) {
    if (betas[z] > 0.0) active.push_back(z);
  }
  Matrix scaled(active.size(), n);
  // Dividing by beta and shifting the row maximum to zero leave the row's
  // maximizer unchanged and keep the objective O(1) near the optimum.
  for (std::size_t r = 0; r < active.size(); ++r) {
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < n; ++a) {
      scaled(r, a) = scores(active[r], a) / betas[active[r]];
      hi = std::max(hi, scaled(r, a));
    }
    for (std::size_t a = 0; a < n; ++a) scaled(r, a) -= hi;
  }
  const std::vector<double> unit(active.size(), 1.0);

  Matrix theta(active.size(), n, 0.0);
  LbfgsResult opt;
  if (!active.empty()) {
    // Step 0 runs in logit coordinates with the configured settings. Later
    // steps restart from the current point in coordinates scaled by the
    // softmax curvature 1/sqrt(w(1-w)); without that, prompts carrying tiny
    // weight sit in directions ~1/w flatter than the rest and stall.
    std::vector<double> scale(theta.flat().size(), 1.0);
    Matrix origin = theta;
    ObjectiveFn negated = [&](std::span<const double> u, std::span<double> grad) {
      Matrix logits(active.size(), n);
      for (std::size_t i = 0; i < u.size(); ++i) logits.flat()[i] = origin.flat()[i] + scale[i] * u[i];
      auto value = entropy_regularized_objective(logits, scaled, unit);
      auto g = value.gradient.flat();
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = -scale[i] * g[i];
      return -value.objective;
    };
    std::size_t iterations = 0;
    double previous = std::numeric_limits<double>::infinity();
    for (std::size_t step = 0; step < std::max<std::size_t>(1, optimizer.max_steps); ++step) {
      if (step > 0) {
        const Matrix w = row_softmax(theta);
        for (std::size_t i = 0; i < scale.size(); ++i) {
          const double wi = w.flat()[i];
          scale[i] = 1.0 / std::sqrt(std::max(wi * (1.0 - wi), 1e-12));
        }
      }
      origin = theta;
      std::vector<double> u(theta.flat().size(), 0.0);
      opt = minimize_lbfgs(negated, u, optimizer);
      for (std::size_t i = 0; i < u.size(); ++i) theta.flat()[i] = origin.flat()[i] + scale[i] * u[i];
      iterations += opt.iterations;
      if (!(opt.loss < previous)) break;
      previous = opt.loss;
    }
    opt.iterations = iterations;
  } else {
    opt.stop = LbfgsStop::kGradientTolerance;
  }

  Matrix logits(k, n, 0.0);
  for (std::size_t r = 0; r < active.size(); ++r) {
    std::copy(theta.row(r).begin(), theta.row(r).end(), logits.row(active[r]).begin());
  }
  CoreFit fit;
  fit.weights = row_softmax(logits);
  // Rows without mass are set directly so they are exactly uniform.
  for (std::size_t z = 0; z < k; ++z) {
    if (betas[z] > 0.0) continue;
    for (double& w : fit.weights.row(z)) w = 1.0 / static_cast<double>(n);
  }
  fit.report.final_objective = entropy_regularized_objective(logits, scores, betas).objective;
  fit.report.iterations = opt.iterations;
  fit.report.stop_reason = to_string(opt.stop);
  double gap = 0.0;
  for (std::size_t z = 0; z < k; ++z) {
    auto exact = tempered_softmax(scores.row(z), betas[z]);
    for (std::size_t a = 0; a < n; ++a) gap = std::max(gap, std::abs(exact[a] - fit.weights(z, a)));
  }
  fit.report.closed_form_gap = gap;
  fit.report.converged = opt.converged() && gap <= 1e-6;
  return fit;
}

}  // namespace

std::string_view to_string(EnsembleKind kind) {
  switch (kind) {
    case EnsembleKind::kStandard: return "standard";
    case EnsembleKind::kBest: return "best";
    case EnsembleKind::kAverage: return "average";
    case EnsembleKind::kBpe: return "bpe";
    case EnsembleKind::kMmb: return "mmb";
  }
  return "?";
}

EnsembleKind parse_ensemble_kind(std::string_view text) {
  if (text == "standard" || text == "std") return EnsembleKind::kStandard;
  if (text == "best") return EnsembleKind::kBest;
  if (text == "average" || text == "avg") return EnsembleKind::kAverage;
  if (text == "bpe") return EnsembleKind::kBpe;
  if (text == "mmb") return EnsembleKind::kMmb;
  fail(ErrorKind::kArgument, "unknown ensemble kind '" + std::string(text) + "'");
}

LbfgsOptions default_ensemble_optimizer() {
  LbfgsOptions o;
  o.lr = 0.01;
  o.history_size = 50;
  o.max_iter = 100;
  o.strong_wolfe = true;
  o.max_steps = 50;
  return o;
}

LogLikTensor build_loglik_tensor(const DatasetBundle& bundle,
                                 std::span<const std::string> prompt_ids) {
  return build_loglik_tensor(bundle, bundle.splits().validation, prompt_ids);
}

LogLikTensor build_loglik_tensor(const DatasetBundle& bundle,
                                 std::span<const std::string> sample_ids,
                                 std::span<const std::string> prompt_ids) {
  if (prompt_ids.empty()) prompt_ids = bundle.prompt_ids();
  LogLikTensor t;
  t.sample_ids.assign(sample_ids.begin(), sample_ids.end());
  t.prompt_ids.assign(prompt_ids.begin(), prompt_ids.end());
  t.values = Matrix(sample_ids.size(), prompt_ids.size());
  t.correct = Matrix(sample_ids.size(), prompt_ids.size());
  for (std::size_t j = 0; j < sample_ids.size(); ++j) {
    const auto label = bundle.label(sample_ids[j]);
    require(label.has_value(), ErrorKind::kIntegrity, "sample '" + sample_ids[j] + "' has no label");
    const Matrix probs = bundle.class_probs(sample_ids[j], prompt_ids);
    for (std::size_t i = 0; i < prompt_ids.size(); ++i) {
      auto row = probs.row(i);
      t.values(j, i) = std::log(std::max(row[*label], kLogProbFloor));
      const auto predicted = std::max_element(row.begin(), row.end()) - row.begin();
      t.correct(j, i) = predicted == *label ? 1.0 : 0.0;
    }
  }
  return t;
}

void EnsembleWeights::validate() const {
  require(weights.rows() >= 1 && weights.cols() >= 1, ErrorKind::kShape, "empty weight matrix");
  require(prompt_ids.size() == weights.cols(), ErrorKind::kShape, "prompt ids disagree with weights");
  require(kind == EnsembleKind::kMmb || weights.rows() == 1, ErrorKind::kShape,
          "only mmb weights may have more than one row");
  if (kind == EnsembleKind::kMmb && cluster_model) {
    require(cluster_model->k() == weights.rows(), ErrorKind::kShape,
            "cluster model and weights disagree on K");
  }
  for (std::size_t z = 0; z < weights.rows(); ++z) {
    double total = 0.0;
    for (double w : weights.row(z)) {
      require(std::isfinite(w) && w >= 0.0, ErrorKind::kValidation, "negative or non-finite weight");
      total += w;
    }
    require(std::abs(total - 1.0) <= 1e-9, ErrorKind::kValidation,
            "weight row " + std::to_string(z) + " does not sum to one");
  }
}

ObjectiveValue entropy_regularized_objective(const Matrix& logits, const Matrix& scores,
                                             std::span<const double> entropy_weights) {
  require(logits.rows() == scores.rows() && logits.cols() == scores.cols() &&
              entropy_weights.size() == scores.rows(),
          ErrorKind::kShape, "objective inputs disagree in shape");
  require_finite(logits, "logits");
  ObjectiveValue out;
  out.gradient = Matrix(logits.rows(), logits.cols());
  const std::size_t n = logits.cols();
  std::vector<double> log_w(n), w(n), g(n);
  for (std::size_t z = 0; z < logits.rows(); ++z) {
    const double lse = log_sum_exp(logits.row(z));
    const double beta = entropy_weights[z];
    double mean_g = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
      log_w[a] = logits(z, a) - lse;
      w[a] = std::exp(log_w[a]);
      // d/dw_a of the row objective, dropping the constant -beta that the
      // softmax Jacobian annihilates.
      g[a] = scores(z, a) - beta * log_w[a];
      // 0 log 0 = 0
      out.objective += w[a] == 0.0 ? 0.0 : w[a] * g[a];
      mean_g += w[a] * g[a];
    }
    for (std::size_t a = 0; a < n; ++a) out.gradient(z, a) = w[a] * (g[a] - mean_g);
  }
  return out;
}

namespace {

void check_assignments(const LogLikTensor& loglik, const Matrix& assignments) {
  require(assignments.rows() == loglik.m(), ErrorKind::kShape,
          "assignments have " + std::to_string(assignments.rows()) + " rows for " +
              std::to_string(loglik.m()) + " samples");
  require(assignments.cols() >= 1, ErrorKind::kShape, "assignments need at least one group");
  for (std::size_t j = 0; j < assignments.rows(); ++j) {
    double total = 0.0;
    for (double p : assignments.row(j)) {
      require(std::isfinite(p) && p >= 0.0, ErrorKind::kDomain, "invalid assignment probability");
      total += p;
    }
    require(std::abs(total - 1.0) <= 1e-9, ErrorKind::kDomain,
            "assignment row " + std::to_string(j) + " does not sum to one");
  }
}

// L_za = sum_j p(z|x_j) ll(j,a); M_z = sum_j p(z|x_j).
void group_statistics(const LogLikTensor& loglik, const Matrix& assignments, Matrix& scores,
                      std::vector<double>& mass) {
  const std::size_t k = assignments.cols();
  scores = Matrix(k, loglik.n(), 0.0);
  mass.assign(k, 0.0);
  for (std::size_t j = 0; j < loglik.m(); ++j) {
    for (std::size_t z = 0; z < k; ++z) {
      const double p = assignments(j, z);
      mass[z] += p;
      for (std::size_t a = 0; a < loglik.n(); ++a) scores(z, a) += p * loglik.values(j, a);
    }
  }
}

}  // namespace

ObjectiveValue objective_and_gradient(const Matrix& logits, const LogLikTensor& loglik,
                                      const Matrix& assignments) {
  check_assignments(loglik, assignments);
  require_finite(loglik.values, "log-likelihoods");
  require(logits.rows() == assignments.cols() && logits.cols() == loglik.n(), ErrorKind::kShape,
          "logits must be K x N");
  Matrix scores;
  std::vector<double> mass;
  group_statistics(loglik, assignments, scores, mass);
  return entropy_regularized_objective(logits, scores, mass);
}

EnsembleFit fit_bpe(const LogLikTensor& loglik, const LbfgsOptions& optimizer) {
  require(loglik.n() >= 1, ErrorKind::kDomain, "need at least one prompt");
  require_finite(loglik.values, "log-likelihoods");
  Matrix scores(1, loglik.n(), 0.0);
  for (std::size_t j = 0; j < loglik.m(); ++j) {
    for (std::size_t a = 0; a < loglik.n(); ++a) scores(0, a) += loglik.values(j, a);
  }
  const std::vector<double> beta{loglik.m() > 0 ? 1.0 : 0.0};
  auto core = fit_entropy_regularized(scores, beta, optimizer);
  EnsembleFit fit;
  fit.weights.kind = EnsembleKind::kBpe;
  fit.weights.weights = std::move(core.weights);
  fit.weights.prompt_ids = loglik.prompt_ids;
  fit.report = core.report;
  return fit;
}

EnsembleFit fit_mmb(const LogLikTensor& loglik, const Matrix& assignments,
                    std::optional<ClusterModel> cluster_model, const LbfgsOptions& optimizer) {
  require(loglik.n() >= 1, ErrorKind::kDomain, "need at least one prompt");
  require_finite(loglik.values, "log-likelihoods");
  if (loglik.m() == 0 && assignments.rows() == 0 && cluster_model) {
    // No validation data: nothing to shape the rows, all uniform.
    Matrix scores(cluster_model->k(), loglik.n(), 0.0);
    std::vector<double> mass(cluster_model->k(), 0.0);
    auto core = fit_entropy_regularized(scores, mass, optimizer);
    return {{EnsembleKind::kMmb, std::move(core.weights), loglik.prompt_ids, std::move(cluster_model)},
            core.report};
  }
  check_assignments(loglik, assignments);
  if (cluster_model) {
    require(cluster_model->k() == assignments.cols(), ErrorKind::kShape,
            "cluster model and assignments disagree on K");
  }
  Matrix scores;
  std::vector<double> mass;
  group_statistics(loglik, assignments, scores, mass);
  auto core = fit_entropy_regularized(scores, mass, optimizer);
  EnsembleFit fit;
  fit.weights.kind = EnsembleKind::kMmb;
  fit.weights.weights = std::move(core.weights);
  fit.weights.prompt_ids = loglik.prompt_ids;
  fit.weights.cluster_model = std::move(cluster_model);
  fit.report = core.report;
  return fit;
}

EnsembleWeights select_baseline(EnsembleKind kind, const LogLikTensor& loglik, std::uint64_t seed) {
  const std::size_t n = loglik.n();
  require(n >= 1, ErrorKind::kDomain, "need at least one prompt");
  EnsembleWeights out;
  out.kind = kind;
  out.prompt_ids = loglik.prompt_ids;
  out.weights = Matrix(1, n, 0.0);
  switch (kind) {
    case EnsembleKind::kAverage:
      for (double& w : out.weights.flat()) w = 1.0 / static_cast<double>(n);
      break;
    case EnsembleKind::kStandard: {
      std::mt19937_64 rng(seed);
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      out.weights(0, pick(rng)) = 1.0;
      break;
    }
    case EnsembleKind::kBest: {
      require(loglik.m() >= 1, ErrorKind::kCapacity, "best-prompt selection needs validation samples");
      std::vector<double> hits(n, 0.0), ll(n, 0.0);
      for (std::size_t j = 0; j < loglik.m(); ++j) {
        for (std::size_t a = 0; a < n; ++a) {
          hits[a] += loglik.correct(j, a);
          ll[a] += loglik.values(j, a);
        }
      }
      std::size_t best = 0;
      for (std::size_t a = 1; a < n; ++a) {
        if (hits[a] > hits[best] || (hits[a] == hits[best] && ll[a] > ll[best])) best = a;
      }
      out.weights(0, best) = 1.0;
      break;
    }
    default:
      fail(ErrorKind::kArgument, "select_baseline handles standard, best and average only");
  }
  return out;
}

std::vector<double> predict_with_assignment(const EnsembleWeights& weights,
                                            const Matrix& prompt_probs,
                                            std::span<const double> assignment) {
  require(prompt_probs.rows() == weights.n(), ErrorKind::kIntegrity,
          "sample has " + std::to_string(prompt_probs.rows()) + " prompt rows, weights cover " +
              std::to_string(weights.n()));
  require(assignment.size() == weights.k(), ErrorKind::kShape, "assignment size must equal K");
  std::vector<double> out(prompt_probs.cols(), 0.0);
  for (std::size_t z = 0; z < weights.k(); ++z) {
    if (assignment[z] == 0.0) continue;
    for (std::size_t a = 0; a < weights.n(); ++a) {
      const double w = assignment[z] * weights.weights(z, a);
      if (w == 0.0) continue;
      for (std::size_t c = 0; c < out.size(); ++c) out[c] += w * prompt_probs(a, c);
    }
  }
  return out;
}

std::vector<double> predict(const EnsembleWeights& weights, const Matrix& prompt_probs,
                            std::optional<std::span<const double>> embedding) {
  if (weights.kind != EnsembleKind::kMmb) {
    const double one = 1.0;
    return predict_with_assignment(weights, prompt_probs, std::span<const double>(&one, 1));
  }
  require(embedding.has_value(), ErrorKind::kArgument, "mmb prediction needs an embedding");
  require(weights.cluster_model.has_value(), ErrorKind::kArgument,
          "mmb weights carry no cluster model");
  const auto assignment = soft_assign(*embedding, *weights.cluster_model);
  return predict_with_assignment(weights, prompt_probs, assignment);
}

std::vector<double> predict_sample(const EnsembleWeights& weights, const DatasetBundle& bundle,
                                   const std::string& sample_id) {
  const Matrix probs = bundle.class_probs(sample_id, weights.prompt_ids);
  if (weights.kind != EnsembleKind::kMmb) return predict(weights, probs);
  require(bundle.embeddings().contains(sample_id), ErrorKind::kArgument,
          "mmb prediction needs an embedding for '" + sample_id + "'");
  return predict(weights, probs, bundle.embeddings().at(sample_id));
}

std::string weights_to_json(const EnsembleWeights& weights) {
  nlohmann::ordered_json obj;
  obj["format"] = "mmb-ensemble-weights";
  obj["version"] = 1;
  obj["kind"] = std::string(to_string(weights.kind));
  obj["k"] = weights.k();
  obj["n"] = weights.n();
  obj["prompt_ids"] = weights.prompt_ids;
  obj["weights"] = weights.weights.to_rows();
  if (weights.cluster_model) {
    obj["cluster_model"] = nlohmann::ordered_json::parse(cluster_model_to_json(*weights.cluster_model));
  } else {
    obj["cluster_model"] = nullptr;
  }
  return obj.dump(2);
}

EnsembleWeights weights_from_json(const std::string& text) {
  EnsembleWeights w;
  try {
    auto obj = nlohmann::ordered_json::parse(text);
    require(obj.value("format", "") == "mmb-ensemble-weights", ErrorKind::kFormat,
            "not an ensemble weights document");
    w.kind = parse_ensemble_kind(obj.at("kind").get<std::string>());
    w.prompt_ids = obj.at("prompt_ids").get<std::vector<std::string>>();
    w.weights = Matrix::from_rows(obj.at("weights").get<std::vector<std::vector<double>>>());
    require(obj.at("k").get<std::size_t>() == w.k() && obj.at("n").get<std::size_t>() == w.n(),
            ErrorKind::kFormat, "k/n disagree with the weight rows");
    if (auto it = obj.find("cluster_model"); it != obj.end() && !it->is_null()) {
      w.cluster_model = cluster_model_from_json(it->dump());
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("ensemble weights: ") + e.what());
  }
  w.validate();
  return w;
}

void save_weights(const std::filesystem::path& path, const EnsembleWeights& weights) {
  write_file_atomic(path, weights_to_json(weights) + "\n");
}

EnsembleWeights load_weights(const std::filesystem::path& path) {
  return weights_from_json(read_file(path));
}

}  // namespace mmb
