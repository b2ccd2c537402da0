#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>

namespace mmb {

// Limited-memory BFGS with an optional strong-Wolfe line search. Mirrors the
// step logic of torch.optim.LBFGS so that settings carry over: the first step
// is scaled by lr * min(1, 1/|g|_1), later steps start from lr, and the
// line search extrapolates/zooms from there.
struct LbfgsOptions {
  double lr = 0.01;
  std::size_t max_iter = 100;
  std::size_t max_eval = 0;  // 0 means max_iter * 5 / 4
  double tolerance_grad = 1e-10;
  double tolerance_change = 1e-14;
  std::size_t history_size = 50;
  bool strong_wolfe = true;
  // Callers that loop over optimizer steps (one step = up to max_iter
  // iterations) stop after this many.
  std::size_t max_steps = 1;
};

enum class LbfgsStop {
  kGradientTolerance,
  kMaxIterations,
  kMaxEvaluations,
  kStepTolerance,
  kLossTolerance,
  kNotDescent,
};

std::string to_string(LbfgsStop stop);

struct LbfgsResult {
  double loss = 0.0;
  double max_abs_gradient = 0.0;
  std::size_t iterations = 0;
  std::size_t evaluations = 0;
  LbfgsStop stop = LbfgsStop::kMaxIterations;

  bool converged() const {
    return stop == LbfgsStop::kGradientTolerance || stop == LbfgsStop::kStepTolerance ||
           stop == LbfgsStop::kLossTolerance || stop == LbfgsStop::kNotDescent;
  }
};

// Returns the loss at x and writes its gradient.
using ObjectiveFn = std::function<double(std::span<const double> x, std::span<double> gradient)>;

// Minimizes in place.
LbfgsResult minimize_lbfgs(const ObjectiveFn& objective, std::span<double> x,
                           const LbfgsOptions& options = {});

// Minimizer of the cubic through (x1,f1,g1), (x2,f2,g2), clamped to bounds.
double cubic_interpolate(double x1, double f1, double g1, double x2, double f2, double g2,
                         double lo, double hi);

}  // namespace mmb
