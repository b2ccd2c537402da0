#include "mmb/lbfgs.h"

#include <algorithm>
#include <cmath>
#include <deque>
#include <vector>

namespace mmb {

namespace {

using Vec = std::vector<double>;

double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double max_abs(const Vec& a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

double l1(const Vec& a) {
  double s = 0.0;
  for (double v : a) s += std::abs(v);
  return s;
}

struct LineSearchResult {
  double loss;
  Vec grad;
  double step;
  std::size_t evals;
};

// Evaluates the objective at x + t*d.
class Probe {
 public:
  Probe(const ObjectiveFn& f, const Vec& x, const Vec& d) : f_(f), x_(x), d_(d), trial_(x.size()) {}

  double operator()(double t, Vec& grad) {
    for (std::size_t i = 0; i < x_.size(); ++i) trial_[i] = x_[i] + t * d_[i];
    grad.assign(x_.size(), 0.0);
    return f_(trial_, grad);
  }

 private:
  const ObjectiveFn& f_;
  const Vec& x_;
  const Vec& d_;
  Vec trial_;
};

LineSearchResult strong_wolfe(const ObjectiveFn& f, const Vec& x, double t, const Vec& d,
                              double loss, const Vec& grad, double gtd, double tolerance_change,
                              double c1 = 1e-4, double c2 = 0.9, std::size_t max_ls = 25) {
  Probe probe(f, x, d);
  const double d_norm = max_abs(d);
  Vec g_new;
  double f_new = probe(t, g_new);
  std::size_t evals = 1;
  double gtd_new = dot(g_new, d);

  double t_prev = 0.0, f_prev = loss, gtd_prev = gtd;
  Vec g_prev = grad;
  bool done = false;
  std::size_t ls_iter = 0;

  std::vector<double> bracket, bracket_f, bracket_gtd;
  std::vector<Vec> bracket_g;

  while (ls_iter < max_ls) {
    if (f_new > loss + c1 * t * gtd || (ls_iter > 1 && f_new >= f_prev)) {
      bracket = {t_prev, t};
      bracket_f = {f_prev, f_new};
      bracket_g = {g_prev, g_new};
      bracket_gtd = {gtd_prev, gtd_new};
      break;
    }
    if (std::abs(gtd_new) <= -c2 * gtd) {
      bracket = {t};
      bracket_f = {f_new};
      bracket_g = {g_new};
      bracket_gtd = {gtd_new};
      done = true;
      break;
    }
    if (gtd_new >= 0) {
      bracket = {t_prev, t};
      bracket_f = {f_prev, f_new};
      bracket_g = {g_prev, g_new};
      bracket_gtd = {gtd_prev, gtd_new};
      break;
    }
    const double min_step = t + 0.01 * (t - t_prev);
    const double max_step = t * 10;
    const double previous = t;
    t = cubic_interpolate(t_prev, f_prev, gtd_prev, t, f_new, gtd_new, min_step, max_step);
    t_prev = previous;
    f_prev = f_new;
    g_prev = g_new;
    gtd_prev = gtd_new;
    f_new = probe(t, g_new);
    ++evals;
    gtd_new = dot(g_new, d);
    ++ls_iter;
  }
  if (ls_iter == max_ls) {
    bracket = {0.0, t};
    bracket_f = {loss, f_new};
    bracket_g = {grad, g_new};
    bracket_gtd = {gtd, gtd_new};
  }

  // Zoom until the strong Wolfe conditions hold or the bracket collapses.
  bool insufficient_progress = false;
  std::size_t low = 0, high = 1;
  if (bracket.size() == 2 && bracket_f[0] > bracket_f[1]) std::swap(low, high);
  while (!done && ls_iter < max_ls) {
    if (std::abs(bracket[1] - bracket[0]) * d_norm < tolerance_change) break;
    t = cubic_interpolate(bracket[0], bracket_f[0], bracket_gtd[0], bracket[1], bracket_f[1],
                          bracket_gtd[1], std::min(bracket[0], bracket[1]),
                          std::max(bracket[0], bracket[1]));
    const double b_max = std::max(bracket[0], bracket[1]);
    const double b_min = std::min(bracket[0], bracket[1]);
    const double eps = 0.1 * (b_max - b_min);
    if (std::min(b_max - t, t - b_min) < eps) {
      if (insufficient_progress || t >= b_max || t <= b_min) {
        t = std::abs(t - b_max) < std::abs(t - b_min) ? b_max - eps : b_min + eps;
        insufficient_progress = false;
      } else {
        insufficient_progress = true;
      }
    } else {
      insufficient_progress = false;
    }
    f_new = probe(t, g_new);
    ++evals;
    gtd_new = dot(g_new, d);
    ++ls_iter;

    if (f_new > loss + c1 * t * gtd || f_new >= bracket_f[low]) {
      bracket[high] = t;
      bracket_f[high] = f_new;
      bracket_g[high] = g_new;
      bracket_gtd[high] = gtd_new;
      if (bracket_f[0] <= bracket_f[1]) {
        low = 0;
        high = 1;
      } else {
        low = 1;
        high = 0;
      }
    } else {
      if (std::abs(gtd_new) <= -c2 * gtd) {
        done = true;
      } else if (gtd_new * (bracket[high] - bracket[low]) >= 0) {
        bracket[high] = bracket[low];
        bracket_f[high] = bracket_f[low];
        bracket_g[high] = bracket_g[low];
        bracket_gtd[high] = bracket_gtd[low];
      }
      bracket[low] = t;
      bracket_f[low] = f_new;
      bracket_g[low] = g_new;
      bracket_gtd[low] = gtd_new;
    }
  }
  return {bracket_f[low], std::move(bracket_g[low]), bracket[low], evals};
}

}  // namespace

std::string to_string(LbfgsStop stop) {
  switch (stop) {
    case LbfgsStop::kGradientTolerance: return "gradient_tolerance";
    case LbfgsStop::kMaxIterations: return "max_iterations";
    case LbfgsStop::kMaxEvaluations: return "max_evaluations";
    case LbfgsStop::kStepTolerance: return "step_tolerance";
    case LbfgsStop::kLossTolerance: return "loss_tolerance";
    case LbfgsStop::kNotDescent: return "not_descent";
  }
  return "?";
}

double cubic_interpolate(double x1, double f1, double g1, double x2, double f2, double g2,
                         double lo, double hi) {
  const double d1 = g1 + g2 - 3 * (f1 - f2) / (x1 - x2);
  const double d2_square = d1 * d1 - g1 * g2;
  if (d2_square >= 0) {
    const double d2 = std::sqrt(d2_square);
    double min_pos;
    if (x1 <= x2) {
      min_pos = x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2 * d2));
    } else {
      min_pos = x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2 * d2));
    }
    if (std::isnan(min_pos)) return (lo + hi) / 2;
    return std::min(std::max(min_pos, lo), hi);
  }
  return (lo + hi) / 2;
}

LbfgsResult minimize_lbfgs(const ObjectiveFn& objective, std::span<double> x_io,
                           const LbfgsOptions& options) {
  const std::size_t n = x_io.size();
  const std::size_t max_eval = options.max_eval ? options.max_eval : options.max_iter * 5 / 4;
  Vec x(x_io.begin(), x_io.end());
  Vec g(n, 0.0);
  LbfgsResult result;
  double loss = objective(x, g);
  result.evaluations = 1;
  result.loss = loss;
  result.max_abs_gradient = max_abs(g);
  if (result.max_abs_gradient <= options.tolerance_grad) {
    result.stop = LbfgsStop::kGradientTolerance;
    return result;
  }

  std::deque<Vec> old_dirs, old_steps;
  std::deque<double> ro;
  Vec d(n), prev_g, al(options.history_size);
  double t = 0.0;
  double h_diag = 1.0;

  for (std::size_t iter = 1;; ++iter) {
    result.iterations = iter;
    if (iter == 1) {
      for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
    } else {
      Vec y(n), s(n);
      for (std::size_t i = 0; i < n; ++i) {
        y[i] = g[i] - prev_g[i];
        s[i] = d[i] * t;
      }
      const double ys = dot(y, s);
      if (ys > 1e-10) {
        if (old_dirs.size() == options.history_size) {
          old_dirs.pop_front();
          old_steps.pop_front();
          ro.pop_front();
        }
        h_diag = ys / dot(y, y);
        old_dirs.push_back(std::move(y));
        old_steps.push_back(std::move(s));
        ro.push_back(1.0 / ys);
      }
      // Two-loop recursion.
      Vec q(n);
      for (std::size_t i = 0; i < n; ++i) q[i] = -g[i];
      al.assign(old_dirs.size(), 0.0);
      for (std::size_t k = old_dirs.size(); k-- > 0;) {
        al[k] = dot(old_steps[k], q) * ro[k];
        for (std::size_t i = 0; i < n; ++i) q[i] -= al[k] * old_dirs[k][i];
      }
      for (std::size_t i = 0; i < n; ++i) d[i] = q[i] * h_diag;
      for (std::size_t k = 0; k < old_dirs.size(); ++k) {
        const double be = dot(old_dirs[k], d) * ro[k];
        for (std::size_t i = 0; i < n; ++i) d[i] += old_steps[k][i] * (al[k] - be);
      }
    }
    prev_g = g;
    const double prev_loss = loss;

    t = iter == 1 ? std::min(1.0, 1.0 / l1(g)) * options.lr : options.lr;
    const double gtd = dot(g, d);
    if (gtd > -options.tolerance_change) {
      result.stop = LbfgsStop::kNotDescent;
      break;
    }

    if (options.strong_wolfe) {
      auto ls = strong_wolfe(objective, x, t, d, loss, g, gtd, options.tolerance_change);
      loss = ls.loss;
      g = std::move(ls.grad);
      t = ls.step;
      for (std::size_t i = 0; i < n; ++i) x[i] += t * d[i];
      result.evaluations += ls.evals;
    } else {
      for (std::size_t i = 0; i < n; ++i) x[i] += t * d[i];
      loss = objective(x, g);
      result.evaluations += 1;
    }
    result.loss = loss;
    result.max_abs_gradient = max_abs(g);

    if (iter == options.max_iter) {
      result.stop = LbfgsStop::kMaxIterations;
      break;
    }
    if (result.evaluations >= max_eval) {
      result.stop = LbfgsStop::kMaxEvaluations;
      break;
    }
    if (result.max_abs_gradient <= options.tolerance_grad) {
      result.stop = LbfgsStop::kGradientTolerance;
      break;
    }
    if (max_abs(d) * std::abs(t) <= options.tolerance_change) {
      result.stop = LbfgsStop::kStepTolerance;
      break;
    }
    if (std::abs(loss - prev_loss) < options.tolerance_change) {
      result.stop = LbfgsStop::kLossTolerance;
      break;
    }
  }
  std::copy(x.begin(), x.end(), x_io.begin());
  return result;
}

}  // namespace mmb
