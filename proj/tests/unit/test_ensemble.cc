#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "mmb/ensemble.h"
#include "mmb/error.h"
#include "oracles.h"

using namespace mmb;
using namespace mmb::testing;

namespace {

LogLikTensor tensor_from(const std::vector<std::vector<double>>& ll) {
  LogLikTensor t;
  t.values = Matrix::from_rows(ll);
  t.correct = Matrix(t.values.rows(), t.values.cols(), 1.0);
  for (std::size_t j = 0; j < t.values.rows(); ++j) t.sample_ids.push_back("s" + std::to_string(j));
  for (std::size_t a = 0; a < t.values.cols(); ++a) t.prompt_ids.push_back("p" + std::to_string(a));
  return t;
}

JudgeRecord rec(std::string s, std::string p, std::vector<double> probs, std::optional<int> y) {
  JudgeRecord r;
  r.sample_id = std::move(s);
  r.prompt_id = std::move(p);
  for (double x : probs) r.class_logprobs.push_back(std::log(x));
  r.label = y;
  return r;
}

}  // namespace

TEST_CASE("loglik tensor entries") {
  std::vector<JudgeRecord> records = {
      rec("a", "p0", {0.75, 0.25}, 0), rec("a", "p1", {0.5, 0.5}, 0),
      rec("b", "p0", {1.0, 0.0}, 1),   rec("b", "p1", {0.5, 0.5}, 1),
  };
  DatasetBundle bundle(records, EmbeddingTable{});
  const std::vector<std::string> ids = {"a", "b"};
  const auto t = build_loglik_tensor(bundle, ids, {});
  CHECK(t.values(0, 0) == doctest::Approx(std::log(0.75)).epsilon(1e-14));
  CHECK(t.values(0, 1) == doctest::Approx(std::log(0.5)).epsilon(1e-14));
  CHECK(t.values(1, 0) == std::log(1e-12));
  CHECK(t.correct(0, 0) == 1.0);
  CHECK(t.correct(1, 0) == 0.0);
  // [0.5, 0.5] ties go to class 0.
  CHECK(t.correct(1, 1) == 0.0);
}

TEST_CASE("loglik tensor rejects unlabeled samples") {
  std::vector<JudgeRecord> records = {rec("a", "p0", {0.6, 0.4}, std::nullopt)};
  DatasetBundle bundle(records, EmbeddingTable{});
  const std::vector<std::string> ids = {"a"};
  CHECK_THROWS_AS(build_loglik_tensor(bundle, ids, {}), Error);
}

TEST_CASE("bpe on two prompts") {
  const auto t = tensor_from({{std::log(4.0), 0.0}});
  const auto fit = fit_bpe(t);
  CHECK(std::abs(fit.weights.weights(0, 0) - 0.8) <= 1e-7);
  CHECK(std::abs(fit.weights.weights(0, 1) - 0.2) <= 1e-7);
  CHECK(fit.report.closed_form_gap <= 1e-6);
  CHECK(fit.report.converged);
}

TEST_CASE("bpe with identical prompts is uniform") {
  const auto t = tensor_from({{-0.3, -0.3, -0.3}, {-1.2, -1.2, -1.2}});
  const auto fit = fit_bpe(t);
  for (double w : fit.weights.weights.flat()) CHECK(w == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("bpe with no validation data is exactly uniform") {
  LogLikTensor t;
  t.values = Matrix(0, 4);
  t.correct = Matrix(0, 4);
  t.prompt_ids = {"a", "b", "c", "d"};
  const auto fit = fit_bpe(t);
  for (double w : fit.weights.weights.flat()) CHECK(w == 0.25);
  const auto mmb = fit_mmb(t, Matrix(0, 3));
  CHECK(mmb.weights.k() == 3);
  for (double w : mmb.weights.weights.flat()) CHECK(w == 0.25);
}

TEST_CASE("bpe rejects an empty prompt set") {
  LogLikTensor t;
  t.values = Matrix(3, 0);
  t.correct = Matrix(3, 0);
  t.sample_ids = {"a", "b", "c"};
  CHECK_THROWS_AS(fit_bpe(t), Error);
}

TEST_CASE("fits match the analytic maximizers") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t m = 1 + rng() % 50, n = 1 + rng() % 20, k = 1 + rng() % 8;
    const auto t = random_loglik(rng, m, n);
    const auto p = random_assignments(rng, m, k);
    const auto bpe = fit_bpe(t);
    const auto expected_bpe = closed_form_bpe(t.values);
    std::vector<double> got(bpe.weights.weights.flat().begin(), bpe.weights.weights.flat().end());
    CHECK(max_abs_diff(got, expected_bpe) <= 1e-6);
    const auto mmb = fit_mmb(t, p);
    CHECK(max_abs_diff(mmb.weights.weights, closed_form_mmb(t.values, p)) <= 1e-6);
    CHECK(mmb.report.closed_form_gap >= 0.0);
  }
}

TEST_CASE("fit_mmb rows are valid distributions") {
  std::mt19937_64 rng(3);
  const auto t = random_loglik(rng, 30, 6);
  const auto fit = fit_mmb(t, random_assignments(rng, 30, 4));
  CHECK_NOTHROW(fit.weights.validate());
  for (std::size_t z = 0; z < 4; ++z) {
    double total = 0.0;
    for (double w : fit.weights.weights.row(z)) {
      CHECK(w >= 0.0);
      total += w;
    }
    CHECK(std::abs(total - 1.0) <= 1e-9);
  }
}

TEST_CASE("fit_mmb shape errors") {
  std::mt19937_64 rng(5);
  const auto t = random_loglik(rng, 10, 3);
  CHECK_THROWS_AS(fit_mmb(t, random_assignments(rng, 9, 2)), Error);
  Matrix bad(10, 2, 0.7);
  CHECK_THROWS_AS(fit_mmb(t, bad), Error);
}

TEST_CASE("groups without mass get uniform rows") {
  std::mt19937_64 rng(8);
  const auto t = random_loglik(rng, 12, 5);
  Matrix p(12, 3, 0.0);
  for (std::size_t j = 0; j < 12; ++j) p(j, j % 2) = 1.0;
  const auto fit = fit_mmb(t, p);
  for (double w : fit.weights.weights.row(2)) CHECK(w == 0.2);
}

TEST_CASE("one-hot assignments give per-partition fits") {
  std::mt19937_64 rng(21);
  const auto t = random_loglik(rng, 16, 4);
  Matrix p(16, 2, 0.0);
  std::vector<std::vector<double>> part0, part1;
  for (std::size_t j = 0; j < 16; ++j) {
    const std::size_t z = j < 7 ? 0 : 1;
    p(j, z) = 1.0;
    auto row = t.values.row(j);
    (z == 0 ? part0 : part1).emplace_back(row.begin(), row.end());
  }
  const auto fit = fit_mmb(t, p);
  // Per-group solution uses the group mean log-likelihood.
  const auto check_part = [&](std::size_t z, const std::vector<std::vector<double>>& rows) {
    std::vector<double> mean(4, 0.0);
    for (const auto& r : rows) {
      for (std::size_t a = 0; a < 4; ++a) mean[a] += r[a] / static_cast<double>(rows.size());
    }
    const auto w = softmax_ref(mean);
    for (std::size_t a = 0; a < 4; ++a) CHECK(std::abs(fit.weights.weights(z, a) - w[a]) <= 1e-6);
  };
  check_part(0, part0);
  check_part(1, part1);
}

TEST_CASE("single group equals bpe with entropy weight M") {
  std::mt19937_64 rng(17);
  const auto t = random_loglik(rng, 9, 5);
  const auto fit = fit_mmb(t, Matrix(9, 1, 1.0));
  std::vector<double> scaled(5, 0.0);
  for (std::size_t j = 0; j < 9; ++j) {
    for (std::size_t a = 0; a < 5; ++a) scaled[a] += t.values(j, a) / 9.0;
  }
  const auto expected = softmax_ref(scaled);
  for (std::size_t a = 0; a < 5; ++a) CHECK(std::abs(fit.weights.weights(0, a) - expected[a]) <= 1e-7);
}

TEST_CASE("bpe mass concentrates on the best prompt as data grows") {
  const std::vector<double> row = {-0.2, -0.25, -0.9};
  double previous = 0.0;
  for (std::size_t copies : {1, 2, 4, 8, 16, 64}) {
    std::vector<std::vector<double>> rows(copies, row);
    const auto fit = fit_bpe(tensor_from(rows));
    const double w = fit.weights.weights(0, 0);
    CHECK(w >= previous - 1e-9);
    previous = w;
  }
  CHECK(previous > 0.95);
}

TEST_CASE("objective at uniform logits") {
  const double c = -0.4;
  const auto t = tensor_from({{c, c, c}, {c, c, c}, {c, c, c}, {c, c, c}});
  std::mt19937_64 rng(1);
  const auto p = random_assignments(rng, 4, 2);
  const auto value = objective_and_gradient(Matrix(2, 3, 0.0), t, p);
  CHECK(value.objective == doctest::Approx(4 * c + 4 * std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("objective is invariant to shifting a logit row") {
  std::mt19937_64 rng(4);
  const auto t = random_loglik(rng, 6, 3);
  const auto p = random_assignments(rng, 6, 2);
  Matrix logits = Matrix::from_rows({{0.3, -1.0, 0.5}, {1.5, 0.2, -0.7}});
  const double base = objective_and_gradient(logits, t, p).objective;
  for (std::size_t a = 0; a < 3; ++a) logits(1, a) += 2.5;
  CHECK(objective_and_gradient(logits, t, p).objective == doctest::Approx(base).epsilon(1e-12));
  logits(0, 0) += 1.0;
  CHECK(objective_and_gradient(logits, t, p).objective != doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("gradient matches central differences") {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    const auto t = random_loglik(rng, 7, 3);
    const auto p = random_assignments(rng, 7, 2);
    Matrix logits(2, 3);
    for (auto& x : logits.flat()) x = g(rng);
    const auto value = objective_and_gradient(logits, t, p);
    for (std::size_t i = 0; i < 6; ++i) {
      Matrix up = logits, down = logits;
      up.flat()[i] += 1e-5;
      down.flat()[i] -= 1e-5;
      const double fd = (objective_and_gradient(up, t, p).objective -
                         objective_and_gradient(down, t, p).objective) / 2e-5;
      const double an = value.gradient.flat()[i];
      CHECK(std::abs(fd - an) / std::max(1.0, std::abs(an)) < 1e-5);
    }
  }
}

TEST_CASE("objective rejects non-finite logits") {
  std::mt19937_64 rng(2);
  const auto t = random_loglik(rng, 3, 2);
  Matrix logits(1, 2, 0.0);
  logits(0, 1) = std::nan("");
  CHECK_THROWS_AS(objective_and_gradient(logits, t, Matrix(3, 1, 1.0)), Error);
}

TEST_CASE("baselines") {
  auto t = tensor_from({{-0.1, -0.2, -0.3}, {-0.1, -0.2, -0.3}, {-0.1, -0.2, -0.3},
                        {-0.1, -0.2, -0.3}, {-0.1, -0.2, -0.3}, {-0.1, -0.2, -0.3},
                        {-0.1, -0.2, -0.3}, {-0.1, -0.2, -0.3}, {-0.1, -0.2, -0.3},
                        {-0.1, -0.2, -0.3}});
  // accuracies 0.6, 0.9, 0.7
  for (std::size_t j = 0; j < 10; ++j) {
    t.correct(j, 0) = j < 6;
    t.correct(j, 1) = j < 9;
    t.correct(j, 2) = j < 7;
  }
  const auto best = select_baseline(EnsembleKind::kBest, t, 0);
  CHECK(best.weights.to_rows() == std::vector<std::vector<double>>{{0.0, 1.0, 0.0}});

  const auto avg = select_baseline(EnsembleKind::kAverage, tensor_from({{-1, -1, -1, -1}}), 0);
  CHECK(avg.weights.to_rows() == std::vector<std::vector<double>>{{0.25, 0.25, 0.25, 0.25}});

  const auto s1 = select_baseline(EnsembleKind::kStandard, t, 42);
  const auto s2 = select_baseline(EnsembleKind::kStandard, t, 42);
  CHECK(s1.weights == s2.weights);
  CHECK(std::accumulate(s1.weights.flat().begin(), s1.weights.flat().end(), 0.0) == 1.0);

  LogLikTensor empty;
  empty.values = Matrix(0, 3);
  empty.correct = Matrix(0, 3);
  empty.prompt_ids = {"a", "b", "c"};
  CHECK_THROWS_AS(select_baseline(EnsembleKind::kBest, empty, 0), Error);
}

TEST_CASE("best breaks accuracy ties by log-likelihood then index") {
  auto t = tensor_from({{-0.5, -0.2, -0.2}, {-0.5, -0.2, -0.2}});
  const auto best = select_baseline(EnsembleKind::kBest, t, 0);
  CHECK(best.weights(0, 1) == 1.0);
}

TEST_CASE("predict mixtures") {
  EnsembleWeights w;
  w.kind = EnsembleKind::kAverage;
  w.weights = Matrix::from_rows({{0.5, 0.5}});
  w.prompt_ids = {"p0", "p1"};
  const auto out = predict(w, Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}}));
  CHECK(out == std::vector<double>{0.5, 0.5});

  EnsembleWeights one;
  one.kind = EnsembleKind::kStandard;
  one.weights = Matrix::from_rows({{0.0, 0.0, 1.0}});
  one.prompt_ids = {"p0", "p1", "p2"};
  const auto probs = Matrix::from_rows({{0.9, 0.1}, {0.3, 0.7}, {0.37, 0.63}});
  CHECK(predict(one, probs) == std::vector<double>{0.37, 0.63});

  EnsembleWeights mixed;
  mixed.kind = EnsembleKind::kMmb;
  mixed.weights = Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}});
  mixed.prompt_ids = {"p0", "p1"};
  const std::vector<double> half = {0.5, 0.5};
  const auto y = predict_with_assignment(mixed, Matrix::from_rows({{0.8, 0.2}, {0.6, 0.4}}), half);
  CHECK(y[0] == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(y[1] == doctest::Approx(0.3).epsilon(1e-15));
}

TEST_CASE("mmb predict needs an embedding") {
  EnsembleWeights w;
  w.kind = EnsembleKind::kMmb;
  w.weights = Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}});
  w.prompt_ids = {"p0", "p1"};
  w.cluster_model = ClusterModel{Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}}), 0.1};
  const auto probs = Matrix::from_rows({{0.8, 0.2}, {0.6, 0.4}});
  CHECK_THROWS_AS(predict(w, probs), Error);
  const std::vector<double> e = {1.0, 0.0};
  const auto out = predict(w, probs, std::span<const double>(e));
  CHECK(out[0] + out[1] == doctest::Approx(1.0));
  CHECK(out[0] > 0.79);
}

TEST_CASE("predict lies in the convex hull and is permutation invariant") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix probs(4, 3);
    for (std::size_t a = 0; a < 4; ++a) {
      double total = 0.0;
      for (std::size_t c = 0; c < 3; ++c) total += probs(a, c) = u(rng) + 1e-3;
      for (std::size_t c = 0; c < 3; ++c) probs(a, c) /= total;
    }
    std::vector<double> raw(4);
    for (auto& x : raw) x = u(rng);
    const auto wv = softmax_ref(raw);
    EnsembleWeights w;
    w.kind = EnsembleKind::kBpe;
    w.weights = Matrix::from_rows({wv});
    w.prompt_ids = {"a", "b", "c", "d"};
    const auto out = predict(w, probs);
    double total = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      double lo = 1.0, hi = 0.0;
      for (std::size_t a = 0; a < 4; ++a) lo = std::min(lo, probs(a, c)), hi = std::max(hi, probs(a, c));
      CHECK(out[c] >= lo - 1e-15);
      CHECK(out[c] <= hi + 1e-15);
      total += out[c];
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

    const std::vector<std::size_t> perm = {2, 0, 3, 1};
    EnsembleWeights wp = w;
    Matrix pp(4, 3);
    for (std::size_t i = 0; i < 4; ++i) {
      wp.weights(0, i) = w.weights(0, perm[i]);
      for (std::size_t c = 0; c < 3; ++c) pp(i, c) = probs(perm[i], c);
    }
    const auto out_p = predict(wp, pp);
    for (std::size_t c = 0; c < 3; ++c) CHECK(out_p[c] == doctest::Approx(out[c]).epsilon(1e-14));
  }
}

TEST_CASE("weights round trip through json") {
  EnsembleWeights w;
  w.kind = EnsembleKind::kMmb;
  w.weights = Matrix::from_rows({{0.1, 0.2, 0.7}, {1.0 / 3, 1.0 / 3, 1.0 / 3}});
  w.prompt_ids = {"x", "y", "z"};
  w.cluster_model = ClusterModel{Matrix::from_rows({{0.6, 0.8}, {1.0, 0.0}}), 0.25};
  const auto text = weights_to_json(w);
  const auto back = weights_from_json(text);
  CHECK(back.kind == w.kind);
  CHECK(back.weights == w.weights);
  CHECK(back.prompt_ids == w.prompt_ids);
  REQUIRE(back.cluster_model.has_value());
  CHECK(*back.cluster_model == *w.cluster_model);
  CHECK(weights_to_json(back) == text);
}

TEST_CASE("weights validation") {
  EnsembleWeights w;
  w.kind = EnsembleKind::kBpe;
  w.weights = Matrix::from_rows({{0.5, 0.6}});
  w.prompt_ids = {"a", "b"};
  CHECK_THROWS_AS(w.validate(), Error);
  w.weights = Matrix::from_rows({{0.5, 0.5}, {0.5, 0.5}});
  CHECK_THROWS_AS(w.validate(), Error);
  CHECK_THROWS_AS(weights_from_json("{\"format\": \"other\"}"), Error);
}
