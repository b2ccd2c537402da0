#include "mmb/clustering.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "json.hpp"
#include "mmb/error.h"
#include "mmb/ingest.h"
#include "mmb/parallel.h"
#include "mmb/seed.h"

namespace mmb {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

Matrix normalized_rows(const Matrix& x) {
  Matrix out = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double n = norm(x.row(r));
    require(n > 0.0 && std::isfinite(n), ErrorKind::kDomain,
            "row " + std::to_string(r) + " is a zero or non-finite vector");
    for (double& v : out.row(r)) v /= n;
  }
  return out;
}

std::size_t argmax_first(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

struct SingleRun {
  Matrix centroids;
  std::vector<std::size_t> assignment;
  std::vector<double> trace;
  std::size_t iterations = 0;
};

SingleRun lloyd(const Matrix& x, std::size_t k, std::size_t n_iter, std::uint64_t seed) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();

  // Initial centroids: k distinct points (partial Fisher-Yates).
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  SingleRun run;
  run.centroids = Matrix(k, d);
  for (std::size_t c = 0; c < k; ++c) {
    std::copy_n(x.row(order[c]).begin(), d, run.centroids.row(c).begin());
  }

  std::vector<std::size_t> assign(n, SIZE_MAX);
  std::vector<double> sim_to_assigned(n);
  std::vector<double> sims(k);
  for (std::size_t it = 0; it < std::max<std::size_t>(n_iter, 1); ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < k; ++c) sims[c] = dot(x.row(i), run.centroids.row(c));
      const std::size_t best = argmax_first(sims);
      changed = changed || best != assign[i];
      assign[i] = best;
      sim_to_assigned[i] = sims[best];
    }

    // Empty clusters take the point farthest from its own centroid, drawn
    // from clusters that can spare one.
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t a : assign) ++counts[a];
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      std::size_t far = SIZE_MAX;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[assign[i]] < 2) continue;
        if (far == SIZE_MAX || sim_to_assigned[i] < sim_to_assigned[far]) far = i;
      }
      --counts[assign[far]];
      assign[far] = c;
      counts[c] = 1;
      sim_to_assigned[far] = 1.0;
      std::copy_n(x.row(far).begin(), d, run.centroids.row(c).begin());
      changed = true;
    }

    Matrix sums(k, d);
    for (std::size_t i = 0; i < n; ++i) {
      auto dst = sums.row(assign[i]);
      auto src = x.row(i);
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      const double len = norm(sums.row(c));
      // Members that cancel exactly leave the centroid where it was.
      if (len <= 1e-300) continue;
      auto dst = run.centroids.row(c);
      auto src = sums.row(c);
      for (std::size_t j = 0; j < d; ++j) dst[j] = src[j] / len;
    }

    double distance = 0.0;
    for (std::size_t i = 0; i < n; ++i) distance += 1.0 - dot(x.row(i), run.centroids.row(assign[i]));
    run.trace.push_back(distance);
    run.iterations = it + 1;
    if (!changed) break;
  }
  run.assignment = std::move(assign);
  return run;
}

}  // namespace

void ClusterModel::validate() const {
  require(k() >= 1, ErrorKind::kDomain, "cluster model has no centroids");
  require(std::isfinite(temperature) && temperature > 0.0, ErrorKind::kDomain,
          "temperature must be finite and positive");
  for (std::size_t c = 0; c < k(); ++c) {
    require(std::abs(norm(centroids.row(c)) - 1.0) <= 1e-9, ErrorKind::kDomain,
            "centroid " + std::to_string(c) + " is not unit-norm");
  }
}

KMeansRun run_spherical_kmeans(const Matrix& embeddings, const KMeansOptions& options) {
  require(options.k >= 1, ErrorKind::kDomain, "k must be at least 1");
  require(options.n_init >= 1, ErrorKind::kDomain, "n_init must be at least 1");
  require(embeddings.rows() >= options.k, ErrorKind::kCapacity,
          "k = " + std::to_string(options.k) + " exceeds the " + std::to_string(embeddings.rows()) +
              " embeddings");
  require(std::isfinite(options.temperature) && options.temperature > 0.0, ErrorKind::kDomain,
          "temperature must be finite and positive");
  const Matrix x = normalized_rows(embeddings);

  std::vector<SingleRun> runs(options.n_init);
  auto work = [&](std::size_t r) {
    runs[r] = lloyd(x, options.k, options.n_iter, derive_seed(options.seed, {r}));
  };
  parallel_for(options.n_init, options.threads, work);

  std::size_t best = 0;
  for (std::size_t r = 1; r < runs.size(); ++r) {
    if (runs[r].trace.back() < runs[best].trace.back()) best = r;
  }
  KMeansRun out;
  out.model.centroids = std::move(runs[best].centroids);
  out.model.temperature = options.temperature;
  out.within_distance = runs[best].trace.back();
  out.trace = std::move(runs[best].trace);
  out.assignment = std::move(runs[best].assignment);
  out.iterations = runs[best].iterations;
  out.best_restart = best;
  return out;
}

ClusterModel fit_spherical_kmeans(const Matrix& embeddings, std::size_t k, std::size_t n_init,
                                  std::size_t n_iter, std::uint64_t seed, double temperature) {
  KMeansOptions options;
  options.k = k;
  options.n_init = n_init;
  options.n_iter = n_iter;
  options.seed = seed;
  options.temperature = temperature;
  return run_spherical_kmeans(embeddings, options).model;
}

double similarity(std::span<const double> embedding, std::span<const double> centroid) {
  require(embedding.size() == centroid.size(), ErrorKind::kShape, "dimension mismatch");
  const double ne = norm(embedding);
  const double nc = norm(centroid);
  require(ne > 0.0 && nc > 0.0, ErrorKind::kDomain, "similarity of a zero vector");
  return std::clamp(dot(embedding, centroid) / (ne * nc), -1.0, 1.0);
}

std::vector<double> softmax_with_temperature(std::span<const double> similarities,
                                             double temperature) {
  require(std::isfinite(temperature) && temperature > 0.0, ErrorKind::kDomain,
          "temperature must be finite and positive");
  require(!similarities.empty(), ErrorKind::kDomain, "no similarities");
  const double top = *std::max_element(similarities.begin(), similarities.end());
  std::vector<double> p(similarities.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp((similarities[i] - top) / temperature);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

std::vector<double> soft_assign(std::span<const double> embedding, const ClusterModel& model) {
  require(embedding.size() == model.dim(), ErrorKind::kShape, "embedding dimension mismatch");
  std::vector<double> sims(model.k());
  for (std::size_t c = 0; c < model.k(); ++c) sims[c] = similarity(embedding, model.centroids.row(c));
  return softmax_with_temperature(sims, model.temperature);
}

Matrix soft_assign_rows(const Matrix& embeddings, const ClusterModel& model) {
  Matrix out(embeddings.rows(), model.k());
  for (std::size_t r = 0; r < embeddings.rows(); ++r) {
    auto p = soft_assign(embeddings.row(r), model);
    std::copy(p.begin(), p.end(), out.row(r).begin());
  }
  return out;
}

std::size_t hard_assign(std::span<const double> embedding, const ClusterModel& model) {
  std::vector<double> sims(model.k());
  for (std::size_t c = 0; c < model.k(); ++c) sims[c] = similarity(embedding, model.centroids.row(c));
  return argmax_first(sims);
}

std::string cluster_model_to_json(const ClusterModel& model) {
  nlohmann::ordered_json obj;
  obj["format"] = "mmb-cluster-model";
  obj["version"] = 1;
  obj["k"] = model.k();
  obj["dim"] = model.dim();
  obj["temperature"] = model.temperature;
  obj["centroids"] = model.centroids.to_rows();
  return obj.dump(2);
}

ClusterModel cluster_model_from_json(const std::string& text) {
  ClusterModel model;
  try {
    auto obj = nlohmann::ordered_json::parse(text);
    require(obj.value("format", "") == "mmb-cluster-model", ErrorKind::kFormat,
            "not a cluster model document");
    model.temperature = obj.at("temperature").get<double>();
    model.centroids = Matrix::from_rows(obj.at("centroids").get<std::vector<std::vector<double>>>());
    require(obj.at("k").get<std::size_t>() == model.k(), ErrorKind::kFormat, "k disagrees with centroids");
    require(obj.at("dim").get<std::size_t>() == model.dim(), ErrorKind::kFormat,
            "dim disagrees with centroids");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("cluster model: ") + e.what());
  }
  model.validate();
  return model;
}

void save_cluster_model(const std::filesystem::path& path, const ClusterModel& model) {
  write_file_atomic(path, cluster_model_to_json(model) + "\n");
}

ClusterModel load_cluster_model(const std::filesystem::path& path) {
  return cluster_model_from_json(read_file(path));
}

}  // namespace mmb
