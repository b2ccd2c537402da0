#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mmb/matrix.h"

namespace mmb {

inline constexpr double kDefaultTemperature = 0.1;

// K unit-norm centroids and the temperature that softens assignments.
struct ClusterModel {
  Matrix centroids;
  double temperature = kDefaultTemperature;

  std::size_t k() const { return centroids.rows(); }
  std::size_t dim() const { return centroids.cols(); }

  // Throws kDomain unless centroids are unit-norm (1e-9) and the
  // temperature is finite and positive.
  void validate() const;

  bool operator==(const ClusterModel&) const = default;
};

struct KMeansOptions {
  std::size_t k = 1;
  std::size_t n_init = 3;
  std::size_t n_iter = 1000;
  std::uint64_t seed = 0;
  double temperature = kDefaultTemperature;
  // Restarts run on up to this many threads; the result does not depend on it.
  std::size_t threads = 1;
};

struct KMeansRun {
  ClusterModel model;
  // Sum over points of (1 - cosine to the assigned centroid).
  double within_distance = 0.0;
  // within_distance after every update step of the winning restart.
  std::vector<double> trace;
  std::vector<std::size_t> assignment;
  std::size_t iterations = 0;
  std::size_t best_restart = 0;
};

// Spherical k-means on the rows of `embeddings` (normalized internally).
// Keeps the restart with the smallest within-cluster cosine distance.
KMeansRun run_spherical_kmeans(const Matrix& embeddings, const KMeansOptions& options);

ClusterModel fit_spherical_kmeans(const Matrix& embeddings, std::size_t k, std::size_t n_init,
                                  std::size_t n_iter, std::uint64_t seed,
                                  double temperature = kDefaultTemperature);

// Cosine of the angle between the two vectors. Zero vectors are a domain error.
double similarity(std::span<const double> embedding, std::span<const double> centroid);

// softmax(similarities / temperature), max-subtracted.
std::vector<double> softmax_with_temperature(std::span<const double> similarities,
                                             double temperature);

// p(z|x) over the model's clusters.
std::vector<double> soft_assign(std::span<const double> embedding, const ClusterModel& model);

// Row j is soft_assign of embeddings row j.
Matrix soft_assign_rows(const Matrix& embeddings, const ClusterModel& model);

// Most similar centroid; lowest index wins ties.
std::size_t hard_assign(std::span<const double> embedding, const ClusterModel& model);

std::string cluster_model_to_json(const ClusterModel& model);
ClusterModel cluster_model_from_json(const std::string& text);
void save_cluster_model(const std::filesystem::path& path, const ClusterModel& model);
ClusterModel load_cluster_model(const std::filesystem::path& path);

}  // namespace mmb
