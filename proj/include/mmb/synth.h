#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmb/ingest.h"
#include "mmb/matrix.h"

namespace mmb {

enum class TestScenario { kLabeled, kNoPreference };

struct SynthConfig {
  std::size_t k_true = 2;
  std::size_t n_prompts = 10;
  std::size_t dim = 16;
  // k_true x n_prompts probabilities of the correct argmax. Empty selects
  // default_reliability().
  Matrix reliability;
  // Norm scale of the Gaussian offset around each centroid before projecting
  // back to the sphere (per-component sd = spread / sqrt(dim)).
  double spread = 0.6;
  // Emitted confidence ~ Normal(mean, sd) truncated to (0.5, 1).
  double confidence_mean = 0.95;
  double confidence_sd = 0.05;
  // Correlation between prompts' latent correctness draws on a sample.
  // Negative values alternate the loading sign across prompts.
  double latent_correlation = 0.64;
  std::size_t n_pool = 1000;       // labeled, prompt-complete
  std::size_t n_unlabeled = 0;     // embeddings only
  std::size_t n_test = 2000;
  TestScenario test_scenario = TestScenario::kLabeled;
  std::uint64_t seed = 0;            // sampling
  std::uint64_t structure_seed = 7;  // centroids and filler reliabilities

  void validate() const;
};

// Prompt a < k_true is reliable (0.95) on cluster a and weak (0.55)
// elsewhere; the remaining prompts draw reliabilities uniformly from
// [0.55, 0.75] using structure_seed.
Matrix default_reliability(std::size_t k_true, std::size_t n_prompts, std::uint64_t structure_seed);

// Resolved reliability of a config (explicit or default).
Matrix effective_reliability(const SynthConfig& config);

// Unit-norm latent centroids derived from structure_seed.
Matrix synth_centroids(const SynthConfig& config);

struct GroundTruth {
  std::vector<std::string> sample_ids;
  std::vector<std::size_t> cluster;
  std::vector<std::optional<int>> label;
  Matrix reliability;
  Matrix centroids;
};

std::string prompt_name(std::size_t index, std::size_t n_prompts);

// Pool samples are labeled; test samples carry split "test" (and no label in
// the no-preference scenario). Ground truth covers every emitted sample.
std::pair<DatasetBundle, GroundTruth> generate_benchmark(const SynthConfig& config);

// Test-split pairs with no true preference; each prompt prefers either side
// with probability one half.
DatasetBundle generate_no_preference_pairs(const SynthConfig& config);

std::string synth_config_to_json(const SynthConfig& config);
SynthConfig synth_config_from_json(const std::string& text);
std::string ground_truth_to_json(const GroundTruth& truth);
GroundTruth ground_truth_from_json(const std::string& text);

// Writes records.jsonl, embeddings.csv, ground_truth.json and
// synth_config.json into dir.
void write_synth_outputs(const std::filesystem::path& dir, const SynthConfig& config,
                         const DatasetBundle& bundle, const GroundTruth& truth);

}  // namespace mmb
