#include "mmb/synth.h"

#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "json.hpp"
#include "mmb/error.h"
#include "mmb/seed.h"

namespace mmb {

namespace {

using ordered_json = nlohmann::ordered_json;

std::string numbered(char prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c%06zu", prefix, i);
  return buf;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

class SampleStream {
 public:
  SampleStream(const SynthConfig& config, const Matrix& reliability, const Matrix& centroids,
               std::uint64_t seed)
      : config_(config), reliability_(reliability), centroids_(centroids), rng_(seed) {
    const double rho = config.latent_correlation;
    const double lambda = std::sqrt(std::abs(rho));
    loadings_.resize(config.n_prompts);
    for (std::size_t a = 0; a < config.n_prompts; ++a) {
      loadings_[a] = (rho < 0 && a % 2 == 1) ? -lambda : lambda;
    }
  }

  std::size_t draw_cluster() {
    return std::uniform_int_distribution<std::size_t>(0, config_.k_true - 1)(rng_);
  }
  int draw_label() { return std::uniform_int_distribution<int>(0, 1)(rng_); }

  std::vector<double> draw_embedding(std::size_t z) {
    const double sd = config_.spread / std::sqrt(static_cast<double>(config_.dim));
    std::vector<double> v(config_.dim);
    double norm = 0.0;
    for (std::size_t i = 0; i < config_.dim; ++i) {
      v[i] = centroids_(z, i) + sd * normal_(rng_);
      norm += v[i] * v[i];
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) return draw_embedding(z);
    for (auto& x : v) x /= norm;
    return v;
  }

  // Correlated standard-normal latents, one per prompt.
  std::vector<double> draw_latents() {
    const double g = normal_(rng_);
    std::vector<double> out(config_.n_prompts);
    for (std::size_t a = 0; a < config_.n_prompts; ++a) {
      const double l = loadings_[a];
      out[a] = l * g + std::sqrt(std::max(0.0, 1.0 - l * l)) * normal_(rng_);
    }
    return out;
  }

  double draw_confidence() {
    if (config_.confidence_sd == 0.0) return config_.confidence_mean;
    for (int attempt = 0; attempt < 10000; ++attempt) {
      const double c = config_.confidence_mean + config_.confidence_sd * normal_(rng_);
      if (c > 0.5 && c < 1.0) return c;
    }
    return config_.confidence_mean;
  }

  // Labeled sample: prompt a is correct when Phi(latent_a) < reliability(z, a).
  std::vector<JudgeRecord> labeled_records(const std::string& id, std::size_t z, int y,
                                           std::optional<Split> split) {
    const auto latents = draw_latents();
    std::vector<JudgeRecord> out;
    for (std::size_t a = 0; a < config_.n_prompts; ++a) {
      const bool correct = normal_cdf(latents[a]) < reliability_(z, a);
      const double c = draw_confidence();
      const int pick = correct ? y : 1 - y;
      out.push_back(make_record(id, a, pick, c, y, split));
    }
    return out;
  }

  // No true preference: prompt a picks side 0 when its latent is negative.
  std::vector<JudgeRecord> no_preference_records(const std::string& id) {
    const auto latents = draw_latents();
    std::vector<JudgeRecord> out;
    for (std::size_t a = 0; a < config_.n_prompts; ++a) {
      const int pick = latents[a] < 0.0 ? 0 : 1;
      const double c = draw_confidence();
      out.push_back(make_record(id, a, pick, c, std::nullopt, Split::kTest));
    }
    return out;
  }

 private:
  JudgeRecord make_record(const std::string& id, std::size_t a, int pick, double c,
                          std::optional<int> label, std::optional<Split> split) const {
    JudgeRecord r;
    r.sample_id = id;
    r.prompt_id = prompt_name(a, config_.n_prompts);
    r.class_logprobs = {std::log(pick == 0 ? c : 1.0 - c), std::log(pick == 0 ? 1.0 - c : c)};
    r.label = label;
    r.split = split;
    return r;
  }

  const SynthConfig& config_;
  const Matrix& reliability_;
  const Matrix& centroids_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::vector<double> loadings_;
};

std::vector<std::string> prompt_names(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t a = 0; a < n; ++a) out.push_back(prompt_name(a, n));
  return out;
}

std::size_t get_count(const ordered_json& obj, const char* key, std::size_t fallback) {
  if (!obj.contains(key)) return fallback;
  const auto& v = obj.at(key);
  require(v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0),
          ErrorKind::kConfig, std::string("'") + key + "' must be a non-negative integer");
  return v.get<std::size_t>();
}

double get_real(const ordered_json& obj, const char* key, double fallback) {
  if (!obj.contains(key)) return fallback;
  const auto& v = obj.at(key);
  require(v.is_number(), ErrorKind::kConfig, std::string("'") + key + "' must be a number");
  return v.get<double>();
}

}  // namespace

std::string prompt_name(std::size_t index, std::size_t n_prompts) {
  const int width = n_prompts <= 100 ? 2 : static_cast<int>(std::to_string(n_prompts - 1).size());
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%0*zu", width, index);
  return buf;
}

void SynthConfig::validate() const {
  require(k_true >= 1, ErrorKind::kDomain, "k_true must be at least 1");
  require(n_prompts >= 1, ErrorKind::kDomain, "n_prompts must be at least 1");
  require(dim >= 2, ErrorKind::kDomain, "embedding dimension must be at least 2");
  require(n_pool >= 1 && n_test >= 1, ErrorKind::kDomain, "pool and test counts must be positive");
  require(std::isfinite(spread) && spread >= 0.0, ErrorKind::kDomain, "spread must be non-negative");
  require(confidence_mean > 0.5 && confidence_mean < 1.0, ErrorKind::kDomain,
          "confidence_mean must lie in (0.5, 1)");
  require(std::isfinite(confidence_sd) && confidence_sd >= 0.0, ErrorKind::kDomain,
          "confidence_sd must be non-negative");
  require(latent_correlation >= -1.0 && latent_correlation <= 1.0, ErrorKind::kDomain,
          "latent_correlation must lie in [-1, 1]");
  if (!reliability.empty()) {
    require(reliability.rows() == k_true && reliability.cols() == n_prompts, ErrorKind::kDomain,
            "reliability must be k_true x n_prompts");
    for (double r : reliability.flat()) {
      require(r > 0.0 && r <= 1.0, ErrorKind::kDomain, "reliability entries must lie in (0, 1]");
    }
  }
}

Matrix default_reliability(std::size_t k_true, std::size_t n_prompts, std::uint64_t structure_seed) {
  Matrix rel(k_true, n_prompts, 0.55);
  std::mt19937_64 rng(derive_seed(structure_seed, {hash_tag("reliability")}));
  std::uniform_real_distribution<double> filler(0.55, 0.75);
  for (std::size_t a = 0; a < n_prompts; ++a) {
    if (a < k_true) {
      rel(a, a) = 0.95;
    } else {
      for (std::size_t z = 0; z < k_true; ++z) rel(z, a) = filler(rng);
    }
  }
  return rel;
}

Matrix effective_reliability(const SynthConfig& config) {
  return config.reliability.empty()
             ? default_reliability(config.k_true, config.n_prompts, config.structure_seed)
             : config.reliability;
}

Matrix synth_centroids(const SynthConfig& config) {
  std::mt19937_64 rng(derive_seed(config.structure_seed, {hash_tag("centroids")}));
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix c(config.k_true, config.dim);
  for (std::size_t z = 0; z < config.k_true; ++z) {
    double norm = 0.0;
    for (std::size_t i = 0; i < config.dim; ++i) {
      c(z, i) = normal(rng);
      norm += c(z, i) * c(z, i);
    }
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < config.dim; ++i) c(z, i) /= norm;
  }
  return c;
}

std::pair<DatasetBundle, GroundTruth> generate_benchmark(const SynthConfig& config) {
  config.validate();
  GroundTruth truth;
  truth.reliability = effective_reliability(config);
  truth.centroids = synth_centroids(config);
  std::vector<JudgeRecord> records;
  EmbeddingTable embeddings;

  SampleStream pool(config, truth.reliability, truth.centroids,
                    derive_seed(config.seed, {hash_tag("pool")}));
  for (std::size_t i = 0; i < config.n_pool; ++i) {
    const auto id = numbered('s', i);
    const auto z = pool.draw_cluster();
    const int y = pool.draw_label();
    embeddings.add(id, pool.draw_embedding(z));
    for (auto& r : pool.labeled_records(id, z, y, std::nullopt)) records.push_back(std::move(r));
    truth.sample_ids.push_back(id);
    truth.cluster.push_back(z);
    truth.label.push_back(y);
  }

  SampleStream unlabeled(config, truth.reliability, truth.centroids,
                         derive_seed(config.seed, {hash_tag("unlabeled")}));
  for (std::size_t i = 0; i < config.n_unlabeled; ++i) {
    const auto id = numbered('u', i);
    const auto z = unlabeled.draw_cluster();
    embeddings.add(id, unlabeled.draw_embedding(z));
    truth.sample_ids.push_back(id);
    truth.cluster.push_back(z);
    truth.label.push_back(std::nullopt);
  }

  const bool labeled_test = config.test_scenario == TestScenario::kLabeled;
  SampleStream test(config, truth.reliability, truth.centroids,
                    derive_seed(config.seed, {hash_tag(labeled_test ? "test" : "no_preference")}));
  for (std::size_t i = 0; i < config.n_test; ++i) {
    const auto id = numbered('t', i);
    const auto z = test.draw_cluster();
    std::optional<int> y;
    if (labeled_test) y = test.draw_label();
    embeddings.add(id, test.draw_embedding(z));
    auto recs = labeled_test ? test.labeled_records(id, z, *y, Split::kTest) : test.no_preference_records(id);
    for (auto& r : recs) records.push_back(std::move(r));
    truth.sample_ids.push_back(id);
    truth.cluster.push_back(z);
    truth.label.push_back(y);
  }

  DatasetBundle bundle(std::move(records), std::move(embeddings), prompt_names(config.n_prompts));
  return {std::move(bundle), std::move(truth)};
}

DatasetBundle generate_no_preference_pairs(const SynthConfig& config) {
  config.validate();
  const Matrix reliability = effective_reliability(config);
  const Matrix centroids = synth_centroids(config);
  SampleStream stream(config, reliability, centroids,
                      derive_seed(config.seed, {hash_tag("no_preference")}));
  std::vector<JudgeRecord> records;
  EmbeddingTable embeddings;
  for (std::size_t i = 0; i < config.n_test; ++i) {
    const auto id = numbered('t', i);
    const auto z = stream.draw_cluster();
    embeddings.add(id, stream.draw_embedding(z));
    for (auto& r : stream.no_preference_records(id)) records.push_back(std::move(r));
  }
  return DatasetBundle(std::move(records), std::move(embeddings), prompt_names(config.n_prompts));
}

std::string synth_config_to_json(const SynthConfig& config) {
  ordered_json j;
  j["k_true"] = config.k_true;
  j["n_prompts"] = config.n_prompts;
  j["dim"] = config.dim;
  if (config.reliability.empty()) {
    j["reliability"] = nullptr;
  } else {
    j["reliability"] = config.reliability.to_rows();
  }
  j["spread"] = config.spread;
  j["confidence_mean"] = config.confidence_mean;
  j["confidence_sd"] = config.confidence_sd;
  j["latent_correlation"] = config.latent_correlation;
  j["n_pool"] = config.n_pool;
  j["n_unlabeled"] = config.n_unlabeled;
  j["n_test"] = config.n_test;
  j["test_scenario"] = config.test_scenario == TestScenario::kLabeled ? "labeled" : "no_preference";
  j["seed"] = config.seed;
  j["structure_seed"] = config.structure_seed;
  return j.dump(2) + "\n";
}

SynthConfig synth_config_from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kConfig, std::string("synth config is not valid JSON: ") + e.what());
  }
  require(j.is_object(), ErrorKind::kConfig, "synth config must be a JSON object");
  static const char* const kKeys[] = {"k_true", "n_prompts", "dim", "reliability", "spread",
                                      "confidence_mean", "confidence_sd", "latent_correlation",
                                      "n_pool", "n_unlabeled", "n_test", "test_scenario", "seed",
                                      "structure_seed"};
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (const char* k : kKeys) known = known || key == k;
    require(known, ErrorKind::kConfig, "unknown synth config key '" + key + "'");
  }
  SynthConfig c;
  c.k_true = get_count(j, "k_true", c.k_true);
  c.n_prompts = get_count(j, "n_prompts", c.n_prompts);
  c.dim = get_count(j, "dim", c.dim);
  if (j.contains("reliability") && !j["reliability"].is_null()) {
    try {
      c.reliability = Matrix::from_rows(j["reliability"].get<std::vector<std::vector<double>>>());
    } catch (const nlohmann::json::exception&) {
      fail(ErrorKind::kConfig, "reliability must be a matrix of numbers");
    }
  }
  c.spread = get_real(j, "spread", c.spread);
  c.confidence_mean = get_real(j, "confidence_mean", c.confidence_mean);
  c.confidence_sd = get_real(j, "confidence_sd", c.confidence_sd);
  c.latent_correlation = get_real(j, "latent_correlation", c.latent_correlation);
  c.n_pool = get_count(j, "n_pool", c.n_pool);
  c.n_unlabeled = get_count(j, "n_unlabeled", c.n_unlabeled);
  c.n_test = get_count(j, "n_test", c.n_test);
  if (j.contains("test_scenario")) {
    const auto s = j["test_scenario"].is_string() ? j["test_scenario"].get<std::string>() : "";
    if (s == "labeled") {
      c.test_scenario = TestScenario::kLabeled;
    } else if (s == "no_preference") {
      c.test_scenario = TestScenario::kNoPreference;
    } else {
      fail(ErrorKind::kConfig, "test_scenario must be 'labeled' or 'no_preference'");
    }
  }
  c.seed = get_count(j, "seed", c.seed);
  c.structure_seed = get_count(j, "structure_seed", c.structure_seed);
  c.validate();
  return c;
}

std::string ground_truth_to_json(const GroundTruth& truth) {
  ordered_json j;
  j["format"] = "mmb-synth-ground-truth";
  j["version"] = 1;
  j["reliability"] = truth.reliability.to_rows();
  j["centroids"] = truth.centroids.to_rows();
  ordered_json samples = ordered_json::array();
  for (std::size_t i = 0; i < truth.sample_ids.size(); ++i) {
    ordered_json s;
    s["sample_id"] = truth.sample_ids[i];
    s["cluster"] = truth.cluster[i];
    if (truth.label[i]) {
      s["label"] = *truth.label[i];
    } else {
      s["label"] = nullptr;
    }
    samples.push_back(std::move(s));
  }
  j["samples"] = std::move(samples);
  return j.dump(1) + "\n";
}

GroundTruth ground_truth_from_json(const std::string& text) {
  GroundTruth t;
  try {
    const auto j = ordered_json::parse(text);
    require(j.value("format", "") == "mmb-synth-ground-truth", ErrorKind::kFormat,
            "not a ground-truth file");
    t.reliability = Matrix::from_rows(j.at("reliability").get<std::vector<std::vector<double>>>());
    t.centroids = Matrix::from_rows(j.at("centroids").get<std::vector<std::vector<double>>>());
    for (const auto& s : j.at("samples")) {
      t.sample_ids.push_back(s.at("sample_id").get<std::string>());
      t.cluster.push_back(s.at("cluster").get<std::size_t>());
      t.label.push_back(s.at("label").is_null() ? std::nullopt
                                                : std::optional<int>(s.at("label").get<int>()));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed ground-truth file: ") + e.what());
  }
  return t;
}

void write_synth_outputs(const std::filesystem::path& dir, const SynthConfig& config,
                         const DatasetBundle& bundle, const GroundTruth& truth) {
  std::filesystem::create_directories(dir);
  std::ostringstream records;
  write_judge_records(records, bundle.records());
  write_file_atomic(dir / "records.jsonl", records.str());
  std::ostringstream emb;
  write_embeddings_csv(emb, bundle.embeddings());
  write_file_atomic(dir / "embeddings.csv", emb.str());
  write_file_atomic(dir / "ground_truth.json", ground_truth_to_json(truth));
  write_file_atomic(dir / "synth_config.json", synth_config_to_json(config));
}

}  // namespace mmb
