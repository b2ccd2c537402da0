#include "mmb/pipeline.h"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_set>

#include "json.hpp"
#include "mmb/clustering.h"
#include "mmb/error.h"
#include "mmb/parallel.h"
#include "mmb/seed.h"

namespace mmb {

namespace {

using ordered_json = nlohmann::ordered_json;

void check_keys(const ordered_json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  require(j.is_object(), ErrorKind::kConfig, where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (const char* k : allowed) known = known || key == k;
    require(known, ErrorKind::kConfig, "unknown key '" + key + "' in " + where);
  }
}

std::size_t get_count(const ordered_json& j, const char* key, std::size_t fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j[key];
  require(v.is_number_unsigned(), ErrorKind::kConfig,
          std::string("'") + key + "' must be a nonnegative integer");
  return v.get<std::size_t>();
}

double get_real(const ordered_json& j, const char* key, double fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j[key];
  require(v.is_number(), ErrorKind::kConfig, std::string("'") + key + "' must be a number");
  return v.get<double>();
}

std::string get_string(const ordered_json& j, const char* key, const std::string& fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j[key];
  require(v.is_string(), ErrorKind::kConfig, std::string("'") + key + "' must be a string");
  return v.get<std::string>();
}

std::vector<std::size_t> get_counts(const ordered_json& j, const char* key) {
  require(j.contains(key) && j[key].is_array(), ErrorKind::kConfig,
          std::string("'") + key + "' must be a list of counts");
  std::vector<std::size_t> out;
  for (const auto& v : j[key]) {
    require(v.is_number_unsigned(), ErrorKind::kConfig,
            std::string("'") + key + "' entries must be nonnegative integers");
    out.push_back(v.get<std::size_t>());
  }
  return out;
}

bool safe_name(const std::string& s) {
  if (s.empty()) return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
  });
}

const char* f1_name(F1Average a) { return a == F1Average::kBinary ? "binary" : "macro"; }

Error with_context(const Error& e, const std::string& context) {
  return Error(e.kind(), context + ": " + e.detail());
}

Matrix embedding_rows(const DatasetBundle& bundle, std::span<const std::string> ids) {
  const auto& table = bundle.embeddings();
  Matrix m(ids.size(), table.dim());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(table.contains(ids[i]), ErrorKind::kIntegrity, "sample '" + ids[i] + "' has no embedding");
    auto e = table.at(ids[i]);
    std::copy(e.begin(), e.end(), m.row(i).begin());
  }
  return m;
}

// Minimal CSV: fields never contain newlines; commas and quotes are quoted.
std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else if (c != '\r') {
      out.back() += c;
    }
  }
  return out;
}

// Data lines of a CSV with the given header; '#' lines are skipped.
std::vector<std::vector<std::string>> csv_rows(const std::string& text, const std::string& header,
                                               const std::string& what) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::vector<std::string>> rows;
  const std::size_t width = csv_split(header).size();
  bool seen_header = false;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    if (!seen_header) {
      require(line == header, ErrorKind::kFormat, what + ": expected header '" + header + "'");
      seen_header = true;
      continue;
    }
    auto fields = csv_split(line);
    require(fields.size() == width, ErrorKind::kFormat,
            what + " line " + std::to_string(line_no) + ": expected " + std::to_string(width) + " fields");
    rows.push_back(std::move(fields));
  }
  require(seen_header, ErrorKind::kFormat, what + ": missing header");
  return rows;
}

double parse_real(const std::string& s, const std::string& what) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  require(ec == std::errc() && ptr == end, ErrorKind::kFormat, what + ": bad number '" + s + "'");
  return v;
}

std::size_t parse_count(const std::string& s, const std::string& what) {
  std::size_t v = 0;
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  require(ec == std::errc() && ptr == end, ErrorKind::kFormat, what + ": bad count '" + s + "'");
  return v;
}

bool parse_bool(const std::string& s, const std::string& what) {
  require(s == "true" || s == "false", ErrorKind::kFormat, what + ": bad flag '" + s + "'");
  return s == "true";
}

const char* bool_text(bool b) { return b ? "true" : "false"; }

Interval mean_band(std::span<const double> values, const StatsSettings& stats, std::uint64_t seed) {
  if (values.size() < 2) return {values.front(), values.front()};
  return bootstrap_mean_ci(values, stats.n_boot, stats.ci_level, seed);
}

std::string read_required(const std::filesystem::path& path, const std::string& what) {
  require(std::filesystem::exists(path), ErrorKind::kIntegrity,
          "missing " + what + " '" + path.string() + "'; run the previous stage first");
  return read_file(path);
}

std::filesystem::path unit_dir(const RunConfig& config, const CellSpec& cell, const UnitSpec& unit) {
  return config.output / "weights" / cell.id() / unit.id();
}

std::string join_lines(std::span<const std::string> items) {
  std::string out;
  for (const auto& s : items) out += s + "\n";
  return out;
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

}  // namespace

// ---- configuration ----

std::filesystem::path DataSource::resolve(const std::string& path) const {
  std::filesystem::path p(path);
  return p.is_absolute() ? p : base_dir / p;
}

void RunConfig::validate() const {
  const int sources = !data.records.empty() + !data.bundle.empty() + data.synth.has_value();
  require(sources == 1, ErrorKind::kConfig,
          "data must name exactly one of 'records', 'bundle' or 'synth'");
  require(data.records.empty() || data.bundle.empty(), ErrorKind::kConfig, "records and bundle both set");
  require(data.embeddings.empty() || !data.records.empty(), ErrorKind::kConfig,
          "'embeddings' goes with 'records'");
  require(!methods.empty(), ErrorKind::kConfig, "no methods configured");
  std::set<std::string> names;
  for (const auto& m : methods) {
    require(safe_name(m.name), ErrorKind::kConfig,
            "method name '" + m.name + "' must be letters, digits, '_', '-' or '.'");
    require(names.insert(m.name).second, ErrorKind::kConfig, "duplicate method name '" + m.name + "'");
    require(m.k >= 1, ErrorKind::kConfig, "method '" + m.name + "': k must be at least 1");
    require(m.kind == EnsembleKind::kMmb || m.k == 1, ErrorKind::kConfig,
            "method '" + m.name + "': k applies to mmb only");
    require(std::isfinite(m.tau) && m.tau > 0.0, ErrorKind::kConfig,
            "method '" + m.name + "': tau must be positive");
  }
  require(!prompt_counts.empty() && !validation_sizes.empty(), ErrorKind::kConfig, "grid is empty");
  for (auto n : prompt_counts) require(n >= 1, ErrorKind::kConfig, "prompt counts must be positive");
  require(seeds.train >= 1 && seeds.data >= 1 && seeds.cluster >= 1, ErrorKind::kConfig,
          "every seed family needs at least one seed");
  require(clustering.n_init >= 1 && clustering.n_iter >= 1 && clustering.support_per_cluster >= 1,
          ErrorKind::kConfig, "clustering settings must be positive");
  require(metrics.n_bins >= 1 && metrics.coverage_points >= 1, ErrorKind::kConfig,
          "n_bins and coverage_points must be positive");
  require(metrics.positive_class >= 0, ErrorKind::kConfig, "positive_class must be nonnegative");
  require(stats.alpha > 0.0 && stats.alpha < 1.0, ErrorKind::kConfig, "alpha must lie in (0, 1)");
  require(stats.n_perm >= 1 && stats.n_boot >= 1, ErrorKind::kConfig, "n_perm and n_boot must be positive");
  require(stats.ci_level > 0.0 && stats.ci_level < 100.0, ErrorKind::kConfig,
          "ci_level is a percentage in (0, 100)");
  if (stats.baseline) {
    require(names.contains(*stats.baseline), ErrorKind::kConfig,
            "baseline '" + *stats.baseline + "' is not a configured method");
  }
}

const MethodSpec& RunConfig::method(const std::string& name) const {
  for (const auto& m : methods) {
    if (m.name == name) return m;
  }
  fail(ErrorKind::kConfig, "unknown method '" + name + "'");
}

RunConfig run_config_from_json(const std::string& text, const std::filesystem::path& base_dir) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kConfig, std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, {"data", "output", "master_seed", "methods", "grid", "clustering", "metrics", "stats"},
             "config");
  RunConfig c;
  c.data.base_dir = base_dir;

  require(j.contains("data"), ErrorKind::kConfig, "config needs a 'data' section");
  const auto& data = j["data"];
  check_keys(data, {"records", "embeddings", "bundle", "synth"}, "'data'");
  c.data.records = get_string(data, "records", "");
  c.data.embeddings = get_string(data, "embeddings", "");
  c.data.bundle = get_string(data, "bundle", "");
  if (data.contains("synth")) c.data.synth = synth_config_from_json(data["synth"].dump());

  c.output = get_string(j, "output", "out");
  c.master_seed = get_count(j, "master_seed", 0);
  if (!c.output.is_absolute()) c.output = base_dir / c.output;

  require(j.contains("methods") && j["methods"].is_array(), ErrorKind::kConfig,
          "'methods' must be a list");
  for (const auto& m : j["methods"]) {
    check_keys(m, {"name", "kind", "k", "tau"}, "method");
    MethodSpec spec;
    try {
      spec.kind = parse_ensemble_kind(get_string(m, "kind", ""));
    } catch (const Error& e) {
      fail(ErrorKind::kConfig, e.detail());
    }
    spec.name = get_string(m, "name", std::string(to_string(spec.kind)));
    spec.k = get_count(m, "k", 1);
    spec.tau = get_real(m, "tau", kDefaultTemperature);
    c.methods.push_back(spec);
  }

  require(j.contains("grid"), ErrorKind::kConfig, "config needs a 'grid' section");
  const auto& grid = j["grid"];
  check_keys(grid, {"prompt_counts", "validation_sizes", "seeds"}, "'grid'");
  c.prompt_counts = get_counts(grid, "prompt_counts");
  c.validation_sizes = get_counts(grid, "validation_sizes");
  if (grid.contains("seeds")) {
    const auto& s = grid["seeds"];
    check_keys(s, {"train", "data", "cluster"}, "'grid.seeds'");
    c.seeds.train = get_count(s, "train", 1);
    c.seeds.data = get_count(s, "data", 1);
    c.seeds.cluster = get_count(s, "cluster", 1);
  }

  if (j.contains("clustering")) {
    const auto& s = j["clustering"];
    check_keys(s, {"n_init", "n_iter", "support_per_cluster"}, "'clustering'");
    c.clustering.n_init = get_count(s, "n_init", c.clustering.n_init);
    c.clustering.n_iter = get_count(s, "n_iter", c.clustering.n_iter);
    c.clustering.support_per_cluster = get_count(s, "support_per_cluster", c.clustering.support_per_cluster);
  }
  if (j.contains("metrics")) {
    const auto& s = j["metrics"];
    check_keys(s, {"n_bins", "positive_class", "f1_average", "coverage_points"}, "'metrics'");
    c.metrics.n_bins = get_count(s, "n_bins", c.metrics.n_bins);
    c.metrics.positive_class = static_cast<int>(get_count(s, "positive_class", 0));
    const auto avg = get_string(s, "f1_average", "binary");
    require(avg == "binary" || avg == "macro", ErrorKind::kConfig, "f1_average must be binary or macro");
    c.metrics.f1_average = avg == "binary" ? F1Average::kBinary : F1Average::kMacro;
    c.metrics.coverage_points = get_count(s, "coverage_points", c.metrics.coverage_points);
  }
  if (j.contains("stats")) {
    const auto& s = j["stats"];
    check_keys(s, {"alpha", "n_perm", "n_boot", "ci_level", "mode", "baseline"}, "'stats'");
    c.stats.alpha = get_real(s, "alpha", c.stats.alpha);
    c.stats.n_perm = get_count(s, "n_perm", c.stats.n_perm);
    c.stats.n_boot = get_count(s, "n_boot", c.stats.n_boot);
    c.stats.ci_level = get_real(s, "ci_level", c.stats.ci_level);
    try {
      c.stats.mode = parse_permutation_mode(get_string(s, "mode", "auto"));
    } catch (const Error& e) {
      fail(ErrorKind::kConfig, e.detail());
    }
    if (s.contains("baseline") && !s["baseline"].is_null()) c.stats.baseline = get_string(s, "baseline", "");
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorKind::kPath, "config '" + path.string() + "' not found");
  return run_config_from_json(read_file(path), path.parent_path());
}

std::string run_config_to_json(const RunConfig& c) {
  ordered_json j;
  ordered_json data = ordered_json::object();
  if (!c.data.records.empty()) data["records"] = c.data.records;
  if (!c.data.embeddings.empty()) data["embeddings"] = c.data.embeddings;
  if (!c.data.bundle.empty()) data["bundle"] = c.data.bundle;
  if (c.data.synth) data["synth"] = ordered_json::parse(synth_config_to_json(*c.data.synth));
  j["data"] = std::move(data);
  j["master_seed"] = c.master_seed;
  ordered_json methods = ordered_json::array();
  for (const auto& m : c.methods) {
    ordered_json o;
    o["name"] = m.name;
    o["kind"] = std::string(to_string(m.kind));
    if (m.kind == EnsembleKind::kMmb) {
      o["k"] = m.k;
      o["tau"] = m.tau;
    }
    methods.push_back(std::move(o));
  }
  j["methods"] = std::move(methods);
  j["grid"]["prompt_counts"] = c.prompt_counts;
  j["grid"]["validation_sizes"] = c.validation_sizes;
  j["grid"]["seeds"]["train"] = c.seeds.train;
  j["grid"]["seeds"]["data"] = c.seeds.data;
  j["grid"]["seeds"]["cluster"] = c.seeds.cluster;
  j["clustering"]["n_init"] = c.clustering.n_init;
  j["clustering"]["n_iter"] = c.clustering.n_iter;
  j["clustering"]["support_per_cluster"] = c.clustering.support_per_cluster;
  j["metrics"]["n_bins"] = c.metrics.n_bins;
  j["metrics"]["positive_class"] = c.metrics.positive_class;
  j["metrics"]["f1_average"] = f1_name(c.metrics.f1_average);
  j["metrics"]["coverage_points"] = c.metrics.coverage_points;
  j["stats"]["alpha"] = c.stats.alpha;
  j["stats"]["n_perm"] = c.stats.n_perm;
  j["stats"]["n_boot"] = c.stats.n_boot;
  j["stats"]["ci_level"] = c.stats.ci_level;
  j["stats"]["mode"] = to_string(c.stats.mode);
  j["stats"]["baseline"] = c.stats.baseline ? ordered_json(*c.stats.baseline) : ordered_json(nullptr);
  return j.dump(2) + "\n";
}

RunData load_run_data(const RunConfig& config) {
  RunData out;
  const auto& d = config.data;
  if (d.synth) {
    out.bundle = generate_benchmark(*d.synth).first;
  } else if (!d.bundle.empty()) {
    const auto dir = d.resolve(d.bundle);
    require(std::filesystem::is_directory(dir), ErrorKind::kPath, "bundle directory '" + dir.string() + "' not found");
    out.bundle = load_bundle(dir);
  } else {
    const auto records_path = d.resolve(d.records);
    require(std::filesystem::exists(records_path), ErrorKind::kPath,
            "records file '" + records_path.string() + "' not found");
    EmbeddingTable embeddings;
    if (!d.embeddings.empty()) {
      const auto emb_path = d.resolve(d.embeddings);
      if (std::filesystem::exists(emb_path)) {
        embeddings = load_embeddings(emb_path);
      } else {
        out.missing_embeddings = emb_path;
      }
    }
    out.bundle = DatasetBundle(load_judge_records(records_path), std::move(embeddings));
  }
  return out;
}

// ---- grid ----

std::string CellSpec::id() const { return "p" + std::to_string(n_prompts) + "_v" + std::to_string(n_val); }

std::string UnitSpec::id() const {
  return "t" + std::to_string(train) + "_d" + std::to_string(data) + "_c" + std::to_string(cluster);
}

std::vector<CellSpec> grid_cells(const RunConfig& config) {
  std::vector<CellSpec> cells;
  for (auto p : config.prompt_counts) {
    for (auto v : config.validation_sizes) cells.push_back({p, v});
  }
  return cells;
}

std::vector<UnitSpec> grid_units(const RunConfig& config) {
  std::vector<UnitSpec> units;
  for (std::size_t t = 0; t < config.seeds.train; ++t) {
    for (std::size_t d = 0; d < config.seeds.data; ++d) {
      for (std::size_t c = 0; c < config.seeds.cluster; ++c) units.push_back({t, d, c});
    }
  }
  return units;
}

std::uint64_t train_seed(std::uint64_t master, const UnitSpec& unit) {
  return derive_seed(master, {hash_tag("train"), unit.train});
}

std::uint64_t data_seed(std::uint64_t master, const UnitSpec& unit) {
  return derive_seed(master, {hash_tag("data"), unit.data});
}

std::uint64_t support_seed(std::uint64_t master, const UnitSpec& unit) {
  return derive_seed(master, {hash_tag("cluster"), unit.cluster});
}

std::uint64_t kmeans_seed(std::uint64_t master, const UnitSpec& unit) {
  return derive_seed(master, {hash_tag("kmeans"), unit.cluster, unit.train});
}

// ---- fit ----

UnitFit fit_unit(const RunConfig& config, const RunData& data, const CellSpec& cell,
                 const UnitSpec& unit) {
  const auto& bundle = data.bundle;
  UnitFit out{cell, unit, {}, {}, {}};
  try {
    require(cell.n_prompts <= bundle.prompt_ids().size(), ErrorKind::kCapacity,
            std::to_string(cell.n_prompts) + " prompts requested, the data has " +
                std::to_string(bundle.prompt_ids().size()));
    out.prompt_ids.assign(bundle.prompt_ids().begin(), bundle.prompt_ids().begin() + cell.n_prompts);
    out.validation = select_validation(bundle, data_seed(config.master_seed, unit), cell.n_val, out.prompt_ids);
    const auto loglik = build_loglik_tensor(bundle, out.validation, out.prompt_ids);

    for (const auto& m : config.methods) {
      EnsembleFit fit;
      switch (m.kind) {
        case EnsembleKind::kStandard:
        case EnsembleKind::kBest:
        case EnsembleKind::kAverage:
          fit.weights = select_baseline(m.kind, loglik, train_seed(config.master_seed, unit));
          fit.report.converged = true;
          fit.report.stop_reason = "no optimization";
          break;
        case EnsembleKind::kBpe:
          fit = fit_bpe(loglik);
          break;
        case EnsembleKind::kMmb: {
          if (data.missing_embeddings) {
            fail(ErrorKind::kPath, "method '" + m.name + "' needs embeddings and '" +
                                       data.missing_embeddings->string() + "' does not exist");
          }
          require(bundle.embeddings().size() > 0, ErrorKind::kPath,
                  "method '" + m.name + "' needs embeddings and none are configured");
          const auto support = select_support(bundle, support_seed(config.master_seed, unit),
                                              config.clustering.support_per_cluster * m.k, out.validation);
          KMeansOptions ko;
          ko.k = m.k;
          ko.n_init = config.clustering.n_init;
          ko.n_iter = config.clustering.n_iter;
          ko.seed = kmeans_seed(config.master_seed, unit);
          ko.temperature = m.tau;
          auto model = run_spherical_kmeans(embedding_rows(bundle, support), ko).model;
          const auto assignments = soft_assign_rows(embedding_rows(bundle, out.validation), model);
          fit = fit_mmb(loglik, assignments, std::move(model));
          break;
        }
      }
      out.fits.push_back(std::move(fit));
    }
  } catch (const Error& e) {
    throw with_context(e, "cell " + cell.id() + ", unit " + unit.id());
  }
  return out;
}

std::vector<UnitFit> fit_grid(const RunConfig& config, const RunData& data, std::size_t threads) {
  const auto cells = grid_cells(config);
  const auto units = grid_units(config);
  std::vector<UnitFit> out(cells.size() * units.size());
  parallel_for(out.size(), threads, [&](std::size_t i) {
    out[i] = fit_unit(config, data, cells[i / units.size()], units[i % units.size()]);
  });
  return out;
}

// ---- evaluation ----

std::vector<std::string> unit_test_ids(const DatasetBundle& bundle, std::span<const std::string> prompt_ids,
                                       std::span<const std::string> validation) {
  if (!bundle.splits().test.empty()) return bundle.splits().test;
  std::unordered_set<std::string> val(validation.begin(), validation.end());
  std::vector<std::string> out;
  for (const auto& id : bundle.sample_ids()) {
    if (!val.contains(id) && bundle.prompt_complete(id, prompt_ids)) out.push_back(id);
  }
  return out;
}

PredictionSet predict_split(const EnsembleWeights& weights, const DatasetBundle& bundle,
                            std::span<const std::string> sample_ids) {
  require(!sample_ids.empty(), ErrorKind::kCapacity, "test split is empty");
  Matrix probs(sample_ids.size(), bundle.num_classes());
  std::vector<int> labels;
  for (std::size_t i = 0; i < sample_ids.size(); ++i) {
    const auto p = predict_sample(weights, bundle, sample_ids[i]);
    std::copy(p.begin(), p.end(), probs.row(i).begin());
    if (auto y = bundle.label(sample_ids[i])) labels.push_back(*y);
  }
  if (labels.empty()) return PredictionSet(std::move(probs));
  require(labels.size() == sample_ids.size(), ErrorKind::kIntegrity,
          "test split mixes labeled and unlabeled samples");
  return PredictionSet(std::move(probs), std::move(labels));
}

std::span<const MetricInfo> metric_catalog() {
  static const MetricInfo kCatalog[] = {
      {"ece", MetricDirection::kLower, true},       {"mce", MetricDirection::kLower, true},
      {"nll", MetricDirection::kLower, true},       {"brier", MetricDirection::kLower, true},
      {"accuracy", MetricDirection::kHigher, true}, {"f1", MetricDirection::kHigher, true},
      {"kappa", MetricDirection::kHigher, true},    {"roc_auc", MetricDirection::kHigher, true},
      {"pr_auc", MetricDirection::kHigher, true},   {"mean_confidence", MetricDirection::kNone, false},
  };
  return kCatalog;
}

MetricDirection metric_direction(const std::string& name) {
  for (const auto& m : metric_catalog()) {
    if (name == m.name) return m.direction;
  }
  fail(ErrorKind::kArgument, "unknown metric '" + name + "'");
}

UnitEval evaluate_predictions(const PredictionSet& preds, const MetricSettings& settings) {
  UnitEval out;
  if (preds.labels()) {
    auto cal = calibration_errors(preds, settings.n_bins);
    const auto proper = proper_scores(preds);
    const auto cls = classification_scores(preds, settings.positive_class, settings.f1_average);
    const auto rank = ranking_scores(preds, settings.positive_class);
    out.metrics = {{"ece", cal.ece},          {"mce", cal.mce},         {"nll", proper.nll},
                   {"brier", proper.brier},   {"accuracy", cls.accuracy}, {"f1", cls.f1},
                   {"kappa", cls.kappa},      {"roc_auc", rank.roc_auc}, {"pr_auc", rank.pr_auc}};
    out.bins = std::move(cal.bins);
    out.curve = error_coverage_curve(preds, settings.coverage_points);
  }
  out.metrics.emplace_back("mean_confidence", mean_confidence(preds));
  return out;
}

EvalReport evaluate_grid(const RunConfig& config, const RunData& data, std::span<const UnitFit> fits,
                         std::size_t threads) {
  struct Slot {
    std::vector<UnitEval> evals;  // per method
    std::optional<std::string> error;
  };
  std::vector<Slot> slots(fits.size());
  parallel_for(fits.size(), threads, [&](std::size_t i) {
    const auto& f = fits[i];
    try {
      const auto test = unit_test_ids(data.bundle, f.prompt_ids, f.validation);
      for (std::size_t m = 0; m < f.fits.size(); ++m) {
        try {
          slots[i].evals.push_back(
              evaluate_predictions(predict_split(f.fits[m].weights, data.bundle, test), config.metrics));
        } catch (const Error& e) {
          throw with_context(e, "method " + config.methods[m].name);
        }
      }
    } catch (const Error& e) {
      slots[i].error = "unit " + f.unit.id() + ": " + e.what();
    }
  });

  EvalReport report;
  // Fits arrive cell-major; cells are contiguous.
  for (std::size_t begin = 0; begin < fits.size();) {
    std::size_t end = begin;
    const std::string cell = fits[begin].cell.id();
    while (end < fits.size() && fits[end].cell.id() == cell) ++end;
    CellStatus status{cell, true, ""};
    for (std::size_t i = begin; i < end && status.ok; ++i) {
      if (slots[i].error) status = {cell, false, *slots[i].error};
    }
    report.cells.push_back(status);
    if (status.ok) {
      for (std::size_t m = 0; m < config.methods.size(); ++m) {
        const auto& method = config.methods[m].name;
        for (std::size_t i = begin; i < end; ++i) {
          for (const auto& [metric, value] : slots[i].evals[m].metrics) {
            report.metrics.push_back({cell, fits[i].unit.id(), method, metric, value});
          }
        }
        // Curves: mean over units with a bootstrap band on selective error.
        const auto& first = slots[begin].evals[m];
        std::size_t n_points = first.curve.size();
        for (std::size_t i = begin; i < end; ++i) n_points = std::min(n_points, slots[i].evals[m].curve.size());
        for (std::size_t p = 0; p < n_points; ++p) {
          std::vector<double> cov, err;
          for (std::size_t i = begin; i < end; ++i) {
            cov.push_back(slots[i].evals[m].curve[p].coverage);
            err.push_back(slots[i].evals[m].curve[p].selective_error);
          }
          const auto seed = derive_seed(config.master_seed,
                                        {hash_tag("curve"), hash_tag(cell), hash_tag(method), p});
          report.curves.push_back({cell, method, p, shifted_mean(cov), shifted_mean(err),
                                   mean_band(err, config.stats, seed)});
        }
        // Reliability: bins pooled over units.
        for (std::size_t b = 0; b < first.bins.bins.size(); ++b) {
          ReliabilityBin pooled = first.bins.bins[b];
          pooled.count = 0;
          double conf_sum = 0.0, acc_sum = 0.0;
          for (std::size_t i = begin; i < end; ++i) {
            const auto& bin = slots[i].evals[m].bins.bins[b];
            pooled.count += bin.count;
            conf_sum += bin.mean_confidence * static_cast<double>(bin.count);
            acc_sum += bin.accuracy * static_cast<double>(bin.count);
          }
          pooled.mean_confidence = pooled.count ? conf_sum / static_cast<double>(pooled.count) : 0.0;
          pooled.accuracy = pooled.count ? acc_sum / static_cast<double>(pooled.count) : 0.0;
          report.reliability.push_back({cell, method, b, pooled});
        }
      }
    }
    begin = end;
  }
  report.summary = summarize(config, report.metrics);
  return report;
}

std::vector<SummaryRow> summarize(const RunConfig& config, std::span<const MetricRow> rows) {
  std::vector<SummaryRow> out;
  std::vector<std::vector<double>> values;
  std::map<std::tuple<std::string, std::string, std::string>, std::size_t> index;
  for (const auto& r : rows) {
    auto [it, fresh] = index.try_emplace({r.cell, r.method, r.metric}, out.size());
    if (fresh) {
      out.push_back({r.cell, r.method, r.metric, 0.0, {}, 0});
      values.emplace_back();
    }
    values[it->second].push_back(r.value);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& s = out[i];
    s.n = values[i].size();
    s.mean = shifted_mean(values[i]);
    const auto seed = derive_seed(config.master_seed,
                                  {hash_tag("summary"), hash_tag(s.cell), hash_tag(s.method), hash_tag(s.metric)});
    s.ci = mean_band(values[i], config.stats, seed);
  }
  return out;
}

// ---- tables ----

std::string metrics_to_csv(std::span<const MetricRow> rows) {
  std::string out = "cell,unit,method,metric,value\n";
  for (const auto& r : rows) {
    out += r.cell + "," + r.unit + "," + r.method + "," + r.metric + "," + format_double(r.value) + "\n";
  }
  return out;
}

std::vector<MetricRow> metrics_from_csv(const std::string& text) {
  std::vector<MetricRow> out;
  for (auto& f : csv_rows(text, "cell,unit,method,metric,value", "metrics.csv")) {
    out.push_back({f[0], f[1], f[2], f[3], parse_real(f[4], "metrics.csv")});
  }
  return out;
}

std::string summary_to_csv(std::span<const SummaryRow> rows) {
  std::string out = "cell,method,metric,mean,ci_low,ci_high,n\n";
  for (const auto& r : rows) {
    out += r.cell + "," + r.method + "," + r.metric + "," + format_double(r.mean) + "," +
           format_double(r.ci.low) + "," + format_double(r.ci.high) + "," + std::to_string(r.n) + "\n";
  }
  return out;
}

std::vector<SummaryRow> summary_from_csv(const std::string& text) {
  std::vector<SummaryRow> out;
  for (auto& f : csv_rows(text, "cell,method,metric,mean,ci_low,ci_high,n", "summary.csv")) {
    out.push_back({f[0], f[1], f[2], parse_real(f[3], "summary.csv"),
                   {parse_real(f[4], "summary.csv"), parse_real(f[5], "summary.csv")},
                   parse_count(f[6], "summary.csv")});
  }
  return out;
}

std::string curves_to_csv(std::span<const CurveRow> rows) {
  std::string out = "cell,method,point,coverage,selective_error,band_low,band_high\n";
  for (const auto& r : rows) {
    out += r.cell + "," + r.method + "," + std::to_string(r.point) + "," + format_double(r.coverage) + "," +
           format_double(r.selective_error) + "," + format_double(r.band.low) + "," +
           format_double(r.band.high) + "\n";
  }
  return out;
}

std::string reliability_rows_to_csv(std::span<const ReliabilityRow> rows) {
  std::string out = "cell,method,bin,lower,upper,count,mean_confidence,accuracy\n";
  for (const auto& r : rows) {
    out += r.cell + "," + r.method + "," + std::to_string(r.bin) + "," + format_double(r.pooled.lower) + "," +
           format_double(r.pooled.upper) + "," + std::to_string(r.pooled.count) + "," +
           format_double(r.pooled.mean_confidence) + "," + format_double(r.pooled.accuracy) + "\n";
  }
  return out;
}

std::string cells_to_csv(std::span<const CellStatus> rows) {
  std::string out = "cell,status,message\n";
  for (const auto& r : rows) out += r.cell + "," + (r.ok ? "ok" : "failed") + "," + csv_field(r.message) + "\n";
  return out;
}

// ---- comparison ----

std::vector<ComparisonRow> compare_methods(const RunConfig& config, std::span<const MetricRow> rows,
                                           std::size_t threads) {
  require(config.methods.size() >= 2, ErrorKind::kConfig, "comparison needs at least two methods");
  // cell -> metric -> method -> (units, values)
  struct Series {
    std::vector<std::string> units;
    std::vector<double> values;
  };
  std::vector<std::string> cells;
  std::map<std::string, std::map<std::string, std::map<std::string, Series>>> data;
  for (const auto& r : rows) {
    if (!data.contains(r.cell)) cells.push_back(r.cell);
    auto& s = data[r.cell][r.metric][r.method];
    s.units.push_back(r.unit);
    s.values.push_back(r.value);
  }

  std::vector<ComparisonRow> out;
  for (const auto& cell : cells) {
    for (const auto& info : metric_catalog()) {
      if (info.direction == MetricDirection::kNone) continue;
      const auto mit = data[cell].find(info.name);
      if (mit == data[cell].end()) continue;
      const auto& by_method = mit->second;
      std::vector<std::string> methods;
      for (const auto& m : config.methods) {
        if (by_method.contains(m.name)) methods.push_back(m.name);
      }
      if (methods.size() < 2) continue;
      const std::string family = "cell " + cell + ", metric " + info.name;
      for (const auto& m : methods) {
        const auto& units = by_method.at(m).units;
        require(units == by_method.at(methods[0]).units, ErrorKind::kIntegrity,
                family + ": method '" + m + "' is not aligned with '" + methods[0] + "' on units");
        require(std::set<std::string>(units.begin(), units.end()).size() == units.size(),
                ErrorKind::kIntegrity, family + ": duplicate units for method '" + m + "'");
      }

      std::map<std::string, double> mean;
      for (const auto& m : methods) mean[m] = shifted_mean(by_method.at(m).values);
      std::string reference;
      if (config.stats.baseline) {
        reference = *config.stats.baseline;
        require(mean.contains(reference), ErrorKind::kIntegrity,
                family + ": baseline '" + reference + "' has no scores");
      } else {
        reference = methods[0];
        for (const auto& m : methods) {
          const bool better = info.direction == MetricDirection::kLower ? mean[m] < mean[reference]
                                                                        : mean[m] > mean[reference];
          if (better) reference = m;
        }
      }

      std::vector<double> p_values;
      std::vector<std::string> tested;
      for (const auto& m : methods) {
        if (m == reference) continue;
        PairedScores scores{by_method.at(m).values, by_method.at(reference).values, by_method.at(m).units};
        const auto seed = derive_seed(config.master_seed,
                                      {hash_tag("compare"), hash_tag(cell), hash_tag(info.name), hash_tag(m)});
        p_values.push_back(paired_permutation_test(scores, config.stats.n_perm, seed, config.stats.mode, threads));
        tested.push_back(m);
      }
      const auto decision = by_fdr(p_values, config.stats.alpha);
      for (const auto& m : methods) {
        ComparisonRow row{cell, info.name, m, reference, mean[m], mean[reference], 1.0, 1.0, false, true};
        const auto t = std::find(tested.begin(), tested.end(), m);
        if (t != tested.end()) {
          const auto k = static_cast<std::size_t>(t - tested.begin());
          row.p_value = decision.raw_p[k];
          row.adjusted_p = decision.adjusted_p[k];
          row.rejected = decision.rejected[k];
          row.best_equivalent = !row.rejected;
        }
        out.push_back(row);
      }
    }
  }
  return out;
}

std::string comparison_to_csv(std::span<const ComparisonRow> rows) {
  std::string out =
      "cell,metric,method,reference,mean,reference_mean,p_value,adjusted_p,rejected,best_equivalent\n";
  for (const auto& r : rows) {
    out += r.cell + "," + r.metric + "," + r.method + "," + r.reference + "," + format_double(r.mean) + "," +
           format_double(r.reference_mean) + "," + format_double(r.p_value) + "," + format_double(r.adjusted_p) +
           "," + bool_text(r.rejected) + "," + bool_text(r.best_equivalent) + "\n";
  }
  return out;
}

std::vector<ComparisonRow> comparison_from_csv(const std::string& text) {
  const std::string what = "comparison.csv";
  std::vector<ComparisonRow> out;
  for (auto& f : csv_rows(
           text, "cell,metric,method,reference,mean,reference_mean,p_value,adjusted_p,rejected,best_equivalent",
           what)) {
    out.push_back({f[0], f[1], f[2], f[3], parse_real(f[4], what), parse_real(f[5], what), parse_real(f[6], what),
                   parse_real(f[7], what), parse_bool(f[8], what), parse_bool(f[9], what)});
  }
  return out;
}

// ---- report ----

ReportFormat parse_report_format(const std::string& text) {
  if (text == "table") return ReportFormat::kTable;
  if (text == "csv") return ReportFormat::kCsv;
  fail(ErrorKind::kArgument, "format must be 'table' or 'csv', got '" + text + "'");
}

std::string render_report(const std::string& resolved_config, std::span<const SummaryRow> summary,
                          std::span<const ComparisonRow> comparison, ReportFormat format) {
  std::string out = "# mmb report\n# config:\n";
  std::istringstream config_lines(resolved_config);
  for (std::string line; std::getline(config_lines, line);) out += "#   " + line + "\n";

  std::map<std::tuple<std::string, std::string, std::string>, bool> equivalent;
  for (const auto& c : comparison) equivalent[{c.cell, c.metric, c.method}] = c.best_equivalent;
  auto mark = [&](const SummaryRow& s) -> std::optional<bool> {
    auto it = equivalent.find({s.cell, s.metric, s.method});
    if (it == equivalent.end()) return std::nullopt;
    return it->second;
  };

  if (format == ReportFormat::kCsv) {
    out += "cell,method,metric,mean,ci_low,ci_high,n,best_equivalent\n";
    for (const auto& s : summary) {
      const auto m = mark(s);
      out += s.cell + "," + s.method + "," + s.metric + "," + format_double(s.mean) + "," + format_double(s.ci.low) +
             "," + format_double(s.ci.high) + "," + std::to_string(s.n) + "," + (m ? bool_text(*m) : "") + "\n";
    }
    return out;
  }

  // Table: one block per cell, methods as rows, metric means as columns;
  // '*' marks entries not significantly worse than the reference.
  std::vector<std::string> cells;
  for (const auto& s : summary) {
    if (std::find(cells.begin(), cells.end(), s.cell) == cells.end()) cells.push_back(s.cell);
  }
  for (const auto& cell : cells) {
    std::vector<std::string> methods, metrics;
    std::map<std::pair<std::string, std::string>, std::string> cellv;
    std::size_t n = 0;
    for (const auto& s : summary) {
      if (s.cell != cell) continue;
      if (std::find(methods.begin(), methods.end(), s.method) == methods.end()) methods.push_back(s.method);
      if (std::find(metrics.begin(), metrics.end(), s.metric) == metrics.end()) metrics.push_back(s.metric);
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.4f", s.mean);
      const auto m = mark(s);
      cellv[{s.method, s.metric}] = std::string(buf) + (m && *m ? "*" : "");
      n = std::max(n, s.n);
    }
    out += "\n" + cell + " (" + std::to_string(n) + " units)\n";
    std::size_t name_w = 6;
    for (const auto& m : methods) name_w = std::max(name_w, m.size());
    std::vector<std::size_t> widths;
    for (const auto& metric : metrics) {
      std::size_t w = metric.size();
      for (const auto& m : methods) w = std::max(w, cellv[{m, metric}].size());
      widths.push_back(w);
    }
    auto pad = [](const std::string& s, std::size_t w, bool left) {
      const std::string fill(w > s.size() ? w - s.size() : 0, ' ');
      return left ? s + fill : fill + s;
    };
    out += pad("method", name_w, true);
    for (std::size_t k = 0; k < metrics.size(); ++k) out += "  " + pad(metrics[k], widths[k], false);
    out += "\n";
    for (const auto& m : methods) {
      out += pad(m, name_w, true);
      for (std::size_t k = 0; k < metrics.size(); ++k) out += "  " + pad(cellv[{m, metrics[k]}], widths[k], false);
      out += "\n";
    }
  }
  return out;
}

// ---- subcommands ----

void cmd_fit(const RunConfig& config, const RunOptions& options) {
  const auto data = load_run_data(config);
  const auto fits = fit_grid(config, data, options.threads);
  std::string reports = "cell,unit,method,kind,objective,iterations,converged,closed_form_gap,stop_reason\n";
  for (const auto& f : fits) {
    const auto dir = unit_dir(config, f.cell, f.unit);
    write_file_atomic(dir / "validation.txt", join_lines(f.validation));
    for (std::size_t m = 0; m < config.methods.size(); ++m) {
      const auto& method = config.methods[m];
      const auto& r = f.fits[m].report;
      save_weights(dir / (method.name + ".json"), f.fits[m].weights);
      reports += f.cell.id() + "," + f.unit.id() + "," + method.name + "," + std::string(to_string(method.kind)) +
                 "," + format_double(r.final_objective) + "," + std::to_string(r.iterations) + "," +
                 bool_text(r.converged) + "," + format_double(r.closed_form_gap) + "," + csv_field(r.stop_reason) +
                 "\n";
    }
  }
  write_file_atomic(config.output / "fit_reports.csv", reports);
  write_file_atomic(config.output / "config.resolved.json", run_config_to_json(config));
}

EvalReport cmd_eval(const RunConfig& config, const RunOptions& options) {
  const auto data = load_run_data(config);
  std::vector<UnitFit> fits;
  for (const auto& cell : grid_cells(config)) {
    for (const auto& unit : grid_units(config)) {
      const auto dir = unit_dir(config, cell, unit);
      UnitFit f{cell, unit, {}, split_lines(read_required(dir / "validation.txt", "validation list")), {}};
      for (const auto& m : config.methods) {
        const auto path = dir / (m.name + ".json");
        require(std::filesystem::exists(path), ErrorKind::kIntegrity,
                "missing weights for method '" + m.name + "' in cell " + cell.id() + ", unit " + unit.id() +
                    " ('" + path.string() + "')");
        EnsembleFit fit;
        fit.weights = load_weights(path);
        require(fit.weights.kind == m.kind, ErrorKind::kIntegrity,
                "weights in '" + path.string() + "' are not of kind " + std::string(to_string(m.kind)));
        if (f.prompt_ids.empty()) f.prompt_ids = fit.weights.prompt_ids;
        f.fits.push_back(std::move(fit));
      }
      fits.push_back(std::move(f));
    }
  }
  auto report = evaluate_grid(config, data, fits, options.threads);
  const auto dir = config.output / "eval";
  write_file_atomic(dir / "metrics.csv", metrics_to_csv(report.metrics));
  write_file_atomic(dir / "summary.csv", summary_to_csv(report.summary));
  write_file_atomic(dir / "curves.csv", curves_to_csv(report.curves));
  write_file_atomic(dir / "reliability.csv", reliability_rows_to_csv(report.reliability));
  write_file_atomic(dir / "cells.csv", cells_to_csv(report.cells));
  return report;
}

std::vector<ComparisonRow> cmd_compare(const RunConfig& config, const RunOptions& options) {
  const auto rows = metrics_from_csv(read_required(config.output / "eval" / "metrics.csv", "metric table"));
  auto table = compare_methods(config, rows, options.threads);
  write_file_atomic(config.output / "compare" / "comparison.csv", comparison_to_csv(table));
  return table;
}

std::string cmd_report(const RunConfig& config, const RunOptions& options) {
  const auto resolved = read_required(config.output / "config.resolved.json", "resolved config");
  const auto summary = summary_from_csv(read_required(config.output / "eval" / "summary.csv", "summary table"));
  std::vector<ComparisonRow> comparison;
  const auto cmp_path = config.output / "compare" / "comparison.csv";
  if (std::filesystem::exists(cmp_path)) comparison = comparison_from_csv(read_file(cmp_path));
  auto text = render_report(resolved, summary, comparison, options.format);
  write_file_atomic(config.output / (options.format == ReportFormat::kCsv ? "report.csv" : "report.txt"), text);
  return text;
}

void cmd_synth(const SynthConfig& config, const std::filesystem::path& out) {
  const auto [bundle, truth] = generate_benchmark(config);
  write_synth_outputs(out, config, bundle, truth);
}

}  // namespace mmb
