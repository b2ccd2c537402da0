#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmb/ensemble.h"
#include "mmb/ingest.h"
#include "mmb/metrics.h"
#include "mmb/stats.h"
#include "mmb/synth.h"

namespace mmb {

struct MethodSpec {
  std::string name;
  EnsembleKind kind = EnsembleKind::kAverage;
  std::size_t k = 1;                         // mmb only
  double tau = kDefaultTemperature;          // mmb only
};

// Number of repeats per seed family. Family seeds are derived from the master
// seed, so counts are all that is configured.
struct SeedCounts {
  std::size_t train = 1;
  std::size_t data = 1;
  std::size_t cluster = 1;
};

struct ClusteringSettings {
  std::size_t n_init = 3;
  std::size_t n_iter = 1000;
  std::size_t support_per_cluster = 256;
};

struct MetricSettings {
  std::size_t n_bins = kDefaultBins;
  int positive_class = 0;
  F1Average f1_average = F1Average::kBinary;
  std::size_t coverage_points = 20;
};

struct StatsSettings {
  double alpha = 0.05;
  std::size_t n_perm = 10000;
  std::size_t n_boot = 1000;
  double ci_level = 95.0;
  PermutationMode mode = PermutationMode::kAuto;
  // Compare every method against this one instead of the per-metric best.
  std::optional<std::string> baseline;
};

// Exactly one of: records (+ optional embeddings), bundle, synth.
struct DataSource {
  std::string records;     // as written in the config
  std::string embeddings;
  std::string bundle;
  std::optional<SynthConfig> synth;
  std::filesystem::path base_dir;  // relative paths resolve against this

  std::filesystem::path resolve(const std::string& path) const;
};

struct RunConfig {
  DataSource data;
  std::filesystem::path output = "out";
  std::vector<MethodSpec> methods;
  std::vector<std::size_t> prompt_counts;
  std::vector<std::size_t> validation_sizes;
  SeedCounts seeds;
  ClusteringSettings clustering;
  MetricSettings metrics;
  StatsSettings stats;
  std::uint64_t master_seed = 0;

  void validate() const;
  const MethodSpec& method(const std::string& name) const;
};

RunConfig run_config_from_json(const std::string& text, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& path);
// Every setting with defaults filled in. The output directory is left out so
// reports do not depend on where they were written.
std::string run_config_to_json(const RunConfig& config);

// Loaded data plus the embeddings path that was configured but absent, if
// any; mmb methods fail on it when they need it.
struct RunData {
  DatasetBundle bundle;
  std::optional<std::filesystem::path> missing_embeddings;
};
RunData load_run_data(const RunConfig& config);

struct CellSpec {
  std::size_t n_prompts = 0;
  std::size_t n_val = 0;
  std::string id() const;  // p<n_prompts>_v<n_val>
};

struct UnitSpec {
  std::size_t train = 0;
  std::size_t data = 0;
  std::size_t cluster = 0;
  std::string id() const;  // t<train>_d<data>_c<cluster>
};

std::vector<CellSpec> grid_cells(const RunConfig& config);
std::vector<UnitSpec> grid_units(const RunConfig& config);

// Per-unit seeds. Validation draws are nested across validation sizes.
std::uint64_t train_seed(std::uint64_t master, const UnitSpec& unit);
std::uint64_t data_seed(std::uint64_t master, const UnitSpec& unit);
std::uint64_t support_seed(std::uint64_t master, const UnitSpec& unit);
std::uint64_t kmeans_seed(std::uint64_t master, const UnitSpec& unit);

struct UnitFit {
  CellSpec cell;
  UnitSpec unit;
  std::vector<std::string> prompt_ids;
  std::vector<std::string> validation;
  std::vector<EnsembleFit> fits;  // aligned with config.methods
};

UnitFit fit_unit(const RunConfig& config, const RunData& data, const CellSpec& cell,
                 const UnitSpec& unit);
// Cells x units in grid order; results do not depend on threads.
std::vector<UnitFit> fit_grid(const RunConfig& config, const RunData& data, std::size_t threads);

// Test ids for a unit: the bundle's test split, or every prompt-complete
// sample outside validation when the bundle has none.
std::vector<std::string> unit_test_ids(const DatasetBundle& bundle,
                                       std::span<const std::string> prompt_ids,
                                       std::span<const std::string> validation);

PredictionSet predict_split(const EnsembleWeights& weights, const DatasetBundle& bundle,
                            std::span<const std::string> sample_ids);

enum class MetricDirection { kLower, kHigher, kNone };

struct MetricInfo {
  const char* name;
  MetricDirection direction;
  bool needs_labels;
};
std::span<const MetricInfo> metric_catalog();
MetricDirection metric_direction(const std::string& name);

struct UnitEval {
  std::vector<std::pair<std::string, double>> metrics;  // catalog order
  ReliabilityBins bins;                                 // empty when unlabeled
  std::vector<CoveragePoint> curve;                     // empty when unlabeled
};
UnitEval evaluate_predictions(const PredictionSet& preds, const MetricSettings& settings);

struct MetricRow {
  std::string cell;
  std::string unit;
  std::string method;
  std::string metric;
  double value = 0.0;
};

struct SummaryRow {
  std::string cell;
  std::string method;
  std::string metric;
  double mean = 0.0;
  Interval ci;
  std::size_t n = 0;
};

struct CurveRow {
  std::string cell;
  std::string method;
  std::size_t point = 0;
  double coverage = 0.0;
  double selective_error = 0.0;
  Interval band;
};

struct ReliabilityRow {
  std::string cell;
  std::string method;
  std::size_t bin = 0;
  ReliabilityBin pooled;
};

struct CellStatus {
  std::string cell;
  bool ok = true;
  std::string message;
};

struct EvalReport {
  std::vector<MetricRow> metrics;
  std::vector<SummaryRow> summary;
  std::vector<CurveRow> curves;
  std::vector<ReliabilityRow> reliability;
  std::vector<CellStatus> cells;
};

// Evaluates every fit on its test split. A cell whose evaluation throws is
// marked failed and contributes no rows.
EvalReport evaluate_grid(const RunConfig& config, const RunData& data,
                         std::span<const UnitFit> fits, std::size_t threads);

std::vector<SummaryRow> summarize(const RunConfig& config, std::span<const MetricRow> rows);

std::string metrics_to_csv(std::span<const MetricRow> rows);
std::vector<MetricRow> metrics_from_csv(const std::string& text);
std::string summary_to_csv(std::span<const SummaryRow> rows);
std::vector<SummaryRow> summary_from_csv(const std::string& text);
std::string curves_to_csv(std::span<const CurveRow> rows);
std::string reliability_rows_to_csv(std::span<const ReliabilityRow> rows);
std::string cells_to_csv(std::span<const CellStatus> rows);

struct ComparisonRow {
  std::string cell;
  std::string metric;
  std::string method;
  std::string reference;
  double mean = 0.0;
  double reference_mean = 0.0;
  double p_value = 1.0;
  double adjusted_p = 1.0;
  bool rejected = false;
  // Not significantly different from the reference (the reference itself too).
  bool best_equivalent = true;
};

// Per cell and metric: each method against the reference (per-metric best or
// the configured baseline), BY-corrected within that family.
std::vector<ComparisonRow> compare_methods(const RunConfig& config, std::span<const MetricRow> rows,
                                           std::size_t threads = 1);

std::string comparison_to_csv(std::span<const ComparisonRow> rows);
std::vector<ComparisonRow> comparison_from_csv(const std::string& text);

enum class ReportFormat { kTable, kCsv };
ReportFormat parse_report_format(const std::string& text);

std::string render_report(const std::string& resolved_config, std::span<const SummaryRow> summary,
                          std::span<const ComparisonRow> comparison, ReportFormat format);

// Subcommands. Each reads and writes under config.output.
struct RunOptions {
  std::size_t threads = 1;
  ReportFormat format = ReportFormat::kTable;
};

void cmd_fit(const RunConfig& config, const RunOptions& options);
EvalReport cmd_eval(const RunConfig& config, const RunOptions& options);
std::vector<ComparisonRow> cmd_compare(const RunConfig& config, const RunOptions& options);
std::string cmd_report(const RunConfig& config, const RunOptions& options);
void cmd_synth(const SynthConfig& config, const std::filesystem::path& out);

}  // namespace mmb
