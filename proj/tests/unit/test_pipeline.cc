#include <cmath>
#include <filesystem>
#include <map>

#include "doctest.h"
#include "mmb/error.h"
#include "mmb/pipeline.h"
#include "mmb/seed.h"

using namespace mmb;
namespace fs = std::filesystem;

namespace {

const char* kSmallConfig = R"({
  "data": {"synth": {"n_prompts": 4, "n_pool": 400, "n_test": 150, "seed": 2}},
  "methods": [{"kind": "standard"}, {"kind": "average"}, {"kind": "bpe"}, {"kind": "mmb", "k": 2}],
  "grid": {"prompt_counts": [3, 4], "validation_sizes": [8], "seeds": {"train": 1, "data": 3, "cluster": 1}},
  "clustering": {"support_per_cluster": 64},
  "stats": {"n_perm": 500, "n_boot": 100}
})";

RunConfig small_config(const fs::path& out) {
  auto c = run_config_from_json(kSmallConfig, "/base");
  c.output = out;
  return c;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<MetricRow> rows_for(const std::string& metric, const std::string& method, std::vector<double> values) {
  std::vector<MetricRow> out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out.push_back({"p1_v1", "u" + std::to_string(i), method, metric, values[i]});
  }
  return out;
}

RunConfig compare_config(std::vector<std::string> methods, PermutationMode mode = PermutationMode::kExact) {
  RunConfig c;
  c.data.synth = SynthConfig{};
  for (auto& m : methods) c.methods.push_back({m, EnsembleKind::kAverage});
  c.prompt_counts = {1};
  c.validation_sizes = {1};
  c.stats.mode = mode;
  return c;
}

}  // namespace

TEST_CASE("config parsing fills defaults and resolves paths") {
  const auto c = run_config_from_json(R"({
    "data": {"records": "r.jsonl", "embeddings": "/abs/e.csv"},
    "methods": [{"kind": "average"}, {"name": "m2", "kind": "mmb", "k": 4, "tau": 0.5}],
    "grid": {"prompt_counts": [5, 10], "validation_sizes": [20]}
  })", "/cfg");
  CHECK(c.data.resolve(c.data.records) == fs::path("/cfg/r.jsonl"));
  CHECK(c.data.resolve(c.data.embeddings) == fs::path("/abs/e.csv"));
  CHECK(c.output == fs::path("/cfg/out"));
  CHECK(c.methods[0].name == "average");
  CHECK(c.methods[1].k == 4);
  CHECK(c.methods[1].tau == 0.5);
  CHECK(c.clustering.n_init == 3);
  CHECK(c.clustering.n_iter == 1000);
  CHECK(c.clustering.support_per_cluster == 256);
  CHECK(c.metrics.n_bins == 15);
  CHECK(c.stats.alpha == 0.05);
  CHECK(grid_cells(c).size() == 2);
  CHECK(grid_units(c).size() == 1);

  // The resolved echo parses back to the same settings.
  const auto again = run_config_from_json(run_config_to_json(c), "/cfg");
  CHECK(run_config_to_json(again) == run_config_to_json(c));
}

TEST_CASE("config errors") {
  auto bad = [](const std::string& text) {
    try {
      run_config_from_json(text, ".");
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::kShape;  // sentinel: nothing thrown
  };
  const std::string grid = R"("grid": {"prompt_counts": [2], "validation_sizes": [2]})";
  CHECK(bad("{") == ErrorKind::kConfig);
  CHECK(bad(R"({"data": {"records": "x"}, "methods": [{"kind": "average"}], )" + grid + R"(, "extra": 1})") ==
        ErrorKind::kConfig);
  CHECK(bad(R"({"data": {}, "methods": [{"kind": "average"}], )" + grid + "}") == ErrorKind::kConfig);
  CHECK(bad(R"({"data": {"records": "x"}, "methods": [], )" + grid + "}") == ErrorKind::kConfig);
  CHECK(bad(R"({"data": {"records": "x"}, "methods": [{"kind": "average"}, {"kind": "average"}], )" + grid +
            "}") == ErrorKind::kConfig);
  CHECK(bad(R"({"data": {"records": "x"}, "methods": [{"kind": "bpe", "k": 3}], )" + grid + "}") ==
        ErrorKind::kConfig);
  CHECK(bad(R"({"data": {"records": "x"}, "methods": [{"kind": "nope"}], )" + grid + "}") == ErrorKind::kConfig);
  CHECK(bad(R"({"data": {"records": "x"}, "methods": [{"kind": "average"}],
                "grid": {"prompt_counts": [], "validation_sizes": [2]}})") == ErrorKind::kConfig);
  CHECK(bad(R"({"data": {"records": "x"}, "methods": [{"kind": "average"}], )" + grid +
            R"(, "stats": {"baseline": "zzz"}})") == ErrorKind::kConfig);
  CHECK(bad(R"({"data": {"records": "x"}, "methods": [{"kind": "average", "name": "a b"}], )" + grid + "}") ==
        ErrorKind::kConfig);
  CHECK(bad(R"({"data": {"records": "x"}, "methods": [{"kind": "average"}], )" + grid + "}") == ErrorKind::kShape);
}

TEST_CASE("seed families are independent and stable") {
  const UnitSpec a{0, 0, 0}, b{0, 1, 0};
  CHECK(data_seed(1, a) != data_seed(1, b));
  CHECK(train_seed(1, a) == train_seed(1, b));
  CHECK(support_seed(1, a) == support_seed(1, b));
  CHECK(data_seed(1, a) != data_seed(2, a));
  CHECK(data_seed(1, a) == derive_seed(1, {hash_tag("data"), 0}));
  CHECK(UnitSpec{1, 2, 3}.id() == "t1_d2_c3");
  CHECK(CellSpec{10, 20}.id() == "p10_v20");
}

TEST_CASE("average method yields uniform weights without optimizing") {
  auto c = small_config("/unused");
  c.methods = {{"avg", EnsembleKind::kAverage}};
  const auto data = load_run_data(c);
  const auto fit = fit_unit(c, data, {4, 8}, {0, 0, 0});
  REQUIRE(fit.fits.size() == 1);
  for (double w : fit.fits[0].weights.weights.row(0)) CHECK(w == 0.25);
  CHECK(fit.fits[0].report.iterations == 0);
  CHECK(fit.fits[0].report.stop_reason == "no optimization");
  CHECK(fit.validation.size() == 8);
  CHECK(fit.prompt_ids.size() == 4);
}

TEST_CASE("validation draws nest across sizes") {
  auto c = small_config("/unused");
  c.methods = {{"avg", EnsembleKind::kAverage}};
  const auto data = load_run_data(c);
  const auto small = fit_unit(c, data, {4, 5}, {0, 2, 0});
  const auto large = fit_unit(c, data, {4, 12}, {0, 2, 0});
  CHECK(std::equal(small.validation.begin(), small.validation.end(), large.validation.begin()));
}

TEST_CASE("fit results do not depend on thread count") {
  const auto c = small_config("/unused");
  const auto data = load_run_data(c);
  const auto one = fit_grid(c, data, 1);
  const auto many = fit_grid(c, data, 4);
  REQUIRE(one.size() == grid_cells(c).size() * grid_units(c).size());
  for (std::size_t i = 0; i < one.size(); ++i) {
    CHECK(one[i].validation == many[i].validation);
    for (std::size_t m = 0; m < c.methods.size(); ++m) {
      CHECK(weights_to_json(one[i].fits[m].weights) == weights_to_json(many[i].fits[m].weights));
    }
  }
}

TEST_CASE("mmb without embeddings is a path error naming the cell") {
  TempDir dir("mmb_pipeline_noemb");
  SynthConfig s;
  s.n_pool = 100;
  s.n_test = 20;
  cmd_synth(s, dir.path / "data");
  auto c = run_config_from_json(R"({
    "data": {"records": "data/records.jsonl", "embeddings": "data/missing.csv"},
    "methods": [{"kind": "average"}, {"kind": "mmb", "k": 2}],
    "grid": {"prompt_counts": [3], "validation_sizes": [5]},
    "clustering": {"support_per_cluster": 8}
  })", dir.path);
  const auto data = load_run_data(c);
  CHECK(data.missing_embeddings.has_value());
  try {
    fit_grid(c, data, 1);
    FAIL("expected a path error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kPath);
    CHECK(std::string(e.what()).find("cell p3_v5") != std::string::npos);
  }
  // Without mmb the missing file does not matter.
  c.methods.pop_back();
  CHECK_NOTHROW(fit_grid(c, data, 1));
}

TEST_CASE("perfect judge: accuracy one and ECE equal to the confidence gap") {
  auto c = small_config("/unused");
  SynthConfig s;
  s.n_prompts = 4;
  s.reliability = Matrix(2, 4, 1.0);
  s.n_pool = 400;
  s.n_test = 150;
  c.data.synth = s;
  const auto data = load_run_data(c);
  const auto report = evaluate_grid(c, data, fit_grid(c, data, 1), 1);
  std::map<std::tuple<std::string, std::string, std::string>, double> v;
  for (const auto& r : report.metrics) v[{r.unit + r.cell, r.method, r.metric}] = r.value;
  std::size_t checked = 0;
  for (const auto& r : report.metrics) {
    if (r.metric == "accuracy") CHECK(r.value == 1.0);
    if (r.metric == "ece") {
      const double conf = v[{r.unit + r.cell, r.method, "mean_confidence"}];
      CHECK(r.value == doctest::Approx(1.0 - conf).epsilon(1e-12));
      ++checked;
    }
  }
  CHECK(checked == c.methods.size() * grid_cells(c).size() * grid_units(c).size());
}

TEST_CASE("single-method evaluation has one method") {
  auto c = small_config("/unused");
  c.methods = {{"bpe", EnsembleKind::kBpe}};
  const auto data = load_run_data(c);
  const auto report = evaluate_grid(c, data, fit_grid(c, data, 1), 1);
  for (const auto& s : report.summary) CHECK(s.method == "bpe");
  CHECK(report.summary.size() == grid_cells(c).size() * metric_catalog().size());
}

TEST_CASE("failed cells are marked, not dropped") {
  auto c = small_config("/unused");
  c.metrics.positive_class = 5;  // out of range for binary labels
  const auto data = load_run_data(c);
  const auto report = evaluate_grid(c, data, fit_grid(c, data, 1), 1);
  REQUIRE(report.cells.size() == grid_cells(c).size());
  for (const auto& cell : report.cells) {
    CHECK_FALSE(cell.ok);
    CHECK(cell.message.find("domain error") != std::string::npos);
  }
  CHECK(report.metrics.empty());
}

TEST_CASE("unlabeled test split reports mean confidence only") {
  auto c = small_config("/unused");
  auto s = *c.data.synth;
  s.test_scenario = TestScenario::kNoPreference;
  c.data.synth = s;
  const auto data = load_run_data(c);
  const auto report = evaluate_grid(c, data, fit_grid(c, data, 1), 1);
  for (const auto& r : report.metrics) CHECK(r.metric == "mean_confidence");
  CHECK(report.curves.empty());
  CHECK(report.reliability.empty());
}

TEST_CASE("identical methods compare at p = 1") {
  auto c = compare_config({"a", "b"});
  std::vector<MetricRow> rows = rows_for("ece", "a", {0.1, 0.2, 0.3, 0.25});
  auto b = rows_for("ece", "b", {0.1, 0.2, 0.3, 0.25});
  rows.insert(rows.end(), b.begin(), b.end());
  const auto table = compare_methods(c, rows);
  REQUIRE(table.size() == 2);
  for (const auto& r : table) {
    CHECK(r.p_value == 1.0);
    CHECK(r.best_equivalent);
  }
}

TEST_CASE("a dominated method is rejected") {
  // Every unit differs by exactly 0.1: only the identity and the full flip
  // reach the observed |mean difference|, so the exact p is 2 / 2^20.
  auto c = compare_config({"good", "bad"});
  std::vector<double> good(20), bad(20);
  for (std::size_t i = 0; i < 20; ++i) {
    good[i] = 0.05 + 0.01 * static_cast<double>(i % 7);
    bad[i] = good[i] + 0.1;
  }
  auto rows = rows_for("ece", "good", good);
  auto more = rows_for("ece", "bad", bad);
  rows.insert(rows.end(), more.begin(), more.end());
  const auto table = compare_methods(c, rows);
  REQUIRE(table.size() == 2);
  CHECK(table[0].method == "good");
  CHECK(table[0].reference == "good");
  CHECK(table[1].p_value == doctest::Approx(2.0 / 1048576.0).epsilon(1e-9));
  CHECK(table[1].rejected);
  CHECK_FALSE(table[1].best_equivalent);

  // Higher-is-better metrics pick the other end as reference.
  for (auto& r : rows) r.metric = "accuracy";
  CHECK(compare_methods(c, rows)[0].reference == "bad");
}

TEST_CASE("one FDR family per metric") {
  auto c = compare_config({"m0", "m1", "m2", "m3"}, PermutationMode::kSampled);
  c.stats.n_perm = 2000;
  std::vector<MetricRow> rows;
  const char* metrics[] = {"ece", "nll", "accuracy"};
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t m = 0; m < 4; ++m) {
      std::vector<double> v(12);
      for (std::size_t i = 0; i < 12; ++i) {
        v[i] = 0.3 + 0.02 * static_cast<double>(m) + 0.01 * std::sin(static_cast<double>(i * (m + k + 1)));
      }
      auto r = rows_for(metrics[k], "m" + std::to_string(m), v);
      rows.insert(rows.end(), r.begin(), r.end());
    }
  }
  const auto table = compare_methods(c, rows);
  CHECK(table.size() == 12);
  for (const char* metric : metrics) {
    std::vector<double> raw, adjusted;
    std::size_t references = 0;
    for (const auto& r : table) {
      if (r.metric != metric) continue;
      if (r.method == r.reference) {
        ++references;
      } else {
        raw.push_back(r.p_value);
        adjusted.push_back(r.adjusted_p);
      }
    }
    CHECK(references == 1);
    REQUIRE(raw.size() == 3);
    CHECK(by_fdr(raw, c.stats.alpha).adjusted_p == adjusted);
  }
}

TEST_CASE("baseline replaces the per-metric best") {
  auto c = compare_config({"a", "b", "c"});
  c.stats.baseline = "c";
  std::vector<MetricRow> rows;
  for (const char* m : {"a", "b", "c"}) {
    auto r = rows_for("brier", m, {0.1, 0.2, m[0] == 'c' ? 0.9 : 0.3});
    rows.insert(rows.end(), r.begin(), r.end());
  }
  for (const auto& r : compare_methods(c, rows)) CHECK(r.reference == "c");
}

TEST_CASE("misaligned units are an integrity error") {
  auto c = compare_config({"a", "b"});
  auto rows = rows_for("ece", "a", {0.1, 0.2, 0.3});
  auto b = rows_for("ece", "b", {0.1, 0.2});
  rows.insert(rows.end(), b.begin(), b.end());
  try {
    compare_methods(c, rows);
    FAIL("expected an integrity error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kIntegrity);
  }
  CHECK_THROWS_AS(compare_methods(compare_config({"a"}), rows), Error);
}

TEST_CASE("tables round trip exactly") {
  std::vector<MetricRow> rows = {{"p1_v1", "t0_d0_c0", "mmb", "ece", 0.1 + 0.2},
                                 {"p1_v1", "t0_d0_c0", "mmb", "nll", 1.0 / 3.0}};
  const auto back = metrics_from_csv(metrics_to_csv(rows));
  REQUIRE(back.size() == 2);
  CHECK(back[0].value == rows[0].value);
  CHECK(back[1].value == rows[1].value);
  CHECK_THROWS_AS(metrics_from_csv("wrong,header\n"), Error);
  CHECK_THROWS_AS(metrics_from_csv("cell,unit,method,metric,value\na,b,c,d\n"), Error);
  CHECK_THROWS_AS(metrics_from_csv("cell,unit,method,metric,value\na,b,c,d,zz\n"), Error);

  std::vector<ComparisonRow> cmp = {{"p1_v1", "ece", "a", "b", 0.25, 0.125, 0.5, 0.75, false, true}};
  const auto cmp_back = comparison_from_csv(comparison_to_csv(cmp));
  CHECK(comparison_to_csv(cmp_back) == comparison_to_csv(cmp));
}

TEST_CASE("subcommands persist everything the report needs") {
  TempDir dir("mmb_pipeline_cmds");
  const auto c = small_config(dir.path / "out");
  RunOptions options;
  cmd_fit(c, options);
  CHECK(fs::exists(dir.path / "out/weights/p3_v8/t0_d1_c0/mmb.json"));
  CHECK(fs::exists(dir.path / "out/fit_reports.csv"));
  const auto report = cmd_eval(c, options);
  cmd_compare(c, options);

  // Summary statistics recomputed from the persisted metric table match the
  // persisted summary byte for byte.
  const auto persisted = metrics_from_csv(read_file(dir.path / "out/eval/metrics.csv"));
  CHECK(summary_to_csv(summarize(c, persisted)) == read_file(dir.path / "out/eval/summary.csv"));
  CHECK(summary_to_csv(report.summary) == read_file(dir.path / "out/eval/summary.csv"));

  const auto table = cmd_report(c, options);
  CHECK(table.rfind("# mmb report\n", 0) == 0);
  CHECK(table.find("\"support_per_cluster\": 64") != std::string::npos);
  CHECK(table.find("p4_v8 (3 units)") != std::string::npos);
  options.format = ReportFormat::kCsv;
  const auto csv = cmd_report(c, options);
  CHECK(csv.find("cell,method,metric,mean,ci_low,ci_high,n,best_equivalent\n") != std::string::npos);
  CHECK(fs::exists(dir.path / "out/report.csv"));

  // Deleting a weight file breaks eval with an integrity error.
  fs::remove(dir.path / "out/weights/p4_v8/t0_d2_c0/bpe.json");
  try {
    cmd_eval(c, options);
    FAIL("expected an integrity error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kIntegrity);
    CHECK(std::string(e.what()).find("'bpe'") != std::string::npos);
  }
}
