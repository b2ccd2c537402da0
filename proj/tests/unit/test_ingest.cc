#include <cmath>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>

#include "doctest.h"
#include "mmb/error.h"
#include "mmb/ingest.h"

using namespace mmb;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::kArgument;
}

std::vector<JudgeRecord> parse(const std::string& text) {
  std::istringstream in(text);
  return parse_judge_records(in);
}

EmbeddingTable parse_emb(const std::string& text) {
  std::istringstream in(text);
  return parse_embeddings(in);
}

JudgeRecord rec(const std::string& s, const std::string& p, double p0, std::optional<int> y,
                std::optional<Split> split = std::nullopt) {
  JudgeRecord r;
  r.sample_id = s;
  r.prompt_id = p;
  r.class_logprobs = {std::log(p0), std::log(1 - p0)};
  r.label = y;
  r.split = split;
  return r;
}

DatasetBundle grid_bundle(std::size_t n_samples, std::size_t n_prompts, std::size_t dim = 3) {
  std::vector<JudgeRecord> records;
  EmbeddingTable emb;
  for (std::size_t i = 0; i < n_samples; ++i) {
    const std::string id = "s" + std::to_string(i);
    for (std::size_t a = 0; a < n_prompts; ++a) {
      records.push_back(rec(id, "p" + std::to_string(a), 0.6 + 0.01 * a, static_cast<int>(i % 2)));
    }
    std::vector<double> v(dim, 0.1);
    v[i % dim] = 1.0 + static_cast<double>(i);
    emb.add(id, v);
  }
  return DatasetBundle(records, emb);
}

}  // namespace

TEST_CASE("normalize choice logprobs") {
  auto p = normalize_choice_logprobs(std::vector<double>{0.0, 0.0});
  CHECK(p == std::vector<double>{0.5, 0.5});
  p = normalize_choice_logprobs(std::vector<double>{std::log(3.0), 0.0});
  CHECK(p[0] == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(0.25).epsilon(1e-15));
  p = normalize_choice_logprobs(std::vector<double>{-1000.0, 0.0});
  CHECK(std::isfinite(p[0]));
  CHECK(p[0] < 1e-300);
  CHECK(p[1] == 1.0);
  CHECK(kind_of([] { normalize_choice_logprobs(std::vector<double>{0.3}); }) == ErrorKind::kArity);
}

TEST_CASE("normalization sums to one and ignores shifts") {
  const std::vector<double> raw = {-2.3, 0.7, -0.1, 4.2};
  auto shifted = raw;
  for (auto& x : shifted) x += 37.5;
  const auto a = normalize_choice_logprobs(raw);
  const auto b = normalize_choice_logprobs(shifted);
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    total += a[i];
    CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  }
  CHECK(std::abs(total - 1.0) <= 1e-12);
}

TEST_CASE("load judge records") {
  const auto records = parse(
      "{\"sample_id\": \"s1\", \"prompt_id\": \"p1\", \"class_logprobs\": [-0.1, -2.4], \"label\": 0}\n"
      "{\"sample_id\": \"s1\", \"prompt_id\": \"p2\", \"class_logprobs\": [-1.0, -0.5]}\n"
      "{\"sample_id\": \"s2\", \"prompt_id\": \"p1\", \"class_logprobs\": [0, 0], \"split\": \"test\"}\n");
  REQUIRE(records.size() == 3);
  CHECK(records[0].label == 0);
  CHECK_FALSE(records[1].label.has_value());
  CHECK(records[2].split == Split::kTest);
  const auto probs = records[2].probs();
  CHECK(probs[0] == doctest::Approx(0.5));
}

TEST_CASE("judge record errors") {
  CHECK(kind_of([] {
          parse("{\"sample_id\": \"s1\", \"prompt_id\": \"p1\", \"class_logprobs\": [-0.1, -2.4]}\n"
                "{\"sample_id\": \"s1\", \"prompt_id\": \"p1\", \"class_logprobs\": [-0.2, -2.4]}\n");
        }) == ErrorKind::kIntegrity);
  CHECK(kind_of([] {
          parse("{\"sample_id\": \"s1\", \"prompt_id\": \"p1\", \"class_logprobs\": [NaN, -2.4]}\n");
        }) == ErrorKind::kValidation);
  CHECK(kind_of([] {
          parse("{\"sample_id\": \"s1\", \"prompt_id\": \"p1\", \"class_logprobs\": [\"NaN\", -2.4]}\n");
        }) == ErrorKind::kValidation);
  CHECK(kind_of([] {
          parse("{\"sample_id\": \"s1\", \"prompt_id\": \"p1\", \"class_logprobs\": [-0.1, -2.4]}\n"
                "{\"sample_id\": \"s2\", \"prompt_id\": \"p1\", \"class_logprobs\": [-0.1, \n");
        }) == ErrorKind::kFormat);
  try {
    parse("\n{\"sample_id\": \"s1\", \"prompt_id\": \"p1\", \"class_logprobs\": [-0.1]}\n");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK(kind_of([] { load_judge_records("/nonexistent/records.jsonl"); }) == ErrorKind::kPath);
}

TEST_CASE("records round trip") {
  std::ostringstream first;
  const std::vector<JudgeRecord> raw = {rec("a", "p", 0.3, 1, Split::kTest), rec("b", "p", 0.9, std::nullopt)};
  write_judge_records(first, raw);
  const auto records = parse(first.str());
  std::ostringstream out;
  write_judge_records(out, records);
  const auto back = parse(out.str());
  REQUIRE(back.size() == 2);
  CHECK(back[0] == records[0]);
  CHECK(back[1] == records[1]);
}

TEST_CASE("load embeddings") {
  auto table = parse_emb("a,1,0,0,0\nb,0,1,0,0\n");
  CHECK(table.dim() == 4);
  CHECK(table.size() == 2);
  table = parse_emb("# comment\n{\"sample_id\": \"a\", \"embedding\": [1, 2]}\n\n{\"sample_id\": \"b\", \"embedding\": [3, 4]}\n");
  CHECK(table.dim() == 2);
  CHECK(table.at("b")[1] == 4.0);
  CHECK(kind_of([] { parse_emb("a,1,0,0,0\nb,0,1,0,0,1\n"); }) == ErrorKind::kDimension);
  CHECK(kind_of([] { parse_emb("a,0,0,0,0\n"); }) == ErrorKind::kValidation);
  CHECK(kind_of([] { parse_emb("a,1,0\na,0,1\n"); }) == ErrorKind::kIntegrity);
  CHECK(kind_of([] { parse_emb("a,1,x\n"); }) == ErrorKind::kFormat);
}

TEST_CASE("embeddings round trip exactly") {
  EmbeddingTable t;
  t.add("x", std::vector<double>{0.1, 1.0 / 3.0, -2.5e-17});
  t.add("y", std::vector<double>{3.0, 4.0, 5.0});
  std::ostringstream out;
  write_embeddings_csv(out, t);
  CHECK(parse_emb(out.str()) == t);
}

TEST_CASE("bundle invariants") {
  // prompt coverage mismatch on a test sample
  std::vector<JudgeRecord> records = {rec("a", "p0", 0.6, 0, Split::kTest), rec("a", "p1", 0.6, 0, Split::kTest),
                                      rec("b", "p0", 0.6, 1, Split::kTest)};
  CHECK_THROWS_AS(DatasetBundle(records, EmbeddingTable{}), Error);
  records.push_back(rec("b", "p1", 0.4, 1, Split::kTest));
  DatasetBundle ok(records, EmbeddingTable{});
  CHECK(ok.splits().test == std::vector<std::string>{"a", "b"});
  for (const auto& id : ok.splits().test) CHECK(ok.prompt_complete(id));
  // conflicting labels across prompts
  records.push_back(rec("c", "p0", 0.6, 0));
  records.push_back(rec("c", "p1", 0.6, 1));
  CHECK(kind_of([&] { DatasetBundle(records, EmbeddingTable{}); }) == ErrorKind::kIntegrity);
}

TEST_CASE("split dataset") {
  const auto bundle = grid_bundle(100, 3);
  const auto a = split_dataset(bundle, 7, 20, 30);
  const auto b = split_dataset(bundle, 7, 20, 30);
  CHECK(a.splits() == b.splits());
  CHECK(a.splits().validation.size() == 20);
  CHECK(a.splits().support.size() == 30);
  for (const auto& id : a.splits().validation) {
    CHECK(a.label(id).has_value());
    CHECK(a.prompt_complete(id));
  }
  const auto c = split_dataset(bundle, 8, 20, 30);
  CHECK_FALSE(c.splits().validation == a.splits().validation);
  CHECK(kind_of([] { split_dataset(grid_bundle(4, 2), 1, 5, 0); }) == ErrorKind::kCapacity);
}

TEST_CASE("support sizing for two clusters") {
  const auto bundle = grid_bundle(600, 2);
  const auto split = split_dataset(bundle, 3, 20, default_support_size(2));
  CHECK(split.splits().support.size() == 512);
  std::set<std::string> val(split.splits().validation.begin(), split.splits().validation.end());
  for (const auto& id : split.splits().support) CHECK_FALSE(val.contains(id));
}

TEST_CASE("bundle save and load round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "mmb_test_bundle";
  std::filesystem::remove_all(dir);
  const auto bundle = split_dataset(grid_bundle(40, 3), 5, 10, 12);
  save_bundle(dir, bundle);
  const auto back = load_bundle(dir);
  CHECK(back == bundle);
  std::filesystem::remove_all(dir);
}

TEST_CASE("class probabilities require every prompt") {
  const auto bundle = grid_bundle(3, 2);
  const std::vector<std::string> prompts = {"p0", "p9"};
  CHECK(kind_of([&] { bundle.class_probs("s0", prompts); }) == ErrorKind::kIntegrity);
  const auto m = bundle.class_probs("s0", bundle.prompt_ids());
  CHECK(m.rows() == 2);
  CHECK(m(1, 0) == doctest::Approx(0.61));
}

TEST_CASE("atomic writes replace the target") {
  const auto path = std::filesystem::temp_directory_path() / "mmb_atomic.txt";
  write_file_atomic(path, "first");
  write_file_atomic(path, "second");
  CHECK(read_file(path) == "second");
  std::filesystem::remove(path);
}

TEST_CASE("format_double round trips") {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5, 0.0, 123456789.125}) {
    CHECK(std::stod(format_double(v)) == v);
  }
}
