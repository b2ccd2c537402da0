#include "mmb/ingest.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include "json.hpp"
#include "mmb/error.h"
#include "mmb/seed.h"

namespace mmb {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr std::string_view kBundleFormat = "mmb-bundle";

std::string line_context(std::size_t line) { return "line " + std::to_string(line) + ": "; }

// Python's json module writes NaN / Infinity / -Infinity as bare tokens. Quote
// them so the JSON parser accepts the line and the value check can reject it
// as a validation failure rather than a syntax error.
std::string quote_nonfinite_literals(std::string_view line) {
  std::string out;
  out.reserve(line.size() + 8);
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (in_string) {
      out.push_back(c);
      if (c == '\\' && i + 1 < line.size()) {
        out.push_back(line[++i]);
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"') {
      in_string = true;
      out.push_back(c);
      continue;
    }
    bool matched = false;
    for (std::string_view token : {"-Infinity", "Infinity", "NaN"}) {
      if (line.substr(i, token.size()) == token) {
        out.push_back('"');
        out.append(token);
        out.push_back('"');
        i += token.size() - 1;
        matched = true;
        break;
      }
    }
    if (!matched) out.push_back(c);
  }
  return out;
}

double parse_number(std::string_view text) {
  if (text == "NaN" || text == "nan") return std::nan("");
  if (text == "Infinity" || text == "inf") return HUGE_VAL;
  if (text == "-Infinity" || text == "-inf") return -HUGE_VAL;
  double value = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  while (first < last && (*first == ' ' || *first == '\t')) ++first;
  while (last > first && (last[-1] == ' ' || last[-1] == '\t' || last[-1] == '\r')) --last;
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || first == last) {
    fail(ErrorKind::kFormat, "not a number: '" + std::string(text) + "'");
  }
  return value;
}

double json_number(const ordered_json& value) {
  if (value.is_number()) return value.get<double>();
  if (value.is_string()) return parse_number(value.get<std::string>());
  fail(ErrorKind::kFormat, "expected a number");
}

std::vector<std::string> split_commas(std::string_view line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find(',', start);
    fields.emplace_back(line.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return fields;
}

bool blank_or_comment(std::string_view line) {
  auto pos = line.find_first_not_of(" \t\r");
  return pos == std::string_view::npos || line[pos] == '#';
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::kPath, "cannot open '" + path.string() + "'");
  return in;
}

}  // namespace

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kValidation: return "validation";
    case Split::kSupport: return "support";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(std::string_view text) {
  if (text == "validation" || text == "val") return Split::kValidation;
  if (text == "support" || text == "sup") return Split::kSupport;
  if (text == "test") return Split::kTest;
  fail(ErrorKind::kFormat, "unknown split '" + std::string(text) + "'");
}

std::string format_double(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, ptr);
}

std::vector<double> JudgeRecord::probs() const {
  std::vector<double> p(class_logprobs.size());
  std::transform(class_logprobs.begin(), class_logprobs.end(), p.begin(),
                 [](double lp) { return std::exp(lp); });
  return p;
}

std::vector<double> normalize_choice_logprobs(std::span<const double> raw) {
  require(raw.size() >= 2, ErrorKind::kArity, "need at least two option scores");
  for (double v : raw) {
    require(std::isfinite(v), ErrorKind::kValidation, "non-finite option score");
  }
  const double top = *std::max_element(raw.begin(), raw.end());
  std::vector<double> p(raw.size());
  double total = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    p[i] = std::exp(raw[i] - top);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

namespace {

std::vector<double> log_normalize(std::span<const double> raw) {
  const double top = *std::max_element(raw.begin(), raw.end());
  double total = 0.0;
  for (double v : raw) total += std::exp(v - top);
  const double log_z = top + std::log(total);
  // Already-normalized input is kept verbatim so that write/read round trips
  // are exact.
  if (std::abs(log_z) <= 4 * std::numeric_limits<double>::epsilon()) {
    return std::vector<double>(raw.begin(), raw.end());
  }
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = raw[i] - log_z;
  return out;
}

}  // namespace

std::vector<JudgeRecord> parse_judge_records(std::istream& in, RecordFormat format) {
  require(format == RecordFormat::kJsonLines, ErrorKind::kArgument, "unsupported record format");
  std::vector<JudgeRecord> records;
  std::set<std::pair<std::string, std::string>> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank_or_comment(line)) continue;
    const std::string ctx = line_context(line_no);
    ordered_json obj;
    try {
      obj = ordered_json::parse(quote_nonfinite_literals(line));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kFormat, ctx + e.what());
    }
    if (!obj.is_object()) fail(ErrorKind::kFormat, ctx + "expected a JSON object");

    JudgeRecord rec;
    try {
      rec.sample_id = obj.at("sample_id").get<std::string>();
      rec.prompt_id = obj.at("prompt_id").get<std::string>();
      const auto& lps = obj.at("class_logprobs");
      if (!lps.is_array()) fail(ErrorKind::kFormat, "class_logprobs must be an array");
      std::vector<double> raw;
      for (const auto& v : lps) raw.push_back(json_number(v));
      for (double v : raw) {
        if (!std::isfinite(v)) fail(ErrorKind::kValidation, "non-finite log-probability");
      }
      if (raw.size() < 2) fail(ErrorKind::kValidation, "need at least two class log-probabilities");
      rec.class_logprobs = log_normalize(raw);
      if (auto it = obj.find("label"); it != obj.end() && !it->is_null()) {
        if (!it->is_number_integer()) fail(ErrorKind::kFormat, "label must be an integer");
        const int label = it->get<int>();
        if (label < 0 || label >= static_cast<int>(raw.size())) {
          fail(ErrorKind::kValidation, "label out of range");
        }
        rec.label = label;
      }
      if (auto it = obj.find("split"); it != obj.end() && !it->is_null()) {
        rec.split = parse_split(it->get<std::string>());
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kFormat, ctx + e.what());
    } catch (const Error& e) {
      fail(e.kind(), ctx + e.detail());
    }
    if (!seen.emplace(rec.sample_id, rec.prompt_id).second) {
      fail(ErrorKind::kIntegrity,
           ctx + "duplicate record (" + rec.sample_id + ", " + rec.prompt_id + ")");
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<JudgeRecord> load_judge_records(const std::filesystem::path& path, RecordFormat format) {
  auto in = open_input(path);
  return parse_judge_records(in, format);
}

void write_judge_records(std::ostream& out, std::span<const JudgeRecord> records) {
  for (const auto& rec : records) {
    ordered_json obj;
    obj["sample_id"] = rec.sample_id;
    obj["prompt_id"] = rec.prompt_id;
    obj["class_logprobs"] = rec.class_logprobs;
    if (rec.label) obj["label"] = *rec.label;
    if (rec.split) obj["split"] = std::string(to_string(*rec.split));
    out << obj.dump() << '\n';
  }
}

void EmbeddingTable::add(const std::string& sample_id, std::span<const double> values) {
  require(!values.empty(), ErrorKind::kDimension, "empty embedding for '" + sample_id + "'");
  if (ids_.empty()) dim_ = values.size();
  require(values.size() == dim_, ErrorKind::kDimension,
          "embedding for '" + sample_id + "' has dimension " + std::to_string(values.size()) +
              ", expected " + std::to_string(dim_));
  bool nonzero = false;
  for (double v : values) {
    require(std::isfinite(v), ErrorKind::kValidation, "non-finite embedding value for '" + sample_id + "'");
    nonzero = nonzero || v != 0.0;
  }
  require(nonzero, ErrorKind::kValidation, "all-zero embedding for '" + sample_id + "'");
  require(!index_.contains(sample_id), ErrorKind::kIntegrity, "duplicate embedding for '" + sample_id + "'");
  index_.emplace(sample_id, ids_.size());
  ids_.push_back(sample_id);
  values_.insert(values_.end(), values.begin(), values.end());
}

std::span<const double> EmbeddingTable::at(const std::string& sample_id) const {
  auto it = index_.find(sample_id);
  require(it != index_.end(), ErrorKind::kIntegrity, "no embedding for sample '" + sample_id + "'");
  return {values_.data() + it->second * dim_, dim_};
}

EmbeddingTable parse_embeddings(std::istream& in) {
  EmbeddingTable table;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank_or_comment(line)) continue;
    const std::string ctx = line_context(line_no);
    std::string id;
    std::vector<double> values;
    const auto first = line.find_first_not_of(" \t");
    try {
      if (line[first] == '{') {
        ordered_json obj;
        try {
          obj = ordered_json::parse(quote_nonfinite_literals(line));
          id = obj.at("sample_id").get<std::string>();
          for (const auto& v : obj.at("embedding")) values.push_back(json_number(v));
        } catch (const nlohmann::json::exception& e) {
          fail(ErrorKind::kFormat, e.what());
        }
      } else {
        auto fields = split_commas(line);
        id = fields.front();
        for (std::size_t i = 1; i < fields.size(); ++i) values.push_back(parse_number(fields[i]));
      }
      if (id.empty()) fail(ErrorKind::kFormat, "empty sample id");
      table.add(id, values);
    } catch (const Error& e) {
      fail(e.kind(), ctx + e.detail());
    }
  }
  return table;
}

EmbeddingTable load_embeddings(const std::filesystem::path& path) {
  auto in = open_input(path);
  return parse_embeddings(in);
}

void write_embeddings_csv(std::ostream& out, const EmbeddingTable& table) {
  for (const auto& id : table.ids()) {
    out << id;
    for (double v : table.at(id)) out << ',' << format_double(v);
    out << '\n';
  }
}

DatasetBundle::DatasetBundle(std::vector<JudgeRecord> records, EmbeddingTable embeddings,
                             std::vector<std::string> prompt_ids)
    : records_(std::move(records)), embeddings_(std::move(embeddings)),
      prompt_ids_(std::move(prompt_ids)) {
  const bool infer_prompts = prompt_ids_.empty();
  for (std::size_t i = 0; i < prompt_ids_.size(); ++i) {
    require(prompt_index_.emplace(prompt_ids_[i], i).second, ErrorKind::kIntegrity,
            "duplicate prompt id '" + prompt_ids_[i] + "'");
  }
  std::unordered_map<std::string, std::optional<Split>> hints;
  for (std::size_t r = 0; r < records_.size(); ++r) {
    const auto& rec = records_[r];
    if (num_classes_ == 0) num_classes_ = rec.class_logprobs.size();
    require(rec.class_logprobs.size() == num_classes_, ErrorKind::kValidation,
            "record (" + rec.sample_id + ", " + rec.prompt_id + ") has a different class count");
    if (!prompt_index_.contains(rec.prompt_id)) {
      require(infer_prompts, ErrorKind::kIntegrity, "record uses unknown prompt '" + rec.prompt_id + "'");
      prompt_index_.emplace(rec.prompt_id, prompt_ids_.size());
      prompt_ids_.push_back(rec.prompt_id);
    }
    auto [it, inserted] = by_sample_.try_emplace(rec.sample_id);
    if (inserted) {
      sample_ids_.push_back(rec.sample_id);
      it->second.assign(prompt_ids_.size(), SIZE_MAX);
      hints[rec.sample_id] = rec.split;
    } else {
      require(hints[rec.sample_id] == rec.split, ErrorKind::kIntegrity,
              "conflicting split hints for sample '" + rec.sample_id + "'");
      const auto& first = records_[*std::find_if(it->second.begin(), it->second.end(),
                                                 [](std::size_t v) { return v != SIZE_MAX; })];
      require(first.label == rec.label, ErrorKind::kIntegrity,
              "conflicting labels for sample '" + rec.sample_id + "'");
    }
    const std::size_t p = prompt_index_.at(rec.prompt_id);
    if (it->second.size() <= p) it->second.resize(p + 1, SIZE_MAX);
    require(it->second[p] == SIZE_MAX, ErrorKind::kIntegrity,
            "duplicate record (" + rec.sample_id + ", " + rec.prompt_id + ")");
    it->second[p] = r;
  }
  for (auto& [id, slots] : by_sample_) slots.resize(prompt_ids_.size(), SIZE_MAX);
  for (const auto& id : sample_ids_) {
    const auto& hint = hints[id];
    if (hint == Split::kTest) splits_.test.push_back(id);
    if (hint == Split::kValidation) splits_.validation.push_back(id);
  }
  check_splits(splits_);
}

const JudgeRecord* DatasetBundle::find(const std::string& sample_id,
                                       const std::string& prompt_id) const {
  auto s = by_sample_.find(sample_id);
  auto p = prompt_index_.find(prompt_id);
  if (s == by_sample_.end() || p == prompt_index_.end()) return nullptr;
  const std::size_t r = s->second[p->second];
  return r == SIZE_MAX ? nullptr : &records_[r];
}

std::optional<int> DatasetBundle::label(const std::string& sample_id) const {
  auto s = by_sample_.find(sample_id);
  if (s == by_sample_.end()) return std::nullopt;
  for (std::size_t r : s->second) {
    if (r != SIZE_MAX) return records_[r].label;
  }
  return std::nullopt;
}

bool DatasetBundle::prompt_complete(const std::string& sample_id,
                                    std::span<const std::string> prompt_ids) const {
  for (const auto& p : prompt_ids) {
    if (find(sample_id, p) == nullptr) return false;
  }
  return !prompt_ids.empty();
}

Matrix DatasetBundle::class_probs(const std::string& sample_id,
                                  std::span<const std::string> prompt_ids) const {
  Matrix out(prompt_ids.size(), num_classes_);
  for (std::size_t i = 0; i < prompt_ids.size(); ++i) {
    const JudgeRecord* rec = find(sample_id, prompt_ids[i]);
    require(rec != nullptr, ErrorKind::kIntegrity,
            "sample '" + sample_id + "' has no record for prompt '" + prompt_ids[i] + "'");
    for (std::size_t c = 0; c < num_classes_; ++c) out(i, c) = std::exp(rec->class_logprobs[c]);
  }
  return out;
}

DatasetBundle DatasetBundle::with_splits(Splits splits) const {
  check_splits(splits);
  DatasetBundle out = *this;
  out.splits_ = std::move(splits);
  return out;
}

void DatasetBundle::check_splits(const Splits& splits) const {
  std::unordered_set<std::string> val(splits.validation.begin(), splits.validation.end());
  require(val.size() == splits.validation.size(), ErrorKind::kIntegrity, "duplicate validation id");
  for (const auto& id : splits.validation) {
    require(label(id).has_value(), ErrorKind::kIntegrity, "validation sample '" + id + "' is unlabeled");
    require(prompt_complete(id), ErrorKind::kIntegrity,
            "validation sample '" + id + "' lacks records for some prompts");
  }
  std::unordered_set<std::string> test;
  for (const auto& id : splits.test) {
    require(test.insert(id).second, ErrorKind::kIntegrity, "duplicate test id '" + id + "'");
    require(!val.contains(id), ErrorKind::kIntegrity, "sample '" + id + "' is in validation and test");
    require(prompt_complete(id), ErrorKind::kIntegrity,
            "test sample '" + id + "' lacks records for some prompts");
  }
  std::unordered_set<std::string> sup;
  for (const auto& id : splits.support) {
    require(sup.insert(id).second, ErrorKind::kIntegrity, "duplicate support id '" + id + "'");
    require(!val.contains(id), ErrorKind::kIntegrity, "sample '" + id + "' is in validation and support");
    require(embeddings_.contains(id), ErrorKind::kIntegrity, "support sample '" + id + "' has no embedding");
  }
}

namespace {

template <typename T>
void shuffle_with_seed(std::vector<T>& items, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::shuffle(items.begin(), items.end(), rng);
}

}  // namespace

std::vector<std::string> select_validation(const DatasetBundle& bundle, std::uint64_t seed,
                                           std::size_t n_val,
                                           std::span<const std::string> prompt_ids) {
  std::unordered_set<std::string> reserved(bundle.splits().test.begin(), bundle.splits().test.end());
  std::vector<std::string> eligible;
  for (const auto& id : bundle.sample_ids()) {
    if (reserved.contains(id) || !bundle.label(id) || !bundle.prompt_complete(id, prompt_ids)) continue;
    eligible.push_back(id);
  }
  require(eligible.size() >= n_val, ErrorKind::kCapacity,
          "need " + std::to_string(n_val) + " labeled prompt-complete samples for validation, have " +
              std::to_string(eligible.size()));
  shuffle_with_seed(eligible, seed);
  eligible.resize(n_val);
  return eligible;
}

std::vector<std::string> select_support(const DatasetBundle& bundle, std::uint64_t seed,
                                        std::size_t n_support,
                                        std::span<const std::string> exclude) {
  std::unordered_set<std::string> excluded(exclude.begin(), exclude.end());
  std::unordered_set<std::string> test(bundle.splits().test.begin(), bundle.splits().test.end());
  std::vector<std::string> preferred, fallback;
  for (const auto& id : bundle.embeddings().ids()) {
    if (excluded.contains(id)) continue;
    (test.contains(id) ? fallback : preferred).push_back(id);
  }
  require(preferred.size() + fallback.size() >= n_support, ErrorKind::kCapacity,
          "need " + std::to_string(n_support) + " embedded samples for support, have " +
              std::to_string(preferred.size() + fallback.size()));
  shuffle_with_seed(preferred, derive_seed(seed, {1}));
  shuffle_with_seed(fallback, derive_seed(seed, {2}));
  preferred.insert(preferred.end(), fallback.begin(), fallback.end());
  preferred.resize(n_support);
  return preferred;
}

DatasetBundle split_dataset(const DatasetBundle& bundle, std::uint64_t seed, std::size_t n_val,
                            std::size_t n_support) {
  Splits splits;
  splits.validation = select_validation(bundle, derive_seed(seed, {hash_tag("validation")}), n_val,
                                        bundle.prompt_ids());
  if (!bundle.splits().test.empty()) {
    splits.test = bundle.splits().test;
  } else {
    std::unordered_set<std::string> val(splits.validation.begin(), splits.validation.end());
    for (const auto& id : bundle.sample_ids()) {
      if (!val.contains(id) && bundle.label(id) && bundle.prompt_complete(id)) splits.test.push_back(id);
    }
  }
  splits.support = select_support(bundle, derive_seed(seed, {hash_tag("support")}), n_support,
                                  splits.validation);
  return bundle.with_splits(std::move(splits));
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::kPath, "cannot write '" + tmp.string() + "'");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    require(out.good(), ErrorKind::kPath, "short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::kPath, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_bundle(const std::filesystem::path& dir, const DatasetBundle& bundle) {
  std::ostringstream records, embeddings, splits;
  write_judge_records(records, bundle.records());
  write_embeddings_csv(embeddings, bundle.embeddings());
  auto emit = [&](Split s, const std::vector<std::string>& ids) {
    for (const auto& id : ids) splits << id << ',' << to_string(s) << '\n';
  };
  emit(Split::kValidation, bundle.splits().validation);
  emit(Split::kSupport, bundle.splits().support);
  emit(Split::kTest, bundle.splits().test);

  ordered_json manifest;
  manifest["format"] = kBundleFormat;
  manifest["version"] = 1;
  manifest["prompt_ids"] = bundle.prompt_ids();
  manifest["records"] = "records.jsonl";
  manifest["embeddings"] = "embeddings.csv";
  manifest["splits"] = "splits.csv";
  write_file_atomic(dir / "records.jsonl", records.str());
  write_file_atomic(dir / "embeddings.csv", embeddings.str());
  write_file_atomic(dir / "splits.csv", splits.str());
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

DatasetBundle load_bundle(const std::filesystem::path& dir) {
  ordered_json manifest;
  try {
    manifest = ordered_json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, "manifest.json: " + std::string(e.what()));
  }
  require(manifest.value("format", "") == kBundleFormat, ErrorKind::kFormat, "not a bundle manifest");
  auto records = load_judge_records(dir / manifest.value("records", "records.jsonl"));
  auto embeddings = load_embeddings(dir / manifest.value("embeddings", "embeddings.csv"));
  DatasetBundle bundle(std::move(records), std::move(embeddings),
                       manifest.at("prompt_ids").get<std::vector<std::string>>());
  Splits splits;
  std::istringstream in(read_file(dir / manifest.value("splits", "splits.csv")));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank_or_comment(line)) continue;
    auto fields = split_commas(line);
    require(fields.size() == 2, ErrorKind::kFormat, "splits.csv " + line_context(line_no) + "expected id,split");
    switch (parse_split(fields[1])) {
      case Split::kValidation: splits.validation.push_back(fields[0]); break;
      case Split::kSupport: splits.support.push_back(fields[0]); break;
      case Split::kTest: splits.test.push_back(fields[0]); break;
    }
  }
  return bundle.with_splits(std::move(splits));
}

}  // namespace mmb
