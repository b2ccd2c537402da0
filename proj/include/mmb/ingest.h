#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mmb/matrix.h"

namespace mmb {

enum class Split { kValidation, kSupport, kTest };

std::string_view to_string(Split split);
Split parse_split(std::string_view text);

// One judge invocation. class_logprobs are stored normalized (log-softmax of
// the raw option scores), so exp() of them sums to one.
struct JudgeRecord {
  std::string sample_id;
  std::string prompt_id;
  std::vector<double> class_logprobs;
  std::optional<int> label;
  std::optional<Split> split;

  std::vector<double> probs() const;
  bool operator==(const JudgeRecord&) const = default;
};

// Sample id -> dense vector of fixed dimension. Insertion order is kept so
// that iteration (and everything seeded downstream) is deterministic.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;

  // Throws kDimension on a dimension mismatch, kValidation on a zero or
  // non-finite vector, kIntegrity on a duplicate id.
  void add(const std::string& sample_id, std::span<const double> values);

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  bool contains(const std::string& sample_id) const { return index_.contains(sample_id); }
  std::span<const double> at(const std::string& sample_id) const;
  const std::vector<std::string>& ids() const { return ids_; }

  bool operator==(const EmbeddingTable& other) const {
    return dim_ == other.dim_ && ids_ == other.ids_ && values_ == other.values_;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<double> values_;
};

struct Splits {
  std::vector<std::string> validation;
  std::vector<std::string> support;
  std::vector<std::string> test;

  bool operator==(const Splits&) const = default;
};

// Judge records grouped by sample, the embeddings, the ordered prompt set and
// the split assignment. Immutable once built.
class DatasetBundle {
 public:
  DatasetBundle() = default;

  // prompt_ids defaults to first-appearance order in the records. Test and
  // validation hints carried by the records' split fields seed the splits.
  DatasetBundle(std::vector<JudgeRecord> records, EmbeddingTable embeddings,
                std::vector<std::string> prompt_ids = {});

  const std::vector<JudgeRecord>& records() const { return records_; }
  const EmbeddingTable& embeddings() const { return embeddings_; }
  const std::vector<std::string>& prompt_ids() const { return prompt_ids_; }
  const Splits& splits() const { return splits_; }
  std::size_t num_classes() const { return num_classes_; }

  // Samples that have at least one record, in first-appearance order.
  const std::vector<std::string>& sample_ids() const { return sample_ids_; }

  const JudgeRecord* find(const std::string& sample_id, const std::string& prompt_id) const;
  std::optional<int> label(const std::string& sample_id) const;
  bool has_records(const std::string& sample_id) const { return by_sample_.contains(sample_id); }
  bool prompt_complete(const std::string& sample_id,
                       std::span<const std::string> prompt_ids) const;
  bool prompt_complete(const std::string& sample_id) const {
    return prompt_complete(sample_id, prompt_ids_);
  }

  // Row i holds the class probabilities emitted under prompt_ids[i].
  // Missing records are an integrity error.
  Matrix class_probs(const std::string& sample_id, std::span<const std::string> prompt_ids) const;

  // Returns a copy with the given splits after checking them: validation is
  // labeled and prompt-complete, test is prompt-complete, support samples are
  // embedded, validation is disjoint from support and test.
  DatasetBundle with_splits(Splits splits) const;

  bool operator==(const DatasetBundle& other) const {
    return records_ == other.records_ && embeddings_ == other.embeddings_ &&
           prompt_ids_ == other.prompt_ids_ && splits_ == other.splits_;
  }

 private:
  void check_splits(const Splits& splits) const;

  std::vector<JudgeRecord> records_;
  EmbeddingTable embeddings_;
  std::vector<std::string> prompt_ids_;
  Splits splits_;
  std::size_t num_classes_ = 0;
  std::vector<std::string> sample_ids_;
  std::unordered_map<std::string, std::vector<std::size_t>> by_sample_;
  std::unordered_map<std::string, std::size_t> prompt_index_;
};

enum class RecordFormat { kJsonLines };

// Softmax with max-subtraction over raw option log-scores.
std::vector<double> normalize_choice_logprobs(std::span<const double> raw);

std::vector<JudgeRecord> parse_judge_records(std::istream& in,
                                             RecordFormat format = RecordFormat::kJsonLines);
std::vector<JudgeRecord> load_judge_records(const std::filesystem::path& path,
                                            RecordFormat format = RecordFormat::kJsonLines);
void write_judge_records(std::ostream& out, std::span<const JudgeRecord> records);

// Accepts "sample_id,v1,...,vd" rows or one JSON object per line with keys
// sample_id and embedding. Blank lines and lines starting with '#' are skipped.
EmbeddingTable parse_embeddings(std::istream& in);
EmbeddingTable load_embeddings(const std::filesystem::path& path);
void write_embeddings_csv(std::ostream& out, const EmbeddingTable& table);

void save_bundle(const std::filesystem::path& dir, const DatasetBundle& bundle);
DatasetBundle load_bundle(const std::filesystem::path& dir);

// Validation samples are drawn from labeled, prompt-complete samples that are
// not reserved for test. Test defaults to all remaining eligible samples when
// the records reserve none.
std::vector<std::string> select_validation(const DatasetBundle& bundle, std::uint64_t seed,
                                           std::size_t n_val,
                                           std::span<const std::string> prompt_ids);

// Support samples need embeddings only. Non-test samples are preferred; test
// ids are used only once those run out.
std::vector<std::string> select_support(const DatasetBundle& bundle, std::uint64_t seed,
                                        std::size_t n_support,
                                        std::span<const std::string> exclude);

DatasetBundle split_dataset(const DatasetBundle& bundle, std::uint64_t seed, std::size_t n_val,
                            std::size_t n_support);

// Support set size used by the experiments: 256 samples per cluster.
constexpr std::size_t default_support_size(std::size_t k) { return 256 * k; }

// Writes to a sibling temporary and renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);
std::string format_double(double value);

}  // namespace mmb
