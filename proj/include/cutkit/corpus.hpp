#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cutkit::corpus {

enum class Polarity { POSITIVE, NEGATIVE };
enum class Source { OFFLINE_DATASET, MODEL_GENERATED };
enum class Category { ALIGN_P, ALIGN_N, MISALIGN };

inline constexpr std::string_view kPositiveKeyword = "Perfect.";
inline constexpr std::string_view kFakePositiveJudgment =
    "Your response to the instruction is satisfactory.";

// One (x, y, j) record.
struct JudgmentTriplet {
  std::string id;
  std::string instruction;
  std::string response;
  std::string judgment;
  Polarity polarity = Polarity::NEGATIVE;
  Source source = Source::OFFLINE_DATASET;
};

// A triplet recast into one of the three alignment-data categories. ids are
// derived from the source triplet id (#P / #N / #M suffix) so partner links
// resolve; ALIGN_N and MISALIGN reference each other.
struct AlignmentExample {
  std::string id;
  Category category = Category::ALIGN_P;
  std::string instruction;
  std::string response;
  std::string judgment;
  bool aligned_flag = true;
  std::string partner_id;  // empty for ALIGN_P
};

// Case-sensitive keyword-prefix rule after trimming leading whitespace.
Polarity classify_polarity(std::string_view judgment,
                           std::string_view positive_keyword = kPositiveKeyword);

// Throws DataError on empty fields or an explicit polarity that contradicts
// the keyword rule. `where` prefixes messages (e.g. "line 7").
void validate_triplet(const JudgmentTriplet& t, std::string_view positive_keyword = kPositiveKeyword,
                      std::string_view where = "");

// POSITIVE triplet -> ALIGN_P. NEGATIVE triplet -> ALIGN_N plus a MISALIGN
// twin carrying fake_positive_judgment in place of the authentic critique.
std::vector<AlignmentExample> build_alignment_set(
    std::span<const JudgmentTriplet> triplets,
    std::string_view fake_positive_judgment = kFakePositiveJudgment,
    std::string_view positive_keyword = kPositiveKeyword);

// Keeps floor(ratio * |ALIGN_P|) ALIGN_P examples, chosen by a seeded shuffle;
// every ALIGN_N / MISALIGN example is retained. Surviving examples keep their
// input order.
std::vector<AlignmentExample> downsample_align_p(const std::vector<AlignmentExample>& examples,
                                                 double ratio, uint64_t seed);

// Byte-exact {placeholder} substitution. Unknown or unterminated placeholders
// are errors naming the placeholder.
std::string render(std::string_view tmpl, const std::map<std::string, std::string>& fields);

// render plus the [begin, end) byte range each placeholder's value occupies in
// the output. With a character tokenizer these byte offsets are token offsets.
struct RenderedSpans {
  std::string text;
  std::map<std::string, std::pair<size_t, size_t>> spans;
};
RenderedSpans render_with_spans(std::string_view tmpl,
                                const std::map<std::string, std::string>& fields);

// Rendered text up to (and excluding) the named target field, which must be
// terminal so EOS lands directly after the scored bytes. Pass the target's
// value as "" when only the prefix is wanted.
std::string prompt_prefix(std::string_view tmpl, const std::map<std::string, std::string>& fields,
                          const std::string& target_name);

struct TemplateSet {
  std::string train;      // {instruction} {judgment} {response}, response last
  std::string inference;  // {instruction} {response}, response last
  std::string judge;      // {instruction} {response} {judgment}, judgment last
};
TemplateSet default_templates();
// Enforces the exact placeholder multiset per template and that the scored
// placeholder is terminal (EOS is appended directly after the target region).
void validate_templates(const TemplateSet& templates);

struct PreferencePair {
  std::string chosen;
  std::string rejected;
};
// All unordered pairs with strictly different rewards, chosen = higher reward.
std::vector<PreferencePair> enumerate_preference_pairs(
    std::span<const std::pair<std::string, double>> responses);

struct DatasetManifest {
  size_t align_p = 0, align_n = 0, misalign = 0;
  double downsample_ratio = 1.0;
  uint64_t seed = 0;
};
DatasetManifest manifest_of(std::span<const AlignmentExample> examples, double ratio,
                            uint64_t seed);

// JSONL I/O. Loading validates; saving round-trips losslessly.
std::vector<JudgmentTriplet> load_triplets(const std::filesystem::path& path,
                                           std::string_view positive_keyword = kPositiveKeyword);
void save_triplets(const std::filesystem::path& path, std::span<const JudgmentTriplet> triplets);
std::vector<AlignmentExample> load_examples(
    const std::filesystem::path& path, std::string_view positive_keyword = kPositiveKeyword,
    std::string_view fake_positive_judgment = kFakePositiveJudgment);
void save_examples(const std::filesystem::path& path, std::span<const AlignmentExample> examples);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

// Category/polarity/source names used in JSONL (and their inverses).
std::string_view to_string(Polarity p);
std::string_view to_string(Source s);
std::string_view to_string(Category c);
Polarity polarity_from_string(std::string_view s);
Source source_from_string(std::string_view s);
Category category_from_string(std::string_view s);

// id -> index for partner resolution. Duplicate ids are a DataError.
std::map<std::string, size_t> index_by_id(std::span<const AlignmentExample> examples);

// Cross-category invariants over a full example set (partner resolution,
// matching instruction/response, per-example category rules). A MISALIGN
// judgment may be positive by keyword or equal to the configured counterfeit.
void validate_examples(std::span<const AlignmentExample> examples,
                       std::string_view positive_keyword = kPositiveKeyword,
                       std::string_view fake_positive_judgment = kFakePositiveJudgment);

}  // namespace cutkit::corpus
