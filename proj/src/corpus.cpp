#include "cutkit/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "cutkit/error.hpp"
#include "cutkit/jsonl.hpp"
#include "cutkit/rng.hpp"

namespace cutkit::corpus {
namespace {

std::string_view ltrim(std::string_view s) {
  size_t i = 0;
  while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\n' || s[i] == '\r')) ++i;
  return s.substr(i);
}

bool blank(std::string_view s) { return ltrim(s).empty(); }

std::string where_prefix(std::string_view where) {
  return where.empty() ? std::string() : std::string(where) + ": ";
}

}  // namespace

std::string_view to_string(Polarity p) {
  return p == Polarity::POSITIVE ? "POSITIVE" : "NEGATIVE";
}
std::string_view to_string(Source s) {
  return s == Source::OFFLINE_DATASET ? "OFFLINE_DATASET" : "MODEL_GENERATED";
}
std::string_view to_string(Category c) {
  switch (c) {
    case Category::ALIGN_P: return "ALIGN_P";
    case Category::ALIGN_N: return "ALIGN_N";
    default: return "MISALIGN";
  }
}

Polarity polarity_from_string(std::string_view s) {
  if (s == "POSITIVE") return Polarity::POSITIVE;
  if (s == "NEGATIVE") return Polarity::NEGATIVE;
  throw DataError("unknown polarity '" + std::string(s) + "'");
}
Source source_from_string(std::string_view s) {
  if (s == "OFFLINE_DATASET") return Source::OFFLINE_DATASET;
  if (s == "MODEL_GENERATED") return Source::MODEL_GENERATED;
  throw DataError("unknown source '" + std::string(s) + "'");
}
Category category_from_string(std::string_view s) {
  if (s == "ALIGN_P") return Category::ALIGN_P;
  if (s == "ALIGN_N") return Category::ALIGN_N;
  if (s == "MISALIGN") return Category::MISALIGN;
  throw DataError("unknown category '" + std::string(s) + "'");
}

Polarity classify_polarity(std::string_view judgment, std::string_view positive_keyword) {
  if (blank(judgment)) throw DataError("cannot classify an empty judgment");
  return ltrim(judgment).starts_with(positive_keyword) ? Polarity::POSITIVE : Polarity::NEGATIVE;
}

void validate_triplet(const JudgmentTriplet& t, std::string_view positive_keyword,
                      std::string_view where) {
  std::string w = where_prefix(where);
  if (blank(t.id)) throw DataError(w + "triplet id is empty");
  if (blank(t.instruction)) throw DataError(w + "triplet '" + t.id + "' has an empty instruction");
  if (blank(t.response)) throw DataError(w + "triplet '" + t.id + "' has an empty response");
  if (blank(t.judgment)) throw DataError(w + "triplet '" + t.id + "' has an empty judgment");
  Polarity derived = classify_polarity(t.judgment, positive_keyword);
  if (derived != t.polarity) {
    throw DataError(w + "triplet '" + t.id + "' declares polarity " +
                    std::string(to_string(t.polarity)) + " but its judgment classifies as " +
                    std::string(to_string(derived)));
  }
}

std::vector<AlignmentExample> build_alignment_set(std::span<const JudgmentTriplet> triplets,
                                                  std::string_view fake_positive_judgment,
                                                  std::string_view positive_keyword) {
  // The counterfeit judgment is positive by construction, not by the keyword
  // rule (the default string carries no keyword); it only needs to be usable.
  if (blank(fake_positive_judgment)) {
    throw UsageError("fake positive judgment must be non-empty");
  }
  std::vector<AlignmentExample> out;
  out.reserve(triplets.size() * 2);
  for (const JudgmentTriplet& t : triplets) {
    validate_triplet(t, positive_keyword);
    if (t.polarity == Polarity::POSITIVE) {
      out.push_back({t.id + "#P", Category::ALIGN_P, t.instruction, t.response, t.judgment, true,
                     ""});
    } else {
      out.push_back({t.id + "#N", Category::ALIGN_N, t.instruction, t.response, t.judgment, false,
                     t.id + "#M"});
      out.push_back({t.id + "#M", Category::MISALIGN, t.instruction, t.response,
                     std::string(fake_positive_judgment), false, t.id + "#N"});
    }
  }
  return out;
}

std::vector<AlignmentExample> downsample_align_p(const std::vector<AlignmentExample>& examples,
                                                 double ratio, uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw UsageError("downsample ratio must lie in [0, 1], got " + std::to_string(ratio));
  }
  std::vector<size_t> p_indices;
  for (size_t i = 0; i < examples.size(); ++i) {
    if (examples[i].category == Category::ALIGN_P) p_indices.push_back(i);
  }
  size_t keep = static_cast<size_t>(std::floor(ratio * static_cast<double>(p_indices.size()) + 1e-9));
  auto g = rng::engine(seed);
  rng::shuffle(p_indices, g);
  std::set<size_t> kept(p_indices.begin(), p_indices.begin() + static_cast<ptrdiff_t>(keep));
  std::vector<AlignmentExample> out;
  out.reserve(examples.size());
  for (size_t i = 0; i < examples.size(); ++i) {
    if (examples[i].category != Category::ALIGN_P || kept.count(i) != 0) out.push_back(examples[i]);
  }
  return out;
}

namespace {

// Shared renderer. Placeholder names are [A-Za-z_]+ between single braces.
RenderedSpans render_impl(std::string_view tmpl, const std::map<std::string, std::string>& fields) {
  RenderedSpans out;
  out.text.reserve(tmpl.size());
  size_t i = 0;
  while (i < tmpl.size()) {
    char c = tmpl[i];
    if (c != '{') {
      out.text.push_back(c);
      ++i;
      continue;
    }
    size_t close = tmpl.find('}', i + 1);
    if (close == std::string_view::npos) {
      throw UsageError("unterminated '{' at byte " + std::to_string(i) + " in template");
    }
    std::string name(tmpl.substr(i + 1, close - i - 1));
    if (name.empty()) throw UsageError("empty placeholder '{}' in template");
    auto it = fields.find(name);
    if (it == fields.end()) {
      throw UsageError("template placeholder '" + name + "' has no value");
    }
    size_t begin = out.text.size();
    out.text += it->second;
    out.spans[name] = {begin, out.text.size()};
    i = close + 1;
  }
  return out;
}

}  // namespace

std::string render(std::string_view tmpl, const std::map<std::string, std::string>& fields) {
  return render_impl(tmpl, fields).text;
}

RenderedSpans render_with_spans(std::string_view tmpl,
                                const std::map<std::string, std::string>& fields) {
  return render_impl(tmpl, fields);
}

std::string prompt_prefix(std::string_view tmpl, const std::map<std::string, std::string>& fields,
                          const std::string& target_name) {
  RenderedSpans r = render_with_spans(tmpl, fields);
  auto it = r.spans.find(target_name);
  if (it == r.spans.end()) throw UsageError("template is missing {" + target_name + "}");
  if (it->second.second != r.text.size()) {
    throw UsageError("{" + target_name + "} must be the final template field");
  }
  r.text.resize(it->second.first);
  return std::move(r.text);
}

TemplateSet default_templates() {
  TemplateSet t;
  t.train = "### Instruction:\n{instruction}\n### Judgment:\n{judgment}\n### Response:\n{response}";
  t.inference = "### Instruction:\n{instruction}\n### Response:\n{response}";
  t.judge = "### Instruction:\n{instruction}\n### Response:\n{response}\n### Judgment:\n{judgment}";
  return t;
}

namespace {

std::vector<std::string> placeholders_of(std::string_view tmpl) {
  std::vector<std::string> names;
  size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] != '{') {
      ++i;
      continue;
    }
    size_t close = tmpl.find('}', i + 1);
    if (close == std::string_view::npos) {
      throw UsageError("unterminated '{' at byte " + std::to_string(i) + " in template");
    }
    names.emplace_back(tmpl.substr(i + 1, close - i - 1));
    i = close + 1;
  }
  return names;
}

void check_template(std::string_view label, std::string_view tmpl,
                    const std::vector<std::string>& expected, std::string_view terminal) {
  std::vector<std::string> found = placeholders_of(tmpl);
  std::vector<std::string> sorted_found = found, sorted_expected = expected;
  std::sort(sorted_found.begin(), sorted_found.end());
  std::sort(sorted_expected.begin(), sorted_expected.end());
  if (sorted_found != sorted_expected) {
    std::string want;
    for (const auto& e : expected) want += "{" + e + "} ";
    throw UsageError(std::string(label) + " template must contain exactly " + want +
                     "each exactly once");
  }
  std::string tail = "{" + std::string(terminal) + "}";
  if (!tmpl.ends_with(tail)) {
    throw UsageError(std::string(label) + " template must end with " + tail +
                     " (the scored region is terminal; EOS follows it directly)");
  }
}

}  // namespace

void validate_templates(const TemplateSet& templates) {
  check_template("train", templates.train, {"instruction", "judgment", "response"}, "response");
  check_template("inference", templates.inference, {"instruction", "response"}, "response");
  check_template("judge", templates.judge, {"instruction", "response", "judgment"}, "judgment");
}

std::vector<PreferencePair> enumerate_preference_pairs(
    std::span<const std::pair<std::string, double>> responses) {
  if (responses.size() < 2) {
    throw DataError("preference enumeration needs at least 2 responses, got " +
                    std::to_string(responses.size()));
  }
  std::vector<PreferencePair> out;
  for (size_t i = 0; i < responses.size(); ++i) {
    for (size_t j = i + 1; j < responses.size(); ++j) {
      if (responses[i].second == responses[j].second) continue;
      if (responses[i].second > responses[j].second) {
        out.push_back({responses[i].first, responses[j].first});
      } else {
        out.push_back({responses[j].first, responses[i].first});
      }
    }
  }
  return out;
}

DatasetManifest manifest_of(std::span<const AlignmentExample> examples, double ratio,
                            uint64_t seed) {
  DatasetManifest m;
  m.downsample_ratio = ratio;
  m.seed = seed;
  for (const auto& e : examples) {
    switch (e.category) {
      case Category::ALIGN_P: ++m.align_p; break;
      case Category::ALIGN_N: ++m.align_n; break;
      case Category::MISALIGN: ++m.misalign; break;
    }
  }
  return m;
}

std::vector<JudgmentTriplet> load_triplets(const std::filesystem::path& path,
                                           std::string_view positive_keyword) {
  std::vector<nlohmann::json> rows = jsonl::load(path);
  std::vector<JudgmentTriplet> out;
  out.reserve(rows.size());
  std::set<std::string> seen_ids;
  for (size_t i = 0; i < rows.size(); ++i) {
    std::string where = path.string() + " line " + std::to_string(i + 1);
    const auto& r = rows[i];
    JudgmentTriplet t;
    try {
      t.id = r.at("id").get<std::string>();
      t.instruction = r.at("instruction").get<std::string>();
      t.response = r.at("response").get<std::string>();
      t.judgment = r.at("judgment").get<std::string>();
      if (r.contains("source")) t.source = source_from_string(r.at("source").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
    if (r.contains("polarity")) {
      t.polarity = polarity_from_string(r.at("polarity").get<std::string>());
    } else {
      t.polarity = classify_polarity(t.judgment, positive_keyword);
    }
    validate_triplet(t, positive_keyword, where);
    if (!seen_ids.insert(t.id).second) {
      throw DataError(where + ": duplicate triplet id '" + t.id + "'");
    }
    out.push_back(std::move(t));
  }
  return out;
}

void save_triplets(const std::filesystem::path& path, std::span<const JudgmentTriplet> triplets) {
  std::vector<nlohmann::json> rows;
  rows.reserve(triplets.size());
  for (const auto& t : triplets) {
    rows.push_back({{"id", t.id},
                    {"instruction", t.instruction},
                    {"response", t.response},
                    {"judgment", t.judgment},
                    {"polarity", to_string(t.polarity)},
                    {"source", to_string(t.source)}});
  }
  jsonl::save(path, rows);
}

std::vector<AlignmentExample> load_examples(const std::filesystem::path& path,
                                            std::string_view positive_keyword,
                                            std::string_view fake_positive_judgment) {
  std::vector<nlohmann::json> rows = jsonl::load(path);
  std::vector<AlignmentExample> out;
  out.reserve(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    std::string where = path.string() + " line " + std::to_string(i + 1);
    const auto& r = rows[i];
    AlignmentExample e;
    try {
      e.id = r.at("id").get<std::string>();
      e.category = category_from_string(r.at("category").get<std::string>());
      e.instruction = r.at("instruction").get<std::string>();
      e.response = r.at("response").get<std::string>();
      e.judgment = r.at("judgment").get<std::string>();
      e.aligned_flag = r.at("aligned_flag").get<bool>();
      if (r.contains("partner_id")) e.partner_id = r.at("partner_id").get<std::string>();
    } catch (const nlohmann::json::exception& ex) {
      throw DataError(where + ": " + ex.what());
    }
    out.push_back(std::move(e));
  }
  validate_examples(out, positive_keyword, fake_positive_judgment);
  return out;
}

void save_examples(const std::filesystem::path& path, std::span<const AlignmentExample> examples) {
  std::vector<nlohmann::json> rows;
  rows.reserve(examples.size());
  for (const auto& e : examples) {
    nlohmann::json r = {{"id", e.id},
                        {"category", to_string(e.category)},
                        {"instruction", e.instruction},
                        {"response", e.response},
                        {"judgment", e.judgment},
                        {"aligned_flag", e.aligned_flag}};
    if (!e.partner_id.empty()) r["partner_id"] = e.partner_id;
    rows.push_back(std::move(r));
  }
  jsonl::save(path, rows);
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  nlohmann::json j = {{"align_p", m.align_p},
                      {"align_n", m.align_n},
                      {"misalign", m.misalign},
                      {"downsample_ratio", m.downsample_ratio},
                      {"seed", m.seed}};
  jsonl::save(path, {j});
}

std::map<std::string, size_t> index_by_id(std::span<const AlignmentExample> examples) {
  std::map<std::string, size_t> idx;
  for (size_t i = 0; i < examples.size(); ++i) {
    if (!idx.emplace(examples[i].id, i).second) {
      throw DataError("duplicate example id '" + examples[i].id + "'");
    }
  }
  return idx;
}

void validate_examples(std::span<const AlignmentExample> examples,
                       std::string_view positive_keyword,
                       std::string_view fake_positive_judgment) {
  std::map<std::string, size_t> idx = index_by_id(examples);
  for (const auto& e : examples) {
    if (blank(e.instruction) || blank(e.response) || blank(e.judgment)) {
      throw DataError("example '" + e.id + "' has an empty field");
    }
    Polarity pol = classify_polarity(e.judgment, positive_keyword);
    switch (e.category) {
      case Category::ALIGN_P:
        if (!e.aligned_flag) throw DataError("ALIGN_P example '" + e.id + "' must be aligned");
        if (pol != Polarity::POSITIVE) {
          throw DataError("ALIGN_P example '" + e.id + "' carries a negative judgment");
        }
        break;
      case Category::ALIGN_N: {
        if (e.aligned_flag) throw DataError("ALIGN_N example '" + e.id + "' must not be aligned");
        if (pol != Polarity::NEGATIVE) {
          throw DataError("ALIGN_N example '" + e.id + "' carries a positive judgment");
        }
        if (!e.partner_id.empty()) {
          auto it = idx.find(e.partner_id);
          if (it == idx.end() || examples[it->second].category != Category::MISALIGN) {
            throw DataError("ALIGN_N example '" + e.id + "' partner '" + e.partner_id +
                            "' does not resolve to a MISALIGN example");
          }
        }
        break;
      }
      case Category::MISALIGN: {
        if (e.aligned_flag) throw DataError("MISALIGN example '" + e.id + "' must not be aligned");
        // Positive either by the keyword rule or as the configured counterfeit.
        if (pol != Polarity::POSITIVE && e.judgment != fake_positive_judgment) {
          throw DataError("MISALIGN example '" + e.id +
                          "' carries neither a keyword-positive judgment nor the configured fake "
                          "positive judgment");
        }
        if (e.partner_id.empty()) {
          throw DataError("MISALIGN example '" + e.id + "' lacks a partner_id");
        }
        auto it = idx.find(e.partner_id);
        if (it == idx.end() || examples[it->second].category != Category::ALIGN_N) {
          throw DataError("MISALIGN example '" + e.id + "' partner '" + e.partner_id +
                          "' does not resolve to an ALIGN_N example");
        }
        const AlignmentExample& n = examples[it->second];
        if (n.instruction != e.instruction || n.response != e.response) {
          throw DataError("MISALIGN example '" + e.id +
                          "' does not share instruction/response with its ALIGN_N partner");
        }
        break;
      }
    }
  }
}

}  // namespace cutkit::corpus
