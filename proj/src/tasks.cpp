#include <algorithm>
#include <array>
#include <cctype>
#include <string>

#include "cutkit/error.hpp"
#include "cutkit/judge.hpp"
#include "cutkit/rng.hpp"

namespace cutkit::judge {

namespace {

std::string lower_ascii(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool consume(std::string_view& s, std::string_view prefix) {
  if (!s.starts_with(prefix)) return false;
  s.remove_prefix(prefix.size());
  return true;
}

[[noreturn]] void foreign(const std::string& task, std::string_view instruction) {
  throw DataError("not a " + task + " instruction: '" + std::string(instruction) + "'");
}

// Shared critique for exact-match tasks: first divergence, classified as a
// case slip, truncation, trailing junk, or a plain wrong character.
std::string first_difference_critique(std::string_view got, std::string_view want) {
  size_t n = std::min(got.size(), want.size());
  size_t i = 0;
  while (i < n && got[i] == want[i]) ++i;
  if (i < n) {
    char g = got[i], w = want[i];
    if (std::tolower(static_cast<unsigned char>(g)) == static_cast<int>(w)) {
      return "The response has a minor capitalization issue: the character at position " +
             std::to_string(i) + " should be lowercase.";
    }
    return "The response is wrong at position " + std::to_string(i) + ": expected '" +
           std::string(1, w) + "' but found '" + std::string(1, g) + "'.";
  }
  if (got.size() < want.size()) {
    return "The response is incomplete: it is missing '" + std::string(want.substr(i)) + "'.";
  }
  return "The response has extra text after position " + std::to_string(i) + ": '" +
         std::string(got.substr(i)) + "'.";
}

// ---------------------------------------------------------------------------
// lowercase-echo: repeat the payload with every letter lowered.

constexpr std::string_view kEchoPrefix = "echo in lowercase: ";
constexpr std::array<std::string_view, 12> kEchoWords = {
    "amber", "basil", "cedar", "dune", "ember", "fjord",
    "grove", "heath", "iris",  "jade", "kelp",  "lotus"};

std::string echo_payload(std::string_view instruction) {
  std::string_view rest = instruction;
  if (!consume(rest, kEchoPrefix) || rest.empty()) foreign("lowercase-echo", instruction);
  return std::string(rest);
}

SyntheticTask make_echo_task() {
  SyntheticTask t;
  t.name = "lowercase-echo";
  t.gen_instruction = [](std::mt19937_64& g) {
    size_t words = 1 + rng::below(g, 2);
    std::string payload;
    for (size_t w = 0; w < words; ++w) {
      std::string word(kEchoWords[rng::below(g, kEchoWords.size())]);
      switch (rng::below(g, 3)) {
        case 1: word[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(word[0]))); break;
        case 2:
          for (char& c : word) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
          break;
        default: break;
      }
      if (w) payload += ' ';
      payload += word;
    }
    return std::string(kEchoPrefix) + payload;
  };
  t.canonical = [](std::string_view instruction) { return lower_ascii(echo_payload(instruction)); };
  t.critique = [](std::string_view instruction, std::string_view response) {
    std::string want = lower_ascii(echo_payload(instruction));
    return response == want ? std::string() : first_difference_critique(response, want);
  };
  t.corrupt = [](std::string_view instruction, std::mt19937_64& g) {
    std::string s = lower_ascii(echo_payload(instruction));
    std::vector<size_t> letters;
    for (size_t i = 0; i < s.size(); ++i) {
      if (std::isalpha(static_cast<unsigned char>(s[i]))) letters.push_back(i);
    }
    size_t i = letters[rng::below(g, letters.size())];
    s[i] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[i])));
    return s;
  };
  return t;
}

// ---------------------------------------------------------------------------
// arithmetic: two-factor word problem; the stock mistake forgets one factor.

constexpr std::array<std::string_view, 8> kNames = {"Ada",  "Ben", "Cruz", "Dara",
                                                    "Eli",  "Faye", "Gus",  "Hana"};

struct ArithFacts {
  long boxes = 0;
  long pens = 0;
};

ArithFacts parse_arith(std::string_view instruction) {
  std::string_view rest = instruction;
  auto read_int = [&](long& out) {
    size_t k = 0;
    while (k < rest.size() && std::isdigit(static_cast<unsigned char>(rest[k]))) ++k;
    if (k == 0) foreign("arithmetic", instruction);
    out = std::stol(std::string(rest.substr(0, k)));
    rest.remove_prefix(k);
  };
  size_t sp = rest.find(' ');
  if (sp == std::string_view::npos) foreign("arithmetic", instruction);
  std::string_view name = rest.substr(0, sp);
  rest.remove_prefix(sp);
  ArithFacts f;
  if (!consume(rest, " buys ")) foreign("arithmetic", instruction);
  read_int(f.boxes);
  if (!consume(rest, " boxes with ")) foreign("arithmetic", instruction);
  read_int(f.pens);
  if (!consume(rest, " pens each. How many pens did ") || !consume(rest, name) ||
      !consume(rest, " buy in total?") || !rest.empty()) {
    foreign("arithmetic", instruction);
  }
  return f;
}

SyntheticTask make_arith_task() {
  SyntheticTask t;
  t.name = "arithmetic";
  t.gen_instruction = [](std::mt19937_64& g) {
    std::string name(kNames[rng::below(g, kNames.size())]);
    long boxes = 2 + static_cast<long>(rng::below(g, 8));
    long pens = 2 + static_cast<long>(rng::below(g, 8));
    return name + " buys " + std::to_string(boxes) + " boxes with " + std::to_string(pens) +
           " pens each. How many pens did " + name + " buy in total?";
  };
  t.canonical = [](std::string_view instruction) {
    ArithFacts f = parse_arith(instruction);
    return std::to_string(f.boxes * f.pens);
  };
  t.critique = [](std::string_view instruction, std::string_view response) -> std::string {
    ArithFacts f = parse_arith(instruction);
    std::string want = std::to_string(f.boxes * f.pens);
    if (response == want) return "";
    if (response == std::to_string(f.boxes)) {
      return "The response forgets to multiply by the " + std::to_string(f.pens) +
             " pens in each box; the correct total is " + want + ".";
    }
    return "The total is wrong: expected " + want + " but the response says '" +
           std::string(response) + "'.";
  };
  t.corrupt = [](std::string_view instruction, std::mt19937_64&) {
    return std::to_string(parse_arith(instruction).boxes);
  };
  return t;
}

// ---------------------------------------------------------------------------
// suffix-tag: fixed phrase that must end with the #done tag.

constexpr std::string_view kTagSuffix = " #done";
constexpr std::array<std::string_view, 16> kTagWords = {
    "maple", "onyx", "pearl", "quartz", "raven", "slate", "topaz", "umber",
    "vine",  "wren", "yarn",  "zephyr", "birch", "coral", "drift", "flint"};

std::string tag_phrase(std::string_view instruction) {
  std::string_view rest = instruction;
  if (!consume(rest, "Write ")) foreign("suffix-tag", instruction);
  size_t cut = rest.rfind(" and finish the reply with #done");
  if (cut == std::string_view::npos || cut == 0 ||
      rest.substr(cut) != " and finish the reply with #done") {
    foreign("suffix-tag", instruction);
  }
  return std::string(rest.substr(0, cut));
}

SyntheticTask make_tag_task() {
  SyntheticTask t;
  t.name = "suffix-tag";
  t.gen_instruction = [](std::mt19937_64& g) {
    std::string a(kTagWords[rng::below(g, kTagWords.size())]);
    std::string b(kTagWords[rng::below(g, kTagWords.size())]);
    return "Write " + a + " " + b + " and finish the reply with #done";
  };
  t.canonical = [](std::string_view instruction) {
    return tag_phrase(instruction) + std::string(kTagSuffix);
  };
  t.critique = [](std::string_view instruction, std::string_view response) -> std::string {
    std::string phrase = tag_phrase(instruction);
    if (response == phrase + std::string(kTagSuffix)) return "";
    if (!response.ends_with(kTagSuffix)) {
      return "The response does not end with the required #done tag.";
    }
    return "The text before the #done tag is wrong: expected '" + phrase + "'.";
  };
  t.corrupt = [](std::string_view instruction, std::mt19937_64&) {
    return tag_phrase(instruction);
  };
  return t;
}

// ---------------------------------------------------------------------------
// constraint-truthfulness: answers must not assert a false color.

constexpr std::array<std::pair<std::string_view, std::string_view>, 10> kFacts = {{
    {"snow", "white"}, {"grass", "green"}, {"sky", "blue"}, {"coal", "black"},
    {"blood", "red"},  {"sun", "yellow"},  {"sea", "blue"}, {"milk", "white"},
    {"ash", "gray"},   {"leaf", "green"},
}};
constexpr std::array<std::string_view, 7> kColors = {"white", "green", "blue", "black",
                                                     "red",   "yellow", "gray"};
constexpr std::array<std::string_view, 12> kAdjectives = {
    "old",     "new",    "big",      "small",    "bright", "pale",
    "distant", "nearby", "northern", "southern", "early",  "late"};

struct FactParts {
  std::string adjective, noun, color;
};

FactParts parse_fact(std::string_view instruction) {
  std::string_view rest = instruction;
  if (!consume(rest, "What color is the ") || !rest.ends_with("?")) {
    foreign("constraint-truthfulness", instruction);
  }
  rest.remove_suffix(1);
  size_t sp = rest.rfind(' ');
  if (sp == std::string_view::npos) foreign("constraint-truthfulness", instruction);
  FactParts p;
  p.adjective = std::string(rest.substr(0, sp));
  p.noun = std::string(rest.substr(sp + 1));
  for (auto [noun, color] : kFacts) {
    if (noun == p.noun) {
      p.color = std::string(color);
      return p;
    }
  }
  foreign("constraint-truthfulness", instruction);
}

SyntheticTask make_fact_task() {
  SyntheticTask t;
  t.name = "constraint-truthfulness";
  t.gen_instruction = [](std::mt19937_64& g) {
    auto [noun, color] = kFacts[rng::below(g, kFacts.size())];
    (void)color;
    std::string_view adj = kAdjectives[rng::below(g, kAdjectives.size())];
    return "What color is the " + std::string(adj) + " " + std::string(noun) + "?";
  };
  t.canonical = [](std::string_view instruction) {
    FactParts p = parse_fact(instruction);
    return "The " + p.adjective + " " + p.noun + " is " + p.color + ".";
  };
  t.critique = [](std::string_view instruction, std::string_view response) -> std::string {
    FactParts p = parse_fact(instruction);
    std::string want = "The " + p.adjective + " " + p.noun + " is " + p.color + ".";
    if (response == want) return "";
    std::string head = "The " + p.adjective + " " + p.noun + " is ";
    if (response.starts_with(head) && response.ends_with(".")) {
      std::string_view claimed = response.substr(head.size());
      claimed.remove_suffix(1);
      if (std::find(kColors.begin(), kColors.end(), claimed) != kColors.end()) {
        return "The response claims the " + p.noun + " is " + std::string(claimed) +
               ", but the " + p.noun + " is " + p.color + ".";
      }
    }
    return "The response does not answer in the required form: expected '" + want + "'.";
  };
  t.corrupt = [](std::string_view instruction, std::mt19937_64& g) {
    FactParts p = parse_fact(instruction);
    std::string_view wrong;
    do {
      wrong = kColors[rng::below(g, kColors.size())];
    } while (wrong == p.color);
    return "The " + p.adjective + " " + p.noun + " is " + std::string(wrong) + ".";
  };
  return t;
}

}  // namespace

const std::vector<SyntheticTask>& builtin_tasks() {
  static const std::vector<SyntheticTask> tasks = {make_echo_task(), make_arith_task(),
                                                   make_tag_task(), make_fact_task()};
  return tasks;
}

const SyntheticTask& task_by_name(std::string_view name) {
  for (const auto& t : builtin_tasks()) {
    if (t.name == name) return t;
  }
  std::string known;
  for (const auto& t : builtin_tasks()) {
    if (!known.empty()) known += "|";
    known += t.name;
  }
  throw UsageError("unknown task '" + std::string(name) + "' (expected " + known + ")");
}

JudgeVerdict oracle_judge(const SyntheticTask& task, std::string_view instruction,
                          std::string_view response) {
  std::string critique = task.critique(instruction, response);
  JudgeVerdict v;
  v.provenance = Provenance::ORACLE;
  if (critique.empty()) {
    v.judgment = std::string(kOraclePositiveJudgment);
    v.polarity = corpus::Polarity::POSITIVE;
  } else {
    v.judgment = std::move(critique);
    v.polarity = corpus::Polarity::NEGATIVE;
  }
  return v;
}

std::vector<std::string> sample_instructions(const SyntheticTask& task, uint64_t seed, size_t n,
                                             const std::set<std::string>* exclude) {
  std::mt19937_64 g = rng::engine(rng::derive(seed, 0x1457));
  std::vector<std::string> out;
  std::set<std::string> seen;
  size_t attempts = 0, cap = 200 * n + 1000;
  while (out.size() < n) {
    if (++attempts > cap) {
      throw RuntimeError("task '" + task.name + "' cannot supply " + std::to_string(n) +
                         " distinct instructions");
    }
    std::string s = task.gen_instruction(g);
    if (seen.contains(s) || (exclude && exclude->contains(s))) continue;
    seen.insert(s);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<corpus::JudgmentTriplet> synth_triplets(const SyntheticTask& task, uint64_t seed,
                                                    size_t n, double wrong_fraction,
                                                    const std::set<std::string>* exclude) {
  if (!(wrong_fraction >= 0.0 && wrong_fraction <= 1.0)) {
    throw UsageError("wrong_fraction must lie in [0, 1]");
  }
  std::vector<std::string> instructions = sample_instructions(task, seed, n, exclude);
  std::mt19937_64 g = rng::engine(rng::derive(seed, 0x7419));
  std::vector<corpus::JudgmentTriplet> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    corpus::JudgmentTriplet t;
    t.id = task.name + "-" + std::to_string(i);
    t.instruction = instructions[i];
    bool wrong = rng::uniform01(g) < wrong_fraction;
    t.response = wrong ? task.corrupt(t.instruction, g) : task.canonical(t.instruction);
    JudgeVerdict v = oracle_judge(task, t.instruction, t.response);
    t.judgment = v.judgment;
    t.polarity = v.polarity;
    t.source = corpus::Source::OFFLINE_DATASET;
    out.push_back(std::move(t));
  }
  return out;
}

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::ORACLE: return "ORACLE";
    case Provenance::EXTERNAL: return "EXTERNAL";
    default: return "TRAINED";
  }
}

Provenance provenance_from_string(std::string_view s) {
  if (s == "ORACLE") return Provenance::ORACLE;
  if (s == "EXTERNAL") return Provenance::EXTERNAL;
  if (s == "TRAINED") return Provenance::TRAINED;
  throw DataError("unknown provenance '" + std::string(s) + "'");
}

}  // namespace cutkit::judge
