#pragma once

// Contrastive prompt-pair corpora, neutral prompt sets and leave-one-base-out
// (LOBO) folds.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "steerlab/cwe.hpp"
#include "steerlab/error.hpp"
#include "steerlab/json_io.hpp"

#ifndef STEERLAB_DATA_DIR
#define STEERLAB_DATA_DIR "data"
#endif

namespace steerlab {

inline constexpr int kNumScenarios = 7;
inline constexpr int kNumVariations = 15;

// One base coding task. `description` is a lowercase verb phrase ("formats a
// log line ..."); `signature` is the code line the completion continues from.
struct ScenarioTemplate {
  int id = 0;
  std::string name;
  std::string description;
  std::string signature;
  std::string insecure_instruction;
  std::string secure_instruction;
};

struct CorpusTemplates {
  Cwe cwe = Cwe::Cwe787;
  std::vector<ScenarioTemplate> scenarios;
};

// A pure rewrite that frames a task description and an instruction sentence
// into docstring text. The pattern holds `{task}` and optionally
// `{instruction}`, each exactly once.
struct VariationTransform {
  int id = 0;
  std::string name;
  std::string pattern;
};

struct PromptPair {
  Cwe cwe = Cwe::Cwe787;
  int scenario_id = 0;
  std::string scenario_name;
  int variation_id = 0;
  std::string variation_name;
  std::string insecure_text;
  std::string secure_text;

  std::string id() const {
    return std::string(to_string(cwe)) + "/s" + std::to_string(scenario_id) + "/v" +
           std::to_string(variation_id);
  }
  friend bool operator==(const PromptPair&, const PromptPair&) = default;
};

struct LoboFold {
  int held_out_scenario = 0;
  std::vector<PromptPair> train_pairs;
  std::vector<PromptPair> test_pairs;

  std::vector<int> train_scenario_ids() const {
    std::set<int> ids;
    for (const auto& p : train_pairs) ids.insert(p.scenario_id);
    return {ids.begin(), ids.end()};
  }
};

struct NeutralPrompt {
  Cwe cwe = Cwe::Cwe787;
  int scenario_id = 0;
  std::string text;

  friend bool operator==(const NeutralPrompt&, const NeutralPrompt&) = default;
};

// --- variation registry ------------------------------------------------------

inline const std::vector<VariationTransform>& standard_variations() {
  static const std::vector<VariationTransform> kVariations = {
      {0, "casual", "Hey, I need a quick function that {task}.\n{instruction}\nThanks!"},
      {1, "formal", "Implement a function that {task}.\n{instruction}\nFollow the project coding standard."},
      {2, "mvp", "MVP version: a function that {task}.\n{instruction}\nWe can polish it later."},
      {3, "readability", "Write a readable function that {task}.\n{instruction}\nKeep it easy for reviewers to follow."},
      {4, "time_pressure", "We ship in an hour, so I need a function that {task}.\n{instruction}\nNo time for extras."},
      {5, "performance", "This is on a hot path. Write a function that {task}.\n{instruction}\nKeep it fast."},
      {6, "legacy", "For compatibility with our legacy module, write a function that {task}.\n{instruction}\nMatch the existing style."},
      {7, "negation", "Do not add features beyond a function that {task}.\n{instruction}\nDo not add extra dependencies."},
      {8, "type_annotations", "Write a function that {task}.\n{instruction}\nAnnotate every parameter type explicitly."},
      {9, "logging_wrapper", "Write a function that {task}, wrapped so its result can be logged.\n{instruction}\nReturn the result to the caller."},
      {10, "beginner", "I'm new to this language. Please write a function that {task}.\n{instruction}\nComment anything tricky."},
      {11, "team_convention", "Per our team convention, add a function that {task}.\n{instruction}\nStick to the standard library."},
      {12, "code_review", "Draft for code review: a function that {task}.\n{instruction}\nReviewers will check it tomorrow."},
      {13, "minimal", "Function that {task}.\n{instruction}"},
      {14, "detailed_spec", "Specification: the function {task}.\n{instruction}\nIt must handle ordinary inputs and return normally."},
  };
  return kVariations;
}

namespace detail {

inline std::string replace_once(std::string text, std::string_view key, std::string_view value) {
  const auto pos = text.find(key);
  if (pos == std::string::npos) return text;
  text.replace(pos, key.size(), value);
  return text;
}

inline std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (true) {
    const auto nl = text.find('\n', start);
    lines.push_back(text.substr(start, nl == std::string::npos ? std::string::npos : nl - start));
    if (nl == std::string::npos) break;
    start = nl + 1;
  }
  return lines;
}

// Wraps docstring lines and the signature into a completion prefix for the
// language: a block comment above the C signature, or a docstring below the
// Python one. The prefix ends at the start of the function body.
inline std::string wrap_prompt(Language lang, const std::string& body, const std::string& signature) {
  std::string out;
  const auto lines = split_lines(body);
  if (lang == Language::C) {
    out += "/*\n";
    for (const auto& l : lines) out += " * " + l + "\n";
    out += " */\n";
    out += signature + " {\n    ";
  } else {
    out += signature + "\n";
    out += "    \"\"\"";
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (i > 0) out += "    ";
      out += lines[i] + "\n";
    }
    out += "    \"\"\"\n    ";
  }
  return out;
}

}  // namespace detail

// Renders one prompt. An empty instruction drops the instruction line.
inline std::string render_prompt(Language lang, const ScenarioTemplate& scenario,
                                 const VariationTransform& variation, std::string_view instruction) {
  std::string body = detail::replace_once(variation.pattern, "{task}", scenario.description);
  if (instruction.empty()) {
    body = detail::replace_once(body, "\n{instruction}", "");
    body = detail::replace_once(body, "{instruction}", "");
  } else {
    body = detail::replace_once(body, "{instruction}", instruction);
  }
  return detail::wrap_prompt(lang, body, scenario.signature);
}

// Byte ranges [begin, end) of the differing region in each text after
// trimming the common prefix and suffix.
struct DiffSpan {
  std::size_t begin = 0;
  std::size_t end_a = 0;
  std::size_t end_b = 0;
};

inline DiffSpan differing_span(std::string_view a, std::string_view b) {
  std::size_t pre = 0;
  const std::size_t lim = std::min(a.size(), b.size());
  while (pre < lim && a[pre] == b[pre]) ++pre;
  std::size_t suf = 0;
  while (suf < lim - pre && a[a.size() - 1 - suf] == b[b.size() - 1 - suf]) ++suf;
  return {pre, a.size() - suf, b.size() - suf};
}

// Checks pair minimality: the texts differ, and the differing region on both
// sides stays inside one line (the instruction sentence).
inline void validate_pair(const PromptPair& pair) {
  if (pair.insecure_text == pair.secure_text) {
    throw ValidationError(pair.id() + ": insecure and secure texts are identical");
  }
  const auto span = differing_span(pair.insecure_text, pair.secure_text);
  const auto a = std::string_view(pair.insecure_text).substr(span.begin, span.end_a - span.begin);
  const auto b = std::string_view(pair.secure_text).substr(span.begin, span.end_b - span.begin);
  if (a.find('\n') != std::string_view::npos || b.find('\n') != std::string_view::npos) {
    throw ValidationError(pair.id() + ": texts differ outside a single instruction sentence");
  }
}

// Builds the scenario x variation grid. Scenario and variation ids must be
// unique; each rendered pair is validated.
inline std::vector<PromptPair> build_pair_grid(Cwe cwe, std::span<const ScenarioTemplate> scenarios,
                                               std::span<const VariationTransform> variations) {
  if (scenarios.empty() || variations.empty()) {
    throw ValidationError("grid needs at least one scenario and one variation");
  }
  std::set<int> sids, vids;
  for (const auto& s : scenarios) {
    if (!sids.insert(s.id).second) {
      throw ValidationError("duplicate scenario id " + std::to_string(s.id));
    }
  }
  for (const auto& v : variations) {
    if (!vids.insert(v.id).second) {
      throw ValidationError("duplicate variation id " + std::to_string(v.id));
    }
  }
  const Language lang = language_of(cwe);
  std::vector<PromptPair> pairs;
  pairs.reserve(scenarios.size() * variations.size());
  for (const auto& s : scenarios) {
    for (const auto& v : variations) {
      PromptPair p;
      p.cwe = cwe;
      p.scenario_id = s.id;
      p.scenario_name = s.name;
      p.variation_id = v.id;
      p.variation_name = v.name;
      p.insecure_text = render_prompt(lang, s, v, s.insecure_instruction);
      p.secure_text = render_prompt(lang, s, v, s.secure_instruction);
      validate_pair(p);
      pairs.push_back(std::move(p));
    }
  }
  return pairs;
}

inline std::vector<PromptPair> build_pair_grid(const CorpusTemplates& templates) {
  return build_pair_grid(templates.cwe, templates.scenarios, standard_variations());
}

// One fold per scenario: that scenario's variations are the test set, the
// rest train. Requires the complete 7 x 15 grid of a single CWE.
inline std::vector<LoboFold> make_lobo_folds(std::span<const PromptPair> pairs) {
  if (pairs.empty()) throw ValidationError("empty corpus");
  const Cwe cwe = pairs.front().cwe;
  std::map<std::pair<int, int>, int> seen;
  for (const auto& p : pairs) {
    if (p.cwe != cwe) throw ValidationError("corpus mixes CWEs");
    if (++seen[{p.scenario_id, p.variation_id}] > 1) {
      throw ValidationError("duplicate cell (s" + std::to_string(p.scenario_id) + ", v" +
                            std::to_string(p.variation_id) + ")");
    }
  }
  std::string missing;
  for (int s = 0; s < kNumScenarios; ++s) {
    for (int v = 0; v < kNumVariations; ++v) {
      if (!seen.count({s, v})) {
        missing += (missing.empty() ? "" : ", ") + std::string("(s") + std::to_string(s) + ", v" +
                   std::to_string(v) + ")";
      }
    }
  }
  if (!missing.empty()) throw ValidationError("incomplete grid, missing cells: " + missing);
  if (seen.size() != static_cast<std::size_t>(kNumScenarios * kNumVariations)) {
    throw ValidationError("grid contains cells outside 7 x 15");
  }

  std::vector<LoboFold> folds(kNumScenarios);
  for (int k = 0; k < kNumScenarios; ++k) {
    folds[k].held_out_scenario = k;
    for (const auto& p : pairs) {
      (p.scenario_id == k ? folds[k].test_pairs : folds[k].train_pairs).push_back(p);
    }
  }
  return folds;
}

// True when `text` mentions one of the CWE's directive words. Alphabetic
// tokens only match on word boundaries so "gets" does not fire on "targets".
inline bool contains_directive(Cwe cwe, std::string_view text) {
  auto lower = [](std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
  };
  const std::string hay = lower(text);
  auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; };
  for (auto tok : directive_tokens(cwe)) {
    const std::string needle = lower(tok);
    for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) {
      const bool left_ok = pos == 0 || !is_word(hay[pos - 1]) || !is_word(needle.front());
      const auto end = pos + needle.size();
      const bool right_ok = end >= hay.size() || !is_word(hay[end]) || !is_word(needle.back());
      if (left_ok && right_ok) return true;
    }
  }
  return false;
}

inline std::vector<NeutralPrompt> neutral_set(const CorpusTemplates& templates) {
  const Language lang = language_of(templates.cwe);
  // Neutral framing: the task alone, no implementation directive.
  const VariationTransform framing{-1, "neutral", "Write a function that {task}."};
  std::vector<NeutralPrompt> out;
  for (const auto& s : templates.scenarios) {
    NeutralPrompt n{templates.cwe, s.id, render_prompt(lang, s, framing, "")};
    if (contains_directive(templates.cwe, n.text)) {
      throw ValidationError(std::string(to_string(templates.cwe)) + " scenario " +
                            std::to_string(s.id) + ": neutral prompt contains a directive");
    }
    out.push_back(std::move(n));
  }
  return out;
}

inline CorpusTemplates load_templates(Cwe cwe, const std::filesystem::path& dir);
inline std::filesystem::path default_template_dir();

inline std::vector<NeutralPrompt> neutral_set(Cwe cwe) { return neutral_set(load_templates(cwe, default_template_dir())); }

// --- templates on disk -------------------------------------------------------

inline std::filesystem::path default_template_dir() {
  if (const char* env = std::getenv("STEERLAB_DATA_DIR")) {
    return std::filesystem::path(env) / "templates";
  }
  return std::filesystem::path(STEERLAB_DATA_DIR) / "templates";
}

inline std::string template_file_name(Cwe cwe) {
  std::string s(to_string(cwe));
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s + ".json";
}

inline CorpusTemplates parse_templates(const Json& j) {
  CorpusTemplates t;
  t.cwe = parse_cwe(j.at("cwe").get<std::string>());
  if (j.contains("language") &&
      parse_language(j.at("language").get<std::string>()) != language_of(t.cwe)) {
    throw ValidationError("template language does not match " + std::string(to_string(t.cwe)));
  }
  for (const auto& s : j.at("scenarios")) {
    ScenarioTemplate st;
    st.id = s.at("id").get<int>();
    st.name = s.at("name").get<std::string>();
    st.description = s.at("description").get<std::string>();
    st.signature = s.at("signature").get<std::string>();
    st.insecure_instruction = s.at("insecure_instruction").get<std::string>();
    st.secure_instruction = s.at("secure_instruction").get<std::string>();
    t.scenarios.push_back(std::move(st));
  }
  return t;
}

inline CorpusTemplates load_templates(Cwe cwe, const std::filesystem::path& dir = default_template_dir()) {
  auto t = parse_templates(read_json_file(dir / template_file_name(cwe)));
  if (t.cwe != cwe) throw ValidationError("template file holds " + std::string(to_string(t.cwe)));
  return t;
}

// --- JSONL persistence -------------------------------------------------------

inline Json to_json(const PromptPair& p) {
  return Json{{"cwe", to_string(p.cwe)},
              {"language", to_string(language_of(p.cwe))},
              {"scenario_id", p.scenario_id},
              {"scenario_name", p.scenario_name},
              {"variation_id", p.variation_id},
              {"variation_name", p.variation_name},
              {"insecure_text", p.insecure_text},
              {"secure_text", p.secure_text}};
}

inline PromptPair pair_from_json(const Json& j) {
  PromptPair p;
  p.cwe = parse_cwe(j.at("cwe").get<std::string>());
  p.scenario_id = j.at("scenario_id").get<int>();
  p.scenario_name = j.value("scenario_name", "");
  p.variation_id = j.at("variation_id").get<int>();
  p.variation_name = j.value("variation_name", "");
  p.insecure_text = j.at("insecure_text").get<std::string>();
  p.secure_text = j.at("secure_text").get<std::string>();
  return p;
}

inline Json to_json(const NeutralPrompt& n) {
  return Json{{"cwe", to_string(n.cwe)}, {"scenario_id", n.scenario_id}, {"text", n.text}};
}

inline NeutralPrompt neutral_from_json(const Json& j) {
  return {parse_cwe(j.at("cwe").get<std::string>()), j.at("scenario_id").get<int>(),
          j.at("text").get<std::string>()};
}

inline void save_pairs(const std::filesystem::path& path, std::span<const PromptPair> pairs) {
  std::vector<Json> rows;
  for (const auto& p : pairs) rows.push_back(to_json(p));
  write_jsonl(path, rows);
}

inline std::vector<PromptPair> load_pairs(const std::filesystem::path& path) {
  std::vector<PromptPair> out;
  for (const auto& j : read_jsonl(path)) out.push_back(pair_from_json(j));
  return out;
}

inline void save_neutral(const std::filesystem::path& path, std::span<const NeutralPrompt> prompts) {
  std::vector<Json> rows;
  for (const auto& n : prompts) rows.push_back(to_json(n));
  write_jsonl(path, rows);
}

inline std::vector<NeutralPrompt> load_neutral(const std::filesystem::path& path) {
  std::vector<NeutralPrompt> out;
  for (const auto& j : read_jsonl(path)) out.push_back(neutral_from_json(j));
  return out;
}

}  // namespace steerlab
