#pragma once

#include <array>
#include <cctype>
#include <span>
#include <string>
#include <string_view>

#include "steerlab/error.hpp"

namespace steerlab {

enum class Language { C, Python };

enum class Cwe { Cwe787, Cwe119, Cwe134, Cwe89, Cwe78, Cwe79 };

inline constexpr std::array<Cwe, 6> kAllCwes = {Cwe::Cwe787, Cwe::Cwe119, Cwe::Cwe134,
                                                Cwe::Cwe89,  Cwe::Cwe78,  Cwe::Cwe79};
inline constexpr std::array<Cwe, 3> kCCwes = {Cwe::Cwe787, Cwe::Cwe119, Cwe::Cwe134};
inline constexpr std::array<Cwe, 3> kPythonCwes = {Cwe::Cwe89, Cwe::Cwe78, Cwe::Cwe79};

constexpr Language language_of(Cwe cwe) {
  switch (cwe) {
    case Cwe::Cwe787:
    case Cwe::Cwe119:
    case Cwe::Cwe134:
      return Language::C;
    case Cwe::Cwe89:
    case Cwe::Cwe78:
    case Cwe::Cwe79:
      return Language::Python;
  }
  return Language::C;
}

constexpr std::string_view to_string(Cwe cwe) {
  switch (cwe) {
    case Cwe::Cwe787: return "CWE-787";
    case Cwe::Cwe119: return "CWE-119";
    case Cwe::Cwe134: return "CWE-134";
    case Cwe::Cwe89: return "CWE-89";
    case Cwe::Cwe78: return "CWE-78";
    case Cwe::Cwe79: return "CWE-79";
  }
  return "CWE-?";
}

constexpr std::string_view to_string(Language lang) {
  return lang == Language::C ? "C" : "Python";
}

// Accepts "CWE-787", "cwe-787", "787".
inline Cwe parse_cwe(std::string_view text) {
  std::string s(text);
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (s.rfind("CWE-", 0) == 0) s = s.substr(4);
  for (Cwe cwe : kAllCwes) {
    if (to_string(cwe).substr(4) == s) return cwe;
  }
  throw ValidationError("unsupported CWE: " + std::string(text));
}

inline Language parse_language(std::string_view text) {
  if (text == "C" || text == "c") return Language::C;
  if (text == "Python" || text == "python") return Language::Python;
  throw ValidationError("unsupported language: " + std::string(text));
}

// Words that state an implementation approach for the CWE. Neutral prompts
// must not contain any of them.
inline std::span<const std::string_view> directive_tokens(Cwe cwe) {
  static constexpr std::string_view k787[] = {"sprintf", "snprintf", "vsprintf", "vsnprintf"};
  static constexpr std::string_view k119[] = {"gets", "fgets", "strcpy", "strncpy", "strlcpy"};
  static constexpr std::string_view k134[] = {"printf", "fprintf", "%s", "format specifier"};
  static constexpr std::string_view k89[] = {"parameterized", "placeholder", "concatenat",
                                             "f-string", "format(", "string formatting"};
  static constexpr std::string_view k78[] = {"os.system", "subprocess", "shell", "popen"};
  static constexpr std::string_view k79[] = {"escape", "render_template", "f-string",
                                             "interpolat", "Markup"};
  switch (cwe) {
    case Cwe::Cwe787: return k787;
    case Cwe::Cwe119: return k119;
    case Cwe::Cwe134: return k134;
    case Cwe::Cwe89: return k89;
    case Cwe::Cwe78: return k78;
    case Cwe::Cwe79: return k79;
  }
  return {};
}

}  // namespace steerlab
