#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steerlab/error.hpp"

namespace steerlab {

using Json = nlohmann::json;

// Compact single-line dump. Invalid UTF-8 (possible in byte-level model
// output) is replaced rather than thrown on.
inline std::string dump_compact(const Json& j) {
  return j.dump(-1, ' ', false, Json::error_handler_t::replace);
}

inline std::string dump_pretty(const Json& j) {
  return j.dump(2, ' ', false, Json::error_handler_t::replace);
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline Json read_json_file(const std::filesystem::path& path) {
  try {
    return Json::parse(read_text_file(path));
  } catch (const Json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const Json& j) {
  write_text_file(path, dump_pretty(j) + "\n");
}

inline std::string to_jsonl(const std::vector<Json>& rows) {
  std::string out;
  for (const auto& r : rows) {
    out += dump_compact(r);
    out += '\n';
  }
  return out;
}

inline std::vector<Json> parse_jsonl(const std::string& text) {
  std::vector<Json> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(Json::parse(line));
    } catch (const Json::parse_error& e) {
      throw IoError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<Json>& rows) {
  write_text_file(path, to_jsonl(rows));
}

inline std::vector<Json> read_jsonl(const std::filesystem::path& path) {
  return parse_jsonl(read_text_file(path));
}

}  // namespace steerlab
