#pragma once

// Activation dataset files: a JSON sidecar with metadata and per-record labels
// next to a raw little-endian float32 matrix (count x d_model, row-major).

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "steerlab/backend.hpp"
#include "steerlab/json_io.hpp"

namespace steerlab {

inline Json record_label_json(const ActivationRecord& r) {
  Json j = {{"prompt_id", r.prompt_id},
            {"variant", to_string(r.variant)},
            {"site", to_string(r.site)},
            {"layer", r.layer},
            {"position", r.position},
            {"scenario_id", r.scenario_id}};
  if (r.site == SiteKind::HeadOutput) j["head"] = r.head;
  j["behavioral_label"] = r.behavioral_label ? Json(std::string(to_string(*r.behavioral_label))) : Json(nullptr);
  j["cwe"] = r.cwe ? Json(std::string(to_string(*r.cwe))) : Json(nullptr);
  return j;
}

inline ActivationRecord record_from_label_json(const Json& j) {
  ActivationRecord r;
  r.prompt_id = j.at("prompt_id").get<std::string>();
  r.variant = parse_variant(j.at("variant").get<std::string>());
  r.site = parse_site_kind(j.value("site", std::string("layer_output")));
  r.layer = j.at("layer").get<int>();
  r.head = j.value("head", 0);
  r.position = j.at("position").get<int>();
  r.scenario_id = j.value("scenario_id", -1);
  if (j.contains("behavioral_label") && !j["behavioral_label"].is_null()) {
    r.behavioral_label = parse_label(j["behavioral_label"].get<std::string>());
  }
  if (j.contains("cwe") && !j["cwe"].is_null()) r.cwe = parse_cwe(j["cwe"].get<std::string>());
  return r;
}

namespace detail {

inline void write_f32_le(std::ostream& out, float v) {
  auto u = std::bit_cast<std::uint32_t>(v);
  const unsigned char b[4] = {static_cast<unsigned char>(u), static_cast<unsigned char>(u >> 8),
                              static_cast<unsigned char>(u >> 16), static_cast<unsigned char>(u >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline float read_f32_le(const unsigned char* b) {
  const std::uint32_t u = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return std::bit_cast<float>(u);
}

}  // namespace detail

// Writes `<stem>.json` and `<stem>.f32`. All records must share layer and
// dimension.
inline void save_activations(const std::filesystem::path& stem, const std::vector<ActivationRecord>& records,
                             const std::string& model_id) {
  if (records.empty()) throw ValidationError("no activation records to save");
  const auto d = records.front().vector.size();
  const int layer = records.front().layer;
  Json labels = Json::array();
  for (const auto& r : records) {
    if (r.vector.size() != d) throw ValidationError("activation records have mixed dimensions");
    if (r.layer != layer) throw ValidationError("activation records have mixed layers");
    labels.push_back(record_label_json(r));
  }
  Json meta = {{"model_id", model_id},
               {"layer", layer},
               {"d_model", d},
               {"count", records.size()},
               {"labels", labels}};
  auto json_path = stem;
  json_path += ".json";
  auto bin_path = stem;
  bin_path += ".f32";
  write_json_file(json_path, meta);
  std::ofstream out(bin_path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + bin_path.string());
  for (const auto& r : records) {
    for (float v : r.vector) detail::write_f32_le(out, v);
  }
  if (!out) throw IoError("write failed for " + bin_path.string());
}

struct ActivationFile {
  std::string model_id;
  int layer = 0;
  int d_model = 0;
  std::vector<ActivationRecord> records;
};

inline ActivationFile load_activations(const std::filesystem::path& stem) {
  auto json_path = stem;
  json_path += ".json";
  auto bin_path = stem;
  bin_path += ".f32";
  const auto meta = read_json_file(json_path);
  ActivationFile f;
  f.model_id = meta.at("model_id").get<std::string>();
  f.layer = meta.at("layer").get<int>();
  f.d_model = meta.at("d_model").get<int>();
  const auto count = meta.at("count").get<std::size_t>();
  const auto& labels = meta.at("labels");
  if (labels.size() != count) throw IoError(json_path.string() + ": label count does not match count");
  const auto raw = read_text_file(bin_path);
  const std::size_t expect = count * static_cast<std::size_t>(f.d_model) * 4;
  if (raw.size() != expect) {
    throw IoError(bin_path.string() + ": expected " + std::to_string(expect) + " bytes, found " +
                  std::to_string(raw.size()));
  }
  const auto* bytes = reinterpret_cast<const unsigned char*>(raw.data());
  f.records.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto r = record_from_label_json(labels[i]);
    r.vector.resize(f.d_model);
    for (int k = 0; k < f.d_model; ++k) r.vector[k] = detail::read_f32_le(bytes + (i * f.d_model + k) * 4);
    f.records.push_back(std::move(r));
  }
  return f;
}

}  // namespace steerlab
