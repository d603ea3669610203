#pragma once

// Resolves a backend spec string to a live backend.
//
//   toy                         default toy transformer
//   toy:seed=7,layers=4,d=64    toy with overrides (also heads=, ff=)
//   path/to/model.stlb          toy checkpoint file
//   name                        name.stlb under the model cache directory
//
// The cache directory is $STEERLAB_MODEL_CACHE, else ~/.cache/steerlab.

#include <cstdlib>
#include <filesystem>
#include <memory>
#include <string>

#include "steerlab/toy_backend.hpp"

namespace steerlab {

inline std::filesystem::path model_cache_dir() {
  if (const char* env = std::getenv("STEERLAB_MODEL_CACHE"); env && *env) return env;
  if (const char* home = std::getenv("HOME"); home && *home) return std::filesystem::path(home) / ".cache" / "steerlab";
  return std::filesystem::temp_directory_path() / "steerlab-cache";
}

inline ToyConfig parse_toy_spec(const std::string& spec) {
  ToyConfig cfg;
  if (spec == "toy") return cfg;
  if (spec.rfind("toy:", 0) != 0) throw ValidationError("not a toy backend spec: " + spec);
  std::string rest = spec.substr(4);
  std::size_t pos = 0;
  while (pos <= rest.size() && !rest.empty()) {
    const auto comma = rest.find(',', pos);
    const auto item = rest.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ValidationError("toy spec item needs key=value: " + item);
    const auto key = item.substr(0, eq), value = item.substr(eq + 1);
    long long n = 0;
    try {
      std::size_t used = 0;
      n = std::stoll(value, &used);
      if (used != value.size()) throw std::invalid_argument(value);
    } catch (const std::exception&) {
      throw ValidationError("toy spec value is not an integer: " + item);
    }
    if (key == "seed") {
      cfg.seed = static_cast<std::uint64_t>(n);
    } else if (key == "layers") {
      cfg.num_layers = static_cast<int>(n);
    } else if (key == "d") {
      cfg.d_model = static_cast<int>(n);
    } else if (key == "heads") {
      cfg.num_heads = static_cast<int>(n);
    } else if (key == "ff") {
      cfg.d_ff = static_cast<int>(n);
    } else {
      throw ValidationError("unknown toy spec key: " + key);
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  cfg.validate();
  return cfg;
}

inline std::shared_ptr<Backend> open_backend(const std::string& spec) {
  if (spec.empty()) throw ValidationError("empty backend spec");
  if (spec == "toy" || spec.rfind("toy:", 0) == 0) return std::make_shared<ToyTransformer>(parse_toy_spec(spec));
  const std::filesystem::path direct(spec);
  if (std::filesystem::is_regular_file(direct)) return load_checkpoint(direct);
  const auto cached = model_cache_dir() / (spec + ".stlb");
  if (std::filesystem::is_regular_file(cached)) return load_checkpoint(cached);
  throw IoError("no backend '" + spec + "': not a toy spec, not a checkpoint file, and not found as " +
                cached.string());
}

}  // namespace steerlab
