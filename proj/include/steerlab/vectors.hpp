#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "steerlab/backend.hpp"
#include "steerlab/json_io.hpp"

namespace steerlab {

// Default alpha grid for sweeps.
inline const std::vector<double>& default_alpha_grid() {
  static const std::vector<double> grid{1, 2, 3, 4, 5, 6, 7, 12};
  return grid;
}

struct SteeringVector {
  std::string cwe;  // "CWE-787", ..., "unified", or "random"
  int layer = 0;
  std::vector<double> d;
  double norm = 0.0;
  std::vector<int> training_fold_ids;  // scenario ids the vector was built from
  std::string model_id;
  double alpha_default = 1.0;
};

struct SteeringConfig {
  SteeringVector vector;
  double alpha = 0.0;

  double effective_magnitude() const { return vector.norm * alpha; }
};

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValidationError("dot product of vectors with different lengths");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

namespace detail {

inline std::vector<double> mean_of(const std::vector<ActivationRecord>& acts, int layer, std::size_t dim) {
  std::vector<double> m(dim, 0.0);
  for (const auto& a : acts) {
    if (a.layer != layer) throw ValidationError("activation records come from mixed layers");
    if (a.vector.size() != dim) throw ValidationError("activation records have mixed dimensions");
    for (std::size_t i = 0; i < dim; ++i) m[i] += a.vector[i];
  }
  for (auto& x : m) x /= static_cast<double>(acts.size());
  return m;
}

}  // namespace detail

// d = mean(secure) - mean(insecure). Provenance is the set of scenario ids
// seen on either side.
inline SteeringVector mean_difference(const std::vector<ActivationRecord>& secure_acts,
                                      const std::vector<ActivationRecord>& insecure_acts,
                                      const std::string& cwe = "", const std::string& model_id = "") {
  if (secure_acts.empty() || insecure_acts.empty()) {
    throw ValidationError("mean_difference needs non-empty secure and insecure sets");
  }
  const int layer = secure_acts.front().layer;
  const auto dim = secure_acts.front().vector.size();
  const auto ms = detail::mean_of(secure_acts, layer, dim);
  const auto mi = detail::mean_of(insecure_acts, layer, dim);
  SteeringVector v;
  v.cwe = cwe;
  v.layer = layer;
  v.model_id = model_id;
  v.d.resize(dim);
  for (std::size_t i = 0; i < dim; ++i) v.d[i] = ms[i] - mi[i];
  v.norm = l2_norm(v.d);
  std::set<int> ids;
  for (const auto* side : {&secure_acts, &insecure_acts}) {
    for (const auto& a : *side) {
      if (a.scenario_id >= 0) ids.insert(a.scenario_id);
    }
  }
  v.training_fold_ids.assign(ids.begin(), ids.end());
  return v;
}

// Isotropic Gaussian directions rescaled to `target_norm`.
inline std::vector<SteeringVector> random_controls(double target_norm, int d_model, int n = 10,
                                                   std::uint64_t seed = 0, int layer = 0,
                                                   const std::string& model_id = "") {
  if (!(target_norm > 0.0)) throw ValidationError("random_controls needs target_norm > 0");
  if (d_model < 1 || n < 0) throw ValidationError("random_controls needs d_model >= 1 and n >= 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<SteeringVector> out;
  out.reserve(n);
  for (int k = 0; k < n; ++k) {
    SteeringVector v;
    v.cwe = "random";
    v.layer = layer;
    v.model_id = model_id;
    v.d.resize(d_model);
    double len = 0.0;
    while (len == 0.0) {
      for (auto& x : v.d) x = g(rng);
      len = l2_norm(v.d);
    }
    for (auto& x : v.d) x = x / len * target_norm;
    v.norm = l2_norm(v.d);
    out.push_back(std::move(v));
  }
  return out;
}

// Elementwise sum of alpha_i * d_i.
inline std::vector<double> stack(const std::vector<SteeringConfig>& configs) {
  if (configs.empty()) throw ValidationError("stack needs at least one config");
  const int layer = configs.front().vector.layer;
  const auto dim = configs.front().vector.d.size();
  std::vector<double> out(dim, 0.0);
  for (const auto& c : configs) {
    if (c.vector.layer != layer) throw ValidationError("stacked vectors target different layers");
    if (c.vector.d.size() != dim) throw ValidationError("stacked vectors have different dimensions");
    for (std::size_t i = 0; i < dim; ++i) out[i] += c.alpha * c.vector.d[i];
  }
  return out;
}

struct Geometry {
  std::optional<double> cosine;  // absent when either vector is zero
  double norm_a = 0.0;
  double norm_b = 0.0;
};

inline Geometry geometry(const SteeringVector& a, const SteeringVector& b) {
  if (a.d.size() != b.d.size()) throw ValidationError("geometry of vectors with different d_model");
  Geometry g;
  g.norm_a = l2_norm(a.d);
  g.norm_b = l2_norm(b.d);
  if (g.norm_a > 0.0 && g.norm_b > 0.0) {
    g.cosine = std::clamp(dot(a.d, b.d) / (g.norm_a * g.norm_b), -1.0, 1.0);
  }
  return g;
}

inline double magnitude(const SteeringVector& v, double alpha) { return v.norm * alpha; }

// The float offset added to the residual stream. Every injection method uses
// this exact vector so their outputs match bit for bit.
inline std::vector<float> steering_offset(std::span<const double> d, double alpha) {
  std::vector<float> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = static_cast<float>(alpha * d[i]);
  return out;
}

inline std::vector<float> steering_offset(const SteeringConfig& c) { return steering_offset(c.vector.d, c.alpha); }

inline SteeringVector with_norm_recomputed(SteeringVector v) {
  v.norm = l2_norm(v.d);
  return v;
}

// Throws if the vector was built using the held-out scenario.
inline void check_no_leakage(const SteeringVector& v, int held_out_scenario) {
  if (std::find(v.training_fold_ids.begin(), v.training_fold_ids.end(), held_out_scenario) !=
      v.training_fold_ids.end()) {
    throw LeakageError("steering vector " + v.cwe + " was trained on held-out scenario " +
                       std::to_string(held_out_scenario));
  }
}

inline Json to_json(const SteeringVector& v) {
  return Json{{"cwe", v.cwe},
              {"layer", v.layer},
              {"model_id", v.model_id},
              {"norm", v.norm},
              {"alpha_default", v.alpha_default},
              {"training_fold_ids", v.training_fold_ids},
              {"values", v.d}};
}

inline SteeringVector vector_from_json(const Json& j) {
  SteeringVector v;
  v.cwe = j.at("cwe").get<std::string>();
  v.layer = j.at("layer").get<int>();
  v.model_id = j.value("model_id", std::string());
  v.alpha_default = j.value("alpha_default", 1.0);
  v.training_fold_ids = j.value("training_fold_ids", std::vector<int>{});
  v.d = j.at("values").get<std::vector<double>>();
  v.norm = l2_norm(v.d);
  if (j.contains("norm")) {
    const double stored = j["norm"].get<double>();
    if (std::abs(stored - v.norm) > 1e-9 * std::max(1.0, v.norm)) {
      throw ValidationError("vector file norm does not match its values");
    }
  }
  return v;
}

inline void save_vector(const std::filesystem::path& path, const SteeringVector& v) { write_json_file(path, to_json(v)); }

inline SteeringVector load_vector(const std::filesystem::path& path) { return vector_from_json(read_json_file(path)); }

}  // namespace steerlab
