#pragma once

// Linear probes: multinomial logistic regression with an L2 penalty, fit by
// L-BFGS, with leave-one-scenario-out cross-validation.

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "steerlab/activations.hpp"
#include "steerlab/backend.hpp"
#include "steerlab/json_io.hpp"
#include "steerlab/vectors.hpp"

namespace steerlab {

enum class ProbeFamily { Context, Behavioral, Routing3, RoutingBinary };

constexpr std::string_view to_string(ProbeFamily f) {
  switch (f) {
    case ProbeFamily::Context: return "context";
    case ProbeFamily::Behavioral: return "behavioral";
    case ProbeFamily::Routing3: return "routing3";
    case ProbeFamily::RoutingBinary: return "routing_binary";
  }
  return "";
}

inline ProbeFamily parse_probe_family(std::string_view s) {
  for (auto f : {ProbeFamily::Context, ProbeFamily::Behavioral, ProbeFamily::Routing3, ProbeFamily::RoutingBinary}) {
    if (to_string(f) == s) return f;
  }
  throw ValidationError("unknown probe family: " + std::string(s));
}

enum class LabelField { Variant, BehavioralLabel, Cwe };
enum class CvMode { Lobo, None };

struct ActivationDataset {
  std::vector<ActivationRecord> records;
  LabelField label_field = LabelField::Variant;
  // Optional relabeling, e.g. CWE-787/CWE-119 -> "buffer" for the binary
  // routing probe.
  std::map<std::string, std::string> class_map;

  std::string label_of(const ActivationRecord& r) const {
    std::string raw;
    switch (label_field) {
      case LabelField::Variant: raw = std::string(to_string(r.variant)); break;
      case LabelField::BehavioralLabel:
        if (!r.behavioral_label) throw ValidationError("record " + r.prompt_id + " has no behavioral label");
        raw = std::string(to_string(*r.behavioral_label));
        break;
      case LabelField::Cwe:
        if (!r.cwe) throw ValidationError("record " + r.prompt_id + " has no CWE");
        raw = std::string(to_string(*r.cwe));
        break;
    }
    auto it = class_map.find(raw);
    return it == class_map.end() ? raw : it->second;
  }

  std::map<std::string, int> balance() const {
    std::map<std::string, int> counts;
    for (const auto& r : records) ++counts[label_of(r)];
    return counts;
  }
};

struct ProbeModel {
  int layer = 0;
  ProbeFamily family = ProbeFamily::Context;
  std::vector<std::string> classes;
  std::vector<std::vector<double>> weights;  // classes x d_model
  std::vector<double> bias;
  double cv_accuracy = 0.0;
  std::string model_id;
  int d_model() const { return weights.empty() ? 0 : static_cast<int>(weights.front().size()); }
};

struct ProbeTrainOptions {
  double c = 1.0;  // inverse L2 strength: loss = 0.5*|W|^2 + c * sum(CE)
  double tolerance = 1e-6;  // on the max-norm of the gradient
  int max_iterations = 2000;
};

struct Prediction {
  int class_index = 0;
  std::string label;
  double probability = 0.0;
  std::vector<double> logits;
  std::vector<double> probabilities;
};

inline std::vector<double> probe_logits(const ProbeModel& probe, std::span<const float> x) {
  if (x.size() != static_cast<std::size_t>(probe.d_model())) {
    throw ValidationError("activation has length " + std::to_string(x.size()) + ", probe expects " +
                          std::to_string(probe.d_model()));
  }
  std::vector<double> z(probe.classes.size());
  for (std::size_t k = 0; k < z.size(); ++k) {
    double s = probe.bias[k];
    for (std::size_t i = 0; i < x.size(); ++i) s += probe.weights[k][i] * x[i];
    z[k] = s;
  }
  return z;
}

inline Prediction predict(const ProbeModel& probe, std::span<const float> activation) {
  Prediction p;
  p.logits = probe_logits(probe, activation);
  const double mx = *std::max_element(p.logits.begin(), p.logits.end());
  double sum = 0.0;
  p.probabilities.resize(p.logits.size());
  for (std::size_t k = 0; k < p.logits.size(); ++k) sum += (p.probabilities[k] = std::exp(p.logits[k] - mx));
  for (auto& q : p.probabilities) q /= sum;
  p.class_index = static_cast<int>(std::max_element(p.probabilities.begin(), p.probabilities.end()) -
                                   p.probabilities.begin());
  p.label = probe.classes[p.class_index];
  p.probability = p.probabilities[p.class_index];
  return p;
}

// Change in class `k`'s logit when alpha * d is added to the input.
inline double logit_shift(const ProbeModel& probe, int k, std::span<const double> d, double alpha) {
  return alpha * dot(probe.weights.at(k), d);
}

namespace detail {

struct LogRegProblem {
  const std::vector<const float*>* x;
  const std::vector<int>* y;
  int dim;
  int classes;
  double c;

  // Parameters: classes*dim weights then classes biases.
  double eval(const std::vector<double>& theta, std::vector<double>& grad) const {
    const int K = classes, D = dim;
    grad.assign(theta.size(), 0.0);
    double loss = 0.0;
    for (int k = 0; k < K; ++k) {
      for (int i = 0; i < D; ++i) {
        const double w = theta[k * D + i];
        loss += 0.5 * w * w;
        grad[k * D + i] = w;
      }
    }
    std::vector<double> z(K);
    for (std::size_t n = 0; n < x->size(); ++n) {
      const float* xn = (*x)[n];
      for (int k = 0; k < K; ++k) {
        double s = theta[K * D + k];
        const double* w = theta.data() + k * D;
        for (int i = 0; i < D; ++i) s += w[i] * xn[i];
        z[k] = s;
      }
      const double mx = *std::max_element(z.begin(), z.end());
      double sum = 0.0;
      for (int k = 0; k < K; ++k) sum += std::exp(z[k] - mx);
      const double lse = mx + std::log(sum);
      const int yn = (*y)[n];
      loss += c * (lse - z[yn]);
      for (int k = 0; k < K; ++k) {
        const double g = c * (std::exp(z[k] - lse) - (k == yn ? 1.0 : 0.0));
        double* gw = grad.data() + k * D;
        for (int i = 0; i < D; ++i) gw[i] += g * xn[i];
        grad[K * D + k] += g;
      }
    }
    return loss;
  }
};

inline double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

// Limited-memory BFGS with a backtracking Armijo line search.
inline std::vector<double> lbfgs(const LogRegProblem& prob, std::vector<double> theta, double tol, int max_iter) {
  const std::size_t m = 10;
  std::deque<std::vector<double>> s_hist, y_hist;
  std::deque<double> rho_hist;
  std::vector<double> g, g_new, theta_new;
  double f = prob.eval(theta, g);
  const std::size_t n = theta.size();
  for (int iter = 0; iter < max_iter && max_abs(g) > tol; ++iter) {
    std::vector<double> q = g;
    std::vector<double> alpha(s_hist.size());
    for (std::size_t j = s_hist.size(); j-- > 0;) {
      alpha[j] = rho_hist[j] * dot(s_hist[j], q);
      for (std::size_t i = 0; i < n; ++i) q[i] -= alpha[j] * y_hist[j][i];
    }
    double gamma = 1.0;
    if (!s_hist.empty()) gamma = dot(s_hist.back(), y_hist.back()) / dot(y_hist.back(), y_hist.back());
    for (auto& v : q) v *= gamma;
    for (std::size_t j = 0; j < s_hist.size(); ++j) {
      const double beta = rho_hist[j] * dot(y_hist[j], q);
      for (std::size_t i = 0; i < n; ++i) q[i] += s_hist[j][i] * (alpha[j] - beta);
    }
    // Search direction is -q; fall back to steepest descent if not a descent direction.
    double gd = -dot(g, q);
    if (!(gd < 0.0)) {
      q = g;
      gd = -dot(g, g);
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
    }
    double step = 1.0;
    double f_new = 0.0;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      theta_new = theta;
      for (std::size_t i = 0; i < n; ++i) theta_new[i] -= step * q[i];
      f_new = prob.eval(theta_new, g_new);
      if (f_new <= f + 1e-4 * step * gd) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    std::vector<double> s(n), yv(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = theta_new[i] - theta[i];
      yv[i] = g_new[i] - g[i];
    }
    const double sy = dot(s, yv);
    if (sy > 1e-12) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(yv));
      rho_hist.push_back(1.0 / sy);
      if (s_hist.size() > m) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    theta.swap(theta_new);
    g.swap(g_new);
    f = f_new;
  }
  return theta;
}

// Records are put into a canonical order before fitting so the result does
// not depend on input order.
inline std::vector<std::size_t> canonical_order(const std::vector<ActivationRecord>& recs) {
  std::vector<std::size_t> idx(recs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const auto& ra = recs[a];
    const auto& rb = recs[b];
    if (ra.scenario_id != rb.scenario_id) return ra.scenario_id < rb.scenario_id;
    if (ra.prompt_id != rb.prompt_id) return ra.prompt_id < rb.prompt_id;
    if (ra.variant != rb.variant) return ra.variant < rb.variant;
    return ra.vector < rb.vector;
  });
  return idx;
}

struct FitInput {
  std::vector<const float*> x;
  std::vector<int> y;
};

inline void fit_into(ProbeModel& model, const FitInput& in, int dim, const ProbeTrainOptions& opt) {
  const int K = static_cast<int>(model.classes.size());
  LogRegProblem prob{&in.x, &in.y, dim, K, opt.c};
  std::vector<double> theta(static_cast<std::size_t>(K) * dim + K, 0.0);
  theta = lbfgs(prob, std::move(theta), opt.tolerance, opt.max_iterations);
  model.weights.assign(K, std::vector<double>(dim));
  model.bias.assign(K, 0.0);
  for (int k = 0; k < K; ++k) {
    std::copy(theta.begin() + k * dim, theta.begin() + (k + 1) * dim, model.weights[k].begin());
    model.bias[k] = theta[K * dim + k];
  }
}

}  // namespace detail

inline ProbeModel train_probe(const ActivationDataset& dataset, int layer, ProbeFamily family, CvMode cv,
                              const ProbeTrainOptions& options = {}, const std::string& model_id = "") {
  const auto& recs = dataset.records;
  if (recs.empty()) throw ValidationError("probe dataset is empty");
  const auto dim = recs.front().vector.size();
  for (const auto& r : recs) {
    if (r.layer != layer) {
      throw ValidationError("record " + r.prompt_id + " is from layer " + std::to_string(r.layer) +
                            ", expected " + std::to_string(layer));
    }
    if (r.vector.size() != dim) throw ValidationError("probe dataset has mixed dimensions");
  }
  std::set<std::string> class_set;
  for (const auto& r : recs) class_set.insert(dataset.label_of(r));
  if (class_set.size() < 2) throw ValidationError("probe training needs at least two classes");

  ProbeModel model;
  model.layer = layer;
  model.family = family;
  model.model_id = model_id;
  model.classes.assign(class_set.begin(), class_set.end());
  auto class_index = [&](const ActivationRecord& r) {
    const auto label = dataset.label_of(r);
    return static_cast<int>(std::lower_bound(model.classes.begin(), model.classes.end(), label) -
                            model.classes.begin());
  };
  const auto order = detail::canonical_order(recs);

  if (cv == CvMode::Lobo) {
    std::set<int> scenarios;
    for (const auto& r : recs) {
      if (r.scenario_id < 0) throw ValidationError("LOBO cross-validation needs scenario ids on every record");
      scenarios.insert(r.scenario_id);
    }
    if (scenarios.size() < 2) throw ValidationError("LOBO cross-validation needs at least two scenarios");
    double acc_sum = 0.0;
    for (int held : scenarios) {
      detail::FitInput train;
      for (auto i : order) {
        if (recs[i].scenario_id != held) {
          train.x.push_back(recs[i].vector.data());
          train.y.push_back(class_index(recs[i]));
        }
      }
      ProbeModel fold = model;
      detail::fit_into(fold, train, static_cast<int>(dim), options);
      int correct = 0, total = 0;
      for (auto i : order) {
        if (recs[i].scenario_id != held) continue;
        ++total;
        if (predict(fold, recs[i].vector).class_index == class_index(recs[i])) ++correct;
      }
      acc_sum += static_cast<double>(correct) / total;
    }
    model.cv_accuracy = acc_sum / static_cast<double>(scenarios.size());
  }

  detail::FitInput all;
  for (auto i : order) {
    all.x.push_back(recs[i].vector.data());
    all.y.push_back(class_index(recs[i]));
  }
  detail::fit_into(model, all, static_cast<int>(dim), options);
  if (cv == CvMode::None) {
    int correct = 0;
    for (const auto& r : recs) correct += predict(model, r.vector).class_index == class_index(r);
    model.cv_accuracy = static_cast<double>(correct) / recs.size();
  }
  return model;
}

struct LayerAccuracy {
  int layer = 0;
  std::optional<double> accuracy;  // absent when the layer had no dataset
};

// Cross-validated accuracy at every layer in [0, num_layers). Layers without a
// dataset show up as gaps.
inline std::vector<LayerAccuracy> layer_sweep(const std::map<int, ActivationDataset>& datasets_by_layer,
                                              ProbeFamily family, int num_layers, CvMode cv = CvMode::Lobo,
                                              const ProbeTrainOptions& options = {}) {
  std::vector<LayerAccuracy> curve;
  for (int l = 0; l < num_layers; ++l) {
    LayerAccuracy la{l, std::nullopt};
    auto it = datasets_by_layer.find(l);
    if (it != datasets_by_layer.end()) la.accuracy = train_probe(it->second, l, family, cv, options).cv_accuracy;
    curve.push_back(la);
  }
  return curve;
}

inline Json to_json(const ProbeModel& p) {
  return Json{{"layer", p.layer},
              {"family", to_string(p.family)},
              {"classes", p.classes},
              {"weights", p.weights},
              {"bias", p.bias},
              {"cv_accuracy", p.cv_accuracy},
              {"model_id", p.model_id}};
}

inline ProbeModel probe_from_json(const Json& j) {
  ProbeModel p;
  p.layer = j.at("layer").get<int>();
  p.family = parse_probe_family(j.at("family").get<std::string>());
  p.classes = j.at("classes").get<std::vector<std::string>>();
  p.weights = j.at("weights").get<std::vector<std::vector<double>>>();
  p.bias = j.at("bias").get<std::vector<double>>();
  p.cv_accuracy = j.value("cv_accuracy", 0.0);
  p.model_id = j.value("model_id", std::string());
  if (p.weights.size() != p.classes.size() || p.bias.size() != p.classes.size()) {
    throw ValidationError("probe file: weights/bias do not match class count");
  }
  for (const auto& row : p.weights) {
    if (row.size() != p.weights.front().size()) throw ValidationError("probe file: ragged weight matrix");
  }
  return p;
}

inline void save_probe(const std::filesystem::path& path, const ProbeModel& p) { write_json_file(path, to_json(p)); }
inline ProbeModel load_probe(const std::filesystem::path& path) { return probe_from_json(read_json_file(path)); }

}  // namespace steerlab
