#pragma once

// Request handling for the completion server. The HTTP layer lives in the CLI;
// everything here works on JSON values so it can be driven without a socket.
//
// Config file:
//   {"backend": "toy:seed=7", "strategy": "two_tier_binary", "method": "persistent_forward_replacement",
//    "vectors": {"CWE-787": "v787.json", ...}, "probe": "probe.json", "alpha": 4.0,
//    "confidence_floor": 0.5}
// Request:  {"prompt": "...", "params": {...}, "strategy_id": "...", "cwe": "CWE-787"}
// Response: {"text", "predicted_class", "steered", "label", "timing_ms"}

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>

#include "steerlab/factory.hpp"
#include "steerlab/json_io.hpp"
#include "steerlab/runtime.hpp"

namespace steerlab {

struct ServeConfig {
  std::string backend = "toy";
  RoutingKind strategy = RoutingKind::None;
  InjectionMethod method = InjectionMethod::PersistentForwardReplacement;
  std::map<Cwe, std::filesystem::path> vectors;
  std::optional<std::filesystem::path> single_vector;
  std::optional<std::filesystem::path> probe;
  std::optional<double> alpha;  // overrides each vector's alpha_default
  double confidence_floor = 0.5;
};

inline ServeConfig serve_config_from_json(const Json& j, const std::filesystem::path& base = {}) {
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_relative() && !base.empty() ? base / path : path;
  };
  ServeConfig c;
  c.backend = j.value("backend", c.backend);
  if (j.contains("strategy")) c.strategy = parse_routing_kind(j.at("strategy").get<std::string>());
  if (j.contains("method")) c.method = parse_injection_method(j.at("method").get<std::string>());
  if (j.contains("vectors")) {
    for (const auto& [k, v] : j.at("vectors").items()) c.vectors[parse_cwe(k)] = resolve(v.get<std::string>());
  }
  if (j.contains("single_vector")) c.single_vector = resolve(j.at("single_vector").get<std::string>());
  if (j.contains("probe")) c.probe = resolve(j.at("probe").get<std::string>());
  if (j.contains("alpha")) c.alpha = j.at("alpha").get<double>();
  c.confidence_floor = j.value("confidence_floor", c.confidence_floor);
  return c;
}

inline ServeConfig load_serve_config(const std::filesystem::path& path) {
  return serve_config_from_json(read_json_file(path), path.parent_path());
}

class CompletionService {
 public:
  CompletionService(std::shared_ptr<Backend> backend, RoutingStrategy strategy,
                    InjectionMethod method = InjectionMethod::PersistentForwardReplacement)
      : backend_(std::move(backend)), strategy_(std::move(strategy)), method_(method) {
    if (!backend_) throw ValidationError("completion service needs a backend");
    strategy_.validate();
  }

  explicit CompletionService(const ServeConfig& c) : CompletionService(open_backend(c.backend), {}, c.method) {
    strategy_.kind = c.strategy;
    strategy_.confidence_floor = c.confidence_floor;
    for (const auto& [cwe, path] : c.vectors) {
      auto v = load_vector(path);
      if (c.alpha) strategy_.alphas[cwe] = *c.alpha;
      strategy_.vector_table[cwe] = std::move(v);
    }
    if (c.single_vector) {
      strategy_.single_vector = load_vector(*c.single_vector);
      if (c.alpha) strategy_.single_vector->alpha_default = *c.alpha;
    }
    if (c.probe) strategy_.probe = load_probe(*c.probe);
    strategy_.validate();
  }

  const Backend& backend() const { return *backend_; }
  const RoutingStrategy& strategy() const { return strategy_; }

  Json health() const {
    Json ids = Json::array();
    for (const auto& [cwe, v] : strategy_.vector_table) ids.push_back(to_string(cwe));
    if (strategy_.single_vector) ids.push_back(strategy_.single_vector->cwe);
    return Json{{"status", "ok"},
                {"model_id", backend_->info().model_id},
                {"strategy", to_string(strategy_.kind)},
                {"method", to_string(method_)},
                {"vectors", ids},
                {"probe", strategy_.probe ? Json(to_string(strategy_.probe->family)) : Json(nullptr)}};
  }

  // Never throws: failures come back as {"error": {"code", "message"}}.
  Json handle(const Json& request) {
    try {
      return complete(request);
    } catch (const ValidationError& e) {
      return error("invalid_request", e.what());
    } catch (const Json::exception& e) {
      return error("invalid_request", e.what());
    } catch (const AccessError& e) {
      return error("busy", e.what());
    } catch (const std::exception& e) {
      return error("internal", e.what());
    }
  }

  Json handle_text(const std::string& body) {
    Json req;
    try {
      req = Json::parse(body);
    } catch (const Json::parse_error& e) {
      return error("invalid_json", e.what());
    }
    return handle(req);
  }

 private:
  static Json error(const std::string& code, const std::string& message) {
    return Json{{"error", {{"code", code}, {"message", message}}}};
  }

  static GenerationParams params_from(const Json& j) {
    GenerationParams p;
    if (!j.is_object()) throw ValidationError("params must be an object");
    p.temperature = j.value("temperature", p.temperature);
    p.top_p = j.value("top_p", p.top_p);
    p.max_new_tokens = j.value("max_new_tokens", p.max_new_tokens);
    p.min_new_tokens = j.value("min_new_tokens", p.min_new_tokens);
    p.seed = j.value("seed", p.seed);
    p.greedy = j.value("greedy", p.greedy);
    p.validate();
    return p;
  }

  Json complete(const Json& req) {
    const auto t0 = std::chrono::steady_clock::now();
    if (!req.is_object()) throw ValidationError("request must be a JSON object");
    if (!req.contains("prompt") || !req.at("prompt").is_string()) throw ValidationError("request needs a string prompt");
    const auto prompt = backend_->tokenizer().encode(req.at("prompt").get<std::string>());
    if (prompt.empty()) throw ValidationError("prompt is empty");
    const auto params = params_from(req.value("params", Json::object()));
    std::optional<Cwe> cwe;
    if (req.contains("cwe")) cwe = parse_cwe(req.at("cwe").get<std::string>());

    RoutingStrategy strategy = strategy_;
    if (req.contains("strategy_id")) {
      const auto kind = parse_routing_kind(req.at("strategy_id").get<std::string>());
      if (kind != RoutingKind::None && kind != strategy_.kind) {
        throw ValidationError("strategy '" + std::string(to_string(kind)) + "' is not loaded on this server");
      }
      strategy.kind = kind;
    }
    const auto decision = route(strategy, *backend_, prompt, cwe);

    Json resp;
    std::string text;
    if (decision.selected && decision.alpha != 0.0) {
      const SteeringConfig cfg{*decision.selected, decision.alpha};
      if (method_ == InjectionMethod::WeightFoldIn) {
        std::unique_lock lock(gate_);
        text = steer_generate(*backend_, prompt, cfg, method_, params).text;
      } else {
        std::shared_lock lock(gate_);
        text = steer_generate(*backend_, prompt, cfg, method_, params).text;
      }
      resp["steered"] = true;
    } else {
      std::shared_lock lock(gate_);
      text = generate(*backend_, prompt, params).text;
      resp["steered"] = false;
    }
    resp["text"] = text;
    resp["predicted_class"] = decision.predicted_class;
    resp["confidence"] = decision.confidence;
    const auto score_cwe = cwe ? cwe : decision.vector_cwe;
    resp["label"] = score_cwe ? Json(to_string(score_output(*score_cwe, text))) : Json(nullptr);
    resp["timing_ms"] =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return resp;
  }

  std::shared_ptr<Backend> backend_;
  RoutingStrategy strategy_;
  InjectionMethod method_;
  std::shared_mutex gate_;  // fold-in requests run alone
};

}  // namespace steerlab
