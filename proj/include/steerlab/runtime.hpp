#pragma once

// Steering runtime: routing, steered generation with three injection
// mechanisms, and the equal-length latency benchmark.

#include <algorithm>
#include <chrono>
#include <ctime>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "steerlab/backend.hpp"
#include "steerlab/generation.hpp"
#include "steerlab/probes.hpp"
#include "steerlab/scoring.hpp"
#include "steerlab/stats.hpp"
#include "steerlab/vectors.hpp"

namespace steerlab {

enum class RoutingKind { Oracle, ThreeWayProbe, TwoTierBinary, SingleVector, None };

constexpr std::string_view to_string(RoutingKind k) {
  switch (k) {
    case RoutingKind::Oracle: return "oracle";
    case RoutingKind::ThreeWayProbe: return "three_way_probe";
    case RoutingKind::TwoTierBinary: return "two_tier_binary";
    case RoutingKind::SingleVector: return "single_vector";
    case RoutingKind::None: return "none";
  }
  return "";
}

inline RoutingKind parse_routing_kind(std::string_view s) {
  for (auto k : {RoutingKind::Oracle, RoutingKind::ThreeWayProbe, RoutingKind::TwoTierBinary,
                 RoutingKind::SingleVector, RoutingKind::None}) {
    if (to_string(k) == s) return k;
  }
  throw ValidationError("unknown routing strategy: " + std::string(s));
}

// Binary routing classes and the vectors they map to.
inline constexpr std::string_view kBufferClass = "buffer";
inline constexpr std::string_view kFormatClass = "format";

inline std::map<std::string, std::string> two_tier_class_map() {
  return {{"CWE-787", std::string(kBufferClass)},
          {"CWE-119", std::string(kBufferClass)},
          {"CWE-134", std::string(kFormatClass)}};
}

struct RoutingStrategy {
  RoutingKind kind = RoutingKind::None;
  std::optional<ProbeModel> probe;
  std::map<Cwe, SteeringVector> vector_table;
  std::optional<SteeringVector> single_vector;
  double confidence_floor = 0.5;
  // Per-CWE alpha; falls back to the vector's alpha_default.
  std::map<Cwe, double> alphas;

  void validate() const {
    const bool probe_kind = kind == RoutingKind::ThreeWayProbe || kind == RoutingKind::TwoTierBinary;
    if (probe_kind && !probe) throw ValidationError(std::string(to_string(kind)) + " routing needs a probe");
    if (kind == RoutingKind::SingleVector && !single_vector) {
      throw ValidationError("single_vector routing needs a vector");
    }
    if (confidence_floor < 0.0 || confidence_floor > 1.0) throw ValidationError("confidence floor must be in [0, 1]");
  }
};

struct RouteDecision {
  std::optional<SteeringVector> selected;
  std::optional<Cwe> vector_cwe;  // table key of the selected vector
  std::string predicted_class;
  double confidence = 1.0;
  double alpha = 0.0;
};

namespace detail {

inline const SteeringVector& table_vector(const RoutingStrategy& s, Cwe cwe) {
  auto it = s.vector_table.find(cwe);
  if (it == s.vector_table.end()) {
    throw ValidationError("no steering vector for " + std::string(to_string(cwe)));
  }
  return it->second;
}

inline double alpha_for(const RoutingStrategy& s, Cwe cwe, const SteeringVector& v) {
  auto it = s.alphas.find(cwe);
  return it == s.alphas.end() ? v.alpha_default : it->second;
}

}  // namespace detail

// Early-layer activation of the prompt's final token.
inline std::vector<float> routing_activation(const Backend& backend, std::span<const int> prompt, int layer) {
  ForwardPlan plan;
  plan.captures.push_back({Site::layer_output(layer), Position::last()});
  return instrumented_forward(backend, prompt, plan).captured.at(0).vector;
}

inline RouteDecision route(const RoutingStrategy& strategy, const Backend& backend, std::span<const int> prompt,
                           std::optional<Cwe> true_cwe = std::nullopt) {
  strategy.validate();
  RouteDecision d;
  auto select = [&](Cwe cwe) {
    const auto& v = detail::table_vector(strategy, cwe);
    d.selected = v;
    d.vector_cwe = cwe;
    d.alpha = detail::alpha_for(strategy, cwe, v);
  };
  switch (strategy.kind) {
    case RoutingKind::None:
      d.predicted_class = "none";
      return d;
    case RoutingKind::Oracle:
      if (!true_cwe) throw ValidationError("oracle routing needs the true CWE");
      d.predicted_class = std::string(to_string(*true_cwe));
      select(*true_cwe);
      return d;
    case RoutingKind::SingleVector:
      d.predicted_class = strategy.single_vector->cwe;
      d.selected = strategy.single_vector;
      d.alpha = strategy.single_vector->alpha_default;
      return d;
    case RoutingKind::ThreeWayProbe:
    case RoutingKind::TwoTierBinary: {
      const auto& probe = *strategy.probe;
      const auto act = routing_activation(backend, prompt, probe.layer);
      const auto pred = predict(probe, act);
      d.predicted_class = pred.label;
      d.confidence = pred.probability;
      if (pred.probability < strategy.confidence_floor) return d;
      if (strategy.kind == RoutingKind::ThreeWayProbe) {
        select(parse_cwe(pred.label));
      } else if (pred.label == kBufferClass) {
        select(Cwe::Cwe787);
      } else if (pred.label == kFormatClass) {
        select(Cwe::Cwe134);
      } else {
        throw ValidationError("binary routing probe predicted unknown class " + pred.label);
      }
      return d;
    }
  }
  return d;
}

enum class InjectionMethod { PerStepCallback, PersistentForwardReplacement, WeightFoldIn };

constexpr std::string_view to_string(InjectionMethod m) {
  switch (m) {
    case InjectionMethod::PerStepCallback: return "per_step_callback";
    case InjectionMethod::PersistentForwardReplacement: return "persistent_forward_replacement";
    case InjectionMethod::WeightFoldIn: return "weight_fold_in";
  }
  return "";
}

inline InjectionMethod parse_injection_method(std::string_view s) {
  for (auto m : {InjectionMethod::PerStepCallback, InjectionMethod::PersistentForwardReplacement,
                 InjectionMethod::WeightFoldIn}) {
    if (to_string(m) == s) return m;
  }
  throw ValidationError("unknown injection method: " + std::string(s));
}

// Adds `offset` to a layer's output bias for the guard's lifetime and writes
// the saved bias back on destruction.
class FoldIn {
 public:
  FoldIn(ExclusiveLease& lease, int layer, std::span<const float> offset)
      : lease_(&lease), layer_(layer), saved_(lease.output_bias(layer)) {
    if (offset.size() != saved_.size()) throw ValidationError("fold-in offset has wrong length");
    std::vector<float> b = saved_;
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += offset[i];
    lease.set_output_bias(layer, b);
  }
  FoldIn(const FoldIn&) = delete;
  FoldIn& operator=(const FoldIn&) = delete;
  ~FoldIn() { uninstall(); }

  void uninstall() {
    if (lease_) {
      lease_->set_output_bias(layer_, saved_);
      lease_ = nullptr;
    }
  }

 private:
  ExclusiveLease* lease_;
  int layer_;
  std::vector<float> saved_;
};

struct SteerOutput {
  std::string text;
  std::vector<int> tokens;
  std::optional<SecurityLabel> label;
};

// Generates with alpha * d added to the configured layer's output residual at
// every position. `backend` is non-const only for the fold-in method.
inline SteerOutput steer_generate(Backend& backend, std::span<const int> prompt, const SteeringConfig& config,
                                  InjectionMethod method, const GenerationParams& params,
                                  std::optional<Cwe> score_as = std::nullopt) {
  const auto inf = backend.info();
  const int layer = config.vector.layer;
  if (layer < 0 || layer >= inf.num_layers) throw ValidationError("steering layer out of range");
  if (config.vector.d.size() != static_cast<std::size_t>(inf.d_model)) {
    throw ValidationError("steering vector length does not match d_model");
  }
  const auto offset = steering_offset(config);
  Generation g;
  switch (method) {
    case InjectionMethod::PerStepCallback: {
      StepCallbacks cb;
      cb.before = [&](Session& s, int) {
        s.add_hook({layer, [&offset](int, std::span<float> x) {
                      for (std::size_t i = 0; i < x.size(); ++i) x[i] += offset[i];
                    }});
      };
      cb.after = [](Session& s, int) { s.clear_hooks(); };
      g = generate(backend, prompt, params, {}, {}, cb);
      break;
    }
    case InjectionMethod::PersistentForwardReplacement: {
      SessionOptions opt;
      opt.persistent_offsets.push_back({layer, offset});
      g = generate(backend, prompt, params, {}, opt);
      break;
    }
    case InjectionMethod::WeightFoldIn: {
      ExclusiveLease lease(backend);
      FoldIn fold(lease, layer, offset);
      auto session = lease.open_session({}, static_cast<int>(prompt.size()));
      g = generate_in_session(*session, backend.tokenizer(), prompt, params);
      session.reset();
      fold.uninstall();
      break;
    }
  }
  SteerOutput out{g.text, g.tokens, std::nullopt};
  if (score_as) out.label = score_output(*score_as, out.text);
  return out;
}

// --- latency ------------------------------------------------------------------

struct LatencyReport {
  InjectionMethod method = InjectionMethod::PersistentForwardReplacement;
  std::size_t tokens_generated = 0;  // per arm, per repetition
  double baseline_ms = 0.0;  // median over repetitions
  double steered_ms = 0.0;
  double overhead_fraction = 0.0;
  std::vector<double> baseline_samples_ms;
  std::vector<double> steered_samples_ms;
};

// Fails unless both arms generated the same number of tokens.
inline LatencyReport make_latency_report(InjectionMethod method, std::size_t baseline_tokens,
                                         std::size_t steered_tokens, std::vector<double> baseline_ms,
                                         std::vector<double> steered_ms) {
  if (baseline_tokens != steered_tokens) {
    throw UnequalLengthError("latency arms generated different token counts (baseline " +
                             std::to_string(baseline_tokens) + ", steered " + std::to_string(steered_tokens) +
                             "); timings are not comparable");
  }
  if (baseline_ms.empty() || baseline_ms.size() != steered_ms.size()) {
    throw ValidationError("latency arms need the same non-zero number of repetitions");
  }
  LatencyReport r;
  r.method = method;
  r.tokens_generated = baseline_tokens;
  r.baseline_ms = percentile(baseline_ms, 50.0);
  r.steered_ms = percentile(steered_ms, 50.0);
  r.overhead_fraction = r.steered_ms / r.baseline_ms - 1.0;
  r.baseline_samples_ms = std::move(baseline_ms);
  r.steered_samples_ms = std::move(steered_ms);
  return r;
}

// Wall time is what a caller sees. Thread CPU time ignores preemption by
// other processes, which dominates the variance on shared machines.
enum class LatencyClock { Wall, ThreadCpu };

struct LatencyOptions {
  int tokens = 64;
  int warmup_rounds = 1;
  int repetitions = 5;
  std::uint64_t seed = 0;
  LatencyClock clock = LatencyClock::Wall;
};

namespace detail {

inline double thread_cpu_ms() {
  timespec ts{};
  clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) * 1e3 + static_cast<double>(ts.tv_nsec) * 1e-6;
}

template <class F>
double timed_ms(const Backend& backend, LatencyClock clock, F&& fn) {
  backend.synchronize();
  if (clock == LatencyClock::ThreadCpu) {
    const double t0 = thread_cpu_ms();
    fn();
    backend.synchronize();
    return thread_cpu_ms() - t0;
  }
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  backend.synchronize();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

}  // namespace detail

struct LatencyArm {
  InjectionMethod method = InjectionMethod::PersistentForwardReplacement;
  SteeringConfig config;
};

// Times several steered arms against one shared baseline. Within each
// repetition every arm runs back to back on the same prompt, and the arm order
// rotates from prompt to prompt, so slow drift in machine speed lands on all
// arms alike. Every arm is forced to exactly `tokens` new tokens per prompt.
// Returns one report per arm, in order.
inline std::vector<LatencyReport> latency_compare(Backend& backend, const std::vector<std::vector<int>>& prompts,
                                                  const std::vector<LatencyArm>& arms,
                                                  const LatencyOptions& options = {}) {
  if (options.repetitions < 3) throw ValidationError("latency benchmark needs at least 3 repetitions");
  if (prompts.empty()) throw ValidationError("latency benchmark needs prompts");
  if (arms.empty()) throw ValidationError("latency benchmark needs at least one steered arm");
  GenerationParams gp;
  gp.max_new_tokens = options.tokens;
  gp.min_new_tokens = options.tokens;
  gp.seed = options.seed;

  const std::size_t k = arms.size() + 1;  // slot 0 is the baseline
  auto run = [&](std::size_t slot, const std::vector<int>& p) {
    return slot == 0 ? generate(backend, p, gp).tokens.size()
                     : steer_generate(backend, p, arms[slot - 1].config, arms[slot - 1].method, gp).tokens.size();
  };
  for (int w = 0; w < options.warmup_rounds; ++w) {
    for (const auto& p : prompts) {
      for (std::size_t slot = 0; slot < k; ++slot) run(slot, p);
    }
  }
  std::vector<std::size_t> tokens(k, 0);
  std::vector<std::vector<double>> samples(k);
  for (int r = 0; r < options.repetitions; ++r) {
    std::vector<double> ms(k, 0.0);
    std::vector<std::size_t> n(k, 0);
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t slot = (j + r + i) % k;
        ms[slot] += detail::timed_ms(backend, options.clock, [&] { n[slot] += run(slot, prompts[i]); });
      }
    }
    for (std::size_t slot = 0; slot < k; ++slot) {
      samples[slot].push_back(ms[slot]);
      if (r == 0) {
        tokens[slot] = n[slot];
      } else if (n[slot] != tokens[slot]) {
        throw UnequalLengthError("token counts changed between repetitions");
      }
    }
  }
  std::vector<LatencyReport> out;
  for (std::size_t a = 0; a < arms.size(); ++a) {
    out.push_back(make_latency_report(arms[a].method, tokens[0], tokens[a + 1], samples[0], samples[a + 1]));
  }
  return out;
}

inline LatencyReport latency_bench(Backend& backend, const std::vector<std::vector<int>>& prompts,
                                   InjectionMethod method, const SteeringConfig& config,
                                   const LatencyOptions& options = {}) {
  return latency_compare(backend, prompts, {{method, config}}, options).front();
}

inline Json to_json(const LatencyReport& r) {
  return Json{{"method", to_string(r.method)},
              {"tokens_generated", r.tokens_generated},
              {"baseline_ms", r.baseline_ms},
              {"steered_ms", r.steered_ms},
              {"overhead_fraction", r.overhead_fraction},
              {"baseline_samples_ms", r.baseline_samples_ms},
              {"steered_samples_ms", r.steered_samples_ms}};
}

}  // namespace steerlab
