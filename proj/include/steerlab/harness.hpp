#pragma once

// Experiment orchestration: LOBO alpha sweeps, the transfer matrix, end-to-end
// routed evaluation and the random-direction control.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "steerlab/corpus.hpp"
#include "steerlab/probes.hpp"
#include "steerlab/runtime.hpp"
#include "steerlab/scoring.hpp"
#include "steerlab/vectors.hpp"

namespace steerlab {

struct HarnessOptions {
  GenerationParams params;
  int seeds_per_prompt = 3;
  std::uint64_t seed = 0;
  InjectionMethod method = InjectionMethod::PersistentForwardReplacement;
  std::size_t resamples = kDefaultResamples;
  int workers = 1;
  std::optional<int> layer;  // steering layer; the backend's last layer when unset

  void validate() const {
    params.validate();
    if (seeds_per_prompt < 1) throw ValidationError("seeds_per_prompt must be >= 1");
    if (workers < 1) throw ValidationError("workers must be >= 1");
  }
};

// splitmix64 step, used to derive independent per-generation seeds.
constexpr std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace detail {

// Runs fn(i) for i in [0, n). Results must be written by index so the outcome
// does not depend on scheduling.
template <class F>
void parallel_for(std::size_t n, int workers, F&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  std::vector<std::thread> pool;
  const auto count = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  for (std::size_t w = 0; w < count; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

inline int effective_workers(const HarnessOptions& o) {
  return o.method == InjectionMethod::WeightFoldIn ? 1 : o.workers;
}

}  // namespace detail

inline int steering_layer(const Backend& backend, const HarnessOptions& o) {
  const auto inf = backend.info();
  const int layer = o.layer.value_or(inf.last_layer_index);
  if (layer < 0 || layer >= inf.num_layers) throw ValidationError("steering layer out of range");
  return layer;
}

// --- activation collection ---------------------------------------------------

struct LabeledPrompt {
  std::string id;
  std::string text;
  Variant variant = Variant::Neutral;
  std::optional<Cwe> cwe;
  int scenario_id = -1;
};

inline std::vector<LabeledPrompt> pair_prompts(const std::vector<PromptPair>& pairs) {
  std::vector<LabeledPrompt> out;
  out.reserve(pairs.size() * 2);
  for (const auto& p : pairs) {
    out.push_back({p.id() + "/insecure", p.insecure_text, Variant::Insecure, p.cwe, p.scenario_id});
    out.push_back({p.id() + "/secure", p.secure_text, Variant::Secure, p.cwe, p.scenario_id});
  }
  return out;
}

// Last-token layer-output activations, one forward pass per prompt, keyed by
// layer.
inline std::map<int, std::vector<ActivationRecord>> collect_activations(const Backend& backend,
                                                                        const std::vector<LabeledPrompt>& prompts,
                                                                        const std::vector<int>& layers,
                                                                        int workers = 1) {
  if (layers.empty()) throw ValidationError("collect_activations needs at least one layer");
  ForwardPlan plan;
  for (int l : layers) plan.captures.push_back({Site::layer_output(l), Position::last()});
  std::vector<std::vector<ActivationRecord>> per_prompt(prompts.size());
  detail::parallel_for(prompts.size(), workers, [&](std::size_t i) {
    const auto& p = prompts[i];
    auto recs = instrumented_forward(backend, backend.tokenizer().encode(p.text), plan).captured;
    for (auto& r : recs) {
      r.prompt_id = p.id;
      r.variant = p.variant;
      r.cwe = p.cwe;
      r.scenario_id = p.scenario_id;
    }
    per_prompt[i] = std::move(recs);
  });
  std::map<int, std::vector<ActivationRecord>> out;
  for (auto& recs : per_prompt) {
    for (auto& r : recs) out[r.layer].push_back(std::move(r));
  }
  return out;
}

// Mean-difference vector (secure minus insecure) over `pairs` at `layer`.
inline SteeringVector fit_vector(const Backend& backend, const std::vector<PromptPair>& pairs, Cwe cwe, int layer,
                                 int workers = 1) {
  if (pairs.empty()) throw ValidationError("no pairs to fit a vector from");
  const auto acts = collect_activations(backend, pair_prompts(pairs), {layer}, workers).at(layer);
  std::vector<ActivationRecord> secure, insecure;
  for (const auto& r : acts) (r.variant == Variant::Secure ? secure : insecure).push_back(r);
  return mean_difference(secure, insecure, std::string(to_string(cwe)), backend.info().model_id);
}

// Vector for one LOBO fold from pre-collected pair activations. Only records
// belonging to the fold's training pairs are used, and the result is checked
// against the held-out scenario.
inline SteeringVector fold_vector(const std::vector<ActivationRecord>& records, const LoboFold& fold, Cwe cwe,
                                  const std::string& model_id = "") {
  std::set<std::string> train_ids;
  for (const auto& p : fold.train_pairs) train_ids.insert(p.id());
  std::vector<ActivationRecord> secure, insecure;
  for (const auto& r : records) {
    const auto slash = r.prompt_id.rfind('/');
    if (slash == std::string::npos || !train_ids.count(r.prompt_id.substr(0, slash))) continue;
    if (r.variant == Variant::Secure) secure.push_back(r);
    if (r.variant == Variant::Insecure) insecure.push_back(r);
  }
  auto v = mean_difference(secure, insecure, std::string(to_string(cwe)), model_id);
  check_no_leakage(v, fold.held_out_scenario);
  return v;
}

inline SteeringVector fit_fold_vector(const Backend& backend, const LoboFold& fold, Cwe cwe, int layer,
                                      int workers = 1) {
  const auto acts = collect_activations(backend, pair_prompts(fold.train_pairs), {layer}, workers).at(layer);
  return fold_vector(acts, fold, cwe, backend.info().model_id);
}

// --- steered evaluation --------------------------------------------------------

struct EvalItem {
  std::string prompt_id;
  Cwe cwe = Cwe::Cwe787;  // scorer
  std::string text;
  std::uint64_t stream = 0;  // seeds derive from this, not from the steering direction
};

struct Completion {
  std::string prompt_id;
  Cwe cwe = Cwe::Cwe787;
  int seed_index = 0;
  std::string text;
  SecurityLabel label = SecurityLabel::Other;
  std::string predicted_class;
  bool steered = false;
};

// Generates `seeds_per_prompt` completions per item with the optional
// steering config and scores them. Seeds depend only on the item stream and
// the seed index, so every direction sees the same sampling noise.
inline std::vector<Completion> run_items(Backend& backend, const std::vector<EvalItem>& items,
                                         const std::optional<SteeringConfig>& config, const HarnessOptions& o) {
  o.validate();
  const int k = o.seeds_per_prompt;
  std::vector<Completion> out(items.size() * k);
  detail::parallel_for(out.size(), detail::effective_workers(o), [&](std::size_t idx) {
    const auto& item = items[idx / k];
    const int s = static_cast<int>(idx % k);
    GenerationParams gp = o.params;
    gp.seed = mix_seed(mix_seed(o.seed, item.stream), static_cast<std::uint64_t>(s));
    const auto tokens = backend.tokenizer().encode(item.text);
    Completion c{item.prompt_id, item.cwe, s, "", SecurityLabel::Other, "", false};
    if (config && config->alpha != 0.0) {
      c.text = steer_generate(backend, tokens, *config, o.method, gp).text;
      c.steered = true;
    } else {
      c.text = generate(backend, tokens, gp).text;
    }
    c.label = score_output(item.cwe, c.text);
    out[idx] = std::move(c);
  });
  return out;
}

inline RateSummary summarize(const std::vector<Completion>& cs, const HarnessOptions& o, std::uint64_t salt = 0) {
  std::vector<SecurityLabel> labels;
  labels.reserve(cs.size());
  for (const auto& c : cs) labels.push_back(c.label);
  return summarize_rates(labels, o.resamples, mix_seed(o.seed, salt));
}

inline std::uint64_t stream_of(const std::string& id) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : id) h = (h ^ c) * 1099511628211ULL;
  return h;
}

inline std::vector<EvalItem> adversarial_items(const std::vector<PromptPair>& pairs) {
  std::vector<EvalItem> items;
  for (const auto& p : pairs) items.push_back({p.id(), p.cwe, p.insecure_text, stream_of(p.id())});
  return items;
}

// --- LOBO sweep ----------------------------------------------------------------

struct SweepRow {
  int fold = 0;  // held-out scenario
  double alpha = 0.0;
  RateSummary summary;
};

struct SweepResult {
  Cwe cwe = Cwe::Cwe787;
  int layer = 0;
  std::string model_id;
  std::vector<double> alpha_grid;  // always starts with 0
  std::vector<SweepRow> rows;
  std::map<int, SteeringVector> fold_vectors;
  double best_alpha = 0.0;
  double best_secure_rate = 0.0;  // mean over folds
  RateSummary baseline;  // alpha = 0, pooled over folds
  int seeds_per_prompt = 0;

  // Mean secure rate over folds at each alpha, in grid order.
  std::vector<double> mean_by_alpha() const {
    std::vector<double> out;
    for (double a : alpha_grid) {
      double s = 0;
      int n = 0;
      for (const auto& r : rows) {
        if (r.alpha == a) s += r.summary.secure_rate, ++n;
      }
      out.push_back(n ? s / n : 0.0);
    }
    return out;
  }
};

inline std::vector<double> normalized_alpha_grid(std::vector<double> grid) {
  for (double a : grid) {
    if (!(a >= 0.0)) throw ValidationError("alpha grid values must be >= 0");
  }
  grid.push_back(0.0);
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return grid;
}

inline SweepResult lobo_sweep(Backend& backend, Cwe cwe, const std::vector<PromptPair>& pairs,
                              const std::vector<double>& alpha_grid, const HarnessOptions& o = {}) {
  o.validate();
  const auto folds = make_lobo_folds(pairs);
  SweepResult res;
  res.cwe = cwe;
  res.layer = steering_layer(backend, o);
  res.model_id = backend.info().model_id;
  res.alpha_grid = normalized_alpha_grid(alpha_grid);
  res.seeds_per_prompt = o.seeds_per_prompt;

  // One activation pass over the whole grid; each fold reads only its training pairs.
  const auto acts = collect_activations(backend, pair_prompts(pairs), {res.layer}, o.workers).at(res.layer);
  std::vector<Completion> pooled_baseline;
  for (const auto& fold : folds) {
    const auto v = fold_vector(acts, fold, cwe, res.model_id);
    res.fold_vectors[fold.held_out_scenario] = v;
    const auto items = adversarial_items(fold.test_pairs);
    for (std::size_t ai = 0; ai < res.alpha_grid.size(); ++ai) {
      const double a = res.alpha_grid[ai];
      check_no_leakage(v, fold.held_out_scenario);
      const auto cs = run_items(backend, items, SteeringConfig{v, a}, o);
      const auto salt = static_cast<std::uint64_t>(fold.held_out_scenario) * 1000 + ai;
      res.rows.push_back({fold.held_out_scenario, a, summarize(cs, o, salt)});
      if (a == 0.0) pooled_baseline.insert(pooled_baseline.end(), cs.begin(), cs.end());
    }
  }
  res.baseline = summarize(pooled_baseline, o, 999999);
  const auto means = res.mean_by_alpha();
  std::size_t best = 0;
  for (std::size_t i = 1; i < means.size(); ++i) {
    if (means[i] > means[best]) best = i;
  }
  res.best_alpha = res.alpha_grid[best];
  res.best_secure_rate = means[best];
  return res;
}

inline SweepResult lobo_sweep(Backend& backend, Cwe cwe, const std::vector<double>& alpha_grid,
                              const HarnessOptions& o = {}) {
  return lobo_sweep(backend, cwe, build_pair_grid(load_templates(cwe)), alpha_grid, o);
}

// --- transfer matrix -------------------------------------------------------------

struct TransferStats {
  double diagonal_mean = 0.0;
  double offdiagonal_mean = 0.0;
  std::optional<double> ratio;
};

// Diagonal vs off-diagonal means of a square matrix of secure rates.
inline TransferStats transfer_stats(const std::vector<std::vector<double>>& rates) {
  const std::size_t n = rates.size();
  if (n < 2) throw ValidationError("transfer matrix needs at least 2 CWEs");
  double diag = 0, off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (rates[i].size() != n) throw ValidationError("transfer matrix is not square");
    for (std::size_t j = 0; j < n; ++j) (i == j ? diag : off) += rates[i][j];
  }
  TransferStats s;
  s.diagonal_mean = diag / n;
  s.offdiagonal_mean = off / (n * (n - 1));
  if (s.offdiagonal_mean > 0) s.ratio = s.diagonal_mean / s.offdiagonal_mean;
  return s;
}

struct TransferMatrix {
  std::vector<Cwe> cwes;  // row = vector CWE, column = prompt CWE, same order
  std::vector<double> alphas;  // per row
  std::vector<std::vector<RateSummary>> cells;
  TransferStats stats;

  std::vector<std::vector<double>> secure_rates() const {
    std::vector<std::vector<double>> m;
    for (const auto& row : cells) {
      m.emplace_back();
      for (const auto& c : row) m.back().push_back(c.secure_rate);
    }
    return m;
  }
};

inline TransferMatrix transfer_matrix(Backend& backend, const std::map<Cwe, SteeringConfig>& vectors,
                                      const std::map<Cwe, std::vector<EvalItem>>& prompt_sets,
                                      const HarnessOptions& o = {}) {
  o.validate();
  std::vector<std::string> missing;
  for (Cwe c : kAllCwes) {
    if (!vectors.count(c)) missing.push_back(std::string(to_string(c)) + " vector");
    if (!prompt_sets.count(c) || prompt_sets.at(c).empty()) missing.push_back(std::string(to_string(c)) + " prompts");
  }
  if (!missing.empty()) {
    std::string msg = "transfer matrix is missing inputs:";
    for (const auto& m : missing) msg += " " + m + ";";
    throw ValidationError(msg);
  }
  TransferMatrix t;
  t.cwes.assign(kAllCwes.begin(), kAllCwes.end());
  for (std::size_t i = 0; i < t.cwes.size(); ++i) {
    const auto& cfg = vectors.at(t.cwes[i]);
    t.alphas.push_back(cfg.alpha);
    t.cells.emplace_back();
    for (std::size_t j = 0; j < t.cwes.size(); ++j) {
      const auto cs = run_items(backend, prompt_sets.at(t.cwes[j]), cfg, o);
      t.cells.back().push_back(summarize(cs, o, i * 16 + j));
    }
  }
  t.stats = transfer_stats(t.secure_rates());
  return t;
}

// --- end to end ------------------------------------------------------------------

struct RoutingFailure {
  std::string prompt_id;
  std::string message;
};

struct EvalReport {
  std::string condition;
  RoutingKind strategy = RoutingKind::None;
  std::map<Cwe, RateSummary> per_cwe;
  RateSummary overall;
  std::vector<Completion> completions;
  std::vector<RoutingFailure> excluded;
};

inline std::vector<EvalItem> neutral_items(const std::vector<NeutralPrompt>& prompts) {
  std::vector<EvalItem> items;
  for (const auto& p : prompts) {
    const auto id = std::string(to_string(p.cwe)) + "/neutral/s" + std::to_string(p.scenario_id);
    items.push_back({id, p.cwe, p.text, stream_of(id)});
  }
  return items;
}

// Route, steer, generate and score every prompt. Prompts whose routing fails
// are excluded and listed rather than aborting the run.
inline EvalReport end_to_end(Backend& backend, const std::vector<NeutralPrompt>& prompts,
                             const RoutingStrategy& strategy, const HarnessOptions& o = {},
                             const std::string& condition = "") {
  o.validate();
  strategy.validate();
  EvalReport rep;
  rep.condition = condition.empty() ? std::string(to_string(strategy.kind)) : condition;
  rep.strategy = strategy.kind;
  const auto items = neutral_items(prompts);
  std::vector<std::optional<RouteDecision>> decisions(items.size());
  std::vector<std::string> errors(items.size());
  detail::parallel_for(items.size(), o.workers, [&](std::size_t i) {
    try {
      decisions[i] = route(strategy, backend, backend.tokenizer().encode(items[i].text), prompts[i].cwe);
    } catch (const Error& e) {
      errors[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!decisions[i]) {
      rep.excluded.push_back({items[i].prompt_id, errors[i]});
      continue;
    }
    const auto& d = *decisions[i];
    std::optional<SteeringConfig> cfg;
    if (d.selected) cfg = SteeringConfig{*d.selected, d.alpha};
    auto cs = run_items(backend, {items[i]}, cfg, o);
    for (auto& c : cs) {
      c.predicted_class = d.predicted_class;
      rep.completions.push_back(std::move(c));
    }
  }
  std::map<Cwe, std::vector<Completion>> by_cwe;
  for (const auto& c : rep.completions) by_cwe[c.cwe].push_back(c);
  for (const auto& [cwe, cs] : by_cwe) rep.per_cwe[cwe] = summarize(cs, o, static_cast<std::uint64_t>(cwe) + 1);
  rep.overall = summarize(rep.completions, o, 0);
  return rep;
}

// --- random-direction control ------------------------------------------------------

struct RandomDirectionReport {
  Cwe cwe = Cwe::Cwe787;
  double alpha = 0.0;
  double target_norm = 0.0;
  RateSummary baseline;
  RateSummary learned;
  std::vector<RateSummary> controls;
  double control_mean = 0.0;  // secure rate
  double control_std = 0.0;
};

inline RateSummary evaluate_direction(Backend& backend, const std::vector<EvalItem>& items,
                                      const std::optional<SteeringConfig>& config, const HarnessOptions& o) {
  return summarize(run_items(backend, items, config, o), o, 7);
}

inline RandomDirectionReport random_direction_experiment(Backend& backend, Cwe cwe, const SteeringVector& learned,
                                                         double alpha, const std::vector<EvalItem>& items,
                                                         int n = 10, std::uint64_t seed = 0,
                                                         const HarnessOptions& o = {}) {
  if (items.empty()) throw ValidationError("random-direction experiment needs prompts");
  RandomDirectionReport r;
  r.cwe = cwe;
  r.alpha = alpha;
  r.target_norm = l2_norm(learned.d);
  r.baseline = evaluate_direction(backend, items, std::nullopt, o);
  r.learned = evaluate_direction(backend, items, SteeringConfig{learned, alpha}, o);
  const auto controls =
      random_controls(r.target_norm, static_cast<int>(learned.d.size()), n, seed, learned.layer, learned.model_id);
  std::vector<double> rates;
  for (const auto& c : controls) {
    r.controls.push_back(evaluate_direction(backend, items, SteeringConfig{c, alpha}, o));
    rates.push_back(r.controls.back().secure_rate);
  }
  r.control_mean = mean(rates);
  r.control_std = rates.size() > 1 ? stddev(rates) : 0.0;
  return r;
}

// --- probes from the corpus -----------------------------------------------------------

// Routing probe training data: last-token activations of every pair prompt
// (both variants) for the given CWEs, labeled by CWE.
inline ActivationDataset routing_dataset(const Backend& backend, const std::vector<Cwe>& cwes, int layer,
                                         bool binary, std::size_t max_pairs_per_cwe = 0, int workers = 1) {
  std::vector<LabeledPrompt> prompts;
  for (Cwe c : cwes) {
    auto pairs = build_pair_grid(load_templates(c));
    if (max_pairs_per_cwe && pairs.size() > max_pairs_per_cwe) {
      // Keep every scenario represented: take the first variations of each.
      std::stable_sort(pairs.begin(), pairs.end(),
                       [](const PromptPair& a, const PromptPair& b) { return a.variation_id < b.variation_id; });
      pairs.resize(max_pairs_per_cwe);
    }
    const auto ps = pair_prompts(pairs);
    prompts.insert(prompts.end(), ps.begin(), ps.end());
  }
  ActivationDataset ds;
  ds.records = collect_activations(backend, prompts, {layer}, workers).at(layer);
  ds.label_field = LabelField::Cwe;
  if (binary) ds.class_map = two_tier_class_map();
  return ds;
}

}  // namespace steerlab
