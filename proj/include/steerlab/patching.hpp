#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "steerlab/backend.hpp"
#include "steerlab/json_io.hpp"
#include "steerlab/stats.hpp"

namespace steerlab {

struct PatchResult {
  std::vector<Site> sites;
  std::vector<int> layers_patched;
  double p_src = 0.0;
  double p_dst = 0.0;
  double p_patched = 0.0;
  std::optional<double> recovery_fraction;
};

// (value - low) / (high - low), absent when the gap is below 1e-9.
inline std::optional<double> recovery(double value, double low, double high) {
  if (std::abs(high - low) <= 1e-9) return std::nullopt;
  return (value - low) / (high - low);
}

inline double target_probability(const Backend& backend, std::span<const int> tokens, int target,
                                 const ForwardPlan& plan = {}) {
  const auto r = instrumented_forward(backend, tokens, plan);
  if (target < 0 || static_cast<std::size_t>(target) >= r.logits.size()) {
    throw ValidationError("target token out of range");
  }
  return softmax(r.logits)[target];
}

// Copies the values at `sites` (last prompt position) from the src run into
// the dst run.
inline PatchResult patch_sites(const Backend& backend, std::span<const int> src, std::span<const int> dst,
                               const std::vector<Site>& sites, int target_token_id) {
  if (src.empty() || dst.empty()) throw ValidationError("patching needs non-empty src and dst prompts");
  ForwardPlan capture_plan;
  for (const auto& s : sites) capture_plan.captures.push_back({s, Position::last()});
  const auto src_run = instrumented_forward(backend, src, capture_plan);

  PatchResult r;
  r.sites = sites;
  for (const auto& s : sites) {
    if (s.kind != SiteKind::FinalResidual &&
        std::find(r.layers_patched.begin(), r.layers_patched.end(), s.layer) == r.layers_patched.end()) {
      r.layers_patched.push_back(s.layer);
    }
  }
  r.p_src = softmax(src_run.logits).at(target_token_id);
  r.p_dst = target_probability(backend, dst, target_token_id);

  ForwardPlan patch_plan;
  for (const auto& s : sites) {
    auto it = std::find_if(src_run.captured.begin(), src_run.captured.end(), [&](const ActivationRecord& rec) {
      return rec.site == s.kind && (s.kind == SiteKind::FinalResidual || rec.layer == s.layer) &&
             (s.kind != SiteKind::HeadOutput || rec.head == s.head);
    });
    if (it == src_run.captured.end()) throw Error("no capture recorded for site " + describe(s));
    patch_plan.patches.push_back({s, Position::last(), it->vector});
  }
  r.p_patched = target_probability(backend, dst, target_token_id, patch_plan);
  r.recovery_fraction = recovery(r.p_patched, r.p_dst, r.p_src);
  return r;
}

// Layer-set patching. `kind` picks layer-output (default) or layer-input
// residuals.
inline PatchResult patch_layers(const Backend& backend, std::span<const int> src, std::span<const int> dst,
                                const std::vector<int>& layers, int target_token_id,
                                SiteKind kind = SiteKind::LayerOutput) {
  if (kind != SiteKind::LayerOutput && kind != SiteKind::LayerInput) {
    throw ValidationError("patch_layers takes layer_input or layer_output sites");
  }
  std::vector<Site> sites;
  for (int l : layers) sites.push_back({kind, l, 0});
  return patch_sites(backend, src, dst, sites, target_token_id);
}

inline PatchResult patch_heads(const Backend& backend, std::span<const int> src, std::span<const int> dst,
                               const std::vector<std::pair<int, int>>& heads, int target_token_id) {
  if (!backend.info().exposes_heads) throw CapabilityError("backend does not expose attention heads");
  std::vector<Site> sites;
  for (auto [l, h] : heads) sites.push_back(Site::head_output(l, h));
  return patch_sites(backend, src, dst, sites, target_token_id);
}

enum class AblationMode { MeanEmbedding, Custom };

struct AblationResult {
  double p_baseline = 0.0;
  double p_adversarial = 0.0;
  double p_ablated = 0.0;
  double suppression_pp = 0.0;  // 100 * (p_baseline - p_adversarial)
  std::optional<double> recovery_fraction;  // (p_ablated - p_adv) / (p_baseline - p_adv)
  std::optional<double> recovery_of_suppression;  // p_ablated / (p_baseline - p_adv)
  Interval ci;  // on suppression_pp
  std::size_t n_prompts = 1;
};

struct AblationCase {
  std::vector<int> baseline;  // content-matched prompt without the suppressing span
  std::vector<int> adversarial;
  int span_begin = 0;
  int span_end = 0;
};

namespace detail {

inline void fill_ratios(AblationResult& r) {
  r.suppression_pp = 100.0 * (r.p_baseline - r.p_adversarial);
  r.recovery_fraction = recovery(r.p_ablated, r.p_adversarial, r.p_baseline);
  const double gap = r.p_baseline - r.p_adversarial;
  if (std::abs(gap) > 1e-9) r.recovery_of_suppression = r.p_ablated / gap;
}

}  // namespace detail

// p of the target with the embeddings of [span_begin, span_end) replaced.
inline double ablated_probability(const Backend& backend, std::span<const int> prompt, int span_begin, int span_end,
                                  AblationMode mode, int target_token_id,
                                  const std::vector<float>& custom_replacement = {}) {
  if (span_end <= span_begin) throw ValidationError("ablation span is empty");
  if (span_begin < 0 || span_end > static_cast<int>(prompt.size())) {
    throw ValidationError("ablation span lies outside the prompt");
  }
  EmbeddingOverride o{span_begin, span_end, {}};
  if (mode == AblationMode::MeanEmbedding) {
    o.replacement = backend.mean_embedding();
  } else {
    if (custom_replacement.empty()) throw ValidationError("custom ablation needs a replacement vector");
    o.replacement = custom_replacement;
  }
  ForwardPlan plan;
  plan.embedding_overrides.push_back(std::move(o));
  return target_probability(backend, prompt, target_token_id, plan);
}

inline AblationResult ablate_tokens(const Backend& backend, std::span<const int> prompt, int span_begin,
                                    int span_end, AblationMode mode, int target_token_id,
                                    std::span<const int> baseline_prompt,
                                    const std::vector<float>& custom_replacement = {}) {
  AblationResult r;
  r.p_ablated = ablated_probability(backend, prompt, span_begin, span_end, mode, target_token_id, custom_replacement);
  r.p_adversarial = target_probability(backend, prompt, target_token_id);
  r.p_baseline = target_probability(backend, baseline_prompt, target_token_id);
  detail::fill_ratios(r);
  r.ci = {r.suppression_pp, r.suppression_pp};
  return r;
}

// Mean probabilities over a prompt set, with a bootstrap CI on the mean
// suppression.
inline AblationResult ablate_prompt_set(const Backend& backend, const std::vector<AblationCase>& cases,
                                        AblationMode mode, int target_token_id,
                                        std::size_t resamples = kDefaultResamples, std::uint64_t seed = 0,
                                        const std::vector<float>& custom_replacement = {}) {
  if (cases.empty()) throw ValidationError("ablation prompt set is empty");
  std::vector<double> pb, pa, pab, supp;
  for (const auto& c : cases) {
    const auto one = ablate_tokens(backend, c.adversarial, c.span_begin, c.span_end, mode, target_token_id,
                                   c.baseline, custom_replacement);
    pb.push_back(one.p_baseline);
    pa.push_back(one.p_adversarial);
    pab.push_back(one.p_ablated);
    supp.push_back(one.suppression_pp);
  }
  AblationResult r;
  r.n_prompts = cases.size();
  r.p_baseline = mean(pb);
  r.p_adversarial = mean(pa);
  r.p_ablated = mean(pab);
  detail::fill_ratios(r);
  r.ci = bootstrap_mean_ci(supp, resamples, seed);
  return r;
}

struct ConditionComparison {
  double p_adversarial = 0.0;
  double p_neutral = 0.0;
  double p_secure = 0.0;
  bool ordered = false;  // secure >= neutral >= adversarial
};

inline ConditionComparison condition_compare(const Backend& backend, std::span<const int> adversarial,
                                             std::span<const int> neutral, std::span<const int> secure,
                                             int target_token_id) {
  ConditionComparison c;
  c.p_adversarial = target_probability(backend, adversarial, target_token_id);
  c.p_neutral = target_probability(backend, neutral, target_token_id);
  c.p_secure = target_probability(backend, secure, target_token_id);
  c.ordered = c.p_secure >= c.p_neutral && c.p_neutral >= c.p_adversarial;
  return c;
}

inline Json to_json(const PatchResult& r) {
  Json sites = Json::array();
  for (const auto& s : r.sites) sites.push_back(describe(s));
  Json j{{"sites", sites},
         {"layers_patched", r.layers_patched},
         {"p_src", r.p_src},
         {"p_dst", r.p_dst},
         {"p_patched", r.p_patched}};
  if (r.recovery_fraction) j["recovery_fraction"] = *r.recovery_fraction;
  return j;
}

inline Json to_json(const AblationResult& r) {
  Json j{{"p_baseline", r.p_baseline},
         {"p_adversarial", r.p_adversarial},
         {"p_ablated", r.p_ablated},
         {"suppression_pp", r.suppression_pp},
         {"ci", {r.ci.low, r.ci.high}},
         {"n_prompts", r.n_prompts}};
  if (r.recovery_fraction) j["recovery_fraction"] = *r.recovery_fraction;
  if (r.recovery_of_suppression) j["recovery_of_suppression"] = *r.recovery_of_suppression;
  return j;
}

}  // namespace steerlab
