#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "steerlab/backend.hpp"

namespace steerlab {

struct GenerationParams {
  double temperature = 0.6;
  double top_p = 0.9;
  int max_new_tokens = 512;
  int min_new_tokens = 0;
  std::uint64_t seed = 0;
  bool greedy = false;

  void validate() const {
    if (temperature < 0.0) throw ValidationError("temperature must be >= 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ValidationError("top_p must be in (0, 1]");
    if (max_new_tokens < 0) throw ValidationError("max_new_tokens must be >= 0");
    if (min_new_tokens < 0 || min_new_tokens > max_new_tokens) {
      throw ValidationError("min_new_tokens must be in [0, max_new_tokens]");
    }
  }
};

struct Generation {
  std::vector<int> tokens;  // generated tokens, end-of-sequence excluded
  std::string text;
  bool stopped_at_eos = false;
};

// Hooks around each forward step of decoding (the prompt prefill is step 0).
struct StepCallbacks {
  std::function<void(Session&, int step)> before;
  std::function<void(Session&, int step)> after;
};

inline int argmax(std::span<const float> logits) {
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

// Temperature then nucleus sampling. `u` is a uniform draw in [0, 1).
inline int sample_token(std::span<const float> logits, double temperature, double top_p, double u) {
  if (temperature <= 0.0) return argmax(logits);
  std::vector<float> scaled(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    scaled[i] = static_cast<float>(static_cast<double>(logits[i]) / temperature);
  }
  const auto p = softmax(scaled);
  std::vector<int> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p[a] > p[b]; });
  double cum = 0.0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    cum += p[order[keep]];
    ++keep;
    if (cum >= top_p) break;
  }
  const double target = u * cum;
  double acc = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    acc += p[order[i]];
    if (target < acc) return order[i];
  }
  return order[keep - 1];
}

// Decodes in an already opened session. The prompt must match the length the
// session was opened with.
inline Generation generate_in_session(Session& session, const Tokenizer& tokenizer, std::span<const int> prompt,
                                      const GenerationParams& params, const StepCallbacks& callbacks = {}) {
  params.validate();
  const auto eos = tokenizer.eos();
  std::mt19937_64 rng(params.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  Generation g;
  std::vector<int> pending(prompt.begin(), prompt.end());
  for (int step = 0; step < params.max_new_tokens; ++step) {
    if (callbacks.before) callbacks.before(session, step);
    auto logits = session.append(pending);
    if (callbacks.after) callbacks.after(session, step);
    if (eos && step < params.min_new_tokens) logits[*eos] = -INFINITY;
    const double u = unif(rng);
    const int tok = params.greedy ? argmax(logits) : sample_token(logits, params.temperature, params.top_p, u);
    if (eos && tok == *eos) {
      g.stopped_at_eos = true;
      break;
    }
    g.tokens.push_back(tok);
    pending.assign(1, tok);
  }
  g.text = tokenizer.decode(g.tokens);
  return g;
}

inline Generation generate(const Backend& backend, std::span<const int> prompt, const GenerationParams& params,
                           const ForwardPlan& plan = {}, const SessionOptions& options = {},
                           const StepCallbacks& callbacks = {}) {
  params.validate();
  auto session = backend.open_session(plan, static_cast<int>(prompt.size()), options);
  return generate_in_session(*session, backend.tokenizer(), prompt, params, callbacks);
}

inline Generation generate_text(const Backend& backend, const std::string& prompt, const GenerationParams& params,
                                const ForwardPlan& plan = {}, const SessionOptions& options = {},
                                const StepCallbacks& callbacks = {}) {
  const auto tokens = backend.tokenizer().encode(prompt);
  return generate(backend, tokens, params, plan, options, callbacks);
}

}  // namespace steerlab
