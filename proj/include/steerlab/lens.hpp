#pragma once

// Logit lens and tuned lens trajectories plus emergence metrics.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "steerlab/backend.hpp"
#include "steerlab/generation.hpp"
#include "steerlab/json_io.hpp"

namespace steerlab {

enum class LensKind { Logit, Tuned };

constexpr std::string_view to_string(LensKind k) { return k == LensKind::Logit ? "logit" : "tuned"; }

inline LensKind parse_lens_kind(std::string_view s) {
  if (s == "logit") return LensKind::Logit;
  if (s == "tuned") return LensKind::Tuned;
  throw ValidationError("unknown lens kind: " + std::string(s));
}

struct LensTrajectory {
  std::string prompt_id;
  int target_token_id = 0;
  LensKind lens_kind = LensKind::Logit;
  std::vector<double> p_by_layer;
  bool final_norm_applied = true;
};

struct LayerAffine {
  std::vector<double> matrix;  // d x d, row-major
  std::vector<double> offset;  // d
};

struct TunedLensModel {
  std::vector<LayerAffine> per_layer_affine;  // layers 0 .. num_layers-2
  double training_loss = 0.0;
  std::vector<double> loss_curve;  // mean training CE summed over layers, per accepted step
  std::vector<double> heldout_ce_logit;  // per layer, final layer included
  std::vector<double> heldout_ce_tuned;
  std::string model_id;
};

struct EmergenceMetrics {
  std::optional<int> emergence_layer;
  std::optional<double> depth_fraction;  // layer / (num_layers - 1)
  std::optional<double> depth_of_total;  // layer / num_layers
  std::optional<double> jump_ratio;
  double final_p = 0.0;
};

// First subtoken of the API name as it appears in code after a space. Tokens
// that are pure whitespace (the space itself under a byte tokenizer) are
// skipped.
inline int resolve_secure_token(const std::string& api_string, const Tokenizer& tokenizer) {
  if (api_string.empty()) throw ValidationError("API string is empty");
  const auto tokens = tokenizer.encode(" " + api_string);
  for (int t : tokens) {
    const auto text = tokenizer.token_text(t);
    const bool blank = std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); });
    if (!blank) return t;
  }
  throw ValidationError("API string '" + api_string + "' does not tokenize to any non-space token");
}

namespace detail {

inline std::vector<float> apply_affine(const LayerAffine& a, std::span<const float> h) {
  const auto d = h.size();
  std::vector<float> out(d);
  for (std::size_t i = 0; i < d; ++i) {
    double s = a.offset[i];
    const double* row = a.matrix.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) s += row[j] * h[j];
    out[i] = static_cast<float>(s);
  }
  return out;
}

}  // namespace detail

inline LensTrajectory trajectory(const Backend& backend, std::span<const int> prompt, int target_token_id,
                                 LensKind kind, const TunedLensModel* tuned = nullptr,
                                 const std::string& prompt_id = "") {
  const auto inf = backend.info();
  if (kind == LensKind::Tuned && tuned == nullptr) throw ValidationError("tuned lens trajectory needs a tuned model");
  if (kind == LensKind::Tuned && tuned->per_layer_affine.size() != static_cast<std::size_t>(inf.num_layers - 1)) {
    throw ValidationError("tuned lens has the wrong number of layers for this backend");
  }
  if (target_token_id < 0 || target_token_id >= inf.vocab_size) throw ValidationError("target token out of range");
  ForwardPlan plan;
  for (int l = 0; l < inf.num_layers; ++l) plan.captures.push_back({Site::layer_output(l), Position::last()});
  const auto result = instrumented_forward(backend, prompt, plan);
  LensTrajectory t;
  t.prompt_id = prompt_id;
  t.target_token_id = target_token_id;
  t.lens_kind = kind;
  t.p_by_layer.resize(inf.num_layers);
  for (const auto& rec : result.captured) {
    std::vector<float> h = rec.vector;
    if (kind == LensKind::Tuned && rec.layer < inf.num_layers - 1) {
      h = detail::apply_affine(tuned->per_layer_affine[rec.layer], h);
    }
    t.p_by_layer[rec.layer] = unembed(backend, h, true)[target_token_id];
  }
  return t;
}

inline EmergenceMetrics emergence_metrics(const LensTrajectory& traj, double threshold = 0.01) {
  const auto& p = traj.p_by_layer;
  if (p.empty()) throw ValidationError("empty trajectory");
  EmergenceMetrics m;
  m.final_p = p.back();
  const int n = static_cast<int>(p.size());
  for (int l = 0; l < n; ++l) {
    if (p[l] > threshold) {
      m.emergence_layer = l;
      break;
    }
  }
  if (m.emergence_layer) {
    const int e = *m.emergence_layer;
    m.depth_fraction = n > 1 ? static_cast<double>(e) / (n - 1) : 1.0;
    m.depth_of_total = static_cast<double>(e) / n;
    if (e > 0) m.jump_ratio = p[e] / std::max(p[e - 1], 1e-6);
  }
  return m;
}

inline EmergenceMetrics emergence_metrics(const std::vector<double>& p_by_layer, double threshold = 0.01) {
  LensTrajectory t;
  t.p_by_layer = p_by_layer;
  return emergence_metrics(t, threshold);
}

struct TunedLensOptions {
  int epochs = 40;
  double learning_rate = 0.05;
  double heldout_fraction = 0.25;
  std::size_t min_samples = 64;
  std::uint64_t seed = 0;
};

namespace detail {

// Final norm + unembedding in double precision, with the gradient of the
// cross-entropy against soft targets `q` back to the readout input `u`.
struct ReadoutMath {
  const Readout* r;
  int d;
  int vocab;

  double ce(std::span<const double> u, std::span<const double> q, std::vector<double>* grad_u) const {
    double ss = 0.0;
    for (int i = 0; i < d; ++i) ss += u[i] * u[i];
    const double inv = 1.0 / std::sqrt(ss / d + r->norm_eps);
    std::vector<double> nrm(d);
    for (int i = 0; i < d; ++i) nrm[i] = u[i] * inv * r->norm_gain[i];
    std::vector<double> z(vocab);
    double mx = -INFINITY;
    for (int v = 0; v < vocab; ++v) {
      const float* row = r->w_unembed.data() + static_cast<std::size_t>(v) * d;
      double s = r->b_unembed[v];
      for (int i = 0; i < d; ++i) s += row[i] * nrm[i];
      z[v] = s;
      mx = std::max(mx, s);
    }
    double sum = 0.0;
    for (int v = 0; v < vocab; ++v) sum += std::exp(z[v] - mx);
    const double lse = mx + std::log(sum);
    double loss = 0.0;
    for (int v = 0; v < vocab; ++v) loss -= q[v] * (z[v] - lse);
    if (grad_u) {
      std::vector<double> gn(d, 0.0);
      for (int v = 0; v < vocab; ++v) {
        const double gz = std::exp(z[v] - lse) - q[v];
        const float* row = r->w_unembed.data() + static_cast<std::size_t>(v) * d;
        for (int i = 0; i < d; ++i) gn[i] += gz * row[i];
      }
      double dotgu = 0.0;
      for (int i = 0; i < d; ++i) {
        gn[i] *= r->norm_gain[i];
        dotgu += gn[i] * u[i];
      }
      grad_u->resize(d);
      for (int i = 0; i < d; ++i) (*grad_u)[i] = inv * gn[i] - u[i] * inv * inv * inv * dotgu / d;
    }
    return loss;
  }
};

inline double mean_ce(const ReadoutMath& rm, const LayerAffine& a, const std::vector<std::vector<float>>& xs,
                      const std::vector<std::vector<double>>& qs, std::vector<double>* grad_m,
                      std::vector<double>* grad_b) {
  const int d = rm.d;
  if (grad_m) grad_m->assign(static_cast<std::size_t>(d) * d, 0.0);
  if (grad_b) grad_b->assign(d, 0.0);
  std::vector<double> u(d), gu;
  double total = 0.0;
  for (std::size_t n = 0; n < xs.size(); ++n) {
    const auto& h = xs[n];
    for (int i = 0; i < d; ++i) {
      double s = a.offset[i];
      const double* row = a.matrix.data() + static_cast<std::size_t>(i) * d;
      for (int j = 0; j < d; ++j) s += row[j] * h[j];
      u[i] = s;
    }
    total += rm.ce(u, qs[n], grad_m ? &gu : nullptr);
    if (grad_m) {
      for (int i = 0; i < d; ++i) {
        double* gr = grad_m->data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) gr[j] += gu[i] * h[j];
        (*grad_b)[i] += gu[i];
      }
    }
  }
  const double inv_n = 1.0 / static_cast<double>(xs.size());
  if (grad_m) {
    for (auto& g : *grad_m) g *= inv_n;
    for (auto& g : *grad_b) g *= inv_n;
  }
  return total * inv_n;
}

}  // namespace detail

// Generates `count` sequences of `length` tokens from the backend itself,
// each seeded by a random byte prefix.
inline std::vector<std::vector<int>> generated_lens_corpus(const Backend& backend, int count, int length,
                                                           std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int vocab = backend.info().vocab_size;
  std::uniform_int_distribution<int> pick(1, vocab - 1);
  std::vector<std::vector<int>> corpus;
  for (int i = 0; i < count; ++i) {
    std::vector<int> prefix{pick(rng), pick(rng)};
    GenerationParams gp;
    gp.temperature = 1.0;
    gp.top_p = 1.0;
    gp.max_new_tokens = std::max(0, length - 2);
    gp.min_new_tokens = gp.max_new_tokens;
    gp.seed = rng();
    auto g = generate(backend, prefix, gp);
    prefix.insert(prefix.end(), g.tokens.begin(), g.tokens.end());
    corpus.push_back(std::move(prefix));
  }
  return corpus;
}

// Fits one affine map per non-final layer so that the lens read at that layer
// matches the model's final next-token distribution. Updates are accepted
// only when the training loss falls, and the parameters kept are the ones with
// the lowest held-out loss seen (the identity start included).
inline TunedLensModel train_tuned_lens(const Backend& backend, const std::vector<std::vector<int>>& corpus,
                                       const TunedLensOptions& options = {}) {
  if (corpus.empty()) throw ValidationError("tuned lens corpus is empty");
  const auto inf = backend.info();
  const int L = inf.num_layers, d = inf.d_model, V = inf.vocab_size;
  const auto readout = backend.readout();
  const detail::ReadoutMath rm{&readout, d, V};

  // Split by sequence so held-out positions never share a context with training ones.
  const std::size_t n_seq = corpus.size();
  std::size_t n_held = static_cast<std::size_t>(std::floor(options.heldout_fraction * n_seq));
  if (n_seq >= 2) n_held = std::clamp<std::size_t>(n_held, 1, n_seq - 1);

  std::vector<std::vector<std::vector<float>>> train_x(L), held_x(L);
  std::vector<std::vector<double>> train_q, held_q;
  ForwardPlan plan;
  for (int l = 0; l < L; ++l) plan.captures.push_back({Site::layer_output(l), Position::all()});
  plan.captures.push_back({Site::final_residual(), Position::all()});
  for (std::size_t s = 0; s < n_seq; ++s) {
    const auto& seq = corpus[s];
    if (seq.empty()) continue;
    const bool held = s >= n_seq - n_held && n_held > 0;
    const auto r = instrumented_forward(backend, seq, plan);
    for (const auto& rec : r.captured) {
      if (rec.site == SiteKind::FinalResidual) {
        (held ? held_q : train_q).push_back(unembed(backend, rec.vector, true));
      } else {
        (held ? held_x : train_x)[rec.layer].push_back(rec.vector);
      }
    }
  }
  if (train_q.size() < options.min_samples) {
    throw ValidationError("tuned lens corpus has " + std::to_string(train_q.size()) +
                          " training positions, fewer than the floor of " + std::to_string(options.min_samples));
  }
  const bool have_held = !held_q.empty();

  TunedLensModel model;
  model.model_id = inf.model_id;
  model.per_layer_affine.resize(L - 1);
  std::vector<std::vector<double>> layer_curves(L - 1);
  LayerAffine identity;
  identity.matrix.assign(static_cast<std::size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i) identity.matrix[static_cast<std::size_t>(i) * d + i] = 1.0;
  identity.offset.assign(d, 0.0);

  for (int l = 0; l < L - 1; ++l) {
    LayerAffine cur = identity;
    std::vector<double> gm, gb;
    double loss = detail::mean_ce(rm, cur, train_x[l], train_q, &gm, &gb);
    const auto& eval_x = have_held ? held_x[l] : train_x[l];
    const auto& eval_q = have_held ? held_q : train_q;
    LayerAffine best = cur;
    double best_eval = detail::mean_ce(rm, cur, eval_x, eval_q, nullptr, nullptr);
    double lr = options.learning_rate;
    layer_curves[l].push_back(loss);
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
      LayerAffine trial = cur;
      for (std::size_t i = 0; i < trial.matrix.size(); ++i) trial.matrix[i] -= lr * gm[i];
      for (int i = 0; i < d; ++i) trial.offset[i] -= lr * gb[i];
      std::vector<double> tgm, tgb;
      const double tl = detail::mean_ce(rm, trial, train_x[l], train_q, &tgm, &tgb);
      if (tl < loss) {
        cur = std::move(trial);
        loss = tl;
        gm.swap(tgm);
        gb.swap(tgb);
        lr *= 1.2;
        layer_curves[l].push_back(loss);
        const double ev = detail::mean_ce(rm, cur, eval_x, eval_q, nullptr, nullptr);
        if (ev < best_eval) {
          best_eval = ev;
          best = cur;
        }
      } else {
        lr *= 0.5;
      }
    }
    model.per_layer_affine[l] = std::move(best);
  }

  // Loss curve: per step index, the sum over layers of each layer's loss at
  // that point (layers that stopped improving hold their last value).
  std::size_t steps = 0;
  for (const auto& c : layer_curves) steps = std::max(steps, c.size());
  for (std::size_t k = 0; k < steps; ++k) {
    double s = 0.0;
    for (const auto& c : layer_curves) s += c[std::min(k, c.size() - 1)];
    model.loss_curve.push_back(s / std::max(1, L - 1));
  }
  model.training_loss = model.loss_curve.empty() ? 0.0 : model.loss_curve.back();

  const auto& eval_q = have_held ? held_q : train_q;
  for (int l = 0; l < L; ++l) {
    const auto& eval_x = have_held ? held_x[l] : train_x[l];
    model.heldout_ce_logit.push_back(detail::mean_ce(rm, identity, eval_x, eval_q, nullptr, nullptr));
    const auto& a = l < L - 1 ? model.per_layer_affine[l] : identity;
    model.heldout_ce_tuned.push_back(detail::mean_ce(rm, a, eval_x, eval_q, nullptr, nullptr));
  }
  return model;
}

inline Json to_json(const LensTrajectory& t) {
  return Json{{"prompt_id", t.prompt_id},
              {"target_token_id", t.target_token_id},
              {"lens_kind", to_string(t.lens_kind)},
              {"final_norm_applied", t.final_norm_applied},
              {"p_by_layer", t.p_by_layer}};
}

inline Json to_json(const EmergenceMetrics& m) {
  auto opt = [](const auto& o) { return o ? Json(*o) : Json(nullptr); };
  return Json{{"emergence_layer", opt(m.emergence_layer)},
              {"depth_fraction", opt(m.depth_fraction)},
              {"depth_of_total", opt(m.depth_of_total)},
              {"jump_ratio", opt(m.jump_ratio)},
              {"final_p", m.final_p}};
}

inline Json to_json(const TunedLensModel& m) {
  Json layers = Json::array();
  for (const auto& a : m.per_layer_affine) layers.push_back({{"matrix", a.matrix}, {"offset", a.offset}});
  return Json{{"model_id", m.model_id},
              {"training_loss", m.training_loss},
              {"loss_curve", m.loss_curve},
              {"heldout_ce_logit", m.heldout_ce_logit},
              {"heldout_ce_tuned", m.heldout_ce_tuned},
              {"per_layer_affine", layers}};
}

inline TunedLensModel tuned_lens_from_json(const Json& j) {
  TunedLensModel m;
  m.model_id = j.value("model_id", std::string());
  m.training_loss = j.value("training_loss", 0.0);
  m.loss_curve = j.value("loss_curve", std::vector<double>{});
  m.heldout_ce_logit = j.value("heldout_ce_logit", std::vector<double>{});
  m.heldout_ce_tuned = j.value("heldout_ce_tuned", std::vector<double>{});
  for (const auto& a : j.at("per_layer_affine")) {
    m.per_layer_affine.push_back({a.at("matrix").get<std::vector<double>>(), a.at("offset").get<std::vector<double>>()});
  }
  return m;
}

// CSV with one row per layer.
inline std::string trajectory_csv(const LensTrajectory& t) {
  std::string out = "layer,p\n";
  char buf[64];
  for (std::size_t l = 0; l < t.p_by_layer.size(); ++l) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", l, t.p_by_layer[l]);
    out += buf;
  }
  return out;
}

}  // namespace steerlab
