#pragma once

// Uniform model-access layer: forward plans (captures, injections, patches,
// embedding overrides), sessions, and unembedding.

#include <cmath>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "steerlab/cwe.hpp"
#include "steerlab/error.hpp"
#include "steerlab/scoring.hpp"

namespace steerlab {

struct BackendInfo {
  std::string model_id;
  int num_layers = 0;
  int d_model = 0;
  int vocab_size = 0;
  int num_heads = 0;
  bool exposes_heads = false;
  int last_layer_index = -1;
  int max_seq_len = 0;
};

// Where in the network a capture or patch applies.
enum class SiteKind { LayerInput, LayerOutput, FinalResidual, HeadOutput, MlpOutput };

constexpr std::string_view to_string(SiteKind k) {
  switch (k) {
    case SiteKind::LayerInput: return "layer_input";
    case SiteKind::LayerOutput: return "layer_output";
    case SiteKind::FinalResidual: return "final_residual";
    case SiteKind::HeadOutput: return "head_output";
    case SiteKind::MlpOutput: return "mlp_output";
  }
  return "";
}

inline SiteKind parse_site_kind(std::string_view s) {
  for (auto k : {SiteKind::LayerInput, SiteKind::LayerOutput, SiteKind::FinalResidual,
                 SiteKind::HeadOutput, SiteKind::MlpOutput}) {
    if (to_string(k) == s) return k;
  }
  throw ValidationError("unknown site: " + std::string(s));
}

struct Site {
  SiteKind kind = SiteKind::LayerOutput;
  int layer = 0;
  int head = 0;

  static Site layer_input(int l) { return {SiteKind::LayerInput, l, 0}; }
  static Site layer_output(int l) { return {SiteKind::LayerOutput, l, 0}; }
  static Site final_residual() { return {SiteKind::FinalResidual, 0, 0}; }
  static Site head_output(int l, int h) { return {SiteKind::HeadOutput, l, h}; }
  static Site mlp_output(int l) { return {SiteKind::MlpOutput, l, 0}; }

  friend bool operator==(const Site&, const Site&) = default;
};

inline std::string describe(const Site& s) {
  std::string out(to_string(s.kind));
  if (s.kind != SiteKind::FinalResidual) out += ":" + std::to_string(s.layer);
  if (s.kind == SiteKind::HeadOutput) out += ":" + std::to_string(s.head);
  return out;
}

// Which positions an intervention touches. `Last` resolves to the final
// prompt token.
struct Position {
  enum class Kind { All, Last, Index };
  Kind kind = Kind::Last;
  int index = 0;

  static Position all() { return {Kind::All, 0}; }
  static Position last() { return {Kind::Last, 0}; }
  static Position at(int i) { return {Kind::Index, i}; }

  bool matches(int pos, int prompt_len) const {
    switch (kind) {
      case Kind::All: return true;
      case Kind::Last: return pos == prompt_len - 1;
      case Kind::Index: return pos == index;
    }
    return false;
  }
};

struct Capture {
  Site site;
  Position position;
};

// Adds alpha * vector to a layer's output residual.
struct Injection {
  int layer = 0;
  Position position = Position::all();
  std::vector<float> vector;
  double alpha = 1.0;
};

// Replaces the token embeddings of prompt positions [begin, end). The
// replacement holds either one d_model vector used for every position or
// (end - begin) * d_model values.
struct EmbeddingOverride {
  int begin = 0;
  int end = 0;
  std::vector<float> replacement;
};

// Overwrites the value at `site` for one position.
struct Patch {
  Site site;
  Position position = Position::last();
  std::vector<float> vector;
};

// Runtime callback invoked on a layer's output residual for each processed
// position, after plan injections.
struct LayerHook {
  int layer = 0;
  std::function<void(int position, std::span<float> residual)> fn;
};

struct ForwardPlan {
  std::vector<Capture> captures;
  std::vector<Injection> injections;
  std::vector<EmbeddingOverride> embedding_overrides;
  std::vector<Patch> patches;

  bool empty() const {
    return captures.empty() && injections.empty() && embedding_overrides.empty() && patches.empty();
  }
};

// A constant offset folded into a layer's forward once per session.
struct LayerOffset {
  int layer = 0;
  std::vector<float> offset;
};

struct SessionOptions {
  std::vector<LayerOffset> persistent_offsets;
};

enum class Variant { Secure, Insecure, Neutral, Adversarial };

constexpr std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::Secure: return "secure";
    case Variant::Insecure: return "insecure";
    case Variant::Neutral: return "neutral";
    case Variant::Adversarial: return "adversarial";
  }
  return "";
}

inline Variant parse_variant(std::string_view s) {
  for (auto v : {Variant::Secure, Variant::Insecure, Variant::Neutral, Variant::Adversarial}) {
    if (to_string(v) == s) return v;
  }
  throw ValidationError("unknown variant: " + std::string(s));
}

struct ActivationRecord {
  SiteKind site = SiteKind::LayerOutput;
  int layer = 0;
  int head = 0;
  int position = 0;
  std::vector<float> vector;
  std::string prompt_id;
  Variant variant = Variant::Neutral;
  std::optional<SecurityLabel> behavioral_label;
  std::optional<Cwe> cwe;
  int scenario_id = -1;
};

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::vector<int> encode(std::string_view text) const = 0;
  virtual std::string decode(std::span<const int> tokens) const = 0;
  virtual std::string token_text(int token) const = 0;
  virtual int vocab_size() const = 0;
  virtual std::optional<int> eos() const = 0;
};

// One token per byte; byte 0 doubles as end-of-sequence.
class ByteTokenizer final : public Tokenizer {
 public:
  std::vector<int> encode(std::string_view text) const override {
    std::vector<int> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(c);
    return out;
  }
  std::string decode(std::span<const int> tokens) const override {
    std::string out;
    for (int t : tokens) out += static_cast<char>(static_cast<unsigned char>(t));
    return out;
  }
  std::string token_text(int token) const override {
    return std::string(1, static_cast<char>(static_cast<unsigned char>(token)));
  }
  int vocab_size() const override { return 256; }
  std::optional<int> eos() const override { return 0; }
};

// Incremental forward state: tokens appended so far plus per-layer caches.
class Session {
 public:
  virtual ~Session() = default;
  // Processes `tokens` after those already seen; returns the logits at the
  // last appended position.
  virtual std::vector<float> append(std::span<const int> tokens) = 0;
  virtual int length() const = 0;
  virtual const std::vector<ActivationRecord>& captured() const = 0;
  // Hooks live until clear_hooks(); the per-step injection method registers
  // and clears them around every decoding step.
  virtual void add_hook(LayerHook hook) = 0;
  virtual void clear_hooks() = 0;
};

class ExclusiveLease;

// Parameters of the final norm + unembedding, for code that needs gradients
// through the readout (tuned lens training).
struct Readout {
  std::vector<float> w_unembed;  // [vocab x d_model], row-major
  std::vector<float> b_unembed;  // [vocab]
  std::vector<float> norm_gain;  // [d_model]
  float norm_eps = 1e-6f;
};

class Backend {
 public:
  virtual ~Backend() = default;

  virtual BackendInfo info() const = 0;
  virtual const Tokenizer& tokenizer() const = 0;

  // Final normalization applied before the unembedding.
  virtual std::vector<float> final_norm(std::span<const float> residual) const = 0;
  // Unembedding (plus bias) of an already normalized residual.
  virtual std::vector<float> unembed_logits(std::span<const float> normed) const = 0;
  virtual std::vector<float> token_embedding(int token) const = 0;
  virtual Readout readout() const = 0;
  // Blocks until queued device work finishes. CPU backends have nothing to wait for.
  virtual void synchronize() const {}

  // Arithmetic mean of every vocabulary embedding.
  virtual std::vector<float> mean_embedding() const {
    const auto inf = info();
    std::vector<double> acc(inf.d_model, 0.0);
    for (int t = 0; t < inf.vocab_size; ++t) {
      const auto e = token_embedding(t);
      for (int i = 0; i < inf.d_model; ++i) acc[i] += e[i];
    }
    std::vector<float> out(inf.d_model);
    for (int i = 0; i < inf.d_model; ++i) out[i] = static_cast<float>(acc[i] / inf.vocab_size);
    return out;
  }

  // Opens a session under a shared read lease. Fails while an exclusive lease
  // (weight fold-in) is held.
  std::unique_ptr<Session> open_session(const ForwardPlan& plan, int prompt_len,
                                        const SessionOptions& options = {}) const {
    std::shared_lock lock(access_, std::try_to_lock);
    if (!lock.owns_lock()) throw AccessError("backend is exclusively held for weight modification");
    validate_plan(plan, prompt_len, options);
    return make_session(plan, prompt_len, options, std::move(lock));
  }

  // Holds a shared read lease; while alive, weight fold-in is refused.
  std::shared_lock<std::shared_mutex> read_lease() const {
    std::shared_lock lock(access_, std::try_to_lock);
    if (!lock.owns_lock()) throw AccessError("backend is exclusively held for weight modification");
    return lock;
  }

  void validate_plan(const ForwardPlan& plan, int prompt_len, const SessionOptions& options = {}) const;

 protected:
  friend class ExclusiveLease;

  virtual std::unique_ptr<Session> make_session(const ForwardPlan& plan, int prompt_len,
                                                const SessionOptions& options,
                                                std::shared_lock<std::shared_mutex> lock) const = 0;

  // Output-path bias of a layer (added to the residual after the MLP). Only
  // reachable through an ExclusiveLease.
  virtual std::vector<float> output_bias(int layer) const = 0;
  virtual void set_output_bias(int layer, std::span<const float> bias) = 0;

 private:
  mutable std::shared_mutex access_;
};

// Exclusive ownership of a backend for weight modification. Construction
// fails if any session or read lease is active.
class ExclusiveLease {
 public:
  explicit ExclusiveLease(Backend& backend) : backend_(&backend), lock_(backend.access_, std::try_to_lock) {
    if (!lock_.owns_lock()) {
      throw AccessError("weight fold-in needs exclusive access but the backend is in use");
    }
  }
  ExclusiveLease(const ExclusiveLease&) = delete;
  ExclusiveLease& operator=(const ExclusiveLease&) = delete;

  Backend& backend() { return *backend_; }

  std::unique_ptr<Session> open_session(const ForwardPlan& plan, int prompt_len,
                                        const SessionOptions& options = {}) const {
    backend_->validate_plan(plan, prompt_len, options);
    return backend_->make_session(plan, prompt_len, options, {});
  }

  std::vector<float> output_bias(int layer) const { return backend_->output_bias(layer); }
  void set_output_bias(int layer, std::span<const float> bias) { backend_->set_output_bias(layer, bias); }

 private:
  Backend* backend_;
  std::unique_lock<std::shared_mutex> lock_;
};

inline void Backend::validate_plan(const ForwardPlan& plan, int prompt_len, const SessionOptions& options) const {
  const auto inf = info();
  if (prompt_len < 1) throw ValidationError("prompt must contain at least one token");
  auto check_layer = [&](int layer) {
    if (layer < 0 || layer >= inf.num_layers) {
      throw ValidationError("layer " + std::to_string(layer) + " out of range [0, " +
                            std::to_string(inf.num_layers) + ")");
    }
  };
  auto check_vec = [&](std::size_t n, const char* what) {
    if (n != static_cast<std::size_t>(inf.d_model)) {
      throw ValidationError(std::string(what) + " has length " + std::to_string(n) + ", expected d_model " +
                            std::to_string(inf.d_model));
    }
  };
  auto check_pos = [&](const Position& p) {
    if (p.kind == Position::Kind::Index && (p.index < 0 || p.index >= inf.max_seq_len)) {
      throw ValidationError("position " + std::to_string(p.index) + " out of range");
    }
  };
  auto check_site = [&](const Site& s) {
    if (s.kind != SiteKind::FinalResidual) check_layer(s.layer);
    if (s.kind == SiteKind::HeadOutput) {
      if (!inf.exposes_heads) throw CapabilityError("backend does not expose attention heads");
      if (s.head < 0 || s.head >= inf.num_heads) {
        throw ValidationError("head " + std::to_string(s.head) + " out of range");
      }
    }
  };
  for (const auto& c : plan.captures) {
    check_site(c.site);
    check_pos(c.position);
  }
  for (const auto& inj : plan.injections) {
    check_layer(inj.layer);
    check_vec(inj.vector.size(), "injection vector");
    check_pos(inj.position);
  }
  for (const auto& p : plan.patches) {
    check_site(p.site);
    check_vec(p.vector.size(), "patch vector");
    check_pos(p.position);
  }
  for (const auto& o : plan.embedding_overrides) {
    if (o.begin < 0 || o.end > prompt_len || o.begin >= o.end) {
      throw ValidationError("embedding override span [" + std::to_string(o.begin) + ", " +
                            std::to_string(o.end) + ") outside prompt of length " + std::to_string(prompt_len));
    }
    const auto d = static_cast<std::size_t>(inf.d_model);
    if (o.replacement.size() != d && o.replacement.size() != d * static_cast<std::size_t>(o.end - o.begin)) {
      throw ValidationError("embedding override replacement has wrong length");
    }
  }
  for (const auto& o : options.persistent_offsets) {
    check_layer(o.layer);
    check_vec(o.offset.size(), "persistent offset");
  }
}

struct ForwardResult {
  std::vector<float> logits;  // next-token logits at the last position
  std::vector<ActivationRecord> captured;
};

// Runs `tokens` through the backend under `plan`. The plan is validated
// before any compute.
inline ForwardResult instrumented_forward(const Backend& backend, std::span<const int> tokens,
                                          const ForwardPlan& plan = {}) {
  auto session = backend.open_session(plan, static_cast<int>(tokens.size()));
  ForwardResult r;
  r.logits = session->append(tokens);
  r.captured = session->captured();
  return r;
}

inline std::vector<double> softmax(std::span<const float> logits) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  double mx = logits[0];
  for (float l : logits) mx = std::max(mx, static_cast<double>(l));
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += p[i];
  }
  for (auto& x : p) x /= sum;
  return p;
}

inline std::vector<double> log_softmax(std::span<const float> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  double mx = logits[0];
  for (float l : logits) mx = std::max(mx, static_cast<double>(l));
  double sum = 0.0;
  for (float l : logits) sum += std::exp(static_cast<double>(l) - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
  return out;
}

// Next-token distribution read directly off a residual vector.
inline std::vector<double> unembed(const Backend& backend, std::span<const float> residual, bool apply_final_norm) {
  const auto inf = backend.info();
  if (residual.size() != static_cast<std::size_t>(inf.d_model)) {
    throw ValidationError("residual has length " + std::to_string(residual.size()) + ", expected " +
                          std::to_string(inf.d_model));
  }
  if (apply_final_norm) {
    const auto normed = backend.final_norm(residual);
    return softmax(backend.unembed_logits(normed));
  }
  return softmax(backend.unembed_logits(residual));
}

inline BackendInfo describe(const Backend& backend) { return backend.info(); }

}  // namespace steerlab
