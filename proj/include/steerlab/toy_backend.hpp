#pragma once

// Small deterministic transformer used for offline runs and tests. Pre-norm
// blocks with RMSNorm, multi-head causal attention and a GELU MLP.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "steerlab/backend.hpp"
#include "steerlab/json_io.hpp"

namespace steerlab {

struct ToyConfig {
  int num_layers = 4;
  int d_model = 64;
  int num_heads = 4;
  int d_ff = 256;
  int max_seq_len = 2048;
  std::uint64_t seed = 7;
  bool expose_heads = true;
  float unembed_scale = 3.0f;
  std::string model_id;  // empty: derived from the fields above

  void validate() const {
    if (num_layers < 1 || d_model < 1 || num_heads < 1 || d_ff < 1 || max_seq_len < 1) {
      throw ValidationError("toy config sizes must be positive");
    }
    if (d_model % num_heads != 0) throw ValidationError("d_model must be divisible by num_heads");
  }

  std::string resolved_model_id() const {
    if (!model_id.empty()) return model_id;
    return "toy-s" + std::to_string(seed) + "-L" + std::to_string(num_layers) + "-d" + std::to_string(d_model);
  }
};

struct ToyLayer {
  std::vector<float> attn_norm;  // [d]
  std::vector<float> wq, wk, wv;  // [d x d], row-major (out x in)
  std::vector<float> wo;  // [d x d]
  std::vector<float> mlp_norm;  // [d]
  std::vector<float> w_up;  // [d_ff x d]
  std::vector<float> b_up;  // [d_ff]
  std::vector<float> w_down;  // [d x d_ff]
  std::vector<float> b_down;  // [d], added to the residual after the MLP
};

struct ToyWeights {
  std::vector<float> tok_emb;  // [vocab x d]
  std::vector<float> pos_emb;  // [max_seq x d]
  std::vector<ToyLayer> layers;
  std::vector<float> final_norm;  // [d]
  std::vector<float> w_unembed;  // [vocab x d]
  std::vector<float> b_unembed;  // [vocab]
};

namespace detail {

// Eight interleaved partial sums so the compiler can vectorize without
// reassociating; the summation order is fixed, so results stay deterministic.
inline float dotf(const float* a, const float* b, int n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
  }
  for (; i < n; ++i) acc[i & 7] += a[i] * b[i];
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

inline void matvec(const std::vector<float>& w, const float* x, float* y, int out, int in) {
  for (int o = 0; o < out; ++o) y[o] = dotf(w.data() + static_cast<std::size_t>(o) * in, x, in);
}

inline void rms_norm(const float* x, const float* gamma, float* y, int d) {
  float ss = 0.0f;
  for (int i = 0; i < d; ++i) ss += x[i] * x[i];
  const float inv = 1.0f / std::sqrt(ss / static_cast<float>(d) + 1e-6f);
  for (int i = 0; i < d; ++i) y[i] = x[i] * inv * gamma[i];
}

inline float gelu(float x) {
  constexpr float k = 0.7978845608028654f;
  return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

}  // namespace detail

class ToyTransformer final : public Backend {
 public:
  explicit ToyTransformer(ToyConfig cfg = {}) : cfg_(std::move(cfg)) {
    cfg_.validate();
    init_weights();
  }

  ToyTransformer(ToyConfig cfg, ToyWeights weights) : cfg_(std::move(cfg)), w_(std::move(weights)) {
    cfg_.validate();
    check_shapes();
  }

  BackendInfo info() const override {
    BackendInfo b;
    b.model_id = cfg_.resolved_model_id();
    b.num_layers = cfg_.num_layers;
    b.d_model = cfg_.d_model;
    b.vocab_size = tokenizer_.vocab_size();
    b.num_heads = cfg_.num_heads;
    b.exposes_heads = cfg_.expose_heads;
    b.last_layer_index = cfg_.num_layers - 1;
    b.max_seq_len = cfg_.max_seq_len;
    return b;
  }

  const Tokenizer& tokenizer() const override { return tokenizer_; }
  const ToyConfig& config() const { return cfg_; }
  const ToyWeights& weights() const { return w_; }

  std::vector<float> final_norm(std::span<const float> residual) const override {
    std::vector<float> y(cfg_.d_model);
    detail::rms_norm(residual.data(), w_.final_norm.data(), y.data(), cfg_.d_model);
    return y;
  }

  std::vector<float> unembed_logits(std::span<const float> normed) const override {
    const int v = tokenizer_.vocab_size();
    std::vector<float> logits(v);
    detail::matvec(w_.w_unembed, normed.data(), logits.data(), v, cfg_.d_model);
    for (int i = 0; i < v; ++i) logits[i] += w_.b_unembed[i];
    return logits;
  }

  std::vector<float> token_embedding(int token) const override {
    if (token < 0 || token >= tokenizer_.vocab_size()) throw ValidationError("token out of range");
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    return {w_.tok_emb.begin() + token * d, w_.tok_emb.begin() + (token + 1) * d};
  }

  Readout readout() const override { return {w_.w_unembed, w_.b_unembed, w_.final_norm, 1e-6f}; }

  std::vector<float> position_embedding(int pos) const {
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    return {w_.pos_emb.begin() + pos * d, w_.pos_emb.begin() + (pos + 1) * d};
  }

 protected:
  std::unique_ptr<Session> make_session(const ForwardPlan& plan, int prompt_len, const SessionOptions& options,
                                        std::shared_lock<std::shared_mutex> lock) const override;

  std::vector<float> output_bias(int layer) const override { return w_.layers.at(layer).b_down; }

  void set_output_bias(int layer, std::span<const float> bias) override {
    auto& b = w_.layers.at(layer).b_down;
    if (bias.size() != b.size()) throw ValidationError("output bias has wrong length");
    std::copy(bias.begin(), bias.end(), b.begin());
  }

 private:
  friend class ToySession;

  void init_weights() {
    std::mt19937_64 rng(cfg_.seed);
    const int d = cfg_.d_model, f = cfg_.d_ff, v = tokenizer_.vocab_size();
    auto fill = [&](std::size_t n, float stddev) {
      std::normal_distribution<float> dist(0.0f, stddev);
      std::vector<float> out(n);
      for (auto& x : out) x = dist(rng);
      return out;
    };
    auto ones = [](int n) { return std::vector<float>(n, 1.0f); };
    const float sd = 1.0f / std::sqrt(static_cast<float>(d));
    w_.tok_emb = fill(static_cast<std::size_t>(v) * d, 1.0f);
    w_.pos_emb = fill(static_cast<std::size_t>(cfg_.max_seq_len) * d, 0.1f);
    w_.layers.resize(cfg_.num_layers);
    for (auto& L : w_.layers) {
      L.attn_norm = ones(d);
      L.wq = fill(static_cast<std::size_t>(d) * d, sd);
      L.wk = fill(static_cast<std::size_t>(d) * d, sd);
      L.wv = fill(static_cast<std::size_t>(d) * d, sd);
      L.wo = fill(static_cast<std::size_t>(d) * d, sd);
      L.mlp_norm = ones(d);
      L.w_up = fill(static_cast<std::size_t>(f) * d, sd);
      L.b_up = fill(f, 0.1f);
      L.w_down = fill(static_cast<std::size_t>(d) * f, 1.0f / std::sqrt(static_cast<float>(f)));
      L.b_down.assign(d, 0.0f);
    }
    w_.final_norm = ones(d);
    w_.w_unembed = fill(static_cast<std::size_t>(v) * d, cfg_.unembed_scale * sd);
    w_.b_unembed.assign(v, 0.0f);
  }

  void check_shapes() const {
    const auto d = static_cast<std::size_t>(cfg_.d_model), f = static_cast<std::size_t>(cfg_.d_ff);
    const auto v = static_cast<std::size_t>(tokenizer_.vocab_size());
    auto expect = [](const std::vector<float>& x, std::size_t n, const char* what) {
      if (x.size() != n) throw ValidationError(std::string("weight ") + what + " has wrong size");
    };
    expect(w_.tok_emb, v * d, "tok_emb");
    expect(w_.pos_emb, static_cast<std::size_t>(cfg_.max_seq_len) * d, "pos_emb");
    if (w_.layers.size() != static_cast<std::size_t>(cfg_.num_layers)) throw ValidationError("layer count mismatch");
    for (const auto& L : w_.layers) {
      expect(L.attn_norm, d, "attn_norm");
      expect(L.wq, d * d, "wq");
      expect(L.wk, d * d, "wk");
      expect(L.wv, d * d, "wv");
      expect(L.wo, d * d, "wo");
      expect(L.mlp_norm, d, "mlp_norm");
      expect(L.w_up, f * d, "w_up");
      expect(L.b_up, f, "b_up");
      expect(L.w_down, d * f, "w_down");
      expect(L.b_down, d, "b_down");
    }
    expect(w_.final_norm, d, "final_norm");
    expect(w_.w_unembed, v * d, "w_unembed");
    expect(w_.b_unembed, v, "b_unembed");
  }

  ToyConfig cfg_;
  ToyWeights w_;
  ByteTokenizer tokenizer_;
};

class ToySession final : public Session {
 public:
  ToySession(const ToyTransformer& model, ForwardPlan plan, int prompt_len, SessionOptions options,
             std::shared_lock<std::shared_mutex> lock)
      : m_(model), plan_(std::move(plan)), prompt_len_(prompt_len), options_(std::move(options)),
        lock_(std::move(lock)) {
    const auto& c = m_.cfg_;
    d_ = c.d_model;
    heads_ = c.num_heads;
    hd_ = d_ / heads_;
    k_cache_.resize(c.num_layers);
    v_cache_.resize(c.num_layers);
    // Persistent offsets are resolved once into a per-layer table.
    layer_offset_.assign(c.num_layers, {});
    for (const auto& o : options_.persistent_offsets) {
      auto& slot = layer_offset_[o.layer];
      if (slot.empty()) slot.assign(d_, 0.0f);
      for (int i = 0; i < d_; ++i) slot[i] += o.offset[i];
    }
  }

  std::vector<float> append(std::span<const int> tokens) override {
    if (tokens.empty()) throw ValidationError("append needs at least one token");
    std::vector<float> x;
    for (int t : tokens) x = step(t);
    const auto normed = m_.final_norm(x);
    return m_.unembed_logits(normed);
  }

  int length() const override { return pos_; }
  const std::vector<ActivationRecord>& captured() const override { return captured_; }
  void add_hook(LayerHook hook) override { hooks_.push_back(std::move(hook)); }
  void clear_hooks() override { hooks_.clear(); }

 private:
  void capture(const Site& site, int pos, const float* v) {
    for (const auto& c : plan_.captures) {
      if (c.site == site && c.position.matches(pos, prompt_len_)) {
        ActivationRecord r;
        r.site = site.kind;
        r.layer = site.layer;
        r.head = site.head;
        r.position = pos;
        r.vector.assign(v, v + d_);
        captured_.push_back(std::move(r));
      }
    }
  }

  void patch(const Site& site, int pos, float* v) const {
    for (const auto& p : plan_.patches) {
      if (p.site == site && p.position.matches(pos, prompt_len_)) std::copy(p.vector.begin(), p.vector.end(), v);
    }
  }

  std::vector<float> step(int token) {
    const auto& c = m_.cfg_;
    const auto& W = m_.w_;
    if (token < 0 || token >= m_.tokenizer_.vocab_size()) throw ValidationError("token out of range");
    if (pos_ >= c.max_seq_len) throw ValidationError("sequence exceeds max_seq_len");
    const int p = pos_;
    const auto d = static_cast<std::size_t>(d_);

    std::vector<float> x(d_);
    const float* emb = W.tok_emb.data() + token * d;
    for (const auto& o : plan_.embedding_overrides) {
      if (p >= o.begin && p < o.end) {
        emb = o.replacement.size() == d ? o.replacement.data() : o.replacement.data() + (p - o.begin) * d;
      }
    }
    const float* pe = W.pos_emb.data() + p * d;
    for (int i = 0; i < d_; ++i) x[i] = emb[i] + pe[i];

    std::vector<float> h(d_), q(d_), k(d_), v(d_), z(hd_), contrib(d_), attn(d_), mlp(d_);
    std::vector<float> up(c.d_ff);
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd_));

    for (int l = 0; l < c.num_layers; ++l) {
      const auto& L = W.layers[l];
      patch(Site::layer_input(l), p, x.data());
      capture(Site::layer_input(l), p, x.data());

      detail::rms_norm(x.data(), L.attn_norm.data(), h.data(), d_);
      detail::matvec(L.wq, h.data(), q.data(), d_, d_);
      detail::matvec(L.wk, h.data(), k.data(), d_, d_);
      detail::matvec(L.wv, h.data(), v.data(), d_, d_);
      k_cache_[l].insert(k_cache_[l].end(), k.begin(), k.end());
      v_cache_[l].insert(v_cache_[l].end(), v.begin(), v.end());

      std::fill(attn.begin(), attn.end(), 0.0f);
      std::vector<float> scores(p + 1);
      for (int hh = 0; hh < heads_; ++hh) {
        const int off = hh * hd_;
        float mx = -INFINITY;
        for (int j = 0; j <= p; ++j) {
          scores[j] = detail::dotf(q.data() + off, k_cache_[l].data() + j * d + off, hd_) * scale;
          mx = std::max(mx, scores[j]);
        }
        float sum = 0.0f;
        for (int j = 0; j <= p; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          sum += scores[j];
        }
        std::fill(z.begin(), z.end(), 0.0f);
        for (int j = 0; j <= p; ++j) {
          const float a = scores[j] / sum;
          const float* vj = v_cache_[l].data() + j * d + off;
          for (int i = 0; i < hd_; ++i) z[i] += a * vj[i];
        }
        // Head contribution: the Wo columns belonging to this head.
        for (int o = 0; o < d_; ++o) {
          contrib[o] = detail::dotf(L.wo.data() + o * d + off, z.data(), hd_);
        }
        const Site hs = Site::head_output(l, hh);
        patch(hs, p, contrib.data());
        capture(hs, p, contrib.data());
        for (int i = 0; i < d_; ++i) attn[i] += contrib[i];
      }
      for (int i = 0; i < d_; ++i) x[i] += attn[i];

      detail::rms_norm(x.data(), L.mlp_norm.data(), h.data(), d_);
      detail::matvec(L.w_up, h.data(), up.data(), c.d_ff, d_);
      for (int i = 0; i < c.d_ff; ++i) up[i] = detail::gelu(up[i] + L.b_up[i]);
      detail::matvec(L.w_down, up.data(), mlp.data(), d_, c.d_ff);
      patch(Site::mlp_output(l), p, mlp.data());
      capture(Site::mlp_output(l), p, mlp.data());
      for (int i = 0; i < d_; ++i) x[i] += mlp[i];
      for (int i = 0; i < d_; ++i) x[i] += L.b_down[i];

      if (!layer_offset_[l].empty()) {
        for (int i = 0; i < d_; ++i) x[i] += layer_offset_[l][i];
      }
      for (const auto& inj : plan_.injections) {
        if (inj.layer == l && inj.position.matches(p, prompt_len_)) {
          const float a = static_cast<float>(inj.alpha);
          for (int i = 0; i < d_; ++i) x[i] += a * inj.vector[i];
        }
      }
      for (const auto& hook : hooks_) {
        if (hook.layer == l) hook.fn(p, std::span<float>(x));
      }
      patch(Site::layer_output(l), p, x.data());
      capture(Site::layer_output(l), p, x.data());
    }
    patch(Site::final_residual(), p, x.data());
    capture(Site::final_residual(), p, x.data());
    ++pos_;
    return x;
  }

  const ToyTransformer& m_;
  ForwardPlan plan_;
  int prompt_len_;
  SessionOptions options_;
  std::shared_lock<std::shared_mutex> lock_;
  int d_ = 0, heads_ = 0, hd_ = 0;
  int pos_ = 0;
  std::vector<std::vector<float>> k_cache_, v_cache_;
  std::vector<std::vector<float>> layer_offset_;
  std::vector<LayerHook> hooks_;
  std::vector<ActivationRecord> captured_;
};

inline std::unique_ptr<Session> ToyTransformer::make_session(const ForwardPlan& plan, int prompt_len,
                                                             const SessionOptions& options,
                                                             std::shared_lock<std::shared_mutex> lock) const {
  return std::make_unique<ToySession>(*this, plan, prompt_len, options, std::move(lock));
}

// Vocabulary is fixed at 256 by the byte tokenizer.
inline std::shared_ptr<ToyTransformer> toy_backend(std::uint64_t seed, int num_layers = 4, int d_model = 64,
                                                   int vocab = 256) {
  if (vocab != 256) throw ValidationError("the toy backend's byte tokenizer has a vocabulary of 256");
  ToyConfig c;
  c.seed = seed;
  c.num_layers = num_layers;
  c.d_model = d_model;
  return std::make_shared<ToyTransformer>(c);
}

// Checkpoint format: "STLB" magic, u32 header length, JSON header, then the
// float32 tensors (little-endian) in a fixed order.
namespace detail {

inline std::vector<std::vector<float>*> checkpoint_tensors(ToyWeights& w) {
  std::vector<std::vector<float>*> t{&w.tok_emb, &w.pos_emb};
  for (auto& L : w.layers) {
    for (auto* p : {&L.attn_norm, &L.wq, &L.wk, &L.wv, &L.wo, &L.mlp_norm, &L.w_up, &L.b_up, &L.w_down, &L.b_down}) {
      t.push_back(p);
    }
  }
  t.push_back(&w.final_norm);
  t.push_back(&w.w_unembed);
  t.push_back(&w.b_unembed);
  return t;
}

}  // namespace detail

inline void save_checkpoint(const ToyTransformer& model, const std::filesystem::path& path) {
  const auto& c = model.config();
  Json header = {{"format", "steerlab-toy"},
                 {"model_id", c.resolved_model_id()},
                 {"num_layers", c.num_layers},
                 {"d_model", c.d_model},
                 {"num_heads", c.num_heads},
                 {"d_ff", c.d_ff},
                 {"max_seq_len", c.max_seq_len},
                 {"seed", c.seed},
                 {"expose_heads", c.expose_heads}};
  const auto hs = dump_compact(header);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write("STLB", 4);
  const auto n = static_cast<std::uint32_t>(hs.size());
  const unsigned char len[4] = {static_cast<unsigned char>(n), static_cast<unsigned char>(n >> 8),
                                static_cast<unsigned char>(n >> 16), static_cast<unsigned char>(n >> 24)};
  out.write(reinterpret_cast<const char*>(len), 4);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  ToyWeights copy = model.weights();
  for (auto* t : detail::checkpoint_tensors(copy)) {
    out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(float)));
  }
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::shared_ptr<ToyTransformer> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[4];
  unsigned char len[4];
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(len), 4);
  if (!in || std::memcmp(magic, "STLB", 4) != 0) throw IoError(path.string() + " is not a steerlab checkpoint");
  const std::uint32_t n = len[0] | (len[1] << 8) | (len[2] << 16) | (static_cast<std::uint32_t>(len[3]) << 24);
  std::string hs(n, '\0');
  in.read(hs.data(), n);
  Json header;
  try {
    header = Json::parse(hs);
  } catch (const Json::parse_error& e) {
    throw IoError(path.string() + ": bad header: " + e.what());
  }
  ToyConfig c;
  c.model_id = header.at("model_id").get<std::string>();
  c.num_layers = header.at("num_layers").get<int>();
  c.d_model = header.at("d_model").get<int>();
  c.num_heads = header.at("num_heads").get<int>();
  c.d_ff = header.at("d_ff").get<int>();
  c.max_seq_len = header.at("max_seq_len").get<int>();
  c.seed = header.at("seed").get<std::uint64_t>();
  c.expose_heads = header.value("expose_heads", true);
  c.validate();
  // Size every tensor from a freshly initialised model of the same shape.
  ToyConfig shape = c;
  shape.max_seq_len = c.max_seq_len;
  ToyWeights w = ToyTransformer(shape).weights();
  for (auto* t : detail::checkpoint_tensors(w)) {
    in.read(reinterpret_cast<char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(float)));
    if (!in) throw IoError(path.string() + ": truncated checkpoint");
  }
  return std::make_shared<ToyTransformer>(c, std::move(w));
}

}  // namespace steerlab
