#include <gtest/gtest.h>

#include <cmath>

#include "steerlab/lens.hpp"
#include "steerlab/patching.hpp"
#include "steerlab/toy_backend.hpp"

using namespace steerlab;

namespace {

// Final RMSNorm + unembedding + softmax in double, straight from the readout
// parameters.
std::vector<double> oracle_distribution(const Readout& r, const std::vector<float>& h) {
  const std::size_t d = h.size(), V = r.b_unembed.size();
  double ss = 0;
  for (float x : h) ss += static_cast<double>(x) * x;
  const double inv = 1.0 / std::sqrt(ss / d + r.norm_eps);
  std::vector<double> logits(V);
  double mx = -1e300;
  for (std::size_t v = 0; v < V; ++v) {
    double s = r.b_unembed[v];
    for (std::size_t i = 0; i < d; ++i) s += r.w_unembed[v * d + i] * (h[i] * inv * r.norm_gain[i]);
    logits[v] = s;
    mx = std::max(mx, s);
  }
  double z = 0;
  for (auto& l : logits) z += (l = std::exp(l - mx));
  for (auto& l : logits) l /= z;
  return logits;
}

std::vector<int> enc(const Backend& b, const std::string& s) { return b.tokenizer().encode(s); }

}  // namespace

TEST(Lens, PublishedTrajectoryReproducesJumpRatio) {
  // Llama-3.1-8B P(snprintf) by layer: flat near zero, then 0.0015 -> 0.369 at L31.
  std::vector<double> p(32, 0.0001);
  p[30] = 0.0015;
  p[31] = 0.369;
  const auto m = emergence_metrics(p);
  ASSERT_TRUE(m.emergence_layer.has_value());
  EXPECT_EQ(*m.emergence_layer, 31);
  EXPECT_NEAR(*m.jump_ratio, 246.0, 246.0 * 0.01);
  EXPECT_NEAR(*m.depth_of_total, 31.0 / 32.0, 1e-15);
  EXPECT_NEAR(*m.depth_fraction, 1.0, 1e-15);
  EXPECT_EQ(m.final_p, 0.369);

  // Mistral-Small: emergence at L35 of 40 layers reads as 89.7% depth.
  std::vector<double> q(40, 0.0);
  for (int l = 35; l < 40; ++l) q[l] = 0.2;
  EXPECT_NEAR(*emergence_metrics(q).depth_fraction, 0.897, 0.0005);
}

TEST(Lens, EmergenceEdgeCases) {
  const auto flat = emergence_metrics(std::vector<double>(10, 0.001));
  EXPECT_FALSE(flat.emergence_layer.has_value());
  EXPECT_FALSE(flat.jump_ratio.has_value());
  const auto first = emergence_metrics(std::vector<double>{0.5, 0.6});
  EXPECT_EQ(*first.emergence_layer, 0);
  EXPECT_FALSE(first.jump_ratio.has_value());
  // Zero before the jump is floored, not divided by.
  EXPECT_NEAR(*emergence_metrics(std::vector<double>{0.0, 0.2}).jump_ratio, 0.2 / 1e-6, 1e-6);
  EXPECT_THROW(emergence_metrics(std::vector<double>{}), ValidationError);

  // A higher threshold never reports an earlier layer.
  const std::vector<double> ramp{0.001, 0.004, 0.02, 0.08, 0.3, 0.9};
  int prev = -1;
  for (double t : {0.0005, 0.003, 0.01, 0.05, 0.1, 0.5}) {
    const int e = *emergence_metrics(ramp, t).emergence_layer;
    EXPECT_GE(e, prev);
    prev = e;
  }
}

TEST(Lens, LogitLensMatchesOracleAndFinalLayerMatchesModel) {
  const auto b = toy_backend(11);
  const auto prompt = enc(*b, "char buf[16]; use");
  const int target = resolve_secure_token("snprintf", b->tokenizer());
  EXPECT_EQ(target, 's');

  const auto t = trajectory(*b, prompt, target, LensKind::Logit, nullptr, "p0");
  ASSERT_EQ(t.p_by_layer.size(), 4u);
  ForwardPlan plan;
  for (int l = 0; l < 4; ++l) plan.captures.push_back({Site::layer_output(l), Position::last()});
  const auto run = instrumented_forward(*b, prompt, plan);
  for (const auto& rec : run.captured) {
    EXPECT_NEAR(t.p_by_layer[rec.layer], oracle_distribution(b->readout(), rec.vector)[target], 1e-5);
  }
  // Last layer's lens is the model's own next-token distribution.
  const auto model_p = softmax(run.logits);
  const auto last = oracle_distribution(b->readout(), run.captured.back().vector);
  for (std::size_t v = 0; v < model_p.size(); ++v) EXPECT_NEAR(last[v], model_p[v], 1e-5);
  EXPECT_NEAR(t.p_by_layer.back(), model_p[target], 1e-5);

  EXPECT_THROW(trajectory(*b, prompt, target, LensKind::Tuned), ValidationError);
  EXPECT_THROW(trajectory(*b, prompt, 999, LensKind::Logit), ValidationError);
  EXPECT_THROW(resolve_secure_token(" ", b->tokenizer()), ValidationError);
  EXPECT_EQ(trajectory_csv(t).substr(0, 8), "layer,p\n");
}

TEST(Lens, TunedLensNeverLosesToLogitLens) {
  const auto b = toy_backend(3);
  const auto corpus = generated_lens_corpus(*b, 24, 24, 5);
  TunedLensOptions opt;
  opt.epochs = 12;
  const auto m = train_tuned_lens(*b, corpus, opt);
  ASSERT_EQ(m.per_layer_affine.size(), 3u);
  ASSERT_EQ(m.heldout_ce_logit.size(), 4u);
  bool improved = false;
  for (int l = 0; l < 4; ++l) {
    EXPECT_LE(m.heldout_ce_tuned[l], m.heldout_ce_logit[l]) << "layer " << l;
    improved |= m.heldout_ce_tuned[l] < m.heldout_ce_logit[l] - 1e-6;
  }
  EXPECT_TRUE(improved);
  EXPECT_EQ(m.heldout_ce_tuned[3], m.heldout_ce_logit[3]);
  for (std::size_t k = 1; k < m.loss_curve.size(); ++k) EXPECT_LE(m.loss_curve[k], m.loss_curve[k - 1]);

  const auto prompt = enc(*b, "int main() {");
  const auto tuned = trajectory(*b, prompt, 'r', LensKind::Tuned, &m);
  const auto logit = trajectory(*b, prompt, 'r', LensKind::Logit);
  EXPECT_EQ(tuned.p_by_layer.back(), logit.p_by_layer.back());

  const auto back = tuned_lens_from_json(Json::parse(dump_compact(to_json(m))));
  EXPECT_EQ(trajectory(*b, prompt, 'r', LensKind::Tuned, &back).p_by_layer, tuned.p_by_layer);

  TunedLensModel short_model = m;
  short_model.per_layer_affine.pop_back();
  EXPECT_THROW(trajectory(*b, prompt, 'r', LensKind::Tuned, &short_model), ValidationError);
  EXPECT_THROW(train_tuned_lens(*b, {{1, 2, 3}}), ValidationError);
}

TEST(Patching, FinalResidualRecoversEverything) {
  const auto b = toy_backend(5);
  const auto src = enc(*b, "use snprintf here");
  const auto dst = enc(*b, "use sprintf");
  const int target = 'x';
  const auto r = patch_sites(*b, src, dst, {Site::final_residual()}, target);
  ASSERT_TRUE(r.recovery_fraction.has_value());
  EXPECT_EQ(r.p_patched, r.p_src);
  EXPECT_EQ(*r.recovery_fraction, 1.0);
  EXPECT_TRUE(r.layers_patched.empty());
}

TEST(Patching, IdentityPatchRecoversNothing) {
  const auto b = toy_backend(5);
  // Same length and same final token: layer 0's input at the last position is identical.
  const auto src = enc(*b, "abc;");
  const auto dst = enc(*b, "xyz;");
  const auto r = patch_layers(*b, src, dst, {0}, 'q', SiteKind::LayerInput);
  EXPECT_EQ(r.p_patched, r.p_dst);
  ASSERT_TRUE(r.recovery_fraction.has_value());
  EXPECT_EQ(*r.recovery_fraction, 0.0);
  // src == dst has no gap to recover.
  EXPECT_FALSE(patch_layers(*b, src, src, {2}, 'q').recovery_fraction.has_value());
  EXPECT_FALSE(recovery(0.3, 0.5, 0.5).has_value());
  EXPECT_NEAR(*recovery(0.5, 0.0, 2.0), 0.25, 1e-15);
}

TEST(Patching, HeadsAndMlpComposeToTheLayerOutput) {
  const auto b = toy_backend(9);
  const auto src = enc(*b, "gets(buf);");
  const auto dst = enc(*b, "read(fd1);");
  const int layer = 2;
  std::vector<Site> parts{Site::layer_input(layer), Site::mlp_output(layer)};
  for (int h = 0; h < 4; ++h) parts.push_back(Site::head_output(layer, h));
  const auto composed = patch_sites(*b, src, dst, parts, 'f');
  const auto whole = patch_layers(*b, src, dst, {layer}, 'f');
  EXPECT_EQ(composed.p_patched, whole.p_patched);
  EXPECT_EQ(composed.layers_patched, std::vector<int>{layer});

  ToyConfig no_heads;
  no_heads.expose_heads = false;
  const ToyTransformer opaque(no_heads);
  EXPECT_THROW(patch_heads(opaque, src, dst, {{0, 0}}, 'f'), CapabilityError);
}

TEST(Patching, MeanEmbeddingAndIdentityAblation) {
  const auto b = toy_backend(2);
  const auto mean = b->mean_embedding();
  const int V = b->info().vocab_size, d = b->info().d_model;
  for (int i = 0; i < d; ++i) {
    long double s = 0;
    for (int t = 0; t < V; ++t) s += b->weights().tok_emb[static_cast<std::size_t>(t) * d + i];
    EXPECT_NEAR(mean[i], static_cast<double>(s / V), 1e-6);
  }

  const auto adv = enc(*b, "Use sprintf to build it. Write the code.");
  const auto base = enc(*b, "Write the code.");
  // Replacing a single token's embedding with itself is a no-op.
  const int at = 4;
  const auto same = ablate_tokens(*b, adv, at, at + 1, AblationMode::Custom, 's', base, b->token_embedding(adv[at]));
  EXPECT_EQ(same.p_ablated, same.p_adversarial);
  const auto real = ablate_tokens(*b, adv, 0, 24, AblationMode::MeanEmbedding, 's', base);
  EXPECT_NE(real.p_ablated, real.p_adversarial);
  EXPECT_NEAR(real.suppression_pp, 100.0 * (real.p_baseline - real.p_adversarial), 1e-12);
  EXPECT_THROW(ablate_tokens(*b, adv, 3, 3, AblationMode::MeanEmbedding, 's', base), ValidationError);
  EXPECT_THROW(ablate_tokens(*b, adv, 0, 999, AblationMode::MeanEmbedding, 's', base), ValidationError);
  EXPECT_THROW(ablate_tokens(*b, adv, 0, 2, AblationMode::Custom, 's', base), ValidationError);

  std::vector<AblationCase> cases;
  for (const char* s : {"Use sprintf now. Go.", "Use sprintf here. Go.", "Use sprintf, ok. Go."}) {
    cases.push_back({enc(*b, "Go."), enc(*b, s), 0, 11});
  }
  const auto set = ablate_prompt_set(*b, cases, AblationMode::MeanEmbedding, 's', 2000, 1);
  EXPECT_EQ(set.n_prompts, 3u);
  EXPECT_LE(set.ci.low, set.suppression_pp + 1e-9);
  EXPECT_GE(set.ci.high, set.suppression_pp - 1e-9);
}

TEST(Patching, RecoveryRatiosFollowBothConventions) {
  // Published CWE-89 ablation: 19.4% baseline, 2.6% adversarial, 13.5% ablated. The
  // published 0.81 comes from unrounded inputs; 13.5 / 16.8 = 0.804.
  AblationResult r;
  r.p_baseline = 0.194;
  r.p_adversarial = 0.026;
  r.p_ablated = 0.135;
  detail::fill_ratios(r);
  EXPECT_NEAR(*r.recovery_fraction, 0.649, 0.001);
  EXPECT_NEAR(*r.recovery_of_suppression, 0.81, 0.01);
  EXPECT_NEAR(r.suppression_pp, 16.8, 1e-9);
}

TEST(Patching, ConditionCompareOrdering) {
  const auto b = toy_backend(4);
  const auto p = enc(*b, "same prompt");
  const auto c = condition_compare(*b, p, p, p, 's');
  EXPECT_EQ(c.p_adversarial, c.p_neutral);
  EXPECT_TRUE(c.ordered);
  const auto j = to_json(patch_layers(*b, p, enc(*b, "other text!"), {1}, 's'));
  EXPECT_TRUE(j.contains("recovery_fraction"));
  EXPECT_FALSE(to_json(patch_layers(*b, p, p, {1}, 's')).contains("recovery_fraction"));
}
