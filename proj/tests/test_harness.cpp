#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <random>
#include <thread>

#include "steerlab/factory.hpp"
#include "steerlab/harness.hpp"
#include "steerlab/report.hpp"
#include "steerlab/serve.hpp"

using namespace steerlab;
namespace fs = std::filesystem;

namespace {

HarnessOptions quick(int tokens = 6) {
  HarnessOptions o;
  o.params.max_new_tokens = tokens;
  o.seeds_per_prompt = 1;
  o.resamples = 200;
  o.seed = 17;
  return o;
}

SteeringVector rand_vec(const Backend& b, const std::string& cwe, std::uint64_t seed) {
  auto v = random_controls(8.0, b.info().d_model, 1, seed, b.info().last_layer_index, b.info().model_id)[0];
  v.cwe = cwe;
  v.alpha_default = 4.0;
  return v;
}

std::vector<NeutralPrompt> few_neutral(int per_cwe) {
  std::vector<NeutralPrompt> out;
  for (Cwe c : kCCwes) {
    const auto n = neutral_set(c);
    out.insert(out.end(), n.begin(), n.begin() + per_cwe);
  }
  return out;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("steerlab_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Transfer, RatioArithmetic) {
  EXPECT_EQ(*transfer_stats(std::vector<std::vector<double>>(6, std::vector<double>(6, 0.3))).ratio, 1.0);

  std::vector<std::vector<double>> m(6, std::vector<double>(6, 0.13));
  for (int i = 0; i < 6; ++i) m[i][i] = 0.5;
  const auto s = transfer_stats(m);
  EXPECT_NEAR(*s.ratio, 0.5 / 0.13, 1e-12);
  EXPECT_NEAR(*s.ratio, 3.85, 0.01);

  // Published means: 49.9% diagonal, 13.1% off-diagonal.
  EXPECT_NEAR(0.499 / 0.131, 3.8, 0.05);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (auto& row : m) for (auto& x : row) x = u(rng);
  double diag = 0, off = 0;
  for (int i = 0; i < 6; ++i) for (int j = 0; j < 6; ++j) (i == j ? diag : off) += m[i][j];
  const auto r = transfer_stats(m);
  EXPECT_NEAR(r.diagonal_mean, diag / 6, 1e-12);
  EXPECT_NEAR(r.offdiagonal_mean, off / 30, 1e-12);
  EXPECT_NEAR(*r.ratio, (diag / 6) / (off / 30), 1e-12);

  std::vector<std::vector<double>> zero_off(3, std::vector<double>(3, 0.0));
  zero_off[0][0] = 1;
  EXPECT_FALSE(transfer_stats(zero_off).ratio.has_value());
  EXPECT_THROW(transfer_stats({{1, 2}, {3}}), ValidationError);
}

TEST(Transfer, MatrixRunsAndRejectsMissingCells) {
  auto b = toy_backend(8, 2, 32);
  std::map<Cwe, SteeringConfig> vecs;
  std::map<Cwe, std::vector<EvalItem>> prompts;
  std::uint64_t k = 0;
  for (Cwe c : kAllCwes) {
    vecs[c] = {rand_vec(*b, std::string(to_string(c)), ++k), 3.0};
    prompts[c] = {{std::string(to_string(c)) + "/p", c, "Write " + std::string(to_string(c)), k}};
  }
  auto partial = vecs;
  partial.erase(Cwe::Cwe79);
  try {
    transfer_matrix(*b, partial, prompts, quick());
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("CWE-79 vector"), std::string::npos);
  }
  const auto t = transfer_matrix(*b, vecs, prompts, quick(4));
  ASSERT_EQ(t.cells.size(), 6u);
  for (const auto& row : t.cells) {
    ASSERT_EQ(row.size(), 6u);
    for (const auto& c : row) EXPECT_EQ(c.n, 1u);
  }
  const auto again = transfer_stats(t.secure_rates());
  EXPECT_EQ(again.diagonal_mean, t.stats.diagonal_mean);

  const auto csv = transfer_csv(t);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "vector,CWE-787,CWE-119,CWE-134,CWE-89,CWE-78,CWE-79");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
}

TEST(Lobo, FoldVectorsNeverSeeTheHeldOutScenario) {
  const auto pairs = build_pair_grid(load_templates(Cwe::Cwe787));
  const auto folds = make_lobo_folds(pairs);
  // Synthetic activations: secure records carry the scenario id in every coordinate.
  std::vector<ActivationRecord> recs;
  for (const auto& p : pairs) {
    for (auto variant : {Variant::Secure, Variant::Insecure}) {
      ActivationRecord r;
      r.layer = 3;
      r.prompt_id = p.id() + (variant == Variant::Secure ? "/secure" : "/insecure");
      r.variant = variant;
      r.scenario_id = p.scenario_id;
      r.vector.assign(4, variant == Variant::Secure ? static_cast<float>(p.scenario_id) : 0.0f);
      recs.push_back(r);
    }
  }
  for (const auto& f : folds) {
    const auto v = fold_vector(recs, f, Cwe::Cwe787);
    double expect = 0;
    for (int s = 0; s < 7; ++s) expect += s == f.held_out_scenario ? 0 : s;
    EXPECT_NEAR(v.d[0], expect / 6, 1e-12);
    EXPECT_EQ(std::count(v.training_fold_ids.begin(), v.training_fold_ids.end(), f.held_out_scenario), 0);
  }
  auto dirty = folds[2];
  dirty.train_pairs.push_back(dirty.test_pairs[0]);
  EXPECT_THROW(fold_vector(recs, dirty, Cwe::Cwe787), LeakageError);
}

TEST(Lobo, ZeroGridReducesToBaseline) {
  auto b = toy_backend(4, 2, 32);
  const auto r = lobo_sweep(*b, Cwe::Cwe787, {}, quick(2));
  ASSERT_EQ(r.alpha_grid, std::vector<double>{0.0});
  ASSERT_EQ(r.rows.size(), 7u);
  std::size_t n = 0;
  for (const auto& row : r.rows) {
    EXPECT_EQ(row.alpha, 0.0);
    EXPECT_EQ(row.summary.n, 15u);
    n += row.summary.n;
  }
  EXPECT_EQ(r.baseline.n, n);
  EXPECT_EQ(r.best_alpha, 0.0);
  EXPECT_EQ(r.layer, 1);
  for (const auto& [fold, v] : r.fold_vectors) {
    EXPECT_EQ(std::count(v.training_fold_ids.begin(), v.training_fold_ids.end(), fold), 0);
  }
  EXPECT_EQ(normalized_alpha_grid({4, 1, 4, 0}), (std::vector<double>{0, 1, 4}));
  EXPECT_THROW(normalized_alpha_grid({-1}), ValidationError);

  const auto dir = scratch("sweep");
  const auto files = emit_report(r, dir);
  EXPECT_EQ(std::count_if(files.begin(), files.end(), [](const fs::path& p) { return p.extension() == ".svg"; }), 7);
}

TEST(EndToEnd, NoneAndOracleMatchDirectEvaluation) {
  auto b = toy_backend(5, 2, 32);
  const auto prompts = few_neutral(2);
  const auto o = quick(8);

  RoutingStrategy none;
  const auto base = end_to_end(*b, prompts, none, o);
  const auto direct = run_items(*b, neutral_items(prompts), std::nullopt, o);
  ASSERT_EQ(base.completions.size(), direct.size());
  for (std::size_t i = 0; i < direct.size(); ++i) EXPECT_EQ(base.completions[i].text, direct[i].text);

  RoutingStrategy oracle;
  oracle.kind = RoutingKind::Oracle;
  std::uint64_t k = 40;
  for (Cwe c : kCCwes) oracle.vector_table[c] = rand_vec(*b, std::string(to_string(c)), ++k);
  const auto rep = end_to_end(*b, prompts, oracle, o);
  std::size_t n = 0, secure = 0;
  for (Cwe c : kCCwes) {
    std::vector<NeutralPrompt> mine;
    for (const auto& p : prompts) {
      if (p.cwe == c) mine.push_back(p);
    }
    const auto native = run_items(*b, neutral_items(mine), SteeringConfig{oracle.vector_table.at(c), 4.0}, o);
    std::vector<std::string> got;
    for (const auto& cmp : rep.completions) {
      if (cmp.cwe == c) got.push_back(cmp.text);
    }
    ASSERT_EQ(got.size(), native.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_EQ(got[i], native[i].text);
    n += rep.per_cwe.at(c).n;
    secure += rep.per_cwe.at(c).secure_count;
  }
  EXPECT_EQ(rep.overall.n, n);
  EXPECT_EQ(rep.overall.secure_count, secure);

  // A routing failure drops that prompt and keeps going.
  oracle.vector_table.erase(Cwe::Cwe134);
  const auto partial = end_to_end(*b, prompts, oracle, o);
  EXPECT_EQ(partial.excluded.size(), 2u);
  EXPECT_EQ(partial.overall.n, 4u);
  EXPECT_FALSE(partial.per_cwe.count(Cwe::Cwe134));

  // Seed closure.
  const auto rerun = end_to_end(*b, prompts, none, o);
  EXPECT_EQ(rerun.overall, base.overall);
  EXPECT_EQ(dump_compact(to_json(rerun)), dump_compact(to_json(base)));
}

TEST(RandomDirections, ControlsAreMatchedAndSelfConsistent) {
  auto b = toy_backend(6, 2, 32);
  const auto learned = rand_vec(*b, "CWE-787", 77);
  const auto items = neutral_items(few_neutral(1));
  const auto o = quick(4);
  const auto r = random_direction_experiment(*b, Cwe::Cwe787, learned, 3.5, items, 10, 1, o);
  EXPECT_EQ(r.controls.size(), 10u);
  EXPECT_NEAR(r.target_norm, 8.0, 1e-6);
  EXPECT_EQ(evaluate_direction(*b, items, SteeringConfig{learned, 3.5}, o), r.learned);
  EXPECT_EQ(evaluate_direction(*b, items, std::nullopt, o), r.baseline);
  EXPECT_THROW(random_direction_experiment(*b, Cwe::Cwe787, learned, 3.5, {}, 10, 1, o), ValidationError);

  const auto dir = scratch("random");
  const auto first = emit_report(r, dir / "a");
  const auto second = emit_report(r, dir / "b");
  ASSERT_EQ(first.size(), 3u);
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(read_text_file(first[i]), read_text_file(second[i]));
  const auto csv = read_text_file(first[0]);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 13);
}

TEST(Reports, UnwritablePathFails) {
  const auto dir = scratch("unwritable");
  write_text_file(dir / "file", "x");
  EvalReport r;
  r.condition = "none";
  EXPECT_THROW(emit_report(r, dir / "file" / "sub"), IoError);
  EXPECT_EQ(fmt_num(-0.0000001), "0.000000");
  EXPECT_EQ(file_stem("lens_logit_CWE-787/s1"), "lens_logit_CWE-787_s1");
}

TEST(Factory, SpecsCheckpointsAndCache) {
  const auto b = open_backend("toy:seed=3,layers=2,d=32");
  EXPECT_EQ(b->info().num_layers, 2);
  EXPECT_EQ(b->info().d_model, 32);
  EXPECT_EQ(b->info().model_id, "toy-s3-L2-d32");
  EXPECT_EQ(open_backend("toy")->info().num_layers, 4);
  EXPECT_THROW(open_backend("toy:size=3"), ValidationError);
  EXPECT_THROW(open_backend("toy:seed=x"), ValidationError);
  EXPECT_THROW(open_backend("toy:d=30,heads=4"), ValidationError);

  const auto dir = scratch("cache");
  const auto model = toy_backend(12, 2, 32);
  save_checkpoint(*model, dir / "tiny.stlb");
  EXPECT_EQ(open_backend((dir / "tiny.stlb").string())->info().model_id, model->info().model_id);
  setenv("STEERLAB_MODEL_CACHE", dir.c_str(), 1);
  EXPECT_EQ(model_cache_dir(), dir);
  EXPECT_EQ(open_backend("tiny")->info().model_id, model->info().model_id);
  EXPECT_THROW(open_backend("missing-model"), IoError);
  unsetenv("STEERLAB_MODEL_CACHE");
}

TEST(Serve, HandlesRequestsAndIsolatesThem) {
  auto b = toy_backend(9, 2, 32);
  RoutingStrategy oracle;
  oracle.kind = RoutingKind::Oracle;
  std::uint64_t k = 0;
  for (Cwe c : kCCwes) oracle.vector_table[c] = rand_vec(*b, std::string(to_string(c)), ++k);
  CompletionService svc(b, oracle);

  const auto health = svc.health();
  EXPECT_EQ(health["status"], "ok");
  EXPECT_EQ(health["vectors"], (Json{"CWE-787", "CWE-119", "CWE-134"}));

  EXPECT_EQ(svc.handle_text("{not json")["error"]["code"], "invalid_json");
  EXPECT_EQ(svc.handle(Json{{"params", {}}})["error"]["code"], "invalid_request");
  EXPECT_EQ(svc.handle(Json{{"prompt", "x"}, {"params", {{"top_p", 2.0}}}})["error"]["code"], "invalid_request");
  EXPECT_EQ(svc.handle(Json{{"prompt", "x"}})["error"]["code"], "invalid_request");  // oracle needs a cwe
  EXPECT_EQ(svc.handle(Json{{"prompt", "x"}, {"strategy_id", "two_tier_binary"}})["error"]["code"],
            "invalid_request");

  const Json params{{"max_new_tokens", 12}, {"seed", 5}};
  const auto pass = svc.handle(Json{{"prompt", "int main"}, {"params", params}, {"strategy_id", "none"}});
  GenerationParams gp;
  gp.max_new_tokens = 12;
  gp.seed = 5;
  EXPECT_EQ(pass["text"], generate_text(*b, "int main", gp).text);
  EXPECT_EQ(pass["steered"], false);
  EXPECT_TRUE(pass["label"].is_null());

  std::vector<Json> requests;
  const char* cwes[] = {"CWE-787", "CWE-119", "CWE-134"};
  for (int i = 0; i < 9; ++i) {
    requests.push_back(Json{{"prompt", "Write function " + std::to_string(i)},
                            {"cwe", cwes[i % 3]},
                            {"params", {{"max_new_tokens", 16}, {"seed", i}}}});
  }
  std::vector<std::string> sequential;
  for (const auto& r : requests) {
    const auto resp = svc.handle(r);
    ASSERT_FALSE(resp.contains("error")) << resp.dump();
    EXPECT_EQ(resp["steered"], true);
    EXPECT_EQ(resp["predicted_class"], r["cwe"]);
    sequential.push_back(resp["text"]);
  }
  std::vector<std::string> concurrent(requests.size());
  std::vector<std::thread> pool;
  for (int t = 0; t < 3; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < requests.size(); i += 3) concurrent[i] = svc.handle(requests[i])["text"];
    });
  }
  for (auto& th : pool) th.join();
  EXPECT_EQ(concurrent, sequential);
}

TEST(Serve, LoadsFromConfigFile) {
  const auto dir = scratch("serve_cfg");
  auto b = toy_backend(9, 2, 32);
  save_checkpoint(*b, dir / "model.stlb");
  save_vector(dir / "unified.json", rand_vec(*b, "unified", 4));
  write_json_file(dir / "serve.json", Json{{"backend", (dir / "model.stlb").string()},
                                           {"strategy", "single_vector"},
                                           {"method", "weight_fold_in"},
                                           {"single_vector", "unified.json"},
                                           {"alpha", 2.0}});
  CompletionService svc(load_serve_config(dir / "serve.json"));
  EXPECT_EQ(svc.health()["method"], "weight_fold_in");
  EXPECT_EQ(svc.strategy().single_vector->alpha_default, 2.0);
  const auto resp = svc.handle(Json{{"prompt", "go"}, {"cwe", "CWE-787"}, {"params", {{"max_new_tokens", 4}}}});
  EXPECT_EQ(resp["steered"], true);
  EXPECT_TRUE(resp["label"].is_string());

  write_json_file(dir / "bad.json", Json{{"strategy", "two_tier_binary"}});
  EXPECT_THROW(CompletionService(load_serve_config(dir / "bad.json")), ValidationError);
}
