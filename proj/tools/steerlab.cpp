// steerlab command line: corpus, scoring, vectors, probes, lens, patching,
// steering experiments, latency, serving and report summaries.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <httplib.h>

#include "steerlab/steerlab.hpp"

using namespace steerlab;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string backend = "toy";
  std::string out = "out";
  std::string config;
  std::vector<std::string> cwe;
  std::string alpha_grid;
  int seeds = 3;
  std::uint64_t seed = 0;
  int max_new_tokens = 512;
  double temperature = 0.6;
  double top_p = 0.9;
  int workers = 1;
  int layer = -1;
  std::string method = "persistent_forward_replacement";
  std::size_t resamples = kDefaultResamples;
};

// Options every subcommand takes.
void add_base(CLI::App* sub, Common& c) {
  sub->add_option("--backend", c.backend, "toy[:seed=,layers=,d=,heads=,ff=], a checkpoint path, or a cached model name")
      ->capture_default_str();
  sub->add_option("--out", c.out, "output directory")->capture_default_str();
  sub->add_option("--config", c.config, "JSON file with defaults for any of these options");
  sub->add_option("--seed", c.seed, "base random seed")->capture_default_str();
  sub->add_option("--workers", c.workers, "parallel prompt workers")->capture_default_str();
}

void add_cwe(CLI::App* sub, Common& c) {
  sub->add_option("--cwe", c.cwe, "CWE id(s), e.g. CWE-787, or 'all'")->delimiter(',');
}

void add_generation(CLI::App* sub, Common& c) {
  sub->add_option("--seeds", c.seeds, "sampled completions per prompt")->capture_default_str();
  sub->add_option("--max-new-tokens", c.max_new_tokens)->capture_default_str();
  sub->add_option("--temperature", c.temperature)->capture_default_str();
  sub->add_option("--top-p", c.top_p)->capture_default_str();
  sub->add_option("--layer", c.layer, "steering layer (default: last layer)");
  sub->add_option("--method", c.method, "per_step_callback | persistent_forward_replacement | weight_fold_in")
      ->capture_default_str();
  sub->add_option("--resamples", c.resamples, "bootstrap resamples")->capture_default_str();
}

// Values from --config fill in whatever was not given on the command line.
void apply_config(const CLI::App* sub, Common& c) {
  if (c.config.empty()) return;
  const auto j = read_json_file(c.config);
  if (!j.is_object()) throw ValidationError("--config must hold a JSON object");
  auto unset = [&](const std::string& key, const std::string& flag) {
    const auto* opt = sub->get_option_no_throw(flag);
    return j.contains(key) && opt && opt->count() == 0;
  };
  if (unset("backend", "--backend")) c.backend = j["backend"].get<std::string>();
  if (unset("out", "--out")) c.out = j["out"].get<std::string>();
  if (unset("seed", "--seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (unset("workers", "--workers")) c.workers = j["workers"].get<int>();
  if (unset("cwe", "--cwe")) {
    c.cwe.clear();
    if (j["cwe"].is_array()) {
      for (const auto& x : j["cwe"]) c.cwe.push_back(x.get<std::string>());
    } else {
      c.cwe.push_back(j["cwe"].get<std::string>());
    }
  }
  if (unset("alpha_grid", "--alpha-grid")) {
    std::ostringstream os;
    for (const auto& a : j["alpha_grid"]) os << (os.tellp() > 0 ? "," : "") << a.get<double>();
    c.alpha_grid = os.str();
  }
  if (unset("seeds", "--seeds")) c.seeds = j["seeds"].get<int>();
  if (unset("max_new_tokens", "--max-new-tokens")) c.max_new_tokens = j["max_new_tokens"].get<int>();
  if (unset("temperature", "--temperature")) c.temperature = j["temperature"].get<double>();
  if (unset("top_p", "--top-p")) c.top_p = j["top_p"].get<double>();
  if (unset("layer", "--layer")) c.layer = j["layer"].get<int>();
  if (unset("method", "--method")) c.method = j["method"].get<std::string>();
  if (unset("resamples", "--resamples")) c.resamples = j["resamples"].get<std::size_t>();
}

std::vector<Cwe> cwes_or(const Common& c, const std::vector<Cwe>& fallback) {
  if (c.cwe.empty() || (c.cwe.size() == 1 && c.cwe[0] == "all")) return fallback;
  std::vector<Cwe> out;
  for (const auto& s : c.cwe) out.push_back(parse_cwe(s));
  return out;
}

Cwe single_cwe(const Common& c, Cwe fallback) {
  const auto all = cwes_or(c, {fallback});
  if (all.size() != 1) throw ValidationError("this command takes a single --cwe");
  return all.front();
}

const std::vector<Cwe> kAll(kAllCwes.begin(), kAllCwes.end());
const std::vector<Cwe> kC(kCCwes.begin(), kCCwes.end());

std::string name(Cwe c) { return std::string(to_string(c)); }

HarnessOptions harness(const Common& c) {
  HarnessOptions o;
  o.params.max_new_tokens = c.max_new_tokens;
  o.params.temperature = c.temperature;
  o.params.top_p = c.top_p;
  o.seeds_per_prompt = c.seeds;
  o.seed = c.seed;
  o.method = parse_injection_method(c.method);
  o.resamples = c.resamples;
  o.workers = c.workers;
  if (c.layer >= 0) o.layer = c.layer;
  o.validate();
  return o;
}

std::vector<double> alpha_grid(const Common& c) {
  if (c.alpha_grid.empty()) return default_alpha_grid();
  std::vector<double> out;
  std::stringstream ss(c.alpha_grid);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ValidationError("bad --alpha-grid entry: '" + item + "'");
    }
  }
  return out;
}

// First-token target for lens, patching and ablation readouts.
std::string default_secure_api(Cwe c) {
  switch (c) {
    case Cwe::Cwe787: return "snprintf";
    case Cwe::Cwe119: return "strncpy";
    case Cwe::Cwe134: return "printf(\"%s\"";
    case Cwe::Cwe89: return "?";
    case Cwe::Cwe78: return "subprocess";
    case Cwe::Cwe79: return "escape";
  }
  return "";
}

std::vector<PromptPair> first_variations(std::vector<PromptPair> pairs, std::size_t n) {
  if (n == 0 || pairs.size() <= n) return pairs;
  std::stable_sort(pairs.begin(), pairs.end(),
                   [](const PromptPair& a, const PromptPair& b) { return a.variation_id < b.variation_id; });
  pairs.resize(n);
  return pairs;
}

// LOBO-optimal alpha from an earlier `steer sweep`, if there is one.
double optimal_alpha(const fs::path& dir, Cwe cwe, double fallback) {
  const auto path = dir / ("sweep_" + name(cwe) + ".json");
  if (!fs::exists(path)) return fallback;
  return read_json_file(path).at("best").at("alpha").get<double>();
}

void print_written(const std::vector<fs::path>& files) {
  for (const auto& f : files) std::cout << "  wrote " << f.string() << "\n";
}

std::string pct(double x) { return fmt_num(100.0 * x, 1) + "%"; }

// --- commands -----------------------------------------------------------------

void corpus_build(const Common& c) {
  const fs::path dir = fs::path(c.out) / "corpus";
  for (Cwe cwe : cwes_or(c, kAll)) {
    const auto templates = load_templates(cwe);
    const auto pairs = build_pair_grid(templates);
    save_pairs(dir / (name(cwe) + ".pairs.json"), pairs);
    Json folds = Json::array();
    for (const auto& f : make_lobo_folds(pairs)) {
      Json test = Json::array();
      for (const auto& p : f.test_pairs) test.push_back(p.id());
      folds.push_back({{"held_out_scenario", f.held_out_scenario}, {"train_pairs", f.train_pairs.size()}, {"test", test}});
    }
    write_json_file(dir / (name(cwe) + ".folds.json"), folds);
    const auto neutral = neutral_set(templates);
    if (!neutral.empty()) save_neutral(dir / (name(cwe) + ".neutral.json"), neutral);
    std::cout << name(cwe) << ": " << pairs.size() << " pairs, " << folds.size() << " folds, " << neutral.size()
              << " neutral prompts\n";
  }
  std::cout << "  wrote " << dir.string() << "\n";
}

void score_run(const Common& c, const std::string& input) {
  const Cwe cwe = single_cwe(c, Cwe::Cwe787);
  const auto text = read_text_file(input);
  std::vector<std::pair<std::string, std::string>> items;  // id, completion
  Json parsed;
  try {
    parsed = Json::parse(text);
  } catch (const Json::parse_error&) {
    parsed = nullptr;
  }
  if (parsed.is_array()) {
    for (std::size_t i = 0; i < parsed.size(); ++i) {
      const auto& e = parsed[i];
      if (e.is_string()) {
        items.emplace_back(std::to_string(i), e.get<std::string>());
      } else {
        items.emplace_back(e.value("prompt_id", std::to_string(i)), e.at("text").get<std::string>());
      }
    }
  } else {
    items.emplace_back(fs::path(input).filename().string(), text);
  }
  Json records = Json::array();
  std::vector<SecurityLabel> labels;
  std::string csv = "prompt_id,label,matched_pattern\n";
  for (const auto& [id, completion] : items) {
    const auto r = score_output_detailed(cwe, completion);
    labels.push_back(r.label);
    records.push_back({{"prompt_id", id}, {"label", to_string(r.label)}, {"matched_pattern", r.matched_pattern}});
    csv += id + "," + std::string(to_string(r.label)) + ",\"" + r.matched_pattern + "\"\n";
  }
  const auto summary = summarize_rates(labels, c.resamples, c.seed);
  const fs::path dir(c.out);
  write_json_file(dir / ("scores_" + name(cwe) + ".json"),
                  Json{{"cwe", name(cwe)}, {"summary", to_json(summary)}, {"records", records}});
  write_text_file(dir / ("scores_" + name(cwe) + ".csv"), csv);
  std::cout << name(cwe) << ": " << summary.n << " completions, secure " << pct(summary.secure_rate) << " [" <<
      pct(summary.ci_low) << ", " << pct(summary.ci_high) << "], insecure " << pct(summary.insecure_rate) << ", other "
            << pct(summary.other_rate) << "\n";
}

void vectors_fit(const Common& c, bool lobo, bool unified) {
  auto backend = open_backend(c.backend);
  const int layer = c.layer >= 0 ? c.layer : backend->info().last_layer_index;
  const auto model_id = backend->info().model_id;
  const fs::path dir = fs::path(c.out) / "vectors";
  std::vector<ActivationRecord> pooled_s, pooled_i;
  std::vector<SteeringVector> fitted;
  for (Cwe cwe : cwes_or(c, kAll)) {
    const auto pairs = build_pair_grid(load_templates(cwe));
    const auto acts = collect_activations(*backend, pair_prompts(pairs), {layer}, c.workers).at(layer);
    std::vector<ActivationRecord> s, i;
    for (const auto& r : acts) (r.variant == Variant::Secure ? s : i).push_back(r);
    const auto v = mean_difference(s, i, name(cwe), model_id);
    save_vector(dir / (name(cwe) + ".json"), v);
    fitted.push_back(v);
    std::cout << name(cwe) << ": layer " << layer << ", norm " << fmt_num(v.norm, 4) << "\n";
    if (lobo) {
      for (const auto& fold : make_lobo_folds(pairs)) {
        const auto fv = fold_vector(acts, fold, cwe, model_id);
        save_vector(dir / (name(cwe) + "_fold" + std::to_string(fold.held_out_scenario) + ".json"), fv);
      }
    }
    pooled_s.insert(pooled_s.end(), s.begin(), s.end());
    pooled_i.insert(pooled_i.end(), i.begin(), i.end());
  }
  if (unified) {
    const auto u = mean_difference(pooled_s, pooled_i, "unified", model_id);
    save_vector(dir / "unified.json", u);
    fitted.push_back(u);
    std::cout << "unified: norm " << fmt_num(u.norm, 4) << "\n";
  }
  Json ids = Json::array(), norms = Json::array(), cos = Json::array();
  for (const auto& a : fitted) {
    ids.push_back(a.cwe);
    norms.push_back(a.norm);
    Json row = Json::array();
    for (const auto& b : fitted) {
      const auto g = geometry(a, b);
      row.push_back(g.cosine ? Json(*g.cosine) : Json(nullptr));
    }
    cos.push_back(row);
  }
  write_json_file(dir / "geometry.json", Json{{"ids", ids}, {"norms", norms}, {"cosine", cos}});
  std::cout << "  wrote " << dir.string() << "\n";
}

void probe_train(const Common& c, const std::string& family_s, const std::string& cv_s, std::size_t max_pairs,
                 bool sweep) {
  auto backend = open_backend(c.backend);
  const auto inf = backend->info();
  const auto family = parse_probe_family(family_s);
  const CvMode cv = cv_s == "none" ? CvMode::None : CvMode::Lobo;
  if (cv_s != "none" && cv_s != "lobo") throw ValidationError("--cv must be lobo or none");
  const int layer = c.layer >= 0 ? c.layer : inf.num_layers / 2;
  const bool routing = family == ProbeFamily::Routing3 || family == ProbeFamily::RoutingBinary;

  std::vector<LabeledPrompt> prompts;
  std::optional<Cwe> cwe;
  if (routing) {
    for (Cwe rc : kC) {
      const auto ps = pair_prompts(first_variations(build_pair_grid(load_templates(rc)), max_pairs));
      prompts.insert(prompts.end(), ps.begin(), ps.end());
    }
  } else {
    cwe = single_cwe(c, Cwe::Cwe787);
    prompts = pair_prompts(first_variations(build_pair_grid(load_templates(*cwe)), max_pairs));
  }

  std::vector<int> layers{layer};
  if (sweep) {
    layers.clear();
    for (int l = 0; l < inf.num_layers; ++l) layers.push_back(l);
  }
  auto acts = collect_activations(*backend, prompts, layers, c.workers);

  // Behavioral labels: what the model actually wrote for each prompt.
  std::map<std::string, SecurityLabel> behavior;
  if (family == ProbeFamily::Behavioral) {
    const auto o = harness(c);
    std::vector<EvalItem> items;
    for (const auto& p : prompts) items.push_back({p.id, *cwe, p.text, stream_of(p.id)});
    HarnessOptions one = o;
    one.seeds_per_prompt = 1;
    for (const auto& comp : run_items(*backend, items, std::nullopt, one)) behavior[comp.prompt_id] = comp.label;
  }

  std::map<int, ActivationDataset> by_layer;
  for (auto& [l, recs] : acts) {
    ActivationDataset ds;
    if (routing) {
      ds.label_field = LabelField::Cwe;
      if (family == ProbeFamily::RoutingBinary) ds.class_map = two_tier_class_map();
    } else if (family == ProbeFamily::Behavioral) {
      ds.label_field = LabelField::BehavioralLabel;
    }
    for (auto& r : recs) {
      if (family == ProbeFamily::Behavioral) {
        const auto label = behavior.at(r.prompt_id);
        if (label == SecurityLabel::Other) continue;
        r.behavioral_label = label;
      }
      ds.records.push_back(std::move(r));
    }
    by_layer[l] = std::move(ds);
  }

  const fs::path dir = fs::path(c.out) / "probes";
  const std::string stem = std::string(to_string(family)) + (cwe ? "_" + name(*cwe) : "");
  if (family == ProbeFamily::Behavioral) {
    std::cout << "behavioral labels:";
    for (const auto& [cls, n] : by_layer.at(layer).balance()) std::cout << " " << cls << "=" << n;
    std::cout << "\n";
  }
  const auto probe = train_probe(by_layer.at(layer), layer, family, cv, {}, inf.model_id);
  save_probe(dir / (stem + ".json"), probe);
  std::cout << stem << ": layer " << layer << ", classes " << probe.classes.size() << ", cv accuracy "
            << fmt_num(probe.cv_accuracy, 4) << "\n";
  if (sweep) {
    std::string csv = "layer,accuracy\n";
    Json curve = Json::array();
    for (const auto& la : layer_sweep(by_layer, family, inf.num_layers)) {
      csv += std::to_string(la.layer) + "," + (la.accuracy ? fmt_num(*la.accuracy) : "") + "\n";
      curve.push_back({{"layer", la.layer}, {"accuracy", la.accuracy ? Json(*la.accuracy) : Json(nullptr)}});
    }
    write_text_file(dir / (stem + "_layers.csv"), csv);
    write_json_file(dir / (stem + "_layers.json"), curve);
  }
  std::cout << "  wrote " << dir.string() << "\n";
}

void lens_trace(const Common& c, const std::string& kind_s, std::string token, const std::string& variant,
                const std::string& text, std::size_t max_prompts, const std::string& tuned_path, bool train_tuned,
                int epochs, double threshold) {
  auto backend = open_backend(c.backend);
  const Cwe cwe = single_cwe(c, Cwe::Cwe787);
  const auto kind = parse_lens_kind(kind_s);
  if (token.empty()) token = default_secure_api(cwe);
  const int target = resolve_secure_token(token, backend->tokenizer());
  const fs::path dir = fs::path(c.out) / "lens";

  std::optional<TunedLensModel> tuned;
  if (kind == LensKind::Tuned) {
    if (!tuned_path.empty()) {
      tuned = tuned_lens_from_json(read_json_file(tuned_path));
    } else if (train_tuned) {
      TunedLensOptions opt;
      opt.epochs = epochs;
      opt.seed = c.seed;
      tuned = train_tuned_lens(*backend, generated_lens_corpus(*backend, 96, 48, c.seed), opt);
      write_json_file(dir / "tuned_lens.json", to_json(*tuned));
      std::cout << "trained tuned lens over " << tuned->per_layer_affine.size() << " layers\n";
    } else {
      throw ValidationError("tuned lens needs --tuned-lens PATH or --train-tuned");
    }
  }

  std::vector<std::pair<std::string, std::string>> prompts;
  if (!text.empty()) {
    prompts.emplace_back("custom", text);
  } else if (variant == "neutral") {
    for (const auto& n : neutral_set(cwe)) {
      prompts.emplace_back(name(cwe) + "/neutral/s" + std::to_string(n.scenario_id), n.text);
    }
  } else if (variant == "secure" || variant == "insecure") {
    for (const auto& p : first_variations(build_pair_grid(load_templates(cwe)), 7)) {
      prompts.emplace_back(p.id() + "/" + variant, variant == "secure" ? p.secure_text : p.insecure_text);
    }
  } else {
    throw ValidationError("--variant must be secure, insecure or neutral");
  }
  if (max_prompts && prompts.size() > max_prompts) prompts.resize(max_prompts);

  std::vector<double> mean(backend->info().num_layers, 0.0);
  std::vector<fs::path> written;
  for (const auto& [id, t] : prompts) {
    const auto traj = trajectory(*backend, backend->tokenizer().encode(t), target, kind, tuned ? &*tuned : nullptr, id);
    for (std::size_t l = 0; l < mean.size(); ++l) mean[l] += traj.p_by_layer[l] / static_cast<double>(prompts.size());
    const auto files = emit_report(traj, dir);
    written.insert(written.end(), files.begin(), files.end());
  }
  const auto m = emergence_metrics(mean, threshold);
  write_json_file(dir / ("summary_" + std::string(to_string(kind)) + ".json"),
                  Json{{"cwe", name(cwe)},
                       {"token", token},
                       {"target_token_id", target},
                       {"prompts", prompts.size()},
                       {"mean_p_by_layer", mean},
                       {"emergence", to_json(m)}});
  std::cout << prompts.size() << " prompts, " << to_string(kind) << " lens, target '" << token << "': emergence layer "
            << (m.emergence_layer ? std::to_string(*m.emergence_layer) : std::string("none"));
  if (m.jump_ratio) std::cout << ", jump ratio " << fmt_num(*m.jump_ratio, 1);
  if (m.depth_of_total) std::cout << ", depth " << pct(*m.depth_of_total);
  std::cout << "\n  wrote " << dir.string() << " (" << written.size() + 1 << " files)\n";
}

void patch_run(const Common& c, std::size_t pair_index, const std::string& src_text, const std::string& dst_text,
               std::string token, const std::string& site, bool heads) {
  auto backend = open_backend(c.backend);
  const Cwe cwe = single_cwe(c, Cwe::Cwe787);
  if (token.empty()) token = default_secure_api(cwe);
  const int target = resolve_secure_token(token, backend->tokenizer());
  std::string src = src_text, dst = dst_text;
  if (src.empty() || dst.empty()) {
    const auto pairs = build_pair_grid(load_templates(cwe));
    if (pair_index >= pairs.size()) throw ValidationError("--pair out of range");
    if (src.empty()) src = pairs[pair_index].secure_text;
    if (dst.empty()) dst = pairs[pair_index].insecure_text;
  }
  const auto& tok = backend->tokenizer();
  const auto s = tok.encode(src), d = tok.encode(dst);
  const auto kind = parse_site_kind(site);
  Json results = Json::array();
  std::string csv = "layer,head,p_patched,recovery_fraction\n";
  auto add = [&](const PatchResult& r, int layer, std::optional<int> head) {
    auto j = to_json(r);
    j["layer"] = layer;
    if (head) j["head"] = *head;
    results.push_back(j);
    csv += std::to_string(layer) + "," + (head ? std::to_string(*head) : "") + "," + fmt_num(r.p_patched) + "," +
           (r.recovery_fraction ? fmt_num(*r.recovery_fraction) : "") + "\n";
  };
  std::optional<std::pair<int, double>> best;
  for (int l = 0; l < backend->info().num_layers; ++l) {
    const auto r = patch_layers(*backend, s, d, {l}, target, kind);
    add(r, l, std::nullopt);
    if (r.recovery_fraction && (!best || *r.recovery_fraction > best->second)) best = {{l, *r.recovery_fraction}};
    if (heads) {
      for (int h = 0; h < backend->info().num_heads; ++h) add(patch_heads(*backend, s, d, {{l, h}}, target), l, h);
    }
  }
  const fs::path dir(c.out);
  write_json_file(dir / ("patch_" + name(cwe) + ".json"), Json{{"cwe", name(cwe)}, {"token", token}, {"site", site}, {"results", results}});
  write_text_file(dir / ("patch_" + name(cwe) + ".csv"), csv);
  if (best) {
    std::cout << "best single-layer recovery: layer " << best->first << " (" << fmt_num(best->second, 4) << ")\n";
  } else {
    std::cout << "source and destination give the same target probability; recovery undefined\n";
  }
  std::cout << "  wrote " << (dir / ("patch_" + name(cwe) + ".json")).string() << "\n";
}

// Token span where two sequences differ, as [begin, end) in `b`.
std::pair<int, int> differing_tokens(const std::vector<int>& a, const std::vector<int>& b) {
  std::size_t pre = 0;
  while (pre < a.size() && pre < b.size() && a[pre] == b[pre]) ++pre;
  std::size_t suf = 0;
  while (suf < a.size() - pre && suf < b.size() - pre && a[a.size() - 1 - suf] == b[b.size() - 1 - suf]) ++suf;
  return {static_cast<int>(pre), static_cast<int>(b.size() - suf)};
}

void ablate(const Common& c, std::size_t max_pairs, std::string token) {
  auto backend = open_backend(c.backend);
  const Cwe cwe = single_cwe(c, Cwe::Cwe89);
  if (token.empty()) token = default_secure_api(cwe);
  const int target = resolve_secure_token(token, backend->tokenizer());
  const auto& tok = backend->tokenizer();
  std::map<int, std::string> neutral;
  for (const auto& n : neutral_set(cwe)) neutral[n.scenario_id] = n.text;
  std::vector<AblationCase> cases;
  for (const auto& p : first_variations(build_pair_grid(load_templates(cwe)), max_pairs)) {
    const auto adv = tok.encode(p.insecure_text);
    const auto [begin, end] = differing_tokens(tok.encode(p.secure_text), adv);
    if (begin >= end) continue;
    const auto it = neutral.find(p.scenario_id);
    if (it == neutral.end()) throw ValidationError("no neutral prompt for scenario " + std::to_string(p.scenario_id));
    cases.push_back({tok.encode(it->second), adv, begin, end});
  }
  const auto r = ablate_prompt_set(*backend, cases, AblationMode::MeanEmbedding, target, c.resamples, c.seed);
  const fs::path path = fs::path(c.out) / ("ablation_" + name(cwe) + ".json");
  auto j = to_json(r);
  j["cwe"] = name(cwe);
  j["token"] = token;
  write_json_file(path, j);
  std::cout << cases.size() << " prompts: baseline " << pct(r.p_baseline) << ", adversarial " << pct(r.p_adversarial)
            << ", ablated " << pct(r.p_ablated) << ", suppression " << fmt_num(r.suppression_pp, 1) << " pp\n"
            << "  wrote " << path.string() << "\n";
}

void steer_sweep(const Common& c) {
  auto backend = open_backend(c.backend);
  const auto o = harness(c);
  for (Cwe cwe : cwes_or(c, {Cwe::Cwe787})) {
    const auto r = lobo_sweep(*backend, cwe, alpha_grid(c), o);
    std::cout << name(cwe) << ": baseline " << pct(r.baseline.secure_rate) << ", best alpha " << fmt_num(r.best_alpha, 2)
              << " -> " << pct(r.best_secure_rate) << " (layer " << r.layer << ", " << r.rows.size() << " fold x alpha cells)\n";
    print_written(emit_report(r, c.out));
  }
}

SteeringVector load_or_fit(Backend& backend, const fs::path& dir, Cwe cwe, const HarnessOptions& o) {
  const auto path = dir / (name(cwe) + ".json");
  if (fs::exists(path)) return load_vector(path);
  std::cout << "no " << path.string() << ", fitting on the full corpus\n";
  return fit_vector(backend, build_pair_grid(load_templates(cwe)), cwe, steering_layer(backend, o), o.workers);
}

void steer_random(const Common& c, const std::string& vectors, double alpha, int n, std::size_t max_prompts) {
  auto backend = open_backend(c.backend);
  const auto o = harness(c);
  const Cwe cwe = single_cwe(c, Cwe::Cwe787);
  const auto learned = load_or_fit(*backend, vectors.empty() ? fs::path(c.out) / "vectors" : fs::path(vectors), cwe, o);
  auto items = adversarial_items(first_variations(build_pair_grid(load_templates(cwe)), max_prompts));
  const auto r = random_direction_experiment(*backend, cwe, learned, alpha, items, n, c.seed, o);
  std::cout << name(cwe) << " alpha " << fmt_num(alpha, 2) << ": baseline " << pct(r.baseline.secure_rate) << ", learned "
            << pct(r.learned.secure_rate) << ", random " << pct(r.control_mean) << " +/- " << fmt_num(100 * r.control_std, 1)
            << " pp over " << r.controls.size() << " directions\n";
  print_written(emit_report(r, c.out));
}

void transfer(const Common& c, const std::string& vectors, const std::string& sweeps, double alpha,
              std::size_t max_prompts) {
  auto backend = open_backend(c.backend);
  const auto o = harness(c);
  const fs::path vdir = vectors.empty() ? fs::path(c.out) / "vectors" : fs::path(vectors);
  const fs::path sdir = sweeps.empty() ? fs::path(c.out) : fs::path(sweeps);
  std::map<Cwe, SteeringConfig> vecs;
  std::map<Cwe, std::vector<EvalItem>> items;
  for (Cwe cwe : kAll) {
    vecs[cwe] = {load_or_fit(*backend, vdir, cwe, o), optimal_alpha(sdir, cwe, alpha)};
    items[cwe] = adversarial_items(first_variations(build_pair_grid(load_templates(cwe)), max_prompts));
  }
  const auto t = transfer_matrix(*backend, vecs, items, o);
  std::cout << "diagonal " << pct(t.stats.diagonal_mean) << ", off-diagonal " << pct(t.stats.offdiagonal_mean);
  if (t.stats.ratio) std::cout << ", ratio " << fmt_num(*t.stats.ratio, 2) << "x";
  std::cout << "\n";
  print_written(emit_report(t, c.out));
}

struct RouteFlags {
  std::string strategy = "two_tier_binary";
  std::string vectors;
  std::string probe;
  std::string single_vector;
  double alpha = -1;
  double confidence_floor = 0.5;
};

ServeConfig serve_config_from_flags(const Common& c, const RouteFlags& f) {
  ServeConfig s;
  s.backend = c.backend;
  s.strategy = parse_routing_kind(f.strategy);
  s.method = parse_injection_method(c.method);
  const fs::path vdir = f.vectors.empty() ? fs::path(c.out) / "vectors" : fs::path(f.vectors);
  for (Cwe cwe : kC) {
    const auto p = vdir / (name(cwe) + ".json");
    if (fs::exists(p)) s.vectors[cwe] = p;
  }
  if (!f.single_vector.empty()) {
    s.single_vector = f.single_vector;
  } else if (s.strategy == RoutingKind::SingleVector && fs::exists(vdir / "unified.json")) {
    s.single_vector = vdir / "unified.json";
  }
  if (!f.probe.empty()) {
    s.probe = f.probe;
  } else {
    const auto family = s.strategy == RoutingKind::TwoTierBinary ? "routing_binary" : "routing3";
    const auto p = fs::path(c.out) / "probes" / (std::string(family) + ".json");
    if (fs::exists(p)) s.probe = p;
  }
  if (f.alpha >= 0) s.alpha = f.alpha;
  s.confidence_floor = f.confidence_floor;
  return s;
}

void route_eval(const Common& c, const RouteFlags& f, std::size_t per_cwe) {
  const auto cfg = serve_config_from_flags(c, f);
  CompletionService svc(cfg);  // loads and validates the strategy
  auto strategy = svc.strategy();
  if (!cfg.alpha) {
    for (const auto& [cwe, v] : strategy.vector_table) strategy.alphas[cwe] = optimal_alpha(c.out, cwe, 4.0);
    if (strategy.single_vector) strategy.single_vector->alpha_default = 4.0;
  }
  auto backend = open_backend(c.backend);
  std::vector<NeutralPrompt> prompts;
  for (Cwe cwe : kC) {
    auto n = neutral_set(cwe);
    if (per_cwe && n.size() > per_cwe) n.resize(per_cwe);
    prompts.insert(prompts.end(), n.begin(), n.end());
  }
  const auto r = end_to_end(*backend, prompts, strategy, harness(c), f.strategy);
  std::cout << f.strategy << ": overall secure " << pct(r.overall.secure_rate) << " [" << pct(r.overall.ci_low) << ", "
            << pct(r.overall.ci_high) << "] over " << r.overall.n << " completions";
  if (!r.excluded.empty()) std::cout << ", " << r.excluded.size() << " prompts excluded";
  std::cout << "\n";
  for (const auto& [cwe, s] : r.per_cwe) std::cout << "  " << name(cwe) << ": " << pct(s.secure_rate) << "\n";
  print_written(emit_report(r, c.out));
}

void bench_latency(const Common& c, const std::vector<std::string>& methods, int tokens, int reps, int warmup,
                   const std::string& clock, std::size_t n_prompts, const std::string& vector_path, double alpha) {
  auto backend = open_backend(c.backend);
  const auto inf = backend->info();
  const int layer = c.layer >= 0 ? c.layer : inf.last_layer_index;
  const auto real = vector_path.empty() ? random_controls(8.0, inf.d_model, 1, c.seed + 1, layer, inf.model_id)[0]
                                        : load_vector(vector_path);
  auto zero = real;
  std::fill(zero.d.begin(), zero.d.end(), 0.0);
  zero.norm = 0;

  std::vector<LatencyArm> arms{{InjectionMethod::PersistentForwardReplacement, {zero, alpha}}};
  std::vector<std::string> labels{"zero_vector"};
  for (const auto& m : methods) {
    arms.push_back({parse_injection_method(m), {real, alpha}});
    labels.push_back(m);
  }
  std::vector<std::vector<int>> prompts;
  for (Cwe cwe : kC) {
    for (const auto& p : neutral_set(cwe)) prompts.push_back(backend->tokenizer().encode(p.text));
  }
  if (n_prompts && prompts.size() > n_prompts) prompts.resize(n_prompts);

  LatencyOptions o;
  o.tokens = tokens;
  o.repetitions = reps;
  o.warmup_rounds = warmup;
  o.seed = c.seed;
  if (clock == "thread_cpu") {
    o.clock = LatencyClock::ThreadCpu;
  } else if (clock != "wall") {
    throw ValidationError("--clock must be wall or thread_cpu");
  }
  const auto reports = latency_compare(*backend, prompts, arms, o);
  Json out = Json::array();
  std::printf("%-32s %12s %12s %10s\n", "arm", "baseline_ms", "steered_ms", "overhead");
  for (std::size_t i = 0; i < reports.size(); ++i) {
    auto j = to_json(reports[i]);
    j["arm"] = labels[i];
    out.push_back(j);
    std::printf("%-32s %12.2f %12.2f %9.2f%%\n", labels[i].c_str(), reports[i].baseline_ms, reports[i].steered_ms,
                100.0 * reports[i].overhead_fraction);
  }
  const fs::path path = fs::path(c.out) / "latency.json";
  write_json_file(path, Json{{"clock", clock}, {"tokens", tokens}, {"repetitions", reps}, {"prompts", prompts.size()},
                             {"arms", out}});
  std::cout << "  wrote " << path.string() << "\n";
}

int status_for(const Json& resp) {
  if (!resp.contains("error")) return 200;
  const auto code = resp["error"]["code"].get<std::string>();
  if (code == "busy") return 503;
  if (code == "internal") return 500;
  return 400;
}

void serve(const Common& c, const RouteFlags& f, const std::string& host, int port) {
  const auto cfg = c.config.empty() ? serve_config_from_flags(c, f) : load_serve_config(c.config);
  CompletionService svc(cfg);
  httplib::Server server;
  server.Get("/health", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(dump_compact(svc.health()), "application/json");
  });
  server.Post("/v1/completions", [&](const httplib::Request& req, httplib::Response& res) {
    const auto resp = svc.handle_text(req.body);
    res.status = status_for(resp);
    res.set_content(dump_compact(resp), "application/json");
  });
  std::cout << "serving " << svc.backend().info().model_id << " (" << to_string(svc.strategy().kind) << ") on http://"
            << host << ":" << port << std::endl;
  if (!server.listen(host, port)) throw IoError("cannot listen on " + host + ":" + std::to_string(port));
}

// Collects headline numbers from every result file in a directory.
void report(const Common& c, const std::string& in) {
  const fs::path dir = in.empty() ? fs::path(c.out) : fs::path(in);
  if (!fs::is_directory(dir)) throw IoError("no such directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  Json summary = Json::object();
  std::string md = "# steerlab results\n\n";
  std::string sweeps, evals, randoms;
  for (const auto& f : files) {
    const auto stem = f.stem().string();
    const auto j = read_json_file(f);
    if (stem.rfind("sweep_", 0) == 0) {
      summary["sweeps"][j["cwe"].get<std::string>()] = {{"baseline", j["baseline"]["secure_rate"]}, {"best", j["best"]}};
      sweeps += "| " + j["cwe"].get<std::string>() + " | " + pct(j["baseline"]["secure_rate"].get<double>()) + " | " +
                fmt_num(j["best"]["alpha"].get<double>(), 2) + " | " + pct(j["best"]["secure_rate"].get<double>()) + " |\n";
    } else if (stem == "transfer") {
      summary["transfer"] = {{"diagonal_mean", j["diagonal_mean"]}, {"offdiagonal_mean", j["offdiagonal_mean"]},
                             {"ratio", j.value("ratio", Json(nullptr))}};
      md += "Transfer matrix: diagonal " + pct(j["diagonal_mean"].get<double>()) + ", off-diagonal " +
            pct(j["offdiagonal_mean"].get<double>()) +
            (j.contains("ratio") ? ", ratio " + fmt_num(j["ratio"].get<double>(), 2) + "x" : std::string()) + "\n\n";
    } else if (stem.rfind("eval_", 0) == 0) {
      summary["evals"][j["condition"].get<std::string>()] = j["overall"];
      evals += "| " + j["condition"].get<std::string>() + " | " + j["strategy"].get<std::string>() + " | " +
               pct(j["overall"]["secure_rate"].get<double>()) + " | " + std::to_string(j["overall"]["n"].get<int>()) +
               " | " + std::to_string(j["excluded"].size()) + " |\n";
    } else if (stem.rfind("random_directions_", 0) == 0) {
      summary["random_directions"][j["cwe"].get<std::string>()] = {
          {"baseline", j["baseline"]["secure_rate"]}, {"learned", j["learned"]["secure_rate"]},
          {"control_mean", j["control_mean"]}, {"control_std", j["control_std"]}};
      randoms += "| " + j["cwe"].get<std::string>() + " | " + pct(j["baseline"]["secure_rate"].get<double>()) + " | " +
                 pct(j["learned"]["secure_rate"].get<double>()) + " | " + pct(j["control_mean"].get<double>()) + " |\n";
    } else if (stem == "latency") {
      summary["latency"] = j["arms"];
    }
  }
  if (!sweeps.empty()) md += "| CWE | baseline | best alpha | steered |\n|---|---|---|---|\n" + sweeps + "\n";
  if (!evals.empty()) md += "| condition | strategy | secure | n | excluded |\n|---|---|---|---|---|\n" + evals + "\n";
  if (!randoms.empty()) md += "| CWE | baseline | learned | random mean |\n|---|---|---|---|\n" + randoms + "\n";
  write_json_file(dir / "summary.json", summary);
  write_text_file(dir / "summary.md", md);
  std::cout << md << "  wrote " << (dir / "summary.json").string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"steerlab: probing, lens analysis and activation steering for secure code generation"};
  app.require_subcommand(1);
  Common c;
  std::function<void()> run;

  auto* corpus = app.add_subcommand("corpus", "prompt-pair corpus")->require_subcommand(1);
  auto* corpus_b = corpus->add_subcommand("build", "render pairs, folds and neutral prompts");
  add_base(corpus_b, c);
  add_cwe(corpus_b, c);
  corpus_b->callback([&] { run = [&, s = corpus_b] { apply_config(s, c); corpus_build(c); }; });

  std::string score_input;
  auto* score = app.add_subcommand("score", "vulnerability scorers")->require_subcommand(1);
  auto* score_r = score->add_subcommand("run", "score completions from a file");
  add_base(score_r, c);
  add_cwe(score_r, c);
  score_r->add_option("--input", score_input, "text file, or JSON array of strings / {prompt_id, text}")->required();
  score_r->add_option("--resamples", c.resamples)->capture_default_str();
  score_r->callback([&] { run = [&, s = score_r] { apply_config(s, c); score_run(c, score_input); }; });

  bool lobo = false, unified = false;
  auto* vectors = app.add_subcommand("vectors", "steering vectors")->require_subcommand(1);
  auto* vectors_f = vectors->add_subcommand("fit", "mean-difference vectors from the pair corpus");
  add_base(vectors_f, c);
  add_cwe(vectors_f, c);
  vectors_f->add_option("--layer", c.layer, "capture layer (default: last layer)");
  vectors_f->add_flag("--lobo", lobo, "also write one vector per LOBO fold");
  vectors_f->add_flag("--unified", unified, "also write the pooled unified vector");
  vectors_f->callback([&] { run = [&, s = vectors_f] { apply_config(s, c); vectors_fit(c, lobo, unified); }; });

  std::string family = "routing3", cv = "lobo";
  std::size_t max_pairs = 0;
  bool layer_sweep_flag = false;
  auto* probe = app.add_subcommand("probe", "linear probes")->require_subcommand(1);
  auto* probe_t = probe->add_subcommand("train", "train a probe on last-token activations");
  add_base(probe_t, c);
  add_cwe(probe_t, c);
  add_generation(probe_t, c);
  probe_t->add_option("--family", family, "context | behavioral | routing3 | routing_binary")->capture_default_str();
  probe_t->add_option("--cv", cv, "lobo | none")->capture_default_str();
  probe_t->add_option("--max-pairs", max_pairs, "pairs per CWE (0 = all)");
  probe_t->add_flag("--sweep", layer_sweep_flag, "also report cross-validated accuracy at every layer");
  probe_t->callback([&] {
    run = [&, s = probe_t] {
      apply_config(s, c);
      probe_train(c, family, cv, max_pairs, layer_sweep_flag);
    };
  });

  std::string lens_kind = "logit", token, variant = "insecure", text, tuned_path;
  std::size_t max_prompts = 0;
  bool train_tuned = false;
  int epochs = 40;
  double threshold = 0.01;
  auto* lens = app.add_subcommand("lens", "logit and tuned lens")->require_subcommand(1);
  auto* lens_t = lens->add_subcommand("trace", "per-layer probability of the secure token");
  add_base(lens_t, c);
  add_cwe(lens_t, c);
  lens_t->add_option("--kind", lens_kind, "logit | tuned")->capture_default_str();
  lens_t->add_option("--token", token, "secure API string; its first token is tracked");
  lens_t->add_option("--variant", variant, "secure | insecure | neutral")->capture_default_str();
  lens_t->add_option("--text", text, "trace a single custom prompt");
  lens_t->add_option("--max-prompts", max_prompts);
  lens_t->add_option("--tuned-lens", tuned_path, "trained tuned lens JSON");
  lens_t->add_flag("--train-tuned", train_tuned, "train a tuned lens first");
  lens_t->add_option("--epochs", epochs)->capture_default_str();
  lens_t->add_option("--threshold", threshold, "emergence threshold")->capture_default_str();
  lens_t->callback([&] {
    run = [&, s = lens_t] {
      apply_config(s, c);
      lens_trace(c, lens_kind, token, variant, text, max_prompts, tuned_path, train_tuned, epochs, threshold);
    };
  });

  std::size_t pair_index = 0;
  std::string src, dst, site = "layer_output";
  bool heads = false;
  auto* patch = app.add_subcommand("patch", "activation patching")->require_subcommand(1);
  auto* patch_r = patch->add_subcommand("run", "patch secure-prompt activations into the insecure run, layer by layer");
  add_base(patch_r, c);
  add_cwe(patch_r, c);
  patch_r->add_option("--pair", pair_index, "pair index in the corpus grid")->capture_default_str();
  patch_r->add_option("--src", src, "source prompt text (default: the pair's secure prompt)");
  patch_r->add_option("--dst", dst, "destination prompt text (default: the pair's insecure prompt)");
  patch_r->add_option("--token", token, "target API string");
  patch_r->add_option("--site", site, "layer_output | layer_input")->capture_default_str();
  patch_r->add_flag("--heads", heads, "also patch each attention head");
  patch_r->callback([&] { run = [&, s = patch_r] { apply_config(s, c); patch_run(c, pair_index, src, dst, token, site, heads); }; });

  std::size_t ablate_pairs = 7;
  auto* abl = app.add_subcommand("ablate", "mean-embedding ablation of the directive tokens");
  add_base(abl, c);
  add_cwe(abl, c);
  abl->add_option("--max-pairs", ablate_pairs)->capture_default_str();
  abl->add_option("--token", token, "target API string");
  abl->add_option("--resamples", c.resamples)->capture_default_str();
  abl->callback([&] { run = [&, s = abl] { apply_config(s, c); ablate(c, ablate_pairs, token); }; });

  std::string vectors_dir, sweeps_dir;
  double alpha = 4.0, random_alpha = 3.5;
  int n_random = 10;
  std::size_t items_per_cwe = 15;
  auto* steer = app.add_subcommand("steer", "steering experiments")->require_subcommand(1);
  auto* steer_s = steer->add_subcommand("sweep", "LOBO alpha sweep");
  add_base(steer_s, c);
  add_cwe(steer_s, c);
  add_generation(steer_s, c);
  steer_s->add_option("--alpha-grid", c.alpha_grid, "comma-separated alphas (0 is always included)");
  steer_s->callback([&] { run = [&, s = steer_s] { apply_config(s, c); steer_sweep(c); }; });
  auto* steer_rd = steer->add_subcommand("random", "norm-matched random-direction controls");
  add_base(steer_rd, c);
  add_cwe(steer_rd, c);
  add_generation(steer_rd, c);
  steer_rd->add_option("--vectors", vectors_dir, "directory of fitted vectors (default: OUT/vectors)");
  steer_rd->add_option("--alpha", random_alpha)->capture_default_str();
  steer_rd->add_option("-n,--directions", n_random)->capture_default_str();
  steer_rd->add_option("--max-prompts", items_per_cwe)->capture_default_str();
  steer_rd->callback([&] {
    run = [&, s = steer_rd] {
      apply_config(s, c);
      steer_random(c, vectors_dir, random_alpha, n_random, items_per_cwe);
    };
  });

  auto* tr = app.add_subcommand("transfer", "6x6 cross-CWE transfer matrix");
  add_base(tr, c);
  add_generation(tr, c);
  tr->add_option("--vectors", vectors_dir, "directory of fitted vectors (default: OUT/vectors)");
  tr->add_option("--sweeps", sweeps_dir, "directory with sweep_<CWE>.json for per-vector alphas (default: OUT)");
  tr->add_option("--alpha", alpha, "alpha for vectors without a sweep")->capture_default_str();
  tr->add_option("--max-prompts", items_per_cwe, "adversarial prompts per CWE")->capture_default_str();
  tr->callback([&] {
    run = [&, s = tr] {
      apply_config(s, c);
      transfer(c, vectors_dir, sweeps_dir, alpha, items_per_cwe);
    };
  });

  RouteFlags rf;
  std::size_t per_cwe = 0;
  auto add_route_flags = [&](CLI::App* s) {
    s->add_option("--strategy", rf.strategy, "oracle | three_way_probe | two_tier_binary | single_vector | none")
        ->capture_default_str();
    s->add_option("--vectors", rf.vectors, "directory of fitted vectors (default: OUT/vectors)");
    s->add_option("--probe", rf.probe, "routing probe JSON (default: OUT/probes/<family>.json)");
    s->add_option("--single-vector", rf.single_vector, "vector for single_vector routing");
    s->add_option("--alpha", rf.alpha, "alpha for every vector (default: sweep optimum, else 4)");
    s->add_option("--confidence-floor", rf.confidence_floor)->capture_default_str();
  };
  auto* route = app.add_subcommand("route", "probe-gated routing")->require_subcommand(1);
  auto* route_e = route->add_subcommand("eval", "end-to-end evaluation on neutral prompts");
  add_base(route_e, c);
  add_generation(route_e, c);
  add_route_flags(route_e);
  route_e->add_option("--max-prompts", per_cwe, "neutral prompts per CWE (0 = all)");
  route_e->callback([&] { run = [&, s = route_e] { apply_config(s, c); route_eval(c, rf, per_cwe); }; });

  std::vector<std::string> methods{"per_step_callback", "persistent_forward_replacement", "weight_fold_in"};
  int tokens = 64, reps = 5, warmup = 1;
  std::string clock = "wall", vector_path;
  std::size_t bench_prompts = 4;
  double bench_alpha = 4.0;
  auto* bench = app.add_subcommand("bench", "benchmarks")->require_subcommand(1);
  auto* bench_l = bench->add_subcommand("latency", "equal-length steering overhead");
  add_base(bench_l, c);
  bench_l->add_option("--layer", c.layer);
  bench_l->add_option("--methods", methods)->delimiter(',')->capture_default_str();
  bench_l->add_option("--tokens", tokens, "tokens forced per generation")->capture_default_str();
  bench_l->add_option("--reps", reps)->capture_default_str();
  bench_l->add_option("--warmup", warmup)->capture_default_str();
  bench_l->add_option("--clock", clock, "wall | thread_cpu")->capture_default_str();
  bench_l->add_option("--prompts", bench_prompts)->capture_default_str();
  bench_l->add_option("--vector", vector_path, "steering vector JSON (default: random, norm 8)");
  bench_l->add_option("--alpha", bench_alpha)->capture_default_str();
  bench_l->callback([&] {
    run = [&, s = bench_l] {
      apply_config(s, c);
      bench_latency(c, methods, tokens, reps, warmup, clock, bench_prompts, vector_path, bench_alpha);
    };
  });

  std::string host = "127.0.0.1";
  int port = 8080;
  auto* srv = app.add_subcommand("serve", "HTTP completion server (GET /health, POST /v1/completions)");
  srv->add_option("--backend", c.backend)->capture_default_str();
  srv->add_option("--out", c.out, "where to look for vectors and probes")->capture_default_str();
  srv->add_option("--config", c.config, "serve config JSON (overrides the flags below)");
  srv->add_option("--method", c.method)->capture_default_str();
  add_route_flags(srv);
  srv->add_option("--host", host)->capture_default_str();
  srv->add_option("--port", port)->capture_default_str();
  srv->callback([&] { run = [&] { serve(c, rf, host, port); }; });

  std::string report_in;
  auto* rep = app.add_subcommand("report", "summarize result files in a directory");
  add_base(rep, c);
  rep->add_option("--in", report_in, "result directory (default: OUT)");
  rep->callback([&] { run = [&, s = rep] { apply_config(s, c); report(c, report_in); }; });

  CLI11_PARSE(app, argc, argv);
  try {
    if (run) run();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
