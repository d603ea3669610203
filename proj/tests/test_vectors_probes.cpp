#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "steerlab/probes.hpp"
#include "steerlab/vectors.hpp"

using namespace steerlab;

namespace {

ActivationRecord rec(std::vector<float> v, int layer = 0, int scenario = -1, Variant variant = Variant::Secure) {
  ActivationRecord r;
  r.vector = std::move(v);
  r.layer = layer;
  r.scenario_id = scenario;
  r.variant = variant;
  return r;
}

std::vector<ActivationRecord> random_set(std::mt19937_64& rng, int n, int d, double shift) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  std::vector<ActivationRecord> out;
  for (int i = 0; i < n; ++i) {
    std::vector<float> v(d);
    for (auto& x : v) x = g(rng) + static_cast<float>(shift);
    out.push_back(rec(v));
  }
  return out;
}

// Two Gaussian classes per scenario, centers `sep` apart along a random axis.
ActivationDataset clusters(int scenarios, int per_class, int d, double sep, std::uint64_t seed, int layer = 0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 1.0f);
  std::vector<float> axis(d);
  double n = 0;
  for (auto& a : axis) n += (a = g(rng)) * a;
  for (auto& a : axis) a /= static_cast<float>(std::sqrt(n));
  ActivationDataset ds;
  for (int s = 0; s < scenarios; ++s) {
    for (int c = 0; c < 2; ++c) {
      for (int i = 0; i < per_class; ++i) {
        std::vector<float> v(d);
        for (int k = 0; k < d; ++k) v[k] = g(rng) + (c == 0 ? 0.5f : -0.5f) * static_cast<float>(sep) * axis[k];
        auto r = rec(v, layer, s, c == 0 ? Variant::Secure : Variant::Insecure);
        r.prompt_id = "s" + std::to_string(s) + "/c" + std::to_string(c) + "/" + std::to_string(i);
        ds.records.push_back(r);
      }
    }
  }
  return ds;
}

}  // namespace

TEST(Vectors, HandComputedMeanDifference) {
  const auto v = mean_difference({rec({1, 0}), rec({3, 0})}, {rec({0, 1}), rec({0, 3})});
  EXPECT_EQ(v.d, (std::vector<double>{2, -2}));
  EXPECT_NEAR(v.norm, 2 * std::sqrt(2.0), 1e-15);
  const auto z = mean_difference({rec({1, 2}), rec({3, 4})}, {rec({1, 2}), rec({3, 4})});
  EXPECT_EQ(z.norm, 0.0);
}

TEST(Vectors, MeanDifferenceMatchesBruteForceOn100Datasets) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    const int d = 1 + trial % 37, ns = 1 + trial % 13, ni = 2 + trial % 7;
    const auto s = random_set(rng, ns, d, 0.3), i = random_set(rng, ni, d, -0.2);
    const auto v = mean_difference(s, i);
    double norm2 = 0;
    for (int k = 0; k < d; ++k) {
      long double a = 0, b = 0;
      for (const auto& r : s) a += r.vector[k];
      for (const auto& r : i) b += r.vector[k];
      const long double expect = a / ns - b / ni;
      EXPECT_NEAR(v.d[k], static_cast<double>(expect), 1e-9 * std::max(1.0L, std::fabs(expect)));
      norm2 += static_cast<double>(expect * expect);
    }
    EXPECT_NEAR(v.norm, std::sqrt(norm2), 1e-9 * std::max(1.0, std::sqrt(norm2)));
    // Antisymmetry is exact.
    const auto back = mean_difference(i, s);
    for (int k = 0; k < d; ++k) EXPECT_EQ(back.d[k], -v.d[k]);
    // Scale equivariance.
    for (float c : {2.0f, -3.0f}) {
      auto sc = s, ic = i;
      for (auto& r : sc) for (auto& x : r.vector) x *= c;
      for (auto& r : ic) for (auto& x : r.vector) x *= c;
      const auto vc = mean_difference(sc, ic);
      for (int k = 0; k < d; ++k) EXPECT_NEAR(vc.d[k], c * v.d[k], 1e-6 * std::max(1.0, std::abs(c * v.d[k])));
      EXPECT_NEAR(vc.norm, std::abs(c) * v.norm, 1e-6 * std::max(1.0, v.norm));
    }
  }
}

TEST(Vectors, MixedInputsAreRejected) {
  EXPECT_THROW(mean_difference({rec({1, 0}, 0)}, {rec({1, 0}, 1)}), ValidationError);
  EXPECT_THROW(mean_difference({rec({1, 0})}, {rec({1, 0, 0})}), ValidationError);
  EXPECT_THROW(mean_difference({}, {rec({1})}), ValidationError);
}

TEST(Vectors, UnifiedPoolingEqualsMeanOfDirections) {
  std::mt19937_64 rng(5);
  std::vector<ActivationRecord> pooled_s, pooled_i;
  std::vector<double> avg(8, 0.0);
  for (int c = 0; c < 3; ++c) {
    const auto s = random_set(rng, 20, 8, c), i = random_set(rng, 20, 8, -c);
    const auto v = mean_difference(s, i);
    for (int k = 0; k < 8; ++k) avg[k] += v.d[k] / 3;
    pooled_s.insert(pooled_s.end(), s.begin(), s.end());
    pooled_i.insert(pooled_i.end(), i.begin(), i.end());
  }
  const auto u = mean_difference(pooled_s, pooled_i, "unified");
  for (int k = 0; k < 8; ++k) EXPECT_NEAR(u.d[k], avg[k], 1e-9);
}

TEST(Vectors, RandomControls) {
  const auto a = random_controls(7.77, 64, 10, 3);
  ASSERT_EQ(a.size(), 10u);
  for (const auto& v : a) {
    EXPECT_NEAR(l2_norm(v.d), 7.77, 7.77e-6);
    EXPECT_NEAR(v.norm, 7.77, 7.77e-6);
  }
  const auto b = random_controls(7.77, 64, 10, 3);
  for (int k = 0; k < 10; ++k) EXPECT_EQ(a[k].d, b[k].d);
  EXPECT_NE(random_controls(7.77, 64, 10, 4)[0].d, a[0].d);
  EXPECT_EQ(random_controls(1.0, 8).size(), 10u);
  EXPECT_THROW(random_controls(0.0, 8), ValidationError);
}

TEST(Vectors, StackAndGeometry) {
  SteeringVector e1{"CWE-787", 3, {1, 0, 0}, 1.0, {}, "", 1.0};
  SteeringVector e2{"CWE-119", 3, {0, 1, 0}, 1.0, {}, "", 1.0};
  EXPECT_EQ(stack({{e1, 2.5}}), (std::vector<double>{2.5, 0, 0}));
  EXPECT_NEAR(l2_norm(stack({{e1, 1.0}, {e2, 1.0}})), std::sqrt(2.0), 1e-15);
  SteeringVector e3{"CWE-134", 3, {0.3, -0.2, 0.9}, 0, {}, "", 1.0};
  const auto abc = stack({{e1, 0.7}, {e2, 1.3}, {e3, 2.1}});
  const auto cba = stack({{e3, 2.1}, {e2, 1.3}, {e1, 0.7}});
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(abc[k], cba[k], 1e-15);
  SteeringVector other_layer = e2;
  other_layer.layer = 2;
  EXPECT_THROW(stack({{e1, 1.0}, {other_layer, 1.0}}), ValidationError);

  SteeringVector a{"x", 0, {1, 1, 0, 0}, 0, {}, "", 1.0}, b{"y", 0, {1, 0, 0, 0}, 0, {}, "", 1.0};
  EXPECT_NEAR(*geometry(a, b).cosine, 0.7071067811865476, 1e-6);
  EXPECT_NEAR(*geometry(a, a).cosine, 1.0, 1e-15);
  SteeringVector zero{"z", 0, {0, 0, 0, 0}, 0, {}, "", 1.0};
  EXPECT_FALSE(geometry(a, zero).cosine.has_value());
  SteeringVector reported{"CWE-787", 31, {7.77}, 7.77, {}, "", 1.0};
  EXPECT_NEAR(magnitude(reported, 4.0), 31.1, 0.05);
  EXPECT_NEAR((SteeringConfig{reported, 4.0}.effective_magnitude()), 31.08, 1e-12);
}

TEST(Vectors, LeakageCheckAndFileRoundTrip) {
  SteeringVector v{"CWE-787", 3, {0.1, -1.0 / 3.0, 1e-20}, 0, {0, 1, 2, 4, 5, 6}, "toy", 4.0};
  v = with_norm_recomputed(v);
  EXPECT_NO_THROW(check_no_leakage(v, 3));
  EXPECT_THROW(check_no_leakage(v, 2), LeakageError);
  const auto back = vector_from_json(Json::parse(dump_compact(to_json(v))));
  EXPECT_EQ(back.d, v.d);
  EXPECT_EQ(back.training_fold_ids, v.training_fold_ids);
  EXPECT_EQ(back.norm, v.norm);
  // float32 values survive exactly.
  const float f = 0.1f;
  SteeringVector fv{"x", 0, {static_cast<double>(f)}, 0, {}, "", 1.0};
  EXPECT_EQ(static_cast<float>(vector_from_json(to_json(with_norm_recomputed(fv))).d[0]), f);
}

TEST(Probes, SeparableClustersReachPerfectAccuracy) {
  const auto ds = clusters(7, 15, 16, 10.0, 1);
  const auto p = train_probe(ds, 0, ProbeFamily::Context, CvMode::Lobo);
  EXPECT_EQ(p.cv_accuracy, 1.0);
  // Nearest-centroid oracle on the same folds.
  int correct = 0;
  for (int held = 0; held < 7; ++held) {
    std::vector<double> c0(16), c1(16);
    int n0 = 0, n1 = 0;
    for (const auto& r : ds.records) {
      if (r.scenario_id == held) continue;
      auto& c = r.variant == Variant::Secure ? c0 : c1;
      (r.variant == Variant::Secure ? n0 : n1)++;
      for (int k = 0; k < 16; ++k) c[k] += r.vector[k];
    }
    for (int k = 0; k < 16; ++k) c0[k] /= n0, c1[k] /= n1;
    for (const auto& r : ds.records) {
      if (r.scenario_id != held) continue;
      double d0 = 0, d1 = 0;
      for (int k = 0; k < 16; ++k) d0 += std::pow(r.vector[k] - c0[k], 2), d1 += std::pow(r.vector[k] - c1[k], 2);
      correct += (d0 < d1) == (r.variant == Variant::Secure);
    }
  }
  EXPECT_EQ(correct, static_cast<int>(ds.records.size()));
}

TEST(Probes, ShuffledLabelsGiveChance) {
  // Permuted within each scenario so every fold stays balanced.
  auto ds = clusters(7, 15, 16, 10.0, 2);
  std::mt19937_64 rng(7);
  for (int s = 0; s < 7; ++s) {
    std::vector<ActivationRecord*> group;
    for (auto& r : ds.records) {
      if (r.scenario_id == s) group.push_back(&r);
    }
    std::vector<Variant> labels;
    for (const auto* r : group) labels.push_back(r->variant);
    std::shuffle(labels.begin(), labels.end(), rng);
    for (std::size_t i = 0; i < group.size(); ++i) group[i]->variant = labels[i];
  }
  const auto p = train_probe(ds, 0, ProbeFamily::Behavioral, CvMode::Lobo);
  EXPECT_NEAR(p.cv_accuracy, 0.5, 0.1);
}

TEST(Probes, ConvergesToTolerance) {
  const auto ds = clusters(3, 20, 6, 3.0, 9);
  const auto p = train_probe(ds, 0, ProbeFamily::Context, CvMode::None);
  // Independent gradient of 0.5|W|^2 + sum CE at the solution.
  std::vector<std::vector<double>> gw(2, std::vector<double>(6));
  std::vector<double> gb(2);
  for (int k = 0; k < 2; ++k) gw[k] = p.weights[k];
  for (const auto& r : ds.records) {
    const auto pr = predict(p, r.vector);
    const int y = r.variant == Variant::Insecure ? 0 : 1;  // classes sorted: insecure, secure
    for (int k = 0; k < 2; ++k) {
      const double g = pr.probabilities[k] - (k == y);
      for (int i = 0; i < 6; ++i) gw[k][i] += g * r.vector[i];
      gb[k] += g;
    }
  }
  ASSERT_EQ(p.classes, (std::vector<std::string>{"insecure", "secure"}));
  for (int k = 0; k < 2; ++k) {
    for (double g : gw[k]) EXPECT_LT(std::abs(g), 1e-5);
    EXPECT_LT(std::abs(gb[k]), 1e-5);
  }
}

TEST(Probes, ErrorsAndPrediction) {
  auto ds = clusters(2, 5, 4, 5.0, 3);
  auto single = ds;
  for (auto& r : single.records) r.variant = Variant::Secure;
  EXPECT_THROW(train_probe(single, 0, ProbeFamily::Context, CvMode::None), ValidationError);
  EXPECT_THROW(train_probe(ds, 1, ProbeFamily::Context, CvMode::None), ValidationError);
  auto ragged = ds;
  ragged.records[0].vector.push_back(1.0f);
  EXPECT_THROW(train_probe(ragged, 0, ProbeFamily::Context, CvMode::None), ValidationError);

  const auto p = train_probe(ds, 0, ProbeFamily::Context, CvMode::None);
  std::vector<float> centroid(4, 0.0f);
  int n = 0;
  for (const auto& r : ds.records) {
    if (r.variant != Variant::Secure) continue;
    for (int k = 0; k < 4; ++k) centroid[k] += r.vector[k];
    ++n;
  }
  for (auto& c : centroid) c /= n;
  const auto pr = predict(p, centroid);
  EXPECT_EQ(pr.label, "secure");
  EXPECT_GT(pr.probability, 0.5);
  EXPECT_THROW(predict(p, std::vector<float>(3)), ValidationError);

  ProbeModel zero{0, ProbeFamily::Routing3, {"a", "b", "c"}, std::vector<std::vector<double>>(3, std::vector<double>(4)),
                  {0, 0, 0}, 0, ""};
  for (double q : predict(zero, std::vector<float>{1, 2, 3, 4}).probabilities) EXPECT_NEAR(q, 1.0 / 3, 1e-15);
}

TEST(Probes, InjectionShiftsLogitLinearly) {
  const auto ds = clusters(7, 15, 16, 4.0, 4);
  const auto p = train_probe(ds, 0, ProbeFamily::Behavioral, CvMode::None);
  std::vector<ActivationRecord> s, i;
  for (const auto& r : ds.records) (r.variant == Variant::Secure ? s : i).push_back(r);
  const auto d = mean_difference(s, i);
  const int secure = 1;
  const auto& x = ds.records[3].vector;
  const double base = probe_logits(p, x)[secure];
  double prev = -1e300;
  for (double alpha : {0.0, 0.5, 1.0, 2.0, 4.0}) {
    std::vector<float> moved(16);
    for (int k = 0; k < 16; ++k) moved[k] = static_cast<float>(x[k] + alpha * d.d[k]);
    // Exact identity in real arithmetic on the double-precision input.
    double exact = p.bias[secure];
    for (int k = 0; k < 16; ++k) exact += p.weights[secure][k] * (x[k] + alpha * d.d[k]);
    EXPECT_NEAR(exact - base, logit_shift(p, secure, d.d, alpha), 1e-9);
    EXPECT_NEAR(probe_logits(p, moved)[secure] - base, logit_shift(p, secure, d.d, alpha), 1e-4);
    EXPECT_GT(exact, prev);
    prev = exact;
  }
}

TEST(Probes, PermutationInvarianceAndDeterminism) {
  auto ds = clusters(7, 10, 8, 2.0, 5);
  const auto a = train_probe(ds, 0, ProbeFamily::Context, CvMode::Lobo);
  std::mt19937_64 rng(1);
  std::shuffle(ds.records.begin(), ds.records.end(), rng);
  const auto b = train_probe(ds, 0, ProbeFamily::Context, CvMode::Lobo);
  EXPECT_EQ(a.cv_accuracy, b.cv_accuracy);
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_EQ(a.bias, b.bias);
}

TEST(Probes, LayerSweepStepsUpAndReportsGaps) {
  std::map<int, ActivationDataset> by_layer;
  for (int l = 0; l < 5; ++l) {
    if (l == 1) continue;
    auto ds = clusters(7, 8, 8, l >= 3 ? 10.0 : 0.0, 100 + l, l);
    by_layer[l] = ds;
  }
  const auto curve = layer_sweep(by_layer, ProbeFamily::Context, 5);
  ASSERT_EQ(curve.size(), 5u);
  EXPECT_FALSE(curve[1].accuracy.has_value());
  EXPECT_LT(*curve[0].accuracy, 0.75);
  EXPECT_LT(*curve[2].accuracy, 0.75);
  EXPECT_EQ(*curve[3].accuracy, 1.0);
  EXPECT_EQ(*curve[4].accuracy, 1.0);

  std::map<int, ActivationDataset> flat;
  for (int l = 0; l < 3; ++l) {
    auto ds = clusters(7, 8, 8, 6.0, 77);
    for (auto& r : ds.records) r.layer = l;
    flat[l] = ds;
  }
  const auto fc = layer_sweep(flat, ProbeFamily::Context, 3);
  EXPECT_EQ(*fc[0].accuracy, *fc[1].accuracy);
  EXPECT_EQ(*fc[1].accuracy, *fc[2].accuracy);
}

TEST(Probes, RoutingClassMapAndFileRoundTrip) {
  ActivationDataset ds;
  ds.label_field = LabelField::Cwe;
  ds.class_map = {{"CWE-787", "buffer"}, {"CWE-119", "buffer"}, {"CWE-134", "format"}};
  std::mt19937_64 rng(8);
  std::normal_distribution<float> g;
  const Cwe cwes[] = {Cwe::Cwe787, Cwe::Cwe119, Cwe::Cwe134};
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < 20; ++i) {
      auto r = rec({g(rng) + (c == 2 ? 6.0f : 0.0f), g(rng), g(rng)}, 2, i % 7);
      r.cwe = cwes[c];
      ds.records.push_back(r);
    }
  }
  EXPECT_EQ(ds.balance().at("buffer"), 40);
  const auto p = train_probe(ds, 2, ProbeFamily::RoutingBinary, CvMode::Lobo);
  EXPECT_EQ(p.classes, (std::vector<std::string>{"buffer", "format"}));
  EXPECT_GT(p.cv_accuracy, 0.9);
  const auto back = probe_from_json(Json::parse(dump_compact(to_json(p))));
  EXPECT_EQ(back.weights, p.weights);
  EXPECT_EQ(back.family, ProbeFamily::RoutingBinary);
}
