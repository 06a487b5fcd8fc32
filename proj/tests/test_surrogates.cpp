#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "synthetic_kdd.hpp"
#include "xids/iforest.hpp"
#include "xids/surrogates.hpp"

using namespace xids;

namespace {

FeatureVector fv(std::vector<double> v, int label = 0) {
  FeatureVector f;
  f.values = std::move(v);
  f.label = label;
  return f;
}

FeatureSchema numeric_schema(const std::vector<std::string>& names) {
  std::vector<Column> cols;
  for (const auto& n : names) cols.push_back({n, ColumnKind::numeric, 0, {}, 0, 1});
  return FeatureSchema(cols);
}

}  // namespace

// ---------------------------------------------------------------------------
// Rules

TEST(Rules, BuiltinClausesVerbatim) {
  const auto r = builtin_paper_rules();
  ASSERT_EQ(r.clauses.size(), 5u);
  EXPECT_EQ(r.to_text(),
            "wrong_fragment > 0.00\n"
            "src_bytes <= 0.00 AND dst_host_diff_srv_rate > 0.01\n"
            "dst_host_count <= 0.04 AND protocol_type_icmp\n"
            "num_compromised > 0.00 AND dst_host_same_srv_rate > 0.98\n"
            "srv_count > 0.00 AND protocol_type_icmp AND service_urp_i not\n");
  EXPECT_EQ(r.clauses[0].literals[0], (Literal{"wrong_fragment", RuleOp::gt, 0.0}));
  EXPECT_EQ(r.clauses[2].literals[1].op, RuleOp::is);
  EXPECT_EQ(r.clauses[4].literals[2], (Literal{"service_urp_i", RuleOp::is_not, 0}));
}

TEST(Rules, TextAndJsonRoundTrip) {
  const auto r = builtin_paper_rules();
  EXPECT_EQ(RuleSet::parse_text(r.to_text()), r);
  EXPECT_EQ(RuleSet::from_json(nlohmann::json::parse(r.to_json().dump())), r);
  EXPECT_THROW(RuleSet::parse_text("a b c"), Error);
  EXPECT_THROW(RuleSet::parse_text("x > abc"), Error);
}

TEST(Rules, EvaluateByHand) {
  const auto schema = numeric_schema({"x1", "x2"});
  const auto rules = RuleSet::parse_text("x1 > 0.50\nx2 <= 0.10 AND x1 > 0.20\n");
  const std::vector<FeatureVector> data{fv({0.6, 0.9}, 1), fv({0.3, 0.05}, 1), fv({0.3, 0.5}, 0), fv({0.1, 0.0}, 0),
                                        fv({0.9, 0.9}, 0)};
  const auto ev = eval_ruleset(rules, schema, data);
  EXPECT_EQ(ev.tp, 2u);
  EXPECT_EQ(ev.tn, 2u);
  EXPECT_EQ(ev.fp, 1u);
  EXPECT_EQ(ev.fn, 0u);
  EXPECT_DOUBLE_EQ(ev.accuracy, 0.8);
  // order independence
  auto rev = data;
  std::reverse(rev.begin(), rev.end());
  EXPECT_DOUBLE_EQ(eval_ruleset(rules, schema, rev).accuracy, 0.8);
}

TEST(Rules, EmptyRuleSetPredictsNormal) {
  const auto schema = numeric_schema({"x1"});
  const std::vector<FeatureVector> data{fv({0.1}, 0), fv({0.2}, 1), fv({0.3}, 0), fv({0.4}, 0)};
  const auto ev = eval_ruleset(RuleSet{}, schema, data);
  EXPECT_DOUBLE_EQ(ev.accuracy, 0.75);
  EXPECT_EQ(ev.tp + ev.fp, 0u);
}

TEST(Rules, UnknownColumnNamed) {
  const auto schema = numeric_schema({"x1"});
  try {
    (void)eval_ruleset(RuleSet::parse_text("nope > 0.1"), schema, std::vector<FeatureVector>{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::not_found);
    EXPECT_NE(std::string(e.what()).find("nope"), std::string::npos);
  }
}

TEST(Rules, AbsentOneHotCategoryIsZero) {
  xids::testing::SyntheticKdd gen(1);
  const auto recs = gen.generate({50, 10, 10, 10, 10});
  const auto schema = fit_schema(recs);
  ASSERT_FALSE(schema.find("service_urp_i"));
  const auto data = encode_all(recs, schema);
  // "service_urp_i not" always holds; "service_urp_i" never does.
  const auto always = eval_ruleset(RuleSet::parse_text("service_urp_i not"), schema, data);
  EXPECT_EQ(always.tp + always.fp, data.size());
  const auto never = eval_ruleset(RuleSet::parse_text("service_urp_i"), schema, data);
  EXPECT_EQ(never.tp + never.fp, 0u);
  EXPECT_NO_THROW(eval_ruleset(builtin_paper_rules(), schema, data));
}

// ---------------------------------------------------------------------------
// DNF learner

TEST(LearnDnf, SeparableOneDimensional) {
  std::vector<FeatureVector> data;
  for (int i = 0; i < 50; ++i) {
    data.push_back(fv({0.4 * i / 49.0}, 0));
    data.push_back(fv({0.6 + 0.4 * i / 49.0}, 1));
  }
  const auto rules = learn_dnf(data, {"x1"});
  ASSERT_EQ(rules.clauses.size(), 1u);
  ASSERT_EQ(rules.clauses[0].literals.size(), 1u);
  const auto& lit = rules.clauses[0].literals[0];
  EXPECT_EQ(lit.op, RuleOp::gt);
  EXPECT_GE(lit.threshold, 0.4);
  EXPECT_LT(lit.threshold, 0.6);
  EXPECT_DOUBLE_EQ(eval_ruleset(rules, numeric_schema({"x1"}), data).accuracy, 1.0);
}

TEST(LearnDnf, IndependentLabelsGiveAtMostOneClause) {
  detail::SplitMix64 rng(3);
  std::vector<FeatureVector> data;
  for (int i = 0; i < 400; ++i)
    data.push_back(fv({detail::uniform01(rng), detail::uniform01(rng)}, detail::uniform01(rng) < 0.3));
  const auto rules = learn_dnf(data, {"a", "b"});
  EXPECT_LE(rules.clauses.size(), 1u);
  const double prior = 1.0 - static_cast<double>(std::count_if(data.begin(), data.end(),
                                                              [](const FeatureVector& v) { return v.label == 1; })) /
                                 400.0;
  EXPECT_NEAR(eval_ruleset(rules, numeric_schema({"a", "b"}), data).accuracy, prior, 0.05);
}

TEST(LearnDnf, SingleClassRejected) {
  const std::vector<FeatureVector> data{fv({0.1}, 1), fv({0.2}, 1)};
  EXPECT_THROW(learn_dnf(data, {"x"}), Error);
}

TEST(LearnDnf, MonotoneInMaxClausesOnSyntheticTraffic) {
  xids::testing::SyntheticKdd gen(9);
  const auto recs = gen.generate({});
  const auto schema = fit_schema(recs);
  const auto data = encode_all(recs, schema);
  double prev = 0;
  for (std::size_t k = 0; k <= 5; ++k) {
    DnfParams p;
    p.max_clauses = k;
    const auto rules = learn_dnf(data, schema.names(), p);
    EXPECT_LE(rules.clauses.size(), k);
    for (const auto& c : rules.clauses) EXPECT_LE(c.literals.size(), p.max_literals);
    const double acc = eval_ruleset(rules, schema, data).accuracy;
    EXPECT_GE(acc, prev) << k;
    prev = acc;
  }
  EXPECT_GE(prev, 0.9);
}

TEST(LearnDnf, Deterministic) {
  xids::testing::SyntheticKdd gen(10);
  const auto recs = gen.generate({200, 50, 50, 50, 50});
  const auto schema = fit_schema(recs);
  const auto data = encode_all(recs, schema);
  EXPECT_EQ(learn_dnf(data, schema.names()), learn_dnf(data, schema.names()));
}

// ---------------------------------------------------------------------------
// LIME

TEST(Lime, RecoversSingleLinearColumn) {
  auto f = [](Row x) { return 0.2 + 0.7 * x[2]; };
  const std::vector<double> x{0.5, 0.5, 0.5, 0.5, 0.5, 0.5};
  LimeParams p;
  p.n_perturb = 2000;
  p.k = 3;
  p.seed = 4;
  const auto s = lime_explain(f, x, p);
  ASSERT_FALSE(s.weights.empty());
  EXPECT_EQ(s.weights[0].first, 2u);
  EXPECT_NEAR(s.weights[0].second, 0.7, 1e-9);
  for (std::size_t i = 1; i < s.weights.size(); ++i) EXPECT_NEAR(s.weights[i].second, 0.0, 1e-9);
  EXPECT_GE(s.r2, 0.99);
  EXPECT_LE(s.weights.size(), p.k);
}

TEST(Lime, LinearScorerFidelity) {
  detail::SplitMix64 rng(6);
  for (int t = 0; t < 5; ++t) {
    const std::size_t m = 8;
    std::vector<double> w(m);
    for (auto& v : w) v = 2 * detail::uniform01(rng) - 1;
    auto f = [&](Row x) {
      double s = 0;
      for (std::size_t i = 0; i < m; ++i) s += w[i] * x[i];
      return s;
    };
    std::vector<double> x(m);
    for (auto& v : x) v = detail::uniform01(rng);
    LimeParams p;
    p.n_perturb = 1000;
    p.k = m;
    p.seed = static_cast<std::uint64_t>(t);
    const auto s = lime_explain(f, x, p);
    EXPECT_GE(s.r2, 0.99);
    for (std::size_t i = 0; i < m; ++i) EXPECT_NEAR(s.weight_of(i), w[i], 1e-8);
  }
}

TEST(Lime, LargeKernelWidthApproachesGlobalFit) {
  auto f = [](Row x) { return x[0] * x[0] + 0.5 * x[1]; };
  const std::vector<double> x{0.5, 0.5};
  LimeParams narrow, wide;
  narrow.n_perturb = wide.n_perturb = 4000;
  narrow.k = wide.k = 2;
  narrow.seed = wide.seed = 1;
  narrow.kernel_width = 0.05;
  wide.kernel_width = 1e6;
  const auto sw = lime_explain(f, x, wide);
  // Unweighted least squares on the same sample, computed independently.
  Eigen::MatrixXd a(4000, 3);
  Eigen::VectorXd b(4000);
  detail::SplitMix64 rng(1);
  for (int r = 0; r < 4000; ++r) {
    double z0 = 0.5, z1 = 0.5;
    if (r > 0) {
      z0 = std::clamp(0.5 + (2 * detail::uniform01(rng) - 1) * 0.25, 0.0, 1.0);
      z1 = std::clamp(0.5 + (2 * detail::uniform01(rng) - 1) * 0.25, 0.0, 1.0);
    }
    a.row(r) << 1, z0, z1;
    b(r) = z0 * z0 + 0.5 * z1;
  }
  const Eigen::VectorXd coef = a.colPivHouseholderQr().solve(b);
  EXPECT_NEAR(sw.weight_of(0), coef(1), 1e-6);
  EXPECT_NEAR(sw.weight_of(1), coef(2), 1e-6);
  EXPECT_NEAR(sw.intercept, coef(0), 1e-6);
  EXPECT_NO_THROW(lime_explain(f, x, narrow));
}

TEST(Lime, DeterministicAndValidated) {
  auto f = [](Row x) { return std::sin(x[0]) + x[1] * x[2]; };
  const std::vector<double> x{0.2, 0.4, 0.6};
  LimeParams p;
  p.n_perturb = 500;
  p.k = 2;
  p.seed = 77;
  const auto a = lime_explain(f, x, p), b = lime_explain(f, x, p);
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
  p.n_perturb = 10;
  EXPECT_THROW(lime_explain(f, x, p), Error);
  LimeParams q;
  q.n_perturb = 50;
  q.k = 1;
  q.noise = 0;
  EXPECT_THROW(lime_explain(f, x, q), Error);
}

TEST(Lime, OneHotGroupsResampledFromMarginals) {
  // Columns 1..3 form a one-hot group; perturbations must keep exactly one active.
  std::vector<std::vector<double>> seen;
  auto f = [&](Row x) {
    seen.emplace_back(x.begin(), x.end());
    return x[0] + x[2];
  };
  const std::vector<double> x{0.5, 1, 0, 0};
  LimeParams p;
  p.n_perturb = 300;
  p.k = 2;
  p.groups = {CategoricalGroup{{1, 2, 3}, {0.5, 0.5, 0.0}}};
  (void)lime_explain(f, x, p);
  std::size_t col3 = 0;
  for (const auto& z : seen) {
    ASSERT_DOUBLE_EQ(z[1] + z[2] + z[3], 1.0);
    col3 += z[3] == 1.0;
  }
  EXPECT_EQ(col3, 0u);
}

// ---------------------------------------------------------------------------
// Similar instances

TEST(SimilarInstances, ExactMatchFirstAndSorted) {
  const std::vector<FeatureVector> train{fv({0.9, 0.9}), fv({0.1, 0.2}), fv({0.5, 0.5}), fv({0.12, 0.2})};
  const std::vector<double> x{0.1, 0.2};
  const auto set = similar_instances(x, train, 3);
  ASSERT_EQ(set.prototypes.size(), 3u);
  EXPECT_EQ(set.prototypes[0].index, 1u);
  EXPECT_EQ(set.prototypes[0].weight, 1.0);
  EXPECT_EQ(set.prototypes[1].index, 3u);
  for (std::size_t i = 1; i < set.prototypes.size(); ++i)
    EXPECT_LE(set.prototypes[i].weight, set.prototypes[i - 1].weight);
  for (const auto& p : set.prototypes) {
    EXPECT_GT(p.weight, 0.0);
    EXPECT_LE(p.weight, 1.0);
  }
  // weight = exp(-d^2 / sigma^2), sigma = 0.75 sqrt(2)
  const double sigma = 0.75 * std::sqrt(2.0);
  EXPECT_NEAR(set.prototypes[1].weight, std::exp(-(0.02 * 0.02) / (sigma * sigma)), 1e-15);
  EXPECT_NEAR(set.prototypes[1].closeness[0], 0.98, 1e-12);
}

TEST(SimilarInstances, MoreRequestedThanAvailable) {
  const std::vector<FeatureVector> train{fv({0.9}), fv({0.1})};
  const auto set = similar_instances(std::vector<double>{0.0}, train, 10);
  ASSERT_EQ(set.prototypes.size(), 2u);
  EXPECT_EQ(set.prototypes[0].index, 1u);
  EXPECT_THROW(similar_instances(std::vector<double>{0.0}, std::vector<FeatureVector>{}, 3), Error);
}

// ---------------------------------------------------------------------------
// Contrastive

TEST(PertinentNegative, OneDimensionalThreshold) {
  auto score = [](Row x) { return x[0] > 0.5 ? 1.0 : 0.0; };
  const std::vector<double> x{0.3};
  PertinentNegativeParams p;
  p.step = 0.1;
  const auto r = pertinent_negative(score, 0.5, x, p);
  ASSERT_TRUE(r.found);
  EXPECT_EQ(r.original_class, 0);
  EXPECT_EQ(r.result_class, 1);
  ASSERT_EQ(r.changed.size(), 1u);
  EXPECT_NEAR(r.delta[0], 0.3, 1e-12);
  EXPECT_TRUE(r.verified);
}

TEST(PertinentNegative, NotFoundWhenUnreachable) {
  auto score = [](Row) { return 0.1; };
  const std::vector<double> x{0.3, 0.7};
  const auto r = pertinent_negative(score, 0.5, x);
  EXPECT_FALSE(r.found);
  EXPECT_EQ(r.result_class, r.original_class);
}

TEST(PertinentNegative, BudgetExhausted) {
  // Flipping requires four columns to be high; only two may change.
  auto score = [](Row x) { return (x[0] + x[1] + x[2] + x[3]) / 4.0; };
  const std::vector<double> x{0, 0, 0, 0};
  PertinentNegativeParams p;
  p.step = 0.25;
  p.max_changed = 2;
  const auto r = pertinent_negative(score, 0.9, x, p);
  EXPECT_FALSE(r.found);
}

TEST(PertinentNegative, BinaryColumnsToggle) {
  auto score = [](Row x) { return 0.2 + 0.5 * x[1]; };
  const std::vector<double> x{0.4, 0.0};
  PertinentNegativeParams p;
  p.binary_columns = {false, true};
  const auto r = pertinent_negative(score, 0.6, x, p);
  ASSERT_TRUE(r.found);
  EXPECT_EQ(r.counterpart[1], 1.0);
  EXPECT_EQ(r.changed, std::vector<std::size_t>{1});
}

TEST(PertinentNegativeProperty, RandomClassifiersSatisfyContract) {
  detail::SplitMix64 rng(2024);
  std::size_t found = 0;
  for (int t = 0; t < 60; ++t) {
    const std::size_t m = 3 + detail::uniform_index(rng, 6);
    std::vector<double> w(m), x(m);
    for (auto& v : w) v = 2 * detail::uniform01(rng) - 1;
    for (auto& v : x) v = detail::uniform01(rng);
    const double bias = detail::uniform01(rng) - 0.5;
    auto score = [&](Row z) {
      double s = bias;
      for (std::size_t i = 0; i < m; ++i) s += w[i] * z[i] + 0.3 * w[(i + 1) % m] * z[i] * z[(i + 1) % m];
      return 1.0 / (1.0 + std::exp(-4 * s));
    };
    PertinentNegativeParams p;
    p.step = 0.05;
    p.max_changed = 3;
    const auto r = pertinent_negative(score, 0.5, x, p);
    if (!r.found) continue;
    ++found;
    const int orig = score(x) >= 0.5;
    ASSERT_NE(static_cast<int>(score(r.counterpart) >= 0.5), orig);
    ASSERT_LE(r.changed.size(), 3u);
    ASSERT_TRUE(r.verified);
    for (double v : r.counterpart) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
    for (auto c : r.changed) {
      auto probe = r.counterpart;
      probe[c] = x[c];
      ASSERT_EQ(static_cast<int>(score(probe) >= 0.5), orig) << "change on column " << c << " is not needed";
    }
  }
  EXPECT_GT(found, 20u);
}

TEST(PertinentPositive, OnlyReadColumnSurvives) {
  auto score = [](Row x) { return x[0]; };
  const std::vector<double> x{0.9, 0.8, 0.7};
  const std::vector<double> bg{0.1, 0.1, 0.1};
  const auto r = pertinent_positive(score, 0.5, x, bg, singleton_players(3));
  ASSERT_TRUE(r.found);
  EXPECT_EQ(r.changed, std::vector<std::size_t>{0});
  EXPECT_TRUE(r.verified);
}

TEST(PertinentPositive, ConstantClassifierEmpty) {
  auto score = [](Row) { return 0.9; };
  const std::vector<double> x{0.9, 0.8};
  const std::vector<double> bg{0.1, 0.1};
  const auto r = pertinent_positive(score, 0.5, x, bg, singleton_players(2));
  EXPECT_TRUE(r.found);
  EXPECT_TRUE(r.changed.empty());
}

TEST(PertinentPositiveProperty, SubsetPreservesClass) {
  detail::SplitMix64 rng(77);
  for (int t = 0; t < 60; ++t) {
    const std::size_t m = 2 + detail::uniform_index(rng, 7);
    std::vector<double> w(m), x(m), bg(m);
    for (auto& v : w) v = 2 * detail::uniform01(rng) - 1;
    for (auto& v : x) v = detail::uniform01(rng);
    for (auto& v : bg) v = detail::uniform01(rng);
    auto score = [&](Row z) {
      double s = 0;
      for (std::size_t i = 0; i < m; ++i) s += w[i] * z[i] * z[(i + 2) % m];
      return 1.0 / (1.0 + std::exp(-3 * s));
    };
    const auto players = singleton_players(m);
    const auto r = pertinent_positive(score, 0.5, x, bg, players);
    ASSERT_TRUE(r.found);
    ASSERT_TRUE(r.verified);
    // mask everything outside the kept set independently
    std::vector<double> z = bg;
    for (auto p : r.changed) z[p] = x[p];
    ASSERT_EQ(static_cast<int>(score(z) >= 0.5), static_cast<int>(score(x) >= 0.5));
  }
}

TEST(Contrastive, JsonShape) {
  auto score = [](Row x) { return x[0] > 0.5 ? 1.0 : 0.0; };
  const std::vector<double> x{0.3, 0.1};
  const auto r = pertinent_negative(score, 0.5, x, PertinentNegativeParams{0.1, 5, {}, 64});
  const auto j = r.to_json({"duration", "hot"});
  EXPECT_EQ(j["kind"], "pertinent_negative");
  ASSERT_EQ(j["changes"].size(), 1u);
  EXPECT_EQ(j["changes"][0]["feature"], "duration");
}
