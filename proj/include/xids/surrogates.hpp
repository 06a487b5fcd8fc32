#pragma once

// Explanation battery around the detector: DNF rule sets (evaluation and a greedy
// learner), LIME-style local linear surrogates, kernel-weighted similar
// instances, and greedy contrastive search (pertinent negatives / positives).

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "xids/common.hpp"
#include "xids/flow.hpp"
#include "xids/shap.hpp"

namespace xids {

// ---------------------------------------------------------------------------
// Rule sets

enum class RuleOp { le, gt, is, is_not };

struct Literal {
  std::string column;
  RuleOp op = RuleOp::gt;
  double threshold = 0;  // unused for is / is_not

  bool holds(double v) const {
    switch (op) {
      case RuleOp::le: return v <= threshold;
      case RuleOp::gt: return v > threshold;
      case RuleOp::is: return v >= 0.5;
      case RuleOp::is_not: return v < 0.5;
    }
    return false;
  }

  std::string to_text() const {
    switch (op) {
      case RuleOp::le: return column + " <= " + detail::format_fixed(threshold, 2);
      case RuleOp::gt: return column + " > " + detail::format_fixed(threshold, 2);
      case RuleOp::is: return column;
      case RuleOp::is_not: return column + " not";
    }
    return column;
  }

  bool operator==(const Literal&) const = default;
};

struct Clause {
  std::vector<Literal> literals;
  bool operator==(const Clause&) const = default;
};

inline const char* op_name(RuleOp op) {
  switch (op) {
    case RuleOp::le: return "<=";
    case RuleOp::gt: return ">";
    case RuleOp::is: return "is";
    case RuleOp::is_not: return "not";
  }
  return "?";
}

struct RuleSet {
  std::vector<Clause> clauses;

  bool operator==(const RuleSet&) const = default;

  // One clause per line, literals joined by " AND ".
  std::string to_text() const {
    std::string out;
    for (const auto& c : clauses) {
      for (std::size_t i = 0; i < c.literals.size(); ++i) {
        if (i) out += " AND ";
        out += c.literals[i].to_text();
      }
      out += '\n';
    }
    return out;
  }

  static RuleSet parse_text(std::string_view text) {
    RuleSet rs;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
      const auto body = detail::trim(line);
      if (body.empty()) continue;
      Clause clause;
      std::string_view rest = body;
      for (;;) {
        const auto pos = rest.find(" AND ");
        const auto lit_text = detail::trim(rest.substr(0, pos));
        clause.literals.push_back(parse_literal(lit_text));
        if (pos == std::string_view::npos) break;
        rest = rest.substr(pos + 5);
      }
      rs.clauses.push_back(std::move(clause));
    }
    return rs;
  }

  nlohmann::json to_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& c : clauses) {
      nlohmann::json lits = nlohmann::json::array();
      for (const auto& l : c.literals) {
        nlohmann::json j{{"column", l.column}, {"op", op_name(l.op)}};
        if (l.op == RuleOp::le || l.op == RuleOp::gt) j["threshold"] = l.threshold;
        lits.push_back(std::move(j));
      }
      out.push_back(std::move(lits));
    }
    return {{"clauses", std::move(out)}};
  }

  static RuleSet from_json(const nlohmann::json& j) {
    RuleSet rs;
    for (const auto& jc : j.at("clauses")) {
      Clause c;
      for (const auto& jl : jc) {
        Literal l;
        l.column = jl.at("column").get<std::string>();
        const auto op = jl.at("op").get<std::string>();
        if (op == "<=") l.op = RuleOp::le;
        else if (op == ">") l.op = RuleOp::gt;
        else if (op == "is") l.op = RuleOp::is;
        else if (op == "not") l.op = RuleOp::is_not;
        else throw Error(Errc::parse, "unknown rule operator " + op);
        l.threshold = jl.value("threshold", 0.0);
        c.literals.push_back(std::move(l));
      }
      rs.clauses.push_back(std::move(c));
    }
    return rs;
  }

 private:
  static Literal parse_literal(std::string_view s) {
    if (s.empty()) throw Error(Errc::parse, "empty rule literal");
    Literal l;
    for (const auto& [tok, op] : {std::pair{std::string_view(" <= "), RuleOp::le}, {std::string_view(" > "), RuleOp::gt}}) {
      const auto pos = s.find(tok);
      if (pos == std::string_view::npos) continue;
      l.column = std::string(detail::trim(s.substr(0, pos)));
      l.op = op;
      const auto v = detail::parse_double(detail::trim(s.substr(pos + tok.size())));
      if (!v) throw Error(Errc::parse, "bad threshold in rule literal '" + std::string(s) + "'");
      l.threshold = *v;
      return l;
    }
    if (s.size() > 4 && s.substr(s.size() - 4) == " not") {
      l.column = std::string(detail::trim(s.substr(0, s.size() - 4)));
      l.op = RuleOp::is_not;
      return l;
    }
    if (s.find(' ') != std::string_view::npos) throw Error(Errc::parse, "cannot parse rule literal '" + std::string(s) + "'");
    l.column = std::string(s);
    l.op = RuleOp::is;
    return l;
  }
};

// The five-clause DNF printed for the NSL-KDD attack class, over min-max scaled columns.
inline RuleSet builtin_paper_rules() {
  return RuleSet{{
      Clause{{{"wrong_fragment", RuleOp::gt, 0.00}}},
      Clause{{{"src_bytes", RuleOp::le, 0.00}, {"dst_host_diff_srv_rate", RuleOp::gt, 0.01}}},
      Clause{{{"dst_host_count", RuleOp::le, 0.04}, {"protocol_type_icmp", RuleOp::is, 0}}},
      Clause{{{"num_compromised", RuleOp::gt, 0.00}, {"dst_host_same_srv_rate", RuleOp::gt, 0.98}}},
      Clause{{{"srv_count", RuleOp::gt, 0.00}, {"protocol_type_icmp", RuleOp::is, 0}, {"service_urp_i", RuleOp::is_not, 0}}},
  }};
}

// Rules bound to schema column indices. A one-hot column for a category that never
// appeared in training (e.g. "service_urp_i" on a small subset) is constant zero.
class CompiledRuleSet {
 public:
  CompiledRuleSet(const RuleSet& rules, const FeatureSchema& schema) {
    for (const auto& c : rules.clauses) {
      std::vector<Bound> bound;
      for (const auto& l : c.literals) bound.push_back({resolve(l, schema), l});
      clauses_.push_back(std::move(bound));
    }
  }

  int predict(Row x) const {
    for (const auto& clause : clauses_) {
      bool all = true;
      for (const auto& b : clause) {
        const double v = b.column ? x[*b.column] : 0.0;
        if (!b.literal.holds(v)) {
          all = false;
          break;
        }
      }
      if (all) return 1;
    }
    return 0;
  }

 private:
  struct Bound {
    std::optional<std::size_t> column;
    Literal literal;
  };

  static std::optional<std::size_t> resolve(const Literal& l, const FeatureSchema& schema) {
    if (auto i = schema.find(l.column)) return i;
    if (l.op == RuleOp::is || l.op == RuleOp::is_not) {
      for (const auto& f : kFeatures) {
        if (f.kind != FeatureKind::categorical) continue;
        const std::string prefix = std::string(f.name) + "_";
        if (l.column.size() > prefix.size() && l.column.compare(0, prefix.size(), prefix) == 0) return std::nullopt;
      }
    }
    throw Error(Errc::not_found, "rule literal references unknown column '" + l.column + "'");
  }

  std::vector<std::vector<Bound>> clauses_;
};

struct RuleEvaluation {
  double accuracy = 0;
  std::size_t tn = 0, fp = 0, fn = 0, tp = 0;

  nlohmann::json to_json() const {
    return {{"accuracy", accuracy}, {"confusion", {{"tn", tn}, {"fp", fp}, {"fn", fn}, {"tp", tp}}}};
  }
};

inline RuleEvaluation eval_ruleset(const RuleSet& rules, const FeatureSchema& schema,
                                   std::span<const FeatureVector> data) {
  const CompiledRuleSet compiled(rules, schema);
  RuleEvaluation ev;
  for (const auto& v : data) {
    const int p = compiled.predict(v.row());
    if (v.label == 1) (p == 1 ? ev.tp : ev.fn)++;
    else (p == 1 ? ev.fp : ev.tn)++;
  }
  ev.accuracy = data.empty() ? 0.0 : static_cast<double>(ev.tp + ev.tn) / static_cast<double>(data.size());
  return ev;
}

// ---------------------------------------------------------------------------
// Greedy DNF learner

struct DnfParams {
  std::size_t max_clauses = 5;
  std::size_t max_literals = 3;
  std::size_t quantiles = 20;  // candidate thresholds per numeric column
  double min_gain = 1e-4;      // minimum training-accuracy gain to accept a clause
};

namespace detail {

class Bitset {
 public:
  Bitset() = default;
  Bitset(std::size_t n, bool fill) : n_(n), words_((n + 63) / 64, fill ? ~0ULL : 0ULL) { trim(); }

  void set(std::size_t i) { words_[i / 64] |= 1ULL << (i % 64); }
  bool test(std::size_t i) const { return (words_[i / 64] >> (i % 64)) & 1ULL; }
  std::size_t count() const {
    std::size_t c = 0;
    for (auto w : words_) c += static_cast<std::size_t>(std::popcount(w));
    return c;
  }
  Bitset operator&(const Bitset& o) const {
    Bitset r = *this;
    for (std::size_t i = 0; i < words_.size(); ++i) r.words_[i] &= o.words_[i];
    return r;
  }
  Bitset operator|(const Bitset& o) const {
    Bitset r = *this;
    for (std::size_t i = 0; i < words_.size(); ++i) r.words_[i] |= o.words_[i];
    return r;
  }
  Bitset operator~() const {
    Bitset r = *this;
    for (auto& w : r.words_) w = ~w;
    r.trim();
    return r;
  }
  std::size_t and_count(const Bitset& o) const {
    std::size_t c = 0;
    for (std::size_t i = 0; i < words_.size(); ++i) c += static_cast<std::size_t>(std::popcount(words_[i] & o.words_[i]));
    return c;
  }

 private:
  void trim() {
    if (n_ % 64 && !words_.empty()) words_.back() &= (1ULL << (n_ % 64)) - 1;
  }
  std::size_t n_ = 0;
  std::vector<std::uint64_t> words_;
};

}  // namespace detail

// Greedy set cover over threshold/category literals. Each clause is grown one
// literal at a time by maximizing (uncovered positives covered) x precision;
// clauses are kept while they raise training accuracy by at least min_gain.
// Ties go to the lower column index, then the lower threshold.
inline RuleSet learn_dnf(std::span<const FeatureVector> data, const std::vector<std::string>& column_names,
                         const DnfParams& params = {}) {
  const std::size_t n = data.size();
  if (n == 0) throw Error(Errc::invalid_argument, "learn_dnf: empty data");
  const std::size_t width = column_names.size();
  detail::Bitset positive(n, false);
  for (std::size_t r = 0; r < n; ++r) {
    if (data[r].size() != width) throw Error(Errc::dimension, "learn_dnf: vector width differs from column names");
    if (data[r].label == 1) positive.set(r);
  }
  const std::size_t total_pos = positive.count();
  if (total_pos == 0 || total_pos == n) throw Error(Errc::degenerate, "learn_dnf: labels must contain both classes");

  struct Candidate {
    Literal literal;
    detail::Bitset rows;
  };
  std::vector<Candidate> cands;
  for (std::size_t c = 0; c < width; ++c) {
    std::vector<double> vals(n);
    for (std::size_t r = 0; r < n; ++r) vals[r] = data[r].values[c];
    std::vector<double> distinct = vals;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (distinct.size() < 2) continue;
    auto make = [&](RuleOp op, double t) {
      Literal lit{column_names[c], op, t};
      detail::Bitset rows(n, false);
      for (std::size_t r = 0; r < n; ++r)
        if (lit.holds(vals[r])) rows.set(r);
      cands.push_back({std::move(lit), std::move(rows)});
    };
    if (distinct.size() == 2 && distinct[0] == 0.0 && distinct[1] == 1.0) {
      make(RuleOp::is, 0);
      make(RuleOp::is_not, 0);
      continue;
    }
    // Thresholds at midpoints between consecutive quantile values.
    std::vector<double> qs;
    const std::size_t nq = std::max<std::size_t>(2, params.quantiles);
    std::vector<double> sorted = vals;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t q = 0; q <= nq; ++q) qs.push_back(sorted[std::min(n - 1, q * (n - 1) / nq)]);
    qs.erase(std::unique(qs.begin(), qs.end()), qs.end());
    if (qs.size() < 2) qs = {distinct.front(), distinct.back()};
    for (std::size_t i = 0; i + 1 < qs.size(); ++i) {
      const double t = 0.5 * (qs[i] + qs[i + 1]);
      make(RuleOp::le, t);
      make(RuleOp::gt, t);
    }
  }

  RuleSet rules;
  detail::Bitset covered(n, false);
  auto accuracy_of = [&](const detail::Bitset& pred) {
    const std::size_t tp = pred.and_count(positive);
    const std::size_t fp = pred.count() - tp;
    const std::size_t tn = (n - total_pos) - fp;
    return static_cast<double>(tp + tn) / static_cast<double>(n);
  };
  double acc = accuracy_of(covered);

  for (std::size_t k = 0; k < params.max_clauses; ++k) {
    const detail::Bitset uncovered_pos = positive & ~covered;
    if (uncovered_pos.count() == 0) break;
    auto quality = [&](const detail::Bitset& rows) {
      const std::size_t cov = rows.count();
      if (cov == 0) return 0.0;
      const double precision = static_cast<double>(rows.and_count(positive)) / static_cast<double>(cov);
      return static_cast<double>(rows.and_count(uncovered_pos)) * precision;
    };

    Clause clause;
    detail::Bitset clause_rows(n, true);
    double clause_q = -1;
    std::vector<bool> used(cands.size(), false);
    for (std::size_t l = 0; l < params.max_literals; ++l) {
      std::optional<std::size_t> best;
      double best_q = clause_q;
      for (std::size_t i = 0; i < cands.size(); ++i) {
        if (used[i]) continue;
        const double q = quality(clause_rows & cands[i].rows);
        if (q > best_q) {
          best_q = q;
          best = i;
        }
      }
      if (!best || best_q <= 0) break;
      used[*best] = true;
      clause.literals.push_back(cands[*best].literal);
      clause_rows = clause_rows & cands[*best].rows;
      clause_q = best_q;
    }
    if (clause.literals.empty()) break;
    const detail::Bitset next = covered | clause_rows;
    const double next_acc = accuracy_of(next);
    if (next_acc - acc < params.min_gain) break;
    rules.clauses.push_back(std::move(clause));
    covered = next;
    acc = next_acc;
  }
  return rules;
}

// ---------------------------------------------------------------------------
// Local linear surrogate

struct CategoricalGroup {
  std::vector<std::size_t> columns;
  std::vector<double> probabilities;  // training marginals, one per column
};

// Training marginals of each one-hot group in `schema`.
inline std::vector<CategoricalGroup> categorical_groups(const FeatureSchema& schema,
                                                        std::span<const FeatureVector> train) {
  std::vector<CategoricalGroup> groups;
  for (const auto& p : feature_players(schema, Granularity::collapsed)) {
    if (!schema.is_binary(p.columns.front())) continue;
    CategoricalGroup g{p.columns, std::vector<double>(p.columns.size(), 0.0)};
    for (const auto& v : train)
      for (std::size_t i = 0; i < p.columns.size(); ++i) g.probabilities[i] += v.values[p.columns[i]];
    double total = 0;
    for (auto q : g.probabilities) total += q;
    for (auto& q : g.probabilities) q = total > 0 ? q / total : 1.0 / static_cast<double>(g.probabilities.size());
    groups.push_back(std::move(g));
  }
  return groups;
}

inline double default_kernel_width(std::size_t width) { return 0.75 * std::sqrt(static_cast<double>(width)); }

struct LimeParams {
  std::size_t n_perturb = 5000;
  double kernel_width = 0;  // 0 selects 0.75 * sqrt(M)
  std::size_t k = 5;
  double noise = 0.25;      // half-width of the uniform numeric perturbation
  std::uint64_t seed = 0;
  std::vector<CategoricalGroup> groups;
};

struct LocalSurrogate {
  double intercept = 0;
  std::vector<std::pair<std::size_t, double>> weights;  // (column, weight), by |weight| descending
  double kernel_width = 0;
  std::size_t n_perturb = 0;
  double r2 = 0;

  double weight_of(std::size_t column) const {
    for (const auto& [c, w] : weights)
      if (c == column) return w;
    return 0.0;
  }

  nlohmann::json to_json(const std::vector<std::string>& names = {}) const {
    nlohmann::json ws = nlohmann::json::array();
    for (const auto& [c, w] : weights)
      ws.push_back({{"column", c < names.size() ? names[c] : std::to_string(c)}, {"weight", w}});
    return {{"intercept", intercept}, {"weights", std::move(ws)}, {"kernel_width", kernel_width},
            {"n_perturb", n_perturb}, {"r2", r2}};
  }
};

namespace detail {

struct WlsFit {
  Eigen::VectorXd coef;  // intercept first
  double r2 = 0;
};

inline std::optional<WlsFit> weighted_fit(const Eigen::MatrixXd& z, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                                          const std::vector<std::size_t>& cols) {
  const auto n = z.rows();
  const auto p = static_cast<Eigen::Index>(cols.size()) + 1;
  Eigen::MatrixXd a(n, p);
  Eigen::VectorXd b(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double sw = std::sqrt(w(r));
    a(r, 0) = sw;
    for (Eigen::Index j = 1; j < p; ++j) a(r, j) = sw * z(r, static_cast<Eigen::Index>(cols[static_cast<std::size_t>(j - 1)]));
    b(r) = sw * y(r);
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  if (qr.rank() < p) return std::nullopt;
  WlsFit fit;
  fit.coef = qr.solve(b);
  const double wsum = w.sum();
  const double ybar = w.dot(y) / wsum;
  double ss_res = 0, ss_tot = 0;
  for (Eigen::Index r = 0; r < n; ++r) {
    double pred = fit.coef(0);
    for (Eigen::Index j = 1; j < p; ++j) pred += fit.coef(j) * z(r, static_cast<Eigen::Index>(cols[static_cast<std::size_t>(j - 1)]));
    ss_res += w(r) * (y(r) - pred) * (y(r) - pred);
    ss_tot += w(r) * (y(r) - ybar) * (y(r) - ybar);
  }
  fit.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : (ss_res < 1e-18 ? 1.0 : 0.0);
  return fit;
}

}  // namespace detail

// Samples around x, weights samples by exp(-d^2 / sigma^2), and fits a weighted
// linear model over at most k columns chosen by forward selection on weighted R^2.
template <Scorer F>
LocalSurrogate lime_explain(const F& scorer, Row x, const LimeParams& params = {}) {
  const std::size_t m = x.size();
  if (params.k == 0) throw Error(Errc::invalid_argument, "lime_explain: k must be positive");
  if (params.n_perturb < 10 * params.k) throw Error(Errc::invalid_argument, "lime_explain: n_perturb must be >= 10k");
  const double sigma = params.kernel_width > 0 ? params.kernel_width : default_kernel_width(m);

  std::vector<int> group_of(m, -1);
  for (std::size_t g = 0; g < params.groups.size(); ++g)
    for (auto c : params.groups[g].columns) group_of[c] = static_cast<int>(g);

  const auto n = static_cast<Eigen::Index>(params.n_perturb);
  Eigen::MatrixXd z(n, static_cast<Eigen::Index>(m));
  Eigen::VectorXd y(n), w(n);
  detail::SplitMix64 rng(params.seed);
  std::vector<double> row(m);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < m; ++c) row[c] = x[c];
    if (r > 0) {  // first sample is x itself
      for (std::size_t c = 0; c < m; ++c)
        if (group_of[c] < 0) row[c] = std::clamp(x[c] + (2 * detail::uniform01(rng) - 1) * params.noise, 0.0, 1.0);
      for (const auto& g : params.groups) {
        double u = detail::uniform01(rng), acc = 0;
        std::size_t pick = g.columns.size() - 1;
        for (std::size_t i = 0; i < g.columns.size(); ++i) {
          acc += g.probabilities[i];
          if (u < acc) {
            pick = i;
            break;
          }
        }
        for (std::size_t i = 0; i < g.columns.size(); ++i) row[g.columns[i]] = i == pick ? 1.0 : 0.0;
      }
    }
    double d2 = 0;
    for (std::size_t c = 0; c < m; ++c) {
      z(r, static_cast<Eigen::Index>(c)) = row[c];
      d2 += (row[c] - x[c]) * (row[c] - x[c]);
    }
    y(r) = static_cast<double>(scorer(Row(row)));
    w(r) = std::exp(-d2 / (sigma * sigma));
  }

  std::vector<std::size_t> varying;
  for (std::size_t c = 0; c < m; ++c) {
    const auto col = z.col(static_cast<Eigen::Index>(c));
    if (col.maxCoeff() > col.minCoeff()) varying.push_back(c);
  }
  if (varying.empty()) throw Error(Errc::degenerate, "lime_explain: all perturbations are identical");

  std::vector<std::size_t> selected;
  detail::WlsFit best_fit{Eigen::VectorXd::Constant(1, w.dot(y) / w.sum()), 0.0};
  for (std::size_t step = 0; step < params.k && selected.size() < varying.size(); ++step) {
    std::optional<std::size_t> pick;
    detail::WlsFit pick_fit;
    double pick_r2 = -std::numeric_limits<double>::infinity();
    for (auto c : varying) {
      if (std::find(selected.begin(), selected.end(), c) != selected.end()) continue;
      auto cols = selected;
      cols.push_back(c);
      auto fit = detail::weighted_fit(z, y, w, cols);
      if (fit && fit->r2 > pick_r2 + 1e-15) {
        pick_r2 = fit->r2;
        pick = c;
        pick_fit = std::move(*fit);
      }
    }
    if (!pick) break;
    selected.push_back(*pick);
    best_fit = std::move(pick_fit);
  }

  LocalSurrogate s;
  s.intercept = best_fit.coef(0);
  for (std::size_t j = 0; j < selected.size(); ++j)
    s.weights.emplace_back(selected[j], best_fit.coef(static_cast<Eigen::Index>(j + 1)));
  std::stable_sort(s.weights.begin(), s.weights.end(),
                   [](const auto& a, const auto& b) { return std::abs(a.second) > std::abs(b.second); });
  s.kernel_width = sigma;
  s.n_perturb = params.n_perturb;
  s.r2 = best_fit.r2;
  return s;
}

// ---------------------------------------------------------------------------
// Similar instances

struct Prototype {
  std::size_t index = 0;  // position in the training span
  double weight = 0;
  std::vector<double> values;
  std::vector<double> closeness;  // per column 1 - |x_i - p_i|
  int label = 0;
  std::string attack_label;
};

struct PrototypeSet {
  std::vector<Prototype> prototypes;  // weight descending

  nlohmann::json to_json(const std::vector<std::string>& names = {}) const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& p : prototypes) {
      nlohmann::json j{{"index", p.index}, {"weight", p.weight}, {"label", p.label}, {"attack_label", p.attack_label}};
      if (!names.empty()) {
        nlohmann::json vals = nlohmann::json::object(), close = nlohmann::json::object();
        for (std::size_t i = 0; i < names.size() && i < p.values.size(); ++i) {
          vals[names[i]] = p.values[i];
          close[names[i]] = p.closeness[i];
        }
        j["values"] = std::move(vals);
        j["closeness"] = std::move(close);
      } else {
        j["values"] = p.values;
        j["closeness"] = p.closeness;
      }
      out.push_back(std::move(j));
    }
    return out;
  }
};

inline PrototypeSet similar_instances(Row x, std::span<const FeatureVector> train, std::size_t n = 5,
                                      double kernel_width = 0) {
  if (train.empty()) throw Error(Errc::invalid_argument, "similar_instances: empty training set");
  const double sigma = kernel_width > 0 ? kernel_width : default_kernel_width(x.size());
  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (train[i].size() != x.size()) throw Error(Errc::dimension, "similar_instances: width mismatch");
    double d2 = 0;
    for (std::size_t c = 0; c < x.size(); ++c) d2 += (x[c] - train[i].values[c]) * (x[c] - train[i].values[c]);
    scored.emplace_back(std::exp(-d2 / (sigma * sigma)), i);
  }
  const std::size_t take = std::min(n, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(),
                    [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  PrototypeSet set;
  for (std::size_t k = 0; k < take; ++k) {
    const auto& v = train[scored[k].second];
    Prototype p{scored[k].second, scored[k].first, v.values, {}, v.label, v.attack_label};
    for (std::size_t c = 0; c < x.size(); ++c) p.closeness.push_back(1.0 - std::min(1.0, std::abs(x[c] - v.values[c])));
    set.prototypes.push_back(std::move(p));
  }
  return set;
}

// ---------------------------------------------------------------------------
// Contrastive explanations

enum class ContrastiveKind { pertinent_negative, pertinent_positive };

struct ContrastiveResult {
  ContrastiveKind kind = ContrastiveKind::pertinent_negative;
  bool found = false;
  int original_class = 0;
  int result_class = 0;
  double original_score = 0;
  double result_score = 0;
  std::vector<double> x;
  std::vector<double> counterpart;  // X_PN, or x with non-kept players masked for PP
  std::vector<double> delta;        // X_PN - X (PN only)
  std::vector<std::size_t> changed; // PN: changed columns; PP: kept player indices
  bool verified = false;            // 1-minimality checked on the final result

  nlohmann::json to_json(const std::vector<std::string>& names = {}) const {
    auto name = [&](std::size_t i) { return i < names.size() ? names[i] : std::to_string(i); };
    nlohmann::json items = nlohmann::json::array();
    for (auto c : changed) {
      if (kind == ContrastiveKind::pertinent_negative)
        items.push_back({{"feature", name(c)}, {"x", x[c]}, {"x_pn", counterpart[c]}, {"delta", delta[c]}});
      else
        items.push_back(name(c));
    }
    return {{"kind", kind == ContrastiveKind::pertinent_negative ? "pertinent_negative" : "pertinent_positive"},
            {"found", found},
            {"original_class", original_class},
            {"result_class", result_class},
            {"original_score", original_score},
            {"result_score", result_score},
            {kind == ContrastiveKind::pertinent_negative ? "changes" : "kept", std::move(items)},
            {"verified", verified}};
  }
};

struct PertinentNegativeParams {
  double step = 0.01;
  std::size_t max_changed = 5;
  std::vector<bool> binary_columns;  // binary columns only move between 0 and 1
  std::size_t max_iterations = 64;
};

// Greedy coordinate search for a sparse in-range change that flips the class of
// "score >= threshold", followed by pruning to 1-minimality.
template <Scorer F>
ContrastiveResult pertinent_negative(const F& score, double threshold, Row x, const PertinentNegativeParams& params = {}) {
  if (!(params.step > 0)) throw Error(Errc::invalid_argument, "pertinent_negative: step must be positive");
  const std::size_t m = x.size();
  auto cls = [&](Row z) { return static_cast<double>(score(z)) >= threshold ? 1 : 0; };
  ContrastiveResult res;
  res.kind = ContrastiveKind::pertinent_negative;
  res.x.assign(x.begin(), x.end());
  res.original_score = static_cast<double>(score(x));
  res.original_class = res.original_score >= threshold ? 1 : 0;
  const int target = 1 - res.original_class;
  // Progress measure: positive is toward the opposite class.
  auto toward = [&](double s) { return target == 1 ? s : -s; };

  std::vector<double> cur = res.x;
  std::vector<bool> touched(m, false);
  std::size_t n_touched = 0;
  double cur_score = res.original_score;
  bool flipped = false;
  constexpr double eps = 1e-12;

  for (std::size_t it = 0; it < params.max_iterations && !flipped; ++it) {
    struct Move {
      std::size_t column;
      double value;
      double magnitude;
      double score;
    };
    std::optional<Move> best_flip, best_step;
    for (std::size_t c = 0; c < m; ++c) {
      if (!touched[c] && n_touched >= params.max_changed) continue;
      const double orig = cur[c];
      std::vector<double> grid;
      const bool binary = c < params.binary_columns.size() && params.binary_columns[c];
      if (binary) {
        grid.push_back(orig >= 0.5 ? 0.0 : 1.0);
      } else {
        for (long j = 1;; ++j) {
          const double up = orig + static_cast<double>(j) * params.step;
          const double down = orig - static_cast<double>(j) * params.step;
          const bool up_ok = up <= 1.0 + eps, down_ok = down >= -eps;
          if (!up_ok && !down_ok) break;
          if (up_ok) grid.push_back(std::min(up, 1.0));
          if (down_ok) grid.push_back(std::max(down, 0.0));
        }
      }
      for (double v : grid) {
        if (v == orig) continue;
        cur[c] = v;
        const double s = static_cast<double>(score(Row(cur)));
        const double mag = std::abs(v - orig);
        if ((s >= threshold ? 1 : 0) == target) {
          if (!best_flip || mag < best_flip->magnitude - eps) best_flip = Move{c, v, mag, s};
        } else if (toward(s) > toward(cur_score) + eps) {
          if (!best_step || toward(s) > toward(best_step->score) + eps ||
              (std::abs(toward(s) - toward(best_step->score)) <= eps && mag < best_step->magnitude - eps))
            best_step = Move{c, v, mag, s};
        }
      }
      cur[c] = orig;
    }
    const auto& mv = best_flip ? best_flip : best_step;
    if (!mv) break;
    cur[mv->column] = mv->value;
    cur_score = mv->score;
    if (!touched[mv->column]) {
      touched[mv->column] = true;
      ++n_touched;
    }
    flipped = best_flip.has_value();
  }

  if (!flipped) {
    res.result_class = res.original_class;
    res.result_score = cur_score;
    return res;
  }

  // Revert changes that are not needed for the flip, until a fixpoint.
  for (bool changed = true; changed;) {
    changed = false;
    for (std::size_t c = 0; c < m; ++c) {
      if (cur[c] == res.x[c]) continue;
      const double v = cur[c];
      cur[c] = res.x[c];
      if (cls(cur) == target) {
        changed = true;
      } else {
        cur[c] = v;
      }
    }
  }

  res.found = true;
  res.counterpart = cur;
  res.result_score = static_cast<double>(score(Row(cur)));
  res.result_class = res.result_score >= threshold ? 1 : 0;
  res.delta.resize(m);
  for (std::size_t c = 0; c < m; ++c) {
    res.delta[c] = cur[c] - res.x[c];
    if (cur[c] != res.x[c]) res.changed.push_back(c);
  }
  bool minimal = res.result_class == target;
  for (auto c : res.changed) {
    std::vector<double> probe = cur;
    probe[c] = res.x[c];
    if (cls(probe) == target) minimal = false;
  }
  for (double v : cur)
    if (v < 0.0 || v > 1.0) minimal = false;
  res.verified = minimal;
  return res;
}

// Greedy backward elimination of players: masks (replaces by the background mean)
// the player whose removal keeps the class with the strongest original-class score,
// until every remaining removal would flip the class.
template <Scorer F>
ContrastiveResult pertinent_positive(const F& score, double threshold, Row x, std::span<const double> background_mean,
                                     const std::vector<Player>& players) {
  if (background_mean.size() != x.size()) throw Error(Errc::dimension, "pertinent_positive: background width mismatch");
  ContrastiveResult res;
  res.kind = ContrastiveKind::pertinent_positive;
  res.x.assign(x.begin(), x.end());
  res.original_score = static_cast<double>(score(x));
  res.original_class = res.original_score >= threshold ? 1 : 0;
  auto keeps = [&](double s) { return (s >= threshold ? 1 : 0) == res.original_class; };
  // Larger is more firmly in the original class.
  auto firmness = [&](double s) { return res.original_class == 1 ? s : -s; };

  std::vector<bool> present(players.size(), true);
  std::vector<double> cur = res.x;
  auto masked = [&](std::size_t p) {
    std::vector<double> z = cur;
    for (auto c : players[p].columns) z[c] = background_mean[c];
    return z;
  };

  for (;;) {
    std::optional<std::size_t> pick;
    double pick_firm = -std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < players.size(); ++p) {
      if (!present[p]) continue;
      const double s = static_cast<double>(score(Row(masked(p))));
      if (keeps(s) && firmness(s) > pick_firm) {
        pick_firm = firmness(s);
        pick = p;
      }
    }
    if (!pick) break;
    cur = masked(*pick);
    present[*pick] = false;
  }

  res.counterpart = cur;
  res.result_score = static_cast<double>(score(Row(cur)));
  res.result_class = res.result_score >= threshold ? 1 : 0;
  res.found = res.result_class == res.original_class;
  bool minimal = res.found;
  for (std::size_t p = 0; p < players.size(); ++p) {
    if (!present[p]) continue;
    res.changed.push_back(p);
    if (keeps(static_cast<double>(score(Row(masked(p)))))) minimal = false;
  }
  res.verified = minimal;
  return res;
}

}  // namespace xids
