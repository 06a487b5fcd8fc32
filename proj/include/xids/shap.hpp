#pragma once

// Shapley attributions for arbitrary scoring functions.
//
// A coalition game is defined over "players" (single columns, or groups of
// columns such as a one-hot block). v(S) is the mean model output over the
// background rows with the columns of players in S taken from x and all other
// columns taken from the background row.
//
// exact_shapley enumerates all 2^M coalitions and applies the classic weights.
// kernel_shap solves the kernel-weighted least-squares problem with the empty
// and full coalitions as hard constraints, which makes phi_0 + sum(phi) == f(x)
// hold to rounding error regardless of sampling.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "xids/common.hpp"
#include "xids/flow.hpp"

namespace xids {

template <class F>
concept Scorer = requires(const F& f, Row x) {
  { f(x) } -> std::convertible_to<double>;
};

struct BackgroundSet {
  std::vector<std::vector<double>> rows;
  std::string schema_fingerprint;

  std::size_t size() const { return rows.size(); }
  bool empty() const { return rows.empty(); }

  std::vector<double> mean() const {
    if (rows.empty()) throw Error(Errc::invalid_argument, "background set is empty");
    std::vector<double> m(rows.front().size(), 0.0);
    for (const auto& r : rows)
      for (std::size_t i = 0; i < m.size(); ++i) m[i] += r[i];
    for (auto& v : m) v /= static_cast<double>(rows.size());
    return m;
  }

  // Seeded draw of up to `size` rows, restricted to label 0 when `normal_only`.
  static BackgroundSet sample(std::span<const FeatureVector> data, std::size_t size, std::uint64_t seed,
                              bool normal_only, std::string schema_fp = {}) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (!normal_only || data[i].label == 0) pool.push_back(i);
    if (pool.empty()) throw Error(Errc::invalid_argument, "background: no eligible rows");
    detail::SplitMix64 rng(seed);
    auto picked = detail::sample_without_replacement(rng, pool.size(), std::min(size, pool.size()));
    std::sort(picked.begin(), picked.end());
    BackgroundSet bg;
    bg.schema_fingerprint = std::move(schema_fp);
    for (auto k : picked) bg.rows.push_back(data[pool[k]].values);
    return bg;
  }
};

enum class AttributionMode { exact, kernel_enumerated, sampled };

inline const char* mode_name(AttributionMode m) {
  switch (m) {
    case AttributionMode::exact: return "exact";
    case AttributionMode::kernel_enumerated: return "kernel-enumerated";
    case AttributionMode::sampled: return "sampled";
  }
  return "sampled";
}

inline AttributionMode mode_from_name(std::string_view s) {
  if (s == "exact") return AttributionMode::exact;
  if (s == "kernel-enumerated") return AttributionMode::kernel_enumerated;
  if (s == "sampled") return AttributionMode::sampled;
  throw Error(Errc::parse, "unknown attribution mode " + std::string(s));
}

struct Attribution {
  std::vector<std::string> names;  // one per player
  std::vector<double> phi;
  std::vector<double> values;      // x summed over each player's columns, for plotting
  double base_value = 0;           // phi_0 = v(empty)
  double output = 0;               // f(x) = v(full)
  AttributionMode mode = AttributionMode::exact;
  std::size_t coalitions = 0;
  std::uint64_t seed = 0;

  double phi_sum() const { return std::accumulate(phi.begin(), phi.end(), 0.0); }
  double local_accuracy_gap() const { return std::abs(base_value + phi_sum() - output); }

  nlohmann::json to_json() const {
    nlohmann::json phis = nlohmann::json::object();
    for (std::size_t i = 0; i < names.size(); ++i) phis[names[i]] = phi[i];
    return {{"base_value", base_value}, {"output", output}, {"mode", mode_name(mode)},
            {"coalitions", coalitions}, {"seed", std::to_string(seed)}, {"features", names},
            {"values", values},         {"phi", std::move(phis)}};
  }

  static Attribution from_json(const nlohmann::json& j) {
    Attribution a;
    a.names = j.at("features").get<std::vector<std::string>>();
    for (const auto& n : a.names) a.phi.push_back(j.at("phi").at(n).get<double>());
    a.values = j.value("values", std::vector<double>(a.names.size(), 0.0));
    a.base_value = j.at("base_value").get<double>();
    a.output = j.at("output").get<double>();
    a.mode = mode_from_name(j.at("mode").get<std::string>());
    a.coalitions = j.at("coalitions").get<std::size_t>();
    a.seed = std::stoull(j.at("seed").get<std::string>());
    return a;
  }
};

inline std::vector<Player> singleton_players(std::size_t width) {
  std::vector<Player> p;
  for (std::size_t i = 0; i < width; ++i) p.push_back({"x" + std::to_string(i), {i}});
  return p;
}

// v(S) for a coalition given as a per-column mask.
template <Scorer F>
double masked_eval(const F& scorer, Row x, const std::vector<bool>& column_in, const BackgroundSet& background) {
  if (background.empty()) throw Error(Errc::invalid_argument, "masked_eval: empty background");
  if (column_in.size() != x.size()) throw Error(Errc::dimension, "masked_eval: coalition width mismatch");
  std::vector<double> z(x.begin(), x.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!column_in[i]) out.push_back(i);
  double sum = 0;
  for (const auto& b : background.rows) {
    if (b.size() != x.size()) throw Error(Errc::dimension, "masked_eval: background width mismatch");
    for (auto i : out) z[i] = b[i];
    sum += static_cast<double>(scorer(Row(z)));
  }
  return sum / static_cast<double>(background.size());
}

namespace detail {

template <Scorer F>
class CoalitionGame {
 public:
  CoalitionGame(const F& scorer, Row x, const BackgroundSet& bg, const std::vector<Player>& players)
      : scorer_(scorer), x_(x), bg_(bg), players_(players), column_in_(x.size(), false) {
    if (bg.empty()) throw Error(Errc::invalid_argument, "attribution needs a non-empty background set");
    std::vector<bool> seen(x.size(), false);
    for (const auto& p : players)
      for (auto c : p.columns) {
        if (c >= x.size()) throw Error(Errc::dimension, "player " + p.name + " references column out of range");
        if (seen[c]) throw Error(Errc::invalid_argument, "column assigned to two players");
        seen[c] = true;
      }
    // Columns owned by no player are always taken from x.
    for (std::size_t c = 0; c < x.size(); ++c) fixed_.push_back(!seen[c]);
  }

  std::size_t players() const { return players_.size(); }

  template <class Member>
  double value(Member&& in_coalition) {
    for (std::size_t c = 0; c < column_in_.size(); ++c) column_in_[c] = fixed_[c];
    for (std::size_t p = 0; p < players_.size(); ++p)
      if (in_coalition(p))
        for (auto c : players_[p].columns) column_in_[c] = true;
    return masked_eval(scorer_, x_, column_in_, bg_);
  }

  double value_mask(std::uint64_t mask) {
    return value([mask](std::size_t p) { return ((mask >> p) & 1ULL) != 0; });
  }
  double value_vec(const std::vector<std::uint8_t>& z) {
    return value([&z](std::size_t p) { return z[p] != 0; });
  }

  Attribution blank() const {
    Attribution a;
    for (const auto& p : players_) {
      a.names.push_back(p.name);
      double v = 0;
      for (auto c : p.columns) v += x_[c];
      a.values.push_back(v);
    }
    a.phi.assign(players_.size(), 0.0);
    return a;
  }

 private:
  const F& scorer_;
  Row x_;
  const BackgroundSet& bg_;
  const std::vector<Player>& players_;
  std::vector<bool> column_in_;
  std::vector<bool> fixed_;
};

inline double binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  double r = 1;
  for (std::size_t i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  return r;
}

}  // namespace detail

inline constexpr std::size_t kMaxExactPlayers = 20;

// Classic Shapley values by full coalition enumeration (2^M evaluations of v).
template <Scorer F>
Attribution exact_shapley(const F& scorer, Row x, const BackgroundSet& background, const std::vector<Player>& players) {
  const std::size_t m = players.size();
  if (m == 0) throw Error(Errc::invalid_argument, "exact_shapley: no players");
  if (m > kMaxExactPlayers)
    throw Error(Errc::dimension, "exact_shapley: " + std::to_string(m) + " players exceeds the enumeration limit of " +
                                     std::to_string(kMaxExactPlayers));
  detail::CoalitionGame<F> game(scorer, x, background, players);
  const std::uint64_t n = 1ULL << m;
  std::vector<double> v(n);
  for (std::uint64_t s = 0; s < n; ++s) v[s] = game.value_mask(s);

  // weight(|S|) = |S|! (M-|S|-1)! / M! = 1 / (M * C(M-1, |S|))
  std::vector<double> weight(m);
  for (std::size_t s = 0; s < m; ++s) weight[s] = 1.0 / (static_cast<double>(m) * detail::binomial(m - 1, s));

  Attribution a = game.blank();
  for (std::size_t i = 0; i < m; ++i) {
    const std::uint64_t bit = 1ULL << i;
    double phi = 0;
    for (std::uint64_t s = 0; s < n; ++s) {
      if (s & bit) continue;
      phi += weight[static_cast<std::size_t>(std::popcount(s))] * (v[s | bit] - v[s]);
    }
    a.phi[i] = phi;
  }
  a.base_value = v[0];
  a.output = v[n - 1];
  a.mode = AttributionMode::exact;
  a.coalitions = n;
  return a;
}

template <Scorer F>
Attribution exact_shapley(const F& scorer, Row x, const BackgroundSet& background) {
  return exact_shapley(scorer, x, background, singleton_players(x.size()));
}

// Shapley kernel pi(s) = (M-1) / (C(M,s) s (M-s)) for 0 < s < M.
inline double kernel_weight(std::size_t m, std::size_t s) {
  if (s == 0 || s >= m)
    throw Error(Errc::invalid_argument, "kernel_weight: coalition size must satisfy 0 < s < M (empty and full "
                                        "coalitions are equality constraints)");
  return static_cast<double>(m - 1) /
         (detail::binomial(m, s) * static_cast<double>(s) * static_cast<double>(m - s));
}

struct KernelShapParams {
  std::size_t n_coalitions = 0;  // 0 selects 2M + 2048
  std::uint64_t seed = 0;
  int max_retries = 3;
};

namespace detail {

// Weighted least squares with sum(phi) = delta eliminated through the last player.
inline std::optional<std::vector<double>> solve_constrained_wls(const std::vector<std::vector<std::uint8_t>>& z,
                                                                const std::vector<double>& w,
                                                                const std::vector<double>& v, double base,
                                                                double delta, std::size_t m) {
  const std::size_t rows = z.size();
  const std::size_t k = m - 1;
  Eigen::MatrixXd a(rows, k);
  Eigen::VectorXd b(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double sw = std::sqrt(w[r]);
    const double last = z[r][m - 1];
    for (std::size_t i = 0; i < k; ++i) a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = sw * (z[r][i] - last);
    b(static_cast<Eigen::Index>(r)) = sw * (v[r] - base - last * delta);
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  if (static_cast<std::size_t>(qr.rank()) < k) return std::nullopt;
  const Eigen::VectorXd beta = qr.solve(b);
  std::vector<double> phi(m);
  double partial = 0;
  for (std::size_t i = 0; i < k; ++i) {
    phi[i] = beta(static_cast<Eigen::Index>(i));
    partial += phi[i];
  }
  phi[m - 1] = delta - partial;
  return phi;
}

}  // namespace detail

// KernelSHAP. Switches to full enumeration of the 2^M - 2 proper coalitions when
// the budget covers them; otherwise samples paired coalitions (S and its complement)
// with sizes drawn in proportion to the kernel mass per size.
template <Scorer F>
Attribution kernel_shap(const F& scorer, Row x, const BackgroundSet& background, const std::vector<Player>& players,
                        const KernelShapParams& params = {}) {
  const std::size_t m = players.size();
  if (m == 0) throw Error(Errc::invalid_argument, "kernel_shap: no players");
  detail::CoalitionGame<F> game(scorer, x, background, players);
  Attribution a = game.blank();
  a.seed = params.seed;
  a.base_value = game.value_mask(0);
  a.output = game.value([](std::size_t) { return true; });
  const double delta = a.output - a.base_value;
  if (m == 1) {
    a.phi[0] = delta;
    a.mode = AttributionMode::kernel_enumerated;
    return a;
  }

  const std::size_t budget = params.n_coalitions == 0 ? 2 * m + 2048 : params.n_coalitions;
  const bool enumerate = m < 40 && budget >= (1ULL << m) - 2;
  if (!enumerate && budget < m + 2)
    throw Error(Errc::invalid_argument, "kernel_shap: n_coalitions must be at least M + 2");

  if (enumerate) {
    const std::uint64_t n = 1ULL << m;
    std::vector<std::vector<std::uint8_t>> zs;
    std::vector<double> ws, vs;
    for (std::uint64_t s = 1; s + 1 < n; ++s) {
      std::vector<std::uint8_t> z(m);
      for (std::size_t p = 0; p < m; ++p) z[p] = static_cast<std::uint8_t>((s >> p) & 1ULL);
      ws.push_back(kernel_weight(m, static_cast<std::size_t>(std::popcount(s))));
      vs.push_back(game.value_mask(s));
      zs.push_back(std::move(z));
    }
    auto phi = detail::solve_constrained_wls(zs, ws, vs, a.base_value, delta, m);
    if (!phi) throw Error(Errc::degenerate, "kernel_shap: singular design under full enumeration");
    a.phi = std::move(*phi);
    a.mode = AttributionMode::kernel_enumerated;
    a.coalitions = zs.size();
    return a;
  }

  // Cumulative kernel mass over sizes 1..M-1.
  std::vector<double> size_cdf(m - 1);
  double total = 0;
  for (std::size_t s = 1; s < m; ++s) {
    total += static_cast<double>(m - 1) / (static_cast<double>(s) * static_cast<double>(m - s));
    size_cdf[s - 1] = total;
  }

  for (int attempt = 0; attempt <= params.max_retries; ++attempt) {
    detail::SplitMix64 rng(detail::derive_seed(params.seed, static_cast<std::uint64_t>(attempt)));
    std::map<std::vector<std::uint8_t>, double> counts;
    std::size_t drawn = 0;
    while (drawn < budget) {
      const double u = detail::uniform01(rng) * total;
      const std::size_t s =
          static_cast<std::size_t>(std::upper_bound(size_cdf.begin(), size_cdf.end(), u) - size_cdf.begin()) + 1;
      const auto members = detail::sample_without_replacement(rng, m, std::min(s, m - 1));
      std::vector<std::uint8_t> z(m, 0);
      for (auto p : members) z[p] = 1;
      std::vector<std::uint8_t> complement(m);
      for (std::size_t p = 0; p < m; ++p) complement[p] = static_cast<std::uint8_t>(1 - z[p]);
      counts[std::move(z)] += 1.0;
      counts[std::move(complement)] += 1.0;
      drawn += 2;
    }
    std::vector<std::vector<std::uint8_t>> zs;
    std::vector<double> ws, vs;
    for (auto& [z, c] : counts) {
      vs.push_back(game.value_vec(z));
      ws.push_back(c);
      zs.push_back(z);
    }
    auto phi = detail::solve_constrained_wls(zs, ws, vs, a.base_value, delta, m);
    if (!phi) continue;
    a.phi = std::move(*phi);
    a.mode = AttributionMode::sampled;
    a.coalitions = zs.size();
    return a;
  }
  throw Error(Errc::degenerate, "kernel_shap: singular coalition design after " +
                                    std::to_string(params.max_retries + 1) + " attempts");
}

template <Scorer F>
Attribution kernel_shap(const F& scorer, Row x, const BackgroundSet& background, const KernelShapParams& params = {}) {
  return kernel_shap(scorer, x, background, singleton_players(x.size()), params);
}

struct GlobalSummary {
  std::vector<std::string> names;
  std::vector<double> mean_abs;
  std::vector<std::size_t> order;  // indices into names, most important first
  std::vector<std::vector<std::pair<double, double>>> points;  // per player: (value, phi)

  nlohmann::json to_json() const {
    nlohmann::json ranked = nlohmann::json::array();
    for (auto i : order) ranked.push_back({{"feature", names[i]}, {"mean_abs_phi", mean_abs[i]}});
    nlohmann::json pts = nlohmann::json::object();
    for (std::size_t i = 0; i < names.size(); ++i) {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& [val, phi] : points[i]) arr.push_back({val, phi});
      pts[names[i]] = std::move(arr);
    }
    return {{"ranking", std::move(ranked)}, {"points", std::move(pts)}};
  }
};

// Mean |phi| per player; ranking by decreasing mean |phi|, ties by name.
inline GlobalSummary summarize(std::span<const Attribution> attributions) {
  if (attributions.empty()) throw Error(Errc::invalid_argument, "summarize: no attributions");
  GlobalSummary g;
  g.names = attributions.front().names;
  const std::size_t m = g.names.size();
  g.mean_abs.assign(m, 0.0);
  g.points.resize(m);
  for (const auto& a : attributions) {
    if (a.names != g.names) throw Error(Errc::schema_mismatch, "summarize: attributions use different players");
    for (std::size_t i = 0; i < m; ++i) {
      g.mean_abs[i] += std::abs(a.phi[i]);
      g.points[i].emplace_back(i < a.values.size() ? a.values[i] : 0.0, a.phi[i]);
    }
  }
  for (auto& v : g.mean_abs) v /= static_cast<double>(attributions.size());
  g.order.resize(m);
  std::iota(g.order.begin(), g.order.end(), 0);
  std::sort(g.order.begin(), g.order.end(), [&](std::size_t a, std::size_t b) {
    if (g.mean_abs[a] != g.mean_abs[b]) return g.mean_abs[a] > g.mean_abs[b];
    return g.names[a] < g.names[b];
  });
  return g;
}

}  // namespace xids
