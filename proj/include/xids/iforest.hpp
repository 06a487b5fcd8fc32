#pragma once

// Isolation forest: tree growth, path lengths, scores, threshold calibration and
// the precision/recall/f1 classification report.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "xids/common.hpp"
#include "xids/flow.hpp"

namespace xids {

inline constexpr double kEulerGamma = 0.5772156649;

// Average unsuccessful-search path length in a BST of n points:
// c(n) = 2 H(n-1) - 2 (n-1) / n with H(i) = ln(i) + gamma; c(n <= 1) = 0.
inline double average_path_length(double n) {
  if (n <= 1) return 0.0;
  const double harmonic = std::log(n - 1) + kEulerGamma;
  return 2.0 * harmonic - 2.0 * (n - 1) / n;
}

namespace detail {

inline double leaf_adjustment(std::uint32_t size) {
  static const std::vector<double> table = [] {
    std::vector<double> t(4097);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = average_path_length(static_cast<double>(i));
    return t;
  }();
  return size < table.size() ? table[size] : average_path_length(static_cast<double>(size));
}

}  // namespace detail

class IsolationTree {
 public:
  struct Node {
    std::int32_t column = -1;  // -1 marks a leaf
    double split = 0;          // x[column] < split goes left
    std::int32_t left = -1;
    std::int32_t right = -1;
    std::uint32_t size = 0;    // training points reaching this node
    std::uint32_t depth = 0;

    bool leaf() const { return column < 0; }
  };

  IsolationTree() = default;
  explicit IsolationTree(std::vector<Node> nodes) : nodes_(std::move(nodes)) {}

  // Grows a tree over `sample` (row indices into data) until isolation, zero-width
  // ranges, or `height_limit`.
  template <class Rng>
  static IsolationTree grow(std::span<const FeatureVector> data, std::vector<std::size_t> sample,
                            std::uint32_t height_limit, Rng& rng) {
    IsolationTree tree;
    tree.nodes_.reserve(2 * sample.size());
    tree.build(data, sample, 0, sample.size(), 0, height_limit, rng);
    return tree;
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& root() const { return nodes_.front(); }

  const Node& leaf_for(Row x) const {
    const Node* n = &nodes_.front();
    while (!n->leaf()) n = &nodes_[static_cast<std::size_t>(x[static_cast<std::size_t>(n->column)] < n->split ? n->left : n->right)];
    return *n;
  }

  // Depth of the reached leaf plus c(leaf size) for unresolved leaves.
  double path_length(Row x) const {
    const Node& leaf = leaf_for(x);
    return static_cast<double>(leaf.depth) + detail::leaf_adjustment(leaf.size);
  }

  std::uint32_t height() const {
    std::uint32_t h = 0;
    for (const auto& n : nodes_) h = std::max(h, n.depth);
    return h;
  }

 private:
  template <class Rng>
  std::int32_t build(std::span<const FeatureVector> data, std::vector<std::size_t>& idx, std::size_t lo,
                     std::size_t hi, std::uint32_t depth, std::uint32_t limit, Rng& rng) {
    const auto self = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back(Node{-1, 0, -1, -1, static_cast<std::uint32_t>(hi - lo), depth});
    if (hi - lo <= 1 || depth >= limit) return self;

    const std::size_t width = data[idx[lo]].size();
    std::vector<std::size_t> splittable;
    std::vector<double> mins(width), maxs(width);
    for (std::size_t c = 0; c < width; ++c) {
      double mn = data[idx[lo]].values[c], mx = mn;
      for (std::size_t k = lo + 1; k < hi; ++k) {
        const double v = data[idx[k]].values[c];
        mn = std::min(mn, v);
        mx = std::max(mx, v);
      }
      mins[c] = mn;
      maxs[c] = mx;
      if (mx > mn) splittable.push_back(c);
    }
    if (splittable.empty()) return self;

    const std::size_t col = splittable[detail::uniform_index(rng, splittable.size())];
    const double mn = mins[col], mx = maxs[col];
    double split = mn + detail::uniform01(rng) * (mx - mn);
    for (int retry = 0; retry < 8 && !(split > mn && split < mx); ++retry)
      split = mn + detail::uniform01(rng) * (mx - mn);
    if (!(split > mn && split < mx)) split = mn + 0.5 * (mx - mn);
    if (!(split > mn && split < mx)) split = mx;  // adjacent doubles: x < mx still separates

    const auto mid = std::partition(idx.begin() + static_cast<std::ptrdiff_t>(lo),
                                    idx.begin() + static_cast<std::ptrdiff_t>(hi),
                                    [&](std::size_t r) { return data[r].values[col] < split; });
    const auto m = static_cast<std::size_t>(mid - idx.begin());

    nodes_[static_cast<std::size_t>(self)].column = static_cast<std::int32_t>(col);
    nodes_[static_cast<std::size_t>(self)].split = split;
    const auto l = build(data, idx, lo, m, depth + 1, limit, rng);
    const auto r = build(data, idx, m, hi, depth + 1, limit, rng);
    nodes_[static_cast<std::size_t>(self)].left = l;
    nodes_[static_cast<std::size_t>(self)].right = r;
    return self;
  }

  std::vector<Node> nodes_;
};

struct ForestParams {
  std::size_t trees = 100;
  std::size_t subsample = 256;
  std::uint64_t seed = 42;
  unsigned threads = 1;
};

class ForestModel {
 public:
  static constexpr int kVersion = 1;

  ForestModel() = default;
  ForestModel(std::vector<IsolationTree> trees, std::size_t subsample, std::uint64_t seed, std::string schema_fp)
      : trees_(std::move(trees)),
        subsample_(subsample),
        seed_(seed),
        norm_(average_path_length(static_cast<double>(subsample))),
        schema_fingerprint_(std::move(schema_fp)) {}

  const std::vector<IsolationTree>& trees() const { return trees_; }
  std::size_t subsample() const { return subsample_; }
  std::uint64_t seed() const { return seed_; }
  double normalizer() const { return norm_; }
  const std::string& schema_fingerprint() const { return schema_fingerprint_; }
  double threshold() const { return threshold_; }
  void set_threshold(double theta) {
    if (!(theta > 0 && theta < 1)) throw Error(Errc::invalid_argument, "threshold must lie in (0,1)");
    threshold_ = theta;
  }

  double mean_path_length(Row x) const {
    double sum = 0;
    for (const auto& t : trees_) sum += t.path_length(x);
    return sum / static_cast<double>(trees_.size());
  }

  // s = 2^(-E[h(x)] / c(psi)); higher is more anomalous.
  double score(Row x) const { return score_from_depth(mean_path_length(x)); }
  double score_from_depth(double mean_depth) const { return std::exp2(-mean_depth / norm_); }

  double operator()(Row x) const { return score(x); }

  int classify(Row x) const { return classify_score(score(x), threshold_); }
  static int classify_score(double score, double theta) { return score >= theta ? 1 : 0; }

  nlohmann::json to_json() const {
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : trees_) {
      nlohmann::json col = nlohmann::json::array(), split = nlohmann::json::array(), left = nlohmann::json::array(),
                     right = nlohmann::json::array(), size = nlohmann::json::array(), depth = nlohmann::json::array();
      for (const auto& n : t.nodes()) {
        col.push_back(n.column);
        split.push_back(n.split);
        left.push_back(n.left);
        right.push_back(n.right);
        size.push_back(n.size);
        depth.push_back(n.depth);
      }
      trees.push_back({{"column", col}, {"split", split}, {"left", left}, {"right", right}, {"size", size},
                       {"depth", depth}});
    }
    return {{"version", kVersion},
            {"schema_fingerprint", schema_fingerprint_},
            {"trees_count", trees_.size()},
            {"subsample", subsample_},
            {"threshold", threshold_},
            {"seed", std::to_string(seed_)},
            {"trees", std::move(trees)}};
  }

  static ForestModel from_json(const nlohmann::json& j) {
    if (j.at("version").get<int>() != kVersion) throw Error(Errc::parse, "unsupported model version");
    std::vector<IsolationTree> trees;
    for (const auto& jt : j.at("trees")) {
      const auto& col = jt.at("column");
      std::vector<IsolationTree::Node> nodes(col.size());
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        nodes[i].column = col[i].get<std::int32_t>();
        nodes[i].split = jt.at("split")[i].get<double>();
        nodes[i].left = jt.at("left")[i].get<std::int32_t>();
        nodes[i].right = jt.at("right")[i].get<std::int32_t>();
        nodes[i].size = jt.at("size")[i].get<std::uint32_t>();
        nodes[i].depth = jt.at("depth")[i].get<std::uint32_t>();
      }
      trees.emplace_back(std::move(nodes));
    }
    if (trees.size() != j.at("trees_count").get<std::size_t>()) throw Error(Errc::parse, "tree count mismatch");
    ForestModel m(std::move(trees), j.at("subsample").get<std::size_t>(),
                  std::stoull(j.at("seed").get<std::string>()), j.at("schema_fingerprint").get<std::string>());
    m.threshold_ = j.at("threshold").get<double>();
    return m;
  }

  // Throws unless the model was trained against `schema`.
  void verify_schema(const FeatureSchema& schema) const {
    if (schema.fingerprint() != schema_fingerprint_)
      throw Error(Errc::schema_mismatch, "model expects schema " + schema_fingerprint_ + " but got " +
                                             schema.fingerprint());
  }

  std::string fingerprint() const { return detail::fingerprint(to_json().dump()); }

 private:
  std::vector<IsolationTree> trees_;
  std::size_t subsample_ = 0;
  std::uint64_t seed_ = 0;
  double norm_ = 0;
  double threshold_ = 0.5;
  std::string schema_fingerprint_;
};

// Each tree draws its own subsample from a stream derived from (seed, tree index),
// so threaded and serial builds are identical.
inline ForestModel fit_forest(std::span<const FeatureVector> data, const ForestParams& params,
                              std::string schema_fingerprint = {}) {
  if (data.empty()) throw Error(Errc::invalid_argument, "fit_forest: empty data");
  if (params.subsample < 2) throw Error(Errc::invalid_argument, "fit_forest: subsample size must be >= 2");
  if (params.subsample > data.size())
    throw Error(Errc::invalid_argument, "fit_forest: subsample size exceeds data size");
  if (params.trees == 0) throw Error(Errc::invalid_argument, "fit_forest: need at least one tree");
  const std::size_t width = data.front().size();
  for (const auto& v : data)
    if (v.size() != width) throw Error(Errc::dimension, "fit_forest: ragged feature vectors");

  const auto limit = static_cast<std::uint32_t>(std::ceil(std::log2(static_cast<double>(params.subsample))));
  std::vector<IsolationTree> trees(params.trees);
  detail::parallel_for(params.trees, params.threads, [&](std::size_t t) {
    detail::SplitMix64 rng(detail::derive_seed(params.seed, t));
    auto sample = detail::sample_without_replacement(rng, data.size(), params.subsample);
    trees[t] = IsolationTree::grow(data, std::move(sample), limit, rng);
  });
  return ForestModel(std::move(trees), params.subsample, params.seed, std::move(schema_fingerprint));
}

// ---------------------------------------------------------------------------
// Evaluation

struct ClassMetrics {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  std::size_t support = 0;
};

struct ClassificationReport {
  ClassMetrics normal;  // class 0
  ClassMetrics attack;  // class 1
  double accuracy = 0;
  ClassMetrics macro;
  ClassMetrics weighted;
  std::size_t tn = 0, fp = 0, fn = 0, tp = 0;

  std::size_t total() const { return tn + fp + fn + tp; }

  // Two-decimal layout of the usual precision/recall/f1/support table.
  std::string to_text() const {
    auto row = [](const std::string& name, const ClassMetrics& m) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "%12s %9.2f %9.2f %9.2f %9zu\n", name.c_str(), m.precision, m.recall, m.f1,
                    m.support);
      return std::string(buf);
    };
    std::string out;
    char head[128];
    std::snprintf(head, sizeof head, "%12s %9s %9s %9s %9s\n\n", "", "precision", "recall", "f1-score", "support");
    out += head;
    out += row("0", normal);
    out += row("1", attack);
    char acc[128];
    std::snprintf(acc, sizeof acc, "\n%12s %9s %9s %9.2f %9zu\n", "accuracy", "", "", accuracy, total());
    out += acc;
    out += row("macro avg", macro);
    out += row("weighted avg", weighted);
    return out;
  }

  nlohmann::json to_json() const {
    auto m = [](const ClassMetrics& c) {
      return nlohmann::json{{"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}, {"support", c.support}};
    };
    return {{"0", m(normal)},
            {"1", m(attack)},
            {"accuracy", accuracy},
            {"macro_avg", m(macro)},
            {"weighted_avg", m(weighted)},
            {"confusion", {{"tn", tn}, {"fp", fp}, {"fn", fn}, {"tp", tp}}}};
  }
};

inline ClassificationReport report_from_counts(std::size_t tn, std::size_t fp, std::size_t fn, std::size_t tp) {
  ClassificationReport r;
  r.tn = tn, r.fp = fp, r.fn = fn, r.tp = tp;
  auto ratio = [](std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); };
  auto f1 = [](double p, double q) { return p + q == 0 ? 0.0 : 2 * p * q / (p + q); };
  r.attack = {ratio(tp, tp + fp), ratio(tp, tp + fn), 0, tp + fn};
  r.attack.f1 = f1(r.attack.precision, r.attack.recall);
  r.normal = {ratio(tn, tn + fn), ratio(tn, tn + fp), 0, tn + fp};
  r.normal.f1 = f1(r.normal.precision, r.normal.recall);
  const std::size_t n = tn + fp + fn + tp;
  r.accuracy = ratio(tn + tp, n);
  r.macro = {(r.normal.precision + r.attack.precision) / 2, (r.normal.recall + r.attack.recall) / 2,
             (r.normal.f1 + r.attack.f1) / 2, n};
  const double w0 = ratio(r.normal.support, n), w1 = ratio(r.attack.support, n);
  r.weighted = {w0 * r.normal.precision + w1 * r.attack.precision, w0 * r.normal.recall + w1 * r.attack.recall,
                w0 * r.normal.f1 + w1 * r.attack.f1, n};
  return r;
}

inline ClassificationReport report_from_predictions(std::span<const int> truth, std::span<const int> predicted) {
  if (truth.size() != predicted.size()) throw Error(Errc::dimension, "report: size mismatch");
  std::size_t tn = 0, fp = 0, fn = 0, tp = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == 1) (predicted[i] == 1 ? tp : fn)++;
    else (predicted[i] == 1 ? fp : tn)++;
  }
  return report_from_counts(tn, fp, fn, tp);
}

inline ClassificationReport report(const ForestModel& model, double theta, std::span<const FeatureVector> labeled) {
  if (labeled.empty()) throw Error(Errc::invalid_argument, "report: empty data");
  std::vector<int> truth, pred;
  truth.reserve(labeled.size());
  pred.reserve(labeled.size());
  for (const auto& v : labeled) {
    truth.push_back(v.label);
    pred.push_back(ForestModel::classify_score(model.score(v.row()), theta));
  }
  return report_from_predictions(truth, pred);
}

struct ThresholdSweep {
  double threshold = 0;
  double macro_f1 = 0;
  std::vector<std::pair<double, double>> candidates;  // (theta, macro-f1), ascending theta
};

// Picks theta among the distinct observed scores maximizing macro-f1 of
// "attack iff score >= theta"; ties go to the lower theta.
inline ThresholdSweep calibrate_threshold_scores(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw Error(Errc::dimension, "calibrate_threshold: size mismatch");
  std::size_t positives = 0;
  for (int l : labels) positives += l == 1 ? 1 : 0;
  const std::size_t negatives = labels.size() - positives;
  if (positives == 0 || negatives == 0)
    throw Error(Errc::degenerate, "calibrate_threshold: labeled data must contain both classes");

  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  if (scores[order.front()] == scores[order.back()])
    throw Error(Errc::degenerate, "calibrate_threshold: all scores identical, classes cannot be separated");

  // Walk scores descending; at each distinct value theta, everything >= theta is predicted attack.
  ThresholdSweep sweep;
  std::size_t tp = 0, fp = 0;
  for (std::size_t k = 0; k < order.size();) {
    const double theta = scores[order[k]];
    while (k < order.size() && scores[order[k]] == theta) {
      (labels[order[k]] == 1 ? tp : fp)++;
      ++k;
    }
    const auto r = report_from_counts(negatives - fp, fp, positives - tp, tp);
    sweep.candidates.emplace_back(theta, r.macro.f1);
  }
  std::reverse(sweep.candidates.begin(), sweep.candidates.end());
  sweep.threshold = sweep.candidates.front().first;
  sweep.macro_f1 = sweep.candidates.front().second;
  for (const auto& [theta, f1] : sweep.candidates) {
    if (f1 > sweep.macro_f1) {
      sweep.threshold = theta;
      sweep.macro_f1 = f1;
    }
  }
  return sweep;
}

inline ThresholdSweep calibrate_threshold(const ForestModel& model, std::span<const FeatureVector> labeled) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& v : labeled) {
    scores.push_back(model.score(v.row()));
    labels.push_back(v.label);
  }
  return calibrate_threshold_scores(scores, labels);
}

}  // namespace xids
