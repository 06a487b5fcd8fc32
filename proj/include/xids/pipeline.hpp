#pragma once

// End-to-end plumbing shared by the CLI, the HTTP service and the acceptance
// suite: run configuration, artifact I/O, training, explanation and the alert store.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "xids/common.hpp"
#include "xids/flow.hpp"
#include "xids/iforest.hpp"
#include "xids/labeler.hpp"
#include "xids/shap.hpp"
#include "xids/surrogates.hpp"

namespace xids {

namespace fs = std::filesystem;

struct RunConfig {
  std::string train_path = "KDDTrain+.txt";
  std::string test_path = "KDDTest+.txt";
  std::string output_dir = "xids-out";

  struct Subsample {
    bool enabled = true;
    bool stratified = true;
    std::size_t size = 12598;
    std::size_t normal = 6776;  // explicit class counts; 0 means proportional to `size`
    std::size_t attack = 5822;
    std::uint64_t seed = 42;
  } subsample;

  struct Forest {
    std::size_t trees = 100;
    std::size_t subsample = 256;
    std::uint64_t seed = 7;
    std::string fit_on = "normal";  // "normal" or "all"
  } forest;

  struct Shap {
    std::size_t background_size = 100;
    std::size_t n_coalitions = 0;  // 0 selects 2M + 2048
    std::string granularity = "collapsed";
    std::uint64_t seed = 11;
  } shap;

  struct Labeler {
    std::size_t k = 3;
    std::string selection = "positive";
  } labeler;

  struct Surrogates {
    double pn_step = 0.01;
    std::size_t pn_max_changed = 5;
    std::size_t lime_perturb = 5000;
    std::size_t lime_k = 5;
    std::size_t prototypes = 5;
    std::size_t dnf_max_clauses = 5;
    std::size_t dnf_max_literals = 3;
    std::uint64_t seed = 13;
  } surrogates;

  unsigned threads = 1;

  Granularity granularity() const {
    if (shap.granularity == "collapsed") return Granularity::collapsed;
    if (shap.granularity == "raw") return Granularity::raw;
    throw Error(Errc::invalid_argument, "unknown granularity " + shap.granularity);
  }
  LabelSelection selection() const {
    if (labeler.selection == "positive") return LabelSelection::positive;
    if (labeler.selection == "magnitude") return LabelSelection::magnitude;
    throw Error(Errc::invalid_argument, "unknown label selection " + labeler.selection);
  }

  nlohmann::json to_json() const {
    return {
        {"train_path", train_path},
        {"test_path", test_path},
        {"output_dir", output_dir},
        {"subsample",
         {{"enabled", subsample.enabled}, {"stratified", subsample.stratified}, {"size", subsample.size},
          {"normal", subsample.normal}, {"attack", subsample.attack}, {"seed", subsample.seed}}},
        {"forest",
         {{"trees", forest.trees}, {"subsample", forest.subsample}, {"seed", forest.seed}, {"fit_on", forest.fit_on}}},
        {"shap",
         {{"background_size", shap.background_size}, {"n_coalitions", shap.n_coalitions},
          {"granularity", shap.granularity}, {"seed", shap.seed}}},
        {"labeler", {{"k", labeler.k}, {"selection", labeler.selection}}},
        {"surrogates",
         {{"pn_step", surrogates.pn_step}, {"pn_max_changed", surrogates.pn_max_changed},
          {"lime_perturb", surrogates.lime_perturb}, {"lime_k", surrogates.lime_k},
          {"prototypes", surrogates.prototypes}, {"dnf_max_clauses", surrogates.dnf_max_clauses},
          {"dnf_max_literals", surrogates.dnf_max_literals}, {"seed", surrogates.seed}}},
        {"threads", threads},
    };
  }

  // Missing keys keep their defaults.
  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    c.train_path = j.value("train_path", c.train_path);
    c.test_path = j.value("test_path", c.test_path);
    c.output_dir = j.value("output_dir", c.output_dir);
    if (j.contains("subsample")) {
      const auto& s = j["subsample"];
      c.subsample.enabled = s.value("enabled", c.subsample.enabled);
      c.subsample.stratified = s.value("stratified", c.subsample.stratified);
      c.subsample.size = s.value("size", c.subsample.size);
      c.subsample.normal = s.value("normal", c.subsample.normal);
      c.subsample.attack = s.value("attack", c.subsample.attack);
      c.subsample.seed = s.value("seed", c.subsample.seed);
    }
    if (j.contains("forest")) {
      const auto& f = j["forest"];
      c.forest.trees = f.value("trees", c.forest.trees);
      c.forest.subsample = f.value("subsample", c.forest.subsample);
      c.forest.seed = f.value("seed", c.forest.seed);
      c.forest.fit_on = f.value("fit_on", c.forest.fit_on);
    }
    if (j.contains("shap")) {
      const auto& s = j["shap"];
      c.shap.background_size = s.value("background_size", c.shap.background_size);
      c.shap.n_coalitions = s.value("n_coalitions", c.shap.n_coalitions);
      c.shap.granularity = s.value("granularity", c.shap.granularity);
      c.shap.seed = s.value("seed", c.shap.seed);
    }
    if (j.contains("labeler")) {
      c.labeler.k = j["labeler"].value("k", c.labeler.k);
      c.labeler.selection = j["labeler"].value("selection", c.labeler.selection);
    }
    if (j.contains("surrogates")) {
      const auto& s = j["surrogates"];
      c.surrogates.pn_step = s.value("pn_step", c.surrogates.pn_step);
      c.surrogates.pn_max_changed = s.value("pn_max_changed", c.surrogates.pn_max_changed);
      c.surrogates.lime_perturb = s.value("lime_perturb", c.surrogates.lime_perturb);
      c.surrogates.lime_k = s.value("lime_k", c.surrogates.lime_k);
      c.surrogates.prototypes = s.value("prototypes", c.surrogates.prototypes);
      c.surrogates.dnf_max_clauses = s.value("dnf_max_clauses", c.surrogates.dnf_max_clauses);
      c.surrogates.dnf_max_literals = s.value("dnf_max_literals", c.surrogates.dnf_max_literals);
      c.surrogates.seed = s.value("seed", c.surrogates.seed);
    }
    c.threads = j.value("threads", c.threads);
    if (c.forest.fit_on != "normal" && c.forest.fit_on != "all")
      throw Error(Errc::invalid_argument, "forest.fit_on must be \"normal\" or \"all\"");
    (void)c.granularity();
    (void)c.selection();
    return c;
  }

  // Everything that shapes the artifacts; the output location does not.
  nlohmann::json content_json() const {
    auto j = to_json();
    j.erase("output_dir");
    return j;
  }
  std::string hash() const { return detail::fingerprint(content_json().dump()); }

  // Relative dataset paths resolve against $XIDS_DATA_DIR when it is set.
  static fs::path data_path(const std::string& p) {
    const fs::path path(p);
    if (path.is_absolute()) return path;
    if (const char* dir = std::getenv("XIDS_DATA_DIR"); dir && *dir) return fs::path(dir) / path;
    return path;
  }
};

inline RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot read config " + path.string());
  const auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw Error(Errc::parse, "config is not valid JSON: " + path.string());
  return RunConfig::from_json(j);
}

// ---------------------------------------------------------------------------
// File helpers

inline std::vector<FlowRecord> load_records(const fs::path& path, bool strict = true) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot read " + path.string());
  auto parsed = parse_records(in);
  if (strict && !parsed.issues.empty()) {
    const auto& first = parsed.issues.front();
    throw Error(Errc::parse, path.string() + ":" + std::to_string(first.line) + ": " + first.message + " (" +
                                 std::to_string(parsed.issues.size()) + " malformed line(s))");
  }
  return std::move(parsed.records);
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot read " + path.string());
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw Error(Errc::parse, "invalid JSON in " + path.string());
  return j;
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(Errc::io, "write failed: " + path.string());
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(1) + "\n"); }

struct ArtifactPaths {
  fs::path dir;
  fs::path schema() const { return dir / "schema.json"; }
  fs::path model() const { return dir / "model.json"; }
  fs::path background() const { return dir / "background.json"; }
  fs::path report_text() const { return dir / "report.txt"; }
  fs::path report_json() const { return dir / "report.json"; }
  fs::path registry() const { return dir / "registry.jsonl"; }
  fs::path alerts() const { return dir / "alerts.jsonl"; }
  fs::path summary() const { return dir / "summary.json"; }
  fs::path purity() const { return dir / "purity.json"; }
};

// ---------------------------------------------------------------------------
// Training

struct TrainingSet {
  std::vector<FlowRecord> records;
  FeatureSchema schema;
  std::vector<FeatureVector> vectors;
};

inline TrainingSet prepare_training(const RunConfig& cfg) {
  TrainingSet ts;
  auto all = load_records(RunConfig::data_path(cfg.train_path));
  if (cfg.subsample.enabled) {
    if (cfg.subsample.stratified && cfg.subsample.normal + cfg.subsample.attack > 0)
      ts.records = stratified_subsample(all, cfg.subsample.normal, cfg.subsample.attack, cfg.subsample.seed);
    else if (cfg.subsample.stratified)
      ts.records = stratified_subsample(all, cfg.subsample.size, cfg.subsample.seed);
    else {
      detail::SplitMix64 rng(cfg.subsample.seed);
      auto idx = detail::sample_without_replacement(rng, all.size(), std::min(cfg.subsample.size, all.size()));
      std::sort(idx.begin(), idx.end());
      for (auto i : idx) ts.records.push_back(all[i]);
    }
  } else {
    ts.records = std::move(all);
  }
  ts.schema = fit_schema(ts.records);
  ts.vectors = encode_all(ts.records, ts.schema);
  return ts;
}

struct BackgroundArtifact {
  BackgroundSet set;
  std::vector<CategoricalGroup> groups;

  nlohmann::json to_json(const std::string& config_hash) const {
    nlohmann::json gs = nlohmann::json::array();
    for (const auto& g : groups) gs.push_back({{"columns", g.columns}, {"probabilities", g.probabilities}});
    return {{"version", 1}, {"config_hash", config_hash}, {"schema_fingerprint", set.schema_fingerprint},
            {"rows", set.rows}, {"categorical_groups", std::move(gs)}};
  }
  static BackgroundArtifact from_json(const nlohmann::json& j) {
    BackgroundArtifact b;
    b.set.rows = j.at("rows").get<std::vector<std::vector<double>>>();
    b.set.schema_fingerprint = j.at("schema_fingerprint").get<std::string>();
    for (const auto& g : j.at("categorical_groups"))
      b.groups.push_back({g.at("columns").get<std::vector<std::size_t>>(), g.at("probabilities").get<std::vector<double>>()});
    return b;
  }
};

struct TrainResult {
  ForestModel model;
  ThresholdSweep sweep;
  ClassificationReport report;
  BackgroundArtifact background;
};

inline TrainResult train_detector(const RunConfig& cfg, const TrainingSet& ts) {
  std::vector<FeatureVector> fit_rows;
  if (cfg.forest.fit_on == "normal") {
    for (const auto& v : ts.vectors)
      if (v.label == 0) fit_rows.push_back(v);
  } else {
    fit_rows = ts.vectors;
  }
  if (fit_rows.size() < 2) throw Error(Errc::invalid_argument, "train: not enough rows to fit the forest");
  ForestParams fp{cfg.forest.trees, std::min(cfg.forest.subsample, fit_rows.size()), cfg.forest.seed, cfg.threads};
  TrainResult r;
  r.model = fit_forest(fit_rows, fp, ts.schema.fingerprint());
  r.sweep = calibrate_threshold(r.model, ts.vectors);
  r.model.set_threshold(r.sweep.threshold);
  r.report = report(r.model, r.model.threshold(), ts.vectors);
  r.background.set = BackgroundSet::sample(ts.vectors, cfg.shap.background_size, cfg.shap.seed, /*normal_only=*/true,
                                           ts.schema.fingerprint());
  r.background.groups = categorical_groups(ts.schema, ts.vectors);
  return r;
}

inline nlohmann::json model_artifact(const ForestModel& model, const RunConfig& cfg) {
  auto j = model.to_json();
  j["config_hash"] = cfg.hash();
  j["config"] = cfg.content_json();
  return j;
}

inline nlohmann::json report_artifact(const ClassificationReport& rep, const RunConfig& cfg, double threshold) {
  auto j = rep.to_json();
  j["config_hash"] = cfg.hash();
  j["threshold"] = threshold;
  j["forest_seed"] = std::to_string(cfg.forest.seed);
  return j;
}

inline void save_training(const ArtifactPaths& paths, const RunConfig& cfg, const FeatureSchema& schema,
                          const TrainResult& r) {
  auto sj = schema.to_json();
  sj["config_hash"] = cfg.hash();
  write_json(paths.schema(), sj);
  write_text(paths.model(), model_artifact(r.model, cfg).dump() + "\n");
  write_json(paths.background(), r.background.to_json(cfg.hash()));
  write_text(paths.report_text(), r.report.to_text() + "threshold " + detail::format_fixed(r.model.threshold(), 6) +
                                      "\nconfig " + cfg.hash() + "\n");
  write_json(paths.report_json(), report_artifact(r.report, cfg, r.model.threshold()));
}

// ---------------------------------------------------------------------------
// Detector: loaded artifacts plus explanation entry points

struct Explanation {
  double score = 0;
  int cls = 0;
  std::optional<Attribution> attribution;
  std::optional<AutoLabel> label;
};

struct ExplainOptions {
  bool exact = false;
  bool explain_normal = false;
  std::optional<std::size_t> k;
  std::vector<std::string> players;  // restrict the game to these feature names (others stay at x)
};

class Detector {
 public:
  Detector(FeatureSchema schema, ForestModel model, BackgroundArtifact background, RunConfig cfg)
      : schema_(std::move(schema)), model_(std::move(model)), bg_(std::move(background)), cfg_(std::move(cfg)) {
    model_.verify_schema(schema_);
    if (bg_.set.schema_fingerprint != schema_.fingerprint())
      throw Error(Errc::schema_mismatch, "background set was built for schema " + bg_.set.schema_fingerprint +
                                             " but the model uses " + schema_.fingerprint());
    players_ = feature_players(schema_, cfg_.granularity());
    bg_mean_ = bg_.set.mean();
  }

  static Detector load(const ArtifactPaths& paths) {
    auto schema = FeatureSchema::from_json(read_json(paths.schema()));
    const auto mj = read_json(paths.model());
    auto model = ForestModel::from_json(mj);
    auto cfg = RunConfig::from_json(mj.at("config"));
    auto bg = BackgroundArtifact::from_json(read_json(paths.background()));
    return Detector(std::move(schema), std::move(model), std::move(bg), std::move(cfg));
  }

  const FeatureSchema& schema() const { return schema_; }
  const ForestModel& model() const { return model_; }
  const RunConfig& config() const { return cfg_; }
  const BackgroundSet& background() const { return bg_.set; }
  const std::vector<CategoricalGroup>& categorical_groups() const { return bg_.groups; }
  const std::vector<Player>& players() const { return players_; }
  const std::vector<double>& background_mean() const { return bg_mean_; }

  FeatureVector encode(const FlowRecord& rec) const { return xids::encode(rec, schema_); }

  FeatureVector from_values(std::vector<double> values) const {
    if (values.size() != schema_.width())
      throw Error(Errc::dimension, "expected " + std::to_string(schema_.width()) + " encoded values, got " +
                                       std::to_string(values.size()));
    FeatureVector v;
    v.values = std::move(values);
    return v;
  }

  double score(Row x) const { return model_.score(x); }
  int classify(Row x) const { return model_.classify(x); }

  std::vector<Player> select_players(const std::vector<std::string>& names) const {
    if (names.empty()) return players_;
    std::vector<Player> out;
    for (const auto& n : names) {
      auto it = std::find_if(players_.begin(), players_.end(), [&](const Player& p) { return p.name == n; });
      if (it == players_.end()) throw Error(Errc::not_found, "unknown feature for attribution: " + n);
      out.push_back(*it);
    }
    return out;
  }

  Attribution attribute(Row x, bool exact, std::uint64_t seed, const std::vector<Player>& players) const {
    auto scorer = [this](Row r) { return model_.score(r); };
    if (exact) return exact_shapley(scorer, x, bg_.set, players);
    KernelShapParams kp{cfg_.shap.n_coalitions, seed};
    return kernel_shap(scorer, x, bg_.set, players, kp);
  }

  // Per-row seed so results do not depend on request order.
  std::uint64_t row_seed(Row x) const {
    detail::Fnv1a h;
    for (double v : x) h.update(v);
    return detail::derive_seed(cfg_.shap.seed, h.value());
  }

  Explanation explain(Row x, const ExplainOptions& opt = {}) const {
    Explanation e;
    e.score = model_.score(x);
    e.cls = ForestModel::classify_score(e.score, model_.threshold());
    if (e.cls == 0 && !opt.explain_normal) return e;
    const auto players = select_players(opt.players);
    e.attribution = attribute(x, opt.exact, row_seed(x), players);
    const std::size_t k = opt.k.value_or(cfg_.labeler.k);
    if (e.attribution->names.size() >= k) e.label = auto_label(*e.attribution, k, cfg_.selection());
    return e;
  }

  ContrastiveResult pertinent_negative(Row x) const {
    PertinentNegativeParams p;
    p.step = cfg_.surrogates.pn_step;
    p.max_changed = cfg_.surrogates.pn_max_changed;
    p.binary_columns.resize(schema_.width());
    for (std::size_t i = 0; i < schema_.width(); ++i) p.binary_columns[i] = schema_.is_binary(i);
    return xids::pertinent_negative([this](Row r) { return model_.score(r); }, model_.threshold(), x, p);
  }

  ContrastiveResult pertinent_positive(Row x) const {
    return xids::pertinent_positive([this](Row r) { return model_.score(r); }, model_.threshold(), x, bg_mean_,
                                    players_);
  }

  LocalSurrogate lime(Row x) const {
    LimeParams p;
    p.n_perturb = cfg_.surrogates.lime_perturb;
    p.k = cfg_.surrogates.lime_k;
    p.seed = detail::derive_seed(cfg_.surrogates.seed, row_seed(x));
    p.groups = bg_.groups;
    return lime_explain([this](Row r) { return model_.score(r); }, x, p);
  }

 private:
  FeatureSchema schema_;
  ForestModel model_;
  BackgroundArtifact bg_;
  RunConfig cfg_;
  std::vector<Player> players_;
  std::vector<double> bg_mean_;
};

inline nlohmann::json explanation_json(const Explanation& e, const LabelRegistry* registry) {
  nlohmann::json j{{"score", e.score}, {"class", e.cls}};
  if (e.attribution) j["attribution"] = e.attribution->to_json();
  if (e.label) {
    j["auto_label"] = e.label->to_json();
    if (registry) j["resolution"] = registry->resolve(e.label->canonical).to_json();
  }
  return j;
}

// ---------------------------------------------------------------------------
// Alerts

enum class ReviewStatus { pending, confirmed, renamed };

inline const char* status_name(ReviewStatus s) {
  switch (s) {
    case ReviewStatus::pending: return "pending";
    case ReviewStatus::confirmed: return "confirmed";
    case ReviewStatus::renamed: return "renamed";
  }
  return "pending";
}

inline ReviewStatus status_from_name(std::string_view s) {
  if (s == "pending") return ReviewStatus::pending;
  if (s == "confirmed") return ReviewStatus::confirmed;
  if (s == "renamed") return ReviewStatus::renamed;
  throw Error(Errc::invalid_argument, "unknown review status " + std::string(s));
}

struct AlertRecord {
  std::string id;
  std::string source;
  double score = 0;
  int cls = 1;
  Attribution attribution;
  AutoLabel label;
  Resolution resolution;
  ReviewStatus status = ReviewStatus::pending;
  std::string analyst_label;
  std::string note;
  std::string created_at;
  std::string reviewed_at;

  nlohmann::json to_json() const {
    nlohmann::json j{{"id", id},
                     {"source", source},
                     {"score", score},
                     {"class", cls},
                     {"attribution", attribution.to_json()},
                     {"auto_label", label.to_json()},
                     {"resolution", resolution.to_json()},
                     {"status", status_name(status)},
                     {"created_at", created_at}};
    if (status != ReviewStatus::pending) {
      j["reviewed_at"] = reviewed_at;
      if (!analyst_label.empty()) j["analyst_label"] = analyst_label;
      if (!note.empty()) j["note"] = note;
    }
    return j;
  }

  static AlertRecord from_json(const nlohmann::json& j) {
    AlertRecord a;
    a.id = j.at("id").get<std::string>();
    a.source = j.value("source", "");
    a.score = j.at("score").get<double>();
    a.cls = j.at("class").get<int>();
    a.attribution = Attribution::from_json(j.at("attribution"));
    const auto& lj = j.at("auto_label");
    a.label.canonical = lj.at("label").get<std::string>();
    a.label.k = lj.at("k").get<std::size_t>();
    a.label.fallback = lj.value("fallback", false);
    for (const auto& c : lj.at("components"))
      a.label.components.push_back({c.at("feature").get<std::string>(), c.at("phi").get<double>()});
    a.resolution = Resolution::from_json(j.at("resolution"));
    a.status = status_from_name(j.value("status", "pending"));
    a.analyst_label = j.value("analyst_label", "");
    a.note = j.value("note", "");
    a.created_at = j.value("created_at", "");
    a.reviewed_at = j.value("reviewed_at", "");
    return a;
  }
};

// Append-only JSON-lines store: "created" and "reviewed" events folded into state.
class AlertStore {
 public:
  using Clock = std::function<std::string()>;

  AlertStore() = default;
  explicit AlertStore(fs::path journal, Clock clock = utc_timestamp) : journal_(std::move(journal)), clock_(std::move(clock)) {
    replay();
  }
  AlertStore(const AlertStore&) = delete;
  AlertStore& operator=(const AlertStore&) = delete;

  AlertRecord create(AlertRecord a) {
    std::unique_lock lock(mutex_);
    char buf[32];
    std::snprintf(buf, sizeof buf, "a-%06zu", order_.size() + 1);
    a.id = buf;
    a.status = ReviewStatus::pending;
    a.created_at = clock_ ? clock_() : std::string{};
    append({{"event", "created"}, {"alert", a.to_json()}});
    order_.push_back(a.id);
    alerts_[a.id] = a;
    return a;
  }

  AlertRecord review(const std::string& id, ReviewStatus status, const std::string& analyst_label = {},
                     const std::string& note = {}) {
    if (status == ReviewStatus::pending) throw Error(Errc::invalid_argument, "review: target status must not be pending");
    if (status == ReviewStatus::renamed && analyst_label.empty())
      throw Error(Errc::invalid_argument, "review: rename requires an analyst label");
    std::unique_lock lock(mutex_);
    auto it = alerts_.find(id);
    if (it == alerts_.end()) throw Error(Errc::not_found, "no alert " + id);
    if (it->second.status != ReviewStatus::pending)
      throw Error(Errc::conflict, "alert " + id + " was already " + status_name(it->second.status));
    const std::string at = clock_ ? clock_() : std::string{};
    append({{"event", "reviewed"}, {"id", id}, {"status", status_name(status)}, {"analyst_label", analyst_label},
            {"note", note}, {"at", at}});
    apply_review(it->second, status, analyst_label, note, at);
    return it->second;
  }

  std::optional<AlertRecord> get(const std::string& id) const {
    std::shared_lock lock(mutex_);
    auto it = alerts_.find(id);
    if (it == alerts_.end()) return std::nullopt;
    return it->second;
  }

  std::vector<AlertRecord> list(std::optional<ReviewStatus> status = std::nullopt) const {
    std::shared_lock lock(mutex_);
    std::vector<AlertRecord> out;
    for (const auto& id : order_) {
      const auto& a = alerts_.at(id);
      if (!status || a.status == *status) out.push_back(a);
    }
    return out;
  }

 private:
  static void apply_review(AlertRecord& a, ReviewStatus s, const std::string& label, const std::string& note,
                           const std::string& at) {
    a.status = s;
    a.analyst_label = label;
    a.note = note;
    a.reviewed_at = at;
  }

  void append(const nlohmann::json& event) {
    if (journal_.empty()) return;
    std::ofstream out(journal_, std::ios::app | std::ios::binary);
    if (!out) throw Error(Errc::io, "cannot open alert journal " + journal_.string());
    out << event.dump() << '\n';
    out.flush();
    if (!out) throw Error(Errc::io, "write to alert journal failed");
  }

  void replay() {
    std::ifstream in(journal_, std::ios::binary);
    if (!in) return;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.is_object() || !j.contains("event")) {
        if (in.peek() == std::char_traits<char>::eof()) break;
        throw Error(Errc::parse, "corrupt alert journal line in " + journal_.string());
      }
      if (j["event"] == "created") {
        auto a = AlertRecord::from_json(j.at("alert"));
        order_.push_back(a.id);
        alerts_[a.id] = std::move(a);
      } else if (j["event"] == "reviewed") {
        auto it = alerts_.find(j.at("id").get<std::string>());
        if (it == alerts_.end()) throw Error(Errc::parse, "review event for unknown alert");
        apply_review(it->second, status_from_name(j.at("status").get<std::string>()), j.value("analyst_label", ""),
                     j.value("note", ""), j.value("at", ""));
      }
    }
  }

  fs::path journal_;
  Clock clock_ = utc_timestamp;
  mutable std::shared_mutex mutex_;
  std::vector<std::string> order_;
  std::map<std::string, AlertRecord> alerts_;
};

// Builds an AlertRecord for an attack-class explanation, resolving its label
// against the registry state at creation time.
inline std::optional<AlertRecord> make_alert(const Explanation& e, const LabelRegistry& registry, std::string source) {
  if (e.cls != 1 || !e.attribution || !e.label) return std::nullopt;
  AlertRecord a;
  a.source = std::move(source);
  a.score = e.score;
  a.cls = e.cls;
  a.attribution = *e.attribution;
  a.label = *e.label;
  a.resolution = registry.resolve(e.label->canonical);
  return a;
}

}  // namespace xids
