#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "synthetic_kdd.hpp"
#include "xids/pipeline.hpp"

using namespace xids;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("xids-pipe-" + std::to_string(::getpid()) + "-" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig small_config(const fs::path& train) {
  RunConfig c;
  c.train_path = train.string();
  c.subsample.enabled = false;
  c.forest.trees = 40;
  c.forest.subsample = 128;
  c.shap.background_size = 20;
  c.shap.n_coalitions = 512;
  c.surrogates.lime_perturb = 600;
  return c;
}

std::string fixed_clock() { return "2024-05-01T12:00:00Z"; }

class Trained : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(fresh_dir("suite"));
    xids::testing::SyntheticKdd gen(5);
    xids::testing::write_kdd((*root_ / "train.txt").string(), gen.generate({}));
    cfg_ = new RunConfig(small_config(*root_ / "train.txt"));
    ts_ = new TrainingSet(prepare_training(*cfg_));
    result_ = new TrainResult(train_detector(*cfg_, *ts_));
    save_training(ArtifactPaths{*root_ / "a"}, *cfg_, ts_->schema, *result_);
    det_ = new Detector(Detector::load(ArtifactPaths{*root_ / "a"}));
  }
  static void TearDownTestSuite() {
    delete det_;
    delete result_;
    delete ts_;
    delete cfg_;
    fs::remove_all(*root_);
    delete root_;
  }

  static std::optional<std::size_t> first_of_class(int cls) {
    for (std::size_t i = 0; i < ts_->vectors.size(); ++i)
      if (det_->classify(ts_->vectors[i].row()) == cls && ts_->vectors[i].label == cls) return i;
    return std::nullopt;
  }

  static inline fs::path* root_ = nullptr;
  static inline RunConfig* cfg_ = nullptr;
  static inline TrainingSet* ts_ = nullptr;
  static inline TrainResult* result_ = nullptr;
  static inline Detector* det_ = nullptr;
};

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

TEST(RunConfig, JsonRoundTripAndHash) {
  RunConfig c;
  c.forest.seed = 99;
  c.labeler.selection = "magnitude";
  const auto back = RunConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_NE(RunConfig{}.hash(), c.hash());
  EXPECT_EQ(c.hash().size(), 16u);
}

TEST(RunConfig, MissingKeysKeepDefaults) {
  const auto c = RunConfig::from_json(nlohmann::json::parse(R"({"forest":{"trees":10}})"));
  EXPECT_EQ(c.forest.trees, 10u);
  EXPECT_EQ(c.forest.subsample, 256u);
  EXPECT_EQ(c.subsample.normal, 6776u);
  EXPECT_EQ(c.subsample.attack, 5822u);
  EXPECT_EQ(c.shap.background_size, 100u);
  EXPECT_EQ(c.labeler.k, 3u);
}

TEST(RunConfig, InvalidValuesRejected) {
  EXPECT_THROW(RunConfig::from_json(nlohmann::json::parse(R"({"forest":{"fit_on":"attacks"}})")), Error);
  EXPECT_THROW(RunConfig::from_json(nlohmann::json::parse(R"({"shap":{"granularity":"fine"}})")), Error);
  EXPECT_THROW(RunConfig::from_json(nlohmann::json::parse(R"({"labeler":{"selection":"top"}})")), Error);
}

TEST(RunConfig, DataDirEnvironment) {
  ::setenv("XIDS_DATA_DIR", "/data/nsl", 1);
  EXPECT_EQ(RunConfig::data_path("KDDTrain+.txt"), fs::path("/data/nsl/KDDTrain+.txt"));
  EXPECT_EQ(RunConfig::data_path("/abs/x.txt"), fs::path("/abs/x.txt"));
  ::unsetenv("XIDS_DATA_DIR");
  EXPECT_EQ(RunConfig::data_path("KDDTrain+.txt"), fs::path("KDDTrain+.txt"));
}

TEST(LoadRecords, MissingFileNamesPath) {
  try {
    (void)load_records("/nonexistent/KDDTrain+.txt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::io);
    EXPECT_NE(std::string(e.what()).find("/nonexistent/KDDTrain+.txt"), std::string::npos);
  }
  RunConfig c;
  c.train_path = "/nonexistent/train.txt";
  EXPECT_THROW(prepare_training(c), Error);
}

TEST(LoadRecords, StrictModeReportsLine) {
  const auto dir = fresh_dir("strict");
  xids::testing::SyntheticKdd gen(2);
  auto recs = gen.generate({5, 1, 1, 1, 1});
  xids::testing::write_kdd((dir / "t.txt").string(), recs);
  {
    std::ofstream out(dir / "t.txt", std::ios::app);
    out << "1,tcp,http\n";
  }
  try {
    (void)load_records(dir / "t.txt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::parse);
    EXPECT_NE(std::string(e.what()).find("t.txt:10"), std::string::npos) << e.what();
  }
  EXPECT_EQ(load_records(dir / "t.txt", false).size(), 9u);
  fs::remove_all(dir);
}

TEST(Subsample, ConfiguredCountsExceedingCorpusRejected) {
  const auto dir = fresh_dir("sub");
  xids::testing::SyntheticKdd gen(3);
  xids::testing::write_kdd((dir / "t.txt").string(), gen.generate({}));
  RunConfig c;
  c.train_path = (dir / "t.txt").string();
  EXPECT_THROW(prepare_training(c), Error);  // 6776 normal requested
  c.subsample.normal = 300;
  c.subsample.attack = 200;
  const auto ts = prepare_training(c);
  EXPECT_EQ(ts.records.size(), 500u);
  EXPECT_EQ(std::count_if(ts.vectors.begin(), ts.vectors.end(), [](const auto& v) { return v.label == 1; }), 200);
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Training and artifacts

TEST_F(Trained, ArtifactsWritten) {
  const ArtifactPaths p{*root_ / "a"};
  for (const auto& f : {p.schema(), p.model(), p.background(), p.report_text(), p.report_json()})
    EXPECT_TRUE(fs::exists(f)) << f;
  const auto model = read_json(p.model());
  EXPECT_EQ(model.at("config_hash"), cfg_->hash());
  EXPECT_EQ(read_json(p.background()).at("rows").size(), 20u);
  const auto rep = read_json(p.report_json());
  EXPECT_DOUBLE_EQ(rep.at("threshold").get<double>(), result_->model.threshold());
}

TEST_F(Trained, RetrainIsByteIdentical) {
  const auto again = train_detector(*cfg_, prepare_training(*cfg_));
  save_training(ArtifactPaths{*root_ / "b"}, *cfg_, ts_->schema, again);
  for (const char* name : {"schema.json", "model.json", "background.json", "report.json", "report.txt"})
    EXPECT_EQ(slurp(*root_ / "a" / name), slurp(*root_ / "b" / name)) << name;
}

TEST_F(Trained, LoadedDetectorScoresLikeTrainedModel) {
  for (std::size_t i = 0; i < ts_->vectors.size(); i += 17)
    EXPECT_EQ(det_->score(ts_->vectors[i].row()), result_->model.score(ts_->vectors[i].row()));
  EXPECT_EQ(det_->model().threshold(), result_->model.threshold());
  EXPECT_EQ(det_->players().size(), 41u);
}

TEST_F(Trained, SyntheticCorpusSeparates) {
  EXPECT_GE(result_->report.accuracy, 0.85);
}

TEST_F(Trained, NormalRowsAreNotExplainedByDefault) {
  const auto i = first_of_class(0);
  ASSERT_TRUE(i);
  const auto e = det_->explain(ts_->vectors[*i].row());
  EXPECT_EQ(e.cls, 0);
  EXPECT_FALSE(e.attribution);
  EXPECT_FALSE(e.label);
  ExplainOptions opt;
  opt.explain_normal = true;
  const auto forced = det_->explain(ts_->vectors[*i].row(), opt);
  EXPECT_TRUE(forced.attribution);
  EXPECT_TRUE(forced.label);
}

TEST_F(Trained, AttackRowGetsThreePartLabel) {
  const auto i = first_of_class(1);
  ASSERT_TRUE(i);
  const auto x = ts_->vectors[*i].row();
  const auto e = det_->explain(x);
  ASSERT_EQ(e.cls, 1);
  ASSERT_TRUE(e.attribution);
  ASSERT_TRUE(e.label);
  EXPECT_EQ(e.label->components.size(), 3u);
  EXPECT_EQ(e.attribution->names.size(), 41u);
  EXPECT_LE(e.attribution->local_accuracy_gap(), 1e-9);
  EXPECT_DOUBLE_EQ(e.attribution->output, e.score);
  // stable across calls
  const auto again = det_->explain(x);
  EXPECT_EQ(again.attribution->phi, e.attribution->phi);
}

TEST_F(Trained, ExactSubsetMatchesEnumeratedKernel) {
  const auto i = first_of_class(1);
  ASSERT_TRUE(i);
  const auto x = ts_->vectors[*i].row();
  ExplainOptions exact, sampled;
  exact.exact = true;
  exact.players = sampled.players = {"src_bytes", "service", "count", "flag", "dst_host_srv_count"};
  const auto a = det_->explain(x, exact), b = det_->explain(x, sampled);
  ASSERT_TRUE(a.attribution && b.attribution);
  for (std::size_t p = 0; p < 5; ++p) EXPECT_NEAR(a.attribution->phi[p], b.attribution->phi[p], 1e-6);
  ExplainOptions bad;
  bad.players = {"nope"};
  bad.explain_normal = true;
  EXPECT_THROW(det_->explain(x, bad), Error);
}

TEST_F(Trained, WrongWidthRejected) {
  try {
    (void)det_->from_values({0.1, 0.2});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::dimension);
  }
}

TEST_F(Trained, MismatchedSchemaRejected) {
  xids::testing::SyntheticKdd gen(77);
  auto other = fit_schema(gen.generate({30, 5, 0, 0, 0}));
  ASSERT_NE(other.fingerprint(), ts_->schema.fingerprint());
  try {
    Detector d(other, result_->model, result_->background, *cfg_);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::schema_mismatch);
  }
}

TEST_F(Trained, ContrastiveContractsOnAttackRows) {
  std::size_t checked = 0;
  for (std::size_t i = 0; i < ts_->vectors.size() && checked < 5; ++i) {
    const auto x = ts_->vectors[i].row();
    if (det_->classify(x) != 1) continue;
    ++checked;
    const auto pn = det_->pertinent_negative(x);
    if (pn.found) {
      EXPECT_EQ(det_->classify(pn.counterpart), 0);
      EXPECT_LE(pn.changed.size(), cfg_->surrogates.pn_max_changed);
      EXPECT_TRUE(pn.verified);
    }
    const auto pp = det_->pertinent_positive(x);
    EXPECT_TRUE(pp.found);
    EXPECT_EQ(det_->classify(pp.counterpart), 1);
    EXPECT_TRUE(pp.verified);
  }
  EXPECT_EQ(checked, 5u);
}

TEST_F(Trained, LimeRunsOnDetector) {
  const auto i = first_of_class(1);
  ASSERT_TRUE(i);
  const auto s = det_->lime(ts_->vectors[*i].row());
  EXPECT_LE(s.weights.size(), cfg_->surrogates.lime_k);
  EXPECT_EQ(s.to_json().dump(), det_->lime(ts_->vectors[*i].row()).to_json().dump());
}

TEST_F(Trained, ExplanationJsonCarriesResolution) {
  const auto i = first_of_class(1);
  ASSERT_TRUE(i);
  const auto e = det_->explain(ts_->vectors[*i].row());
  LabelRegistry reg;
  auto j = explanation_json(e, &reg);
  EXPECT_EQ(j["class"], 1);
  EXPECT_EQ(j["resolution"]["status"], "novel");
  reg.register_label(e.label->canonical, "synthetic-attack");
  j = explanation_json(e, &reg);
  EXPECT_EQ(j["resolution"]["status"], "known");
  EXPECT_EQ(j["resolution"]["label"], "synthetic-attack");
  EXPECT_FALSE(explanation_json(e, nullptr).contains("resolution"));
}

// ---------------------------------------------------------------------------
// Alert store

namespace {

AlertRecord sample_alert(const std::string& canonical) {
  AlertRecord a;
  a.source = "test";
  a.score = 0.7;
  a.attribution.names = {"a", "b", "c"};
  a.attribution.phi = {0.1, 0.2, 0.3};
  a.attribution.values = {0, 0, 0};
  a.attribution.output = 0.7;
  a.attribution.base_value = 0.1;
  a.label.canonical = canonical;
  a.label.k = 3;
  a.label.components = {{"a", 0.1}, {"b", 0.2}, {"c", 0.3}};
  return a;
}

}  // namespace

TEST(AlertStore, CreateReviewConflict) {
  AlertStore store;
  const auto a = store.create(sample_alert("a-b-c"));
  const auto b = store.create(sample_alert("a-b-c"));
  EXPECT_EQ(a.id, "a-000001");
  EXPECT_EQ(b.id, "a-000002");
  EXPECT_EQ(store.list(ReviewStatus::pending).size(), 2u);
  const auto r = store.review(a.id, ReviewStatus::confirmed);
  EXPECT_EQ(r.status, ReviewStatus::confirmed);
  try {
    store.review(a.id, ReviewStatus::renamed, "x");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::conflict);
  }
  try {
    store.review("a-999999", ReviewStatus::confirmed);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::not_found);
  }
  EXPECT_THROW(store.review(b.id, ReviewStatus::renamed), Error);
  EXPECT_THROW(store.review(b.id, ReviewStatus::pending), Error);
  EXPECT_EQ(store.get(b.id)->status, ReviewStatus::pending);
  EXPECT_EQ(store.review(b.id, ReviewStatus::renamed, "portsweep", "seen before").analyst_label, "portsweep");
  EXPECT_EQ(store.list(ReviewStatus::pending).size(), 0u);
  EXPECT_EQ(store.list().size(), 2u);
  EXPECT_FALSE(store.get("zzz"));
}

TEST(AlertStore, JournalReplayAndTornTail) {
  const auto dir = fresh_dir("alerts");
  const auto journal = dir / "alerts.jsonl";
  std::vector<nlohmann::json> before;
  {
    AlertStore store(journal, fixed_clock);
    store.create(sample_alert("a-b-c"));
    store.create(sample_alert("d-e-f"));
    store.review("a-000002", ReviewStatus::renamed, "neptune", "n");
    for (const auto& a : store.list()) before.push_back(a.to_json());
  }
  {
    std::ofstream out(journal, std::ios::app);
    out << R"({"event":"created","alert":{"id":"a-0000)";
  }
  AlertStore replayed(journal, fixed_clock);
  std::vector<nlohmann::json> after;
  for (const auto& a : replayed.list()) after.push_back(a.to_json());
  EXPECT_EQ(after, before);
  EXPECT_EQ(replayed.get("a-000002")->reviewed_at, "2024-05-01T12:00:00Z");
  EXPECT_EQ(replayed.create(sample_alert("g-h-i")).id, "a-000003");
  fs::remove_all(dir);
}

TEST(AlertStore, MakeAlertOnlyForAttackExplanations) {
  LabelRegistry reg;
  reg.register_label("a-b-c", "portsweep");
  Explanation e;
  e.cls = 0;
  EXPECT_FALSE(make_alert(e, reg, "s"));
  e.cls = 1;
  e.score = 0.8;
  e.attribution = sample_alert("a-b-c").attribution;
  e.label = sample_alert("a-b-c").label;
  const auto a = make_alert(e, reg, "s");
  ASSERT_TRUE(a);
  EXPECT_TRUE(a->resolution.known);
  EXPECT_EQ(a->resolution.label, "portsweep");
}
