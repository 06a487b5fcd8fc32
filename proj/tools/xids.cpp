#include "xids/service.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <iostream>
#include <map>

using namespace xids;
using nlohmann::json;

namespace {

struct TrainOpts {
  std::string config;
  std::string train;
  std::string out;
  std::optional<std::size_t> trees;
  std::optional<std::uint64_t> seed;
  std::string fit_on;
  bool no_subsample = false;
  std::optional<unsigned> threads;
};

RunConfig resolve_config(const TrainOpts& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (!o.train.empty()) cfg.train_path = o.train;
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (o.trees) cfg.forest.trees = *o.trees;
  if (o.seed) cfg.forest.seed = *o.seed;
  if (!o.fit_on.empty()) cfg.forest.fit_on = o.fit_on;
  if (o.no_subsample) cfg.subsample.enabled = false;
  if (o.threads) cfg.threads = *o.threads;
  return RunConfig::from_json(cfg.to_json());
}

int cmd_ingest(const std::string& input, const std::string& schema_out) {
  std::ifstream in(RunConfig::data_path(input));
  if (!in) throw Error(Errc::io, "cannot read " + RunConfig::data_path(input).string());
  const auto parsed = parse_records(in);
  std::map<std::string, std::size_t> by_label;
  for (const auto& r : parsed.records) by_label[r.attack_label]++;
  std::size_t attacks = 0;
  for (const auto& [l, n] : by_label)
    if (l != "normal") attacks += n;
  std::cout << "records " << parsed.records.size() << "\nnormal " << parsed.records.size() - attacks << "\nattack "
            << attacks << "\nmalformed " << parsed.issues.size() << "\n";
  for (std::size_t i = 0; i < std::min<std::size_t>(parsed.issues.size(), 10); ++i)
    std::cout << "  line " << parsed.issues[i].line << ": " << parsed.issues[i].message << "\n";
  for (const auto& [l, n] : by_label) std::cout << "label " << l << " " << n << "\n";
  if (!schema_out.empty()) {
    if (parsed.records.empty()) throw Error(Errc::invalid_argument, "no valid records to fit a schema");
    write_json(schema_out, fit_schema(parsed.records).to_json());
    std::cout << "schema written to " << schema_out << "\n";
  }
  return 0;
}

int cmd_train(const TrainOpts& o) {
  const auto cfg = resolve_config(o);
  const auto t0 = std::chrono::steady_clock::now();
  const auto ts = prepare_training(cfg);
  const auto r = train_detector(cfg, ts);
  const ArtifactPaths paths{cfg.output_dir};
  save_training(paths, cfg, ts.schema, r);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << r.report.to_text() << "threshold " << detail::format_fixed(r.model.threshold(), 6) << "\nrows "
            << ts.records.size() << "\nconfig " << cfg.hash() << "\nartifacts " << paths.dir.string() << "\nseconds "
            << detail::format_fixed(secs, 2) << "\n";
  return 0;
}

std::vector<FeatureVector> load_encoded(const Detector& det, const std::string& path) {
  const auto recs = load_records(RunConfig::data_path(path));
  return encode_all(recs, det.schema());
}

int cmd_evaluate(const std::string& model_dir, const std::string& data) {
  const ArtifactPaths paths{model_dir};
  const auto det = Detector::load(paths);
  const auto vecs = load_encoded(det, data);
  const auto rep = report(det.model(), det.model().threshold(), vecs);
  std::size_t unknown = 0;
  for (const auto& v : vecs) unknown += !v.unknown_categories.empty();
  std::cout << rep.to_text() << "threshold " << detail::format_fixed(det.model().threshold(), 6) << "\nrows "
            << vecs.size() << "\nunseen_categories " << unknown << "\n";
  auto j = report_artifact(rep, det.config(), det.model().threshold());
  j["data"] = data;
  write_json(paths.dir / "evaluation.json", j);
  return 0;
}

struct ExplainOpts {
  std::string model;
  std::string input;
  std::string output;
  bool exact = false;
  bool sampled = false;
  std::optional<std::size_t> k;
  std::vector<std::string> features;
  bool all = false;
  bool contrastive = false;
  bool lime = false;
  std::size_t prototypes = 0;
  std::size_t limit = 0;
  bool record_alerts = false;
};

int cmd_explain(const ExplainOpts& o) {
  const ArtifactPaths paths{o.model};
  const auto det = Detector::load(paths);
  LabelRegistry registry(paths.registry());
  std::optional<AlertStore> alerts;
  if (o.record_alerts) alerts.emplace(paths.alerts());
  const auto recs = load_records(RunConfig::data_path(o.input));
  std::vector<FeatureVector> train;
  if (o.prototypes > 0) train = prepare_training(det.config()).vectors;

  std::ofstream file;
  if (!o.output.empty()) {
    file.open(o.output, std::ios::binary | std::ios::trunc);
    if (!file) throw Error(Errc::io, "cannot write " + o.output);
  }
  std::ostream& out = o.output.empty() ? std::cout : file;

  ExplainOptions eo;
  eo.exact = o.exact;
  eo.explain_normal = o.all;
  eo.k = o.k;
  eo.players = o.features;
  const auto names = det.schema().names();
  std::vector<std::string> player_names;
  for (const auto& p : det.players()) player_names.push_back(p.name);

  const std::size_t n = o.limit ? std::min(o.limit, recs.size()) : recs.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto v = det.encode(recs[i]);
    const auto e = det.explain(v.row(), eo);
    json j{{"row", i}, {"attack_label", recs[i].attack_label}};
    j.update(explanation_json(e, &registry));
    if (!v.unknown_categories.empty()) j["unseen_categories"] = v.unknown_categories;
    if (o.contrastive) {
      j["pertinent_negative"] = det.pertinent_negative(v.row()).to_json(names);
      j["pertinent_positive"] = det.pertinent_positive(v.row()).to_json(player_names);
    }
    if (o.lime) j["lime"] = det.lime(v.row()).to_json(names);
    if (o.prototypes > 0) j["prototypes"] = similar_instances(v.row(), train, o.prototypes).to_json(names);
    if (alerts) {
      if (auto a = make_alert(e, registry, o.input + ":" + std::to_string(i + 1))) j["alert_id"] = alerts->create(*a).id;
    }
    out << j.dump() << "\n";
  }
  return 0;
}

struct RulesOpts {
  std::string model;
  std::string data;
  bool paper = false;
  bool learn = false;
  std::size_t max_clauses = 5;
  std::size_t max_literals = 3;
  std::string eval;
};

int cmd_rules(const RulesOpts& o) {
  FeatureSchema schema;
  std::vector<FeatureVector> data;
  std::string source;
  if (!o.model.empty()) {
    const auto det = Detector::load(ArtifactPaths{o.model});
    schema = det.schema();
    if (o.data.empty()) {
      data = prepare_training(det.config()).vectors;
      source = "training subset";
    } else {
      data = encode_all(load_records(RunConfig::data_path(o.data)), schema);
      source = o.data;
    }
  } else {
    if (o.data.empty()) throw Error(Errc::invalid_argument, "rules needs --data or --model");
    const auto recs = load_records(RunConfig::data_path(o.data));
    schema = fit_schema(recs);
    data = encode_all(recs, schema);
    source = o.data;
  }
  const auto t0 = std::chrono::steady_clock::now();
  RuleSet rules;
  if (o.paper) {
    rules = builtin_paper_rules();
  } else {
    DnfParams p;
    p.max_clauses = o.max_clauses;
    p.max_literals = o.max_literals;
    rules = learn_dnf(data, schema.names(), p);
  }
  const auto ev = eval_ruleset(rules, schema, data);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << rules.to_text() << "accuracy " << detail::format_fixed(ev.accuracy, 4) << " on " << source << " ("
            << data.size() << " rows)\nconfusion tn=" << ev.tn << " fp=" << ev.fp << " fn=" << ev.fn << " tp=" << ev.tp
            << "\nseconds " << detail::format_fixed(secs, 2) << "\n";
  if (!o.eval.empty()) {
    const auto other = encode_all(load_records(RunConfig::data_path(o.eval)), schema);
    const auto e2 = eval_ruleset(rules, schema, other);
    std::cout << "accuracy " << detail::format_fixed(e2.accuracy, 4) << " on " << o.eval << " (" << other.size()
              << " rows)\n";
  }
  return 0;
}

int cmd_label(const std::string& model, const std::string& key, const std::string& label, const std::string& analyst,
              const std::string& note) {
  LabelRegistry registry(ArtifactPaths{model}.registry());
  std::cout << registry.register_label(key, label, analyst, note).to_json().dump() << "\n";
  return 0;
}

int cmd_registry(const std::string& model, const std::string& key) {
  LabelRegistry registry(ArtifactPaths{model}.registry());
  if (key.empty()) {
    std::cout << registry.to_json().dump(1) << "\n";
    return 0;
  }
  json hist = json::array();
  for (const auto& e : registry.history(key)) hist.push_back(e.to_json());
  std::cout << json{{"key", key}, {"resolution", registry.resolve(key).to_json()}, {"history", hist}}.dump(1) << "\n";
  return 0;
}

int cmd_serve(const std::string& model, const std::string& host, int port, std::string token) {
  const ArtifactPaths paths{model};
  const auto det = Detector::load(paths);
  LabelRegistry registry(paths.registry());
  AlertStore alerts(paths.alerts());
  if (token.empty())
    if (const char* t = std::getenv("XIDS_TOKEN")) token = t;
  ServiceOptions opt;
  opt.token = token;
  if (fs::exists(paths.report_json())) opt.report = read_json(paths.report_json());
  Service service(det, registry, alerts, opt);
  httplib::Server svr;
  service.mount(svr);
  if (!svr.bind_to_port(host, port)) throw Error(Errc::io, "cannot bind " + host + ":" + std::to_string(port));
  std::cerr << "listening on " << host << ":" << port << "\n";
  return svr.listen_after_bind() ? 0 : 1;
}

struct ReportOpts {
  std::string model;
  std::string data;
  std::size_t per_type = 50;
  std::uint64_t seed = 17;
  std::vector<std::string> types;
  bool detected_only = false;
};

int cmd_report(const ReportOpts& o) {
  const ArtifactPaths paths{o.model};
  const auto det = Detector::load(paths);
  const auto recs = load_records(RunConfig::data_path(o.data));
  std::map<std::string, std::vector<std::size_t>> by_type;
  for (std::size_t i = 0; i < recs.size(); ++i)
    if (recs[i].is_attack()) by_type[recs[i].attack_label].push_back(i);
  if (!o.types.empty()) {
    std::map<std::string, std::vector<std::size_t>> keep;
    for (const auto& t : o.types) {
      auto it = by_type.find(t);
      if (it == by_type.end()) throw Error(Errc::not_found, "no rows of type " + t + " in " + o.data);
      keep[t] = it->second;
    }
    by_type = std::move(keep);
  }
  ExplainOptions eo;
  eo.explain_normal = !o.detected_only;
  std::vector<Attribution> attrs;
  std::vector<std::pair<std::string, std::string>> labeled;
  for (const auto& [type, rows] : by_type) {
    detail::Fnv1a h;
    h.update(type);
    detail::SplitMix64 rng(detail::derive_seed(o.seed, h.value()));
    auto idx = detail::sample_without_replacement(rng, rows.size(), std::min(o.per_type, rows.size()));
    std::sort(idx.begin(), idx.end());
    for (auto k : idx) {
      const auto v = det.encode(recs[rows[k]]);
      const auto e = det.explain(v.row(), eo);
      if (!e.attribution || !e.label) continue;
      attrs.push_back(*e.attribution);
      labeled.emplace_back(type, e.label->canonical);
    }
  }
  if (attrs.empty()) throw Error(Errc::degenerate, "no explained instances to report on");
  auto summary = summarize(attrs).to_json();
  summary["instances"] = attrs.size();
  summary["config_hash"] = det.config().hash();
  write_json(paths.summary(), summary);
  const auto purity = purity_report(labeled);
  auto pj = purity.to_json();
  pj["config_hash"] = det.config().hash();
  pj["seed"] = std::to_string(o.seed);
  pj["per_type"] = o.per_type;
  pj["data"] = o.data;
  write_json(paths.purity(), pj);
  std::cout << "attack                 n   distinct  purity  modal label\n";
  for (const auto& r : purity.rows) {
    std::string name = r.attack;
    name.resize(std::max<std::size_t>(name.size(), 20), ' ');
    std::cout << name << " " << r.instances << "\t" << r.distinct_labels << "\t" << detail::format_fixed(r.purity, 3)
              << "\t" << r.modal_label << "\n";
  }
  std::cout << "top features:";
  for (std::size_t i = 0; i < std::min<std::size_t>(5, summary["ranking"].size()); ++i)
    std::cout << " " << summary["ranking"][i]["feature"].get<std::string>();
  std::cout << "\nwrote " << paths.summary().string() << " and " << paths.purity().string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xids: explainable intrusion detection"};
  app.require_subcommand(1);

  std::string ingest_input, ingest_schema;
  auto* ingest = app.add_subcommand("ingest", "parse a KDD csv file and print counts");
  ingest->add_option("input", ingest_input, "csv file")->required();
  ingest->add_option("--schema-out", ingest_schema, "write a fitted schema here");

  TrainOpts to;
  auto* train = app.add_subcommand("train", "fit the forest, calibrate the threshold, write artifacts");
  train->add_option("-c,--config", to.config, "run configuration JSON");
  train->add_option("--train", to.train, "training csv (relative paths honour XIDS_DATA_DIR)");
  train->add_option("-o,--out", to.out, "artifact directory");
  train->add_option("--trees", to.trees);
  train->add_option("--seed", to.seed, "forest seed");
  train->add_option("--fit-on", to.fit_on)->check(CLI::IsMember({"normal", "all"}));
  train->add_flag("--no-subsample", to.no_subsample, "train on the full file");
  train->add_option("--threads", to.threads);

  std::string eval_model, eval_data;
  auto* evaluate = app.add_subcommand("evaluate", "classification report on a labeled file");
  evaluate->add_option("-m,--model", eval_model, "artifact directory")->required();
  evaluate->add_option("--data", eval_data, "labeled csv")->required();

  ExplainOpts eo;
  auto* explain = app.add_subcommand("explain", "per-row attribution and auto-label as JSON lines");
  explain->add_option("-m,--model", eo.model)->required();
  explain->add_option("--input", eo.input, "csv rows to explain")->required();
  explain->add_option("-o,--output", eo.output, "write JSON lines here instead of stdout");
  auto* ex = explain->add_flag("--exact", eo.exact, "exact Shapley values (at most 20 players)");
  auto* sa = explain->add_flag("--sampled", eo.sampled, "KernelSHAP (default)");
  ex->excludes(sa);
  explain->add_option("--k", eo.k, "label length");
  explain->add_option("--features", eo.features, "restrict the game to these features")->delimiter(',');
  explain->add_flag("--all", eo.all, "also explain rows classified normal");
  explain->add_flag("--contrastive", eo.contrastive, "add pertinent negative and positive");
  explain->add_flag("--lime", eo.lime, "add a local linear surrogate");
  explain->add_option("--prototypes", eo.prototypes, "add this many similar training instances");
  explain->add_option("--limit", eo.limit, "stop after this many rows");
  explain->add_flag("--record-alerts", eo.record_alerts, "journal attack rows as pending alerts");

  RulesOpts ro;
  auto* rules = app.add_subcommand("rules", "print a DNF ruleset and its accuracy");
  rules->add_option("-m,--model", ro.model, "artifact directory (schema and training subset)");
  rules->add_option("--data", ro.data, "labeled csv to evaluate on");
  auto* pr = rules->add_flag("--paper-rules", ro.paper, "the built-in five-clause ruleset");
  auto* lr = rules->add_flag("--learn", ro.learn, "learn a ruleset greedily");
  pr->excludes(lr);
  rules->add_option("--max-clauses", ro.max_clauses);
  rules->add_option("--max-literals", ro.max_literals);
  rules->add_option("--eval", ro.eval, "also evaluate on this file");

  std::string lab_model, lab_key, lab_label, lab_analyst, lab_note;
  auto* label = app.add_subcommand("label", "map an auto-label to an analyst label");
  label->add_option("-m,--model", lab_model)->required();
  label->add_option("--auto-label", lab_key)->required();
  label->add_option("--as", lab_label)->required();
  label->add_option("--analyst", lab_analyst);
  label->add_option("--note", lab_note);

  std::string reg_model, reg_key;
  auto* registry = app.add_subcommand("registry", "show the label registry");
  registry->add_option("-m,--model", reg_model)->required();
  registry->add_option("--key", reg_key, "show one auto-label with its history");

  std::string srv_model, srv_host = "127.0.0.1", srv_token;
  int srv_port = 8080;
  auto* serve = app.add_subcommand("serve", "HTTP API under /v1");
  serve->add_option("-m,--model", srv_model)->required();
  serve->add_option("--host", srv_host);
  serve->add_option("--port", srv_port);
  serve->add_option("--token", srv_token, "static API token (or XIDS_TOKEN)");

  ReportOpts rp;
  auto* rep = app.add_subcommand("report", "global attribution summary and label purity per attack type");
  rep->add_option("-m,--model", rp.model)->required();
  rep->add_option("--data", rp.data, "labeled csv")->required();
  rep->add_option("--per-type", rp.per_type, "instances drawn per attack type");
  rep->add_option("--seed", rp.seed);
  rep->add_option("--types", rp.types, "attack types to include")->delimiter(',');
  rep->add_flag("--detected-only", rp.detected_only, "skip instances the detector calls normal");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) return cmd_ingest(ingest_input, ingest_schema);
    if (*train) return cmd_train(to);
    if (*evaluate) return cmd_evaluate(eval_model, eval_data);
    if (*explain) return cmd_explain(eo);
    if (*rules) {
      if (!ro.paper && !ro.learn) throw Error(Errc::invalid_argument, "rules needs --paper-rules or --learn");
      return cmd_rules(ro);
    }
    if (*label) return cmd_label(lab_model, lab_key, lab_label, lab_analyst, lab_note);
    if (*registry) return cmd_registry(reg_model, reg_key);
    if (*serve) return cmd_serve(srv_model, srv_host, srv_port, srv_token);
    if (*rep) return cmd_report(rp);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == Errc::io ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
