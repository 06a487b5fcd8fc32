#pragma once

// JSON-over-HTTP gateway (/v1) on top of a loaded Detector, the label registry
// and the alert store.

#include <optional>
#include <string>

#include "xids/pipeline.hpp"

#include <httplib.h>
#include <json.hpp>

namespace xids {

inline int http_status(Errc code) {
  switch (code) {
    case Errc::invalid_argument:
    case Errc::parse: return 400;
    case Errc::dimension:
    case Errc::schema_mismatch:
    case Errc::degenerate: return 422;
    case Errc::not_found: return 404;
    case Errc::conflict: return 409;
    case Errc::io: return 500;
  }
  return 500;
}

struct ServiceOptions {
  std::string token;  // empty disables the check
  std::optional<nlohmann::json> report;
};

class Service {
 public:
  Service(const Detector& detector, LabelRegistry& registry, AlertStore& alerts, ServiceOptions opt = {})
      : det_(detector), registry_(registry), alerts_(alerts), opt_(std::move(opt)) {}

  void mount(httplib::Server& svr) {
    svr.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
      if (opt_.token.empty()) return httplib::Server::HandlerResponse::Unhandled;
      if (req.get_header_value("Authorization") == "Bearer " + opt_.token ||
          req.get_header_value("X-Api-Token") == opt_.token)
        return httplib::Server::HandlerResponse::Unhandled;
      fail(res, 401, "unauthorized", "missing or invalid token");
      return httplib::Server::HandlerResponse::Handled;
    });
    svr.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const Error& e) {
        fail(res, http_status(e.code()), errc_name(e.code()), e.what());
      } catch (const nlohmann::json::exception& e) {
        fail(res, 400, "bad_request", e.what());
      } catch (const std::exception& e) {
        fail(res, 500, "internal", e.what());
      }
    });

    svr.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
      ok(res, {{"status", "ok"},
               {"model", det_.model().fingerprint()},
               {"schema", det_.schema().fingerprint()},
               {"threshold", det_.model().threshold()}});
    });

    svr.Get("/v1/alerts", [this](const httplib::Request& req, httplib::Response& res) {
      std::optional<ReviewStatus> filter;
      if (req.has_param("status")) filter = status_from_name(req.get_param_value("status"));
      nlohmann::json out = nlohmann::json::array();
      for (const auto& a : alerts_.list(filter)) out.push_back(a.to_json());
      ok(res, {{"alerts", std::move(out)}});
    });

    svr.Get(R"(/v1/alerts/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      const auto a = alerts_.get(req.matches[1]);
      if (!a) throw Error(Errc::not_found, "no alert " + std::string(req.matches[1]));
      ok(res, a->to_json());
    });

    // {"decision": "confirm"} or {"decision": "rename", "label": "..."}; a rename also upserts the registry.
    svr.Post(R"(/v1/alerts/([^/]+)/review)", [this](const httplib::Request& req, httplib::Response& res) {
      const auto body = parse_body(req);
      const std::string decision = body.value("decision", "");
      ReviewStatus s;
      if (decision == "confirm")
        s = ReviewStatus::confirmed;
      else if (decision == "rename")
        s = ReviewStatus::renamed;
      else
        throw Error(Errc::invalid_argument, "decision must be \"confirm\" or \"rename\"");
      const auto a = alerts_.review(req.matches[1], s, body.value("label", ""), body.value("note", ""));
      if (s == ReviewStatus::renamed)
        registry_.register_label(a.label.canonical, a.analyst_label, body.value("analyst", ""), a.note);
      ok(res, a.to_json());
    });

    svr.Post("/v1/score", [this](const httplib::Request& req, httplib::Response& res) {
      const auto x = row_from(parse_body(req));
      const double s = det_.score(x.row());
      ok(res, {{"score", s}, {"class", ForestModel::classify_score(s, det_.model().threshold())}});
    });

    svr.Post("/v1/explain", [this](const httplib::Request& req, httplib::Response& res) {
      const auto body = parse_body(req);
      const auto x = row_from(body);
      ExplainOptions opt;
      opt.exact = body.value("exact", false);
      opt.explain_normal = body.value("explain_normal", false);
      if (body.contains("k")) opt.k = body["k"].get<std::size_t>();
      if (body.contains("players")) opt.players = body["players"].get<std::vector<std::string>>();
      const auto e = det_.explain(x.row(), opt);
      auto alert = make_alert(e, registry_, body.value("source", std::string("request")));
      if (!alert) {
        ok(res, explanation_json(e, &registry_));
        return;
      }
      ok(res, alerts_.create(std::move(*alert)).to_json(), 201);
    });

    svr.Post("/v1/labels", [this](const httplib::Request& req, httplib::Response& res) {
      const auto body = parse_body(req);
      const auto e = registry_.register_label(body.at("auto_label").get<std::string>(),
                                              body.at("analyst_label").get<std::string>(), body.value("analyst", ""),
                                              body.value("note", ""));
      ok(res, e.to_json(), 201);
    });

    svr.Get("/v1/registry", [this](const httplib::Request& req, httplib::Response& res) {
      if (req.has_param("key")) {
        const auto key = req.get_param_value("key");
        nlohmann::json hist = nlohmann::json::array();
        for (const auto& e : registry_.history(key)) hist.push_back(e.to_json());
        ok(res, {{"key", key}, {"resolution", registry_.resolve(key).to_json()}, {"history", std::move(hist)}});
        return;
      }
      ok(res, registry_.to_json());
    });

    svr.Get("/v1/summary", [this](const httplib::Request&, httplib::Response& res) {
      std::vector<Attribution> attrs;
      for (const auto& a : alerts_.list()) attrs.push_back(a.attribution);
      if (attrs.empty()) {
        ok(res, {{"alerts", 0}, {"ranking", nlohmann::json::array()}, {"points", nlohmann::json::object()}});
        return;
      }
      auto j = summarize(attrs).to_json();
      j["alerts"] = attrs.size();
      ok(res, j);
    });

    svr.Get("/v1/report", [this](const httplib::Request&, httplib::Response& res) {
      if (!opt_.report) throw Error(Errc::not_found, "no classification report loaded");
      ok(res, *opt_.report);
    });
  }

 private:
  static void ok(httplib::Response& res, const nlohmann::json& j, int status = 200) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  static void fail(httplib::Response& res, int status, const std::string& code, const std::string& message) {
    res.status = status;
    res.set_content(nlohmann::json{{"code", code}, {"message", message}}.dump(), "application/json");
  }

  static nlohmann::json parse_body(const httplib::Request& req) {
    auto j = nlohmann::json::parse(req.body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw Error(Errc::parse, "request body must be a JSON object");
    return j;
  }

  // "features": encoded row, or "record": one raw CSV flow record.
  FeatureVector row_from(const nlohmann::json& body) const {
    if (body.contains("features")) return det_.from_values(body["features"].get<std::vector<double>>());
    if (body.contains("record")) return det_.encode(parse_record(body["record"].get<std::string>()));
    throw Error(Errc::invalid_argument, "body needs \"features\" or \"record\"");
  }

  const Detector& det_;
  LabelRegistry& registry_;
  AlertStore& alerts_;
  ServiceOptions opt_;
};

}  // namespace xids
