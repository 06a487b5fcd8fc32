#pragma once

// NSL-KDD flow records: parsing, one-hot + min-max feature schema, encoding.

#include <algorithm>
#include <array>
#include <charconv>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "xids/common.hpp"

namespace xids {

enum class FeatureKind { count, rate, flag, categorical };

struct FeatureSpec {
  std::string_view name;
  FeatureKind kind;
};

inline constexpr std::size_t kNumFeatures = 41;

// Canonical NSL-KDD column order.
inline constexpr std::array<FeatureSpec, kNumFeatures> kFeatures{{
    {"duration", FeatureKind::count},
    {"protocol_type", FeatureKind::categorical},
    {"service", FeatureKind::categorical},
    {"flag", FeatureKind::categorical},
    {"src_bytes", FeatureKind::count},
    {"dst_bytes", FeatureKind::count},
    {"land", FeatureKind::flag},
    {"wrong_fragment", FeatureKind::count},
    {"urgent", FeatureKind::count},
    {"hot", FeatureKind::count},
    {"num_failed_logins", FeatureKind::count},
    {"logged_in", FeatureKind::flag},
    {"num_compromised", FeatureKind::count},
    {"root_shell", FeatureKind::count},
    {"su_attempted", FeatureKind::count},
    {"num_root", FeatureKind::count},
    {"num_file_creations", FeatureKind::count},
    {"num_shells", FeatureKind::count},
    {"num_access_files", FeatureKind::count},
    {"num_outbound_cmds", FeatureKind::count},
    {"is_host_login", FeatureKind::flag},
    {"is_guest_login", FeatureKind::flag},
    {"count", FeatureKind::count},
    {"srv_count", FeatureKind::count},
    {"serror_rate", FeatureKind::rate},
    {"srv_serror_rate", FeatureKind::rate},
    {"rerror_rate", FeatureKind::rate},
    {"srv_rerror_rate", FeatureKind::rate},
    {"same_srv_rate", FeatureKind::rate},
    {"diff_srv_rate", FeatureKind::rate},
    {"srv_diff_host_rate", FeatureKind::rate},
    {"dst_host_count", FeatureKind::count},
    {"dst_host_srv_count", FeatureKind::count},
    {"dst_host_same_srv_rate", FeatureKind::rate},
    {"dst_host_diff_srv_rate", FeatureKind::rate},
    {"dst_host_same_src_port_rate", FeatureKind::rate},
    {"dst_host_srv_diff_host_rate", FeatureKind::rate},
    {"dst_host_serror_rate", FeatureKind::rate},
    {"dst_host_srv_serror_rate", FeatureKind::rate},
    {"dst_host_rerror_rate", FeatureKind::rate},
    {"dst_host_srv_rerror_rate", FeatureKind::rate},
}};

inline std::optional<std::size_t> feature_index(std::string_view name) {
  for (std::size_t i = 0; i < kNumFeatures; ++i)
    if (kFeatures[i].name == name) return i;
  return std::nullopt;
}

struct FlowRecord {
  // Numeric features by canonical index; categorical slots hold NaN.
  std::array<double, kNumFeatures> numeric{};
  std::string protocol_type;
  std::string service;
  std::string flag;
  std::string attack_label;
  std::optional<int> difficulty;

  const std::string& category(std::size_t feature) const {
    switch (feature) {
      case 1: return protocol_type;
      case 2: return service;
      case 3: return flag;
      default: throw Error(Errc::invalid_argument, "feature is not categorical: " + std::string(kFeatures[feature].name));
    }
  }
  std::string& category(std::size_t feature) {
    return const_cast<std::string&>(std::as_const(*this).category(feature));
  }

  bool is_attack() const { return attack_label != "normal"; }
};

struct ParseIssue {
  std::size_t line = 0;
  std::string message;
};

struct ParseResult {
  std::vector<FlowRecord> records;
  std::vector<ParseIssue> issues;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '\n')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(trim(line.substr(start)));
      return out;
    }
    out.push_back(trim(line.substr(start, comma - start)));
    start = comma + 1;
  }
}

inline std::optional<double> parse_double(std::string_view s) {
  double v = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || ptr != end || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace detail

// Parses one comma-separated NSL-KDD line (41 features + label [+ difficulty]).
inline FlowRecord parse_record(std::string_view line) {
  const auto fields = detail::split_csv(line);
  if (fields.size() != kNumFeatures + 1 && fields.size() != kNumFeatures + 2)
    throw Error(Errc::parse, "expected 42 or 43 fields, got " + std::to_string(fields.size()));

  FlowRecord rec;
  for (std::size_t i = 0; i < kNumFeatures; ++i) {
    const auto& spec = kFeatures[i];
    if (spec.kind == FeatureKind::categorical) {
      if (fields[i].empty()) throw Error(Errc::parse, "empty categorical field " + std::string(spec.name));
      rec.category(i) = std::string(fields[i]);
      rec.numeric[i] = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    const auto v = detail::parse_double(fields[i]);
    if (!v) throw Error(Errc::parse, "non-numeric value '" + std::string(fields[i]) + "' for " + std::string(spec.name));
    if (*v < 0) throw Error(Errc::parse, std::string(spec.name) + " must be >= 0");
    if (spec.kind == FeatureKind::rate && *v > 1) throw Error(Errc::parse, std::string(spec.name) + " must be in [0,1]");
    rec.numeric[i] = *v;
  }
  rec.attack_label = std::string(fields[kNumFeatures]);
  if (rec.attack_label.empty()) throw Error(Errc::parse, "empty attack label");
  if (fields.size() == kNumFeatures + 2) {
    const auto d = detail::parse_double(fields[kNumFeatures + 1]);
    if (!d) throw Error(Errc::parse, "non-numeric difficulty");
    rec.difficulty = static_cast<int>(*d);
  }
  return rec;
}

// Lenient stream parse: malformed lines are reported with their 1-based line number and skipped.
// Blank lines are ignored.
inline ParseResult parse_records(std::istream& in) {
  ParseResult result;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    try {
      result.records.push_back(parse_record(line));
    } catch (const Error& e) {
      result.issues.push_back({line_no, e.what()});
    }
  }
  return result;
}

// Serializes back to the KDD csv layout (difficulty included when present).
inline std::string to_csv(const FlowRecord& rec) {
  std::string out;
  for (std::size_t i = 0; i < kNumFeatures; ++i) {
    if (kFeatures[i].kind == FeatureKind::categorical) {
      out += rec.category(i);
    } else {
      char buf[32];
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, rec.numeric[i]);
      out.append(buf, ptr);
    }
    out += ',';
  }
  out += rec.attack_label;
  if (rec.difficulty) out += ',' + std::to_string(*rec.difficulty);
  return out;
}

enum class AttackFamily { normal, dos, probe, u2r, r2l, unknown };

inline const char* family_name(AttackFamily f) {
  switch (f) {
    case AttackFamily::normal: return "normal";
    case AttackFamily::dos: return "dos";
    case AttackFamily::probe: return "probe";
    case AttackFamily::u2r: return "u2r";
    case AttackFamily::r2l: return "r2l";
    case AttackFamily::unknown: return "unknown";
  }
  return "unknown";
}

inline AttackFamily attack_family(std::string_view label) {
  static const std::unordered_map<std::string_view, AttackFamily> table = {
      {"normal", AttackFamily::normal},
      // DoS
      {"back", AttackFamily::dos}, {"land", AttackFamily::dos}, {"neptune", AttackFamily::dos},
      {"pod", AttackFamily::dos}, {"smurf", AttackFamily::dos}, {"teardrop", AttackFamily::dos},
      {"apache2", AttackFamily::dos}, {"udpstorm", AttackFamily::dos}, {"processtable", AttackFamily::dos},
      {"mailbomb", AttackFamily::dos}, {"worm", AttackFamily::dos},
      // Probe
      {"ipsweep", AttackFamily::probe}, {"nmap", AttackFamily::probe}, {"portsweep", AttackFamily::probe},
      {"satan", AttackFamily::probe}, {"mscan", AttackFamily::probe}, {"saint", AttackFamily::probe},
      // U2R
      {"buffer_overflow", AttackFamily::u2r}, {"loadmodule", AttackFamily::u2r}, {"perl", AttackFamily::u2r},
      {"rootkit", AttackFamily::u2r}, {"ps", AttackFamily::u2r}, {"sqlattack", AttackFamily::u2r},
      {"xterm", AttackFamily::u2r},
      // R2L
      {"ftp_write", AttackFamily::r2l}, {"guess_passwd", AttackFamily::r2l}, {"imap", AttackFamily::r2l},
      {"multihop", AttackFamily::r2l}, {"phf", AttackFamily::r2l}, {"spy", AttackFamily::r2l},
      {"warezclient", AttackFamily::r2l}, {"warezmaster", AttackFamily::r2l}, {"sendmail", AttackFamily::r2l},
      {"named", AttackFamily::r2l}, {"snmpgetattack", AttackFamily::r2l}, {"snmpguess", AttackFamily::r2l},
      {"xlock", AttackFamily::r2l}, {"xsnoop", AttackFamily::r2l}, {"httptunnel", AttackFamily::r2l},
  };
  const auto it = table.find(label);
  return it == table.end() ? AttackFamily::unknown : it->second;
}

// ---------------------------------------------------------------------------
// Schema

enum class ColumnKind { numeric, one_hot };

struct Column {
  std::string name;
  ColumnKind kind = ColumnKind::numeric;
  std::size_t feature = 0;  // index into kFeatures
  std::string category;     // one-hot only
  double min = 0;           // numeric only
  double max = 0;
};

class FeatureSchema {
 public:
  static constexpr int kVersion = 1;

  FeatureSchema() = default;
  explicit FeatureSchema(std::vector<Column> columns) : columns_(std::move(columns)) { index(); }

  std::size_t width() const { return columns_.size(); }
  const std::vector<Column>& columns() const { return columns_; }
  const Column& column(std::size_t i) const { return columns_.at(i); }
  const std::string& fingerprint() const { return fingerprint_; }

  std::optional<std::size_t> find(std::string_view name) const {
    const auto it = by_name_.find(std::string(name));
    if (it == by_name_.end()) return std::nullopt;
    return it->second;
  }
  std::size_t index_of(std::string_view name) const {
    const auto i = find(name);
    if (!i) throw Error(Errc::not_found, "unknown column: " + std::string(name));
    return *i;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(columns_.size());
    for (const auto& c : columns_) out.push_back(c.name);
    return out;
  }
  bool is_binary(std::size_t i) const { return columns_[i].kind == ColumnKind::one_hot; }

  nlohmann::json to_json() const {
    nlohmann::json cols = nlohmann::json::array();
    for (const auto& c : columns_) {
      nlohmann::json j{{"name", c.name}, {"feature", std::string(kFeatures[c.feature].name)}};
      if (c.kind == ColumnKind::numeric) {
        j["kind"] = "numeric";
        j["min"] = c.min;
        j["max"] = c.max;
      } else {
        j["kind"] = "one_hot";
        j["category"] = c.category;
      }
      cols.push_back(std::move(j));
    }
    return {{"version", kVersion}, {"fingerprint", fingerprint_}, {"columns", std::move(cols)}};
  }

  static FeatureSchema from_json(const nlohmann::json& j) {
    if (j.at("version").get<int>() != kVersion)
      throw Error(Errc::parse, "unsupported schema version " + j.at("version").dump());
    std::vector<Column> cols;
    for (const auto& jc : j.at("columns")) {
      Column c;
      c.name = jc.at("name").get<std::string>();
      const auto feat = feature_index(jc.at("feature").get<std::string>());
      if (!feat) throw Error(Errc::parse, "schema references unknown feature " + jc.at("feature").dump());
      c.feature = *feat;
      if (jc.at("kind") == "numeric") {
        c.kind = ColumnKind::numeric;
        c.min = jc.at("min").get<double>();
        c.max = jc.at("max").get<double>();
      } else {
        c.kind = ColumnKind::one_hot;
        c.category = jc.at("category").get<std::string>();
      }
      cols.push_back(std::move(c));
    }
    FeatureSchema schema(std::move(cols));
    if (j.contains("fingerprint") && j.at("fingerprint").get<std::string>() != schema.fingerprint())
      throw Error(Errc::schema_mismatch, "schema fingerprint does not match its content");
    return schema;
  }

 private:
  void index() {
    by_name_.clear();
    detail::Fnv1a h;
    for (std::size_t i = 0; i < columns_.size(); ++i) {
      const auto& c = columns_[i];
      if (!by_name_.emplace(c.name, i).second) throw Error(Errc::invalid_argument, "duplicate column " + c.name);
      if (c.kind == ColumnKind::numeric && !(c.min <= c.max))
        throw Error(Errc::invalid_argument, "min > max for column " + c.name);
      h.update(c.name);
      h.update_u64(static_cast<std::uint64_t>(c.kind));
      h.update_u64(c.feature);
      h.update(c.category);
      h.update(c.min);
      h.update(c.max);
      h.update(std::string_view("\x1f", 1));
    }
    fingerprint_ = h.hex();
  }

  std::vector<Column> columns_;
  std::unordered_map<std::string, std::size_t> by_name_;
  std::string fingerprint_;
};

// Numeric columns in canonical order, then one one-hot group per categorical
// feature (canonical feature order, values alphabetical).
inline FeatureSchema fit_schema(std::span<const FlowRecord> records) {
  if (records.empty()) throw Error(Errc::invalid_argument, "fit_schema: no records");
  std::vector<Column> cols;
  std::array<std::set<std::string>, kNumFeatures> vocab;
  for (const auto& r : records)
    for (std::size_t f = 0; f < kNumFeatures; ++f)
      if (kFeatures[f].kind == FeatureKind::categorical) vocab[f].insert(r.category(f));

  for (std::size_t f = 0; f < kNumFeatures; ++f) {
    if (kFeatures[f].kind == FeatureKind::categorical) continue;
    Column c{std::string(kFeatures[f].name), ColumnKind::numeric, f, {}, records[0].numeric[f], records[0].numeric[f]};
    for (const auto& r : records) {
      c.min = std::min(c.min, r.numeric[f]);
      c.max = std::max(c.max, r.numeric[f]);
    }
    cols.push_back(std::move(c));
  }
  for (std::size_t f = 0; f < kNumFeatures; ++f) {
    if (kFeatures[f].kind != FeatureKind::categorical) continue;
    for (const auto& v : vocab[f])
      cols.push_back({std::string(kFeatures[f].name) + "_" + v, ColumnKind::one_hot, f, v, 0, 0});
  }
  return FeatureSchema(std::move(cols));
}

struct FeatureVector {
  std::vector<double> values;
  int label = 0;  // 0 normal, 1 attack
  std::string attack_label;
  // Categorical features whose value was not in the schema vocabulary.
  std::vector<std::string> unknown_categories;

  std::size_t size() const { return values.size(); }
  Row row() const { return values; }
};

inline FeatureVector encode(const FlowRecord& rec, const FeatureSchema& schema) {
  FeatureVector out;
  out.values.assign(schema.width(), 0.0);
  std::array<bool, kNumFeatures> matched{};
  for (std::size_t i = 0; i < schema.width(); ++i) {
    const auto& c = schema.column(i);
    if (c.kind == ColumnKind::numeric) {
      const double range = c.max - c.min;
      const double x = rec.numeric[c.feature];
      out.values[i] = range > 0 ? std::clamp((x - c.min) / range, 0.0, 1.0) : 0.0;
    } else if (rec.category(c.feature) == c.category) {
      out.values[i] = 1.0;
      matched[c.feature] = true;
    }
  }
  for (std::size_t f = 0; f < kNumFeatures; ++f)
    if (kFeatures[f].kind == FeatureKind::categorical && !matched[f])
      out.unknown_categories.push_back(std::string(kFeatures[f].name));
  out.label = rec.is_attack() ? 1 : 0;
  out.attack_label = rec.attack_label;
  return out;
}

inline std::vector<FeatureVector> encode_all(std::span<const FlowRecord> records, const FeatureSchema& schema) {
  std::vector<FeatureVector> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(encode(r, schema));
  return out;
}

// Draws `normal_count` normal and `attack_count` attack rows without replacement.
// Selected rows keep their original relative order.
inline std::vector<FlowRecord> stratified_subsample(std::span<const FlowRecord> records, std::size_t normal_count,
                                                    std::size_t attack_count, std::uint64_t seed) {
  std::vector<std::size_t> normal, attack;
  for (std::size_t i = 0; i < records.size(); ++i) (records[i].is_attack() ? attack : normal).push_back(i);
  if (normal_count > normal.size() || attack_count > attack.size())
    throw Error(Errc::invalid_argument, "stratified_subsample: requested " + std::to_string(normal_count) + "/" +
                                            std::to_string(attack_count) + " but only " + std::to_string(normal.size()) +
                                            "/" + std::to_string(attack.size()) + " available");
  detail::SplitMix64 rng(seed);
  std::vector<std::size_t> picked;
  for (auto i : detail::sample_without_replacement(rng, normal.size(), normal_count)) picked.push_back(normal[i]);
  for (auto i : detail::sample_without_replacement(rng, attack.size(), attack_count)) picked.push_back(attack[i]);
  std::sort(picked.begin(), picked.end());
  std::vector<FlowRecord> out;
  out.reserve(picked.size());
  for (auto i : picked) out.push_back(records[i]);
  return out;
}

// Proportional variant: class shares follow the input.
inline std::vector<FlowRecord> stratified_subsample(std::span<const FlowRecord> records, std::size_t size,
                                                    std::uint64_t seed) {
  if (size > records.size()) throw Error(Errc::invalid_argument, "stratified_subsample: size exceeds input");
  const auto attacks = static_cast<std::size_t>(std::count_if(records.begin(), records.end(),
                                                              [](const FlowRecord& r) { return r.is_attack(); }));
  const auto attack_count = static_cast<std::size_t>(
      std::llround(static_cast<double>(size) * static_cast<double>(attacks) / static_cast<double>(records.size())));
  return stratified_subsample(records, size - attack_count, attack_count, seed);
}

// A game player for attribution: one or more schema columns acting together.
struct Player {
  std::string name;
  std::vector<std::size_t> columns;
};

enum class Granularity { collapsed, raw };

// raw: one player per schema column. collapsed: one player per original feature,
// so a categorical feature's one-hot group counts as a single player.
inline std::vector<Player> feature_players(const FeatureSchema& schema, Granularity g) {
  std::vector<Player> players;
  if (g == Granularity::raw) {
    for (std::size_t i = 0; i < schema.width(); ++i) players.push_back({schema.column(i).name, {i}});
    return players;
  }
  std::map<std::size_t, std::size_t> slot;  // feature -> player
  std::vector<std::pair<std::size_t, Player>> tmp;
  for (std::size_t i = 0; i < schema.width(); ++i) {
    const auto f = schema.column(i).feature;
    auto [it, fresh] = slot.emplace(f, tmp.size());
    if (fresh) tmp.push_back({f, Player{std::string(kFeatures[f].name), {}}});
    tmp[it->second].second.columns.push_back(i);
  }
  std::stable_sort(tmp.begin(), tmp.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  for (auto& [f, p] : tmp) players.push_back(std::move(p));
  return players;
}

}  // namespace xids
