#pragma once

// Zero-shot attack labels from attributions, and the analyst label registry.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "xids/common.hpp"
#include "xids/shap.hpp"

namespace xids {

enum class LabelSelection {
  positive,   // attack-pushing (phi > 0) features only
  magnitude,  // largest |phi| regardless of sign
};

struct LabelComponent {
  std::string feature;
  double phi = 0;
};

struct AutoLabel {
  std::string canonical;
  std::vector<LabelComponent> components;  // sorted by feature name
  std::size_t k = 0;
  bool fallback = false;  // too few positive features; filled by |phi|

  nlohmann::json to_json() const {
    nlohmann::json comps = nlohmann::json::array();
    for (const auto& c : components) comps.push_back({{"feature", c.feature}, {"phi", c.phi}});
    return {{"label", canonical}, {"k", k}, {"fallback", fallback}, {"components", std::move(comps)}};
  }
};

inline std::string join_label(std::vector<std::string> parts) {
  std::sort(parts.begin(), parts.end());
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += '-';
    out += parts[i];
  }
  return out;
}

// Picks the top-k features (ties on |phi| resolved by name) and joins their
// names alphabetically with '-'.
inline AutoLabel auto_label(const Attribution& attr, std::size_t k = 3,
                            LabelSelection selection = LabelSelection::positive) {
  const std::size_t m = attr.names.size();
  if (k == 0) throw Error(Errc::invalid_argument, "auto_label: k must be positive");
  if (m < k) throw Error(Errc::invalid_argument, "auto_label: attribution has fewer than k features");

  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  auto by_magnitude = [&](std::size_t a, std::size_t b) {
    const double pa = std::abs(attr.phi[a]), pb = std::abs(attr.phi[b]);
    if (pa != pb) return pa > pb;
    return attr.names[a] < attr.names[b];
  };

  AutoLabel label;
  label.k = k;
  std::vector<std::size_t> chosen;
  if (selection == LabelSelection::positive) {
    std::vector<std::size_t> pos;
    for (auto i : idx)
      if (attr.phi[i] > 0) pos.push_back(i);
    if (pos.size() >= k) {
      std::sort(pos.begin(), pos.end(), by_magnitude);
      chosen.assign(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(k));
    } else {
      label.fallback = true;
    }
  }
  if (chosen.empty()) {
    std::sort(idx.begin(), idx.end(), by_magnitude);
    chosen.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  }
  std::sort(chosen.begin(), chosen.end(), [&](std::size_t a, std::size_t b) { return attr.names[a] < attr.names[b]; });
  std::vector<std::string> parts;
  for (auto i : chosen) {
    label.components.push_back({attr.names[i], attr.phi[i]});
    parts.push_back(attr.names[i]);
  }
  label.canonical = join_label(parts);
  return label;
}

// ---------------------------------------------------------------------------
// Registry

struct RegistryEntry {
  std::string key;  // canonical auto-label
  std::string label;
  std::string analyst;
  std::string timestamp;
  std::string note;

  nlohmann::json to_json() const {
    return {{"key", key}, {"label", label}, {"analyst", analyst}, {"timestamp", timestamp}, {"note", note}};
  }
  static RegistryEntry from_json(const nlohmann::json& j) {
    return {j.at("key").get<std::string>(), j.at("label").get<std::string>(), j.value("analyst", ""),
            j.value("timestamp", ""), j.value("note", "")};
  }
  bool operator==(const RegistryEntry&) const = default;
};

struct Resolution {
  bool known = false;
  std::string label;  // analyst label when known

  static Resolution novel() { return {}; }
  static Resolution of(std::string l) { return {true, std::move(l)}; }

  nlohmann::json to_json() const {
    if (!known) return {{"status", "novel"}};
    return {{"status", "known"}, {"label", label}};
  }
  static Resolution from_json(const nlohmann::json& j) {
    if (j.at("status") == "known") return of(j.at("label").get<std::string>());
    return novel();
  }
  bool operator==(const Resolution&) const = default;
};

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Many-to-one map from canonical auto-labels to analyst labels. With a journal
// path, every upsert is appended as one JSON line before it becomes visible, and
// opening replays the journal (a torn final line is ignored).
class LabelRegistry {
 public:
  using Clock = std::function<std::string()>;

  LabelRegistry() = default;
  explicit LabelRegistry(std::filesystem::path journal, Clock clock = utc_timestamp)
      : journal_(std::move(journal)), clock_(std::move(clock)) {
    replay();
  }

  LabelRegistry(const LabelRegistry&) = delete;
  LabelRegistry& operator=(const LabelRegistry&) = delete;

  void set_clock(Clock clock) { clock_ = std::move(clock); }

  RegistryEntry register_label(const std::string& auto_label, const std::string& analyst_label,
                               const std::string& analyst = {}, const std::string& note = {}) {
    if (auto_label.empty()) throw Error(Errc::invalid_argument, "register: auto-label must not be empty");
    if (analyst_label.empty()) throw Error(Errc::invalid_argument, "register: analyst label must not be empty");
    std::unique_lock lock(mutex_);
    RegistryEntry e{auto_label, analyst_label, analyst, clock_ ? clock_() : std::string{}, note};
    if (!journal_.empty()) {
      std::ofstream out(journal_, std::ios::app | std::ios::binary);
      if (!out) throw Error(Errc::io, "cannot open registry journal " + journal_.string());
      out << e.to_json().dump() << '\n';
      out.flush();
      if (!out) throw Error(Errc::io, "write to registry journal failed");
    }
    apply(e);
    return e;
  }

  Resolution resolve(const std::string& auto_label) const {
    std::shared_lock lock(mutex_);
    const auto it = history_.find(auto_label);
    if (it == history_.end()) return Resolution::novel();
    return Resolution::of(it->second.back().label);
  }

  // Upsert history for a key, oldest first.
  std::vector<RegistryEntry> history(const std::string& auto_label) const {
    std::shared_lock lock(mutex_);
    const auto it = history_.find(auto_label);
    return it == history_.end() ? std::vector<RegistryEntry>{} : it->second;
  }

  // Current key -> latest entry.
  std::map<std::string, RegistryEntry> snapshot() const {
    std::shared_lock lock(mutex_);
    std::map<std::string, RegistryEntry> out;
    for (const auto& [k, h] : history_) out.emplace(k, h.back());
    return out;
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return history_.size();
  }

  nlohmann::json to_json() const {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [k, e] : snapshot()) {
      auto j = e.to_json();
      j["revisions"] = history(k).size();
      entries.push_back(std::move(j));
    }
    return {{"entries", std::move(entries)}};
  }

  const std::filesystem::path& journal() const { return journal_; }

 private:
  void apply(const RegistryEntry& e) { history_[e.key].push_back(e); }

  void replay() {
    std::ifstream in(journal_, std::ios::binary);
    if (!in) return;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.is_object() || !j.contains("key") || !j.contains("label")) {
        if (in.peek() == std::char_traits<char>::eof()) break;  // torn tail from an interrupted write
        throw Error(Errc::parse, "corrupt registry journal line in " + journal_.string());
      }
      apply(RegistryEntry::from_json(j));
    }
  }

  std::filesystem::path journal_;
  Clock clock_ = utc_timestamp;
  mutable std::shared_mutex mutex_;
  std::map<std::string, std::vector<RegistryEntry>> history_;
};

// ---------------------------------------------------------------------------
// Label consistency

struct PurityRow {
  std::string attack;
  std::string modal_label;
  std::size_t modal_count = 0;
  std::size_t instances = 0;
  std::size_t distinct_labels = 0;
  double purity = 0;
};

struct PurityReport {
  std::vector<PurityRow> rows;  // sorted by attack name
  std::map<std::string, std::map<std::string, std::size_t>> mapping;  // attack -> label -> count

  const PurityRow* find(const std::string& attack) const {
    for (const auto& r : rows)
      if (r.attack == attack) return &r;
    return nullptr;
  }

  nlohmann::json to_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows)
      out.push_back({{"attack", r.attack}, {"modal_label", r.modal_label}, {"purity", r.purity},
                     {"instances", r.instances}, {"distinct_labels", r.distinct_labels}});
    return {{"rows", std::move(out)}, {"mapping", mapping}};
  }
};

// Modal auto-label share per ground-truth attack type; ties for the mode go to the
// lexicographically smaller label.
inline PurityReport purity_report(std::span<const std::pair<std::string, std::string>> alerts) {
  if (alerts.empty()) throw Error(Errc::invalid_argument, "purity_report: no alerts");
  PurityReport rep;
  for (const auto& [attack, label] : alerts) rep.mapping[attack][label]++;
  for (const auto& [attack, labels] : rep.mapping) {
    PurityRow row;
    row.attack = attack;
    row.distinct_labels = labels.size();
    for (const auto& [label, n] : labels) {
      row.instances += n;
      if (n > row.modal_count) {
        row.modal_count = n;
        row.modal_label = label;
      }
    }
    row.purity = static_cast<double>(row.modal_count) / static_cast<double>(row.instances);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

}  // namespace xids
