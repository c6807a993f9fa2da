#include "hiphop/data.h"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <ctime>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

namespace hiphop {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

ItemId ItemCatalog::lookup(const std::string& source) const {
  auto it = id_map.find(source);
  return it == id_map.end() ? -1 : it->second;
}

ItemId ItemCatalog::add(const std::string& source) {
  auto [it, inserted] = id_map.emplace(source, static_cast<ItemId>(source_ids.size()));
  if (inserted) {
    source_ids.push_back(source);
    freq.push_back(0);
    metadata.emplace_back();
  }
  return it->second;
}

SourceFormat parse_format(const std::string& tag) {
  if (tag == "jsonl") return SourceFormat::kJsonl;
  if (tag == "diginetica") return SourceFormat::kDiginetica;
  if (tag == "yoochoose") return SourceFormat::kYoochoose;
  if (tag == "amazon") return SourceFormat::kAmazon;
  throw DataError("unknown source format '" + tag + "'");
}

std::string format_name(SourceFormat format) {
  switch (format) {
    case SourceFormat::kJsonl: return "jsonl";
    case SourceFormat::kDiginetica: return "diginetica";
    case SourceFormat::kYoochoose: return "yoochoose";
    case SourceFormat::kAmazon: return "amazon";
  }
  return "unknown";
}

namespace {

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::vector<std::string> split(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, delim)) out.push_back(trim(field));
  if (!line.empty() && line.back() == delim) out.emplace_back();
  return out;
}

std::string json_scalar_to_string(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<int64_t>());
  if (v.is_number_unsigned()) return std::to_string(v.get<uint64_t>());
  throw DataError("expected string or integer item identifier");
}

// Parses "YYYY-MM-DD" or "YYYY-MM-DDTHH:MM:SS" prefixes as UTC.
int64_t parse_utc(const std::string& text) {
  std::tm tm{};
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  int got = std::sscanf(text.c_str(), "%d-%d-%dT%d:%d:%d", &y, &mo, &d, &h, &mi, &s);
  if (got != 3 && got != 6) throw DataError("unparseable date '" + text + "'");
  tm.tm_year = y - 1900;
  tm.tm_mon = mo - 1;
  tm.tm_mday = d;
  tm.tm_hour = h;
  tm.tm_min = mi;
  tm.tm_sec = s;
  return static_cast<int64_t>(timegm(&tm));
}

// Accumulates clicks per session key in order of first appearance.
class SessionAccumulator {
 public:
  Session& get(const std::string& key) {
    auto [it, inserted] = index_.emplace(key, sessions_.size());
    if (inserted) {
      sessions_.emplace_back();
      sessions_.back().key = key;
    }
    return sessions_[it->second];
  }
  std::vector<Session> take() { return std::move(sessions_); }

 private:
  std::unordered_map<std::string, size_t> index_;
  std::vector<Session> sessions_;
};

int find_column(const std::vector<std::string>& header, std::initializer_list<const char*> names) {
  for (size_t i = 0; i < header.size(); ++i) {
    for (const char* name : names) {
      if (header[i] == name) return static_cast<int>(i);
    }
  }
  return -1;
}

}  // namespace

std::vector<Session> parse_jsonl_sessions(std::istream& in) {
  std::vector<Session> sessions;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      json rec = json::parse(line);
      Session s;
      s.key = rec.contains("session") ? json_scalar_to_string(rec.at("session"))
                                      : std::to_string(line_no);
      for (const auto& item : rec.at("items")) s.source_items.push_back(json_scalar_to_string(item));
      if (rec.contains("ts")) {
        s.timestamps = rec.at("ts").get<std::vector<int64_t>>();
        if (s.timestamps.size() != s.source_items.size()) {
          throw DataError("ts length does not match items length");
        }
        if (!s.timestamps.empty()) s.time = s.timestamps.back();
      }
      sessions.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw DataError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return sessions;
}

std::vector<Session> parse_diginetica_csv(std::istream& in) {
  std::string line;
  int64_t line_no = 0;
  int col_session = 0, col_item = 2, col_timeframe = 3, col_date = 4;
  SessionAccumulator acc;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    auto fields = split(line, ';');
    if (line_no == 1 && !fields.empty() && !std::isdigit(static_cast<unsigned char>(fields[0][0]))) {
      col_session = find_column(fields, {"session_id", "sessionId"});
      col_item = find_column(fields, {"item_id", "itemId"});
      col_timeframe = find_column(fields, {"timeframe"});
      col_date = find_column(fields, {"eventdate", "eventDate"});
      if (col_session < 0 || col_item < 0 || col_timeframe < 0 || col_date < 0) {
        throw DataError("line 1: diginetica header lacks session/item/timeframe/eventdate columns");
      }
      continue;
    }
    int needed = std::max({col_session, col_item, col_timeframe, col_date});
    if (static_cast<int>(fields.size()) <= needed) {
      throw DataError("line " + std::to_string(line_no) + ": expected at least " +
                      std::to_string(needed + 1) + " fields");
    }
    try {
      Session& s = acc.get(fields[col_session]);
      s.source_items.push_back(fields[col_item]);
      s.timestamps.push_back(std::stoll(fields[col_timeframe]));
      // The session date is the date of its last row in file order.
      s.time = parse_utc(fields[col_date]);
    } catch (const std::exception& e) {
      throw DataError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return acc.take();
}

std::vector<Session> parse_yoochoose_csv(std::istream& in) {
  std::string line;
  int64_t line_no = 0;
  int col_session = 0, col_time = 1, col_item = 2;
  SessionAccumulator acc;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    auto fields = split(line, ',');
    if (line_no == 1 && !fields.empty() && !std::isdigit(static_cast<unsigned char>(fields[0][0]))) {
      col_session = find_column(fields, {"session_id", "sessionId", "session"});
      col_time = find_column(fields, {"timestamp", "time"});
      col_item = find_column(fields, {"item_id", "itemId", "item"});
      if (col_session < 0 || col_time < 0 || col_item < 0) {
        throw DataError("line 1: yoochoose header lacks session/timestamp/item columns");
      }
      continue;
    }
    int needed = std::max({col_session, col_time, col_item});
    if (static_cast<int>(fields.size()) <= needed) {
      throw DataError("line " + std::to_string(line_no) + ": expected at least " +
                      std::to_string(needed + 1) + " fields");
    }
    try {
      Session& s = acc.get(fields[col_session]);
      int64_t t = parse_utc(fields[col_time].substr(0, 19));
      s.source_items.push_back(fields[col_item]);
      s.timestamps.push_back(t);
      s.time = t;
    } catch (const std::exception& e) {
      throw DataError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return acc.take();
}

std::vector<Session> parse_amazon_reviews(std::istream& in, int64_t max_gap_seconds) {
  struct Review {
    std::string item;
    int64_t time;
  };
  std::unordered_map<std::string, size_t> user_index;
  std::vector<std::string> users;
  std::vector<std::vector<Review>> reviews;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::string t = trim(line);
    if (t.empty()) continue;
    std::string user, item;
    int64_t time = 0;
    try {
      if (t.front() == '{') {
        json rec = json::parse(t);
        user = json_scalar_to_string(rec.at("reviewerID"));
        item = json_scalar_to_string(rec.at("asin"));
        time = rec.at("unixReviewTime").get<int64_t>();
      } else {
        // ratings-only CSV: item,user,rating,timestamp
        auto fields = split(t, ',');
        if (fields.size() < 4) throw DataError("expected item,user,rating,timestamp");
        item = fields[0];
        user = fields[1];
        time = std::stoll(fields[3]);
      }
    } catch (const std::exception& e) {
      throw DataError("line " + std::to_string(line_no) + ": " + e.what());
    }
    auto [it, inserted] = user_index.emplace(user, users.size());
    if (inserted) {
      users.push_back(user);
      reviews.emplace_back();
    }
    reviews[it->second].push_back({item, time});
  }

  std::vector<Session> sessions;
  for (size_t u = 0; u < users.size(); ++u) {
    auto& rs = reviews[u];
    std::stable_sort(rs.begin(), rs.end(),
                     [](const Review& a, const Review& b) { return a.time < b.time; });
    int part = 0;
    Session current;
    auto flush = [&]() {
      if (current.source_items.empty()) return;
      current.key = part == 0 ? users[u] : users[u] + "#" + std::to_string(part);
      current.time = current.timestamps.back();
      sessions.push_back(std::move(current));
      current = Session{};
      ++part;
    };
    for (size_t i = 0; i < rs.size(); ++i) {
      if (max_gap_seconds > 0 && i > 0 && rs[i].time - rs[i - 1].time > max_gap_seconds) flush();
      current.source_items.push_back(rs[i].item);
      current.timestamps.push_back(rs[i].time);
    }
    flush();
  }
  return sessions;
}

std::vector<Session> load_sessions(const std::filesystem::path& path, SourceFormat format) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  switch (format) {
    case SourceFormat::kJsonl: return parse_jsonl_sessions(in);
    case SourceFormat::kDiginetica: return parse_diginetica_csv(in);
    case SourceFormat::kYoochoose: return parse_yoochoose_csv(in);
    case SourceFormat::kAmazon: return parse_amazon_reviews(in);
  }
  throw DataError("unknown source format");
}

namespace {

std::unordered_map<std::string, int64_t> count_items(const std::vector<Session>& sessions) {
  std::unordered_map<std::string, int64_t> counts;
  for (const auto& s : sessions) {
    for (const auto& item : s.source_items) ++counts[item];
  }
  return counts;
}

void drop_short(std::vector<Session>& sessions, int min_len, bool& changed) {
  auto before = sessions.size();
  std::erase_if(sessions, [&](const Session& s) {
    return static_cast<int>(s.source_items.size()) < min_len;
  });
  changed |= sessions.size() != before;
}

void drop_rare(std::vector<Session>& sessions, int min_freq, bool& changed) {
  auto counts = count_items(sessions);
  for (auto& s : sessions) {
    std::vector<std::string> kept;
    std::vector<int64_t> kept_ts;
    for (size_t i = 0; i < s.source_items.size(); ++i) {
      if (counts[s.source_items[i]] >= min_freq) {
        kept.push_back(s.source_items[i]);
        if (!s.timestamps.empty()) kept_ts.push_back(s.timestamps[i]);
      }
    }
    if (kept.size() != s.source_items.size()) {
      changed = true;
      s.source_items = std::move(kept);
      s.timestamps = std::move(kept_ts);
    }
  }
}

// Ensures `source_items` is populated; sessions that only carry catalog IDs
// from an earlier run are mapped back through their numeric IDs.
std::vector<Session> with_source_items(const std::vector<Session>& sessions) {
  std::vector<Session> out = sessions;
  for (auto& s : out) {
    if (s.source_items.empty() && !s.items.empty()) {
      for (ItemId id : s.items) s.source_items.push_back(std::to_string(id));
    }
  }
  return out;
}

}  // namespace

Preprocessed preprocess(const std::vector<Session>& sessions, const FilterConfig& config) {
  if (sessions.empty()) throw DataError("no sessions to preprocess");
  std::vector<Session> work = with_source_items(sessions);
  bool changed = false;
  if (config.fixed_point) {
    do {
      changed = false;
      drop_short(work, config.min_len, changed);
      drop_rare(work, config.min_item_freq, changed);
      drop_short(work, config.min_len, changed);
    } while (changed);
  } else {
    drop_short(work, config.min_len, changed);
    drop_rare(work, config.min_item_freq, changed);
    drop_short(work, config.min_len, changed);
  }
  if (work.empty()) throw DataError("dataset empty after filtering");

  Preprocessed out;
  for (auto& s : work) {
    s.items.clear();
    s.target.reset();
    for (const auto& src : s.source_items) {
      ItemId id = out.catalog.add(src);
      ++out.catalog.freq[id];
      s.items.push_back(id);
    }
  }
  out.sessions = std::move(work);
  return out;
}

std::vector<Session> augment_prefixes(const std::vector<Session>& sessions) {
  std::vector<Session> out;
  for (const auto& s : sessions) {
    if (s.items.size() < 2) {
      throw DataError("session '" + s.key + "' has length " + std::to_string(s.items.size()) +
                      "; sessions must be filtered to length >= 2 before augmentation");
    }
    // Longest prefix first, matching the ordering of the public scripts so
    // fractional training subsets select the same examples.
    for (size_t cut = s.items.size() - 1; cut >= 1; --cut) {
      Session ex;
      ex.key = s.key;
      ex.time = s.time;
      ex.items.assign(s.items.begin(), s.items.begin() + static_cast<std::ptrdiff_t>(cut));
      ex.target = s.items[cut];
      out.push_back(std::move(ex));
    }
  }
  return out;
}

std::vector<std::vector<ItemId>> reconstruct_sessions(const std::vector<Session>& examples) {
  std::unordered_map<std::string, size_t> index;
  std::vector<std::vector<ItemId>> sessions;
  for (size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    std::vector<ItemId> full = ex.items;
    if (ex.target) full.push_back(*ex.target);
    std::string key = ex.key.empty() ? "#" + std::to_string(i) : ex.key;
    auto [it, inserted] = index.emplace(key, sessions.size());
    if (inserted) {
      sessions.push_back(std::move(full));
    } else if (full.size() > sessions[it->second].size()) {
      sessions[it->second] = std::move(full);
    }
  }
  return sessions;
}

DatasetStats compute_stats(const std::vector<Session>& train, const std::vector<Session>& test,
                           const ItemCatalog& catalog) {
  DatasetStats stats;
  stats.items = static_cast<int64_t>(catalog.size());
  stats.train_count = static_cast<int64_t>(train.size());
  stats.test_count = static_cast<int64_t>(test.size());
  for (const auto* part : {&train, &test}) {
    for (const auto& seq : reconstruct_sessions(*part)) stats.clicks += static_cast<int64_t>(seq.size());
  }
  int64_t total_len = 0;
  for (const auto* part : {&train, &test}) {
    for (const auto& ex : *part) total_len += static_cast<int64_t>(ex.items.size()) + 1;
  }
  int64_t labeled = stats.train_count + stats.test_count;
  stats.avg_len = labeled > 0 ? static_cast<double>(total_len) / static_cast<double>(labeled) : 0.0;
  return stats;
}

namespace {

std::string join_field(const json& v, const char* sep) {
  if (v.is_null()) return {};
  if (v.is_string()) return trim(v.get<std::string>());
  if (v.is_array()) {
    std::string out;
    for (const auto& part : v) {
      if (!part.is_string()) continue;
      std::string p = trim(part.get<std::string>());
      if (p.empty()) continue;
      if (!out.empty()) out += sep;
      out += p;
    }
    return out;
  }
  throw DataError("metadata field must be a string or list of strings");
}

}  // namespace

MetadataLoadReport parse_metadata(std::istream& in, ItemCatalog& catalog) {
  MetadataLoadReport report;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    ItemMetadata meta;
    std::string source;
    try {
      json rec = json::parse(line);
      if (rec.contains("item")) {
        source = json_scalar_to_string(rec["item"]);
      } else if (rec.contains("asin")) {
        source = json_scalar_to_string(rec["asin"]);
      } else {
        throw DataError("record has no item key");
      }
      if (rec.contains("title")) meta.title = join_field(rec["title"], " ");
      if (rec.contains("description")) meta.description = join_field(rec["description"], " ");
      if (rec.contains("category")) meta.category = join_field(rec["category"], ", ");
    } catch (const std::exception& e) {
      spdlog::warn("metadata line {}: {}; skipped", line_no, e.what());
      ++report.malformed;
      continue;
    }
    ItemId id = catalog.lookup(source);
    if (id < 0 || meta.empty()) {
      ++report.ignored;
      continue;
    }
    catalog.metadata[id] = std::move(meta);
    ++report.attached;
  }
  return report;
}

MetadataLoadReport load_metadata(const std::filesystem::path& path, ItemCatalog& catalog) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  if (catalog.metadata.size() != catalog.size()) catalog.metadata.resize(catalog.size());
  return parse_metadata(in, catalog);
}

namespace {

// Remaps train then test onto a catalog built from training sessions in
// order; test clicks on unseen items are dropped. Frequencies carry the
// filter-time counts so they still reflect the thresholds applied.
void finalize_split(Dataset& out, std::vector<Session> train, std::vector<Session> test,
                    const ItemCatalog& filtered, int min_len) {
  for (auto& s : train) {
    s.items.clear();
    for (const auto& src : s.source_items) s.items.push_back(out.catalog.add(src));
  }
  for (size_t id = 0; id < out.catalog.size(); ++id) {
    out.catalog.freq[id] = filtered.freq[filtered.lookup(out.catalog.source_ids[id])];
  }
  std::vector<Session> kept_test;
  for (auto& s : test) {
    s.items.clear();
    for (const auto& src : s.source_items) {
      ItemId id = out.catalog.lookup(src);
      if (id >= 0) s.items.push_back(id);
    }
    if (static_cast<int>(s.items.size()) >= std::max(min_len, 2)) kept_test.push_back(std::move(s));
  }
  std::erase_if(train, [&](const Session& s) {
    return static_cast<int>(s.items.size()) < std::max(min_len, 2);
  });
  out.train = augment_prefixes(train);
  out.test = augment_prefixes(kept_test);
}

void sort_by_time(std::vector<Session>& sessions) {
  std::stable_sort(sessions.begin(), sessions.end(),
                   [](const Session& a, const Session& b) { return a.time < b.time; });
}

}  // namespace

Dataset build_dataset(std::vector<Session> raw, const ProtocolConfig& config) {
  if (config.format == SourceFormat::kDiginetica) {
    for (auto& s : raw) {
      std::vector<size_t> order(s.source_items.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](size_t a, size_t b) { return s.timestamps[a] < s.timestamps[b]; });
      std::vector<std::string> items;
      std::vector<int64_t> ts;
      for (size_t i : order) {
        items.push_back(s.source_items[i]);
        ts.push_back(s.timestamps[i]);
      }
      s.source_items = std::move(items);
      s.timestamps = std::move(ts);
    }
  }

  Preprocessed pre = preprocess(raw, config.filter);
  std::vector<Session> train, test;

  if (config.format == SourceFormat::kDiginetica || config.format == SourceFormat::kYoochoose) {
    int64_t max_time = pre.sessions.front().time;
    for (const auto& s : pre.sessions) max_time = std::max(max_time, s.time);
    int64_t days = config.format == SourceFormat::kDiginetica ? 7 : 1;
    int64_t split_time = max_time - 86400 * days;
    // Sessions dated exactly at the split boundary belong to neither side.
    for (auto& s : pre.sessions) {
      if (s.time < split_time) {
        train.push_back(std::move(s));
      } else if (s.time > split_time) {
        test.push_back(std::move(s));
      }
    }
  } else {
    bool timed = std::any_of(pre.sessions.begin(), pre.sessions.end(),
                             [](const Session& s) { return s.time != 0; });
    if (timed) {
      int64_t lo = pre.sessions.front().time, hi = lo;
      for (const auto& s : pre.sessions) {
        lo = std::min(lo, s.time);
        hi = std::max(hi, s.time);
      }
      double cut = static_cast<double>(hi) - config.test_fraction * static_cast<double>(hi - lo);
      for (auto& s : pre.sessions) {
        (static_cast<double>(s.time) > cut ? test : train).push_back(std::move(s));
      }
    } else {
      size_t n_test = static_cast<size_t>(config.test_fraction * static_cast<double>(pre.sessions.size()));
      size_t n_train = pre.sessions.size() - n_test;
      for (size_t i = 0; i < pre.sessions.size(); ++i) {
        (i < n_train ? train : test).push_back(std::move(pre.sessions[i]));
      }
    }
  }
  sort_by_time(train);
  sort_by_time(test);
  if (train.empty()) throw DataError("dataset empty after filtering: no training sessions");

  Dataset out;
  finalize_split(out, std::move(train), std::move(test), pre.catalog, config.filter.min_len);

  if (config.format == SourceFormat::kYoochoose && config.yoochoose_fraction > 1) {
    size_t keep = out.train.size() / static_cast<size_t>(config.yoochoose_fraction);
    out.train.erase(out.train.begin(), out.train.end() - static_cast<std::ptrdiff_t>(keep));
  }
  for (size_t id = 0; id < out.catalog.size(); ++id) {
    ItemId src = pre.catalog.lookup(out.catalog.source_ids[id]);
    if (src >= 0 && pre.catalog.metadata[src]) out.catalog.metadata[id] = pre.catalog.metadata[src];
  }
  out.stats = compute_stats(out.train, out.test, out.catalog);
  return out;
}

std::string stats_to_json(const DatasetStats& stats) {
  ordered_json j;
  j["items"] = stats.items;
  j["clicks"] = stats.clicks;
  j["train"] = stats.train_count;
  j["test"] = stats.test_count;
  j["avg_len"] = stats.avg_len;
  return j.dump(2) + "\n";
}

namespace {

void write_examples(const std::vector<Session>& examples, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& ex : examples) {
    ordered_json rec;
    rec["session"] = ex.key;
    rec["items"] = ex.items;
    rec["target"] = ex.target.value_or(-1);
    out << rec.dump() << '\n';
  }
}

std::vector<Session> read_examples(const std::filesystem::path& path, size_t n_items) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<Session> out;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      json rec = json::parse(line);
      Session s;
      s.key = rec.at("session").get<std::string>();
      s.items = rec.at("items").get<std::vector<ItemId>>();
      ItemId t = rec.at("target").get<ItemId>();
      if (t >= 0) s.target = t;
      for (ItemId id : s.items) {
        if (id < 0 || static_cast<size_t>(id) >= n_items) throw DataError("item id out of range");
      }
      if (s.target && static_cast<size_t>(*s.target) >= n_items) throw DataError("target out of range");
      out.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw DataError(path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_examples(dataset.train, dir / "train.jsonl");
  write_examples(dataset.test, dir / "test.jsonl");

  ordered_json cat;
  cat["n"] = dataset.catalog.size();
  cat["padding_id"] = dataset.catalog.padding_id();
  ordered_json items = ordered_json::array();
  for (size_t id = 0; id < dataset.catalog.size(); ++id) {
    ordered_json rec;
    rec["id"] = id;
    rec["source"] = dataset.catalog.source_ids[id];
    rec["freq"] = dataset.catalog.freq[id];
    if (dataset.catalog.has_metadata(static_cast<ItemId>(id))) {
      const auto& m = *dataset.catalog.metadata[id];
      rec["metadata"] = {{"title", m.title}, {"description", m.description}, {"category", m.category}};
    } else {
      rec["metadata"] = nullptr;
    }
    items.push_back(std::move(rec));
  }
  cat["items"] = std::move(items);
  std::ofstream(dir / "catalog.json", std::ios::binary) << cat.dump(1) << '\n';
  std::ofstream(dir / "stats.json", std::ios::binary) << stats_to_json(dataset.stats);
}

Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  std::ifstream cin(dir / "catalog.json");
  if (!cin) throw DataError("cannot open " + (dir / "catalog.json").string());
  json cat;
  try {
    cat = json::parse(cin);
  } catch (const std::exception& e) {
    throw DataError("catalog.json: " + std::string(e.what()));
  }
  for (const auto& rec : cat.at("items")) {
    ItemId id = ds.catalog.add(rec.at("source").get<std::string>());
    ds.catalog.freq[id] = rec.at("freq").get<int64_t>();
    if (!rec.at("metadata").is_null()) {
      const auto& m = rec["metadata"];
      ds.catalog.metadata[id] = ItemMetadata{m.value("title", ""), m.value("description", ""),
                                             m.value("category", "")};
    }
  }
  ds.train = read_examples(dir / "train.jsonl", ds.catalog.size());
  ds.test = read_examples(dir / "test.jsonl", ds.catalog.size());
  ds.stats = compute_stats(ds.train, ds.test, ds.catalog);
  return ds;
}

std::pair<std::vector<Session>, std::vector<Session>> split_validation(
    const std::vector<Session>& examples, double fraction) {
  std::unordered_map<std::string, size_t> order;
  std::vector<size_t> session_of(examples.size());
  for (size_t i = 0; i < examples.size(); ++i) {
    std::string key = examples[i].key.empty() ? "#" + std::to_string(i) : examples[i].key;
    auto [it, _] = order.emplace(key, order.size());
    session_of[i] = it->second;
  }
  size_t n_sessions = order.size();
  size_t n_valid = static_cast<size_t>(fraction * static_cast<double>(n_sessions) + 0.5);
  if (fraction > 0 && n_valid == 0 && n_sessions >= 2) n_valid = 1;
  if (n_valid >= n_sessions) n_valid = n_sessions > 1 ? n_sessions - 1 : 0;
  size_t first_valid = n_sessions - n_valid;
  std::pair<std::vector<Session>, std::vector<Session>> out;
  for (size_t i = 0; i < examples.size(); ++i) {
    (session_of[i] >= first_valid ? out.second : out.first).push_back(examples[i]);
  }
  return out;
}

std::optional<DatasetStats> reference_stats(const std::string& name) {
  static const std::map<std::string, DatasetStats> kTable = {
      {"diginetica", {43097, 982961, 719470, 60858, 5.12}},
      {"yoochoose1_64", {16766, 557248, 369859, 55898, 6.16}},
      {"luxury_beauty", {1438, 33864, 3213, 603, 8.87}},
      {"musical_instruments", {10479, 230910, 25341, 2182, 8.39}},
      {"prime_pantry", {4963, 137698, 11854, 2318, 9.72}},
  };
  auto it = kTable.find(name);
  if (it == kTable.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> compare_stats(const DatasetStats& actual, const DatasetStats& expected,
                                       double avg_len_tol) {
  std::vector<std::string> diffs;
  auto check = [&](const char* field, int64_t a, int64_t e) {
    if (a != e) diffs.push_back(std::string(field) + ": got " + std::to_string(a) + ", expected " + std::to_string(e));
  };
  check("items", actual.items, expected.items);
  check("clicks", actual.clicks, expected.clicks);
  check("train", actual.train_count, expected.train_count);
  check("test", actual.test_count, expected.test_count);
  if (std::abs(actual.avg_len - expected.avg_len) > avg_len_tol) {
    diffs.push_back("avg_len: got " + std::to_string(actual.avg_len) + ", expected " +
                    std::to_string(expected.avg_len));
  }
  return diffs;
}

}  // namespace hiphop
