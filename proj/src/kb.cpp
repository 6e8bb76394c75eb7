#include "slink/kb.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace slink::kb {

using nlohmann::json;

Mode parse_mode(std::string_view s) {
  if (s == "track1") return Mode::track1;
  if (s == "track2") return Mode::track2;
  throw Error("unknown mode: " + std::string(s) + " (expected track1|track2)");
}

std::vector<std::string> entity_text(const EntityRecord& e) {
  if (e.id == kNilId) return {kNilToken};
  if (e.id == kErrorId) return {kErrorToken};
  std::vector<std::string> out;
  std::istringstream title(e.title);
  for (std::string t; title >> t;) out.push_back(t);
  out.push_back(kSepToken);
  for (const auto& alias : e.aliases) {
    std::istringstream as(alias);
    for (std::string t; as >> t;) out.push_back(t);
  }
  out.push_back(kSepToken);
  std::istringstream desc(e.description);
  for (std::string t; desc >> t;) out.push_back(t);
  return out;
}

static EntityRecord parse_record(const json& j, std::size_t line_no) {
  SLINK_CHECK(j.is_object(), "kb line " << line_no << ": not a JSON object");
  for (const char* field : {"id", "title", "aliases", "description"})
    SLINK_CHECK(j.contains(field),
                "kb line " << line_no << ": missing field '" << field << "'");
  EntityRecord rec;
  SLINK_CHECK(j["id"].is_string() && j["title"].is_string() &&
                  j["aliases"].is_array() && j["description"].is_string(),
              "kb line " << line_no << ": wrong field types");
  rec.id = j["id"].get<std::string>();
  rec.title = j["title"].get<std::string>();
  for (const auto& a : j["aliases"]) {
    SLINK_CHECK(a.is_string(), "kb line " << line_no << ": alias not a string");
    rec.aliases.push_back(a.get<std::string>());
  }
  rec.description = j["description"].get<std::string>();
  SLINK_CHECK(!rec.id.empty(), "kb line " << line_no << ": empty id");
  SLINK_CHECK(!is_sentinel_id(rec.id),
              "kb line " << line_no << ": reserved id '" << rec.id << "'");
  SLINK_CHECK(!rec.title.empty(), "kb line " << line_no << ": empty title");
  return rec;
}

KBStore KBStore::load(const std::string& path, Mode mode) {
  std::ifstream in(path);
  SLINK_CHECK(in.good(), "cannot open kb file: " << path);
  std::vector<EntityRecord> recs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error("kb line " + std::to_string(line_no) +
                  ": malformed JSON: " + e.what());
    }
    recs.push_back(parse_record(j, line_no));
  }
  return from_records(std::move(recs), mode);
}

KBStore KBStore::from_records(std::vector<EntityRecord> recs, Mode mode) {
  KBStore store;
  store.mode_ = mode;
  store.records_ = std::move(recs);
  store.records_.push_back({kNilId, kNilToken, {}, ""});
  if (mode == Mode::track1) store.records_.push_back({kErrorId, kErrorToken, {}, ""});
  for (std::size_t i = 0; i < store.records_.size(); ++i) {
    const auto& rec = store.records_[i];
    auto [it, inserted] = store.by_id_.emplace(rec.id, i);
    (void)it;
    SLINK_CHECK(inserted, "duplicate entity id '" << rec.id << "' (record "
                                                  << (i + 1) << ")");
  }
  store.index_aliases();
  return store;
}

void KBStore::index_aliases() {
  for (const auto& rec : records_) {
    if (is_sentinel_id(rec.id)) continue;
    auto add = [&](const std::string& surface) {
      std::string key = normalize_surface(surface);
      if (key.empty()) return;
      auto& ids = alias_index_[key];
      if (std::find(ids.begin(), ids.end(), rec.id) == ids.end())
        ids.push_back(rec.id);
    };
    add(rec.title);
    for (const auto& a : rec.aliases) add(a);
  }
  for (auto& [key, ids] : alias_index_) std::sort(ids.begin(), ids.end());
}

bool KBStore::contains(std::string_view id) const {
  return by_id_.count(std::string(id)) > 0;
}

const EntityRecord* KBStore::find(std::string_view id) const {
  auto it = by_id_.find(std::string(id));
  return it == by_id_.end() ? nullptr : &records_[it->second];
}

const EntityRecord& KBStore::at(std::string_view id) const {
  const EntityRecord* rec = find(id);
  SLINK_CHECK(rec != nullptr, "unknown entity id '" << id << "'");
  return *rec;
}

std::vector<std::string> KBStore::non_sentinel_ids() const {
  std::vector<std::string> ids;
  ids.reserve(records_.size());
  for (const auto& rec : records_)
    if (!is_sentinel_id(rec.id)) ids.push_back(rec.id);
  return ids;
}

std::size_t KBStore::non_sentinel_count() const {
  return records_.size() - (mode_ == Mode::track1 ? 2 : 1);
}

std::vector<std::string> KBStore::alias_candidates(std::string_view surface) const {
  auto it = alias_index_.find(normalize_surface(surface));
  if (it == alias_index_.end()) return {};
  return it->second;
}

std::vector<std::string> KBStore::alias_candidates_tokens(
    std::span<const std::string> surface_tokens) const {
  return alias_candidates(join_tokens(surface_tokens));
}

}  // namespace slink::kb
