// Knowledge base store: entity records, alias lookup, NIL/ERROR sentinels.
#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "slink/common.hpp"

namespace slink::kb {

inline constexpr const char* kNilId = "__NIL__";
inline constexpr const char* kErrorId = "__ERROR__";
inline constexpr const char* kNilToken = "<NIL>";
inline constexpr const char* kErrorToken = "<ERROR>";
inline constexpr const char* kSepToken = "<SEP>";

enum class Mode { track1, track2 };

inline const char* mode_name(Mode m) {
  return m == Mode::track1 ? "track1" : "track2";
}
Mode parse_mode(std::string_view s);

struct EntityRecord {
  std::string id;
  std::string title;
  std::vector<std::string> aliases;
  std::string description;
};

inline bool is_sentinel_id(std::string_view id) {
  return id == kNilId || id == kErrorId;
}

// Tokens representing an entity for the encoders:
// title <SEP> aliases <SEP> description. Sentinels yield their fixed token.
std::vector<std::string> entity_text(const EntityRecord& e);

// Immutable after construction; iteration order is input order with the
// sentinels appended last (NIL, then ERROR in track1).
class KBStore {
 public:
  // One JSON record per line with fields id/title/aliases/description.
  static KBStore load(const std::string& path, Mode mode);
  static KBStore from_records(std::vector<EntityRecord> recs, Mode mode);

  const std::vector<EntityRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  Mode mode() const { return mode_; }

  bool contains(std::string_view id) const;
  const EntityRecord& at(std::string_view id) const;
  const EntityRecord* find(std::string_view id) const;

  // Ids of all non-sentinel records, in input order.
  std::vector<std::string> non_sentinel_ids() const;
  std::size_t non_sentinel_count() const;

  // Entity ids whose normalized title or alias equals the normalized
  // surface, sorted ascending. Sentinels never match.
  std::vector<std::string> alias_candidates(std::string_view surface) const;
  std::vector<std::string> alias_candidates_tokens(
      std::span<const std::string> surface_tokens) const;

 private:
  void index_aliases();

  Mode mode_ = Mode::track1;
  std::vector<EntityRecord> records_;
  std::unordered_map<std::string, std::size_t> by_id_;
  std::unordered_map<std::string, std::vector<std::string>> alias_index_;
};

}  // namespace slink::kb
