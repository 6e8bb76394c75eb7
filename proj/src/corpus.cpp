#include "slink/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "json.hpp"

namespace slink::corpus {

using nlohmann::json;

static bool spans_valid(const std::vector<MentionSpan>& mentions, int len) {
  std::vector<std::pair<int, int>> spans;
  for (const auto& m : mentions) {
    if (m.start < 0 || m.end > len || m.start >= m.end) return false;
    spans.emplace_back(m.start, m.end);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i)
    if (spans[i].first < spans[i - 1].second) return false;
  return true;
}

std::vector<Utterance> load_corpus(const std::string& path, const kb::KBStore& kb,
                                   LoadStats* stats) {
  std::ifstream in(path);
  SLINK_CHECK(in.good(), "cannot open corpus file: " << path);
  LoadStats local;
  std::vector<Utterance> utts;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error("corpus line " + std::to_string(line_no) +
                  ": malformed JSON: " + e.what());
    }
    SLINK_CHECK(j.is_object() && j.contains("doc_id") && j.contains("sent_index") &&
                    j.contains("tokens") && j.contains("mentions"),
                "corpus line " << line_no << ": missing fields");
    Utterance u;
    u.doc_id = j["doc_id"].get<std::string>();
    u.sent_index = j["sent_index"].get<int>();
    SLINK_CHECK(u.sent_index >= 0, "corpus line " << line_no << ": negative sent_index");
    for (const auto& t : j["tokens"]) u.tokens.push_back(t.get<std::string>());
    SLINK_CHECK(!u.tokens.empty(), "corpus line " << line_no << ": empty tokens");
    for (const auto& m : j["mentions"]) {
      MentionSpan span;
      span.start = m["start"].get<int>();
      span.end = m["end"].get<int>();
      span.entity_id = m["entity_id"].get<std::string>();
      u.mentions.push_back(std::move(span));
    }
    if (!spans_valid(u.mentions, static_cast<int>(u.tokens.size()))) {
      ++local.rejected;
      continue;
    }
    for (auto& m : u.mentions) {
      if (m.entity_id == kb::kNilId) continue;
      if (kb::is_sentinel_id(m.entity_id) || !kb.contains(m.entity_id)) {
        m.entity_id = kb::kNilId;
        ++local.unresolved;
      }
    }
    std::sort(u.mentions.begin(), u.mentions.end(),
              [](const MentionSpan& a, const MentionSpan& b) { return a.start < b.start; });
    utts.push_back(std::move(u));
  }
  attach_contexts(utts);
  if (stats) *stats = local;
  return utts;
}

void save_corpus(const std::string& path, std::span<const Utterance> utts) {
  std::ofstream out(path, std::ios::trunc);
  SLINK_CHECK(out.good(), "cannot open for writing: " << path);
  for (const auto& u : utts) {
    json j;
    j["doc_id"] = u.doc_id;
    j["sent_index"] = u.sent_index;
    j["tokens"] = u.tokens;
    json ms = json::array();
    for (const auto& m : u.mentions)
      ms.push_back({{"start", m.start}, {"end", m.end}, {"entity_id", m.entity_id}});
    j["mentions"] = std::move(ms);
    out << j.dump() << "\n";
  }
  SLINK_CHECK(out.good(), "write failed: " << path);
}

void attach_contexts(std::vector<Utterance>& utts) {
  constexpr int kWindow = 2;  // sentences on each side
  std::map<std::string, std::vector<std::size_t>> docs;
  for (std::size_t i = 0; i < utts.size(); ++i) docs[utts[i].doc_id].push_back(i);
  for (auto& [doc, idxs] : docs) {
    std::stable_sort(idxs.begin(), idxs.end(), [&](std::size_t a, std::size_t b) {
      return utts[a].sent_index < utts[b].sent_index;
    });
    for (std::size_t pos = 0; pos < idxs.size(); ++pos) {
      Utterance& u = utts[idxs[pos]];
      u.prev_context.clear();
      u.next_context.clear();
      for (int off = -kWindow; off < 0; ++off) {
        long p = static_cast<long>(pos) + off;
        if (p < 0) continue;
        const auto& src = utts[idxs[p]].tokens;
        u.prev_context.insert(u.prev_context.end(), src.begin(), src.end());
      }
      for (int off = 1; off <= kWindow; ++off) {
        std::size_t p = pos + off;
        if (p >= idxs.size()) break;
        const auto& src = utts[idxs[p]].tokens;
        u.next_context.insert(u.next_context.end(), src.begin(), src.end());
      }
    }
  }
}

TagSequence to_bio(const Utterance& u) {
  TagSequence tags(u.tokens.size(), Tag::O);
  for (const auto& m : u.mentions) {
    tags[m.start] = Tag::B;
    for (int t = m.start + 1; t < m.end; ++t) tags[t] = Tag::I;
  }
  return tags;
}

TagSequence bio_repair(TagSequence tags) {
  for (std::size_t t = 0; t < tags.size(); ++t)
    if (tags[t] == Tag::I && (t == 0 || tags[t - 1] == Tag::O)) tags[t] = Tag::B;
  return tags;
}

bool bio_valid(const TagSequence& tags) {
  for (std::size_t t = 0; t < tags.size(); ++t)
    if (tags[t] == Tag::I && (t == 0 || tags[t - 1] == Tag::O)) return false;
  return true;
}

std::vector<std::pair<int, int>> from_bio(const TagSequence& input) {
  TagSequence tags = bio_repair(input);
  std::vector<std::pair<int, int>> spans;
  int start = -1;
  for (int t = 0; t < static_cast<int>(tags.size()); ++t) {
    if (tags[t] == Tag::B) {
      if (start >= 0) spans.emplace_back(start, t);
      start = t;
    } else if (tags[t] == Tag::O) {
      if (start >= 0) spans.emplace_back(start, t);
      start = -1;
    }
  }
  if (start >= 0) spans.emplace_back(start, static_cast<int>(tags.size()));
  return spans;
}

std::pair<std::vector<Utterance>, std::vector<Utterance>> split_train_valid(
    std::span<const Utterance> corpus, std::uint64_t seed) {
  std::vector<std::string> docs;
  for (const auto& u : corpus)
    if (std::find(docs.begin(), docs.end(), u.doc_id) == docs.end())
      docs.push_back(u.doc_id);
  SLINK_CHECK(docs.size() >= 5,
              "split requires at least 5 documents, got " << docs.size());
  Rng rng(seed);
  std::vector<std::string> shuffled = docs;
  rng.shuffle(shuffled);
  std::size_t n_valid = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(docs.size() / 5.0)), 1, docs.size() - 1);
  std::vector<std::string> valid_docs(shuffled.begin(), shuffled.begin() + n_valid);
  auto is_valid = [&](const std::string& d) {
    return std::find(valid_docs.begin(), valid_docs.end(), d) != valid_docs.end();
  };
  std::vector<Utterance> train, valid;
  for (const auto& u : corpus) (is_valid(u.doc_id) ? valid : train).push_back(u);
  return {std::move(train), std::move(valid)};
}

}  // namespace slink::corpus
