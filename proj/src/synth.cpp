// Synthetic KB + transcript generator. Entities carry topical descriptions;
// sentences embed mention surfaces (optionally character-noised, simulating
// ASR errors), topic words and decoy surfaces of topic-mismatched entities,
// so that retrieval context genuinely disambiguates.
#include <algorithm>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "slink/corpus.hpp"

namespace slink::corpus {

using nlohmann::json;

namespace {

const char* kOnsets[] = {"b",  "d",  "f",  "g",  "k",  "l",  "m",  "n",
                         "p",  "r",  "s",  "t",  "v",  "z",  "ch", "sh",
                         "br", "dr", "st", "tr"};
const char* kNuclei[] = {"a", "e", "i", "o", "u", "ai", "ei", "ou", "an", "en",
                         "on", "ar", "er", "or", "in", "el"};

std::string make_word(Rng& rng, int min_syl, int max_syl) {
  int n = min_syl + static_cast<int>(rng.below(max_syl - min_syl + 1));
  std::string w;
  for (int i = 0; i < n; ++i) {
    w += kOnsets[rng.below(std::size(kOnsets))];
    w += kNuclei[rng.below(std::size(kNuclei))];
  }
  return w;
}

std::string fresh_word(Rng& rng, int min_syl, int max_syl,
                       std::set<std::string>& used) {
  for (;;) {
    std::string w = make_word(rng, min_syl, max_syl);
    if (used.insert(w).second) return w;
  }
}

std::string fresh_surface(Rng& rng, int words, int min_syl, int max_syl,
                          std::set<std::string>& used_surfaces) {
  for (;;) {
    std::string s;
    for (int i = 0; i < words; ++i) {
      if (i) s.push_back(' ');
      s += make_word(rng, min_syl, max_syl);
    }
    if (used_surfaces.insert(normalize_surface(s)).second) return s;
  }
}

std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ' ') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

// One or two random character edits on a random token.
std::vector<std::string> corrupt(std::vector<std::string> tokens, Rng& rng) {
  int edits = 1 + static_cast<int>(rng.below(2));
  for (int e = 0; e < edits; ++e) {
    std::string& w = tokens[rng.below(tokens.size())];
    if (w.empty()) continue;
    std::size_t pos = rng.below(w.size());
    char repl = static_cast<char>('a' + rng.below(26));
    switch (rng.below(3)) {
      case 0: w[pos] = repl; break;                    // substitute
      case 1: if (w.size() > 1) w.erase(pos, 1); break; // delete
      default: w.insert(w.begin() + pos, repl); break;  // insert
    }
  }
  return tokens;
}

struct SynthEntity {
  std::string id;
  std::string title;
  std::vector<std::string> aliases;
  std::string description;
  int topic = 0;
};

struct Segment {
  std::vector<std::string> tokens;
  std::string entity_id;  // empty = plain text / decoy
};

}  // namespace

void synth_generate(const SynthConfig& cfg, const std::string& kb_path,
                    const std::string& corpus_path) {
  SLINK_CHECK(cfg.entities >= 1 && cfg.documents >= 1 && cfg.sentences >= 1,
              "synth sizes must be >= 1");
  Rng rng(cfg.seed);

  std::set<std::string> used_words;
  std::set<std::string> used_surfaces;

  // Filler vocabulary shares the syllable space with entity names, so
  // surface shape alone does not identify a mention.
  std::vector<std::string> filler;
  for (int i = 0; i < 260; ++i) filler.push_back(fresh_word(rng, 2, 3, used_words));

  int n_topics = std::max(4, cfg.entities / 40);
  std::vector<std::vector<std::string>> topics(n_topics);
  for (auto& words : topics)
    for (int i = 0; i < 10; ++i) words.push_back(fresh_word(rng, 3, 3, used_words));

  std::vector<SynthEntity> entities(cfg.entities);
  for (int i = 0; i < cfg.entities; ++i) {
    SynthEntity& e = entities[i];
    e.id = "E" + std::to_string(i + 1);
    int title_words = 2 + (rng.below(4) == 0 ? 1 : 0);
    e.title = fresh_surface(rng, title_words, 2, 3, used_surfaces);
    e.topic = static_cast<int>(rng.below(n_topics));
    // Personal short alias: first title word, when still unambiguous.
    std::string first = split_words(e.title)[0];
    if (rng.below(2) == 0 && used_surfaces.insert(normalize_surface(first)).second)
      e.aliases.push_back(first);
    int desc_len = 4 + static_cast<int>(rng.below(4));
    std::vector<std::string> desc;
    for (int w = 0; w < desc_len; ++w) {
      const auto& bank = rng.below(10) < 7 ? topics[e.topic] : filler;
      desc.push_back(bank[rng.below(bank.size())]);
    }
    e.description = join_tokens(desc);
  }

  // Ambiguity groups: clusters of entities sharing one alias surface.
  int target_shared = static_cast<int>(std::llround(cfg.ambiguity_rate * cfg.entities));
  std::vector<int> ungrouped(cfg.entities);
  for (int i = 0; i < cfg.entities; ++i) ungrouped[i] = i;
  rng.shuffle(ungrouped);
  int assigned = 0;
  std::size_t cursor = 0;
  while (assigned < target_shared && cursor + 1 < ungrouped.size()) {
    int group = 2 + static_cast<int>(rng.below(2));
    std::string shared = fresh_surface(rng, 1, 2, 3, used_surfaces);
    for (int g = 0; g < group && cursor < ungrouped.size(); ++g, ++cursor, ++assigned)
      entities[ungrouped[cursor]].aliases.push_back(shared);
  }

  // Out-of-KB entities behind NIL gold labels.
  int n_ghost = std::max(2, cfg.entities / 20);
  std::vector<std::string> ghosts;
  for (int i = 0; i < n_ghost; ++i)
    ghosts.push_back(fresh_surface(rng, 2, 2, 3, used_surfaces));

  // Documents: 1-2 topics each; sentences mention entities of those topics.
  struct Doc { std::vector<int> topics; std::vector<int> pool; };
  std::vector<std::vector<int>> by_topic(n_topics);
  for (int i = 0; i < cfg.entities; ++i) by_topic[entities[i].topic].push_back(i);
  std::vector<Doc> docs(cfg.documents);
  for (auto& doc : docs) {
    int nt = 1 + static_cast<int>(rng.below(2));
    for (int t = 0; t < nt; ++t) {
      int topic = static_cast<int>(rng.below(n_topics));
      if (std::find(doc.topics.begin(), doc.topics.end(), topic) == doc.topics.end())
        doc.topics.push_back(topic);
    }
    for (int t : doc.topics)
      doc.pool.insert(doc.pool.end(), by_topic[t].begin(), by_topic[t].end());
    if (doc.pool.empty())
      for (int i = 0; i < cfg.entities; ++i) doc.pool.push_back(i);
  }

  auto surface_of = [&](const SynthEntity& e) {
    bool use_alias = !e.aliases.empty() && rng.below(10) < 4;
    return split_words(use_alias ? e.aliases[rng.below(e.aliases.size())] : e.title);
  };

  std::ofstream corpus_out(corpus_path, std::ios::trunc);
  SLINK_CHECK(corpus_out.good(), "cannot open for writing: " << corpus_path);

  for (int s = 0; s < cfg.sentences; ++s) {
    int d = s % cfg.documents;
    const Doc& doc = docs[d];
    std::vector<Segment> segments;

    std::uint64_t roll = rng.below(100);
    int n_mentions = roll < 20 ? 0 : roll < 65 ? 1 : roll < 90 ? 2 : 3;
    std::set<std::string> sentence_surfaces;
    for (int m = 0; m < n_mentions; ++m) {
      Segment seg;
      if (rng.uniform() < cfg.nil_rate) {
        seg.tokens = split_words(ghosts[rng.below(ghosts.size())]);
        seg.entity_id = kb::kNilId;
      } else {
        const SynthEntity& e = entities[doc.pool[rng.below(doc.pool.size())]];
        seg.tokens = surface_of(e);
        seg.entity_id = e.id;
        // Topic words accompany each real mention.
        int tw = 2 + static_cast<int>(rng.below(2));
        for (int w = 0; w < tw; ++w)
          segments.push_back({{topics[e.topic][rng.below(topics[e.topic].size())]}, ""});
      }
      sentence_surfaces.insert(normalize_surface(join_tokens(seg.tokens)));
      if (rng.uniform() < cfg.noise_rate) seg.tokens = corrupt(std::move(seg.tokens), rng);
      segments.push_back(std::move(seg));
    }

    if (rng.uniform() < cfg.decoy_rate) {
      // Alias surface of an entity from a foreign topic, not labeled.
      for (int tries = 0; tries < 8; ++tries) {
        const SynthEntity& e = entities[rng.below(entities.size())];
        if (std::find(doc.topics.begin(), doc.topics.end(), e.topic) != doc.topics.end())
          continue;
        std::vector<std::string> surf = surface_of(e);
        if (sentence_surfaces.count(normalize_surface(join_tokens(surf)))) continue;
        segments.push_back({std::move(surf), ""});
        break;
      }
    }

    // Doc-topic words give the document-level signal even in bare sentences.
    int doc_tw = 1 + static_cast<int>(rng.below(2));
    for (int w = 0; w < doc_tw; ++w) {
      const auto& bank = topics[doc.topics[rng.below(doc.topics.size())]];
      segments.push_back({{bank[rng.below(bank.size())]}, ""});
    }

    std::size_t current = 0;
    for (const auto& seg : segments) current += seg.tokens.size();
    int fill = std::max<int>(3, 10 + static_cast<int>(rng.below(8)) -
                                    static_cast<int>(current));
    for (int w = 0; w < fill; ++w)
      segments.push_back({{filler[rng.below(filler.size())]}, ""});

    rng.shuffle(segments);

    std::vector<std::string> tokens;
    json mentions = json::array();
    for (const auto& seg : segments) {
      int start = static_cast<int>(tokens.size());
      tokens.insert(tokens.end(), seg.tokens.begin(), seg.tokens.end());
      if (!seg.entity_id.empty())
        mentions.push_back({{"start", start},
                            {"end", static_cast<int>(tokens.size())},
                            {"entity_id", seg.entity_id}});
    }

    json j;
    j["doc_id"] = "doc" + std::to_string(d + 1);
    j["sent_index"] = s / cfg.documents;
    j["tokens"] = tokens;
    j["mentions"] = std::move(mentions);
    corpus_out << j.dump() << "\n";
  }
  SLINK_CHECK(corpus_out.good(), "write failed: " << corpus_path);

  std::ofstream kb_out(kb_path, std::ios::trunc);
  SLINK_CHECK(kb_out.good(), "cannot open for writing: " << kb_path);
  for (const auto& e : entities) {
    json j;
    j["id"] = e.id;
    j["title"] = e.title;
    j["aliases"] = e.aliases;
    j["description"] = e.description;
    kb_out << j.dump() << "\n";
  }
  SLINK_CHECK(kb_out.good(), "write failed: " << kb_path);
}

}  // namespace slink::corpus
