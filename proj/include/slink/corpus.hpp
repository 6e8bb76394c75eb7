// Transcript corpus: utterances with mention annotations, BIO conversion,
// document-level train/valid split and the synthetic corpus generator.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "slink/common.hpp"
#include "slink/kb.hpp"

namespace slink::corpus {

struct MentionSpan {
  int start = 0;  // token index, inclusive
  int end = 0;    // token index, exclusive
  std::string entity_id;
};

struct Utterance {
  std::string doc_id;
  int sent_index = 0;
  std::vector<std::string> tokens;
  std::vector<std::string> prev_context;  // up to 2 preceding sentences, flattened
  std::vector<std::string> next_context;  // up to 2 following sentences, flattened
  std::vector<MentionSpan> mentions;
};

enum class Tag : int { O = 0, B = 1, I = 2 };
using TagSequence = std::vector<Tag>;

struct LoadStats {
  std::size_t unresolved = 0;  // mention ids absent from the KB, mapped to NIL
  std::size_t rejected = 0;    // records dropped for invalid spans
};

// One JSON record per line: doc_id, sent_index, tokens, mentions.
// Context windows are rebuilt from adjacent sent_index values per doc.
std::vector<Utterance> load_corpus(const std::string& path, const kb::KBStore& kb,
                                   LoadStats* stats = nullptr);
void save_corpus(const std::string& path, std::span<const Utterance> utts);

// Rebuild prev/next context windows in place (used after synthetic generation
// or any direct construction of utterances).
void attach_contexts(std::vector<Utterance>& utts);

TagSequence to_bio(const Utterance& u);
// Repair rule: an I whose left neighbor is O (or sequence start) becomes B.
TagSequence bio_repair(TagSequence tags);
bool bio_valid(const TagSequence& tags);
// Never rejects: invalid input is repaired first.
std::vector<std::pair<int, int>> from_bio(const TagSequence& tags);

// Document-granularity 4:1 split, deterministic in the seed.
std::pair<std::vector<Utterance>, std::vector<Utterance>> split_train_valid(
    std::span<const Utterance> corpus, std::uint64_t seed);

struct SynthConfig {
  int entities = 1000;
  int documents = 40;
  int sentences = 2000;
  double ambiguity_rate = 0.3;   // fraction of entities sharing an alias
  double noise_rate = 0.1;       // fraction of mention surfaces with char noise
  double nil_rate = 0.05;        // fraction of mentions pointing outside the KB
  double decoy_rate = 0.3;       // fraction of sentences with a non-mention alias
  std::uint64_t seed = 1;
};

// Writes a KB file and a corpus file; byte-identical across runs for the
// same config.
void synth_generate(const SynthConfig& cfg, const std::string& kb_path,
                    const std::string& corpus_path);

}  // namespace slink::corpus
