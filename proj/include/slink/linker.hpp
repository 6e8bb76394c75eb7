// Stage 3: link mentions to entities. A mention-context bi-encoder (trained
// with the stage-1 machinery) retrieves candidates; an interaction-feature
// ranker trained with a list-wise KL loss over dynamically sampled candidate
// lists picks the entity, with NIL and ERROR sentinels for out-of-KB and
// spurious mentions.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "slink/corpus.hpp"
#include "slink/kb.hpp"
#include "slink/mlp.hpp"
#include "slink/retrieval.hpp"

namespace slink::linker {

inline constexpr const char* kMentionOpen = "<m>";
inline constexpr const char* kMentionClose = "</m>";

struct MentionContext {
  std::vector<std::string> mention;
  std::vector<std::string> left;   // up to `window` tokens, sentence + prev ctx
  std::vector<std::string> right;  // up to `window` tokens, sentence + next ctx
};

MentionContext mention_context(const corpus::Utterance& u, int start, int end,
                               std::size_t window = 16);

// left <m> mention </m> right — the query text for the mention encoder.
std::vector<std::string> mention_query_tokens(const MentionContext& ctx);

struct CandEntry {
  std::string id;
  double retrieval_score = 0.0;
  Vec features;
  double rank_score = 0.0;
};

struct CandidateList {
  std::vector<CandEntry> entries;
  int gold_index = -1;  // training only
  kb::Mode mode = kb::Mode::track1;
};

// Top-K entities by mention-context similarity, with NIL (and in track1,
// ERROR) appended at retrieval score 0. Features are not yet filled.
CandidateList retrieve_for_mention(const MentionContext& ctx,
                                   const retrieval::BiEncoder& model,
                                   const retrieval::VectorIndex& index,
                                   std::size_t k, kb::Mode mode);

inline constexpr std::size_t kNumFeatures = 7;

// Fixed order: cosine(mention-only vec, entity vec), exact-title flag,
// max alias-surface Jaccard over char 3-grams, retrieval score, NIL flag,
// ERROR flag, mention token count. Sentinels zero all text features.
Vec interaction_features(const MentionContext& ctx, const std::string& entity_id,
                         double retrieval_score, const kb::KBStore& kb,
                         const retrieval::BiEncoder& model,
                         const retrieval::VectorIndex& index);

struct KlResult {
  double loss = 0.0;
  Vec d_scores;
};

// KL(one-hot gold || softmax(scores)) = -log p_gold.
KlResult listwise_kl_loss(std::span<const double> scores, std::size_t gold_index);

// Gold always kept; remaining m-1 drawn without replacement with probability
// proportional to softmax(retrieval_score / tau).
std::vector<std::size_t> dynamic_sample(const CandidateList& list, std::size_t m,
                                        double tau, Rng& rng,
                                        std::size_t gold_index);

struct RankerParams {
  Mlp mlp;            // kNumFeatures -> hidden -> 1
  Vec params;         // MLP weights, then NIL bias, then ERROR bias
  double nil_bias() const { return params[params.size() - 2]; }
  double error_bias() const { return params[params.size() - 1]; }
};

RankerParams init_ranker(std::size_t hidden, std::uint64_t seed);
void save_ranker(const RankerParams& r, const std::string& path);
RankerParams load_ranker(const std::string& path);

double rank_score(const RankerParams& r, std::span<const double> features,
                  const std::string& entity_id);

enum class Sampling { dynamic, random };
enum class RankLoss { listwise, pointwise };

struct LinkerConfig {
  std::size_t k = 64;          // retrieved candidates per mention
  std::size_t list_size = 16;  // gold + sampled candidates per step
  double tau = 1.0;
  std::size_t hidden = 32;
  int epochs = 12;
  enc::AdamConfig adam{.lr = 0.02};
  double inject_error_rate = 0.15;  // spurious spans added as ERROR training data
  Sampling sampling = Sampling::dynamic;
  RankLoss loss = RankLoss::listwise;
  retrieval::BiTrainConfig biencoder;  // mention-context bi-encoder settings
  std::uint64_t seed = 1;
};

struct LinkerModel {
  retrieval::BiEncoder biencoder;
  retrieval::VectorIndex index;
  RankerParams ranker;
};

struct TrainingMention {
  std::size_t utterance = 0;  // index into the training span
  int start = 0;
  int end = 0;
  std::string gold_id;  // entity id, __NIL__, or __ERROR__
};

std::vector<TrainingMention> collect_training_mentions(
    std::span<const corpus::Utterance> corpus, double inject_error_rate,
    kb::Mode mode, std::uint64_t seed);

LinkerModel train_linker(std::span<const corpus::Utterance> corpus,
                         const kb::KBStore& kb, kb::Mode mode,
                         const LinkerConfig& cfg);

enum class LinkOutcome { linked, nil, dropped };

struct LinkResult {
  LinkOutcome outcome = LinkOutcome::linked;
  std::string entity_id;
  double score = 0.0;
};

// Scores the candidate list and takes the argmax; an ERROR argmax drops the
// mention (track1 only), a NIL argmax links it to NIL.
LinkResult disambiguate(const MentionContext& ctx, const LinkerModel& model,
                        const kb::KBStore& kb, kb::Mode mode,
                        std::size_t k = 64);

}  // namespace slink::linker
