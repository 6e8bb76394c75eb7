// Stage 1: candidate entity retrieval. Precomputed entity vectors, exact
// top-K search, multi-label NCE training with iterative hard-negative
// mining, and recall@K evaluation. The bi-encoder trainer is generic over
// query examples so the linker can reuse it on mention contexts.
#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "slink/common.hpp"
#include "slink/corpus.hpp"
#include "slink/encoder.hpp"
#include "slink/kb.hpp"

namespace slink::retrieval {

struct BiEncoder {
  enc::FeatureSpec spec;
  enc::EncoderParams sent;  // query side
  enc::EncoderParams ent;   // entity side
};

BiEncoder init_biencoder(std::uint32_t d, const enc::FeatureSpec& spec,
                         std::uint64_t seed);
void save_biencoder(const BiEncoder& model, const std::string& sent_path,
                    const std::string& ent_path);
BiEncoder load_biencoder(const std::string& sent_path, const std::string& ent_path);

struct VectorIndex {
  std::vector<std::string> ids;  // non-sentinel entities, KB order
  Matrix matrix;                 // one unit-norm row per id
  std::uint64_t params_fingerprint = 0;

  std::size_t size() const { return ids.size(); }
  const std::string& id_at(std::size_t i) const { return ids[i]; }
  int row_of(const std::string& id) const;  // -1 when absent

 private:
  mutable std::map<std::string, std::size_t> row_lookup_;
};

struct Candidate {
  std::string id;
  double score = 0.0;
};

struct CandidateSet {
  std::string query_id;
  std::vector<Candidate> entries;  // sorted by (score desc, id asc)
};

VectorIndex build_index(const BiEncoder& model, const kb::KBStore& kb);
void save_index(const VectorIndex& index, const std::string& path);
VectorIndex load_index(const std::string& path);

// Exact top-K by inner product. K > |index| returns everything.
CandidateSet search(const VectorIndex& index, const Vec& query, std::size_t k,
                    const std::string& query_id = "");

struct NceResult {
  double loss = 0.0;
  Vec d_gold;
  Vec d_neg;
};

// loss = -sum_g log(exp(g) / (exp(g) + sum_n exp(n))). Each gold competes
// against the shared negatives only, never against other golds.
NceResult nce_loss(std::span<const double> gold_scores,
                   std::span<const double> neg_scores);

std::vector<std::string> sample_negatives_random(const kb::KBStore& kb,
                                                 const std::set<std::string>& gold,
                                                 std::size_t count, Rng& rng);

std::vector<std::string> mine_hard_negatives(const BiEncoder& model,
                                             const VectorIndex& index,
                                             std::span<const std::string> query_tokens,
                                             const std::set<std::string>& gold,
                                             std::size_t count,
                                             std::size_t pool = 100);

// One training example: query tokens plus gold entity occurrences (may
// repeat; deduplicated for the loss, kept for recall).
struct QueryExample {
  std::vector<std::string> tokens;
  std::vector<std::string> gold_ids;
};

struct BiTrainConfig {
  std::uint32_t d = 64;
  enc::FeatureSpec spec;
  int iterations = 3;  // negative sources: random, then mined
  int epochs_per_round = 2;
  std::size_t negatives = 63;
  std::size_t hard_pool = 100;
  double score_scale = 10.0;  // applied to dots inside the training softmax
  enc::AdamConfig adam;
  std::uint64_t seed = 1;
  std::vector<std::size_t> recall_ks{1, 16, 32, 64, 128};
};

struct RoundLog {
  int round = 0;
  std::string negative_source;  // "random" | "mined"
  double mean_loss = 0.0;
  std::map<std::size_t, double> recall;  // on the eval examples
};

struct BiTrainResult {
  BiEncoder model;
  VectorIndex index;
  std::vector<RoundLog> rounds;
};

BiTrainResult train_biencoder(std::span<const QueryExample> train,
                              std::span<const QueryExample> eval,
                              const kb::KBStore& kb, const BiTrainConfig& cfg);

// Sentence-level view of an utterance: x followed by its context.
std::vector<std::string> sentence_query(const corpus::Utterance& u);
QueryExample example_from_utterance(const corpus::Utterance& u);

BiTrainResult train_retriever(std::span<const corpus::Utterance> train,
                              std::span<const corpus::Utterance> valid,
                              const kb::KBStore& kb, const BiTrainConfig& cfg);

std::map<std::size_t, double> recall_at_k(const VectorIndex& index,
                                          const BiEncoder& model,
                                          std::span<const QueryExample> eval,
                                          std::span<const std::size_t> ks);
std::map<std::size_t, double> recall_at_k(const VectorIndex& index,
                                          const BiEncoder& model,
                                          std::span<const corpus::Utterance> eval,
                                          std::span<const std::size_t> ks);

// Plain-text table, one row per round.
std::string recall_table(std::span<const RoundLog> rounds);

}  // namespace slink::retrieval
