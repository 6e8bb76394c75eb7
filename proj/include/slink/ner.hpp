// Stage 2: knowledge-enhanced mention recognition. Per-token features from
// the frozen stage-1 encoders (token vector, document-context vector,
// candidate similarity/alias-match features) feed a one-hidden-layer
// emission scorer decoded by a linear-chain CRF with a BIO mask.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "slink/corpus.hpp"
#include "slink/crf.hpp"
#include "slink/kb.hpp"
#include "slink/mlp.hpp"
#include "slink/retrieval.hpp"

namespace slink::ner {

inline constexpr const char* kClsToken = "<CLS>";

// The literal concatenated input layout for a pluggable contextual encoder:
// <CLS> x <SEP> ctx <SEP> entity segments <SEP>.
struct ComposedInput {
  std::vector<std::string> tokens;
  std::size_t sentence_begin = 0;  // region covering exactly x
  std::size_t sentence_end = 0;
};

ComposedInput compose_input(const corpus::Utterance& u,
                            const retrieval::CandidateSet& candidates,
                            const kb::KBStore& kb, std::size_t top_m = 16);

// Per-token knowledge signals over the sentence region only.
struct KnowledgeFeatures {
  Vec context_vec;                    // sentence-side encoding of ctx(x)
  std::vector<double> best_sim;       // max candidate similarity per token
  std::vector<std::uint8_t> match_flag;  // token covered by a candidate alias
  std::vector<int> match_rank;        // best matching candidate rank, -1 = none
};

// Memoizes single-token encodings; the encoder is frozen here.
struct TokenVecCache {
  std::unordered_map<std::string, Vec> token;
};

KnowledgeFeatures knowledge_features(const corpus::Utterance& u,
                                     const retrieval::CandidateSet& candidates,
                                     const kb::KBStore& kb,
                                     const retrieval::BiEncoder& model,
                                     const retrieval::VectorIndex& index,
                                     std::size_t top_m = 16);

struct NerConfig {
  std::size_t top_m = 16;
  std::size_t hidden = 32;
  int epochs = 10;
  enc::AdamConfig adam{.lr = 0.02};
  bool use_context = true;
  bool use_candidates = true;
  std::uint64_t seed = 1;
};

struct NerModel {
  NerConfig cfg;
  std::uint32_t d = 0;  // encoder dimension the features were built with
  Mlp mlp;
  // Flat trainables: transition[9], start[3], end[3], then MLP weights.
  Vec params;

  std::size_t feature_dim() const { return 2 * d + 4; }
  crf::CrfParams crf_view() const;
};

void save_ner(const NerModel& model, const std::string& path);
NerModel load_ner(const std::string& path);

// L x (2d+4) feature rows: [token vec | context vec | win·ctx, sim, flag, rank]
Matrix ner_features(const corpus::Utterance& u,
                    const retrieval::CandidateSet& candidates,
                    const kb::KBStore& kb, const retrieval::BiEncoder& model,
                    const retrieval::VectorIndex& index, const NerConfig& cfg,
                    TokenVecCache* cache = nullptr);

Matrix emissions_for(const NerModel& model, const Matrix& features);

crf::Mask bio_mask();

NerModel train_ner(std::span<const corpus::Utterance> train,
                   std::span<const retrieval::CandidateSet> candidates,
                   const kb::KBStore& kb, const retrieval::BiEncoder& encoder,
                   const retrieval::VectorIndex& index, const NerConfig& cfg);

std::vector<std::pair<int, int>> predict(const corpus::Utterance& u,
                                         const retrieval::CandidateSet& candidates,
                                         const NerModel& model,
                                         const kb::KBStore& kb,
                                         const retrieval::BiEncoder& encoder,
                                         const retrieval::VectorIndex& index,
                                         TokenVecCache* cache = nullptr);

corpus::TagSequence predict_tags(const corpus::Utterance& u,
                                 const retrieval::CandidateSet& candidates,
                                 const NerModel& model, const kb::KBStore& kb,
                                 const retrieval::BiEncoder& encoder,
                                 const retrieval::VectorIndex& index,
                                 TokenVecCache* cache = nullptr);

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Micro-averaged exact-span match counts.
struct PrfCounts {
  std::size_t predicted = 0;
  std::size_t gold = 0;
  std::size_t correct = 0;

  void add(std::span<const std::pair<int, int>> pred,
           std::span<const std::pair<int, int>> gold_spans);
  Prf prf() const;
};

Prf span_f1(std::span<const std::pair<int, int>> pred,
            std::span<const std::pair<int, int>> gold_spans);

}  // namespace slink::ner
