// Ensembling: token-level voting over tagger outputs (F1 and recall
// strategies) and hybrid fusion of retrieval and ranking scores.
#pragma once

#include <array>
#include <string>
#include <vector>

#include "slink/common.hpp"
#include "slink/corpus.hpp"

namespace slink::ensemble {

enum class VoteStrategy { f1, recall };

struct VoteConfig {
  VoteStrategy strategy = VoteStrategy::f1;
  double o_threshold = 0.7;  // recall strategy: O needs this vote share
  // Tie priority among non-O tags, most preferred first.
  std::array<corpus::Tag, 3> priority{corpus::Tag::B, corpus::Tag::I, corpus::Tag::O};
};

// Token-level vote over N same-length sequences, then BIO repair.
corpus::TagSequence vote(std::span<const corpus::TagSequence> sequences,
                         const VoteConfig& cfg);

struct FusionWeights {
  double retrieval = 0.0;
  std::vector<double> rankers;

  // Normalizes to sum 1; at least one weight must be positive.
  static FusionWeights make(double retrieval, std::vector<double> rankers);
};

// final(e) = w_r * softmax_r(e) + sum_j w_j * softmax_j(e), each score family
// softmax-normalized over the shared candidate list; ordered by
// (fused score desc, id asc).
std::vector<std::pair<std::string, double>> hybrid_rank_scored(
    std::span<const std::string> ids, std::span<const double> retrieval_scores,
    std::span<const std::vector<double>> ranker_scores, const FusionWeights& w);

std::vector<std::string> hybrid_rank(
    std::span<const std::string> ids, std::span<const double> retrieval_scores,
    std::span<const std::vector<double>> ranker_scores, const FusionWeights& w);

}  // namespace slink::ensemble
