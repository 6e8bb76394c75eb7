#include "slink/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace slink::ensemble {

using corpus::Tag;
using corpus::TagSequence;

TagSequence vote(std::span<const TagSequence> sequences, const VoteConfig& cfg) {
  SLINK_CHECK(!sequences.empty(), "vote: no sequences");
  const std::size_t L = sequences.front().size();
  for (const auto& s : sequences)
    SLINK_CHECK(s.size() == L, "vote: sequence length mismatch");
  const double n = static_cast<double>(sequences.size());

  auto pick_by_priority = [&](const std::array<int, 3>& count, bool allow_o) {
    int best_count = -1;
    Tag best = Tag::O;
    for (Tag t : cfg.priority) {
      if (!allow_o && t == Tag::O) continue;
      int c = count[static_cast<int>(t)];
      if (c > best_count) {
        best_count = c;
        best = t;
      }
    }
    return best;
  };

  TagSequence out(L, Tag::O);
  for (std::size_t t = 0; t < L; ++t) {
    std::array<int, 3> count{0, 0, 0};
    for (const auto& s : sequences) ++count[static_cast<int>(s[t])];
    if (cfg.strategy == VoteStrategy::f1) {
      out[t] = pick_by_priority(count, true);
    } else {
      const double o_share = count[static_cast<int>(Tag::O)] / n;
      if (o_share >= cfg.o_threshold || count[static_cast<int>(Tag::O)] ==
                                            static_cast<int>(sequences.size())) {
        out[t] = Tag::O;
      } else {
        out[t] = pick_by_priority(count, false);
      }
    }
  }
  return corpus::bio_repair(std::move(out));
}

FusionWeights FusionWeights::make(double retrieval, std::vector<double> rankers) {
  SLINK_CHECK(retrieval >= 0.0, "fusion weights must be non-negative");
  double total = retrieval;
  for (double w : rankers) {
    SLINK_CHECK(w >= 0.0, "fusion weights must be non-negative");
    total += w;
  }
  SLINK_CHECK(total > 0.0, "at least one fusion weight must be positive");
  FusionWeights out;
  out.retrieval = retrieval / total;
  out.rankers = std::move(rankers);
  for (double& w : out.rankers) w /= total;
  return out;
}

namespace {

Vec softmax(std::span<const double> xs) {
  Vec p(xs.size());
  const double lse = log_sum_exp(xs);
  for (std::size_t i = 0; i < xs.size(); ++i) p[i] = std::exp(xs[i] - lse);
  return p;
}

}  // namespace

std::vector<std::pair<std::string, double>> hybrid_rank_scored(
    std::span<const std::string> ids, std::span<const double> retrieval_scores,
    std::span<const std::vector<double>> ranker_scores, const FusionWeights& w) {
  const std::size_t n = ids.size();
  SLINK_CHECK(retrieval_scores.size() == n, "hybrid_rank: retrieval size mismatch");
  SLINK_CHECK(ranker_scores.size() == w.rankers.size(),
              "hybrid_rank: " << ranker_scores.size() << " score lists for "
                              << w.rankers.size() << " weights");
  for (const auto& s : ranker_scores)
    SLINK_CHECK(s.size() == n, "hybrid_rank: candidate set mismatch across rankers");

  Vec fused(n, 0.0);
  if (w.retrieval > 0.0) {
    Vec p = softmax(retrieval_scores);
    for (std::size_t i = 0; i < n; ++i) fused[i] += w.retrieval * p[i];
  }
  for (std::size_t j = 0; j < ranker_scores.size(); ++j) {
    if (w.rankers[j] == 0.0) continue;
    Vec p = softmax(ranker_scores[j]);
    for (std::size_t i = 0; i < n; ++i) fused[i] += w.rankers[j] * p[i];
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (fused[a] != fused[b]) return fused[a] > fused[b];
    return ids[a] < ids[b];
  });
  std::vector<std::pair<std::string, double>> out;
  out.reserve(n);
  for (auto i : order) out.emplace_back(ids[i], fused[i]);
  return out;
}

std::vector<std::string> hybrid_rank(
    std::span<const std::string> ids, std::span<const double> retrieval_scores,
    std::span<const std::vector<double>> ranker_scores, const FusionWeights& w) {
  auto scored = hybrid_rank_scored(ids, retrieval_scores, ranker_scores, w);
  std::vector<std::string> out;
  out.reserve(scored.size());
  for (auto& [id, _] : scored) out.push_back(std::move(id));
  return out;
}

}  // namespace slink::ensemble
