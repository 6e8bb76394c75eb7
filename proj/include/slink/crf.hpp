// Linear-chain CRF: forward log-partition, NLL with analytic gradients via
// forward-backward, and Viterbi decoding with an optional transition mask.
#pragma once

#include <span>
#include <vector>

#include "slink/common.hpp"

namespace slink::crf {

struct CrfParams {
  std::size_t num_tags = 0;
  Matrix transition;  // num_tags x num_tags
  Vec start;
  Vec end;
};

CrfParams init_crf(std::size_t num_tags);

// Decode-time legality mask; training stays unmasked so the partition
// function remains smooth.
struct Mask {
  std::vector<std::uint8_t> start_allowed;       // per tag
  std::vector<std::uint8_t> transition_allowed;  // row-major num_tags^2
};
Mask no_mask(std::size_t num_tags);

double path_score(const Matrix& emissions, const CrfParams& p,
                  std::span<const int> tags);

double crf_log_partition(const Matrix& emissions, const CrfParams& p);

struct NllResult {
  double loss = 0.0;
  Matrix d_emissions;
  Matrix d_transition;
  Vec d_start;
  Vec d_end;
};

// loss = logZ - score(gold). Gradients are (marginals - gold indicators).
NllResult crf_nll(const Matrix& emissions, const CrfParams& p,
                  std::span<const int> gold);

// Argmax path under the mask; score ties at a backpointer resolve toward
// the lower tag index.
std::vector<int> viterbi(const Matrix& emissions, const CrfParams& p,
                         const Mask& mask);

}  // namespace slink::crf
