// Data-parallel inner loops behind retrieval and index building. Each kernel
// has a serial reference implementation; the OpenMP variants must produce
// bit-identical results (parallelism is across independent rows, never
// across a reduction).
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "slink/common.hpp"
#include "slink/encoder.hpp"

namespace slink::kernels {

// out[i] = dot(matrix row i, query)
void score_all_serial(const Matrix& m, std::span<const double> query,
                      std::span<double> out);
void score_all(const Matrix& m, std::span<const double> query,
               std::span<double> out);

// Indices of the k best scores, ordered by (score desc, id asc).
std::vector<std::uint32_t> top_k_indices(std::span<const double> scores,
                                         std::span<const std::string> ids,
                                         std::size_t k);

// Encode one token sequence per output row.
void encode_batch_serial(const enc::EncoderParams& params,
                         const enc::FeatureSpec& spec,
                         std::span<const std::vector<std::string>> texts,
                         Matrix& out);
void encode_batch(const enc::EncoderParams& params, const enc::FeatureSpec& spec,
                  std::span<const std::vector<std::string>> texts, Matrix& out);

}  // namespace slink::kernels
