#include "slink/kernels.hpp"

#include <algorithm>
#include <numeric>

namespace slink::kernels {

void score_all_serial(const Matrix& m, std::span<const double> query,
                      std::span<double> out) {
  SLINK_CHECK(query.size() == m.cols, "score_all: query dimension mismatch");
  SLINK_CHECK(out.size() == m.rows, "score_all: output size mismatch");
  for (std::size_t i = 0; i < m.rows; ++i) {
    const double* row = m.row(i);
    double s = 0.0;
    for (std::size_t j = 0; j < m.cols; ++j) s += row[j] * query[j];
    out[i] = s;
  }
}

void score_all(const Matrix& m, std::span<const double> query,
               std::span<double> out) {
  SLINK_CHECK(query.size() == m.cols, "score_all: query dimension mismatch");
  SLINK_CHECK(out.size() == m.rows, "score_all: output size mismatch");
  const std::int64_t rows = static_cast<std::int64_t>(m.rows);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < rows; ++i) {
    const double* row = m.row(static_cast<std::size_t>(i));
    double s = 0.0;
    for (std::size_t j = 0; j < m.cols; ++j) s += row[j] * query[j];
    out[static_cast<std::size_t>(i)] = s;
  }
}

std::vector<std::uint32_t> top_k_indices(std::span<const double> scores,
                                         std::span<const std::string> ids,
                                         std::size_t k) {
  SLINK_CHECK(scores.size() == ids.size(), "top_k: scores/ids size mismatch");
  std::vector<std::uint32_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0u);
  auto better = [&](std::uint32_t a, std::uint32_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  };
  k = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + k, order.end(), better);
  order.resize(k);
  return order;
}

void encode_batch_serial(const enc::EncoderParams& params,
                         const enc::FeatureSpec& spec,
                         std::span<const std::vector<std::string>> texts,
                         Matrix& out) {
  SLINK_CHECK(out.rows == texts.size() && out.cols == params.d,
              "encode_batch: output shape mismatch");
  for (std::size_t i = 0; i < texts.size(); ++i) {
    Vec v = enc::encode(params, spec, texts[i]);
    std::copy(v.begin(), v.end(), out.row(i));
  }
}

void encode_batch(const enc::EncoderParams& params, const enc::FeatureSpec& spec,
                  std::span<const std::vector<std::string>> texts, Matrix& out) {
  SLINK_CHECK(out.rows == texts.size() && out.cols == params.d,
              "encode_batch: output shape mismatch");
  const std::int64_t n = static_cast<std::int64_t>(texts.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    Vec v = enc::encode(params, spec, texts[static_cast<std::size_t>(i)]);
    std::copy(v.begin(), v.end(), out.row(static_cast<std::size_t>(i)));
  }
}

}  // namespace slink::kernels
