#include "slink/crf.hpp"

#include <cmath>
#include <limits>

namespace slink::crf {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

CrfParams init_crf(std::size_t num_tags) {
  CrfParams p;
  p.num_tags = num_tags;
  p.transition = Matrix(num_tags, num_tags);
  p.start.assign(num_tags, 0.0);
  p.end.assign(num_tags, 0.0);
  return p;
}

Mask no_mask(std::size_t num_tags) {
  Mask m;
  m.start_allowed.assign(num_tags, 1);
  m.transition_allowed.assign(num_tags * num_tags, 1);
  return m;
}

static void check_shapes(const Matrix& emissions, const CrfParams& p) {
  SLINK_CHECK(emissions.rows >= 1, "CRF requires at least one position");
  SLINK_CHECK(emissions.cols == p.num_tags && p.transition.rows == p.num_tags &&
                  p.transition.cols == p.num_tags && p.start.size() == p.num_tags &&
                  p.end.size() == p.num_tags,
              "CRF shape mismatch");
}

double path_score(const Matrix& emissions, const CrfParams& p,
                  std::span<const int> tags) {
  check_shapes(emissions, p);
  SLINK_CHECK(tags.size() == emissions.rows, "path_score: tag length mismatch");
  double s = p.start[tags[0]] + emissions.at(0, tags[0]);
  for (std::size_t t = 1; t < tags.size(); ++t)
    s += p.transition.at(tags[t - 1], tags[t]) + emissions.at(t, tags[t]);
  return s + p.end[tags.back()];
}

double crf_log_partition(const Matrix& emissions, const CrfParams& p) {
  check_shapes(emissions, p);
  const std::size_t L = emissions.rows, T = p.num_tags;
  Vec alpha(T), next(T), buf(T);
  for (std::size_t j = 0; j < T; ++j) alpha[j] = p.start[j] + emissions.at(0, j);
  for (std::size_t t = 1; t < L; ++t) {
    for (std::size_t j = 0; j < T; ++j) {
      for (std::size_t i = 0; i < T; ++i) buf[i] = alpha[i] + p.transition.at(i, j);
      next[j] = log_sum_exp(buf) + emissions.at(t, j);
    }
    alpha.swap(next);
  }
  for (std::size_t j = 0; j < T; ++j) alpha[j] += p.end[j];
  return log_sum_exp(alpha);
}

NllResult crf_nll(const Matrix& emissions, const CrfParams& p,
                  std::span<const int> gold) {
  check_shapes(emissions, p);
  SLINK_CHECK(gold.size() == emissions.rows, "crf_nll: gold length mismatch");
  const std::size_t L = emissions.rows, T = p.num_tags;
  for (std::size_t t = 0; t < L; ++t)
    SLINK_CHECK(gold[t] >= 0 && gold[t] < static_cast<int>(T),
                "crf_nll: gold tag out of range");

  // Forward and backward tables in log space.
  Matrix alpha(L, T), beta(L, T);
  Vec buf(T);
  for (std::size_t j = 0; j < T; ++j) alpha.at(0, j) = p.start[j] + emissions.at(0, j);
  for (std::size_t t = 1; t < L; ++t)
    for (std::size_t j = 0; j < T; ++j) {
      for (std::size_t i = 0; i < T; ++i)
        buf[i] = alpha.at(t - 1, i) + p.transition.at(i, j);
      alpha.at(t, j) = log_sum_exp(buf) + emissions.at(t, j);
    }
  for (std::size_t j = 0; j < T; ++j) beta.at(L - 1, j) = p.end[j];
  for (std::size_t t = L - 1; t-- > 0;)
    for (std::size_t i = 0; i < T; ++i) {
      for (std::size_t j = 0; j < T; ++j)
        buf[j] = p.transition.at(i, j) + emissions.at(t + 1, j) + beta.at(t + 1, j);
      beta.at(t, i) = log_sum_exp(buf);
    }
  Vec terminal(T);
  for (std::size_t j = 0; j < T; ++j) terminal[j] = alpha.at(L - 1, j) + p.end[j];
  const double log_z = log_sum_exp(terminal);

  NllResult res;
  res.loss = log_z - path_score(emissions, p, gold);
  res.d_emissions = Matrix(L, T);
  res.d_transition = Matrix(T, T);
  res.d_start.assign(T, 0.0);
  res.d_end.assign(T, 0.0);

  // Unary marginals.
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t j = 0; j < T; ++j)
      res.d_emissions.at(t, j) = std::exp(alpha.at(t, j) + beta.at(t, j) - log_z);
  // Pairwise marginals.
  for (std::size_t t = 1; t < L; ++t)
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < T; ++j)
        res.d_transition.at(i, j) +=
            std::exp(alpha.at(t - 1, i) + p.transition.at(i, j) +
                     emissions.at(t, j) + beta.at(t, j) - log_z);
  for (std::size_t j = 0; j < T; ++j) {
    res.d_start[j] = res.d_emissions.at(0, j);
    res.d_end[j] = std::exp(terminal[j] - log_z);
  }

  // Subtract gold indicators.
  res.d_start[gold[0]] -= 1.0;
  res.d_end[gold[L - 1]] -= 1.0;
  for (std::size_t t = 0; t < L; ++t) res.d_emissions.at(t, gold[t]) -= 1.0;
  for (std::size_t t = 1; t < L; ++t) res.d_transition.at(gold[t - 1], gold[t]) -= 1.0;
  return res;
}

std::vector<int> viterbi(const Matrix& emissions, const CrfParams& p,
                         const Mask& mask) {
  check_shapes(emissions, p);
  const std::size_t L = emissions.rows, T = p.num_tags;
  SLINK_CHECK(mask.start_allowed.size() == T &&
                  mask.transition_allowed.size() == T * T,
              "viterbi: mask shape mismatch");
  Matrix score(L, T, kNegInf);
  std::vector<std::vector<int>> back(L, std::vector<int>(T, -1));
  for (std::size_t j = 0; j < T; ++j)
    if (mask.start_allowed[j]) score.at(0, j) = p.start[j] + emissions.at(0, j);
  for (std::size_t t = 1; t < L; ++t)
    for (std::size_t j = 0; j < T; ++j) {
      double best = kNegInf;
      int arg = -1;
      for (std::size_t i = 0; i < T; ++i) {
        if (!mask.transition_allowed[i * T + j]) continue;
        if (score.at(t - 1, i) == kNegInf) continue;
        double s = score.at(t - 1, i) + p.transition.at(i, j);
        if (s > best) {  // strict: ties keep the lower predecessor index
          best = s;
          arg = static_cast<int>(i);
        }
      }
      if (arg >= 0) {
        score.at(t, j) = best + emissions.at(t, j);
        back[t][j] = arg;
      }
    }
  double best = kNegInf;
  int arg = 0;
  for (std::size_t j = 0; j < T; ++j) {
    if (score.at(L - 1, j) == kNegInf) continue;
    double s = score.at(L - 1, j) + p.end[j];
    if (s > best) {
      best = s;
      arg = static_cast<int>(j);
    }
  }
  std::vector<int> tags(L);
  tags[L - 1] = arg;
  for (std::size_t t = L - 1; t-- > 0;) tags[t] = back[t + 1][tags[t + 1]];
  return tags;
}

}  // namespace slink::crf
