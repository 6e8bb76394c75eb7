#include "slink/encoder.hpp"

#include <algorithm>
#include <cmath>

#include "slink/binio.hpp"

namespace slink::enc {

FeatureCounts featurize(const FeatureSpec& spec, std::span<const std::string> tokens) {
  SLINK_CHECK(spec.buckets >= 2, "FeatureSpec.buckets must be >= 2");
  std::vector<std::uint32_t> raw;
  for (const auto& tok : tokens) {
    if (spec.word_unigrams) {
      std::uint64_t h = fnv1a64("w:" + tok, spec.hash_seed);
      raw.push_back(static_cast<std::uint32_t>(h % spec.buckets));
    }
    std::string padded = "^" + tok + "$";
    for (int n : spec.ngram_sizes) {
      if (n <= 0 || static_cast<std::size_t>(n) > padded.size()) continue;
      for (std::size_t i = 0; i + n <= padded.size(); ++i) {
        std::uint64_t h = fnv1a64(std::string_view(padded).substr(i, n),
                                  spec.hash_seed + 0x9e3779b97f4a7c15ull);
        raw.push_back(static_cast<std::uint32_t>(h % spec.buckets));
      }
    }
  }
  std::sort(raw.begin(), raw.end());
  FeatureCounts fc;
  for (std::size_t i = 0; i < raw.size();) {
    std::size_t j = i;
    while (j < raw.size() && raw[j] == raw[i]) ++j;
    fc.items.emplace_back(raw[i], static_cast<double>(j - i));
    i = j;
  }
  fc.total = static_cast<double>(raw.size());
  return fc;
}

EncoderParams init_params(Side side, std::uint32_t d, const FeatureSpec& spec,
                          std::uint64_t seed) {
  SLINK_CHECK(d >= 2, "encoder dimension must be >= 2");
  EncoderParams p;
  p.side = side;
  p.d = d;
  p.embedding = Matrix(spec.buckets, d);
  p.projection = Matrix(d, d);
  Rng rng(seed);
  double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (double& x : p.embedding.data)
    x = (rng.uniform() * 2.0 - 1.0) * scale;
  for (std::uint32_t i = 0; i < d; ++i)
    for (std::uint32_t j = 0; j < d; ++j)
      p.projection.at(i, j) = (i == j ? 1.0 : 0.0) + (rng.uniform() * 2.0 - 1.0) * 0.01;
  return p;
}

Vec encode(const EncoderParams& params, const FeatureSpec& spec,
           std::span<const std::string> tokens, EncodeTrace* trace) {
  const std::uint32_t d = params.d;
  SLINK_CHECK(params.embedding.rows == spec.buckets && params.embedding.cols == d,
              "encoder params do not match feature spec");
  FeatureCounts fc = featurize(spec, tokens);
  if (fc.items.empty()) {
    Vec e0(d, 0.0);
    e0[0] = 1.0;
    if (trace) {
      trace->feats = std::move(fc);
      trace->out = e0;
      trace->empty = true;
    }
    return e0;
  }
  Vec pooled(d, 0.0);
  for (const auto& [bucket, count] : fc.items) {
    const double w = count / fc.total;
    const double* row = params.embedding.row(bucket);
    for (std::uint32_t j = 0; j < d; ++j) pooled[j] += w * row[j];
  }
  Vec projected(d, 0.0);
  for (std::uint32_t i = 0; i < d; ++i)
    projected[i] = dot(params.projection.row_span(i), pooled);
  SLINK_CHECK(all_finite(projected), "encode: non-finite parameters");
  double norm = l2_norm(projected);
  Vec out(d);
  double inv;
  if (norm < 1e-12) {
    // Degenerate direction; fall back to the fixed basis vector.
    std::fill(out.begin(), out.end(), 0.0);
    out[0] = 1.0;
    inv = 0.0;
  } else {
    inv = 1.0 / norm;
    for (std::uint32_t j = 0; j < d; ++j) out[j] = projected[j] * inv;
  }
  if (trace) {
    trace->feats = std::move(fc);
    trace->pooled = std::move(pooled);
    trace->projected = std::move(projected);
    trace->out = out;
    trace->inv_norm = inv;
    trace->empty = false;
  }
  return out;
}

double dot_score(const Vec& a, const Vec& b) {
  SLINK_CHECK(a.size() == b.size(), "dot_score: dimension mismatch "
                                        << a.size() << " vs " << b.size());
  return dot(a, b);
}

void EncoderGrad::ensure_shape(const EncoderParams& p) {
  if (projection.rows != p.d) projection = Matrix(p.d, p.d);
}

void EncoderGrad::add_scaled(const EncoderGrad& other, double scale) {
  for (const auto& [row, g] : other.embedding) {
    Vec& mine = embedding[row];
    if (mine.empty()) mine.assign(g.size(), 0.0);
    for (std::size_t j = 0; j < g.size(); ++j) mine[j] += scale * g[j];
  }
  if (projection.data.empty()) {
    projection = other.projection;
    for (double& x : projection.data) x *= scale;
  } else {
    for (std::size_t i = 0; i < projection.data.size(); ++i)
      projection.data[i] += scale * other.projection.data[i];
  }
}

void backprop_encode(const EncoderParams& params, const EncodeTrace& trace,
                     std::span<const double> d_out, EncoderGrad* grad) {
  if (trace.empty || trace.inv_norm == 0.0) return;  // constant output
  const std::uint32_t d = params.d;
  grad->ensure_shape(params);
  // Through normalization: du = (I - v v^T) * dv / ||u||
  double vdot = dot(trace.out, d_out);
  Vec d_proj(d);
  for (std::uint32_t j = 0; j < d; ++j)
    d_proj[j] = (d_out[j] - trace.out[j] * vdot) * trace.inv_norm;
  // Through projection: dW += du p^T ; dp = W^T du
  Vec d_pooled(d, 0.0);
  for (std::uint32_t i = 0; i < d; ++i) {
    const double gi = d_proj[i];
    if (gi == 0.0) continue;
    double* wrow = grad->projection.row(i);
    const double* prow = params.projection.row(i);
    for (std::uint32_t j = 0; j < d; ++j) {
      wrow[j] += gi * trace.pooled[j];
      d_pooled[j] += gi * prow[j];
    }
  }
  // Through mean pooling into the touched embedding rows.
  for (const auto& [bucket, count] : trace.feats.items) {
    const double w = count / trace.feats.total;
    Vec& row = grad->embedding[bucket];
    if (row.empty()) row.assign(d, 0.0);
    for (std::uint32_t j = 0; j < d; ++j) row[j] += w * d_pooled[j];
  }
}

AdamDense::AdamDense(AdamConfig cfg, std::size_t size)
    : cfg_(cfg), m_(size, 0.0), v_(size, 0.0) {}

void AdamDense::step(std::span<double> params, std::span<const double> grad) {
  SLINK_CHECK(params.size() == m_.size() && grad.size() == m_.size(),
              "AdamDense: size mismatch");
  SLINK_CHECK(all_finite(grad), "AdamDense: non-finite gradient");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
    params[i] -= cfg_.lr * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + cfg_.eps);
  }
}

AdamEncoder::AdamEncoder(AdamConfig cfg, EncoderParams* target)
    : cfg_(cfg),
      target_(target),
      rows_(target->embedding.rows),
      proj_m_(target->projection.data.size(), 0.0),
      proj_v_(target->projection.data.size(), 0.0) {}

void AdamEncoder::step(const EncoderGrad& grad) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const std::uint32_t d = target_->d;
  for (const auto& [bucket, g] : grad.embedding) {
    SLINK_CHECK(all_finite(g), "AdamEncoder: non-finite gradient at embedding row "
                                   << bucket << " (step " << t_ << ")");
    auto& slot = rows_[bucket];
    if (!slot) slot = std::make_unique<RowMoments>(RowMoments{Vec(d, 0.0), Vec(d, 0.0)});
    double* row = target_->embedding.row(bucket);
    for (std::uint32_t j = 0; j < d; ++j) {
      slot->m[j] = cfg_.beta1 * slot->m[j] + (1.0 - cfg_.beta1) * g[j];
      slot->v[j] = cfg_.beta2 * slot->v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      row[j] -= cfg_.lr * (slot->m[j] / bc1) / (std::sqrt(slot->v[j] / bc2) + cfg_.eps);
    }
  }
  if (!grad.projection.data.empty()) {
    SLINK_CHECK(all_finite(grad.projection.data),
                "AdamEncoder: non-finite projection gradient (step " << t_ << ")");
    auto& p = target_->projection.data;
    const auto& g = grad.projection.data;
    for (std::size_t i = 0; i < p.size(); ++i) {
      proj_m_[i] = cfg_.beta1 * proj_m_[i] + (1.0 - cfg_.beta1) * g[i];
      proj_v_[i] = cfg_.beta2 * proj_v_[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      p[i] -= cfg_.lr * (proj_m_[i] / bc1) / (std::sqrt(proj_v_[i] / bc2) + cfg_.eps);
    }
  }
}

static constexpr char kParamsMagic[] = "SLNKPAR1";

void save_params(const EncoderParams& params, const FeatureSpec& spec,
                 const std::string& path) {
  BinWriter w(path);
  w.magic(kParamsMagic);
  w.u32(1);  // version
  w.u8(static_cast<std::uint8_t>(params.side));
  w.u32(params.d);
  w.u32(spec.buckets);
  w.u64(spec.hash_seed);
  w.u8(spec.word_unigrams ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(spec.ngram_sizes.size()));
  for (int n : spec.ngram_sizes) w.u32(static_cast<std::uint32_t>(n));
  w.f64s(params.embedding.data);
  w.f64s(params.projection.data);
  w.close();
}

std::pair<EncoderParams, FeatureSpec> load_params(const std::string& path) {
  BinReader r(path);
  r.expect_magic(kParamsMagic);
  std::uint32_t version = r.u32();
  SLINK_CHECK(version == 1, path << ": unsupported version " << version);
  EncoderParams p;
  FeatureSpec spec;
  p.side = static_cast<Side>(r.u8());
  p.d = r.u32();
  spec.buckets = r.u32();
  spec.hash_seed = r.u64();
  spec.word_unigrams = r.u8() != 0;
  spec.ngram_sizes.resize(r.u32());
  for (auto& n : spec.ngram_sizes) n = static_cast<int>(r.u32());
  p.embedding = Matrix(spec.buckets, p.d);
  r.f64s(p.embedding.data);
  p.projection = Matrix(p.d, p.d);
  r.f64s(p.projection.data);
  return {std::move(p), std::move(spec)};
}

std::uint64_t params_fingerprint(const EncoderParams& params) {
  std::uint64_t h = 14695981039346656037ull;
  std::uint8_t side = static_cast<std::uint8_t>(params.side);
  h = fnv1a64_mix(h, &side, 1);
  h = fnv1a64_mix(h, &params.d, sizeof(params.d));
  h = fnv1a64_mix(h, params.embedding.data.data(),
                  params.embedding.data.size() * sizeof(double));
  h = fnv1a64_mix(h, params.projection.data.data(),
                  params.projection.data.size() * sizeof(double));
  return h;
}

GradCheckReport grad_check(const std::function<double()>& eval_loss,
                           std::span<double* const> coords,
                           std::span<const double> analytic, double eps,
                           double tolerance) {
  SLINK_CHECK(coords.size() == analytic.size(), "grad_check: size mismatch");
  GradCheckReport report;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    double* x = coords[i];
    const double saved = *x;
    *x = saved + eps;
    const double up = eval_loss();
    *x = saved - eps;
    const double down = eval_loss();
    *x = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double rel =
        std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_coord = i;
    }
  }
  report.ok = report.max_rel_err <= tolerance;
  return report;
}

}  // namespace slink::enc
