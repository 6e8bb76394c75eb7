// Hashed-feature text encoders producing unit-norm vectors, with analytic
// gradients, a deterministic Adam optimizer and versioned binary persistence.
// The encoders are pluggable: anything mapping tokens to a unit vector can
// stand in for the trainable default.
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "slink/common.hpp"

namespace slink::enc {

struct FeatureSpec {
  std::vector<int> ngram_sizes{3, 4, 5};  // character n-grams per token
  bool word_unigrams = true;
  std::uint32_t buckets = 1u << 18;
  std::uint64_t hash_seed = 0x5eedbeef;
};

// Hashed feature multiset, bucket-sorted with merged counts.
struct FeatureCounts {
  std::vector<std::pair<std::uint32_t, double>> items;
  double total = 0.0;
};

FeatureCounts featurize(const FeatureSpec& spec, std::span<const std::string> tokens);

enum class Side : std::uint8_t { sentence = 0, entity = 1 };

struct EncoderParams {
  Side side = Side::sentence;
  std::uint32_t d = 64;
  Matrix embedding;   // buckets x d
  Matrix projection;  // d x d
};

// Embedding tables on both sides start from the same seed so an untrained
// pair already scores lexical overlap; projection starts near identity.
EncoderParams init_params(Side side, std::uint32_t d, const FeatureSpec& spec,
                          std::uint64_t seed);

// Cached forward intermediates for backprop.
struct EncodeTrace {
  FeatureCounts feats;
  Vec pooled;     // mean of embedding rows
  Vec projected;  // projection * pooled
  Vec out;        // normalized
  double inv_norm = 0.0;
  bool empty = false;
};

// normalize(projection * mean(embedding rows)); empty feature set yields the
// first basis vector. Result has unit L2 norm.
Vec encode(const EncoderParams& params, const FeatureSpec& spec,
           std::span<const std::string> tokens, EncodeTrace* trace = nullptr);

double dot_score(const Vec& a, const Vec& b);

struct EncoderGrad {
  std::map<std::uint32_t, Vec> embedding;  // touched rows only
  Matrix projection;

  void ensure_shape(const EncoderParams& p);
  void add_scaled(const EncoderGrad& other, double scale);
};

// Accumulates d(loss)/d(params) given d(loss)/d(output vector).
void backprop_encode(const EncoderParams& params, const EncodeTrace& trace,
                     std::span<const double> d_out, EncoderGrad* grad);

struct AdamConfig {
  double lr = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Dense Adam over a flat parameter vector.
class AdamDense {
 public:
  AdamDense() = default;
  AdamDense(AdamConfig cfg, std::size_t size);
  void step(std::span<double> params, std::span<const double> grad);

 private:
  AdamConfig cfg_;
  Vec m_, v_;
  std::int64_t t_ = 0;
};

// Adam for an encoder: dense over the projection, lazily allocated per-row
// moments over the embedding (untouched rows keep their values bit-exact).
class AdamEncoder {
 public:
  AdamEncoder(AdamConfig cfg, EncoderParams* target);
  // Throws on non-finite gradients, naming the offending part.
  void step(const EncoderGrad& grad);

 private:
  struct RowMoments {
    Vec m, v;
  };
  AdamConfig cfg_;
  EncoderParams* target_;
  std::vector<std::unique_ptr<RowMoments>> rows_;
  Vec proj_m_, proj_v_;
  std::int64_t t_ = 0;
};

void save_params(const EncoderParams& params, const FeatureSpec& spec,
                 const std::string& path);
std::pair<EncoderParams, FeatureSpec> load_params(const std::string& path);

std::uint64_t params_fingerprint(const EncoderParams& params);

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t worst_coord = 0;
  bool ok = true;
};

// Central finite differences on the given coordinates. |analytic - numeric|
// is measured relative to max(1, |analytic|).
GradCheckReport grad_check(const std::function<double()>& eval_loss,
                           std::span<double* const> coords,
                           std::span<const double> analytic, double eps,
                           double tolerance);

}  // namespace slink::enc
