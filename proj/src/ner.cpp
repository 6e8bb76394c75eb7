#include "slink/ner.hpp"

#include <algorithm>
#include <cmath>

#include "slink/binio.hpp"

namespace slink::ner {

ComposedInput compose_input(const corpus::Utterance& u,
                            const retrieval::CandidateSet& candidates,
                            const kb::KBStore& kb, std::size_t top_m) {
  ComposedInput out;
  out.tokens.push_back(kClsToken);
  out.sentence_begin = out.tokens.size();
  out.tokens.insert(out.tokens.end(), u.tokens.begin(), u.tokens.end());
  out.sentence_end = out.tokens.size();
  out.tokens.push_back(kb::kSepToken);
  out.tokens.insert(out.tokens.end(), u.prev_context.begin(), u.prev_context.end());
  out.tokens.insert(out.tokens.end(), u.next_context.begin(), u.next_context.end());
  out.tokens.push_back(kb::kSepToken);
  std::size_t m = std::min(top_m, candidates.entries.size());
  for (std::size_t i = 0; i < m; ++i) {
    auto text = kb::entity_text(kb.at(candidates.entries[i].id));
    out.tokens.insert(out.tokens.end(), text.begin(), text.end());
  }
  out.tokens.push_back(kb::kSepToken);
  return out;
}

namespace {

Vec window_vec(const retrieval::BiEncoder& model, const corpus::Utterance& u,
               std::size_t t) {
  std::size_t lo = t > 0 ? t - 1 : 0;
  std::size_t hi = std::min(u.tokens.size(), t + 2);
  std::vector<std::string> window(u.tokens.begin() + lo, u.tokens.begin() + hi);
  return enc::encode(model.sent, model.spec, window);
}

const Vec& cached_token_vec(const retrieval::BiEncoder& model,
                            const std::string& token, TokenVecCache* cache,
                            Vec& scratch) {
  if (!cache) {
    scratch = enc::encode(model.sent, model.spec, std::span(&token, 1));
    return scratch;
  }
  auto it = cache->token.find(token);
  if (it != cache->token.end()) return it->second;
  auto [ins, _] =
      cache->token.emplace(token, enc::encode(model.sent, model.spec, std::span(&token, 1)));
  return ins->second;
}

}  // namespace

KnowledgeFeatures knowledge_features(const corpus::Utterance& u,
                                     const retrieval::CandidateSet& candidates,
                                     const kb::KBStore& kb,
                                     const retrieval::BiEncoder& model,
                                     const retrieval::VectorIndex& index,
                                     std::size_t top_m) {
  const std::size_t L = u.tokens.size();
  KnowledgeFeatures kf;
  kf.best_sim.assign(L, 0.0);
  kf.match_flag.assign(L, 0);
  kf.match_rank.assign(L, -1);

  std::vector<std::string> ctx = u.prev_context;
  ctx.insert(ctx.end(), u.next_context.begin(), u.next_context.end());
  kf.context_vec = ctx.empty() ? Vec(model.sent.d, 0.0)
                               : enc::encode(model.sent, model.spec, ctx);

  const std::size_t m = std::min(top_m, candidates.entries.size());
  if (m == 0) return kf;

  // Candidate surface map: normalized title/alias -> best (lowest) rank.
  std::unordered_map<std::string, int> surface_rank;
  std::size_t max_surface_tokens = 1;
  for (std::size_t r = 0; r < m; ++r) {
    const auto& rec = kb.at(candidates.entries[r].id);
    auto note = [&](const std::string& s) {
      std::string key = normalize_surface(s);
      if (key.empty()) return;
      auto [it, inserted] = surface_rank.emplace(key, static_cast<int>(r));
      if (!inserted) it->second = std::min(it->second, static_cast<int>(r));
      max_surface_tokens =
          std::max(max_surface_tokens,
                   static_cast<std::size_t>(std::count(key.begin(), key.end(), ' ') + 1));
    };
    note(rec.title);
    for (const auto& a : rec.aliases) note(a);
  }

  for (std::size_t n = 1; n <= std::min(max_surface_tokens, L); ++n)
    for (std::size_t i = 0; i + n <= L; ++i) {
      std::string key =
          normalize_surface(join_tokens(std::span(u.tokens).subspan(i, n)));
      auto it = surface_rank.find(key);
      if (it == surface_rank.end()) continue;
      for (std::size_t t = i; t < i + n; ++t) {
        kf.match_flag[t] = 1;
        kf.match_rank[t] = kf.match_rank[t] < 0
                               ? it->second
                               : std::min(kf.match_rank[t], it->second);
      }
    }

  for (std::size_t t = 0; t < L; ++t) {
    Vec wv = window_vec(model, u, t);
    double best = 0.0;
    for (std::size_t r = 0; r < m; ++r) {
      int row = index.row_of(candidates.entries[r].id);
      if (row < 0) continue;
      best = std::max(best, dot(wv, index.matrix.row_span(row)));
    }
    kf.best_sim[t] = best;
  }
  return kf;
}

Matrix ner_features(const corpus::Utterance& u,
                    const retrieval::CandidateSet& candidates,
                    const kb::KBStore& kb, const retrieval::BiEncoder& model,
                    const retrieval::VectorIndex& index, const NerConfig& cfg,
                    TokenVecCache* cache) {
  const std::size_t L = u.tokens.size();
  const std::uint32_t d = model.sent.d;
  Matrix feats(L, 2 * d + 4, 0.0);

  retrieval::CandidateSet empty;
  const retrieval::CandidateSet& cands = cfg.use_candidates ? candidates : empty;
  KnowledgeFeatures kf = knowledge_features(u, cands, kb, model, index, cfg.top_m);
  const bool use_ctx = cfg.use_context;

  Vec scratch;
  for (std::size_t t = 0; t < L; ++t) {
    double* row = feats.row(t);
    const Vec& tv = cached_token_vec(model, u.tokens[t], cache, scratch);
    std::copy(tv.begin(), tv.end(), row);
    if (use_ctx) std::copy(kf.context_vec.begin(), kf.context_vec.end(), row + d);
    double win_ctx = 0.0;
    if (use_ctx && l2_norm(kf.context_vec) > 0.0)
      win_ctx = dot(window_vec(model, u, t), kf.context_vec);
    row[2 * d] = win_ctx;
    row[2 * d + 1] = kf.best_sim[t];
    row[2 * d + 2] = static_cast<double>(kf.match_flag[t]);
    row[2 * d + 3] = kf.match_rank[t] < 0 ? 0.0 : 1.0 / (1.0 + kf.match_rank[t]);
  }
  return feats;
}

crf::CrfParams NerModel::crf_view() const {
  crf::CrfParams p = crf::init_crf(3);
  for (std::size_t i = 0; i < 9; ++i) p.transition.data[i] = params[i];
  for (std::size_t i = 0; i < 3; ++i) p.start[i] = params[9 + i];
  for (std::size_t i = 0; i < 3; ++i) p.end[i] = params[12 + i];
  return p;
}

Matrix emissions_for(const NerModel& model, const Matrix& features) {
  Matrix em(features.rows, 3);
  Vec hidden(model.mlp.hidden);
  std::span<const double> mlp_params(model.params.data() + 15,
                                     model.mlp.param_count());
  for (std::size_t t = 0; t < features.rows; ++t)
    model.mlp.forward(mlp_params, features.row_span(t), hidden, em.row_span(t));
  return em;
}

crf::Mask bio_mask() {
  crf::Mask mask = crf::no_mask(3);
  const int O = static_cast<int>(corpus::Tag::O);
  const int I = static_cast<int>(corpus::Tag::I);
  mask.start_allowed[I] = 0;
  mask.transition_allowed[O * 3 + I] = 0;
  return mask;
}

void save_ner(const NerModel& model, const std::string& path) {
  BinWriter w(path);
  w.magic("SLNKNER1");
  w.u32(1);
  w.u32(model.d);
  w.u32(static_cast<std::uint32_t>(model.cfg.hidden));
  w.u32(static_cast<std::uint32_t>(model.cfg.top_m));
  w.u8(model.cfg.use_context ? 1 : 0);
  w.u8(model.cfg.use_candidates ? 1 : 0);
  w.u64(model.params.size());
  w.f64s(model.params);
  w.close();
}

NerModel load_ner(const std::string& path) {
  BinReader r(path);
  r.expect_magic("SLNKNER1");
  std::uint32_t version = r.u32();
  SLINK_CHECK(version == 1, path << ": unsupported version " << version);
  NerModel model;
  model.d = r.u32();
  model.cfg.hidden = r.u32();
  model.cfg.top_m = r.u32();
  model.cfg.use_context = r.u8() != 0;
  model.cfg.use_candidates = r.u8() != 0;
  model.mlp = Mlp{2 * model.d + 4ull, model.cfg.hidden, 3};
  model.params.resize(r.u64());
  SLINK_CHECK(model.params.size() == 15 + model.mlp.param_count(),
              path << ": parameter count mismatch");
  r.f64s(model.params);
  return model;
}

NerModel train_ner(std::span<const corpus::Utterance> train,
                   std::span<const retrieval::CandidateSet> candidates,
                   const kb::KBStore& kb, const retrieval::BiEncoder& encoder,
                   const retrieval::VectorIndex& index, const NerConfig& cfg) {
  SLINK_CHECK(train.size() == candidates.size(),
              "train_ner: one candidate set per utterance required");
  NerModel model;
  model.cfg = cfg;
  model.d = encoder.sent.d;
  model.mlp = Mlp{model.feature_dim(), cfg.hidden, 3};
  model.params.assign(15 + model.mlp.param_count(), 0.0);
  Rng rng(cfg.seed);
  model.mlp.init_params(std::span(model.params).subspan(15), rng);

  // The encoder is frozen: features are fixed across epochs.
  TokenVecCache cache;
  std::vector<Matrix> feats(train.size());
  std::vector<std::vector<int>> gold(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    feats[i] = ner_features(train[i], candidates[i], kb, encoder, index, cfg, &cache);
    for (auto tag : corpus::to_bio(train[i]))
      gold[i].push_back(static_cast<int>(tag));
  }

  enc::AdamDense opt(cfg.adam, model.params.size());
  Vec grad(model.params.size());
  Vec hidden(cfg.hidden);
  std::span<const double> mlp_params(model.params.data() + 15, model.mlp.param_count());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(cfg.seed + 31337 * (epoch + 1));
    shuffle_rng.shuffle(order);
    for (std::size_t idx : order) {
      const Matrix& f = feats[idx];
      Matrix em = emissions_for(model, f);
      crf::NllResult nll = crf_nll(em, model.crf_view(), gold[idx]);
      SLINK_CHECK(std::isfinite(nll.loss), "ner loss diverged at epoch "
                                               << (epoch + 1) << " sentence " << idx);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t i = 0; i < 9; ++i) grad[i] = nll.d_transition.data[i];
      for (std::size_t i = 0; i < 3; ++i) grad[9 + i] = nll.d_start[i];
      for (std::size_t i = 0; i < 3; ++i) grad[12 + i] = nll.d_end[i];
      std::span<double> mlp_grad(grad.data() + 15, model.mlp.param_count());
      Vec y(3);
      for (std::size_t t = 0; t < f.rows; ++t) {
        model.mlp.forward(mlp_params, f.row_span(t), hidden, y);
        model.mlp.backward(mlp_params, f.row_span(t), hidden,
                           nll.d_emissions.row_span(t), mlp_grad, {});
      }
      opt.step(model.params, grad);
    }
  }
  return model;
}

corpus::TagSequence predict_tags(const corpus::Utterance& u,
                                 const retrieval::CandidateSet& candidates,
                                 const NerModel& model, const kb::KBStore& kb,
                                 const retrieval::BiEncoder& encoder,
                                 const retrieval::VectorIndex& index,
                                 TokenVecCache* cache) {
  Matrix f = ner_features(u, candidates, kb, encoder, index, model.cfg, cache);
  Matrix em = emissions_for(model, f);
  std::vector<int> tags = crf::viterbi(em, model.crf_view(), bio_mask());
  corpus::TagSequence out;
  out.reserve(tags.size());
  for (int t : tags) out.push_back(static_cast<corpus::Tag>(t));
  return out;
}

std::vector<std::pair<int, int>> predict(const corpus::Utterance& u,
                                         const retrieval::CandidateSet& candidates,
                                         const NerModel& model,
                                         const kb::KBStore& kb,
                                         const retrieval::BiEncoder& encoder,
                                         const retrieval::VectorIndex& index,
                                         TokenVecCache* cache) {
  return corpus::from_bio(predict_tags(u, candidates, model, kb, encoder, index, cache));
}

void PrfCounts::add(std::span<const std::pair<int, int>> pred,
                    std::span<const std::pair<int, int>> gold_spans) {
  predicted += pred.size();
  gold += gold_spans.size();
  for (const auto& p : pred)
    for (const auto& g : gold_spans)
      if (p == g) {
        ++correct;
        break;
      }
}

Prf PrfCounts::prf() const {
  Prf out;
  out.precision = predicted ? static_cast<double>(correct) / predicted : 0.0;
  out.recall = gold ? static_cast<double>(correct) / gold : 0.0;
  out.f1 = (out.precision + out.recall) > 0
               ? 2 * out.precision * out.recall / (out.precision + out.recall)
               : 0.0;
  return out;
}

Prf span_f1(std::span<const std::pair<int, int>> pred,
            std::span<const std::pair<int, int>> gold_spans) {
  PrfCounts c;
  c.add(pred, gold_spans);
  return c.prf();
}

}  // namespace slink::ner
