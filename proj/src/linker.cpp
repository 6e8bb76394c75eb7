#include "slink/linker.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_set>

#include "slink/binio.hpp"

namespace slink::linker {

MentionContext mention_context(const corpus::Utterance& u, int start, int end,
                               std::size_t window) {
  SLINK_CHECK(start >= 0 && end <= static_cast<int>(u.tokens.size()) && start < end,
              "mention span out of range: [" << start << "," << end << ")");
  MentionContext ctx;
  ctx.mention.assign(u.tokens.begin() + start, u.tokens.begin() + end);
  // Left window: sentence tokens first, then previous context to fill up.
  std::vector<std::string> left_src = u.prev_context;
  left_src.insert(left_src.end(), u.tokens.begin(), u.tokens.begin() + start);
  std::size_t lo = left_src.size() > window ? left_src.size() - window : 0;
  ctx.left.assign(left_src.begin() + lo, left_src.end());
  std::vector<std::string> right_src(u.tokens.begin() + end, u.tokens.end());
  right_src.insert(right_src.end(), u.next_context.begin(), u.next_context.end());
  if (right_src.size() > window) right_src.resize(window);
  ctx.right = std::move(right_src);
  return ctx;
}

std::vector<std::string> mention_query_tokens(const MentionContext& ctx) {
  std::vector<std::string> q = ctx.left;
  q.push_back(kMentionOpen);
  q.insert(q.end(), ctx.mention.begin(), ctx.mention.end());
  q.push_back(kMentionClose);
  q.insert(q.end(), ctx.right.begin(), ctx.right.end());
  return q;
}

CandidateList retrieve_for_mention(const MentionContext& ctx,
                                   const retrieval::BiEncoder& model,
                                   const retrieval::VectorIndex& index,
                                   std::size_t k, kb::Mode mode) {
  SLINK_CHECK(k >= 1, "retrieve_for_mention requires K >= 1");
  Vec q = enc::encode(model.sent, model.spec, mention_query_tokens(ctx));
  retrieval::CandidateSet top = retrieval::search(index, q, k);
  CandidateList list;
  list.mode = mode;
  list.entries.reserve(top.entries.size() + 2);
  for (const auto& c : top.entries) list.entries.push_back({c.id, c.score, {}, 0.0});
  list.entries.push_back({kb::kNilId, 0.0, {}, 0.0});
  if (mode == kb::Mode::track1) list.entries.push_back({kb::kErrorId, 0.0, {}, 0.0});
  return list;
}

namespace {

std::set<std::string> char_trigrams(const std::string& s) {
  std::set<std::string> grams;
  std::string padded = "^" + s + "$";
  if (padded.size() < 3) {
    grams.insert(padded);
    return grams;
  }
  for (std::size_t i = 0; i + 3 <= padded.size(); ++i)
    grams.insert(padded.substr(i, 3));
  return grams;
}

double jaccard(const std::set<std::string>& a, const std::set<std::string>& b) {
  if (a.empty() && b.empty()) return 0.0;
  std::size_t inter = 0;
  for (const auto& g : a) inter += b.count(g);
  std::size_t uni = a.size() + b.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace

Vec interaction_features(const MentionContext& ctx, const std::string& entity_id,
                         double retrieval_score, const kb::KBStore& kb,
                         const retrieval::BiEncoder& model,
                         const retrieval::VectorIndex& index) {
  Vec f(kNumFeatures, 0.0);
  f[3] = retrieval_score;
  f[6] = static_cast<double>(ctx.mention.size());
  if (entity_id == kb::kNilId) {
    f[4] = 1.0;
    return f;
  }
  if (entity_id == kb::kErrorId) {
    f[5] = 1.0;
    return f;
  }
  const kb::EntityRecord& rec = kb.at(entity_id);
  const std::string surface = normalize_surface(join_tokens(ctx.mention));
  int row = index.row_of(entity_id);
  if (row >= 0) {
    Vec mv = enc::encode(model.sent, model.spec, ctx.mention);
    f[0] = dot(mv, index.matrix.row_span(static_cast<std::size_t>(row)));
  }
  f[1] = normalize_surface(rec.title) == surface ? 1.0 : 0.0;
  auto mention_grams = char_trigrams(surface);
  double best = jaccard(mention_grams, char_trigrams(normalize_surface(rec.title)));
  for (const auto& alias : rec.aliases)
    best = std::max(best,
                    jaccard(mention_grams, char_trigrams(normalize_surface(alias))));
  f[2] = best;
  return f;
}

KlResult listwise_kl_loss(std::span<const double> scores, std::size_t gold_index) {
  SLINK_CHECK(scores.size() >= 2, "listwise_kl_loss needs at least 2 candidates");
  SLINK_CHECK(gold_index < scores.size(), "listwise_kl_loss: gold index out of range");
  KlResult res;
  const double lse = log_sum_exp(scores);
  res.loss = lse - scores[gold_index];
  res.d_scores.resize(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i)
    res.d_scores[i] = std::exp(scores[i] - lse) - (i == gold_index ? 1.0 : 0.0);
  return res;
}

std::vector<std::size_t> dynamic_sample(const CandidateList& list, std::size_t m,
                                        double tau, Rng& rng,
                                        std::size_t gold_index) {
  SLINK_CHECK(m >= 1 && m <= list.entries.size(),
              "dynamic_sample: m out of range: " << m << " of " << list.entries.size());
  SLINK_CHECK(gold_index < list.entries.size(), "dynamic_sample: bad gold index");
  SLINK_CHECK(tau > 0.0, "dynamic_sample: tau must be positive");
  std::vector<std::size_t> picked{gold_index};
  if (m == 1) return picked;

  std::vector<std::size_t> pool;
  double max_s = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < list.entries.size(); ++i) {
    if (i == gold_index) continue;
    pool.push_back(i);
    max_s = std::max(max_s, list.entries[i].retrieval_score);
  }
  Vec weight(pool.size());
  for (std::size_t p = 0; p < pool.size(); ++p)
    weight[p] = std::exp((list.entries[pool[p]].retrieval_score - max_s) / tau);

  std::size_t want = std::min(m - 1, pool.size());
  for (std::size_t draw = 0; draw < want; ++draw) {
    double total = 0.0;
    for (std::size_t p = 0; p < pool.size(); ++p) total += weight[p];
    double u = rng.uniform() * total;
    std::size_t chosen = pool.size() - 1;
    double acc = 0.0;
    for (std::size_t p = 0; p < pool.size(); ++p) {
      acc += weight[p];
      if (u < acc) {
        chosen = p;
        break;
      }
    }
    picked.push_back(pool[chosen]);
    pool.erase(pool.begin() + chosen);
    weight.erase(weight.begin() + chosen);
  }
  return picked;
}

RankerParams init_ranker(std::size_t hidden, std::uint64_t seed) {
  RankerParams r;
  r.mlp = Mlp{kNumFeatures, hidden, 1};
  r.params.assign(r.mlp.param_count() + 2, 0.0);
  Rng rng(seed);
  r.mlp.init_params(std::span(r.params).subspan(0, r.mlp.param_count()), rng);
  return r;
}

void save_ranker(const RankerParams& r, const std::string& path) {
  BinWriter w(path);
  w.magic("SLNKRNK1");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(r.mlp.hidden));
  w.u64(r.params.size());
  w.f64s(r.params);
  w.close();
}

RankerParams load_ranker(const std::string& path) {
  BinReader r(path);
  r.expect_magic("SLNKRNK1");
  std::uint32_t version = r.u32();
  SLINK_CHECK(version == 1, path << ": unsupported version " << version);
  RankerParams out;
  out.mlp = Mlp{kNumFeatures, r.u32(), 1};
  out.params.resize(r.u64());
  SLINK_CHECK(out.params.size() == out.mlp.param_count() + 2,
              path << ": parameter count mismatch");
  r.f64s(out.params);
  return out;
}

double rank_score(const RankerParams& r, std::span<const double> features,
                  const std::string& entity_id) {
  SLINK_CHECK(features.size() == kNumFeatures, "rank_score: bad feature size");
  SLINK_CHECK(all_finite(std::span(r.params)), "rank_score: non-finite ranker");
  Vec hidden(r.mlp.hidden);
  Vec y(1);
  r.mlp.forward(std::span(r.params).subspan(0, r.mlp.param_count()), features,
                hidden, y);
  if (entity_id == kb::kNilId) y[0] += r.nil_bias();
  if (entity_id == kb::kErrorId) y[0] += r.error_bias();
  return y[0];
}

std::vector<TrainingMention> collect_training_mentions(
    std::span<const corpus::Utterance> corpus, double inject_error_rate,
    kb::Mode mode, std::uint64_t seed) {
  std::vector<TrainingMention> mentions;
  for (std::size_t i = 0; i < corpus.size(); ++i)
    for (const auto& m : corpus[i].mentions)
      mentions.push_back({i, m.start, m.end, m.entity_id});

  if (mode == kb::Mode::track1 && inject_error_rate > 0.0) {
    // Spurious spans drawn from non-mention positions, labeled ERROR.
    Rng rng(seed ^ 0xe7707ull);
    std::size_t want = static_cast<std::size_t>(
        std::llround(inject_error_rate * static_cast<double>(mentions.size())));
    std::size_t guard = 0;
    while (want > 0 && guard < 50 * (want + 1) && !corpus.empty()) {
      ++guard;
      std::size_t i = rng.below(corpus.size());
      const auto& u = corpus[i];
      int len = 1 + static_cast<int>(rng.below(3));
      if (static_cast<int>(u.tokens.size()) < len) continue;
      int start = static_cast<int>(rng.below(u.tokens.size() - len + 1));
      int end = start + len;
      bool overlaps = false;
      for (const auto& m : u.mentions)
        if (start < m.end && m.start < end) overlaps = true;
      if (overlaps) continue;
      mentions.push_back({i, start, end, kb::kErrorId});
      --want;
    }
  }
  return mentions;
}

namespace {

struct PreparedMention {
  MentionContext ctx;
  CandidateList list;
};

PreparedMention prepare_mention(const corpus::Utterance& u, int start, int end,
                                const std::string& gold_id, const LinkerModel& model,
                                const kb::KBStore& kb, kb::Mode mode, std::size_t k,
                                bool training) {
  PreparedMention pm;
  pm.ctx = mention_context(u, start, end);
  pm.list = retrieve_for_mention(pm.ctx, model.biencoder, model.index,
                                 std::min(k, model.index.size()), mode);
  if (training) {
    int gi = -1;
    for (std::size_t i = 0; i < pm.list.entries.size(); ++i)
      if (pm.list.entries[i].id == gold_id) gi = static_cast<int>(i);
    if (gi < 0) {
      // Gold outside the retrieved top-K: append it with its true score.
      int row = model.index.row_of(gold_id);
      SLINK_CHECK(row >= 0, "training gold '" << gold_id << "' not in index");
      Vec q = enc::encode(model.biencoder.sent, model.biencoder.spec,
                          mention_query_tokens(pm.ctx));
      double s = dot(q, model.index.matrix.row_span(static_cast<std::size_t>(row)));
      pm.list.entries.push_back({gold_id, s, {}, 0.0});
      gi = static_cast<int>(pm.list.entries.size()) - 1;
    }
    pm.list.gold_index = gi;
  }
  for (auto& e : pm.list.entries)
    e.features = interaction_features(pm.ctx, e.id, e.retrieval_score, kb,
                                      model.biencoder, model.index);
  return pm;
}

}  // namespace

LinkerModel train_linker(std::span<const corpus::Utterance> corpus,
                         const kb::KBStore& kb, kb::Mode mode,
                         const LinkerConfig& cfg) {
  auto mentions =
      collect_training_mentions(corpus, cfg.inject_error_rate, mode, cfg.seed);
  SLINK_CHECK(!mentions.empty(), "train_linker: no training mentions");

  // Mention-context bi-encoder, trained with the stage-1 machinery.
  std::vector<retrieval::QueryExample> examples;
  examples.reserve(mentions.size());
  for (const auto& m : mentions) {
    retrieval::QueryExample ex;
    ex.tokens = mention_query_tokens(
        mention_context(corpus[m.utterance], m.start, m.end));
    if (!kb::is_sentinel_id(m.gold_id)) ex.gold_ids.push_back(m.gold_id);
    examples.push_back(std::move(ex));
  }
  auto bi = retrieval::train_biencoder(examples, {}, kb, cfg.biencoder);

  LinkerModel model;
  model.biencoder = std::move(bi.model);
  model.index = std::move(bi.index);
  model.ranker = init_ranker(cfg.hidden, cfg.seed + 17);

  // Candidate lists and features are fixed (encoders frozen); the sampled
  // sub-lists change every epoch.
  std::vector<PreparedMention> prepared(mentions.size());
  const std::int64_t n = static_cast<std::int64_t>(mentions.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& m = mentions[static_cast<std::size_t>(i)];
    prepared[static_cast<std::size_t>(i)] =
        prepare_mention(corpus[m.utterance], m.start, m.end, m.gold_id, model, kb,
                        mode, cfg.k, true);
  }

  enc::AdamDense opt(cfg.adam, model.ranker.params.size());
  Vec grad(model.ranker.params.size());
  const std::size_t mlp_n = model.ranker.mlp.param_count();
  Vec hidden(cfg.hidden);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(prepared.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(cfg.seed + 7001 * (epoch + 1));
    rng.shuffle(order);
    for (std::size_t idx : order) {
      auto& pm = prepared[idx];
      const std::size_t gold = static_cast<std::size_t>(pm.list.gold_index);
      std::size_t m = std::min(cfg.list_size, pm.list.entries.size());
      std::vector<std::size_t> sub;
      if (cfg.sampling == Sampling::dynamic) {
        sub = dynamic_sample(pm.list, m, cfg.tau, rng, gold);
      } else {
        sub.push_back(gold);
        std::vector<std::size_t> pool;
        for (std::size_t i = 0; i < pm.list.entries.size(); ++i)
          if (i != gold) pool.push_back(i);
        for (std::size_t d = 0; d + 1 < m && !pool.empty(); ++d) {
          std::size_t j = rng.below(pool.size());
          sub.push_back(pool[j]);
          pool.erase(pool.begin() + j);
        }
      }
      if (sub.size() < 2) continue;

      Vec scores(sub.size());
      for (std::size_t i = 0; i < sub.size(); ++i)
        scores[i] =
            rank_score(model.ranker, pm.list.entries[sub[i]].features,
                       pm.list.entries[sub[i]].id);

      Vec d_scores(sub.size(), 0.0);
      double loss = 0.0;
      if (cfg.loss == RankLoss::listwise) {
        KlResult kl = listwise_kl_loss(scores, 0);  // gold is slot 0
        loss = kl.loss;
        d_scores = std::move(kl.d_scores);
      } else {
        for (std::size_t i = 0; i < sub.size(); ++i) {
          double y = i == 0 ? 1.0 : 0.0;
          double p = 1.0 / (1.0 + std::exp(-scores[i]));
          loss += -(y * std::log(std::max(p, 1e-12)) +
                    (1 - y) * std::log(std::max(1 - p, 1e-12)));
          d_scores[i] = p - y;
        }
      }
      SLINK_CHECK(std::isfinite(loss), "linker loss diverged at epoch "
                                           << (epoch + 1) << " mention " << idx);

      std::fill(grad.begin(), grad.end(), 0.0);
      std::span<const double> mlp_params(model.ranker.params.data(), mlp_n);
      std::span<double> mlp_grad(grad.data(), mlp_n);
      Vec y(1);
      for (std::size_t i = 0; i < sub.size(); ++i) {
        const auto& entry = pm.list.entries[sub[i]];
        model.ranker.mlp.forward(mlp_params, entry.features, hidden, y);
        Vec dy{d_scores[i]};
        model.ranker.mlp.backward(mlp_params, entry.features, hidden, dy, mlp_grad, {});
        if (entry.id == kb::kNilId) grad[mlp_n] += d_scores[i];
        if (entry.id == kb::kErrorId) grad[mlp_n + 1] += d_scores[i];
      }
      opt.step(model.ranker.params, grad);
    }
  }
  return model;
}

LinkResult disambiguate(const MentionContext& ctx, const LinkerModel& model,
                        const kb::KBStore& kb, kb::Mode mode, std::size_t k) {
  CandidateList list;
  {
    PreparedMention pm;
    pm.ctx = ctx;
    pm.list = retrieve_for_mention(ctx, model.biencoder, model.index,
                                   std::min(k, model.index.size()), mode);
    for (auto& e : pm.list.entries)
      e.features = interaction_features(ctx, e.id, e.retrieval_score, kb,
                                        model.biencoder, model.index);
    list = std::move(pm.list);
  }
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < list.entries.size(); ++i) {
    double s = rank_score(model.ranker, list.entries[i].features, list.entries[i].id);
    list.entries[i].rank_score = s;
    if (s > best_score ||
        (s == best_score && list.entries[i].id < list.entries[best].id)) {
      best_score = s;
      best = i;
    }
  }
  const std::string& id = list.entries[best].id;
  if (id == kb::kErrorId) return {LinkOutcome::dropped, id, best_score};
  if (id == kb::kNilId) return {LinkOutcome::nil, id, best_score};
  return {LinkOutcome::linked, id, best_score};
}

}  // namespace slink::linker
