#include "slink/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "slink/binio.hpp"
#include "slink/kernels.hpp"

namespace slink::retrieval {

BiEncoder init_biencoder(std::uint32_t d, const enc::FeatureSpec& spec,
                         std::uint64_t seed) {
  BiEncoder model;
  model.spec = spec;
  // Same seed on both sides: an untrained pair already scores lexical overlap.
  model.sent = enc::init_params(enc::Side::sentence, d, spec, seed);
  model.ent = enc::init_params(enc::Side::entity, d, spec, seed);
  return model;
}

void save_biencoder(const BiEncoder& model, const std::string& sent_path,
                    const std::string& ent_path) {
  enc::save_params(model.sent, model.spec, sent_path);
  enc::save_params(model.ent, model.spec, ent_path);
}

BiEncoder load_biencoder(const std::string& sent_path, const std::string& ent_path) {
  BiEncoder model;
  auto [sent, spec_s] = enc::load_params(sent_path);
  auto [ent, spec_e] = enc::load_params(ent_path);
  SLINK_CHECK(spec_s.buckets == spec_e.buckets && spec_s.hash_seed == spec_e.hash_seed,
              "bi-encoder sides were saved with different feature specs");
  model.spec = spec_s;
  model.sent = std::move(sent);
  model.ent = std::move(ent);
  return model;
}

int VectorIndex::row_of(const std::string& id) const {
  if (row_lookup_.empty() && !ids.empty())
    for (std::size_t i = 0; i < ids.size(); ++i) row_lookup_[ids[i]] = i;
  auto it = row_lookup_.find(id);
  return it == row_lookup_.end() ? -1 : static_cast<int>(it->second);
}

VectorIndex build_index(const BiEncoder& model, const kb::KBStore& kb) {
  SLINK_CHECK(model.ent.side == enc::Side::entity,
              "build_index requires entity-side params");
  VectorIndex index;
  index.ids = kb.non_sentinel_ids();
  std::vector<std::vector<std::string>> texts;
  texts.reserve(index.ids.size());
  for (const auto& id : index.ids) texts.push_back(kb::entity_text(kb.at(id)));
  index.matrix = Matrix(texts.size(), model.ent.d);
  kernels::encode_batch(model.ent, model.spec, texts, index.matrix);
  index.params_fingerprint = enc::params_fingerprint(model.ent);
  return index;
}

static constexpr char kIndexMagic[] = "SLNKIDX1";

void save_index(const VectorIndex& index, const std::string& path) {
  BinWriter w(path);
  w.magic(kIndexMagic);
  w.u32(1);
  w.u64(index.ids.size());
  w.u32(static_cast<std::uint32_t>(index.matrix.cols));
  w.u64(index.params_fingerprint);
  for (const auto& id : index.ids) w.str(id);
  w.f64s(index.matrix.data);
  w.close();
}

VectorIndex load_index(const std::string& path) {
  BinReader r(path);
  r.expect_magic(kIndexMagic);
  std::uint32_t version = r.u32();
  SLINK_CHECK(version == 1, path << ": unsupported version " << version);
  VectorIndex index;
  std::uint64_t count = r.u64();
  std::uint32_t d = r.u32();
  index.params_fingerprint = r.u64();
  index.ids.resize(count);
  for (auto& id : index.ids) id = r.str();
  index.matrix = Matrix(count, d);
  r.f64s(index.matrix.data);
  return index;
}

CandidateSet search(const VectorIndex& index, const Vec& query, std::size_t k,
                    const std::string& query_id) {
  SLINK_CHECK(index.size() > 0, "search on empty index");
  SLINK_CHECK(k >= 1, "search requires K >= 1");
  Vec scores(index.size());
  kernels::score_all(index.matrix, query, scores);
  auto order = kernels::top_k_indices(scores, index.ids, k);
  CandidateSet out;
  out.query_id = query_id;
  out.entries.reserve(order.size());
  for (auto i : order) out.entries.push_back({index.ids[i], scores[i]});
  return out;
}

NceResult nce_loss(std::span<const double> gold_scores,
                   std::span<const double> neg_scores) {
  SLINK_CHECK(!gold_scores.empty(), "nce_loss requires at least one gold score");
  NceResult res;
  res.d_gold.assign(gold_scores.size(), 0.0);
  res.d_neg.assign(neg_scores.size(), 0.0);
  for (std::size_t g = 0; g < gold_scores.size(); ++g) {
    // log-sum-exp over {gold_g} ∪ negatives
    double m = gold_scores[g];
    for (double n : neg_scores) m = std::max(m, n);
    double sum = std::exp(gold_scores[g] - m);
    for (double n : neg_scores) sum += std::exp(n - m);
    const double lse = m + std::log(sum);
    res.loss += lse - gold_scores[g];
    const double p_gold = std::exp(gold_scores[g] - lse);
    res.d_gold[g] += p_gold - 1.0;
    for (std::size_t n = 0; n < neg_scores.size(); ++n)
      res.d_neg[n] += std::exp(neg_scores[n] - lse);
  }
  return res;
}

std::vector<std::string> sample_negatives_random(const kb::KBStore& kb,
                                                 const std::set<std::string>& gold,
                                                 std::size_t count, Rng& rng) {
  std::vector<std::string> pool;
  for (const auto& id : kb.non_sentinel_ids())
    if (!gold.count(id)) pool.push_back(id);
  SLINK_CHECK(count <= pool.size(), "cannot sample " << count
                                                     << " negatives from a pool of "
                                                     << pool.size());
  // Partial Fisher-Yates: first `count` slots become the sample.
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return pool;
}

std::vector<std::string> mine_hard_negatives(const BiEncoder& model,
                                             const VectorIndex& index,
                                             std::span<const std::string> query_tokens,
                                             const std::set<std::string>& gold,
                                             std::size_t count, std::size_t pool) {
  SLINK_CHECK(index.params_fingerprint == enc::params_fingerprint(model.ent),
              "index is stale: fingerprint does not match entity params");
  Vec q = enc::encode(model.sent, model.spec, query_tokens);
  std::size_t want = std::min(index.size(), std::max(pool, count + gold.size()));
  CandidateSet top = search(index, q, want);
  std::vector<std::string> negs;
  for (const auto& c : top.entries) {
    if (gold.count(c.id)) continue;
    negs.push_back(c.id);
    if (negs.size() == count) break;
  }
  return negs;
}

std::vector<std::string> sentence_query(const corpus::Utterance& u) {
  std::vector<std::string> q = u.tokens;
  q.insert(q.end(), u.prev_context.begin(), u.prev_context.end());
  q.insert(q.end(), u.next_context.begin(), u.next_context.end());
  return q;
}

QueryExample example_from_utterance(const corpus::Utterance& u) {
  QueryExample ex;
  ex.tokens = sentence_query(u);
  for (const auto& m : u.mentions)
    if (m.entity_id != kb::kNilId) ex.gold_ids.push_back(m.entity_id);
  return ex;
}

namespace {

std::set<std::string> gold_set(const QueryExample& ex) {
  return {ex.gold_ids.begin(), ex.gold_ids.end()};
}

std::map<std::size_t, double> recall_impl(const VectorIndex& index,
                                          const BiEncoder& model,
                                          std::span<const QueryExample> eval,
                                          std::span<const std::size_t> ks) {
  SLINK_CHECK(!ks.empty(), "recall_at_k: empty K set");
  std::size_t max_k = *std::max_element(ks.begin(), ks.end());
  std::vector<std::map<std::size_t, std::size_t>> hits(eval.size());
  std::vector<std::size_t> totals(eval.size(), 0);
  const std::int64_t n = static_cast<std::int64_t>(eval.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& ex = eval[static_cast<std::size_t>(i)];
    if (ex.gold_ids.empty()) continue;
    totals[i] = ex.gold_ids.size();
    Vec q = enc::encode(model.sent, model.spec, ex.tokens);
    CandidateSet top = search(index, q, std::min(max_k, index.size()));
    for (std::size_t k : ks) {
      std::size_t hit = 0;
      for (const auto& gold : ex.gold_ids) {
        bool found = false;
        for (std::size_t r = 0; r < std::min(k, top.entries.size()) && !found; ++r)
          found = top.entries[r].id == gold;
        if (found) ++hit;
      }
      hits[i][k] = hit;
    }
  }
  std::map<std::size_t, double> out;
  std::size_t total = 0;
  for (auto t : totals) total += t;
  for (std::size_t k : ks) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < eval.size(); ++i) {
      auto it = hits[i].find(k);
      if (it != hits[i].end()) hit += it->second;
    }
    out[k] = total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
  }
  return out;
}

}  // namespace

std::map<std::size_t, double> recall_at_k(const VectorIndex& index,
                                          const BiEncoder& model,
                                          std::span<const QueryExample> eval,
                                          std::span<const std::size_t> ks) {
  return recall_impl(index, model, eval, ks);
}

std::map<std::size_t, double> recall_at_k(const VectorIndex& index,
                                          const BiEncoder& model,
                                          std::span<const corpus::Utterance> eval,
                                          std::span<const std::size_t> ks) {
  std::vector<QueryExample> examples;
  examples.reserve(eval.size());
  for (const auto& u : eval) examples.push_back(example_from_utterance(u));
  return recall_impl(index, model, examples, ks);
}

BiTrainResult train_biencoder(std::span<const QueryExample> train,
                              std::span<const QueryExample> eval,
                              const kb::KBStore& kb, const BiTrainConfig& cfg) {
  SLINK_CHECK(!train.empty(), "train_biencoder: empty training set");
  BiTrainResult result;
  result.model = init_biencoder(cfg.d, cfg.spec, cfg.seed);
  BiEncoder& model = result.model;

  std::vector<std::size_t> trainable;
  for (std::size_t i = 0; i < train.size(); ++i)
    if (!train[i].gold_ids.empty()) trainable.push_back(i);

  result.index = build_index(model, kb);
  std::size_t n_entities = kb.non_sentinel_count();

  for (int round = 0; round < cfg.iterations; ++round) {
    // Negative sets are fixed for the round: random for the first round,
    // mined with the previous round's model afterwards.
    std::vector<std::vector<std::string>> negatives(trainable.size());
    const bool mined = round > 0;
    if (!mined) {
      Rng neg_rng(cfg.seed ^ 0xabcdef12u);
      for (std::size_t t = 0; t < trainable.size(); ++t) {
        const auto& ex = train[trainable[t]];
        auto gold = gold_set(ex);
        std::size_t want = std::min(cfg.negatives, n_entities - gold.size());
        negatives[t] = sample_negatives_random(kb, gold, want, neg_rng);
      }
    } else {
      const std::int64_t n = static_cast<std::int64_t>(trainable.size());
#pragma omp parallel for schedule(static)
      for (std::int64_t t = 0; t < n; ++t) {
        const auto& ex = train[trainable[static_cast<std::size_t>(t)]];
        negatives[static_cast<std::size_t>(t)] =
            mine_hard_negatives(model, result.index, ex.tokens, gold_set(ex),
                                cfg.negatives, cfg.hard_pool);
      }
    }

    enc::AdamEncoder opt_sent(cfg.adam, &model.sent);
    enc::AdamEncoder opt_ent(cfg.adam, &model.ent);
    double loss_sum = 0.0;
    std::size_t steps = 0;

    for (int epoch = 0; epoch < cfg.epochs_per_round; ++epoch) {
      std::vector<std::size_t> order(trainable.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng shuffle_rng(cfg.seed + 7919 * (round + 1) + 104729 * (epoch + 1));
      shuffle_rng.shuffle(order);

      for (std::size_t pos = 0; pos < order.size(); ++pos) {
        const std::size_t t = order[pos];
        const QueryExample& ex = train[trainable[t]];
        auto golds = gold_set(ex);
        const auto& negs = negatives[t];

        enc::EncodeTrace q_trace;
        Vec q = enc::encode(model.sent, model.spec, ex.tokens, &q_trace);

        std::vector<std::string> ids(golds.begin(), golds.end());
        std::size_t n_gold = ids.size();
        ids.insert(ids.end(), negs.begin(), negs.end());

        std::vector<enc::EncodeTrace> traces(ids.size());
        std::vector<Vec> vecs(ids.size());
        Vec gold_scores(n_gold), neg_scores(ids.size() - n_gold);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          vecs[i] = enc::encode(model.ent, model.spec,
                                kb::entity_text(kb.at(ids[i])), &traces[i]);
          double s = cfg.score_scale * enc::dot_score(q, vecs[i]);
          (i < n_gold ? gold_scores[i] : neg_scores[i - n_gold]) = s;
        }

        NceResult nce = nce_loss(gold_scores, neg_scores);
        SLINK_CHECK(std::isfinite(nce.loss),
                    "retriever loss diverged at round " << (round + 1) << " step "
                                                        << (steps + 1));
        loss_sum += nce.loss;
        ++steps;

        enc::EncoderGrad g_sent, g_ent;
        Vec dq(model.sent.d, 0.0);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          double ds = (i < n_gold ? nce.d_gold[i] : nce.d_neg[i - n_gold]) *
                      cfg.score_scale;
          if (ds == 0.0) continue;
          for (std::uint32_t j = 0; j < model.sent.d; ++j) dq[j] += ds * vecs[i][j];
          Vec de(model.ent.d);
          for (std::uint32_t j = 0; j < model.ent.d; ++j) de[j] = ds * q[j];
          enc::backprop_encode(model.ent, traces[i], de, &g_ent);
        }
        enc::backprop_encode(model.sent, q_trace, dq, &g_sent);
        opt_sent.step(g_sent);
        opt_ent.step(g_ent);
      }
    }

    result.index = build_index(model, kb);
    RoundLog log;
    log.round = round + 1;
    log.negative_source = mined ? "mined" : "random";
    log.mean_loss = steps ? loss_sum / static_cast<double>(steps) : 0.0;
    if (!eval.empty())
      log.recall = recall_at_k(result.index, model, eval, cfg.recall_ks);
    result.rounds.push_back(std::move(log));
  }

  return result;
}

BiTrainResult train_retriever(std::span<const corpus::Utterance> train,
                              std::span<const corpus::Utterance> valid,
                              const kb::KBStore& kb, const BiTrainConfig& cfg) {
  std::vector<QueryExample> train_ex, valid_ex;
  train_ex.reserve(train.size());
  for (const auto& u : train) train_ex.push_back(example_from_utterance(u));
  valid_ex.reserve(valid.size());
  for (const auto& u : valid) valid_ex.push_back(example_from_utterance(u));
  return train_biencoder(train_ex, valid_ex, kb, cfg);
}

std::string recall_table(std::span<const RoundLog> rounds) {
  std::string out;
  char buf[160];
  out += "Round | Negatives |";
  if (!rounds.empty())
    for (const auto& [k, _] : rounds.front().recall) {
      std::snprintf(buf, sizeof buf, " Rec@%zu |", k);
      out += buf;
    }
  out += "\n";
  for (const auto& r : rounds) {
    std::snprintf(buf, sizeof buf, "%5d | %9s |", r.round, r.negative_source.c_str());
    out += buf;
    for (const auto& [k, v] : r.recall) {
      std::snprintf(buf, sizeof buf, " %6.2f |", 100.0 * v);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

}  // namespace slink::retrieval
