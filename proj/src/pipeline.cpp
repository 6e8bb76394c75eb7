#include "slink/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "json.hpp"

namespace slink::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

namespace {

void apply_env_overrides(Paths& paths) {
  auto over = [](const char* var, std::string& target) {
    if (const char* v = std::getenv(var); v && *v) target = v;
  };
  over("SLINK_KB", paths.kb);
  over("SLINK_TRAIN_CORPUS", paths.train_corpus);
  over("SLINK_EVAL_CORPUS", paths.eval_corpus);
  over("SLINK_MODEL_DIR", paths.model_dir);
  over("SLINK_OUT_DIR", paths.out_dir);
}

template <typename T>
void maybe(const json& j, const char* key, T& target) {
  if (j.contains(key)) target = j.at(key).get<T>();
}

json config_to_json(const PipelineConfig& c) {
  json j;
  j["mode"] = kb::mode_name(c.mode);
  j["seed"] = c.seed;
  j["paths"] = {{"kb", c.paths.kb},
                {"train_corpus", c.paths.train_corpus},
                {"eval_corpus", c.paths.eval_corpus},
                {"model_dir", c.paths.model_dir},
                {"out_dir", c.paths.out_dir}};
  j["encoder"] = {{"d", c.d},
                  {"buckets", c.feature_spec.buckets},
                  {"ngram_sizes", c.feature_spec.ngram_sizes},
                  {"word_unigrams", c.feature_spec.word_unigrams},
                  {"hash_seed", c.feature_spec.hash_seed}};
  j["retriever"] = {{"iterations", c.retriever.iterations},
                    {"epochs_per_round", c.retriever.epochs_per_round},
                    {"negatives", c.retriever.negatives},
                    {"hard_pool", c.retriever.hard_pool},
                    {"score_scale", c.retriever.score_scale},
                    {"lr", c.retriever.adam.lr},
                    {"recall_ks", c.retriever.recall_ks}};
  j["ner"] = {{"top_m", c.ner.top_m},
              {"hidden", c.ner.hidden},
              {"epochs", c.ner.epochs},
              {"lr", c.ner.adam.lr},
              {"use_context", c.ner.use_context},
              {"use_candidates", c.ner.use_candidates}};
  j["linker"] = {{"k", c.linker.k},
                 {"list_size", c.linker.list_size},
                 {"tau", c.linker.tau},
                 {"hidden", c.linker.hidden},
                 {"epochs", c.linker.epochs},
                 {"lr", c.linker.adam.lr},
                 {"inject_error_rate", c.linker.inject_error_rate},
                 {"sampling", c.linker.sampling == linker::Sampling::dynamic
                                  ? "dynamic"
                                  : "random"},
                 {"loss", c.linker.loss == linker::RankLoss::listwise ? "listwise"
                                                                      : "pointwise"},
                 {"iterations", c.linker.biencoder.iterations},
                 {"epochs_per_round", c.linker.biencoder.epochs_per_round},
                 {"negatives", c.linker.biencoder.negatives},
                 {"score_scale", c.linker.biencoder.score_scale},
                 {"biencoder_lr", c.linker.biencoder.adam.lr}};
  j["inference_inject_rate"] = c.inference_inject_rate;
  j["disable_error_filter"] = c.disable_error_filter;
  if (c.fusion_retrieval_weight)
    j["fusion_retrieval_weight"] = *c.fusion_retrieval_weight;
  j["ensemble_manifest"] = c.ensemble_manifest;
  j["synth"] = {{"entities", c.synth.entities},
                {"documents", c.synth.documents},
                {"sentences", c.synth.sentences},
                {"ambiguity_rate", c.synth.ambiguity_rate},
                {"noise_rate", c.synth.noise_rate},
                {"nil_rate", c.synth.nil_rate},
                {"decoy_rate", c.synth.decoy_rate},
                {"seed", c.synth.seed}};
  return j;
}

}  // namespace

PipelineConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(std::string("config: malformed JSON: ") + e.what());
  }
  PipelineConfig c;
  if (j.contains("mode")) c.mode = kb::parse_mode(j.at("mode").get<std::string>());
  maybe(j, "seed", c.seed);
  if (j.contains("paths")) {
    const json& p = j["paths"];
    maybe(p, "kb", c.paths.kb);
    maybe(p, "train_corpus", c.paths.train_corpus);
    maybe(p, "eval_corpus", c.paths.eval_corpus);
    maybe(p, "model_dir", c.paths.model_dir);
    maybe(p, "out_dir", c.paths.out_dir);
  }
  if (j.contains("encoder")) {
    const json& e = j["encoder"];
    maybe(e, "d", c.d);
    maybe(e, "buckets", c.feature_spec.buckets);
    maybe(e, "ngram_sizes", c.feature_spec.ngram_sizes);
    maybe(e, "word_unigrams", c.feature_spec.word_unigrams);
    maybe(e, "hash_seed", c.feature_spec.hash_seed);
  }
  if (j.contains("retriever")) {
    const json& r = j["retriever"];
    maybe(r, "iterations", c.retriever.iterations);
    maybe(r, "epochs_per_round", c.retriever.epochs_per_round);
    maybe(r, "negatives", c.retriever.negatives);
    maybe(r, "hard_pool", c.retriever.hard_pool);
    maybe(r, "score_scale", c.retriever.score_scale);
    maybe(r, "lr", c.retriever.adam.lr);
    maybe(r, "recall_ks", c.retriever.recall_ks);
  }
  if (j.contains("ner")) {
    const json& n = j["ner"];
    maybe(n, "top_m", c.ner.top_m);
    maybe(n, "hidden", c.ner.hidden);
    maybe(n, "epochs", c.ner.epochs);
    maybe(n, "lr", c.ner.adam.lr);
    maybe(n, "use_context", c.ner.use_context);
    maybe(n, "use_candidates", c.ner.use_candidates);
  }
  if (j.contains("linker")) {
    const json& l = j["linker"];
    maybe(l, "k", c.linker.k);
    maybe(l, "list_size", c.linker.list_size);
    maybe(l, "tau", c.linker.tau);
    maybe(l, "hidden", c.linker.hidden);
    maybe(l, "epochs", c.linker.epochs);
    maybe(l, "lr", c.linker.adam.lr);
    maybe(l, "inject_error_rate", c.linker.inject_error_rate);
    if (l.contains("sampling"))
      c.linker.sampling = l.at("sampling").get<std::string>() == "random"
                              ? linker::Sampling::random
                              : linker::Sampling::dynamic;
    if (l.contains("loss"))
      c.linker.loss = l.at("loss").get<std::string>() == "pointwise"
                          ? linker::RankLoss::pointwise
                          : linker::RankLoss::listwise;
    maybe(l, "iterations", c.linker.biencoder.iterations);
    maybe(l, "epochs_per_round", c.linker.biencoder.epochs_per_round);
    maybe(l, "negatives", c.linker.biencoder.negatives);
    maybe(l, "score_scale", c.linker.biencoder.score_scale);
    maybe(l, "biencoder_lr", c.linker.biencoder.adam.lr);
  }
  maybe(j, "inference_inject_rate", c.inference_inject_rate);
  maybe(j, "disable_error_filter", c.disable_error_filter);
  if (j.contains("fusion_retrieval_weight"))
    c.fusion_retrieval_weight = j.at("fusion_retrieval_weight").get<double>();
  maybe(j, "ensemble_manifest", c.ensemble_manifest);
  if (j.contains("synth")) {
    const json& s = j["synth"];
    maybe(s, "entities", c.synth.entities);
    maybe(s, "documents", c.synth.documents);
    maybe(s, "sentences", c.synth.sentences);
    maybe(s, "ambiguity_rate", c.synth.ambiguity_rate);
    maybe(s, "noise_rate", c.synth.noise_rate);
    maybe(s, "nil_rate", c.synth.nil_rate);
    maybe(s, "decoy_rate", c.synth.decoy_rate);
    maybe(s, "seed", c.synth.seed);
  }

  // Derived wiring: the stage trainers share the encoder settings and get
  // distinct deterministic seeds.
  c.retriever.d = c.d;
  c.retriever.spec = c.feature_spec;
  c.retriever.seed = c.seed * 4 + 1;
  c.ner.seed = c.seed * 4 + 2;
  c.linker.biencoder = c.retriever;
  c.linker.biencoder.seed = c.seed * 4 + 3;
  if (j.contains("linker")) {
    const json& l = j["linker"];
    maybe(l, "iterations", c.linker.biencoder.iterations);
    maybe(l, "epochs_per_round", c.linker.biencoder.epochs_per_round);
    maybe(l, "negatives", c.linker.biencoder.negatives);
    maybe(l, "score_scale", c.linker.biencoder.score_scale);
    maybe(l, "biencoder_lr", c.linker.biencoder.adam.lr);
  }
  c.linker.seed = c.seed * 4 + 3;
  return c;
}

PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  SLINK_CHECK(in.good(), "cannot open config file: " << path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  PipelineConfig c = config_from_json_text(text);
  apply_env_overrides(c.paths);
  return c;
}

std::string config_fingerprint(const PipelineConfig& cfg) {
  std::string canonical = config_to_json(cfg).dump();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(canonical)));
  return buf;
}

ModelPaths model_paths(const std::string& model_dir) {
  ModelPaths p;
  p.retriever_sent = model_dir + "/retriever.sent.bin";
  p.retriever_ent = model_dir + "/retriever.ent.bin";
  p.retriever_index = model_dir + "/retriever.idx";
  p.retriever_recall = model_dir + "/retriever.recall.txt";
  p.ner_model = model_dir + "/ner.bin";
  p.linker_sent = model_dir + "/linker.sent.bin";
  p.linker_ent = model_dir + "/linker.ent.bin";
  p.linker_index = model_dir + "/linker.idx";
  p.linker_ranker = model_dir + "/linker.rnk";
  return p;
}

// ---------------------------------------------------------------------------
// Stage commands

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct LoadedStage1 {
  retrieval::BiEncoder model;
  retrieval::VectorIndex index;
};

LoadedStage1 load_stage1(const ModelPaths& mp) {
  SLINK_CHECK(fs::exists(mp.retriever_sent) && fs::exists(mp.retriever_ent),
              "stage retriever: missing trained model in " << mp.retriever_sent);
  LoadedStage1 s;
  s.model = retrieval::load_biencoder(mp.retriever_sent, mp.retriever_ent);
  SLINK_CHECK(fs::exists(mp.retriever_index),
              "stage retriever: missing index " << mp.retriever_index);
  s.index = retrieval::load_index(mp.retriever_index);
  SLINK_CHECK(s.index.params_fingerprint == enc::params_fingerprint(s.model.ent),
              "stage retriever: index does not match entity params");
  return s;
}

linker::LinkerModel load_stage3(const ModelPaths& mp) {
  SLINK_CHECK(fs::exists(mp.linker_ranker),
              "stage linker: missing trained model " << mp.linker_ranker);
  linker::LinkerModel m;
  m.biencoder = retrieval::load_biencoder(mp.linker_sent, mp.linker_ent);
  m.index = retrieval::load_index(mp.linker_index);
  m.ranker = linker::load_ranker(mp.linker_ranker);
  return m;
}

}  // namespace

void cmd_synth(const PipelineConfig& cfg) {
  SLINK_CHECK(!cfg.paths.kb.empty() && !cfg.paths.train_corpus.empty() &&
                  !cfg.paths.eval_corpus.empty(),
              "synth: kb, train_corpus and eval_corpus paths required");
  std::string all_path = cfg.paths.train_corpus + ".all";
  corpus::synth_generate(cfg.synth, cfg.paths.kb, all_path);
  kb::KBStore kb = kb::KBStore::load(cfg.paths.kb, cfg.mode);
  auto utts = corpus::load_corpus(all_path, kb);
  auto [train, eval] = corpus::split_train_valid(utts, cfg.synth.seed);
  corpus::save_corpus(cfg.paths.train_corpus, train);
  corpus::save_corpus(cfg.paths.eval_corpus, eval);
  fs::remove(all_path);
  std::cout << "synth: " << kb.non_sentinel_count() << " entities, " << train.size()
            << " train / " << eval.size() << " eval sentences\n";
}

void cmd_build_kb(const PipelineConfig& cfg) {
  kb::KBStore kb = kb::KBStore::load(cfg.paths.kb, cfg.mode);
  std::size_t ambiguous = 0, alias_surfaces = 0;
  std::map<std::string, int> seen;
  for (const auto& rec : kb.records()) {
    if (kb::is_sentinel_id(rec.id)) continue;
    auto note = [&](const std::string& s) { seen[normalize_surface(s)]++; };
    note(rec.title);
    for (const auto& a : rec.aliases) note(a);
  }
  alias_surfaces = seen.size();
  for (const auto& [s, n] : seen)
    if (n > 1) ++ambiguous;
  std::cout << "kb: " << kb.non_sentinel_count() << " entities (+"
            << (kb.mode() == kb::Mode::track1 ? 2 : 1) << " sentinels), "
            << alias_surfaces << " alias surfaces, " << ambiguous
            << " ambiguous\n";
}

void cmd_train_retriever(const PipelineConfig& cfg) {
  kb::KBStore kb = kb::KBStore::load(cfg.paths.kb, cfg.mode);
  auto utts = corpus::load_corpus(cfg.paths.train_corpus, kb);
  auto [train, valid] = corpus::split_train_valid(utts, cfg.seed);
  auto result = retrieval::train_retriever(train, valid, kb, cfg.retriever);
  fs::create_directories(cfg.paths.model_dir);
  ModelPaths mp = model_paths(cfg.paths.model_dir);
  retrieval::save_biencoder(result.model, mp.retriever_sent, mp.retriever_ent);
  retrieval::save_index(result.index, mp.retriever_index);
  std::string table = retrieval::recall_table(result.rounds);
  std::ofstream(mp.retriever_recall) << table;
  std::cout << table;
}

void cmd_train_ner(const PipelineConfig& cfg) {
  kb::KBStore kb = kb::KBStore::load(cfg.paths.kb, cfg.mode);
  auto utts = corpus::load_corpus(cfg.paths.train_corpus, kb);
  auto [train, valid] = corpus::split_train_valid(utts, cfg.seed);
  (void)valid;
  ModelPaths mp = model_paths(cfg.paths.model_dir);
  LoadedStage1 s1 = load_stage1(mp);

  std::vector<retrieval::CandidateSet> cands(train.size());
  const std::int64_t n = static_cast<std::int64_t>(train.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    Vec q = enc::encode(s1.model.sent, s1.model.spec,
                        retrieval::sentence_query(train[static_cast<std::size_t>(i)]));
    cands[static_cast<std::size_t>(i)] = retrieval::search(
        s1.index, q, std::min(cfg.ner.top_m, s1.index.size()));
  }
  ner::NerModel model = ner::train_ner(train, cands, kb, s1.model, s1.index, cfg.ner);
  ner::save_ner(model, mp.ner_model);
  std::cout << "ner: trained on " << train.size() << " sentences\n";
}

void cmd_train_linker(const PipelineConfig& cfg) {
  kb::KBStore kb = kb::KBStore::load(cfg.paths.kb, cfg.mode);
  auto utts = corpus::load_corpus(cfg.paths.train_corpus, kb);
  auto [train, valid] = corpus::split_train_valid(utts, cfg.seed);
  (void)valid;
  linker::LinkerModel model = linker::train_linker(train, kb, cfg.mode, cfg.linker);
  fs::create_directories(cfg.paths.model_dir);
  ModelPaths mp = model_paths(cfg.paths.model_dir);
  retrieval::save_biencoder(model.biencoder, mp.linker_sent, mp.linker_ent);
  retrieval::save_index(model.index, mp.linker_index);
  linker::save_ranker(model.ranker, mp.linker_ranker);
  std::cout << "linker: trained\n";
}

// ---------------------------------------------------------------------------
// Inference

namespace {

struct EnsembleSpec {
  std::vector<std::string> ner_model_paths;
  ensemble::VoteConfig vote;
  std::vector<ModelPaths> linker_paths;  // only linker_* fields used
  double fusion_retrieval = 0.0;
  std::vector<double> fusion_rankers;
  bool has_ner = false;
  bool has_linking = false;
};

EnsembleSpec load_manifest(const std::string& path) {
  std::ifstream in(path);
  SLINK_CHECK(in.good(), "cannot open ensemble manifest: " << path);
  json j = json::parse(std::string((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>()));
  EnsembleSpec spec;
  if (j.contains("ner_models")) {
    for (const auto& p : j["ner_models"])
      spec.ner_model_paths.push_back(p.get<std::string>());
    spec.has_ner = !spec.ner_model_paths.empty();
    if (j.contains("vote")) {
      const json& v = j["vote"];
      if (v.contains("strategy"))
        spec.vote.strategy = v.at("strategy").get<std::string>() == "recall"
                                 ? ensemble::VoteStrategy::recall
                                 : ensemble::VoteStrategy::f1;
      if (v.contains("o_threshold"))
        spec.vote.o_threshold = v.at("o_threshold").get<double>();
    }
  }
  if (j.contains("linker_models")) {
    for (const auto& lm : j["linker_models"]) {
      ModelPaths mp;
      mp.linker_sent = lm.at("sent").get<std::string>();
      mp.linker_ent = lm.at("ent").get<std::string>();
      mp.linker_index = lm.at("index").get<std::string>();
      mp.linker_ranker = lm.at("ranker").get<std::string>();
      spec.linker_paths.push_back(mp);
    }
    spec.has_linking = !spec.linker_paths.empty();
    if (j.contains("fusion")) {
      spec.fusion_retrieval = j["fusion"].value("retrieval", 0.3);
      if (j["fusion"].contains("rankers"))
        for (const auto& w : j["fusion"]["rankers"])
          spec.fusion_rankers.push_back(w.get<double>());
    }
    if (spec.fusion_rankers.empty())
      spec.fusion_rankers.assign(spec.linker_paths.size(),
                                 spec.linker_paths.empty() ? 0.0 : 1.0);
  }
  return spec;
}

struct Linking {
  std::vector<linker::LinkerModel> models;  // primary first
  std::optional<ensemble::FusionWeights> fusion;
};

// Fused linking over a shared candidate list from the primary model.
linker::LinkResult link_mention(const linker::MentionContext& ctx,
                                const Linking& linking, const kb::KBStore& kb,
                                kb::Mode mode, std::size_t k) {
  if (!linking.fusion && linking.models.size() == 1)
    return linker::disambiguate(ctx, linking.models[0], kb, mode, k);

  const auto& primary = linking.models[0];
  linker::CandidateList list = linker::retrieve_for_mention(
      ctx, primary.biencoder, primary.index, std::min(k, primary.index.size()), mode);
  std::vector<std::string> ids;
  Vec retrieval_scores;
  for (const auto& e : list.entries) {
    ids.push_back(e.id);
    retrieval_scores.push_back(e.retrieval_score);
  }
  std::vector<std::vector<double>> ranker_scores(linking.models.size());
  for (std::size_t j = 0; j < linking.models.size(); ++j) {
    const auto& lm = linking.models[j];
    ranker_scores[j].resize(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      Vec f = linker::interaction_features(ctx, ids[i], retrieval_scores[i], kb,
                                           lm.biencoder, lm.index);
      ranker_scores[j][i] = linker::rank_score(lm.ranker, f, ids[i]);
    }
  }
  ensemble::FusionWeights w =
      linking.fusion ? *linking.fusion
                     : ensemble::FusionWeights::make(0.0, {1.0});
  auto ranked = ensemble::hybrid_rank_scored(ids, retrieval_scores, ranker_scores, w);
  const auto& [best_id, best_score] = ranked.front();
  if (best_id == kb::kErrorId)
    return {linker::LinkOutcome::dropped, best_id, best_score};
  if (best_id == kb::kNilId) return {linker::LinkOutcome::nil, best_id, best_score};
  return {linker::LinkOutcome::linked, best_id, best_score};
}

struct SpanPred {
  int start = 0, end = 0;
  bool injected = false;
};

void inject_spurious(std::vector<SpanPred>& spans, const corpus::Utterance& u,
                     double rate, Rng& rng) {
  if (rate <= 0.0) return;
  std::size_t want = 0;
  double expect = rate * static_cast<double>(spans.size());
  want = static_cast<std::size_t>(expect);
  if (rng.uniform() < expect - static_cast<double>(want)) ++want;
  std::size_t guard = 0;
  while (want > 0 && guard < 20 * (want + 1)) {
    ++guard;
    int len = 1 + static_cast<int>(rng.below(3));
    if (static_cast<int>(u.tokens.size()) < len) return;
    int start = static_cast<int>(rng.below(u.tokens.size() - len + 1));
    int end = start + len;
    bool overlaps = false;
    for (const auto& s : spans)
      if (start < s.end && s.start < end) overlaps = true;
    if (overlaps) continue;
    spans.push_back({start, end, true});
    --want;
  }
}

}  // namespace

MetricsReport run_track1(const PipelineConfig& cfg) {
  MetricsReport report;
  report.track = "track1";
  report.config_fingerprint = config_fingerprint(cfg);

  kb::KBStore kb = kb::KBStore::load(cfg.paths.kb, cfg.mode);
  auto eval = corpus::load_corpus(cfg.paths.eval_corpus, kb);
  report.utterances = eval.size();
  ModelPaths mp = model_paths(cfg.paths.model_dir);
  LoadedStage1 s1 = load_stage1(mp);

  EnsembleSpec ens;
  if (!cfg.ensemble_manifest.empty()) ens = load_manifest(cfg.ensemble_manifest);

  std::vector<ner::NerModel> ner_models;
  if (ens.has_ner) {
    for (const auto& p : ens.ner_model_paths) ner_models.push_back(ner::load_ner(p));
  } else {
    SLINK_CHECK(fs::exists(mp.ner_model),
                "stage ner: missing trained model " << mp.ner_model);
    ner_models.push_back(ner::load_ner(mp.ner_model));
  }

  Linking linking;
  if (ens.has_linking) {
    for (const auto& lp : ens.linker_paths) {
      linker::LinkerModel m;
      m.biencoder = retrieval::load_biencoder(lp.linker_sent, lp.linker_ent);
      m.index = retrieval::load_index(lp.linker_index);
      m.ranker = linker::load_ranker(lp.linker_ranker);
      linking.models.push_back(std::move(m));
    }
    linking.fusion =
        ensemble::FusionWeights::make(ens.fusion_retrieval, ens.fusion_rankers);
  } else {
    linking.models.push_back(load_stage3(mp));
    if (cfg.fusion_retrieval_weight)
      linking.fusion = ensemble::FusionWeights::make(
          *cfg.fusion_retrieval_weight, {1.0 - *cfg.fusion_retrieval_weight});
  }

  fs::create_directories(cfg.paths.out_dir);

  // Stage 1: candidates per sentence (also feeds the recall table).
  auto t0 = std::chrono::steady_clock::now();
  std::size_t max_k = cfg.ner.top_m;
  for (std::size_t k : cfg.retriever.recall_ks) max_k = std::max(max_k, k);
  std::size_t top_m = 0;
  for (const auto& m : ner_models) top_m = std::max(top_m, m.cfg.top_m);
  std::vector<retrieval::CandidateSet> cands(eval.size());
  const std::int64_t n_eval = static_cast<std::int64_t>(eval.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n_eval; ++i) {
    Vec q = enc::encode(s1.model.sent, s1.model.spec,
                        retrieval::sentence_query(eval[static_cast<std::size_t>(i)]));
    cands[static_cast<std::size_t>(i)] =
        retrieval::search(s1.index, q, std::min(max_k, s1.index.size()));
  }
  report.recall =
      retrieval::recall_at_k(s1.index, s1.model, eval, cfg.retriever.recall_ks);
  {
    std::ofstream out(cfg.paths.out_dir + "/candidates.jsonl", std::ios::trunc);
    for (std::size_t i = 0; i < eval.size(); ++i) {
      json j;
      j["doc_id"] = eval[i].doc_id;
      j["sent_index"] = eval[i].sent_index;
      json cs = json::array();
      for (std::size_t r = 0; r < std::min(top_m, cands[i].entries.size()); ++r)
        cs.push_back({cands[i].entries[r].id, cands[i].entries[r].score});
      j["candidates"] = std::move(cs);
      out << j.dump() << "\n";
    }
  }
  report.runtimes["retrieve"] = seconds_since(t0);

  // Stage 2: mention recognition (voting when several models are given).
  t0 = std::chrono::steady_clock::now();
  std::vector<std::vector<SpanPred>> spans(eval.size());
  {
    std::vector<ner::TokenVecCache> caches(ner_models.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n_eval; ++i) {
      const auto& u = eval[static_cast<std::size_t>(i)];
      std::vector<corpus::TagSequence> tags;
      tags.reserve(ner_models.size());
      for (std::size_t m = 0; m < ner_models.size(); ++m)
        tags.push_back(ner::predict_tags(u, cands[i], ner_models[m], kb, s1.model,
                                         s1.index, nullptr));
      corpus::TagSequence final_tags =
          ner_models.size() == 1 ? corpus::bio_repair(tags[0])
                                 : ensemble::vote(tags, ens.vote);
      for (auto [s, e] : corpus::from_bio(final_tags))
        spans[static_cast<std::size_t>(i)].push_back({s, e, false});
    }
  }
  if (cfg.inference_inject_rate > 0.0) {
    Rng inj_rng(cfg.seed ^ 0x1471ull);
    for (std::size_t i = 0; i < eval.size(); ++i)
      inject_spurious(spans[i], eval[i], cfg.inference_inject_rate, inj_rng);
  }
  {
    std::ofstream out(cfg.paths.out_dir + "/spans.jsonl", std::ios::trunc);
    ner::PrfCounts ner_counts;
    for (std::size_t i = 0; i < eval.size(); ++i) {
      json j;
      j["doc_id"] = eval[i].doc_id;
      j["sent_index"] = eval[i].sent_index;
      json ss = json::array();
      std::vector<std::pair<int, int>> pred;
      for (const auto& s : spans[i]) {
        ss.push_back({s.start, s.end});
        if (!s.injected) pred.emplace_back(s.start, s.end);
      }
      j["spans"] = std::move(ss);
      out << j.dump() << "\n";
      std::vector<std::pair<int, int>> gold;
      for (const auto& m : eval[i].mentions) gold.emplace_back(m.start, m.end);
      ner_counts.add(pred, gold);
    }
    report.ner_prf = ner_counts.prf();
  }
  report.runtimes["ner"] = seconds_since(t0);

  // Stage 3: linking with filtering.
  t0 = std::chrono::steady_clock::now();
  const kb::Mode link_mode = cfg.disable_error_filter ? kb::Mode::track2 : cfg.mode;
  struct LinkRow {
    std::size_t utt;
    int start, end;
    linker::LinkResult res;
  };
  std::vector<std::vector<LinkRow>> rows(eval.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n_eval; ++i) {
    const auto& u = eval[static_cast<std::size_t>(i)];
    for (const auto& s : spans[static_cast<std::size_t>(i)]) {
      linker::MentionContext ctx = linker::mention_context(u, s.start, s.end);
      LinkRow row{static_cast<std::size_t>(i), s.start, s.end,
                  link_mention(ctx, linking, kb, link_mode, cfg.linker.k)};
      rows[static_cast<std::size_t>(i)].push_back(std::move(row));
    }
  }
  {
    std::ofstream links(cfg.paths.out_dir + "/links.jsonl", std::ios::trunc);
    std::ofstream dropped(cfg.paths.out_dir + "/dropped.jsonl", std::ios::trunc);
    ner::PrfCounts link_counts;
    for (std::size_t i = 0; i < eval.size(); ++i) {
      for (const auto& row : rows[i]) {
        if (row.res.outcome == linker::LinkOutcome::dropped) {
          ++report.dropped_mentions;
          json j;
          j["doc_id"] = eval[i].doc_id;
          j["sent_index"] = eval[i].sent_index;
          j["start"] = row.start;
          j["end"] = row.end;
          j["reason"] = "ERROR";
          dropped << j.dump() << "\n";
          continue;
        }
        ++report.predicted_mentions;
        json j;
        j["doc_id"] = eval[i].doc_id;
        j["sent_index"] = eval[i].sent_index;
        j["start"] = row.start;
        j["end"] = row.end;
        j["entity_id"] = row.res.entity_id;
        j["score"] = row.res.score;
        links << j.dump() << "\n";
        bool correct = false;
        for (const auto& m : eval[i].mentions)
          if (m.start == row.start && m.end == row.end &&
              m.entity_id == row.res.entity_id)
            correct = true;
        link_counts.predicted += 1;
        link_counts.correct += correct ? 1 : 0;
      }
      for (const auto& m : eval[i].mentions) {
        (void)m;
        link_counts.gold += 1;
      }
      report.gold_mentions += eval[i].mentions.size();
    }
    report.linking_prf = link_counts.prf();
  }
  report.runtimes["link"] = seconds_since(t0);

  write_report(report, cfg.paths.out_dir);
  return report;
}

MetricsReport run_track2(const PipelineConfig& cfg) {
  MetricsReport report;
  report.track = "track2";
  report.config_fingerprint = config_fingerprint(cfg);

  kb::KBStore kb = kb::KBStore::load(cfg.paths.kb, kb::Mode::track2);
  auto eval = corpus::load_corpus(cfg.paths.eval_corpus, kb);
  report.utterances = eval.size();
  std::size_t total_mentions = 0;
  for (const auto& u : eval) total_mentions += u.mentions.size();
  SLINK_CHECK(total_mentions > 0, "track2 requires gold mention spans in the corpus");

  ModelPaths mp = model_paths(cfg.paths.model_dir);
  Linking linking;
  linking.models.push_back(load_stage3(mp));
  if (cfg.fusion_retrieval_weight)
    linking.fusion = ensemble::FusionWeights::make(
        *cfg.fusion_retrieval_weight, {1.0 - *cfg.fusion_retrieval_weight});

  fs::create_directories(cfg.paths.out_dir);
  auto t0 = std::chrono::steady_clock::now();

  struct Row {
    int start, end;
    std::string gold;
    linker::LinkResult res;
  };
  std::vector<std::vector<Row>> rows(eval.size());
  const std::int64_t n_eval = static_cast<std::int64_t>(eval.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n_eval; ++i) {
    const auto& u = eval[static_cast<std::size_t>(i)];
    for (const auto& m : u.mentions) {
      linker::MentionContext ctx = linker::mention_context(u, m.start, m.end);
      rows[static_cast<std::size_t>(i)].push_back(
          {m.start, m.end, m.entity_id,
           link_mention(ctx, linking, kb, kb::Mode::track2, cfg.linker.k)});
    }
  }

  std::size_t correct = 0;
  {
    std::ofstream links(cfg.paths.out_dir + "/links.jsonl", std::ios::trunc);
    for (std::size_t i = 0; i < eval.size(); ++i)
      for (const auto& row : rows[i]) {
        SLINK_CHECK(row.res.outcome != linker::LinkOutcome::dropped,
                    "track2 must never drop a mention");
        json j;
        j["doc_id"] = eval[i].doc_id;
        j["sent_index"] = eval[i].sent_index;
        j["start"] = row.start;
        j["end"] = row.end;
        j["entity_id"] = row.res.entity_id;
        j["score"] = row.res.score;
        links << j.dump() << "\n";
        ++report.predicted_mentions;
        if (row.res.entity_id == row.gold) ++correct;
      }
  }
  report.gold_mentions = total_mentions;
  report.track2_accuracy =
      static_cast<double>(correct) / static_cast<double>(total_mentions);
  report.runtimes["link"] = seconds_since(t0);

  write_report(report, cfg.paths.out_dir);
  return report;
}

MetricsReport cmd_eval(const PipelineConfig& cfg, const std::string& links_path,
                       const std::string& spans_path) {
  MetricsReport report;
  report.track = "eval";
  report.config_fingerprint = config_fingerprint(cfg);
  kb::KBStore kb = kb::KBStore::load(cfg.paths.kb, cfg.mode);
  auto eval = corpus::load_corpus(cfg.paths.eval_corpus, kb);
  report.utterances = eval.size();

  std::map<std::pair<std::string, int>, const corpus::Utterance*> lookup;
  for (const auto& u : eval) lookup[{u.doc_id, u.sent_index}] = &u;

  ner::PrfCounts link_counts;
  std::size_t correct_ids = 0, total_preds = 0;
  {
    std::ifstream in(links_path);
    SLINK_CHECK(in.good(), "cannot open links file: " << links_path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json j = json::parse(line);
      auto it = lookup.find({j.at("doc_id").get<std::string>(),
                             j.at("sent_index").get<int>()});
      SLINK_CHECK(it != lookup.end(), "links file references unknown utterance");
      int s = j.at("start").get<int>(), e = j.at("end").get<int>();
      std::string id = j.at("entity_id").get<std::string>();
      ++total_preds;
      ++link_counts.predicted;
      for (const auto& m : it->second->mentions)
        if (m.start == s && m.end == e && m.entity_id == id) {
          ++link_counts.correct;
          ++correct_ids;
          break;
        }
    }
  }
  for (const auto& u : eval) {
    link_counts.gold += u.mentions.size();
    report.gold_mentions += u.mentions.size();
  }
  report.predicted_mentions = total_preds;
  report.linking_prf = link_counts.prf();
  if (total_preds == report.gold_mentions && report.gold_mentions > 0)
    report.track2_accuracy =
        static_cast<double>(correct_ids) / static_cast<double>(report.gold_mentions);

  if (!spans_path.empty()) {
    std::ifstream in(spans_path);
    SLINK_CHECK(in.good(), "cannot open spans file: " << spans_path);
    ner::PrfCounts ner_counts;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json j = json::parse(line);
      auto it = lookup.find({j.at("doc_id").get<std::string>(),
                             j.at("sent_index").get<int>()});
      SLINK_CHECK(it != lookup.end(), "spans file references unknown utterance");
      std::vector<std::pair<int, int>> pred, gold;
      for (const auto& s : j.at("spans"))
        pred.emplace_back(s.at(0).get<int>(), s.at(1).get<int>());
      for (const auto& m : it->second->mentions) gold.emplace_back(m.start, m.end);
      ner_counts.add(pred, gold);
    }
    report.ner_prf = ner_counts.prf();
  }
  return report;
}

// ---------------------------------------------------------------------------
// Reports

std::string report_json(const MetricsReport& m) {
  json j;
  j["track"] = m.track;
  j["config_fingerprint"] = m.config_fingerprint;
  json recall = json::object();
  for (const auto& [k, v] : m.recall) recall[std::to_string(k)] = v;
  j["retrieval_recall"] = std::move(recall);
  j["ner"] = {{"precision", m.ner_prf.precision},
              {"recall", m.ner_prf.recall},
              {"f1", m.ner_prf.f1}};
  j["linking"] = {{"precision", m.linking_prf.precision},
                  {"recall", m.linking_prf.recall},
                  {"f1", m.linking_prf.f1}};
  j["track2_accuracy"] = m.track2_accuracy;
  j["counts"] = {{"utterances", m.utterances},
                 {"gold_mentions", m.gold_mentions},
                 {"predicted_mentions", m.predicted_mentions},
                 {"dropped_mentions", m.dropped_mentions}};
  return j.dump(2) + "\n";
}

std::string report_text(const MetricsReport& m) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "== %s report (config %s) ==\n", m.track.c_str(),
                m.config_fingerprint.c_str());
  out += buf;
  if (!m.recall.empty()) {
    out += "Retrieval";
    for (const auto& [k, _] : m.recall) {
      std::snprintf(buf, sizeof buf, " | Rec@%zu", k);
      out += buf;
    }
    out += "\n         ";
    for (const auto& [_, v] : m.recall) {
      std::snprintf(buf, sizeof buf, " | %6.2f", 100.0 * v);
      out += buf;
    }
    out += "\n";
  }
  std::snprintf(buf, sizeof buf, "NER      | P %.4f | R %.4f | F1 %.4f\n",
                m.ner_prf.precision, m.ner_prf.recall, m.ner_prf.f1);
  out += buf;
  std::snprintf(buf, sizeof buf, "Linking  | P %.4f | R %.4f | F1 %.4f\n",
                m.linking_prf.precision, m.linking_prf.recall, m.linking_prf.f1);
  out += buf;
  std::snprintf(buf, sizeof buf, "Track2 accuracy: %.4f\n", m.track2_accuracy);
  out += buf;
  std::snprintf(buf, sizeof buf,
                "Mentions: %zu gold, %zu predicted, %zu dropped, %zu utterances\n",
                m.gold_mentions, m.predicted_mentions, m.dropped_mentions,
                m.utterances);
  out += buf;
  return out;
}

void write_report(const MetricsReport& m, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream(out_dir + "/report.json") << report_json(m);
  std::ofstream(out_dir + "/report.txt") << report_text(m);
  std::ofstream timings(out_dir + "/timings.txt");
  for (const auto& [stage, secs] : m.runtimes) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s: %.3f s\n", stage.c_str(), secs);
    timings << buf;
  }
}

}  // namespace slink::pipeline
