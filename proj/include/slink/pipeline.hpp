// End-to-end orchestration: configuration, stage training commands, Track 1
// (recognize + link) and Track 2 (link gold mentions) runs, metrics and
// deterministic report files.
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "slink/corpus.hpp"
#include "slink/ensemble.hpp"
#include "slink/kb.hpp"
#include "slink/linker.hpp"
#include "slink/ner.hpp"
#include "slink/retrieval.hpp"

namespace slink::pipeline {

struct Paths {
  std::string kb;
  std::string train_corpus;
  std::string eval_corpus;
  std::string model_dir = "models";
  std::string out_dir = "out";
};

struct PipelineConfig {
  kb::Mode mode = kb::Mode::track1;
  std::uint64_t seed = 1;
  Paths paths;
  std::uint32_t d = 64;
  enc::FeatureSpec feature_spec;
  retrieval::BiTrainConfig retriever;
  ner::NerConfig ner;
  linker::LinkerConfig linker;
  double inference_inject_rate = 0.0;  // spurious spans added before linking
  bool disable_error_filter = false;   // inference-time ablation switch
  std::optional<double> fusion_retrieval_weight;  // single-model hybrid rerank
  std::string ensemble_manifest;       // optional manifest path
  corpus::SynthConfig synth;
};

// JSON file with the schema documented in the README; environment variables
// SLINK_KB / SLINK_TRAIN_CORPUS / SLINK_EVAL_CORPUS / SLINK_MODEL_DIR /
// SLINK_OUT_DIR override the corresponding paths.
PipelineConfig load_config(const std::string& path);
PipelineConfig config_from_json_text(const std::string& text);
std::string config_fingerprint(const PipelineConfig& cfg);

struct ModelPaths {
  std::string retriever_sent, retriever_ent, retriever_index, retriever_recall;
  std::string ner_model;
  std::string linker_sent, linker_ent, linker_index, linker_ranker;
};
ModelPaths model_paths(const std::string& model_dir);

struct MetricsReport {
  std::string track;  // "track1" | "track2" | "eval"
  std::map<std::size_t, double> recall;
  ner::Prf ner_prf;
  ner::Prf linking_prf;
  double track2_accuracy = 0.0;
  std::size_t utterances = 0;
  std::size_t gold_mentions = 0;
  std::size_t predicted_mentions = 0;
  std::size_t dropped_mentions = 0;
  std::string config_fingerprint;
  // Wall-clock seconds per stage. Written to a separate timings file so the
  // report files stay byte-identical across reruns.
  std::map<std::string, double> runtimes;
};

// Stage commands (the CLI verbs call straight into these).
void cmd_build_kb(const PipelineConfig& cfg);
void cmd_synth(const PipelineConfig& cfg);
void cmd_train_retriever(const PipelineConfig& cfg);
void cmd_train_ner(const PipelineConfig& cfg);
void cmd_train_linker(const PipelineConfig& cfg);

MetricsReport run_track1(const PipelineConfig& cfg);
MetricsReport run_track2(const PipelineConfig& cfg);

// Recompute linking metrics from an output file against the gold corpus.
MetricsReport cmd_eval(const PipelineConfig& cfg, const std::string& links_path,
                       const std::string& spans_path = "");

std::string report_json(const MetricsReport& m);
std::string report_text(const MetricsReport& m);
// Writes report.json, report.txt and timings.txt under out_dir.
void write_report(const MetricsReport& m, const std::string& out_dir);

}  // namespace slink::pipeline
