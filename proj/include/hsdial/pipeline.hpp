#pragma once

// Experiment configuration and the pipeline stages behind the command-line
// tool. Every stage writes into a run directory holding a config snapshot;
// rerunning a stage from that snapshot reproduces its artifacts byte for byte
// when a single worker is used.

#include "hsdial/coherence.hpp"
#include "hsdial/corpus.hpp"
#include "hsdial/decoding.hpp"
#include "hsdial/eval.hpp"
#include "hsdial/hier_sampling.hpp"
#include "hsdial/model.hpp"
#include "hsdial/rl.hpp"
#include "hsdial/synthetic.hpp"
#include "hsdial/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace hsdial {

struct CorpusSettings {
  std::string dir;    // an ingest run directory (train.jsonl, test.jsonl)
  std::string train;  // dialogue file; used when `dir` is empty
  std::string test;   // optional; otherwise the last test_fraction of `train`
  std::string format = "jsonl";
  double test_fraction = 0.1;
  std::string coherence_examples;  // labelled pairs for the classifier; synthetic when empty
  // With neither `dir` nor `train`, both splits are generated.
  SyntheticConfig synthetic{.dialogues = 300,
                            .topics = 10,
                            .stay_prob = 0.0,
                            .cycle = true,
                            .reassert_prob = 1.0,
                            .seed = 1};
  int synthetic_test_dialogues = 400;
};

struct ClassifierSettings {
  ModelConfig model{.width = 32, .heads = 2, .encoder_layers = 1, .decoder_layers = 0, .ffn_width = 64,
                    .max_positions = 128};
  ClassifierTrainConfig train{.epochs = 3};
  double threshold = 0.5;
};

struct RLSettings {
  RLConfig rl;
  std::size_t min_context_utterances = 4;
  std::size_t eval_contexts = 200;
  int eval_samples = 2;
};

struct DecodeSettings {
  DecodeConfig decode{.max_length = 10};
  bool rerank = false;
  std::string reranker = "oracle";  // or "classifier"
};

struct EvalSettings {
  int K = 11;  // utterances per conversation, prompt included
  std::size_t D = 200;
  std::string judge = "oracle";  // or "classifier"
  std::vector<int> beams{1, 5, 10, 20};
  std::vector<int> golden_prefix{1, 2, 4, 6, 8, 10};
  int probe_turn = 10;
};

struct ServeSettings {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string registry;
  std::string store;
  int turn_limit = 10;
};

struct InputSettings {
  std::string model;
  std::string classifier;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  int workers = 1;
  std::string output_dir = "runs";
  std::string run_name;  // fixed run directory name; timestamped when empty
  CorpusSettings corpus;
  ModelConfig model{.width = 32, .heads = 2, .encoder_layers = 1, .decoder_layers = 1, .ffn_width = 64,
                    .max_positions = 128};
  int epochs = 3;
  TrainConfig train{.optimizer = {.lr = 3e-3, .weight_decay = 0.0, .lr_decay = 0.7}, .batch_size = 16};
  SamplingConfig sampling{.mode = SamplingMode::off};
  ClassifierSettings classifier;
  RLSettings rl;
  DecodeSettings decode;
  EvalSettings eval;
  ServeSettings serve;
  InputSettings inputs;
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Strict: every key must be known; missing keys keep their defaults.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::filesystem::path& path);

/// Sets a dotted key ("sampling.mode") from text; the text is parsed as JSON
/// when possible and taken as a string otherwise. Unknown keys throw DataError.
void apply_override(nlohmann::json& config, const std::string& dotted_key, const std::string& value);

/// Independent stream seeds per stage, derived from the experiment seed.
enum class Stream : std::uint64_t { model_init = 1, train_order, sampling, classifier, rl, self_talk, figures };
std::uint64_t stream_seed(const ExperimentConfig& c, Stream s);

/// Creates output_dir/<run_name or command-timestamp> and writes config.json.
std::filesystem::path make_run_dir(const ExperimentConfig& c, const std::string& command);

struct Corpus {
  std::vector<Dialogue> train;
  std::vector<Dialogue> test;
  Vocabulary vocab;
};

Corpus load_corpus(const ExperimentConfig& c);

/// Golden training pairs of every dialogue (full context).
std::vector<TrainingPair> corpus_pairs(std::span<const Dialogue> dialogues, const Tokenizer& tok);
/// First utterance of each of the first `n` dialogues, speaker set to human.
std::vector<Utterance> corpus_prompts(std::span<const Dialogue> dialogues, const Tokenizer& tok, std::size_t n);

/// "oracle" builds a KeywordOracle over `vocab`; "classifier" loads inputs.classifier.
std::unique_ptr<CoherenceClassifier> make_judge(const ExperimentConfig& c, const std::string& kind,
                                                const Vocabulary& vocab);

/// Trains a fresh model on the corpus; the hook sees each epoch's report.
Transformer train_model(const ExperimentConfig& c, const Corpus& corpus,
                        const std::function<void(int, const EpochReport&)>& on_epoch = {});

/// Self-talk over the first D test prompts with the configured decoder.
SelfTalkRun self_talk_run(const ExperimentConfig& c, const DialogueModel& model, const Corpus& corpus,
                          const CoherenceClassifier& judge, const CoherenceClassifier* reranker);

// -- stages: each writes into `dir` and returns a summary ---------------------

nlohmann::json stage_ingest(const ExperimentConfig& c, const std::filesystem::path& dir);
nlohmann::json stage_train(const ExperimentConfig& c, const std::filesystem::path& dir);
nlohmann::json stage_train_classifier(const ExperimentConfig& c, const std::filesystem::path& dir);
nlohmann::json stage_rl_finetune(const ExperimentConfig& c, const std::filesystem::path& dir);
nlohmann::json stage_self_talk(const ExperimentConfig& c, const std::filesystem::path& dir);
nlohmann::json stage_figures(const ExperimentConfig& c, const std::filesystem::path& dir);

struct EvalOutcome {
  MetricsReport stored;
  MetricsReport recomputed;
  bool identical = false;
};

/// Recomputes metrics.json of a self-talk run from its transcripts and snapshot.
EvalOutcome stage_eval(const std::filesystem::path& run_dir);

}  // namespace hsdial
