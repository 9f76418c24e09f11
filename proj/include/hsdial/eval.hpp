#pragma once

// Self-talk simulation and the metrics computed over it: per-turn coherence
// rates, distinct-n, perplexity, per-turn contradiction probing, golden-prefix
// runs and agreement statistics.

#include "hsdial/coherence.hpp"
#include "hsdial/decoding.hpp"
#include "hsdial/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace hsdial {

/// Produces the next utterance from the conversation so far.
using Responder = std::function<Utterance(const DialogueContext&, std::mt19937_64&)>;

Responder model_responder(const DialogueModel& model, DecodeConfig cfg, std::size_t max_input_tokens = 512);
/// Beam search + coherence re-ranking; beam 1 reduces to greedy.
Responder rerank_responder(const DialogueModel& model, const CoherenceClassifier& classifier, DecodeConfig cfg,
                           std::size_t max_input_tokens = 512);

struct SelfTalkTranscript {
  std::string id;
  std::string model_id;
  std::uint64_t seed = 0;
  std::vector<Utterance> utterances;  // prompt first
  // Per utterance; empty for the prompt, copied golden turns are judged too.
  std::vector<std::optional<CoherenceLabel>> labels;
  std::vector<std::optional<double>> p_coherent;

  /// Label of the k-th generated response (k >= 1), i.e. utterance index k.
  std::optional<CoherenceLabel> label(int k) const;
};

/// Runs a conversation of `K` utterances in total: the prompt plus K-1
/// generated turns, each produced from the transcript prefix only.
SelfTalkTranscript self_talk(const Responder& responder, const Utterance& prompt, int K, std::uint64_t seed,
                             const CoherenceClassifier* judge = nullptr);

/// The first `g` utterances are copied from `golden`, the rest generated.
/// Returns nullopt when `golden` has fewer than g utterances.
std::optional<SelfTalkTranscript> golden_prefix_talk(const Responder& responder, std::span<const Utterance> golden,
                                                     int g, int K, std::uint64_t seed,
                                                     const CoherenceClassifier* judge = nullptr);

/// Re-labels every non-prompt utterance of `t` with `judge`.
void judge_transcript(SelfTalkTranscript& t, const CoherenceClassifier& judge);

/// Runs fn(i) for i in [0, n) on `workers` threads; results must be written by index.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

/// Seed for prompt `index` under a run seed; independent of worker count.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

struct SelfTalkRun {
  std::vector<SelfTalkTranscript> transcripts;
};

SelfTalkRun run_self_talk(const Responder& responder, std::span<const Utterance> prompts, int K, std::uint64_t seed,
                          const CoherenceClassifier* judge, const std::string& model_id, int workers = 1);

struct GoldenPrefixRun {
  std::vector<SelfTalkTranscript> transcripts;
  std::size_t skipped = 0;
  std::vector<double> curve;  // rate at utterance position 2..K (index 0 = position 2)
};

GoldenPrefixRun golden_prefix_run(const Responder& responder, std::span<const std::vector<Utterance>> dialogues,
                                  int g, int K, const CoherenceClassifier& judge, std::uint64_t seed,
                                  int workers = 1);

/// c_k: fraction of transcripts whose k-th generated response is coherent.
double coherence_rate(std::span<const SelfTalkTranscript> transcripts, int k);
/// c_1..c_{K-1}.
std::vector<double> coherence_rates(std::span<const SelfTalkTranscript> transcripts);

struct Aggregates {
  std::optional<double> avg_5;
  std::optional<double> avg_10;
};
Aggregates aggregate(std::span<const double> rates);

/// Unique / total n-grams; nullopt with fewer than n tokens.
std::optional<double> distinct_n(std::span<const TokenId> tokens, int n);
/// Over the whole transcript, prompt included, utterances concatenated.
std::optional<double> distinct_n(const SelfTalkTranscript& t, int n);

/// exp(total golden NLL / total golden tokens), EOS counted as a token.
double perplexity(const DialogueModel& model, std::span<const TrainingPair> pairs, std::size_t max_input_tokens = 512);

/// 100 * (1 - coherence) of the probe_turn-th generated response against each
/// earlier utterance taken alone; entry t-1 is utterance t.
std::vector<double> contradiction_by_turn(std::span<const SelfTalkTranscript> transcripts,
                                          const CoherenceClassifier& classifier, int probe_turn = 10);

std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

struct SignTest {
  std::size_t wins = 0;    // a > b
  std::size_t losses = 0;  // a < b
  std::size_t ties = 0;
  double p_value = 1.0;  // one-sided, H1: a > b
};
SignTest sign_test(std::span<const double> a, std::span<const double> b);

struct MetricsReport {
  std::string model_id;
  std::size_t conversations = 0;
  std::vector<double> rates;  // c_1..c_{K-1}
  Aggregates aggregates;
  std::optional<double> distinct1, distinct2, distinct3;  // mean over transcripts
  std::optional<double> ppl;
};

MetricsReport compute_metrics(std::span<const SelfTalkTranscript> transcripts, const std::string& model_id);

nlohmann::json to_json(const MetricsReport& r);
MetricsReport metrics_from_json(const nlohmann::json& j);

nlohmann::json to_json(const SelfTalkTranscript& t, const Tokenizer* tok = nullptr);
SelfTalkTranscript transcript_from_json(const nlohmann::json& j, const Tokenizer* tok = nullptr);
void save_transcripts(const std::filesystem::path& path, std::span<const SelfTalkTranscript> ts,
                      const Tokenizer* tok = nullptr);
std::vector<SelfTalkTranscript> load_transcripts(const std::filesystem::path& path, const Tokenizer* tok = nullptr);

/// "turn,rate" rows.
void write_curve_csv(const std::filesystem::path& path, std::span<const std::pair<int, double>> rows,
                     const std::string& header = "turn,rate");

}  // namespace hsdial
