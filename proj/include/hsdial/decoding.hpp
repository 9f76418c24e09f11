#pragma once

// Response generation: greedy, sampling and beam search, plus coherence
// re-ranking of beam candidates.

#include "hsdial/coherence.hpp"
#include "hsdial/model.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace hsdial {

enum class DecodeStrategy { greedy, beam, sample };

std::string to_string(DecodeStrategy s);
DecodeStrategy decode_strategy_from_string(std::string_view s);

struct DecodeConfig {
  DecodeStrategy strategy = DecodeStrategy::greedy;
  int beam_size = 1;
  int max_length = 32;        // generated tokens, EOS excluded
  double length_penalty = 1.0;  // score = log_prob / length^alpha
  double temperature = 1.0;   // sample only; 0 means argmax
  std::uint64_t seed = 0;
};

struct Candidate {
  std::vector<TokenId> tokens;  // EOS stripped
  double log_prob = 0.0;        // includes the EOS step when finished
  double score = 0.0;           // length-normalised log_prob
  bool finished = false;        // ended with EOS
  std::optional<double> coherence;
};

/// Index of the largest probability; lowest index on ties.
TokenId argmax(std::span<const double> dist);

/// Decodes after force-feeding `forced` (returned tokens start with it).
std::vector<TokenId> generate(const DialogueModel& model, const Encoding& enc, const DecodeConfig& cfg,
                              std::mt19937_64& rng, std::span<const TokenId> forced = {});
std::vector<TokenId> generate(const DialogueModel& model, std::span<const TokenId> context, const DecodeConfig& cfg,
                              std::mt19937_64& rng, std::span<const TokenId> forced = {});
/// Deterministic strategies only; sampling draws from a generator seeded with cfg.seed.
std::vector<TokenId> generate(const DialogueModel& model, std::span<const TokenId> context, const DecodeConfig& cfg);

/// Finished candidates (at most beam_size), best normalised score first.
std::vector<Candidate> beam_search(const DialogueModel& model, std::span<const TokenId> context,
                                   const DecodeConfig& cfg);
std::vector<Candidate> beam_search(const DialogueModel& model, const Encoding& enc, const DecodeConfig& cfg);

/// argmax p_coherent; ties go to the higher model score, then the earlier candidate.
/// Fills `coherence` on every candidate.
std::size_t rerank_index(std::vector<Candidate>& candidates, const DialogueContext& context,
                         const CoherenceClassifier& classifier);
Candidate rerank(std::vector<Candidate> candidates, const DialogueContext& context,
                 const CoherenceClassifier& classifier);

Utterance generate_with_rerank(const DialogueModel& model, const CoherenceClassifier& classifier,
                               const DialogueContext& context, const DecodeConfig& cfg,
                               std::size_t max_input_tokens = 512);

}  // namespace hsdial
