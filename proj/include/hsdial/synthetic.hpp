#pragma once

// Keyword-chain dialogues: every turn names a topic from a small graph and
// asserts facts as "+name"/"-name" tokens. Each dialogue fixes one polarity per
// fact, so a response is coherent exactly when it never flips a fact already
// asserted earlier. Paired with KeywordOracle this gives exact ground truth.

#include "hsdial/coherence.hpp"
#include "hsdial/corpus.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace hsdial {

struct SyntheticConfig {
  int dialogues = 1000;
  int turns = 12;
  int topics = 6;
  int facts_per_topic = 2;
  int filler_words = 12;
  int min_filler = 1;
  int max_filler = 3;
  double stay_prob = 0.4;    // keep the current topic, else move to a graph neighbour
  // Cycle: move to the next topic on the ring (never back), so topics recur
  // every `topics` turns and facts must be recalled from that far back.
  bool cycle = false;
  int facts_per_turn = 1;
  // moods > 0: each dialogue draws a mood, its fact polarities come from a
  // fixed mood x fact table (seeded by world_seed so that train and test
  // corpora share it), and the first utterance starts with the mood token.
  int moods = 0;
  std::uint64_t world_seed = 0;
  // Extra facts asserted in the first utterance, drawn from the whole fact set.
  int opening_facts = 0;
  double reassert_prob = 0.6;  // a turn re-asserts an already mentioned fact of its topic when one exists
  std::uint64_t seed = 0;

  void validate() const;
};

/// Every surface the generator can emit (topics, facts in both polarities, filler).
std::vector<std::string> synthetic_surfaces(const SyntheticConfig& cfg);

std::vector<Dialogue> generate_synthetic_dialogues(const SyntheticConfig& cfg);

/// Labelled pairs for classifier training: each golden response is kept as a
/// coherent example and, when it re-asserts a fact, also flipped into a
/// contradiction.
std::vector<CoherenceExample> synthetic_coherence_examples(std::span<const Dialogue> dialogues,
                                                           const Tokenizer& tok);

}  // namespace hsdial
