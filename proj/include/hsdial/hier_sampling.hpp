#pragma once

// Mixed-context training: one golden context utterance is swapped for a model
// prediction (whole utterance, or continued from a forced golden prefix) or
// for a random training utterance, and the loss is taken against the golden
// response.

#include "hsdial/corpus.hpp"
#include "hsdial/decoding.hpp"
#include "hsdial/model.hpp"
#include "hsdial/training.hpp"

#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace hsdial {

enum class SamplingMode { off, utterance, semi, hierarchical, noise };
std::string to_string(SamplingMode m);
SamplingMode sampling_mode_from_string(std::string_view s);

/// Which end of the context the geometric index counts from.
enum class IndexOrientation { from_first, from_last };
std::string to_string(IndexOrientation o);
IndexOrientation index_orientation_from_string(std::string_view s);

enum class ApplySchedule { constant, linear };

struct SamplingConfig {
  double geo_p = 0.2;
  int i_max = 10;
  double apply_prob = 0.5;
  ApplySchedule schedule = ApplySchedule::constant;
  double apply_prob_end = 0.5;  // linear schedule target
  int ramp_epochs = 1;          // epochs to reach apply_prob_end
  SamplingMode mode = SamplingMode::hierarchical;
  double hier_mix = 0.5;  // P(utterance-level) under hierarchical mode
  IndexOrientation orientation = IndexOrientation::from_first;
  // j is uniform on {1..max(1, ceil(|u_i| * semi_fraction))}
  double semi_fraction = 0.5;
  int extra_tokens = 10;  // replacement max length = |u_i| + extra_tokens
  std::uint64_t seed = 0;

  void validate() const;
  double apply_prob_at(int epoch) const;
};

/// 1-based index in [1, min(l-1, i_max)] from the clipped geometric law.
int sample_utterance_index(int l, const SamplingConfig& cfg, std::mt19937_64& rng);

/// j for semi-utterance sampling, in [1, |u_i|].
int sample_semi_prefix(std::size_t utterance_length, const SamplingConfig& cfg, std::mt19937_64& rng);

enum class ReplacementKind { utterance, semi };

/// Greedy prediction of u_i from U_1^{i-1}; `semi` forces the first `j`
/// tokens of u_i (j drawn when not given).
Utterance generate_replacement(const DialogueModel& model, const DialogueContext& golden, int i,
                               ReplacementKind kind, const SamplingConfig& cfg, std::mt19937_64& rng,
                               std::size_t max_input_tokens = 512, std::optional<int> j = std::nullopt);

Utterance noise_replacement(std::span<const Utterance> pool, std::mt19937_64& rng);

struct MixedContext {
  DialogueContext context;
  std::optional<int> replaced_index;  // 1-based
  std::optional<ReplacementKind> kind;
};

MixedContext build_mixed_context(const DialogueContext& golden, int i, Utterance replacement);

/// Tallies of per-example decisions made while building mixed contexts.
struct SamplingStats {
  std::size_t examples = 0;
  std::size_t replaced = 0;
  std::size_t utterance_level = 0;
  std::size_t semi_level = 0;
  std::size_t noise = 0;
};

/// Builds the (possibly) mixed context for one training pair.
class MixedContextSampler {
 public:
  MixedContextSampler(SamplingConfig cfg, const DialogueModel& model, std::vector<Utterance> noise_pool,
                      std::size_t max_input_tokens);

  MixedContext operator()(const TrainingPair& pair, std::mt19937_64& rng, double apply_prob);
  const SamplingStats& stats() const { return stats_; }
  const SamplingConfig& config() const { return cfg_; }

 private:
  SamplingConfig cfg_;
  const DialogueModel* model_;
  std::vector<Utterance> pool_;
  std::size_t max_input_tokens_;
  SamplingStats stats_;
};

struct HierStepResult {
  double loss = 0.0;
  std::vector<MixedContext> contexts;
};

/// One update on `batch` with mixed contexts. Replacements come from
/// `replacement_model` (the state's current model when null) under no-gradient
/// inference; the loss target is always the golden response.
HierStepResult hierarchical_training_step(TrainState& state, std::span<const TrainingPair> batch,
                                          const SamplingConfig& cfg, std::mt19937_64& rng,
                                          std::span<const Utterance> noise_pool = {},
                                          const DialogueModel* replacement_model = nullptr,
                                          SamplingStats* stats = nullptr);

/// train_epoch with mixed contexts; mode=off reduces to plain training.
EpochReport hierarchical_train_epoch(TrainState& state, std::span<const TrainingPair> pairs,
                                     const SamplingConfig& cfg, std::mt19937_64& rng,
                                     std::span<const Utterance> noise_pool = {}, SamplingStats* stats = nullptr);

}  // namespace hsdial
