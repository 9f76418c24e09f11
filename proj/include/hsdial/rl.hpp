#pragma once

// Coherence-reward fine-tuning: sampled responses are scored by a coherence
// judge minus a KL penalty to a frozen reference, and the policy is updated
// with a sequence-level clipped surrogate.

#include "hsdial/coherence.hpp"
#include "hsdial/model.hpp"
#include "hsdial/training.hpp"

#include <json.hpp>

#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace hsdial {

enum class RLObjective { clipped_surrogate, reward_clip };
std::string to_string(RLObjective o);
RLObjective rl_objective_from_string(std::string_view s);

struct RLConfig {
  double beta = 0.2;
  int kl_truncation = 20;  // response tokens entering the KL sum
  double clip_eps = 0.2;
  std::size_t rollouts_per_update = 16;
  int ppo_epochs = 2;
  int iterations = 50;
  RLObjective objective = RLObjective::clipped_surrogate;
  // reward_clip reading: rewards clamped to [-reward_clip, reward_clip]
  double reward_clip = 1.0;
  bool per_token = false;  // token-level ratios with the reward spread uniformly
  double prob_floor = 1e-9;
  double temperature = 1.0;
  int max_length = 20;
  std::size_t max_input_tokens = 512;
  OptimizerConfig optimizer{.lr = 1e-4, .weight_decay = 0.0, .lr_decay = 1.0};
  std::uint64_t seed = 0;

  void validate() const;
};

struct Rollout {
  DialogueContext context;
  std::vector<TokenId> response;          // EOS stripped
  std::vector<double> policy_log_probs;   // per token of with_eos(response)
  std::vector<double> reference_log_probs;
  double coherence = 0.0;  // judge p_coherent
  double kl = 0.0;
  double reward = 0.0;
  double advantage = 0.0;

  double old_log_prob() const;
};

/// Sum over the first min(T', truncation) tokens of log(p_policy / p_reference),
/// both probabilities floored at `prob_floor`.
double kl_from_log_probs(std::span<const double> policy, std::span<const double> reference, int truncation,
                         double prob_floor);
double kl_term(const DialogueModel& policy, const DialogueModel& reference, const DialogueContext& context,
               std::span<const TokenId> response, const RLConfig& cfg);

/// coherence - beta * kl.
double compute_reward(double coherence, double kl, double beta);
double compute_reward(const DialogueModel& policy, const DialogueModel& reference,
                      const CoherenceClassifier& classifier, const DialogueContext& context,
                      std::span<const TokenId> response, const RLConfig& cfg);

/// Batch-mean baseline then standardisation; all-equal rewards give zeros.
std::vector<double> standardized_advantages(std::span<const double> rewards);

std::vector<Rollout> collect_rollouts(const DialogueModel& policy, const DialogueModel& reference,
                                      const CoherenceClassifier& classifier, std::span<const DialogueContext> contexts,
                                      const RLConfig& cfg, std::mt19937_64& rng);

struct PPOStats {
  double surrogate = 0.0;   // mean objective over the last epoch
  double clip_fraction = 0.0;
  bool updated = false;
};

/// In-place update of `policy`. Skips the optimizer step when every advantage is zero.
PPOStats ppo_update(Transformer& policy, AdamW& optimizer, std::span<const Rollout> rollouts, const RLConfig& cfg);

struct RLIterationMetrics {
  int iteration = 0;
  double mean_reward = 0.0;
  double mean_kl = 0.0;
  double mean_coherence = 0.0;
  double surrogate = 0.0;
  double clip_fraction = 0.0;
};

nlohmann::json to_json(const RLIterationMetrics& m);

struct RLResult {
  Transformer policy;
  std::vector<RLIterationMetrics> metrics;
};

using RLMetricsSink = std::function<void(const RLIterationMetrics&)>;

/// Fine-tunes a copy of `initial`; the reference is a frozen copy as well.
/// Each iteration draws rollouts_per_update contexts uniformly from `contexts`.
RLResult rl_finetune(const Transformer& initial, const CoherenceClassifier& classifier,
                     std::span<const DialogueContext> contexts, const RLConfig& cfg,
                     const RLMetricsSink& sink = {});

/// Mean judge score of sampled responses; sample k of context i uses derive_seed(seed, i * samples + k).
double mean_sampled_coherence(const DialogueModel& model, const CoherenceClassifier& classifier,
                              std::span<const DialogueContext> contexts, const RLConfig& cfg, int samples,
                              std::uint64_t seed);

}  // namespace hsdial
