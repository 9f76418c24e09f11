#include "hsdial/rl.hpp"

#include "hsdial/decoding.hpp"
#include "hsdial/eval.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace hsdial {

std::string to_string(RLObjective o) {
  return o == RLObjective::clipped_surrogate ? "clipped_surrogate" : "reward_clip";
}

RLObjective rl_objective_from_string(std::string_view s) {
  if (s == "clipped_surrogate") return RLObjective::clipped_surrogate;
  if (s == "reward_clip") return RLObjective::reward_clip;
  throw std::invalid_argument("unknown RL objective: " + std::string(s));
}

void RLConfig::validate() const {
  if (beta < 0) throw std::invalid_argument("beta must be >= 0");
  if (!(clip_eps > 0 && clip_eps < 1)) throw std::invalid_argument("clip_eps must be in (0, 1)");
  if (kl_truncation < 1) throw std::invalid_argument("kl_truncation must be >= 1");
  if (rollouts_per_update < 1) throw std::invalid_argument("rollouts_per_update must be >= 1");
  if (ppo_epochs < 1) throw std::invalid_argument("ppo_epochs must be >= 1");
  if (iterations < 0) throw std::invalid_argument("iterations must be >= 0");
  if (max_length < 1) throw std::invalid_argument("max_length must be >= 1");
  if (!(prob_floor > 0)) throw std::invalid_argument("prob_floor must be > 0");
}

double Rollout::old_log_prob() const {
  double s = 0.0;
  for (double v : policy_log_probs) s += v;
  return s;
}

double kl_from_log_probs(std::span<const double> policy, std::span<const double> reference, int truncation,
                         double prob_floor) {
  if (policy.size() != reference.size()) throw std::invalid_argument("kl: log-prob length mismatch");
  const double floor = std::log(prob_floor);
  const std::size_t n = std::min(policy.size(), static_cast<std::size_t>(std::max(0, truncation)));
  double kl = 0.0;
  for (std::size_t t = 0; t < n; ++t) kl += std::max(policy[t], floor) - std::max(reference[t], floor);
  return kl;
}

namespace {

// Scored tokens of a sampled response: EOS is included when decoding stopped on it.
std::vector<TokenId> scored_tokens(std::span<const TokenId> response, bool finished) {
  return finished ? with_eos(response) : std::vector<TokenId>(response.begin(), response.end());
}

std::vector<double> log_probs(const DialogueModel& m, const DialogueContext& ctx, std::span<const TokenId> targets,
                              std::size_t max_input) {
  if (targets.empty()) return {};
  return m.token_log_probs(m.encode(model_input(ctx, max_input, m.max_positions())), targets);
}

}  // namespace

double kl_term(const DialogueModel& policy, const DialogueModel& reference, const DialogueContext& context,
               std::span<const TokenId> response, const RLConfig& cfg) {
  const auto targets = with_eos(response);
  return kl_from_log_probs(log_probs(policy, context, targets, cfg.max_input_tokens),
                           log_probs(reference, context, targets, cfg.max_input_tokens), cfg.kl_truncation,
                           cfg.prob_floor);
}

double compute_reward(double coherence, double kl, double beta) { return coherence - beta * kl; }

double compute_reward(const DialogueModel& policy, const DialogueModel& reference,
                      const CoherenceClassifier& classifier, const DialogueContext& context,
                      std::span<const TokenId> response, const RLConfig& cfg) {
  Utterance u;
  u.tokens.assign(response.begin(), response.end());
  u.provenance = Provenance::predicted;
  const double fc = classifier.score(context, u).p_coherent;
  return compute_reward(fc, kl_term(policy, reference, context, response, cfg), cfg.beta);
}

std::vector<double> standardized_advantages(std::span<const double> rewards) {
  std::vector<double> a(rewards.begin(), rewards.end());
  if (a.empty()) return a;
  double mean = 0.0;
  for (double r : a) mean += r;
  mean /= static_cast<double>(a.size());
  double var = 0.0;
  for (auto& r : a) {
    r -= mean;
    var += r * r;
  }
  const double sd = std::sqrt(var / static_cast<double>(a.size()));
  if (sd < 1e-8) {
    std::fill(a.begin(), a.end(), 0.0);
    return a;
  }
  for (auto& r : a) r /= sd;
  return a;
}

std::vector<Rollout> collect_rollouts(const DialogueModel& policy, const DialogueModel& reference,
                                      const CoherenceClassifier& classifier, std::span<const DialogueContext> contexts,
                                      const RLConfig& cfg, std::mt19937_64& rng) {
  if (contexts.empty()) throw std::invalid_argument("collect_rollouts: no contexts");
  DecodeConfig dc;
  dc.strategy = DecodeStrategy::sample;
  dc.temperature = cfg.temperature;
  dc.max_length = cfg.max_length;
  std::vector<Rollout> out;
  std::vector<double> rewards;
  for (const auto& ctx : contexts) {
    Rollout r;
    r.context = ctx;
    const auto input = model_input(ctx, cfg.max_input_tokens, policy.max_positions());
    const auto enc = policy.encode(input);
    r.response = generate(policy, enc, dc, rng);
    const bool finished = r.response.size() < static_cast<std::size_t>(cfg.max_length);
    const auto targets = scored_tokens(r.response, finished);
    r.policy_log_probs = targets.empty() ? std::vector<double>{} : policy.token_log_probs(enc, targets);
    r.reference_log_probs = log_probs(reference, ctx, targets, cfg.max_input_tokens);
    Utterance u;
    u.tokens = r.response;
    u.provenance = Provenance::predicted;
    r.coherence = classifier.score(ctx, u).p_coherent;
    r.kl = kl_from_log_probs(r.policy_log_probs, r.reference_log_probs, cfg.kl_truncation, cfg.prob_floor);
    r.reward = compute_reward(r.coherence, r.kl, cfg.beta);
    if (cfg.objective == RLObjective::reward_clip) r.reward = std::clamp(r.reward, -cfg.reward_clip, cfg.reward_clip);
    rewards.push_back(r.reward);
    out.push_back(std::move(r));
  }
  const auto adv = standardized_advantages(rewards);
  for (std::size_t i = 0; i < out.size(); ++i) out[i].advantage = adv[i];
  return out;
}

namespace {

// d(objective)/d(new log-prob) for one ratio; zero when the clipped branch is active.
double surrogate_grad(double ratio, double adv, const RLConfig& cfg, double& objective, bool& clipped) {
  if (cfg.objective == RLObjective::reward_clip) {
    objective = ratio * adv;
    clipped = false;
    return ratio * adv;
  }
  const double lo = 1.0 - cfg.clip_eps, hi = 1.0 + cfg.clip_eps;
  const double unclipped = ratio * adv;
  const double clipped_obj = std::clamp(ratio, lo, hi) * adv;
  if (unclipped <= clipped_obj) {
    objective = unclipped;
    clipped = false;
    return ratio * adv;
  }
  objective = clipped_obj;
  clipped = true;
  return 0.0;
}

void clip_grad_norm(ParameterList& params, double max_norm) {
  if (max_norm <= 0) return;
  double sq = 0.0;
  for (const auto& p : params)
    if (p.var->grad.size()) sq += p.var->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm)
    for (auto& p : params)
      if (p.var->grad.size()) p.var->grad *= max_norm / norm;
}

}  // namespace

PPOStats ppo_update(Transformer& policy, AdamW& optimizer, std::span<const Rollout> rollouts, const RLConfig& cfg) {
  if (rollouts.empty()) throw std::invalid_argument("ppo_update: no rollouts");
  PPOStats stats;
  const bool any = std::any_of(rollouts.begin(), rollouts.end(), [](const Rollout& r) { return r.advantage != 0.0; });
  if (!any) return stats;
  auto& params = policy.parameters();
  const double inv = 1.0 / static_cast<double>(rollouts.size());
  for (int epoch = 0; epoch < cfg.ppo_epochs; ++epoch) {
    zero_grads(params);
    double objective = 0.0;
    std::size_t clipped_count = 0, ratio_count = 0;
    for (const auto& r : rollouts) {
      if (r.policy_log_probs.empty() || r.advantage == 0.0) continue;
      const auto targets = scored_tokens(r.response, r.policy_log_probs.size() > r.response.size());
      ag::Tape t;
      const auto input = model_input(r.context, cfg.max_input_tokens, policy.max_positions());
      auto lp = policy.target_log_probs(t, input, targets);
      const auto n = static_cast<Eigen::Index>(targets.size());
      ag::Matrix seed(n, 1);
      if (cfg.per_token) {
        for (Eigen::Index k = 0; k < n; ++k) {
          double obj = 0.0;
          bool clipped = false;
          const double ratio = std::exp(lp->value(k, 0) - r.policy_log_probs[static_cast<std::size_t>(k)]);
          const double g = surrogate_grad(ratio, r.advantage, cfg, obj, clipped);
          objective += obj * inv / static_cast<double>(n);
          clipped_count += clipped;
          ++ratio_count;
          seed(k, 0) = -g * inv / static_cast<double>(n);
        }
      } else {
        double obj = 0.0;
        bool clipped = false;
        const double ratio = std::exp(lp->value.sum() - r.old_log_prob());
        const double g = surrogate_grad(ratio, r.advantage, cfg, obj, clipped);
        objective += obj * inv;
        clipped_count += clipped;
        ++ratio_count;
        seed.setConstant(-g * inv);
      }
      if (!std::isfinite(objective)) throw DivergenceError("PPO objective became non-finite");
      t.backward(lp, seed);
    }
    clip_grad_norm(params, cfg.optimizer.max_grad_norm);
    optimizer.step(params, cfg.optimizer, cfg.optimizer.lr);
    zero_grads(params);
    stats.surrogate = objective;
    stats.clip_fraction = ratio_count ? static_cast<double>(clipped_count) / static_cast<double>(ratio_count) : 0.0;
    stats.updated = true;
  }
  return stats;
}

nlohmann::json to_json(const RLIterationMetrics& m) {
  return {{"iteration", m.iteration},   {"mean_reward", m.mean_reward}, {"mean_kl", m.mean_kl},
          {"mean_coherence", m.mean_coherence}, {"surrogate", m.surrogate}, {"clip_fraction", m.clip_fraction}};
}

RLResult rl_finetune(const Transformer& initial, const CoherenceClassifier& classifier,
                     std::span<const DialogueContext> contexts, const RLConfig& cfg, const RLMetricsSink& sink) {
  cfg.validate();
  if (contexts.empty()) throw std::invalid_argument("rl_finetune: no contexts");
  RLResult res{initial, {}};
  const Transformer reference(initial);
  AdamW optimizer;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, contexts.size() - 1);
  for (int it = 0; it < cfg.iterations; ++it) {
    std::vector<DialogueContext> batch;
    for (std::size_t k = 0; k < cfg.rollouts_per_update; ++k) batch.push_back(contexts[pick(rng)]);
    const auto rollouts = collect_rollouts(res.policy, reference, classifier, batch, cfg, rng);
    const Transformer snapshot(res.policy);
    const AdamW opt_snapshot = optimizer;
    PPOStats ps;
    try {
      ps = ppo_update(res.policy, optimizer, rollouts, cfg);
    } catch (const DivergenceError&) {
      res.policy = snapshot;
      optimizer = opt_snapshot;
      throw;
    }
    for (const auto& p : res.policy.parameters()) {
      if (!p.var->value.allFinite()) {
        res.policy = snapshot;
        throw DivergenceError("policy parameters became non-finite at iteration " + std::to_string(it) +
                              "; restored the previous iterate");
      }
    }
    RLIterationMetrics m;
    m.iteration = it;
    for (const auto& r : rollouts) {
      m.mean_reward += r.reward;
      m.mean_kl += r.kl;
      m.mean_coherence += r.coherence;
    }
    const double n = static_cast<double>(rollouts.size());
    m.mean_reward /= n;
    m.mean_kl /= n;
    m.mean_coherence /= n;
    m.surrogate = ps.surrogate;
    m.clip_fraction = ps.clip_fraction;
    res.metrics.push_back(m);
    if (sink) sink(m);
  }
  return res;
}

double mean_sampled_coherence(const DialogueModel& model, const CoherenceClassifier& classifier,
                              std::span<const DialogueContext> contexts, const RLConfig& cfg, int samples,
                              std::uint64_t seed) {
  if (contexts.empty() || samples < 1) throw std::invalid_argument("mean_sampled_coherence: nothing to sample");
  DecodeConfig dc;
  dc.strategy = DecodeStrategy::sample;
  dc.temperature = cfg.temperature;
  dc.max_length = cfg.max_length;
  double total = 0.0;
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    const auto enc = model.encode(model_input(contexts[i], cfg.max_input_tokens, model.max_positions()));
    for (int k = 0; k < samples; ++k) {
      std::mt19937_64 rng(derive_seed(seed, i * static_cast<std::size_t>(samples) + static_cast<std::size_t>(k)));
      Utterance u;
      u.tokens = generate(model, enc, dc, rng);
      u.provenance = Provenance::predicted;
      total += classifier.score(contexts[i], u).p_coherent;
    }
  }
  return total / static_cast<double>(contexts.size() * static_cast<std::size_t>(samples));
}

}  // namespace hsdial
