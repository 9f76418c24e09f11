#include "hsdial/hier_sampling.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace hsdial {

std::string to_string(SamplingMode m) {
  switch (m) {
    case SamplingMode::off: return "off";
    case SamplingMode::utterance: return "utterance";
    case SamplingMode::semi: return "semi";
    case SamplingMode::hierarchical: return "hierarchical";
    case SamplingMode::noise: return "noise";
  }
  return "off";
}

SamplingMode sampling_mode_from_string(std::string_view s) {
  for (auto m : {SamplingMode::off, SamplingMode::utterance, SamplingMode::semi, SamplingMode::hierarchical,
                 SamplingMode::noise})
    if (s == to_string(m)) return m;
  throw std::invalid_argument("unknown sampling mode: " + std::string(s));
}

std::string to_string(IndexOrientation o) {
  return o == IndexOrientation::from_first ? "from_first" : "from_last";
}

IndexOrientation index_orientation_from_string(std::string_view s) {
  if (s == "from_first") return IndexOrientation::from_first;
  if (s == "from_last") return IndexOrientation::from_last;
  throw std::invalid_argument("unknown index orientation: " + std::string(s));
}

void SamplingConfig::validate() const {
  if (!(geo_p > 0.0 && geo_p <= 1.0)) throw std::invalid_argument("geo_p must be in (0, 1]");
  if (i_max < 1) throw std::invalid_argument("i_max must be >= 1");
  if (!(apply_prob >= 0.0 && apply_prob <= 1.0)) throw std::invalid_argument("apply_prob must be in [0, 1]");
  if (!(apply_prob_end >= 0.0 && apply_prob_end <= 1.0))
    throw std::invalid_argument("apply_prob_end must be in [0, 1]");
  if (!(hier_mix >= 0.0 && hier_mix <= 1.0)) throw std::invalid_argument("hier_mix must be in [0, 1]");
  if (!(semi_fraction > 0.0 && semi_fraction <= 1.0)) throw std::invalid_argument("semi_fraction must be in (0, 1]");
  if (extra_tokens < 0) throw std::invalid_argument("extra_tokens must be >= 0");
  if (ramp_epochs < 1) throw std::invalid_argument("ramp_epochs must be >= 1");
}

double SamplingConfig::apply_prob_at(int epoch) const {
  if (schedule == ApplySchedule::constant) return apply_prob;
  const double f = std::min(1.0, static_cast<double>(std::max(0, epoch)) / ramp_epochs);
  return apply_prob + f * (apply_prob_end - apply_prob);
}

int sample_utterance_index(int l, const SamplingConfig& cfg, std::mt19937_64& rng) {
  if (l < 2) throw std::invalid_argument("sample_utterance_index: need l >= 2");
  const int clip = std::min(l - 1, cfg.i_max);
  // std::geometric_distribution counts failures before the first success
  int k = 1;
  if (cfg.geo_p < 1.0) k = std::geometric_distribution<int>(cfg.geo_p)(rng) + 1;
  const int from_first = std::min(k, clip);
  if (cfg.orientation == IndexOrientation::from_first) return from_first;
  return (l - 1) - from_first + 1;
}

int sample_semi_prefix(std::size_t utterance_length, const SamplingConfig& cfg, std::mt19937_64& rng) {
  const auto n = static_cast<double>(utterance_length);
  const int hi = std::max(1, static_cast<int>(std::ceil(n * cfg.semi_fraction)));
  std::uniform_int_distribution<int> d(1, std::max(1, std::min(hi, static_cast<int>(utterance_length))));
  return d(rng);
}

Utterance generate_replacement(const DialogueModel& model, const DialogueContext& golden, int i,
                               ReplacementKind kind, const SamplingConfig& cfg, std::mt19937_64& rng,
                               std::size_t max_input_tokens, std::optional<int> j) {
  const int l = static_cast<int>(golden.utterances.size()) + 1;
  if (i < 1 || i > l - 1) throw std::out_of_range("generate_replacement: index out of range");
  if (i == 1) throw std::invalid_argument("generate_replacement: utterance 1 has no prior context");
  const auto& target = golden.utterances[static_cast<std::size_t>(i - 1)];

  DialogueContext prior;
  prior.utterances.assign(golden.utterances.begin(), golden.utterances.begin() + (i - 1));
  const auto input = model_input(prior, max_input_tokens, model.max_positions());

  std::vector<TokenId> forced;
  if (kind == ReplacementKind::semi && !target.tokens.empty()) {
    int n = j ? *j : sample_semi_prefix(target.size(), cfg, rng);
    n = std::clamp(n, 0, static_cast<int>(target.size()));
    forced.assign(target.tokens.begin(), target.tokens.begin() + n);
  }

  DecodeConfig dc;
  dc.strategy = DecodeStrategy::greedy;
  dc.max_length = std::max<int>(1, static_cast<int>(target.size()) + cfg.extra_tokens);
  Utterance out;
  out.tokens = generate(model, input, dc, rng, forced);
  out.speaker = target.speaker;
  out.provenance = Provenance::predicted;
  return out;
}

Utterance noise_replacement(std::span<const Utterance> pool, std::mt19937_64& rng) {
  if (pool.empty()) throw std::invalid_argument("noise_replacement: empty pool");
  std::uniform_int_distribution<std::size_t> d(0, pool.size() - 1);
  Utterance u = pool[d(rng)];
  u.provenance = Provenance::noise;
  return u;
}

MixedContext build_mixed_context(const DialogueContext& golden, int i, Utterance replacement) {
  if (i < 1 || i > static_cast<int>(golden.utterances.size()))
    throw std::out_of_range("build_mixed_context: index out of range");
  MixedContext m;
  m.context = golden;
  auto& slot = m.context.utterances[static_cast<std::size_t>(i - 1)];
  if (replacement.speaker == Speaker::unknown) replacement.speaker = slot.speaker;
  slot = std::move(replacement);
  m.replaced_index = i;
  return m;
}

MixedContextSampler::MixedContextSampler(SamplingConfig cfg, const DialogueModel& model,
                                         std::vector<Utterance> noise_pool, std::size_t max_input_tokens)
    : cfg_(cfg), model_(&model), pool_(std::move(noise_pool)), max_input_tokens_(max_input_tokens) {
  cfg_.validate();
  if (cfg_.mode == SamplingMode::noise && pool_.empty())
    throw std::invalid_argument("noise sampling needs a non-empty utterance pool");
}

MixedContext MixedContextSampler::operator()(const TrainingPair& pair, std::mt19937_64& rng, double apply_prob) {
  ++stats_.examples;
  MixedContext golden{pair.context, std::nullopt, std::nullopt};
  if (cfg_.mode == SamplingMode::off) return golden;
  const int l = static_cast<int>(pair.context.utterances.size()) + 1;
  if (l < 2) return golden;
  std::bernoulli_distribution apply(apply_prob);
  if (!apply(rng)) return golden;

  if (cfg_.mode == SamplingMode::noise) {
    const int i = sample_utterance_index(l, cfg_, rng);
    ++stats_.replaced;
    ++stats_.noise;
    return build_mixed_context(pair.context, i, noise_replacement(pool_, rng));
  }

  ReplacementKind kind = cfg_.mode == SamplingMode::semi ? ReplacementKind::semi : ReplacementKind::utterance;
  if (cfg_.mode == SamplingMode::hierarchical) {
    std::bernoulli_distribution utter(cfg_.hier_mix);
    kind = utter(rng) ? ReplacementKind::utterance : ReplacementKind::semi;
  }
  // utterance 1 has no prior context to generate from
  if (l - 1 < 2) return golden;
  int i = sample_utterance_index(l, cfg_, rng);
  for (int tries = 0; i == 1 && tries < 1000; ++tries) i = sample_utterance_index(l, cfg_, rng);
  if (i == 1) return golden;  // geo_p = 1 under from_first never leaves index 1

  auto r = generate_replacement(*model_, pair.context, i, kind, cfg_, rng, max_input_tokens_);
  ++stats_.replaced;
  ++(kind == ReplacementKind::utterance ? stats_.utterance_level : stats_.semi_level);
  auto m = build_mixed_context(pair.context, i, std::move(r));
  m.kind = kind;
  return m;
}

namespace {

void merge(SamplingStats* into, const SamplingStats& s) {
  if (!into) return;
  into->examples += s.examples;
  into->replaced += s.replaced;
  into->utterance_level += s.utterance_level;
  into->semi_level += s.semi_level;
  into->noise += s.noise;
}

std::vector<Utterance> to_pool(std::span<const Utterance> p) { return {p.begin(), p.end()}; }

}  // namespace

HierStepResult hierarchical_training_step(TrainState& state, std::span<const TrainingPair> batch,
                                          const SamplingConfig& cfg, std::mt19937_64& rng,
                                          std::span<const Utterance> noise_pool,
                                          const DialogueModel* replacement_model, SamplingStats* stats) {
  // Replacements are decoded before any gradient is recorded, with a
  // non-recording tape, so they cannot feed the parameter update.
  const DialogueModel& gen = replacement_model ? *replacement_model : state.model;
  MixedContextSampler sampler(cfg, gen, to_pool(noise_pool), state.config.max_input_tokens);
  HierStepResult out;
  const double p = cfg.apply_prob_at(state.epoch);
  ContextBuilder builder = [&](const TrainingPair& pair, std::mt19937_64&) {
    out.contexts.push_back(sampler(pair, rng, p));
    return out.contexts.back().context;
  };
  out.loss = train_step(state, batch, builder).loss;
  merge(stats, sampler.stats());
  return out;
}

EpochReport hierarchical_train_epoch(TrainState& state, std::span<const TrainingPair> pairs,
                                     const SamplingConfig& cfg, std::mt19937_64& rng,
                                     std::span<const Utterance> noise_pool, SamplingStats* stats) {
  if (cfg.mode == SamplingMode::off) return train_epoch(state, pairs);
  // The sampler reads state.model, which train_epoch updates in place, so
  // every replacement uses the current parameters.
  MixedContextSampler sampler(cfg, state.model, to_pool(noise_pool), state.config.max_input_tokens);
  const double p = cfg.apply_prob_at(state.epoch);
  ContextBuilder builder = [&](const TrainingPair& pair, std::mt19937_64&) { return sampler(pair, rng, p).context; };
  auto rep = train_epoch(state, pairs, builder);
  merge(stats, sampler.stats());
  return rep;
}

}  // namespace hsdial
