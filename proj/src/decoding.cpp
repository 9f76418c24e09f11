#include "hsdial/decoding.hpp"

#include "hsdial/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace hsdial {

std::string to_string(DecodeStrategy s) {
  switch (s) {
    case DecodeStrategy::beam: return "beam";
    case DecodeStrategy::sample: return "sample";
    default: return "greedy";
  }
}

DecodeStrategy decode_strategy_from_string(std::string_view s) {
  if (s == "greedy") return DecodeStrategy::greedy;
  if (s == "beam") return DecodeStrategy::beam;
  if (s == "sample") return DecodeStrategy::sample;
  throw std::invalid_argument("unknown decode strategy: " + std::string(s));
}

TokenId argmax(std::span<const double> dist) {
  return static_cast<TokenId>(std::max_element(dist.begin(), dist.end()) - dist.begin());
}

namespace {

TokenId sample_token(std::span<const double> dist, double temperature, std::mt19937_64& rng) {
  if (temperature <= 0.0) return argmax(dist);
  std::vector<double> w(dist.begin(), dist.end());
  if (temperature != 1.0) {
    for (auto& x : w) x = std::pow(x, 1.0 / temperature);
  }
  double total = 0.0;
  for (double x : w) total += x;
  std::uniform_real_distribution<double> u(0.0, total);
  const double r = u(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    acc += w[i];
    if (r < acc && w[i] > 0.0) return static_cast<TokenId>(i);
  }
  // r landed on the upper edge through rounding: take the last non-zero entry
  for (std::size_t i = w.size(); i-- > 0;)
    if (w[i] > 0.0) return static_cast<TokenId>(i);
  return argmax(dist);
}

double normalised(double log_prob, std::size_t length, double alpha) {
  if (alpha == 0.0 || length == 0) return log_prob;
  return log_prob / std::pow(static_cast<double>(length), alpha);
}

}  // namespace

std::vector<TokenId> generate(const DialogueModel& model, const Encoding& enc, const DecodeConfig& cfg,
                              std::mt19937_64& rng, std::span<const TokenId> forced) {
  if (cfg.max_length < 1) throw std::invalid_argument("max_length must be >= 1");
  if (cfg.strategy == DecodeStrategy::beam && cfg.beam_size > 1 && forced.empty()) {
    auto cands = beam_search(model, enc, cfg);
    return cands.front().tokens;
  }
  std::vector<TokenId> out(forced.begin(), forced.end());
  const auto limit = std::max(static_cast<std::size_t>(cfg.max_length), out.size());
  while (out.size() < limit) {
    const auto dist = model.step_distribution(enc, out);
    const TokenId next = cfg.strategy == DecodeStrategy::sample ? sample_token(dist, cfg.temperature, rng)
                                                                : argmax(dist);
    if (next == special::kEos) break;
    out.push_back(next);
  }
  return out;
}

std::vector<TokenId> generate(const DialogueModel& model, std::span<const TokenId> context, const DecodeConfig& cfg,
                              std::mt19937_64& rng, std::span<const TokenId> forced) {
  return generate(model, model.encode(context), cfg, rng, forced);
}

std::vector<TokenId> generate(const DialogueModel& model, std::span<const TokenId> context,
                              const DecodeConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  return generate(model, context, cfg, rng);
}

std::vector<Candidate> beam_search(const DialogueModel& model, std::span<const TokenId> context,
                                   const DecodeConfig& cfg) {
  return beam_search(model, model.encode(context), cfg);
}

std::vector<Candidate> beam_search(const DialogueModel& model, const Encoding& enc, const DecodeConfig& cfg) {
  if (cfg.beam_size < 1) throw std::invalid_argument("beam_size must be >= 1");
  if (cfg.max_length < 1) throw std::invalid_argument("max_length must be >= 1");
  const auto beam = static_cast<std::size_t>(cfg.beam_size);

  struct Hyp {
    std::vector<TokenId> tokens;
    double log_prob;
  };
  struct Expansion {
    double total;
    double step_prob;
    std::size_t hyp;
    TokenId token;
  };

  std::vector<Hyp> active{{{}, 0.0}};
  std::vector<Candidate> finished;
  for (int step = 0; step < cfg.max_length && !active.empty() && finished.size() < beam; ++step) {
    std::vector<Expansion> exp;
    for (std::size_t h = 0; h < active.size(); ++h) {
      const auto dist = model.step_distribution(enc, active[h].tokens);
      for (std::size_t v = 0; v < dist.size(); ++v) {
        if (dist[v] <= 0.0) continue;
        exp.push_back({active[h].log_prob + std::log(dist[v]), dist[v], h, static_cast<TokenId>(v)});
      }
    }
    const std::size_t keep = std::min(beam - finished.size(), exp.size());
    std::partial_sort(exp.begin(), exp.begin() + static_cast<std::ptrdiff_t>(keep), exp.end(),
                      [](const Expansion& a, const Expansion& b) {
                        if (a.total != b.total) return a.total > b.total;
                        if (a.step_prob != b.step_prob) return a.step_prob > b.step_prob;
                        if (a.hyp != b.hyp) return a.hyp < b.hyp;
                        return a.token < b.token;
                      });
    std::vector<Hyp> next;
    for (std::size_t i = 0; i < keep; ++i) {
      const auto& e = exp[i];
      const auto& parent = active[e.hyp];
      if (e.token == special::kEos) {
        Candidate c;
        c.tokens = parent.tokens;
        c.log_prob = e.total;
        c.finished = true;
        c.score = normalised(c.log_prob, c.tokens.size() + 1, cfg.length_penalty);
        finished.push_back(std::move(c));
      } else {
        Hyp h{parent.tokens, e.total};
        h.tokens.push_back(e.token);
        next.push_back(std::move(h));
      }
    }
    active = std::move(next);
  }
  // hypotheses that hit max_length end there
  for (auto& h : active) {
    if (finished.size() >= beam) break;
    Candidate c;
    c.tokens = std::move(h.tokens);
    c.log_prob = h.log_prob;
    c.score = normalised(c.log_prob, c.tokens.size(), cfg.length_penalty);
    finished.push_back(std::move(c));
  }
  std::stable_sort(finished.begin(), finished.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.log_prob > b.log_prob;
  });
  if (finished.size() > beam) finished.resize(beam);
  return finished;
}

std::size_t rerank_index(std::vector<Candidate>& candidates, const DialogueContext& context,
                         const CoherenceClassifier& classifier) {
  if (candidates.empty()) throw std::invalid_argument("rerank: no candidates");
  std::size_t best = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    Utterance u;
    u.tokens = candidates[i].tokens;
    u.provenance = Provenance::predicted;
    candidates[i].coherence = classifier.score(context, u).p_coherent;
    if (i == 0) continue;
    const auto& b = candidates[best];
    const auto& c = candidates[i];
    if (*c.coherence > *b.coherence || (*c.coherence == *b.coherence && c.score > b.score)) best = i;
  }
  return best;
}

Candidate rerank(std::vector<Candidate> candidates, const DialogueContext& context,
                 const CoherenceClassifier& classifier) {
  const auto i = rerank_index(candidates, context, classifier);
  return candidates[i];
}

Utterance generate_with_rerank(const DialogueModel& model, const CoherenceClassifier& classifier,
                               const DialogueContext& context, const DecodeConfig& cfg,
                               std::size_t max_input_tokens) {
  const auto input = model_input(context, max_input_tokens, model.max_positions());
  auto cands = beam_search(model, input, cfg);
  Utterance u;
  u.tokens = rerank(std::move(cands), context, classifier).tokens;
  u.provenance = Provenance::predicted;
  u.speaker = Speaker::bot;
  return u;
}

}  // namespace hsdial
