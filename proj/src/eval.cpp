#include "hsdial/eval.hpp"

#include "hsdial/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>
#include <mutex>
#include <thread>

namespace hsdial {

Responder model_responder(const DialogueModel& model, DecodeConfig cfg, std::size_t max_input_tokens) {
  return [&model, cfg, max_input_tokens](const DialogueContext& ctx, std::mt19937_64& rng) {
    Utterance u;
    u.tokens = generate(model, model_input(ctx, max_input_tokens, model.max_positions()), cfg, rng);
    u.provenance = Provenance::predicted;
    return u;
  };
}

Responder rerank_responder(const DialogueModel& model, const CoherenceClassifier& classifier, DecodeConfig cfg,
                           std::size_t max_input_tokens) {
  cfg.strategy = DecodeStrategy::beam;
  return [&model, &classifier, cfg, max_input_tokens](const DialogueContext& ctx, std::mt19937_64&) {
    return generate_with_rerank(model, classifier, ctx, cfg, max_input_tokens);
  };
}

std::optional<CoherenceLabel> SelfTalkTranscript::label(int k) const {
  if (k < 1 || static_cast<std::size_t>(k) >= labels.size()) return std::nullopt;
  return labels[static_cast<std::size_t>(k)];
}

namespace {

Speaker alternate(Speaker first, std::size_t index) {
  if (first == Speaker::unknown) return Speaker::unknown;
  const bool same = index % 2 == 0;
  if (first == Speaker::human) return same ? Speaker::human : Speaker::bot;
  return same ? Speaker::bot : Speaker::human;
}

void continue_talk(SelfTalkTranscript& t, const Responder& responder, int K, std::mt19937_64& rng) {
  const Speaker first = t.utterances.front().speaker == Speaker::unknown ? Speaker::human
                                                                         : t.utterances.front().speaker;
  while (static_cast<int>(t.utterances.size()) < K) {
    DialogueContext ctx;
    ctx.utterances = t.utterances;
    Utterance u = responder(ctx, rng);
    u.speaker = alternate(first, t.utterances.size());
    u.provenance = Provenance::predicted;
    t.utterances.push_back(std::move(u));
  }
}

}  // namespace

void judge_transcript(SelfTalkTranscript& t, const CoherenceClassifier& judge) {
  t.labels.assign(t.utterances.size(), std::nullopt);
  t.p_coherent.assign(t.utterances.size(), std::nullopt);
  DialogueContext ctx;
  for (std::size_t k = 0; k < t.utterances.size(); ++k) {
    if (k > 0) {
      const auto s = judge.score(ctx, t.utterances[k]);
      t.labels[k] = s.label;
      t.p_coherent[k] = s.p_coherent;
    }
    ctx.utterances.push_back(t.utterances[k]);
  }
}

SelfTalkTranscript self_talk(const Responder& responder, const Utterance& prompt, int K, std::uint64_t seed,
                             const CoherenceClassifier* judge) {
  if (K < 2) throw std::invalid_argument("self_talk: K must be >= 2");
  SelfTalkTranscript t;
  t.seed = seed;
  t.utterances.push_back(prompt);
  if (t.utterances.front().speaker == Speaker::unknown) t.utterances.front().speaker = Speaker::human;
  std::mt19937_64 rng(seed);
  continue_talk(t, responder, K, rng);
  t.labels.assign(t.utterances.size(), std::nullopt);
  t.p_coherent.assign(t.utterances.size(), std::nullopt);
  if (judge) judge_transcript(t, *judge);
  return t;
}

std::optional<SelfTalkTranscript> golden_prefix_talk(const Responder& responder, std::span<const Utterance> golden,
                                                     int g, int K, std::uint64_t seed,
                                                     const CoherenceClassifier* judge) {
  if (g < 1 || K < g) throw std::invalid_argument("golden_prefix_talk: need 1 <= g <= K");
  if (golden.size() < static_cast<std::size_t>(g)) return std::nullopt;
  SelfTalkTranscript t;
  t.seed = seed;
  t.utterances.assign(golden.begin(), golden.begin() + g);
  if (t.utterances.front().speaker == Speaker::unknown) t.utterances.front().speaker = Speaker::human;
  std::mt19937_64 rng(seed);
  continue_talk(t, responder, K, rng);
  t.labels.assign(t.utterances.size(), std::nullopt);
  t.p_coherent.assign(t.utterances.size(), std::nullopt);
  if (judge) judge_transcript(t, *judge);
  return t;
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const auto w = static_cast<std::size_t>(std::max(1, workers));
  if (w == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t k = 0; k < std::min(w, n); ++k) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  // splitmix64 finaliser over the pair
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

SelfTalkRun run_self_talk(const Responder& responder, std::span<const Utterance> prompts, int K, std::uint64_t seed,
                          const CoherenceClassifier* judge, const std::string& model_id, int workers) {
  SelfTalkRun run;
  run.transcripts.resize(prompts.size());
  parallel_for(prompts.size(), workers, [&](std::size_t i) {
    auto t = self_talk(responder, prompts[i], K, derive_seed(seed, i), judge);
    t.id = "talk-" + std::to_string(i);
    t.model_id = model_id;
    run.transcripts[i] = std::move(t);
  });
  return run;
}

GoldenPrefixRun golden_prefix_run(const Responder& responder, std::span<const std::vector<Utterance>> dialogues,
                                  int g, int K, const CoherenceClassifier& judge, std::uint64_t seed, int workers) {
  std::vector<std::optional<SelfTalkTranscript>> slots(dialogues.size());
  parallel_for(dialogues.size(), workers, [&](std::size_t i) {
    slots[i] = golden_prefix_talk(responder, dialogues[i], g, K, derive_seed(seed, i), &judge);
    if (slots[i]) slots[i]->id = "prefix-" + std::to_string(g) + "-" + std::to_string(i);
  });
  GoldenPrefixRun run;
  for (auto& s : slots) {
    if (s) {
      run.transcripts.push_back(std::move(*s));
    } else {
      ++run.skipped;
    }
  }
  if (!run.transcripts.empty()) run.curve = coherence_rates(run.transcripts);
  return run;
}

double coherence_rate(std::span<const SelfTalkTranscript> transcripts, int k) {
  if (transcripts.empty()) throw std::invalid_argument("coherence_rate: no transcripts");
  std::size_t coherent = 0;
  for (const auto& t : transcripts) {
    const auto l = t.label(k);
    if (!l) throw std::invalid_argument("coherence_rate: transcript " + t.id + " has no label at turn " +
                                        std::to_string(k));
    if (*l == CoherenceLabel::coherent) ++coherent;
  }
  return static_cast<double>(coherent) / static_cast<double>(transcripts.size());
}

std::vector<double> coherence_rates(std::span<const SelfTalkTranscript> transcripts) {
  if (transcripts.empty()) throw std::invalid_argument("coherence_rates: no transcripts");
  std::size_t n = transcripts.front().utterances.size();
  for (const auto& t : transcripts) n = std::min(n, t.utterances.size());
  std::vector<double> out;
  for (std::size_t k = 1; k < n; ++k) out.push_back(coherence_rate(transcripts, static_cast<int>(k)));
  return out;
}

Aggregates aggregate(std::span<const double> rates) {
  auto mean_of = [&](std::size_t n) -> std::optional<double> {
    if (rates.size() < n) return std::nullopt;
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += rates[i];
    return s / static_cast<double>(n);
  };
  return {mean_of(5), mean_of(10)};
}

std::optional<double> distinct_n(std::span<const TokenId> tokens, int n) {
  if (n < 1) throw std::invalid_argument("distinct_n: n must be >= 1");
  if (tokens.size() < static_cast<std::size_t>(n)) return std::nullopt;
  std::set<std::vector<TokenId>> unique;
  const std::size_t total = tokens.size() - static_cast<std::size_t>(n) + 1;
  for (std::size_t i = 0; i < total; ++i) unique.emplace(tokens.begin() + i, tokens.begin() + i + n);
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

std::optional<double> distinct_n(const SelfTalkTranscript& t, int n) {
  std::vector<TokenId> flat;
  for (const auto& u : t.utterances) flat.insert(flat.end(), u.tokens.begin(), u.tokens.end());
  return distinct_n(flat, n);
}

double perplexity(const DialogueModel& model, std::span<const TrainingPair> pairs, std::size_t max_input_tokens) {
  if (pairs.empty()) throw std::invalid_argument("perplexity: no pairs");
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& p : pairs) {
    const auto target = with_eos(p.response.tokens);
    nll -= sequence_log_prob(model, model_input(p.context, max_input_tokens, model.max_positions()), target);
    count += target.size();
  }
  return std::exp(nll / static_cast<double>(count));
}

std::vector<double> contradiction_by_turn(std::span<const SelfTalkTranscript> transcripts,
                                          const CoherenceClassifier& classifier, int probe_turn) {
  if (transcripts.empty()) throw std::invalid_argument("contradiction_by_turn: no transcripts");
  if (probe_turn < 1) throw std::invalid_argument("contradiction_by_turn: probe_turn must be >= 1");
  const auto probe = static_cast<std::size_t>(probe_turn);
  std::vector<double> rates(probe, 0.0);
  for (const auto& t : transcripts) {
    if (t.utterances.size() <= probe)
      throw std::invalid_argument("contradiction_by_turn: transcript " + t.id + " is too short");
    for (std::size_t u = 0; u < probe; ++u) {
      const auto s = score_against_single_utterance(classifier, t.utterances[u], t.utterances[probe]);
      rates[u] += 1.0 - s.p_coherent;
    }
  }
  for (auto& r : rates) r = 100.0 * r / static_cast<double>(transcripts.size());
  return rates;
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson: length mismatch");
  if (x.size() < 2) return std::nullopt;
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

SignTest sign_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("sign_test: length mismatch");
  SignTest s;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > b[i]) {
      ++s.wins;
    } else if (a[i] < b[i]) {
      ++s.losses;
    } else {
      ++s.ties;
    }
  }
  // P(X >= wins) for X ~ Bin(wins + losses, 1/2)
  const std::size_t n = s.wins + s.losses;
  double p = 0.0;
  for (std::size_t k = s.wins; k <= n; ++k) {
    const double log_term = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) -
                            static_cast<double>(n) * std::log(2.0);
    p += std::exp(log_term);
  }
  s.p_value = n == 0 ? 1.0 : std::min(1.0, p);
  return s;
}

MetricsReport compute_metrics(std::span<const SelfTalkTranscript> transcripts, const std::string& model_id) {
  MetricsReport r;
  r.model_id = model_id;
  r.conversations = transcripts.size();
  if (transcripts.empty()) return r;
  r.rates = coherence_rates(transcripts);
  r.aggregates = aggregate(r.rates);
  auto mean_distinct = [&](int n) -> std::optional<double> {
    double s = 0.0;
    std::size_t c = 0;
    for (const auto& t : transcripts)
      if (auto d = distinct_n(t, n)) {
        s += *d;
        ++c;
      }
    if (c == 0) return std::nullopt;
    return s / static_cast<double>(c);
  };
  r.distinct1 = mean_distinct(1);
  r.distinct2 = mean_distinct(2);
  r.distinct3 = mean_distinct(3);
  return r;
}

namespace {

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::optional<double> opt_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json c = nlohmann::json::object();
  for (std::size_t k = 0; k < r.rates.size(); ++k) c["c_" + std::to_string(k + 1)] = r.rates[k];
  return {{"model_id", r.model_id},
          {"conversations", r.conversations},
          {"rates", r.rates},
          {"coherence", c},
          {"avg_5", opt(r.aggregates.avg_5)},
          {"avg_10", opt(r.aggregates.avg_10)},
          {"distinct_1", opt(r.distinct1)},
          {"distinct_2", opt(r.distinct2)},
          {"distinct_3", opt(r.distinct3)},
          {"ppl", opt(r.ppl)}};
}

MetricsReport metrics_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.model_id = j.value("model_id", "");
  r.conversations = j.value("conversations", std::size_t{0});
  r.rates = j.value("rates", std::vector<double>{});
  r.aggregates = {opt_from(j, "avg_5"), opt_from(j, "avg_10")};
  r.distinct1 = opt_from(j, "distinct_1");
  r.distinct2 = opt_from(j, "distinct_2");
  r.distinct3 = opt_from(j, "distinct_3");
  r.ppl = opt_from(j, "ppl");
  return r;
}

nlohmann::json to_json(const SelfTalkTranscript& t, const Tokenizer* tok) {
  nlohmann::json turns = nlohmann::json::array();
  for (std::size_t k = 0; k < t.utterances.size(); ++k) {
    const auto& u = t.utterances[k];
    nlohmann::json j = {{"speaker", to_string(u.speaker)}, {"provenance", to_string(u.provenance)},
                        {"tokens", u.tokens}};
    if (tok) j["text"] = tok->decode(u.tokens);
    if (k < t.labels.size() && t.labels[k]) j["label"] = to_string(*t.labels[k]);
    if (k < t.p_coherent.size() && t.p_coherent[k]) j["p_coherent"] = *t.p_coherent[k];
    turns.push_back(std::move(j));
  }
  return {{"id", t.id}, {"model_id", t.model_id}, {"seed", t.seed}, {"turns", turns}};
}

SelfTalkTranscript transcript_from_json(const nlohmann::json& j, const Tokenizer* tok) {
  SelfTalkTranscript t;
  t.id = j.value("id", "");
  t.model_id = j.value("model_id", "");
  t.seed = j.value("seed", std::uint64_t{0});
  for (const auto& turn : j.at("turns")) {
    Utterance u;
    if (turn.contains("tokens")) {
      u.tokens = turn.at("tokens").get<std::vector<TokenId>>();
    } else if (tok && turn.contains("text")) {
      u.tokens = tok->encode(turn.at("text").get<std::string>());
    } else {
      throw DataError("transcript turn lacks tokens");
    }
    u.speaker = speaker_from_string(turn.value("speaker", "unknown"));
    const auto prov = turn.value("provenance", "golden");
    u.provenance = prov == "predicted" ? Provenance::predicted
                   : prov == "noise"   ? Provenance::noise
                                       : Provenance::golden;
    t.utterances.push_back(std::move(u));
    t.labels.push_back(turn.contains("label")
                           ? std::optional(coherence_label_from_string(turn.at("label").get<std::string>()))
                           : std::nullopt);
    t.p_coherent.push_back(turn.contains("p_coherent") ? std::optional(turn.at("p_coherent").get<double>())
                                                       : std::nullopt);
  }
  return t;
}

void save_transcripts(const std::filesystem::path& path, std::span<const SelfTalkTranscript> ts,
                      const Tokenizer* tok) {
  std::ofstream o(path);
  if (!o) throw DataError("cannot write " + path.string());
  for (const auto& t : ts) o << to_json(t, tok).dump() << '\n';
}

std::vector<SelfTalkTranscript> load_transcripts(const std::filesystem::path& path, const Tokenizer* tok) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<SelfTalkTranscript> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(transcript_from_json(nlohmann::json::parse(line), tok));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("bad transcript: ") + e.what(), n);
    }
  }
  return out;
}

void write_curve_csv(const std::filesystem::path& path, std::span<const std::pair<int, double>> rows,
                     const std::string& header) {
  std::ofstream o(path);
  if (!o) throw DataError("cannot write " + path.string());
  o.precision(17);
  o << header << '\n';
  for (const auto& [turn, rate] : rows) o << turn << ',' << rate << '\n';
}

}  // namespace hsdial
