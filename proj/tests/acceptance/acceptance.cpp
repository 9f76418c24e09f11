// Acceptance run: one PASS/FAIL line per criterion.
//
// Property checks use small hand-built or random cases with independent
// reference computations. Trend checks train toy models on the synthetic
// keyword-chain corpus through the same pipeline stages the CLI runs, and
// judge them with the exact keyword oracle.
//
// Exit status is 0 when every criterion meets its expectation: a pass, or a
// failure for criteria named with --expect-fail. An expected failure that
// starts passing is reported and also makes the run exit non-zero.

#include "hsdial/pipeline.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <random>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using namespace hsdial;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// -- sampler law --------------------------------------------------------------

std::vector<double> clipped_geometric(double p, int clip) {
  std::vector<double> pmf(static_cast<std::size_t>(clip) + 1, 0.0);
  double rest = 1.0;
  for (int k = 1; k < clip; ++k) {
    pmf[static_cast<std::size_t>(k)] = std::pow(1 - p, k - 1) * p;
    rest -= pmf[static_cast<std::size_t>(k)];
  }
  pmf[static_cast<std::size_t>(clip)] = rest;
  return pmf;
}

Outcome sampler_law() {
  const auto t0 = std::chrono::steady_clock::now();
  struct Case {
    double p;
    int clip;
  };
  double worst = 0.0;
  std::string parts;
  for (const Case c : {Case{0.2, 10}, Case{0.5, 3}}) {
    SamplingConfig cfg;
    cfg.geo_p = c.p;
    cfg.i_max = c.clip;
    const int l = c.clip + 5;  // long enough that i_max is the binding clip
    const int n = 100000;
    std::vector<double> counts(static_cast<std::size_t>(c.clip) + 1, 0.0);
    std::mt19937_64 rng(2024);
    for (int s = 0; s < n; ++s) {
      const int i = sample_utterance_index(l, cfg, rng);
      if (i < 1 || i > c.clip) return {false, fmt("index %d outside [1, %d]", i, c.clip)};
      counts[static_cast<std::size_t>(i)] += 1.0;
    }
    const auto pmf = clipped_geometric(c.p, c.clip);
    double tv = 0.0;
    for (int k = 1; k <= c.clip; ++k)
      tv += std::abs(counts[static_cast<std::size_t>(k)] / n - pmf[static_cast<std::size_t>(k)]);
    tv /= 2;
    worst = std::max(worst, tv);
    parts += fmt("TV(Geo(%.1f) clip %d)=%.4f ", c.p, c.clip, tv);
  }
  const double secs = seconds_since(t0);
  return {worst < 0.01 && secs < 10.0, parts + fmt("time %.2fs (limits 0.01, 10s)", secs)};
}

// -- metric oracles -----------------------------------------------------------

std::size_t brute_distinct(const std::vector<TokenId>& toks, int n) {
  std::vector<std::vector<TokenId>> seen;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i) {
    std::vector<TokenId> g(toks.begin() + static_cast<std::ptrdiff_t>(i),
                           toks.begin() + static_cast<std::ptrdiff_t>(i) + n);
    bool dup = false;
    for (const auto& s : seen) dup = dup || s == g;
    if (!dup) seen.push_back(g);
  }
  return seen.size();
}

Outcome metric_oracles() {
  std::mt19937_64 rng(77);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<TokenId> toks(rng() % 15);
    for (auto& t : toks) t = static_cast<TokenId>(8 + rng() % 4);
    for (int n = 1; n <= 3; ++n) {
      const auto got = distinct_n(toks, n);
      const std::size_t total = toks.size() >= static_cast<std::size_t>(n) ? toks.size() - n + 1 : 0;
      if (total == 0) {
        mismatches += got.has_value();
        continue;
      }
      const double want = static_cast<double>(brute_distinct(toks, n)) / static_cast<double>(total);
      mismatches += !got || *got != want;
    }
  }
  for (int trial = 0; trial < 1000; ++trial) {
    const int K = 2 + static_cast<int>(rng() % 10);
    std::vector<SelfTalkTranscript> ts(1 + rng() % 6);
    for (auto& t : ts) {
      t.utterances.resize(static_cast<std::size_t>(K));
      t.labels.resize(static_cast<std::size_t>(K));
      for (int k = 1; k < K; ++k)
        t.labels[static_cast<std::size_t>(k)] = rng() % 2 ? CoherenceLabel::coherent : CoherenceLabel::contradiction;
    }
    const int k = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(K - 1));
    std::size_t coherent = 0;
    for (const auto& t : ts) coherent += t.labels[static_cast<std::size_t>(k)] == CoherenceLabel::coherent;
    mismatches += coherence_rate(ts, k) != static_cast<double>(coherent) / static_cast<double>(ts.size());
  }
  // Published golden-context row c_1..c_10; its avg_10 is reported as 96.5.
  const std::vector<double> golden{99.7, 98.9, 98.2, 96.0, 97.6, 97.2, 96.0, 94.2, 94.1, 93.3};
  const double avg10 = aggregate(golden).avg_10.value_or(-1.0);
  const bool ok = mismatches == 0 && std::abs(avg10 - 96.5) <= 0.05;
  return {ok, fmt("2000 brute-force cases, %d mismatches; golden-row avg_10 %.3f (target 96.5 +- 0.05)",
                  mismatches, avg10)};
}

// -- model math ---------------------------------------------------------------

ModelConfig tiny(int vocab, int width) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.width = width;
  c.heads = 2;
  c.encoder_layers = 2;
  c.decoder_layers = 2;
  c.ffn_width = 2 * width;
  c.max_positions = 32;
  return c;
}

Outcome model_math() {
  std::mt19937_64 rng(5);
  double worst_sum = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Transformer m(tiny(16, 16), trial);
    std::vector<TokenId> ctx(1 + rng() % 8), prefix(rng() % 5);
    for (auto& x : ctx) x = static_cast<TokenId>(8 + rng() % 8);
    for (auto& x : prefix) x = static_cast<TokenId>(8 + rng() % 8);
    const auto d = m.step_distribution(m.encode(ctx), prefix);
    double s = 0.0;
    for (double p : d) s += p;
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
  }

  Transformer m(tiny(12, 16), 9);
  const std::vector<TokenId> ctx{8, 9, special::kSep, 10, 11, 8};
  const std::vector<TokenId> resp{9, 11, 10, special::kEos};
  ag::Tape tape;
  auto loss = m.nll(tape, ctx, resp);
  zero_grads(m.parameters());
  tape.backward(loss);
  auto eval = [&] {
    ag::Tape t(false);
    return m.nll(t, ctx, resp)->value(0, 0);
  };
  int checked = 0;
  double worst_rel = 0.0;
  auto& params = m.parameters();
  for (int tries = 0; checked < 60 && tries < 6000; ++tries) {
    auto& p = params[rng() % params.size()];
    if (p.var->grad.size() == 0) continue;
    const auto r = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(p.var->value.rows()));
    const auto c = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(p.var->value.cols()));
    const double analytic = p.var->grad(r, c);
    if (std::abs(analytic) < 1e-6) continue;
    const double h = 1e-5, orig = p.var->value(r, c);
    p.var->value(r, c) = orig + h;
    const double up = eval();
    p.var->value(r, c) = orig - h;
    const double down = eval();
    p.var->value(r, c) = orig;
    const double numeric = (up - down) / (2 * h);
    worst_rel = std::max(worst_rel, std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric)));
    ++checked;
  }

  Transformer u(tiny(8, 16), 3);
  for (auto& p : u.parameters()) p.var->value.setZero();
  std::vector<TrainingPair> pairs(3);
  pairs[0].context.utterances = {{{5, 6}}};
  pairs[0].response.tokens = {7};
  pairs[1].context.utterances = {{{6}}, {{7, 5}}};
  pairs[1].response.tokens = {5, 5, 6};
  pairs[2].context.utterances = {{{7}}};
  pairs[2].response.tokens = {6, 6};
  const double ppl = perplexity(u, pairs);

  const bool ok = worst_sum <= 1e-6 && checked >= 20 && worst_rel < 1e-4 && std::abs(ppl - 8.0) <= 1e-6;
  return {ok, fmt("max |sum-1| %.2e; finite differences on %d params, max rel err %.2e; uniform PPL %.9f",
                  worst_sum, checked, worst_rel, ppl)};
}

// -- RL math ------------------------------------------------------------------

class ConstantJudge : public CoherenceClassifier {
 public:
  double p_coherent(const DialogueContext&, const Utterance&) const override { return 0.5; }
};

double response_log_prob(const Transformer& m, const Rollout& r, const RLConfig& cfg) {
  const auto enc = m.encode(model_input(r.context, cfg.max_input_tokens, m.max_positions()));
  double s = 0.0;
  for (double v : m.token_log_probs(enc, with_eos(r.response))) s += v;
  return s;
}

Outcome rl_math() {
  const Transformer ref(tiny(12, 16), 21);
  const Transformer same(ref);
  RLConfig cfg;
  cfg.optimizer.lr = 1e-3;
  cfg.ppo_epochs = 1;
  cfg.max_length = 6;
  DialogueContext ctx;
  ctx.utterances = {{{8, 9, 10}, Speaker::human}, {{11, 9}, Speaker::bot}};
  const std::vector<TokenId> resp{9, 10, 11};
  const double kl0 = kl_term(same, ref, ctx, resp, cfg);
  const double reward = compute_reward(0.9, 0.5, 0.2);

  const ConstantJudge judge;
  std::mt19937_64 rng(8);
  Transformer up(ref);
  auto pos = collect_rollouts(up, ref, judge, std::vector<DialogueContext>{ctx}, cfg, rng);
  pos[0].advantage = 1.0;
  const double before = response_log_prob(up, pos[0], cfg);
  AdamW opt_up;
  ppo_update(up, opt_up, pos, cfg);
  const double after = response_log_prob(up, pos[0], cfg);

  Transformer still(ref);
  const auto zero = collect_rollouts(still, ref, judge, std::vector<DialogueContext>(3, ctx), cfg, rng);
  AdamW opt_still;
  ppo_update(still, opt_still, zero, cfg);
  bool unchanged = true;
  for (const auto& r : zero) unchanged = unchanged && r.advantage == 0.0;
  for (std::size_t i = 0; i < still.parameters().size(); ++i)
    unchanged = unchanged && still.parameters()[i].var->value == ref.parameters()[i].var->value;

  const bool ok = kl0 == 0.0 && reward == 0.8 && after > before && unchanged;
  return {ok, fmt("KL(self)=%g; reward(0.9, 0.5, 0.2)=%g; positive-advantage log-prob %.6f -> %.6f; "
                  "zero-advantage step %s parameters",
                  kl0, reward, before, after, unchanged ? "leaves" : "changes")};
}

// -- decoding -----------------------------------------------------------------

// Fixed probabilities over {EOS, 8, 9}; the two best full sequences are "8" then "9".
class KnownModel : public DialogueModel {
 public:
  std::size_t vocab_size() const override { return 10; }
  Encoding encode(std::span<const TokenId> c) const override { return {{c.begin(), c.end()}, {}, {}, {}}; }
  StepDistribution step_distribution(const Encoding&, std::span<const TokenId> p) const override {
    const std::vector<TokenId> key(p.begin(), p.end());
    double e = 0.8, a = 0.1, b = 0.1;
    if (key.empty()) e = 0.1, a = 0.6, b = 0.3;
    else if (key == std::vector<TokenId>{8}) e = 0.5, a = 0.3, b = 0.2;
    else if (key == std::vector<TokenId>{9}) e = 0.9, a = 0.05, b = 0.05;
    else if (key == std::vector<TokenId>{8, 8}) e = 0.7, a = 0.2, b = 0.1;
    StepDistribution d(10, 0.0);
    d[special::kEos] = e;
    d[8] = a;
    d[9] = b;
    return d;
  }
};

// Every sequence of length <= 3 over {8, 9} with its log-probability, best first.
std::vector<std::pair<std::vector<TokenId>, double>> enumerate_all(const DialogueModel& m) {
  std::vector<std::pair<std::vector<TokenId>, double>> out;
  const auto enc = m.encode(std::vector<TokenId>{8});
  std::function<void(std::vector<TokenId>, double)> walk = [&](std::vector<TokenId> prefix, double lp) {
    const auto d = m.step_distribution(enc, prefix);
    out.emplace_back(prefix, lp + std::log(d[special::kEos]));
    if (prefix.size() == 3) {
      out.back().second = lp;  // length-capped without EOS
      return;
    }
    for (TokenId t : {8, 9}) {
      auto next = prefix;
      next.push_back(t);
      walk(next, lp + std::log(d[static_cast<std::size_t>(t)]));
    }
  };
  walk({}, 0.0);
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

// Scores each candidate by a hash of its tokens.
class HashJudge : public CoherenceClassifier {
 public:
  double p_coherent(const DialogueContext&, const Utterance& r) const override {
    std::uint64_t h = 1469598103934665603ull;
    for (TokenId t : r.tokens) h = (h ^ static_cast<std::uint64_t>(t)) * 1099511628211ull;
    return static_cast<double>(h % 1000) / 1000.0;
  }
};

Outcome decoding() {
  std::mt19937_64 rng(3);
  int greedy_mismatch = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const Transformer m(tiny(12, 16), 40 + trial);
    std::vector<TokenId> ctx(1 + rng() % 6);
    for (auto& x : ctx) x = static_cast<TokenId>(8 + rng() % 4);
    DecodeConfig g;
    g.max_length = 6;
    DecodeConfig b = g;
    b.strategy = DecodeStrategy::beam;
    b.beam_size = 1;
    const auto greedy = generate(m, ctx, g);
    const auto beams = beam_search(m, ctx, b);
    greedy_mismatch += generate(m, ctx, b) != greedy || beams.size() != 1 || beams[0].tokens != greedy;
  }

  const KnownModel km;
  DecodeConfig bc;
  bc.strategy = DecodeStrategy::beam;
  bc.beam_size = 2;
  bc.max_length = 3;
  bc.length_penalty = 0.0;
  const auto top2 = beam_search(km, std::vector<TokenId>{8}, bc);
  const auto all = enumerate_all(km);
  bool top2_ok = top2.size() == 2;
  for (std::size_t i = 0; top2_ok && i < 2; ++i)
    top2_ok = top2[i].tokens == all[i].first && std::abs(top2[i].log_prob - all[i].second) < 1e-12;

  const HashJudge judge;
  int not_member = 0;
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<Candidate> cands(1 + rng() % 8);
    for (auto& c : cands) {
      c.tokens.resize(rng() % 5);
      for (auto& t : c.tokens) t = static_cast<TokenId>(8 + rng() % 4);
      c.score = -static_cast<double>(rng() % 100) / 10.0;
    }
    const auto picked = rerank(cands, DialogueContext{}, judge);
    bool member = false;
    for (const auto& c : cands) member = member || (c.tokens == picked.tokens && c.score == picked.score);
    not_member += !member;
  }
  const bool ok = greedy_mismatch == 0 && top2_ok && not_member == 0;
  return {ok, fmt("beam=1 vs greedy mismatches %d/20; top-2 vs enumeration %s; rerank non-members %d/500",
                  greedy_mismatch, top2_ok ? "match" : "differ", not_member)};
}

// -- trends -------------------------------------------------------------------

struct Options {
  fs::path work_dir = "acceptance_runs";
  std::size_t prompts = 400;
  std::uint64_t seed = 0;
};

// The keyword-chain setup: each turn moves to the next topic in a ring and
// restates the facts first stated one cycle earlier.
ExperimentConfig recall_setup(const Options& o, const std::string& name) {
  ExperimentConfig c;
  c.seed = o.seed;
  c.output_dir = o.work_dir.string();
  c.run_name = name;
  c.eval.D = o.prompts;
  c.corpus.synthetic_test_dialogues = static_cast<int>(std::max<std::size_t>(o.prompts, 400));
  return c;
}

std::vector<double> final_turn_scores(const std::vector<SelfTalkTranscript>& ts, int k) {
  std::vector<double> out;
  for (const auto& t : ts) out.push_back(t.label(k) == CoherenceLabel::coherent ? 1.0 : 0.0);
  return out;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

fs::path trained_model(const ExperimentConfig& c) {
  const auto dir = make_run_dir(c, "train");
  return stage_train(c, dir).at("model").get<std::string>();
}

Outcome hs_trend(const Options& o) {
  const auto t0 = std::chrono::steady_clock::now();
  auto base = recall_setup(o, "hs_golden");
  auto hier = recall_setup(o, "hs_hierarchical");
  hier.sampling.mode = SamplingMode::hierarchical;
  const auto corpus = load_corpus(base);
  const auto judge = make_judge(base, "oracle", corpus.vocab);
  std::vector<double> scores[2];
  for (int which = 0; which < 2; ++which) {
    auto c = which ? hier : base;
    c.inputs.model = trained_model(c).string();
    const auto lm = load_model(c.inputs.model);
    const auto run = self_talk_run(c, lm.model, corpus, *judge, nullptr);
    scores[which] = final_turn_scores(run.transcripts, c.eval.K - 1);
  }
  const auto st = sign_test(scores[1], scores[0]);
  const double secs = seconds_since(t0);
  const double gold = mean(scores[0]), hs = mean(scores[1]);
  const bool ok = hs > gold && st.p_value < 0.05 && secs < 1800 && o.prompts >= 200;
  return {ok, fmt("%zu prompts, K=%d: c_10 golden-only %.3f, hierarchical %.3f; sign test %zu wins %zu losses "
                  "p=%.3g (need p<0.05); time %.0fs",
                  o.prompts, base.eval.K, gold, hs, st.wins, st.losses, st.p_value, secs)};
}

Outcome rerank_trend(const Options& o) {
  const auto t0 = std::chrono::steady_clock::now();
  auto c = recall_setup(o, "rerank");
  c.inputs.model = trained_model(c).string();
  const auto corpus = load_corpus(c);
  const auto judge = make_judge(c, "oracle", corpus.vocab);
  const auto lm = load_model(c.inputs.model);
  std::vector<double> rates;
  std::string curve;
  for (int beam : {1, 5, 10, 20}) {
    auto bc = c;
    bc.decode.rerank = true;
    bc.decode.decode.beam_size = beam;
    const auto run = self_talk_run(bc, lm.model, corpus, *judge, judge.get());
    rates.push_back(coherence_rate(run.transcripts, c.eval.K - 1));
    curve += fmt("%s%d:%.3f", curve.empty() ? "" : " ", beam, rates.back());
  }
  const bool monotone = std::is_sorted(rates.begin(), rates.end());
  const double gain = 100.0 * (rates.back() - rates.front());
  return {monotone && gain >= 10.0,
          fmt("c_10 by beam %s; %s; beam 20 - beam 1 = %+.1f points (need >= 10); time %.0fs", curve.c_str(),
              monotone ? "non-decreasing" : "not monotone", gain, seconds_since(t0))};
}

// A shorter-memory setup: four topics with lingering and partial restating,
// one training epoch, leaving the MLE model room to improve.
ExperimentConfig rl_setup(const Options& o) {
  ExperimentConfig c;
  c.seed = o.seed;
  c.output_dir = o.work_dir.string();
  c.run_name = "rl_base";
  c.corpus.synthetic = {.dialogues = 300, .topics = 4, .stay_prob = 0.2, .cycle = true, .reassert_prob = 0.6,
                        .seed = 1};
  c.epochs = 1;
  c.rl.rl.beta = 0.05;
  c.rl.rl.rollouts_per_update = 64;
  c.rl.rl.optimizer.lr = 1e-3;
  c.rl.rl.max_length = 10;
  c.rl.rl.iterations = 50;
  return c;
}

Outcome rl_trend(const Options& o) {
  const auto t0 = std::chrono::steady_clock::now();
  auto c = rl_setup(o);
  c.inputs.model = trained_model(c).string();
  c.run_name = "rl_finetune";
  const auto dir = make_run_dir(c, "rl-finetune");
  const auto s = stage_rl_finetune(c, dir);
  const double before = s.at("coherence_before"), after = s.at("coherence_after");
  std::vector<double> rollout_coh;
  std::ifstream log(dir / "rl_log.jsonl");
  for (std::string line; std::getline(log, line);) rollout_coh.push_back(nlohmann::json::parse(line).at("mean_coherence"));
  const auto window = std::min<std::size_t>(5, rollout_coh.size());
  const double first = mean({rollout_coh.begin(), rollout_coh.begin() + static_cast<std::ptrdiff_t>(window)});
  const double last = mean({rollout_coh.end() - static_cast<std::ptrdiff_t>(window), rollout_coh.end()});
  return {after - before >= 0.1,
          fmt("%d iterations, beta %.2f: held-out sampled coherence %.3f -> %.3f (%+.3f, need >= 0.1); "
              "rollout mean first/last 5 iterations %.3f -> %.3f; time %.0fs",
              c.rl.rl.iterations, c.rl.rl.beta, before, after, after - before, first, last, seconds_since(t0))};
}

// -- determinism --------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome determinism(const Options& o) {
  ExperimentConfig c;
  c.seed = o.seed + 11;
  c.output_dir = (o.work_dir / "determinism").string();
  c.corpus.synthetic.dialogues = 40;
  c.corpus.synthetic_test_dialogues = 12;
  c.model.width = 16;
  c.model.ffn_width = 32;
  c.epochs = 1;
  c.sampling.mode = SamplingMode::hierarchical;
  c.eval.D = 12;
  c.decode.decode.strategy = DecodeStrategy::sample;

  // first run, then a replay from each snapshot
  c.run_name = "train_a";
  const auto train_a = make_run_dir(c, "train");
  stage_train(c, train_a);
  auto replay = load_experiment(train_a / "config.json");
  replay.run_name = "train_b";
  const auto train_b = make_run_dir(replay, "train");
  stage_train(replay, train_b);
  const bool model_same = slurp(train_a / "model.bin") == slurp(train_b / "model.bin");

  auto st = c;
  st.inputs.model = (train_a / "model.bin").string();
  st.run_name = "talk_a";
  const auto talk_a = make_run_dir(st, "self-talk");
  stage_self_talk(st, talk_a);
  auto st_replay = load_experiment(talk_a / "config.json");
  st_replay.run_name = "talk_b";
  const auto talk_b = make_run_dir(st_replay, "self-talk");
  stage_self_talk(st_replay, talk_b);
  const bool transcripts_same = slurp(talk_a / "transcripts.jsonl") == slurp(talk_b / "transcripts.jsonl");
  const bool metrics_same = slurp(talk_a / "metrics.json") == slurp(talk_b / "metrics.json");
  const bool eval_same = stage_eval(talk_a).identical;
  const bool ok = model_same && transcripts_same && metrics_same && eval_same;
  auto word = [](bool b) { return b ? "identical" : "DIFFER"; };
  return {ok, fmt("replayed from config snapshots: model %s, transcripts %s, metrics %s, eval recompute %s",
                  word(model_same), word(transcripts_same), word(metrics_same), word(eval_same))};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria for the dialogue-coherence pipeline"};
  Options o;
  std::vector<std::string> only, expect_fail;
  std::string work_dir = o.work_dir.string();
  app.add_option("--only", only, "run just these criteria");
  app.add_option("--expect-fail", expect_fail, "criteria known not to hold on this setup");
  app.add_option("--work-dir", work_dir, "scratch directory for trained models and runs");
  app.add_option("--prompts", o.prompts, "self-talk prompts for the trend checks")->check(CLI::Range(1, 100000));
  app.add_option("--seed", o.seed, "experiment seed for trend and replay runs");
  CLI11_PARSE(app, argc, argv);
  o.work_dir = work_dir;

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"sampler_law", sampler_law},
      {"metric_oracles", metric_oracles},
      {"model_math", model_math},
      {"rl_math", rl_math},
      {"decoding", decoding},
      {"hs_trend", [&] { return hs_trend(o); }},
      {"rerank_trend", [&] { return rerank_trend(o); }},
      {"rl_trend", [&] { return rl_trend(o); }},
      {"determinism", [&] { return determinism(o); }},
  };
  std::set<std::string> known;
  for (const auto& [name, fn] : criteria) known.insert(name);
  for (const auto& n : only)
    if (!known.count(n)) return std::cerr << "unknown criterion " << n << "\n", 1;
  for (const auto& n : expect_fail)
    if (!known.count(n)) return std::cerr << "unknown criterion " << n << "\n", 1;

  fs::create_directories(o.work_dir);
  int surprises = 0;
  for (const auto& [name, fn] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    const bool expected_fail = std::find(expect_fail.begin(), expect_fail.end(), name) != expect_fail.end();
    Outcome r;
    try {
      r = fn();
    } catch (const std::exception& e) {
      r = {false, std::string("error: ") + e.what()};
    }
    std::string note;
    if (expected_fail) note = r.pass ? " [expected to fail but passed]" : " [known failure]";
    surprises += r.pass == expected_fail;
    std::cout << (r.pass ? "PASS " : "FAIL ") << name << ": " << r.detail << note << std::endl;
  }
  return surprises == 0 ? 0 : 1;
}
