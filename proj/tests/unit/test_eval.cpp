#include "hsdial/eval.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

using namespace hsdial;

namespace {

SelfTalkTranscript with_labels(const std::vector<CoherenceLabel>& labels) {
  SelfTalkTranscript t;
  t.utterances.resize(labels.size() + 1);
  t.labels.assign(1, std::nullopt);
  for (auto l : labels) t.labels.emplace_back(l);
  return t;
}

ModelConfig small() {
  ModelConfig c;
  c.vocab_size = 14;
  c.width = 16;
  c.heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.ffn_width = 32;
  c.max_positions = 128;
  return c;
}

Utterance utt(std::vector<TokenId> tokens) { return {std::move(tokens), Speaker::unknown, Provenance::golden}; }

// Always emits EOS with probability one.
class SilentModel : public DialogueModel {
 public:
  std::size_t vocab_size() const override { return 9; }
  Encoding encode(std::span<const TokenId> c) const override { return {{c.begin(), c.end()}, {}, {}, {}}; }
  StepDistribution step_distribution(const Encoding&, std::span<const TokenId>) const override {
    StepDistribution d(9, 0.0);
    d[special::kEos] = 1.0;
    return d;
  }
};

const std::vector<double> kGoldenRow{99.7, 98.9, 98.2, 96.0, 97.6, 97.2, 96.0, 94.2, 94.1, 93.3};

}  // namespace

TEST(CoherenceRate, FourLabelsGiveHalf) {
  using L = CoherenceLabel;
  std::vector<SelfTalkTranscript> ts{with_labels({L::coherent}), with_labels({L::contradiction}),
                                     with_labels({L::coherent}), with_labels({L::contradiction})};
  EXPECT_EQ(coherence_rate(ts, 1), 0.5);
}

TEST(CoherenceRate, EmptyAndMissingLabelsThrow) {
  EXPECT_THROW(coherence_rate(std::vector<SelfTalkTranscript>{}, 1), std::invalid_argument);
  std::vector<SelfTalkTranscript> ts{with_labels({CoherenceLabel::coherent})};
  EXPECT_THROW(coherence_rate(ts, 2), std::invalid_argument);
}

TEST(CoherenceRate, MatchesBruteForceRecount) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const int D = 1 + static_cast<int>(rng() % 30), K = 2 + static_cast<int>(rng() % 10);
    std::vector<std::vector<int>> grid(static_cast<std::size_t>(D));
    std::vector<SelfTalkTranscript> ts;
    for (auto& row : grid) {
      std::vector<CoherenceLabel> labels;
      for (int k = 1; k < K; ++k) {
        row.push_back(static_cast<int>(rng() % 2));
        labels.push_back(row.back() ? CoherenceLabel::coherent : CoherenceLabel::contradiction);
      }
      ts.push_back(with_labels(labels));
    }
    const auto rates = coherence_rates(ts);
    ASSERT_EQ(rates.size(), static_cast<std::size_t>(K - 1));
    for (int k = 1; k < K; ++k) {
      int count = 0;
      for (const auto& row : grid) count += row[static_cast<std::size_t>(k - 1)];
      ASSERT_EQ(rates[static_cast<std::size_t>(k - 1)], static_cast<double>(count) / D);
    }
  }
}

TEST(Aggregate, MultiTurnRowAverage) {
  const std::vector<double> row{99.2, 96.5, 79.2, 67.7, 48.7};
  const auto a = aggregate(row);
  ASSERT_TRUE(a.avg_5);
  EXPECT_NEAR(*a.avg_5, 78.26, 1e-9);
  EXPECT_FALSE(a.avg_10);
}

TEST(Aggregate, GoldenRowAverage) {
  const auto a = aggregate(kGoldenRow);
  ASSERT_TRUE(a.avg_10);
  EXPECT_NEAR(*a.avg_10, 96.52, 1e-9);
  EXPECT_NEAR(*a.avg_10, 96.5, 0.05);
}

TEST(Aggregate, ConstantRates) {
  const std::vector<double> row(12, 0.37);
  const auto a = aggregate(row);
  EXPECT_NEAR(*a.avg_5, 0.37, 1e-15);
  EXPECT_NEAR(*a.avg_10, 0.37, 1e-15);
}

TEST(DistinctN, HandCounts) {
  const std::vector<TokenId> abab{8, 9, 8, 9};
  EXPECT_EQ(*distinct_n(abab, 1), 0.5);
  EXPECT_NEAR(*distinct_n(abab, 2), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(*distinct_n(std::vector<TokenId>{8, 9, 10, 11}, 3), 1.0);
  EXPECT_FALSE(distinct_n(abab, 5));
  EXPECT_THROW(distinct_n(abab, 0), std::invalid_argument);
}

TEST(DistinctN, MatchesBruteForceOnRandomSequences) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<TokenId> seq(1 + rng() % 40);
    const auto alphabet = 1 + rng() % 6;
    for (auto& t : seq) t = static_cast<TokenId>(8 + rng() % alphabet);
    for (int n = 1; n <= 3; ++n) {
      const auto got = distinct_n(seq, n);
      if (seq.size() < static_cast<std::size_t>(n)) {
        ASSERT_FALSE(got);
        continue;
      }
      // List of n-grams and the number of first occurrences within it.
      std::vector<std::vector<TokenId>> grams;
      for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= seq.size(); ++i)
        grams.emplace_back(seq.begin() + static_cast<std::ptrdiff_t>(i), seq.begin() + static_cast<std::ptrdiff_t>(i) + n);
      std::size_t unique = 0;
      for (std::size_t i = 0; i < grams.size(); ++i)
        if (std::find(grams.begin(), grams.begin() + static_cast<std::ptrdiff_t>(i), grams[i]) ==
            grams.begin() + static_cast<std::ptrdiff_t>(i))
          ++unique;
      ASSERT_EQ(*got, static_cast<double>(unique) / static_cast<double>(grams.size()));
    }
  }
}

TEST(DistinctN, TranscriptIncludesPrompt) {
  SelfTalkTranscript t;
  t.utterances = {utt({8, 9}), utt({8, 9})};
  EXPECT_EQ(*distinct_n(t, 1), 0.5);
  EXPECT_NEAR(*distinct_n(t, 2), 2.0 / 3.0, 1e-15);
}

TEST(Perplexity, MatchesManualMeanNll) {
  const Transformer m(small(), 5);
  std::vector<TrainingPair> pairs;
  std::mt19937_64 rng(2);
  for (int i = 0; i < 6; ++i) {
    TrainingPair p;
    p.context.utterances.push_back(utt({static_cast<TokenId>(8 + rng() % 6), 9}));
    p.response = utt({static_cast<TokenId>(8 + rng() % 6), static_cast<TokenId>(8 + rng() % 6)});
    pairs.push_back(p);
  }
  double nll = 0.0;
  std::size_t n = 0;
  for (const auto& p : pairs) {
    const auto target = with_eos(p.response.tokens);
    for (double lp : m.token_log_probs(m.encode(p.context.flatten()), target)) nll -= lp;
    n += target.size();
  }
  EXPECT_NEAR(perplexity(m, pairs), std::exp(nll / static_cast<double>(n)), 1e-9);
}

TEST(Perplexity, CertainModelIsOne) {
  SilentModel m;
  std::vector<TrainingPair> pairs(3);
  for (auto& p : pairs) p.context.utterances.push_back(utt({8}));
  EXPECT_EQ(perplexity(m, pairs), 1.0);
  EXPECT_THROW(perplexity(m, std::vector<TrainingPair>{}), std::invalid_argument);
}

TEST(ContradictionByTurn, CoherentStubGivesZeros) {
  SelfTalkTranscript t;
  for (int i = 0; i < 11; ++i) t.utterances.push_back(utt({8}));
  const ConstantClassifier yes(1.0);
  const auto rates = contradiction_by_turn(std::vector<SelfTalkTranscript>{t}, yes);
  EXPECT_EQ(rates, std::vector<double>(10, 0.0));
}

TEST(ContradictionByTurn, ConstructedCaseHitsTurnThree) {
  Vocabulary vocab({"+f1", "-f1", "+f2", "-f2", "w0"});
  WhitespaceTokenizer tok(vocab);
  const KeywordOracle oracle{FactLexicon(vocab)};
  SelfTalkTranscript t;
  for (int i = 0; i < 11; ++i) t.utterances.push_back(utt(tok.encode("w0")));
  t.utterances[0] = utt(tok.encode("+f1 w0"));
  t.utterances[2] = utt(tok.encode("+f2"));
  t.utterances[5] = utt(tok.encode("w0 +f1"));
  t.utterances[10] = utt(tok.encode("-f2 w0 +f1"));
  const auto rates = contradiction_by_turn(std::vector<SelfTalkTranscript>{t, t}, oracle);
  std::vector<double> expected(10, 0.0);
  expected[2] = 100.0;
  EXPECT_EQ(rates, expected);
  t.utterances.pop_back();
  EXPECT_THROW(contradiction_by_turn(std::vector<SelfTalkTranscript>{t}, oracle), std::invalid_argument);
}

TEST(ContradictionByTurn, IsOneMinusCoherenceTimesHundred) {
  SelfTalkTranscript t;
  for (int i = 0; i < 4; ++i) t.utterances.push_back(utt({static_cast<TokenId>(8 + i)}));
  const FunctionClassifier clf([](const DialogueContext& c, const Utterance&) {
    return 0.1 * static_cast<double>(c.utterances.front().tokens.front() - 7);
  });
  const auto rates = contradiction_by_turn(std::vector<SelfTalkTranscript>{t}, clf, 3);
  ASSERT_EQ(rates.size(), 3u);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(rates[static_cast<std::size_t>(k)], 100.0 * (1.0 - 0.1 * (k + 1)), 1e-9);
}

TEST(Pearson, Examples) {
  const std::vector<double> x{1, 2, 3, 4}, neg{-1, -2, -3, -4};
  EXPECT_NEAR(*pearson(x, x), 1.0, 1e-12);
  EXPECT_NEAR(*pearson(x, neg), -1.0, 1e-12);
  EXPECT_NEAR(*pearson(std::vector<double>{1, 2, 3}, std::vector<double>{2, 4, 6}), 1.0, 1e-12);
  EXPECT_FALSE(pearson(x, std::vector<double>(4, 2.0)));
  EXPECT_FALSE(pearson(std::vector<double>{1}, std::vector<double>{1}));
  EXPECT_THROW(pearson(x, std::vector<double>{1, 2}), std::invalid_argument);
}

TEST(SignTest, BinomialTail) {
  const std::vector<double> a{1, 1, 1, 1, 1}, b(5, 0.0);
  auto s = sign_test(a, b);
  EXPECT_EQ(s.wins, 5u);
  EXPECT_NEAR(s.p_value, 1.0 / 32.0, 1e-12);
  std::vector<double> x(10, 1.0), y(10, 0.0);
  y[0] = y[1] = 2.0;
  x.push_back(0.5);
  y.push_back(0.5);
  s = sign_test(x, y);
  EXPECT_EQ(s.wins, 8u);
  EXPECT_EQ(s.losses, 2u);
  EXPECT_EQ(s.ties, 1u);
  EXPECT_NEAR(s.p_value, 56.0 / 1024.0, 1e-12);
  EXPECT_EQ(sign_test(b, b).p_value, 1.0);
}

TEST(SelfTalk, TwoUtterancesMeansOneGeneratedTurn) {
  const Transformer m(small(), 1);
  DecodeConfig dc;
  dc.max_length = 5;
  const ConstantClassifier yes(1.0);
  const auto t = self_talk(model_responder(m, dc), utt({8, 9}), 2, 0, &yes);
  ASSERT_EQ(t.utterances.size(), 2u);
  EXPECT_FALSE(t.labels[0]);
  EXPECT_EQ(t.label(1), CoherenceLabel::coherent);
  EXPECT_EQ(t.utterances[1].provenance, Provenance::predicted);
}

TEST(SelfTalk, ResponderSeesOnlyThePrefix) {
  std::vector<std::size_t> seen;
  const Responder r = [&](const DialogueContext& c, std::mt19937_64&) {
    seen.push_back(c.utterances.size());
    return utt({static_cast<TokenId>(8 + c.utterances.size())});
  };
  const auto t = self_talk(r, utt({8}), 5, 1);
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3, 4}));
  EXPECT_EQ(t.utterances.size(), 5u);
  EXPECT_THROW(self_talk(r, utt({8}), 1, 1), std::invalid_argument);
}

TEST(SelfTalk, PrefixCausality) {
  const Transformer m(small(), 1);
  DecodeConfig dc;
  dc.strategy = DecodeStrategy::sample;
  dc.max_length = 6;
  const auto r = model_responder(m, dc);
  const auto full = self_talk(r, utt({8, 9}), 7, 42);
  const auto cut = self_talk(r, utt({8, 9}), 4, 42);
  for (std::size_t k = 0; k < cut.utterances.size(); ++k) EXPECT_EQ(full.utterances[k], cut.utterances[k]);
}

TEST(SelfTalk, FixedSeedReproducesAndWorkersAgree) {
  const Transformer m(small(), 1);
  DecodeConfig dc;
  dc.strategy = DecodeStrategy::sample;
  dc.max_length = 6;
  const auto r = model_responder(m, dc);
  std::vector<Utterance> prompts;
  for (TokenId t = 8; t < 14; ++t) prompts.push_back(utt({t, 9}));
  const ConstantClassifier yes(0.8);
  const auto a = run_self_talk(r, prompts, 4, 5, &yes, "m", 1);
  const auto b = run_self_talk(r, prompts, 4, 5, &yes, "m", 1);
  const auto c = run_self_talk(r, prompts, 4, 5, &yes, "m", 3);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    EXPECT_EQ(to_json(a.transcripts[i]), to_json(b.transcripts[i]));
    EXPECT_EQ(to_json(a.transcripts[i]), to_json(c.transcripts[i]));
  }
}

TEST(GoldenPrefix, OneGoldenTurnIsPlainSelfTalk) {
  const Transformer m(small(), 2);
  DecodeConfig dc;
  dc.strategy = DecodeStrategy::sample;
  dc.max_length = 5;
  const auto r = model_responder(m, dc);
  const ConstantClassifier yes(1.0);
  const std::vector<Utterance> golden{utt({8, 9}), utt({10})};
  const auto g = golden_prefix_talk(r, golden, 1, 5, 9, &yes);
  const auto s = self_talk(r, golden[0], 5, 9, &yes);
  ASSERT_TRUE(g);
  EXPECT_EQ(g->utterances, s.utterances);
  EXPECT_EQ(g->labels, s.labels);
}

TEST(GoldenPrefix, FullPrefixJudgesTheGoldenDialogue) {
  Vocabulary vocab({"+f1", "-f1", "w0"});
  WhitespaceTokenizer tok(vocab);
  const KeywordOracle oracle{FactLexicon(vocab)};
  const Responder never = [](const DialogueContext&, std::mt19937_64&) -> Utterance {
    throw std::logic_error("no generation expected");
  };
  const std::vector<Utterance> golden{utt(tok.encode("+f1")), utt(tok.encode("w0")), utt(tok.encode("-f1"))};
  const auto t = golden_prefix_talk(never, golden, 3, 3, 0, &oracle);
  ASSERT_TRUE(t);
  EXPECT_EQ(t->label(1), CoherenceLabel::coherent);
  EXPECT_EQ(t->label(2), CoherenceLabel::contradiction);
}

TEST(GoldenPrefix, ShortDialoguesAreSkippedAndCounted) {
  const Responder echo = [](const DialogueContext& c, std::mt19937_64&) { return c.utterances.back(); };
  const ConstantClassifier yes(1.0);
  const std::vector<std::vector<Utterance>> dialogues{{utt({8}), utt({9})}, {utt({8})}, {utt({8}), utt({9}), utt({10})}};
  const auto run = golden_prefix_run(echo, dialogues, 2, 4, yes, 1);
  EXPECT_EQ(run.skipped, 1u);
  EXPECT_EQ(run.transcripts.size(), 2u);
  EXPECT_EQ(run.curve, (std::vector<double>{1.0, 1.0, 1.0}));
}

TEST(Serialization, TranscriptRoundTrip) {
  Vocabulary vocab({"+f1", "-f1", "w0"});
  WhitespaceTokenizer tok(vocab);
  SelfTalkTranscript t;
  t.id = "x1";
  t.model_id = "hs";
  t.seed = 123456789012345ULL;
  t.utterances = {utt(tok.encode("+f1 w0")), utt(tok.encode("-f1"))};
  t.utterances[0].speaker = Speaker::human;
  t.utterances[1].provenance = Provenance::predicted;
  t.labels = {std::nullopt, CoherenceLabel::contradiction};
  t.p_coherent = {std::nullopt, 0.0};
  for (const Tokenizer* k : {static_cast<const Tokenizer*>(nullptr), static_cast<const Tokenizer*>(&tok)}) {
    const auto back = transcript_from_json(to_json(t, k), k);
    EXPECT_EQ(back.id, t.id);
    EXPECT_EQ(back.seed, t.seed);
    EXPECT_EQ(back.utterances, t.utterances);
    EXPECT_EQ(back.labels, t.labels);
    EXPECT_EQ(back.p_coherent, t.p_coherent);
  }
  const auto path = std::filesystem::temp_directory_path() / "hsdial_transcripts_test.jsonl";
  save_transcripts(path, std::vector<SelfTalkTranscript>{t, t}, &tok);
  const auto loaded = load_transcripts(path, &tok);
  ASSERT_EQ(loaded.size(), 2u);
  EXPECT_EQ(loaded[1].utterances, t.utterances);
  std::filesystem::remove(path);
}

TEST(Serialization, MetricsReportRoundTripIsExact) {
  using L = CoherenceLabel;
  std::vector<SelfTalkTranscript> ts;
  std::mt19937_64 rng(4);
  for (int i = 0; i < 7; ++i) {
    std::vector<L> labels;
    for (int k = 0; k < 10; ++k) labels.push_back(rng() % 3 ? L::coherent : L::contradiction);
    auto t = with_labels(labels);
    for (auto& u : t.utterances) u = utt({static_cast<TokenId>(8 + rng() % 5), static_cast<TokenId>(8 + rng() % 5)});
    ts.push_back(t);
  }
  auto r = compute_metrics(ts, "m");
  r.ppl = 3.14159;
  EXPECT_EQ(r.conversations, 7u);
  EXPECT_EQ(r.rates.size(), 10u);
  EXPECT_NEAR(*r.aggregates.avg_10, std::accumulate(r.rates.begin(), r.rates.end(), 0.0) / 10.0, 1e-15);
  const auto back = metrics_from_json(nlohmann::json::parse(to_json(r).dump()));
  EXPECT_EQ(to_json(back), to_json(r));
  EXPECT_EQ(back.rates, r.rates);
  EXPECT_EQ(back.distinct2, r.distinct2);
}

TEST(Csv, CurveRows) {
  const auto path = std::filesystem::temp_directory_path() / "hsdial_curve_test.csv";
  const std::vector<std::pair<int, double>> rows{{1, 0.5}, {2, 0.25}};
  write_curve_csv(path, rows);
  std::ifstream in(path);
  std::string a, b, c;
  std::getline(in, a);
  std::getline(in, b);
  std::getline(in, c);
  EXPECT_EQ(a, "turn,rate");
  EXPECT_EQ(b.substr(0, 4), "1,0.");
  EXPECT_EQ(std::stod(c.substr(2)), 0.25);
  std::filesystem::remove(path);
}
