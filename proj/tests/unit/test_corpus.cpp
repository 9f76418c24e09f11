#include "hsdial/corpus.hpp"
#include "hsdial/synthetic.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <random>

using namespace hsdial;

namespace {

Utterance utt(std::size_t n, TokenId first = 10) {
  Utterance u;
  for (std::size_t i = 0; i < n; ++i) u.tokens.push_back(first + static_cast<TokenId>(i % 50));
  return u;
}

std::vector<Utterance> turns(int n) {
  std::vector<Utterance> out;
  for (int i = 0; i < n; ++i) out.push_back(utt(2, 10 + i));
  return out;
}

}  // namespace

TEST(Vocabulary, SpecialsAreDistinctAndReserved) {
  Vocabulary v;
  EXPECT_EQ(v.size(), static_cast<std::size_t>(special::kCount));
  std::set<std::string> seen(v.surfaces().begin(), v.surfaces().end());
  EXPECT_EQ(seen.size(), v.size());
  EXPECT_EQ(v.id("never-seen"), special::kUnk);
}

TEST(Vocabulary, BijectionAndDuplicatesIgnored) {
  Vocabulary v({"b", "a", "b", "c"});
  EXPECT_EQ(v.size(), special::kCount + 3u);
  for (std::size_t id = 0; id < v.size(); ++id) EXPECT_EQ(v.id(v.surface(static_cast<TokenId>(id))), static_cast<TokenId>(id));
  EXPECT_THROW(v.surface(static_cast<TokenId>(v.size())), std::out_of_range);
}

TEST(Tokenizer, RoundTripOnInVocabularyText) {
  WhitespaceTokenizer tok(Vocabulary({"hello", "there", "+f1"}));
  const std::string text = "hello there +f1 hello";
  EXPECT_EQ(tok.decode(tok.encode(text)), text);
  EXPECT_EQ(tok.encode("HELLO"), tok.encode("hello"));
  EXPECT_EQ(tok.encode("unknown")[0], special::kUnk);
}

TEST(LoadDialogues, JsonlTwoDialogues) {
  const std::string text =
      R"({"id":"a","topic":"t","turns":[{"speaker":"human","text":"w1"},{"speaker":"bot","text":"w2"},{"speaker":"human","text":"w3"},{"speaker":"bot","text":"w4"}]})"
      "\n"
      R"({"id":"b","turns":["x","y","z","q"]})"
      "\n";
  auto ds = parse_dialogues(text);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds[0].turns.size(), 4u);
  EXPECT_EQ(ds[1].turns.size(), 4u);
  EXPECT_EQ(ds[0].id, "a");
  EXPECT_EQ(ds[0].turns[1].speaker, Speaker::bot);
}

TEST(LoadDialogues, EmptyUtteranceRejectedWithLineNumber) {
  const std::string text = R"({"id":"a","turns":["x","y"]})"
                           "\n"
                           R"({"id":"b","turns":["x","   "]})"
                           "\n";
  try {
    parse_dialogues(text);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(LoadDialogues, MalformedJsonCarriesLine) {
  try {
    parse_dialogues("{\"id\":\"a\",\"turns\":[\"x\",\"y\"]}\n{not json\n");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(LoadDialogues, EmptyFileGivesEmptyList) {
  const auto path = std::filesystem::temp_directory_path() / "hsdial_empty.jsonl";
  { std::ofstream(path) << ""; }
  EXPECT_TRUE(load_dialogues(path).empty());
  std::filesystem::remove(path);
}

TEST(LoadDialogues, PlainTurns) {
  auto ds = parse_dialogues("human: a b\nbot: c\n\nx\ny\nz\n", DialogueFormat::plain_turns);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds[0].turns[0].speaker, Speaker::human);
  EXPECT_EQ(ds[0].turns[0].text, "a b");
  EXPECT_EQ(ds[1].turns.size(), 3u);
  EXPECT_THROW(parse_dialogues("lonely\n", DialogueFormat::plain_turns), DataError);
}

TEST(LoadDialogues, SyntheticRoundTrip) {
  SyntheticConfig sc;
  sc.dialogues = 20;
  sc.seed = 4;
  const auto ds = generate_synthetic_dialogues(sc);
  const auto path = std::filesystem::temp_directory_path() / "hsdial_synth.jsonl";
  save_dialogues(path, ds);
  EXPECT_EQ(load_dialogues(path), ds);
  std::filesystem::remove(path);
}

TEST(TrainingPairs, FullPolicy) {
  const auto ts = turns(4);
  const auto pairs = make_training_pairs(ts, ContextPolicy::full);
  ASSERT_EQ(pairs.size(), 3u);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    EXPECT_EQ(pairs[k].context.utterances.size(), k + 1);
    EXPECT_EQ(pairs[k].response, ts[k + 1]);
    for (std::size_t j = 0; j <= k; ++j) EXPECT_EQ(pairs[k].context.utterances[j], ts[j]);
  }
}

TEST(TrainingPairs, LastOnePolicy) {
  const auto ts = turns(4);
  const auto pairs = make_training_pairs(ts, ContextPolicy::last_one);
  ASSERT_EQ(pairs.size(), 3u);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    ASSERT_EQ(pairs[k].context.utterances.size(), 1u);
    EXPECT_EQ(pairs[k].context.utterances[0], ts[k]);
  }
}

TEST(TrainingPairs, ShortDialogues) {
  EXPECT_EQ(make_training_pairs(turns(2), ContextPolicy::full).size(), 1u);
  EXPECT_TRUE(make_training_pairs(turns(1), ContextPolicy::full).empty());
}

TEST(Flatten, SeparatorsRecoverBoundaries) {
  DialogueContext c{{utt(3, 10), utt(1, 20), utt(2, 30)}};
  const auto flat = c.flatten();
  EXPECT_EQ(flat.size(), c.flat_length());
  EXPECT_EQ(flat.size(), 3u + 1 + 2 + 2);
  const auto parts = split_flat(flat);
  ASSERT_EQ(parts.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(parts[i], c.utterances[i].tokens);
}

TEST(Truncate, ShortContextUnchanged) {
  DialogueContext c{{utt(3), utt(3), utt(4)}};
  EXPECT_EQ(truncate_context(c, 512), c);
}

TEST(Truncate, DropsWholeOldestUtterance) {
  DialogueContext c{{utt(300), utt(300), utt(100)}};
  const auto t = truncate_context(c, 512);
  ASSERT_EQ(t.utterances.size(), 2u);
  EXPECT_EQ(t.utterances[0].size(), 300u);
  EXPECT_EQ(t.utterances[1].size(), 100u);
}

TEST(Truncate, TrimsOldestTokensOfSoleUtterance) {
  DialogueContext c{{utt(600)}};
  const auto t = truncate_context(c, 512);
  ASSERT_EQ(t.utterances.size(), 1u);
  ASSERT_EQ(t.utterances[0].size(), 512u);
  EXPECT_TRUE(std::equal(t.utterances[0].tokens.begin(), t.utterances[0].tokens.end(),
                         c.utterances[0].tokens.begin() + 88));
}

TEST(Truncate, IdempotentAndBoundedOnRandomContexts) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    DialogueContext c;
    const int n = 1 + static_cast<int>(rng() % 6);
    for (int i = 0; i < n; ++i) c.utterances.push_back(utt(1 + rng() % 40));
    const std::size_t budget = 1 + rng() % 80;
    const auto t = truncate_context(c, budget);
    EXPECT_LE(t.flat_length(), budget);
    EXPECT_EQ(truncate_context(t, budget), t);
    ASSERT_FALSE(t.utterances.empty());
  }
}
