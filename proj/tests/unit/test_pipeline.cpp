#include "hsdial/pipeline.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace hsdial;

TEST(ExperimentConfig, DefaultsRoundTrip) {
  const ExperimentConfig c;
  const auto j = to_json(c);
  EXPECT_EQ(to_json(experiment_from_json(j)), j);
  EXPECT_EQ(to_json(experiment_from_json(nlohmann::json::object())), j);
}

TEST(ExperimentConfig, PartialFileKeepsDefaults) {
  const auto c = experiment_from_json({{"sampling", {{"mode", "semi"}}}, {"eval", {{"D", 7}}}});
  EXPECT_EQ(c.sampling.mode, SamplingMode::semi);
  EXPECT_EQ(c.eval.D, 7u);
  EXPECT_EQ(c.eval.K, ExperimentConfig{}.eval.K);
}

TEST(ExperimentConfig, UnknownOrIllTypedKeysAreDataErrors) {
  EXPECT_THROW(experiment_from_json({{"modle", 1}}), DataError);
  EXPECT_THROW(experiment_from_json({{"sampling", {{"geo", 0.2}}}}), DataError);
  EXPECT_THROW(experiment_from_json({{"train", {{"epochs", "three"}}}}), DataError);
  EXPECT_THROW(experiment_from_json({{"sampling", {{"mode", "sideways"}}}}), DataError);
  EXPECT_THROW(experiment_from_json({{"sampling", {{"geo_p", 1.5}}}}), DataError);
  EXPECT_THROW(experiment_from_json({{"eval", {{"judge", "human"}}}}), DataError);
}

TEST(ExperimentConfig, DottedOverrides) {
  nlohmann::json j = nlohmann::json::object();
  apply_override(j, "sampling.mode", "hierarchical");
  apply_override(j, "rl.beta", "0.05");
  apply_override(j, "eval.beams", "[1, 3]");
  apply_override(j, "run_name", "123");
  const auto c = experiment_from_json(j);
  EXPECT_EQ(c.sampling.mode, SamplingMode::hierarchical);
  EXPECT_EQ(c.rl.rl.beta, 0.05);
  EXPECT_EQ(c.eval.beams, (std::vector<int>{1, 3}));
  EXPECT_EQ(c.run_name, "123");
  EXPECT_THROW(apply_override(j, "sampling.nope", "1"), DataError);
  EXPECT_THROW(apply_override(j, "sampling", "1"), DataError);
}

TEST(ExperimentConfig, StreamSeedsAreDistinctAndSeedDependent) {
  ExperimentConfig a, b;
  b.seed = 1;
  std::set<std::uint64_t> seen;
  for (auto s : {Stream::model_init, Stream::train_order, Stream::sampling, Stream::classifier, Stream::rl,
                 Stream::self_talk, Stream::figures}) {
    seen.insert(stream_seed(a, s));
    EXPECT_NE(stream_seed(a, s), stream_seed(b, s));
  }
  EXPECT_EQ(seen.size(), 7u);
}

TEST(Pipeline, SyntheticCorpusAndPrompts) {
  ExperimentConfig c;
  c.corpus.synthetic.dialogues = 5;
  c.corpus.synthetic_test_dialogues = 3;
  const auto corpus = load_corpus(c);
  EXPECT_EQ(corpus.train.size(), 5u);
  EXPECT_EQ(corpus.test.size(), 3u);
  EXPECT_NE(corpus.train.front(), corpus.test.front());
  const WhitespaceTokenizer tok(corpus.vocab);
  EXPECT_EQ(corpus_pairs(corpus.train, tok).size(), 5u * 11u);
  const auto prompts = corpus_prompts(corpus.test, tok, 3);
  EXPECT_EQ(prompts[0].speaker, Speaker::human);
  EXPECT_THROW(corpus_prompts(corpus.test, tok, 4), DataError);
}

TEST(Pipeline, JudgeKinds) {
  ExperimentConfig c;
  const Vocabulary v({"+f1", "-f1"});
  EXPECT_NE(dynamic_cast<KeywordOracle*>(make_judge(c, "oracle", v).get()), nullptr);
  EXPECT_THROW(make_judge(c, "classifier", v), DataError);
}
