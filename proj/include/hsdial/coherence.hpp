#pragma once

// Coherence judges: a binary scorer over (context, response) used as RL
// reward, re-ranking score and evaluation judge.

#include "hsdial/corpus.hpp"
#include "hsdial/model.hpp"
#include "hsdial/training.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace hsdial {

enum class CoherenceLabel { coherent, contradiction };

std::string to_string(CoherenceLabel l);
CoherenceLabel coherence_label_from_string(std::string_view s);

struct CoherenceScore {
  double p_coherent = 0.0;
  CoherenceLabel label = CoherenceLabel::contradiction;
};

struct CoherenceExample {
  DialogueContext context;
  Utterance response;
  CoherenceLabel label = CoherenceLabel::coherent;
};

class CoherenceClassifier {
 public:
  explicit CoherenceClassifier(double threshold = 0.5) : threshold_(threshold) {}
  virtual ~CoherenceClassifier() = default;

  virtual double p_coherent(const DialogueContext& context, const Utterance& response) const = 0;

  CoherenceScore score(const DialogueContext& context, const Utterance& response) const;
  double threshold() const { return threshold_; }
  void set_threshold(double t) { threshold_ = t; }

 private:
  double threshold_;
};

/// Scores `response` against a one-utterance context holding `utterance`.
CoherenceScore score_against_single_utterance(const CoherenceClassifier& clf, const Utterance& utterance,
                                              const Utterance& response);

/// Returns the same probability for every pair.
class ConstantClassifier : public CoherenceClassifier {
 public:
  explicit ConstantClassifier(double p) : p_(p) {}
  double p_coherent(const DialogueContext&, const Utterance&) const override { return p_; }

 private:
  double p_;
};

class FunctionClassifier : public CoherenceClassifier {
 public:
  using Fn = std::function<double(const DialogueContext&, const Utterance&)>;
  explicit FunctionClassifier(Fn fn) : fn_(std::move(fn)) {}
  double p_coherent(const DialogueContext& c, const Utterance& r) const override { return fn_(c, r); }

 private:
  Fn fn_;
};

/// Fact token "+name" / "-name" decoded from the vocabulary.
struct FactToken {
  int fact = -1;
  bool positive = true;
};

/// Maps vocabulary ids to fact assertions; surfaces "+x" and "-x" for the
/// same x share a fact index.
class FactLexicon {
 public:
  FactLexicon() = default;
  explicit FactLexicon(const Vocabulary& vocab);

  std::optional<FactToken> lookup(TokenId id) const;
  std::size_t fact_count() const { return names_.size(); }
  const std::string& fact_name(int fact) const { return names_.at(static_cast<std::size_t>(fact)); }
  /// Token id for a (fact, polarity) pair, if present in the vocabulary.
  std::optional<TokenId> token(int fact, bool positive) const;

 private:
  std::unordered_map<TokenId, FactToken> by_id_;
  std::vector<std::string> names_;
  std::vector<std::pair<std::optional<TokenId>, std::optional<TokenId>>> tokens_;
};

/// Exact judge for keyword-chain dialogues: a response contradicts when it
/// asserts a fact with the opposite polarity of that fact's latest prior
/// assertion (earlier assertions inside the response count as prior).
class KeywordOracle : public CoherenceClassifier {
 public:
  explicit KeywordOracle(FactLexicon lexicon) : lexicon_(std::move(lexicon)) {}

  double p_coherent(const DialogueContext& context, const Utterance& response) const override;
  const FactLexicon& lexicon() const { return lexicon_; }

 private:
  FactLexicon lexicon_;
};

// -- trainable encoder classifier ---------------------------------------------

inline constexpr int kClassifierFormatVersion = 1;

/// CLS + flatten(context) + SEP + response + SEP. Oldest context tokens go
/// first when over budget; response tokens are cut from the end only when the
/// response alone cannot fit. Speaker tags precede utterances when known.
std::vector<TokenId> format_classifier_input(const DialogueContext& context, const Utterance& response,
                                             std::size_t max_positions);

class EncoderClassifier : public CoherenceClassifier {
 public:
  EncoderClassifier(ModelConfig cfg, std::uint64_t seed, double threshold = 0.5);
  EncoderClassifier(const EncoderClassifier& other);
  EncoderClassifier& operator=(const EncoderClassifier& other);

  double p_coherent(const DialogueContext& context, const Utterance& response) const override;

  /// Differentiable log p(label | input) (1x1).
  ag::Var label_log_prob(ag::Tape& t, std::span<const TokenId> input, CoherenceLabel label) const;
  /// 1x2 logits, column 1 = coherent.
  ag::Var logits(ag::Tape& t, std::span<const TokenId> input) const;

  const ModelConfig& config() const { return cfg_; }
  ParameterList& parameters() { return params_; }
  const ParameterList& parameters() const { return params_; }

 private:
  void build(std::uint64_t seed);

  ModelConfig cfg_;
  ParameterList params_;
  ag::Var token_embedding_;
  std::unique_ptr<EncoderStack> encoder_;
  ag::Var head_w_;
  ag::Var head_b_;
};

struct ClassifierTrainConfig {
  int epochs = 5;
  std::size_t batch_size = 16;
  OptimizerConfig optimizer{.lr = 1e-3, .lr_decay = 1.0};
  std::uint64_t seed = 0;
};

struct ClassifierTrainReport {
  std::vector<double> dev_accuracy;  // per epoch
  std::vector<double> train_loss;    // per epoch
  int best_epoch = 0;                // 0-based
  double best_dev_accuracy = 0.0;
};

double accuracy(const CoherenceClassifier& clf, std::span<const CoherenceExample> examples);

/// Trains and returns the checkpoint with the best dev accuracy (earliest on ties).
EncoderClassifier train_classifier(EncoderClassifier init, std::span<const CoherenceExample> train,
                                   std::span<const CoherenceExample> dev, const ClassifierTrainConfig& cfg,
                                   ClassifierTrainReport* report = nullptr);

void save_classifier(const std::filesystem::path& path, const EncoderClassifier& clf, const Vocabulary& vocab);
struct LoadedClassifier {
  EncoderClassifier classifier;
  Vocabulary vocab;
};
LoadedClassifier load_classifier(const std::filesystem::path& path);

/// DECODE-style records: {"context": [...], "response": "...", "label": ...}.
std::vector<CoherenceExample> parse_coherence_examples(std::string_view jsonl, const Tokenizer& tok);
std::vector<CoherenceExample> load_coherence_examples(const std::filesystem::path& path, const Tokenizer& tok);
std::string serialize_coherence_examples(std::span<const CoherenceExample> examples, const Tokenizer& tok);

}  // namespace hsdial
