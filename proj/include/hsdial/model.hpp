#pragma once

// Encoder-decoder dialogue model.
//
// DialogueModel is the adapter boundary: decoding, evaluation and sampling code
// only needs encode() and step_distribution(). Transformer is the trainable
// desk-scale implementation; a pretrained backend can implement the same
// interface without touching callers.

#include "hsdial/autograd.hpp"
#include "hsdial/corpus.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace hsdial {

using StepDistribution = std::vector<double>;

/// Encoder output for one context. Backends may leave `hidden` empty.
struct Encoding {
  std::vector<TokenId> tokens;
  ag::Matrix hidden;
  // Per decoder layer cross-attention keys/values, computed once per context.
  std::vector<ag::Matrix> cross_keys;
  std::vector<ag::Matrix> cross_values;
};

class LengthError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DialogueModel {
 public:
  virtual ~DialogueModel() = default;

  virtual std::size_t vocab_size() const = 0;
  virtual std::size_t max_positions() const { return 1u << 20; }

  virtual Encoding encode(std::span<const TokenId> context) const = 0;
  /// p(. | context, prefix). `prefix` excludes BOS.
  virtual StepDistribution step_distribution(const Encoding& enc, std::span<const TokenId> prefix) const = 0;
  /// Teacher-forced log p(targets[t] | context, targets[<t]).
  virtual std::vector<double> token_log_probs(const Encoding& enc, std::span<const TokenId> targets) const;
};

/// Response tokens followed by EOS.
std::vector<TokenId> with_eos(std::span<const TokenId> response);

/// Sum of teacher-forced log-probs; `targets` normally ends in EOS.
double sequence_log_prob(const DialogueModel& model, std::span<const TokenId> context,
                         std::span<const TokenId> targets);

struct ModelConfig {
  int vocab_size = 0;
  int width = 64;
  int heads = 4;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int ffn_width = 256;
  int max_positions = 256;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct NamedParameter {
  std::string name;
  ag::Var var;
};

using ParameterList = std::vector<NamedParameter>;

void zero_grads(ParameterList& params);
/// Copies parameter values by position; shapes must agree.
void copy_values(const ParameterList& from, ParameterList& to);
std::size_t parameter_count(const ParameterList& params);

/// Pre-LN transformer sub-blocks shared by the seq2seq model and the classifier.
struct AttentionBlock {
  ag::Var wq, bq, wk, bk, wv, bv, wo, bo;
  AttentionBlock(ParameterList& ps, const std::string& prefix, int width, std::mt19937_64& rng);
  ag::Var project_keys(ag::Tape& t, const ag::Var& src) const;
  ag::Var project_values(ag::Tape& t, const ag::Var& src) const;
  ag::Var operator()(ag::Tape& t, const ag::Var& x, const ag::Var& keys, const ag::Var& values, int heads,
                     bool causal) const;
};

struct FeedForward {
  ag::Var w1, b1, w2, b2;
  FeedForward(ParameterList& ps, const std::string& prefix, int width, int hidden, std::mt19937_64& rng);
  ag::Var operator()(ag::Tape& t, const ag::Var& x) const;
};

struct Norm {
  ag::Var gamma, beta;
  Norm(ParameterList& ps, const std::string& prefix, int width);
  ag::Var operator()(ag::Tape& t, const ag::Var& x) const;
};

struct EncoderLayer {
  Norm ln1;
  AttentionBlock attn;
  Norm ln2;
  FeedForward ffn;
  EncoderLayer(ParameterList& ps, const std::string& prefix, const ModelConfig& c, std::mt19937_64& rng);
  ag::Var operator()(ag::Tape& t, const ag::Var& x, int heads) const;
};

/// Token + position embeddings followed by encoder layers and a final norm.
class EncoderStack {
 public:
  EncoderStack(ParameterList& ps, const std::string& prefix, const ModelConfig& c, const ag::Var& token_embedding,
               std::mt19937_64& rng);
  ag::Var operator()(ag::Tape& t, std::span<const TokenId> ids) const;

 private:
  ModelConfig cfg_;
  ag::Var tokens_;
  ag::Var positions_;
  std::vector<EncoderLayer> layers_;
  Norm final_;
};

class Transformer : public DialogueModel {
 public:
  Transformer(ModelConfig cfg, std::uint64_t seed);
  Transformer(const Transformer& other);
  Transformer& operator=(const Transformer& other);

  const ModelConfig& config() const { return cfg_; }
  ParameterList& parameters() { return params_; }
  const ParameterList& parameters() const { return params_; }

  std::size_t vocab_size() const override { return static_cast<std::size_t>(cfg_.vocab_size); }
  std::size_t max_positions() const override { return static_cast<std::size_t>(cfg_.max_positions); }
  Encoding encode(std::span<const TokenId> context) const override;
  StepDistribution step_distribution(const Encoding& enc, std::span<const TokenId> prefix) const override;
  std::vector<double> token_log_probs(const Encoding& enc, std::span<const TokenId> targets) const override;

  /// Differentiable per-token log-probs (Tx1) of `targets` given `context`.
  ag::Var target_log_probs(ag::Tape& t, std::span<const TokenId> context, std::span<const TokenId> targets) const;
  /// Differentiable -sum log p(targets | context).
  ag::Var nll(ag::Tape& t, std::span<const TokenId> context, std::span<const TokenId> targets) const;

 private:
  void build(std::uint64_t seed);
  ag::Var encode_var(ag::Tape& t, std::span<const TokenId> context) const;
  ag::Var decode_logits(ag::Tape& t, const std::vector<ag::Var>& keys, const std::vector<ag::Var>& values,
                        std::span<const TokenId> decoder_input) const;
  void check_lengths(std::size_t context, std::size_t decoder) const;

  struct DecoderLayer {
    Norm ln1;
    AttentionBlock self_attn;
    Norm ln2;
    AttentionBlock cross_attn;
    Norm ln3;
    FeedForward ffn;
    DecoderLayer(ParameterList& ps, const std::string& prefix, const ModelConfig& c, std::mt19937_64& rng);
  };

  ModelConfig cfg_;
  ParameterList params_;
  ag::Var token_embedding_;
  std::unique_ptr<EncoderStack> encoder_;
  ag::Var decoder_positions_;
  std::vector<DecoderLayer> decoder_layers_;
  std::unique_ptr<Norm> decoder_final_;
  ag::Var out_w_;
  ag::Var out_b_;
};

}  // namespace hsdial
