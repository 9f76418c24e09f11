#pragma once

// Maximum-likelihood training of the seq2seq model: AdamW with a per-epoch
// halving schedule, resumable train state, and the tensor archive used for
// every checkpoint in the project.

#include "hsdial/corpus.hpp"
#include "hsdial/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hsdial {

struct OptimizerConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  // lr is multiplied by lr_decay after every `decay_every` epochs.
  double lr_decay = 0.5;
  int decay_every = 1;
  // Global-norm gradient clip; <= 0 disables.
  double max_grad_norm = 1.0;
};

struct TrainConfig {
  OptimizerConfig optimizer;
  std::size_t batch_size = 32;
  std::size_t max_input_tokens = 512;
};

class AdamW {
 public:
  void step(ParameterList& params, const OptimizerConfig& cfg, double lr);

  std::vector<ag::Matrix> first;
  std::vector<ag::Matrix> second;
  std::uint64_t steps = 0;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainState {
  TrainState(Transformer model, TrainConfig config, std::uint64_t seed);

  Transformer model;
  TrainConfig config;
  AdamW optimizer;
  double lr;
  std::uint64_t step = 0;
  int epoch = 0;
  std::uint64_t seed;
  std::mt19937_64 rng;
};

/// Context actually fed to the encoder: truncated to the input budget and the
/// model's position limit, then flattened.
std::vector<TokenId> model_input(const DialogueContext& context, std::size_t max_input_tokens,
                                 std::size_t max_positions);

/// Per-example loss hook; receives the pair and returns the context to encode.
using ContextBuilder = std::function<DialogueContext(const TrainingPair&, std::mt19937_64&)>;

struct StepResult {
  double loss = 0.0;  // mean sequence NLL over the batch
};

/// Accumulates mean-over-batch NLL gradients into the model's parameters.
double accumulate_gradients(Transformer& model, std::span<const TrainingPair> batch,
                            std::span<const DialogueContext> contexts, std::size_t max_input_tokens);

/// One optimizer update on `batch`. `builder` (optional) rewrites contexts
/// before the loss; it runs before any gradient is recorded.
StepResult train_step(TrainState& state, std::span<const TrainingPair> batch, const ContextBuilder& builder = {});

struct EpochReport {
  double mean_loss = 0.0;
  std::size_t examples = 0;
  std::size_t steps = 0;
  double lr = 0.0;
};

/// Shuffles with the state's rng, runs train_step per batch, then applies the
/// lr schedule. A NaN loss restores the state from the start of the epoch and
/// throws DivergenceError.
EpochReport train_epoch(TrainState& state, std::span<const TrainingPair> pairs, const ContextBuilder& builder = {});

// -- checkpoints --------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorArchive {
  nlohmann::json header;
  std::vector<std::pair<std::string, ag::Matrix>> tensors;

  const ag::Matrix& tensor(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path);

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct LoadedModel {
  Transformer model;
  Vocabulary vocab;
  nlohmann::json meta;
};

void save_model(const std::filesystem::path& path, const Transformer& model, const Vocabulary& vocab,
                const nlohmann::json& meta = nlohmann::json::object());
LoadedModel load_model(const std::filesystem::path& path);

void save_train_state(const std::filesystem::path& path, const TrainState& state, const Vocabulary& vocab);
TrainState load_train_state(const std::filesystem::path& path, Vocabulary* vocab = nullptr);

}  // namespace hsdial
