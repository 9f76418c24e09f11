#include "hsdial/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace hsdial {

void AdamW::step(ParameterList& params, const OptimizerConfig& cfg, double lr) {
  if (first.size() != params.size()) {
    first.clear();
    second.clear();
    for (const auto& p : params) {
      first.push_back(ag::Matrix::Zero(p.var->value.rows(), p.var->value.cols()));
      second.push_back(ag::Matrix::Zero(p.var->value.rows(), p.var->value.cols()));
    }
  }
  ++steps;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(steps));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(steps));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& node = *params[i].var;
    if (node.grad.size() == 0) continue;
    first[i] = cfg.beta1 * first[i] + (1.0 - cfg.beta1) * node.grad;
    second[i] = cfg.beta2 * second[i] + (1.0 - cfg.beta2) * node.grad.cwiseProduct(node.grad);
    ag::Matrix update = (first[i] / c1).array() / ((second[i] / c2).array().sqrt() + cfg.eps);
    // decoupled decay on weight matrices only
    if (node.value.rows() > 1) update += cfg.weight_decay * node.value;
    node.value -= lr * update;
  }
}

TrainState::TrainState(Transformer m, TrainConfig c, std::uint64_t s)
    : model(std::move(m)), config(c), lr(c.optimizer.lr), seed(s), rng(s) {}

std::vector<TokenId> model_input(const DialogueContext& context, std::size_t max_input_tokens,
                                 std::size_t max_positions) {
  return truncate_context(context, std::min(max_input_tokens, max_positions)).flatten();
}

double accumulate_gradients(Transformer& model, std::span<const TrainingPair> batch,
                            std::span<const DialogueContext> contexts, std::size_t max_input_tokens) {
  const double inv = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ag::Tape t;
    const auto input = model_input(contexts[i], max_input_tokens, model.max_positions());
    const auto target = with_eos(batch[i].response.tokens);
    auto loss = model.nll(t, input, target);
    total += loss->value(0, 0);
    t.backward(ag::scale(t, loss, inv));
  }
  return total * inv;
}

namespace {

void clip_gradients(ParameterList& params, double max_norm) {
  if (max_norm <= 0) return;
  double sq = 0.0;
  for (const auto& p : params)
    if (p.var->grad.size()) sq += p.var->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params)
      if (p.var->grad.size()) p.var->grad *= s;
  }
}

}  // namespace

StepResult train_step(TrainState& state, std::span<const TrainingPair> batch, const ContextBuilder& builder) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  std::vector<DialogueContext> contexts;
  contexts.reserve(batch.size());
  for (const auto& p : batch) contexts.push_back(builder ? builder(p, state.rng) : p.context);
  auto& params = state.model.parameters();
  zero_grads(params);
  StepResult r;
  r.loss = accumulate_gradients(state.model, batch, contexts, state.config.max_input_tokens);
  if (!std::isfinite(r.loss)) return r;
  clip_gradients(params, state.config.optimizer.max_grad_norm);
  state.optimizer.step(params, state.config.optimizer, state.lr);
  zero_grads(params);
  ++state.step;
  return r;
}

EpochReport train_epoch(TrainState& state, std::span<const TrainingPair> pairs, const ContextBuilder& builder) {
  if (pairs.empty()) throw std::invalid_argument("train_epoch: no training pairs");
  const TrainState snapshot = state;
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), state.rng);

  EpochReport rep;
  rep.lr = state.lr;
  double weighted = 0.0;
  const std::size_t bs = std::max<std::size_t>(1, state.config.batch_size);
  std::vector<TrainingPair> batch;
  for (std::size_t b = 0; b < order.size(); b += bs) {
    batch.clear();
    for (std::size_t i = b; i < std::min(order.size(), b + bs); ++i) batch.push_back(pairs[order[i]]);
    const auto r = train_step(state, batch, builder);
    if (!std::isfinite(r.loss)) {
      state = snapshot;
      throw DivergenceError("training loss became non-finite at epoch " + std::to_string(snapshot.epoch) +
                            "; state restored to the start of the epoch");
    }
    weighted += r.loss * static_cast<double>(batch.size());
    rep.examples += batch.size();
    ++rep.steps;
  }
  rep.mean_loss = weighted / static_cast<double>(rep.examples);
  ++state.epoch;
  const int every = std::max(1, state.config.optimizer.decay_every);
  if (state.epoch % every == 0) state.lr *= state.config.optimizer.lr_decay;
  return rep;
}

// -- archives -----------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'H', 'S', 'D', 'L', 'A', 'R', 'C', 'H'};

template <typename T>
void put(std::ostream& o, T v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& i) {
  T v{};
  i.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!i) throw DataError("truncated checkpoint");
  return v;
}

std::string get_string(std::istream& i, std::size_t n) {
  std::string s(n, '\0');
  i.read(s.data(), static_cast<std::streamsize>(n));
  if (!i) throw DataError("truncated checkpoint");
  return s;
}

}  // namespace

const ag::Matrix& TensorArchive::tensor(const std::string& name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return m;
  throw DataError("checkpoint lacks tensor " + name);
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  std::ofstream o(path, std::ios::binary);
  if (!o) throw DataError("cannot write " + path.string());
  o.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(o, kCheckpointVersion);
  const std::string h = archive.header.dump();
  put<std::uint64_t>(o, h.size());
  o.write(h.data(), static_cast<std::streamsize>(h.size()));
  put<std::uint64_t>(o, archive.tensors.size());
  for (const auto& [name, m] : archive.tensors) {
    put<std::uint32_t>(o, static_cast<std::uint32_t>(name.size()));
    o.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint64_t>(o, static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(o, static_cast<std::uint64_t>(m.cols()));
    o.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  if (!o) throw DataError("failed writing " + path.string());
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream i(path, std::ios::binary);
  if (!i) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  i.read(magic, sizeof(magic));
  if (!i || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw DataError("not a checkpoint: " + path.string());
  const auto version = get<std::uint32_t>(i);
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  TensorArchive a;
  a.header = nlohmann::json::parse(get_string(i, get<std::uint64_t>(i)));
  const auto n = get<std::uint64_t>(i);
  for (std::uint64_t k = 0; k < n; ++k) {
    std::string name = get_string(i, get<std::uint32_t>(i));
    const auto r = get<std::uint64_t>(i);
    const auto c = get<std::uint64_t>(i);
    ag::Matrix m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    i.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!i) throw DataError("truncated checkpoint tensor " + name);
    a.tensors.emplace_back(std::move(name), std::move(m));
  }
  return a;
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},         {"width", c.width},
          {"heads", c.heads},                   {"encoder_layers", c.encoder_layers},
          {"decoder_layers", c.decoder_layers}, {"ffn_width", c.ffn_width},
          {"max_positions", c.max_positions}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.width = j.value("width", c.width);
  c.heads = j.value("heads", c.heads);
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
  c.ffn_width = j.value("ffn_width", c.ffn_width);
  c.max_positions = j.value("max_positions", c.max_positions);
  return c;
}

namespace {

nlohmann::json vocab_json(const Vocabulary& v) {
  return {{"surfaces", v.surfaces()}, {"hash", std::to_string(v.hash())}};
}

Vocabulary vocab_from_json(const nlohmann::json& j) {
  const auto surfaces = j.at("surfaces").get<std::vector<std::string>>();
  std::vector<std::string> rest(surfaces.begin() + std::min<std::size_t>(surfaces.size(), special::kCount),
                                surfaces.end());
  Vocabulary v(rest);
  if (std::to_string(v.hash()) != j.at("hash").get<std::string>()) {
    throw DataError("checkpoint vocabulary hash mismatch");
  }
  return v;
}

void load_params(const TensorArchive& a, ParameterList& params, const std::string& prefix = "") {
  for (auto& p : params) {
    const auto& m = a.tensor(prefix + p.name);
    if (m.rows() != p.var->value.rows() || m.cols() != p.var->value.cols()) {
      throw DataError("checkpoint tensor " + p.name + " has the wrong shape");
    }
    p.var->value = m;
  }
}

nlohmann::json optimizer_json(const OptimizerConfig& o) {
  return {{"lr", o.lr},
          {"beta1", o.beta1},
          {"beta2", o.beta2},
          {"eps", o.eps},
          {"weight_decay", o.weight_decay},
          {"lr_decay", o.lr_decay},
          {"decay_every", o.decay_every},
          {"max_grad_norm", o.max_grad_norm}};
}

OptimizerConfig optimizer_from_json(const nlohmann::json& j) {
  OptimizerConfig o;
  o.lr = j.value("lr", o.lr);
  o.beta1 = j.value("beta1", o.beta1);
  o.beta2 = j.value("beta2", o.beta2);
  o.eps = j.value("eps", o.eps);
  o.weight_decay = j.value("weight_decay", o.weight_decay);
  o.lr_decay = j.value("lr_decay", o.lr_decay);
  o.decay_every = j.value("decay_every", o.decay_every);
  o.max_grad_norm = j.value("max_grad_norm", o.max_grad_norm);
  return o;
}

}  // namespace

void save_model(const std::filesystem::path& path, const Transformer& model, const Vocabulary& vocab,
                const nlohmann::json& meta) {
  TensorArchive a;
  a.header = {{"kind", "seq2seq"}, {"model", to_json(model.config())}, {"vocab", vocab_json(vocab)}, {"meta", meta}};
  for (const auto& p : model.parameters()) a.tensors.emplace_back(p.name, p.var->value);
  write_archive(path, a);
}

LoadedModel load_model(const std::filesystem::path& path) {
  const auto a = read_archive(path);
  const auto kind = a.header.value("kind", std::string());
  if (kind != "seq2seq" && kind != "train_state") throw DataError(path.string() + " is not a seq2seq checkpoint");
  Transformer m(model_config_from_json(a.header.at("model")), 0);
  load_params(a, m.parameters());
  return {std::move(m), vocab_from_json(a.header.at("vocab")), a.header.value("meta", nlohmann::json::object())};
}

void save_train_state(const std::filesystem::path& path, const TrainState& s, const Vocabulary& vocab) {
  TensorArchive a;
  std::ostringstream rng;
  rng << s.rng;
  a.header = {{"kind", "train_state"},
              {"model", to_json(s.model.config())},
              {"vocab", vocab_json(vocab)},
              {"optimizer", optimizer_json(s.config.optimizer)},
              {"batch_size", s.config.batch_size},
              {"max_input_tokens", s.config.max_input_tokens},
              {"lr", s.lr},
              {"step", s.step},
              {"epoch", s.epoch},
              {"seed", s.seed},
              {"rng", rng.str()},
              {"adam_steps", s.optimizer.steps}};
  const auto& params = s.model.parameters();
  for (const auto& p : params) a.tensors.emplace_back(p.name, p.var->value);
  for (std::size_t i = 0; i < s.optimizer.first.size(); ++i) {
    a.tensors.emplace_back("adam.m/" + params[i].name, s.optimizer.first[i]);
    a.tensors.emplace_back("adam.v/" + params[i].name, s.optimizer.second[i]);
  }
  write_archive(path, a);
}

TrainState load_train_state(const std::filesystem::path& path, Vocabulary* vocab) {
  const auto a = read_archive(path);
  if (a.header.value("kind", std::string()) != "train_state") throw DataError(path.string() + " is not a train state");
  TrainConfig tc;
  tc.optimizer = optimizer_from_json(a.header.at("optimizer"));
  tc.batch_size = a.header.at("batch_size").get<std::size_t>();
  tc.max_input_tokens = a.header.at("max_input_tokens").get<std::size_t>();
  TrainState s(Transformer(model_config_from_json(a.header.at("model")), 0), tc,
               a.header.at("seed").get<std::uint64_t>());
  load_params(a, s.model.parameters());
  s.lr = a.header.at("lr").get<double>();
  s.step = a.header.at("step").get<std::uint64_t>();
  s.epoch = a.header.at("epoch").get<int>();
  std::istringstream rng(a.header.at("rng").get<std::string>());
  rng >> s.rng;
  s.optimizer.steps = a.header.at("adam_steps").get<std::uint64_t>();
  if (s.optimizer.steps > 0) {
    for (const auto& p : s.model.parameters()) {
      s.optimizer.first.push_back(a.tensor("adam.m/" + p.name));
      s.optimizer.second.push_back(a.tensor("adam.v/" + p.name));
    }
  }
  if (vocab) *vocab = vocab_from_json(a.header.at("vocab"));
  return s;
}

}  // namespace hsdial
