#include "hsdial/model.hpp"

#include <cmath>
#include <numeric>

namespace hsdial {

namespace {

ag::Matrix gaussian(Eigen::Index r, Eigen::Index c, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, stddev);
  ag::Matrix m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = nd(rng);
  return m;
}

ag::Var add_param(ParameterList& ps, std::string name, ag::Matrix value) {
  auto v = ag::parameter(std::move(value));
  ps.push_back({std::move(name), v});
  return v;
}

ag::Var linear_weight(ParameterList& ps, std::string name, int in, int out, std::mt19937_64& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(in + out));
  return add_param(ps, std::move(name), gaussian(in, out, sd, rng));
}

ag::Var zeros(ParameterList& ps, std::string name, int r, int c) {
  return add_param(ps, std::move(name), ag::Matrix::Zero(r, c));
}

std::vector<int> iota_ids(std::size_t n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

std::vector<double> DialogueModel::token_log_probs(const Encoding& enc, std::span<const TokenId> targets) const {
  std::vector<double> out;
  out.reserve(targets.size());
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const auto dist = step_distribution(enc, targets.subspan(0, t));
    out.push_back(std::log(dist.at(static_cast<std::size_t>(targets[t]))));
  }
  return out;
}

std::vector<TokenId> with_eos(std::span<const TokenId> response) {
  std::vector<TokenId> out(response.begin(), response.end());
  out.push_back(special::kEos);
  return out;
}

double sequence_log_prob(const DialogueModel& model, std::span<const TokenId> context,
                         std::span<const TokenId> targets) {
  const auto lp = model.token_log_probs(model.encode(context), targets);
  double s = 0.0;
  for (double v : lp) s += v;
  return s;
}

void zero_grads(ParameterList& params) {
  for (auto& p : params) p.var->zero_grad();
}

void copy_values(const ParameterList& from, ParameterList& to) {
  if (from.size() != to.size()) throw std::invalid_argument("copy_values: parameter count mismatch");
  for (std::size_t i = 0; i < from.size(); ++i) {
    const auto& a = from[i].var->value;
    auto& b = to[i].var->value;
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
      throw std::invalid_argument("copy_values: shape mismatch at " + from[i].name);
    }
    b = a;
  }
}

std::size_t parameter_count(const ParameterList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += static_cast<std::size_t>(p.var->value.size());
  return n;
}

// -- blocks ------------------------------------------------------------------

AttentionBlock::AttentionBlock(ParameterList& ps, const std::string& prefix, int width, std::mt19937_64& rng)
    : wq(linear_weight(ps, prefix + ".wq", width, width, rng)),
      bq(zeros(ps, prefix + ".bq", 1, width)),
      wk(linear_weight(ps, prefix + ".wk", width, width, rng)),
      bk(zeros(ps, prefix + ".bk", 1, width)),
      wv(linear_weight(ps, prefix + ".wv", width, width, rng)),
      bv(zeros(ps, prefix + ".bv", 1, width)),
      wo(linear_weight(ps, prefix + ".wo", width, width, rng)),
      bo(zeros(ps, prefix + ".bo", 1, width)) {}

ag::Var AttentionBlock::project_keys(ag::Tape& t, const ag::Var& src) const {
  return ag::add_row(t, ag::matmul(t, src, wk), bk);
}

ag::Var AttentionBlock::project_values(ag::Tape& t, const ag::Var& src) const {
  return ag::add_row(t, ag::matmul(t, src, wv), bv);
}

ag::Var AttentionBlock::operator()(ag::Tape& t, const ag::Var& x, const ag::Var& keys, const ag::Var& values,
                                   int heads, bool causal) const {
  auto q = ag::add_row(t, ag::matmul(t, x, wq), bq);
  auto a = ag::attention(t, q, keys, values, heads, causal);
  return ag::add_row(t, ag::matmul(t, a, wo), bo);
}

FeedForward::FeedForward(ParameterList& ps, const std::string& prefix, int width, int hidden, std::mt19937_64& rng)
    : w1(linear_weight(ps, prefix + ".w1", width, hidden, rng)),
      b1(zeros(ps, prefix + ".b1", 1, hidden)),
      w2(linear_weight(ps, prefix + ".w2", hidden, width, rng)),
      b2(zeros(ps, prefix + ".b2", 1, width)) {}

ag::Var FeedForward::operator()(ag::Tape& t, const ag::Var& x) const {
  auto h = ag::gelu(t, ag::add_row(t, ag::matmul(t, x, w1), b1));
  return ag::add_row(t, ag::matmul(t, h, w2), b2);
}

Norm::Norm(ParameterList& ps, const std::string& prefix, int width)
    : gamma(add_param(ps, prefix + ".gamma", ag::Matrix::Ones(1, width))),
      beta(zeros(ps, prefix + ".beta", 1, width)) {}

ag::Var Norm::operator()(ag::Tape& t, const ag::Var& x) const { return ag::layer_norm(t, x, gamma, beta); }

EncoderLayer::EncoderLayer(ParameterList& ps, const std::string& prefix, const ModelConfig& c,
                           std::mt19937_64& rng)
    : ln1(ps, prefix + ".ln1", c.width),
      attn(ps, prefix + ".attn", c.width, rng),
      ln2(ps, prefix + ".ln2", c.width),
      ffn(ps, prefix + ".ffn", c.width, c.ffn_width, rng) {}

ag::Var EncoderLayer::operator()(ag::Tape& t, const ag::Var& x, int heads) const {
  auto h = ln1(t, x);
  auto y = ag::add(t, x, attn(t, h, attn.project_keys(t, h), attn.project_values(t, h), heads, false));
  return ag::add(t, y, ffn(t, ln2(t, y)));
}

EncoderStack::EncoderStack(ParameterList& ps, const std::string& prefix, const ModelConfig& c,
                           const ag::Var& token_embedding, std::mt19937_64& rng)
    : cfg_(c),
      tokens_(token_embedding),
      positions_(add_param(ps, prefix + ".positions", gaussian(c.max_positions, c.width, 0.1, rng))),
      final_(ps, prefix + ".final_ln", c.width) {
  for (int l = 0; l < c.encoder_layers; ++l) {
    layers_.emplace_back(ps, prefix + ".layer" + std::to_string(l), c, rng);
  }
}

ag::Var EncoderStack::operator()(ag::Tape& t, std::span<const TokenId> ids) const {
  if (ids.empty()) throw LengthError("empty encoder input");
  if (ids.size() > static_cast<std::size_t>(cfg_.max_positions)) {
    throw LengthError("encoder input of " + std::to_string(ids.size()) + " tokens exceeds " +
                      std::to_string(cfg_.max_positions) + " positions; truncate the context first");
  }
  auto pos = iota_ids(ids.size());
  auto x = ag::add(t, ag::embed(t, tokens_, ids), ag::embed(t, positions_, pos));
  for (const auto& layer : layers_) x = layer(t, x, cfg_.heads);
  return final_(t, x);
}

// -- transformer -------------------------------------------------------------

Transformer::DecoderLayer::DecoderLayer(ParameterList& ps, const std::string& prefix, const ModelConfig& c,
                                        std::mt19937_64& rng)
    : ln1(ps, prefix + ".ln1", c.width),
      self_attn(ps, prefix + ".self", c.width, rng),
      ln2(ps, prefix + ".ln2", c.width),
      cross_attn(ps, prefix + ".cross", c.width, rng),
      ln3(ps, prefix + ".ln3", c.width),
      ffn(ps, prefix + ".ffn", c.width, c.ffn_width, rng) {}

Transformer::Transformer(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.vocab_size < special::kCount) throw std::invalid_argument("vocabulary smaller than the special set");
  if (cfg_.width % cfg_.heads != 0) throw std::invalid_argument("width must be divisible by heads");
  build(seed);
}

Transformer::Transformer(const Transformer& other) : cfg_(other.cfg_) {
  build(0);
  copy_values(other.params_, params_);
}

Transformer& Transformer::operator=(const Transformer& other) {
  if (this != &other) {
    cfg_ = other.cfg_;
    params_.clear();
    decoder_layers_.clear();
    build(0);
    copy_values(other.params_, params_);
  }
  return *this;
}

void Transformer::build(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  token_embedding_ = add_param(params_, "embed.tokens", gaussian(cfg_.vocab_size, cfg_.width, 0.1, rng));
  encoder_ = std::make_unique<EncoderStack>(params_, "enc", cfg_, token_embedding_, rng);
  decoder_positions_ = add_param(params_, "dec.positions", gaussian(cfg_.max_positions, cfg_.width, 0.1, rng));
  for (int l = 0; l < cfg_.decoder_layers; ++l) {
    decoder_layers_.emplace_back(params_, "dec.layer" + std::to_string(l), cfg_, rng);
  }
  decoder_final_ = std::make_unique<Norm>(params_, "dec.final_ln", cfg_.width);
  out_w_ = linear_weight(params_, "out.w", cfg_.width, cfg_.vocab_size, rng);
  out_b_ = zeros(params_, "out.b", 1, cfg_.vocab_size);
}

void Transformer::check_lengths(std::size_t context, std::size_t decoder) const {
  const auto maxp = static_cast<std::size_t>(cfg_.max_positions);
  if (context > maxp) {
    throw LengthError("context of " + std::to_string(context) + " tokens exceeds " + std::to_string(maxp) +
                      " positions; truncate the context first");
  }
  if (decoder > maxp) throw LengthError("decoder prefix exceeds max positions");
}

ag::Var Transformer::encode_var(ag::Tape& t, std::span<const TokenId> context) const {
  check_lengths(context.size(), 0);
  return (*encoder_)(t, context);
}

ag::Var Transformer::decode_logits(ag::Tape& t, const std::vector<ag::Var>& keys,
                                   const std::vector<ag::Var>& values,
                                   std::span<const TokenId> decoder_input) const {
  auto pos = iota_ids(decoder_input.size());
  auto y = ag::add(t, ag::embed(t, token_embedding_, decoder_input), ag::embed(t, decoder_positions_, pos));
  for (std::size_t l = 0; l < decoder_layers_.size(); ++l) {
    const auto& layer = decoder_layers_[l];
    auto h = layer.ln1(t, y);
    y = ag::add(t, y,
                layer.self_attn(t, h, layer.self_attn.project_keys(t, h), layer.self_attn.project_values(t, h),
                                cfg_.heads, true));
    y = ag::add(t, y, layer.cross_attn(t, layer.ln2(t, y), keys[l], values[l], cfg_.heads, false));
    y = ag::add(t, y, layer.ffn(t, layer.ln3(t, y)));
  }
  y = (*decoder_final_)(t, y);
  return ag::add_row(t, ag::matmul(t, y, out_w_), out_b_);
}

Encoding Transformer::encode(std::span<const TokenId> context) const {
  ag::Tape t(false);
  Encoding enc;
  enc.tokens.assign(context.begin(), context.end());
  auto h = encode_var(t, context);
  enc.hidden = h->value;
  for (const auto& layer : decoder_layers_) {
    enc.cross_keys.push_back(layer.cross_attn.project_keys(t, h)->value);
    enc.cross_values.push_back(layer.cross_attn.project_values(t, h)->value);
  }
  return enc;
}

StepDistribution Transformer::step_distribution(const Encoding& enc, std::span<const TokenId> prefix) const {
  check_lengths(enc.tokens.size(), prefix.size() + 1);
  ag::Tape t(false);
  std::vector<ag::Var> keys, values;
  for (std::size_t l = 0; l < decoder_layers_.size(); ++l) {
    keys.push_back(t.constant(enc.cross_keys[l]));
    values.push_back(t.constant(enc.cross_values[l]));
  }
  std::vector<TokenId> input;
  input.reserve(prefix.size() + 1);
  input.push_back(special::kBos);
  input.insert(input.end(), prefix.begin(), prefix.end());
  auto logits = decode_logits(t, keys, values, input);
  ag::Matrix last = logits->value.bottomRows(1);
  ag::Matrix p = ag::softmax_rows(last);
  return StepDistribution(p.data(), p.data() + p.size());
}

std::vector<double> Transformer::token_log_probs(const Encoding& enc, std::span<const TokenId> targets) const {
  if (targets.empty()) return {};
  check_lengths(enc.tokens.size(), targets.size());
  ag::Tape t(false);
  std::vector<ag::Var> keys, values;
  for (std::size_t l = 0; l < decoder_layers_.size(); ++l) {
    keys.push_back(t.constant(enc.cross_keys[l]));
    values.push_back(t.constant(enc.cross_values[l]));
  }
  std::vector<TokenId> input{special::kBos};
  input.insert(input.end(), targets.begin(), targets.end() - (targets.empty() ? 0 : 1));
  auto lp = ag::log_softmax_pick(t, decode_logits(t, keys, values, input), targets);
  return std::vector<double>(lp->value.data(), lp->value.data() + lp->value.size());
}

ag::Var Transformer::target_log_probs(ag::Tape& t, std::span<const TokenId> context,
                                      std::span<const TokenId> targets) const {
  if (targets.empty()) throw std::invalid_argument("empty target sequence");
  check_lengths(context.size(), targets.size());
  auto h = encode_var(t, context);
  std::vector<ag::Var> keys, values;
  for (const auto& layer : decoder_layers_) {
    keys.push_back(layer.cross_attn.project_keys(t, h));
    values.push_back(layer.cross_attn.project_values(t, h));
  }
  std::vector<TokenId> input{special::kBos};
  input.insert(input.end(), targets.begin(), targets.end() - 1);
  return ag::log_softmax_pick(t, decode_logits(t, keys, values, input), targets);
}

ag::Var Transformer::nll(ag::Tape& t, std::span<const TokenId> context, std::span<const TokenId> targets) const {
  return ag::scale(t, ag::sum(t, target_log_probs(t, context, targets)), -1.0);
}

}  // namespace hsdial
