#include "hsdial/coherence.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace hsdial {

std::string to_string(CoherenceLabel l) {
  return l == CoherenceLabel::coherent ? "non-contradiction" : "contradiction";
}

CoherenceLabel coherence_label_from_string(std::string_view s) {
  if (s == "contradiction" || s == "non-coherent" || s == "0") return CoherenceLabel::contradiction;
  if (s == "non-contradiction" || s == "coherent" || s == "1") return CoherenceLabel::coherent;
  throw DataError("unknown coherence label: " + std::string(s));
}

CoherenceScore CoherenceClassifier::score(const DialogueContext& context, const Utterance& response) const {
  CoherenceScore s;
  s.p_coherent = std::clamp(p_coherent(context, response), 0.0, 1.0);
  s.label = s.p_coherent >= threshold_ ? CoherenceLabel::coherent : CoherenceLabel::contradiction;
  return s;
}

CoherenceScore score_against_single_utterance(const CoherenceClassifier& clf, const Utterance& utterance,
                                              const Utterance& response) {
  DialogueContext c;
  c.utterances.push_back(utterance);
  return clf.score(c, response);
}

// -- keyword oracle -----------------------------------------------------------

FactLexicon::FactLexicon(const Vocabulary& vocab) {
  std::map<std::string, int> index;
  for (std::size_t id = special::kCount; id < vocab.size(); ++id) {
    const auto& s = vocab.surface(static_cast<TokenId>(id));
    if (s.size() < 2 || (s[0] != '+' && s[0] != '-')) continue;
    const std::string name = s.substr(1);
    auto [it, inserted] = index.emplace(name, static_cast<int>(names_.size()));
    if (inserted) {
      names_.push_back(name);
      tokens_.emplace_back();
    }
    const bool pos = s[0] == '+';
    by_id_[static_cast<TokenId>(id)] = FactToken{it->second, pos};
    auto& slot = tokens_[static_cast<std::size_t>(it->second)];
    (pos ? slot.first : slot.second) = static_cast<TokenId>(id);
  }
}

std::optional<FactToken> FactLexicon::lookup(TokenId id) const {
  auto it = by_id_.find(id);
  if (it == by_id_.end()) return std::nullopt;
  return it->second;
}

std::optional<TokenId> FactLexicon::token(int fact, bool positive) const {
  if (fact < 0 || static_cast<std::size_t>(fact) >= tokens_.size()) return std::nullopt;
  const auto& slot = tokens_[static_cast<std::size_t>(fact)];
  return positive ? slot.first : slot.second;
}

double KeywordOracle::p_coherent(const DialogueContext& context, const Utterance& response) const {
  std::unordered_map<int, bool> latest;
  for (const auto& u : context.utterances)
    for (TokenId t : u.tokens)
      if (auto f = lexicon_.lookup(t)) latest[f->fact] = f->positive;
  for (TokenId t : response.tokens) {
    auto f = lexicon_.lookup(t);
    if (!f) continue;
    auto it = latest.find(f->fact);
    if (it != latest.end() && it->second != f->positive) return 0.0;
    latest[f->fact] = f->positive;
  }
  return 1.0;
}

// -- encoder classifier -------------------------------------------------------

std::vector<TokenId> format_classifier_input(const DialogueContext& context, const Utterance& response,
                                             std::size_t max_positions) {
  auto tagged = [](const Utterance& u) {
    std::vector<TokenId> out;
    if (u.speaker == Speaker::human) out.push_back(special::kHuman);
    if (u.speaker == Speaker::bot) out.push_back(special::kBot);
    out.insert(out.end(), u.tokens.begin(), u.tokens.end());
    return out;
  };
  std::vector<TokenId> ctx;
  for (std::size_t i = 0; i < context.utterances.size(); ++i) {
    if (i) ctx.push_back(special::kSep);
    auto u = tagged(context.utterances[i]);
    ctx.insert(ctx.end(), u.begin(), u.end());
  }
  auto resp = tagged(response);
  const std::size_t fixed = 3;  // CLS, SEP, SEP
  if (resp.size() + fixed > max_positions) {
    resp.resize(max_positions > fixed ? max_positions - fixed : 0);
    ctx.clear();
  } else if (ctx.size() + resp.size() + fixed > max_positions) {
    const std::size_t keep = max_positions - fixed - resp.size();
    ctx.erase(ctx.begin(), ctx.end() - static_cast<std::ptrdiff_t>(keep));
  }
  std::vector<TokenId> out;
  out.reserve(ctx.size() + resp.size() + fixed);
  out.push_back(special::kCls);
  out.insert(out.end(), ctx.begin(), ctx.end());
  out.push_back(special::kSep);
  out.insert(out.end(), resp.begin(), resp.end());
  out.push_back(special::kSep);
  return out;
}

EncoderClassifier::EncoderClassifier(ModelConfig cfg, std::uint64_t seed, double threshold)
    : CoherenceClassifier(threshold), cfg_(cfg) {
  build(seed);
}

EncoderClassifier::EncoderClassifier(const EncoderClassifier& other)
    : CoherenceClassifier(other.threshold()), cfg_(other.cfg_) {
  build(0);
  copy_values(other.params_, params_);
}

EncoderClassifier& EncoderClassifier::operator=(const EncoderClassifier& other) {
  if (this != &other) {
    set_threshold(other.threshold());
    cfg_ = other.cfg_;
    params_.clear();
    build(0);
    copy_values(other.params_, params_);
  }
  return *this;
}

void EncoderClassifier::build(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 0.1);
  ag::Matrix emb(cfg_.vocab_size, cfg_.width);
  for (Eigen::Index j = 0; j < emb.cols(); ++j)
    for (Eigen::Index i = 0; i < emb.rows(); ++i) emb(i, j) = nd(rng);
  token_embedding_ = ag::parameter(std::move(emb));
  params_.push_back({"embed.tokens", token_embedding_});
  encoder_ = std::make_unique<EncoderStack>(params_, "enc", cfg_, token_embedding_, rng);
  ag::Matrix w(cfg_.width, 2);
  const double sd = std::sqrt(2.0 / (cfg_.width + 2));
  std::normal_distribution<double> hd(0.0, sd);
  for (Eigen::Index j = 0; j < 2; ++j)
    for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = hd(rng);
  head_w_ = ag::parameter(std::move(w));
  head_b_ = ag::parameter(ag::Matrix::Zero(1, 2));
  params_.push_back({"head.w", head_w_});
  params_.push_back({"head.b", head_b_});
}

ag::Var EncoderClassifier::logits(ag::Tape& t, std::span<const TokenId> input) const {
  auto h = (*encoder_)(t, input);
  auto cls = ag::rows(t, h, 0, 1);
  return ag::add_row(t, ag::matmul(t, cls, head_w_), head_b_);
}

ag::Var EncoderClassifier::label_log_prob(ag::Tape& t, std::span<const TokenId> input, CoherenceLabel label) const {
  const int target = label == CoherenceLabel::coherent ? 1 : 0;
  return ag::log_softmax_pick(t, logits(t, input), std::span<const int>(&target, 1));
}

double EncoderClassifier::p_coherent(const DialogueContext& context, const Utterance& response) const {
  ag::Tape t(false);
  const auto input = format_classifier_input(context, response, static_cast<std::size_t>(cfg_.max_positions));
  const auto p = ag::softmax_rows(logits(t, input)->value);
  return p(0, 1);
}

double accuracy(const CoherenceClassifier& clf, std::span<const CoherenceExample> examples) {
  if (examples.empty()) return 0.0;
  std::size_t ok = 0;
  for (const auto& e : examples) ok += clf.score(e.context, e.response).label == e.label;
  return static_cast<double>(ok) / static_cast<double>(examples.size());
}

EncoderClassifier train_classifier(EncoderClassifier model, std::span<const CoherenceExample> train,
                                   std::span<const CoherenceExample> dev, const ClassifierTrainConfig& cfg,
                                   ClassifierTrainReport* report) {
  if (train.empty()) throw DataError("classifier training set is empty");
  const bool has_pos = std::any_of(train.begin(), train.end(),
                                   [](const auto& e) { return e.label == CoherenceLabel::coherent; });
  const bool has_neg = std::any_of(train.begin(), train.end(),
                                   [](const auto& e) { return e.label == CoherenceLabel::contradiction; });
  if (!has_pos || !has_neg) throw DataError("classifier training data contains a single class");

  const auto maxp = static_cast<std::size_t>(model.config().max_positions);
  std::vector<std::vector<TokenId>> inputs;
  inputs.reserve(train.size());
  for (const auto& e : train) inputs.push_back(format_classifier_input(e.context, e.response, maxp));

  std::mt19937_64 rng(cfg.seed);
  AdamW opt;
  double lr = cfg.optimizer.lr;
  ClassifierTrainReport rep;
  std::optional<EncoderClassifier> best;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  auto& params = model.parameters();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(end - b);
      zero_grads(params);
      for (std::size_t i = b; i < end; ++i) {
        ag::Tape t;
        auto lp = model.label_log_prob(t, inputs[order[i]], train[order[i]].label);
        loss_sum -= lp->value(0, 0);
        t.backward(ag::scale(t, lp, -inv));
      }
      opt.step(params, cfg.optimizer, lr);
      zero_grads(params);
    }
    lr *= cfg.optimizer.lr_decay;
    const double acc = accuracy(model, dev.empty() ? train : dev);
    rep.dev_accuracy.push_back(acc);
    rep.train_loss.push_back(loss_sum / static_cast<double>(train.size()));
    if (!best || acc > rep.best_dev_accuracy) {
      best = model;
      rep.best_dev_accuracy = acc;
      rep.best_epoch = epoch;
    }
  }
  if (report) *report = rep;
  return best ? *best : model;
}

void save_classifier(const std::filesystem::path& path, const EncoderClassifier& clf, const Vocabulary& vocab) {
  TensorArchive a;
  a.header = {{"kind", "coherence_classifier"},
              {"format_version", kClassifierFormatVersion},
              {"threshold", clf.threshold()},
              {"model", to_json(clf.config())},
              {"vocab", {{"surfaces", vocab.surfaces()}, {"hash", std::to_string(vocab.hash())}}}};
  for (const auto& p : clf.parameters()) a.tensors.emplace_back(p.name, p.var->value);
  write_archive(path, a);
}

LoadedClassifier load_classifier(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("classifier checkpoint not found: " + path.string());
  const auto a = read_archive(path);
  if (a.header.value("kind", std::string()) != "coherence_classifier") {
    throw DataError(path.string() + " is not a classifier checkpoint");
  }
  if (a.header.value("format_version", 0) != kClassifierFormatVersion) {
    throw DataError("unsupported classifier format version");
  }
  EncoderClassifier clf(model_config_from_json(a.header.at("model")), 0, a.header.at("threshold").get<double>());
  for (auto& p : clf.parameters()) p.var->value = a.tensor(p.name);
  const auto surfaces = a.header.at("vocab").at("surfaces").get<std::vector<std::string>>();
  Vocabulary v(std::vector<std::string>(surfaces.begin() + special::kCount, surfaces.end()));
  if (std::to_string(v.hash()) != a.header.at("vocab").at("hash").get<std::string>()) {
    throw DataError("classifier vocabulary hash mismatch");
  }
  return {std::move(clf), std::move(v)};
}

std::vector<CoherenceExample> parse_coherence_examples(std::string_view jsonl, const Tokenizer& tok) {
  std::vector<CoherenceExample> out;
  std::istringstream in{std::string(jsonl)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(std::string("malformed JSON: ") + e.what(), lineno);
    }
    if (!j.contains("context") || !j["context"].is_array() || !j.contains("response") || !j.contains("label")) {
      throw DataError("record needs context, response and label", lineno);
    }
    CoherenceExample e;
    for (const auto& c : j["context"]) {
      Utterance u;
      if (c.is_object()) {
        u.tokens = tok.encode(c.value("text", std::string()));
        u.speaker = speaker_from_string(c.value("speaker", std::string()));
      } else {
        u.tokens = tok.encode(c.get<std::string>());
      }
      if (u.tokens.empty()) throw DataError("empty context utterance", lineno);
      e.context.utterances.push_back(std::move(u));
    }
    e.response.tokens = tok.encode(j["response"].get<std::string>());
    if (e.response.tokens.empty()) throw DataError("empty response", lineno);
    try {
      e.label = coherence_label_from_string(j["label"].get<std::string>());
    } catch (const DataError& err) {
      throw DataError(err.what(), lineno);
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<CoherenceExample> load_coherence_examples(const std::filesystem::path& path, const Tokenizer& tok) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_coherence_examples(ss.str(), tok);
}

std::string serialize_coherence_examples(std::span<const CoherenceExample> examples, const Tokenizer& tok) {
  std::string out;
  for (const auto& e : examples) {
    nlohmann::json j;
    j["context"] = nlohmann::json::array();
    for (const auto& u : e.context.utterances) j["context"].push_back(tok.decode(u.tokens));
    j["response"] = tok.decode(e.response.tokens);
    j["label"] = to_string(e.label);
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace hsdial
