#include "hsdial/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

namespace hsdial {

namespace fs = std::filesystem;

// -- config JSON --------------------------------------------------------------

namespace {

nlohmann::json model_json(const ModelConfig& m) {
  return {{"width", m.width},           {"heads", m.heads},         {"encoder_layers", m.encoder_layers},
          {"decoder_layers", m.decoder_layers}, {"ffn_width", m.ffn_width}, {"max_positions", m.max_positions}};
}

ModelConfig model_from(const nlohmann::json& j) {
  ModelConfig m;
  m.width = j.at("width");
  m.heads = j.at("heads");
  m.encoder_layers = j.at("encoder_layers");
  m.decoder_layers = j.at("decoder_layers");
  m.ffn_width = j.at("ffn_width");
  m.max_positions = j.at("max_positions");
  return m;
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

OptimizerConfig optimizer_from(const nlohmann::json& j) {
  OptimizerConfig o;
  o.lr = j.at("lr");
  o.beta1 = j.at("beta1");
  o.beta2 = j.at("beta2");
  o.eps = j.at("eps");
  o.weight_decay = j.at("weight_decay");
  o.lr_decay = j.at("lr_decay");
  o.decay_every = j.at("decay_every");
  o.max_grad_norm = j.at("max_grad_norm");
  return o;
}

nlohmann::json synthetic_json(const SyntheticConfig& s) {
  return {{"dialogues", s.dialogues},         {"turns", s.turns},
          {"topics", s.topics},               {"facts_per_topic", s.facts_per_topic},
          {"filler_words", s.filler_words},   {"min_filler", s.min_filler},
          {"max_filler", s.max_filler},       {"stay_prob", s.stay_prob},
          {"cycle", s.cycle},                 {"facts_per_turn", s.facts_per_turn},
          {"moods", s.moods},                 {"world_seed", s.world_seed},
          {"opening_facts", s.opening_facts}, {"reassert_prob", s.reassert_prob},
          {"seed", s.seed}};
}

SyntheticConfig synthetic_from(const nlohmann::json& j) {
  SyntheticConfig s;
  s.dialogues = j.at("dialogues");
  s.turns = j.at("turns");
  s.topics = j.at("topics");
  s.facts_per_topic = j.at("facts_per_topic");
  s.filler_words = j.at("filler_words");
  s.min_filler = j.at("min_filler");
  s.max_filler = j.at("max_filler");
  s.stay_prob = j.at("stay_prob");
  s.cycle = j.at("cycle");
  s.facts_per_turn = j.at("facts_per_turn");
  s.moods = j.at("moods");
  s.world_seed = j.at("world_seed");
  s.opening_facts = j.at("opening_facts");
  s.reassert_prob = j.at("reassert_prob");
  s.seed = j.at("seed");
  return s;
}

std::string schedule_name(ApplySchedule s) { return s == ApplySchedule::constant ? "constant" : "linear"; }

ApplySchedule schedule_from(const std::string& s) {
  if (s == "constant") return ApplySchedule::constant;
  if (s == "linear") return ApplySchedule::linear;
  throw DataError("unknown apply schedule: " + s);
}

// Enum parsers throw invalid_argument; configs report DataError.
template <typename Fn>
auto parse_enum(Fn fn, const nlohmann::json& j) {
  try {
    return fn(j.get<std::string>());
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("config: ") + e.what());
  }
}

void check_keys(const nlohmann::json& given, const nlohmann::json& known, const std::string& prefix) {
  if (!given.is_object()) throw DataError("config: " + (prefix.empty() ? std::string("root") : prefix) +
                                          " must be an object");
  for (const auto& [k, v] : given.items()) {
    const auto name = prefix.empty() ? k : prefix + "." + k;
    if (!known.contains(k)) throw DataError("config: unknown key " + name);
    if (known.at(k).is_object()) check_keys(v, known.at(k), name);
  }
}

}  // namespace

nlohmann::json to_json(const ExperimentConfig& c) {
  const auto& s = c.sampling;
  const auto& r = c.rl.rl;
  const auto& d = c.decode.decode;
  return {
      {"seed", c.seed},
      {"workers", c.workers},
      {"output_dir", c.output_dir},
      {"run_name", c.run_name},
      {"corpus",
       {{"dir", c.corpus.dir},
        {"train", c.corpus.train},
        {"test", c.corpus.test},
        {"format", c.corpus.format},
        {"test_fraction", c.corpus.test_fraction},
        {"coherence_examples", c.corpus.coherence_examples},
        {"synthetic", synthetic_json(c.corpus.synthetic)},
        {"synthetic_test_dialogues", c.corpus.synthetic_test_dialogues}}},
      {"model", model_json(c.model)},
      {"train",
       {{"epochs", c.epochs},
        {"batch_size", c.train.batch_size},
        {"max_input_tokens", c.train.max_input_tokens},
        {"optimizer", optimizer_json(c.train.optimizer)}}},
      {"sampling",
       {{"mode", to_string(s.mode)},
        {"geo_p", s.geo_p},
        {"i_max", s.i_max},
        {"apply_prob", s.apply_prob},
        {"schedule", schedule_name(s.schedule)},
        {"apply_prob_end", s.apply_prob_end},
        {"ramp_epochs", s.ramp_epochs},
        {"hier_mix", s.hier_mix},
        {"orientation", to_string(s.orientation)},
        {"semi_fraction", s.semi_fraction},
        {"extra_tokens", s.extra_tokens}}},
      {"classifier",
       {{"model", model_json(c.classifier.model)},
        {"epochs", c.classifier.train.epochs},
        {"batch_size", c.classifier.train.batch_size},
        {"optimizer", optimizer_json(c.classifier.train.optimizer)},
        {"threshold", c.classifier.threshold}}},
      {"rl",
       {{"beta", r.beta},
        {"kl_truncation", r.kl_truncation},
        {"clip_eps", r.clip_eps},
        {"rollouts_per_update", r.rollouts_per_update},
        {"ppo_epochs", r.ppo_epochs},
        {"iterations", r.iterations},
        {"objective", to_string(r.objective)},
        {"reward_clip", r.reward_clip},
        {"per_token", r.per_token},
        {"prob_floor", r.prob_floor},
        {"temperature", r.temperature},
        {"max_length", r.max_length},
        {"max_input_tokens", r.max_input_tokens},
        {"optimizer", optimizer_json(r.optimizer)},
        {"min_context_utterances", c.rl.min_context_utterances},
        {"eval_contexts", c.rl.eval_contexts},
        {"eval_samples", c.rl.eval_samples}}},
      {"decode",
       {{"strategy", to_string(d.strategy)},
        {"beam_size", d.beam_size},
        {"max_length", d.max_length},
        {"length_penalty", d.length_penalty},
        {"temperature", d.temperature},
        {"rerank", c.decode.rerank},
        {"reranker", c.decode.reranker}}},
      {"eval",
       {{"K", c.eval.K},
        {"D", c.eval.D},
        {"judge", c.eval.judge},
        {"beams", c.eval.beams},
        {"golden_prefix", c.eval.golden_prefix},
        {"probe_turn", c.eval.probe_turn}}},
      {"serve",
       {{"host", c.serve.host},
        {"port", c.serve.port},
        {"registry", c.serve.registry},
        {"store", c.serve.store},
        {"turn_limit", c.serve.turn_limit}}},
      {"inputs", {{"model", c.inputs.model}, {"classifier", c.inputs.classifier}}},
  };
}

ExperimentConfig experiment_from_json(const nlohmann::json& given) {
  const ExperimentConfig defaults;
  auto j = to_json(defaults);
  check_keys(given, j, "");
  j.merge_patch(given);
  try {
    ExperimentConfig c;
    c.seed = j.at("seed");
    c.workers = j.at("workers");
    c.output_dir = j.at("output_dir");
    c.run_name = j.at("run_name");
    const auto& cj = j.at("corpus");
    c.corpus.dir = cj.at("dir");
    c.corpus.train = cj.at("train");
    c.corpus.test = cj.at("test");
    c.corpus.format = cj.at("format");
    c.corpus.test_fraction = cj.at("test_fraction");
    c.corpus.coherence_examples = cj.at("coherence_examples");
    c.corpus.synthetic = synthetic_from(cj.at("synthetic"));
    c.corpus.synthetic_test_dialogues = cj.at("synthetic_test_dialogues");
    c.model = model_from(j.at("model"));
    const auto& tj = j.at("train");
    c.epochs = tj.at("epochs");
    c.train.batch_size = tj.at("batch_size");
    c.train.max_input_tokens = tj.at("max_input_tokens");
    c.train.optimizer = optimizer_from(tj.at("optimizer"));
    const auto& sj = j.at("sampling");
    auto& s = c.sampling;
    s.mode = parse_enum(sampling_mode_from_string, sj.at("mode"));
    s.geo_p = sj.at("geo_p");
    s.i_max = sj.at("i_max");
    s.apply_prob = sj.at("apply_prob");
    s.schedule = schedule_from(sj.at("schedule"));
    s.apply_prob_end = sj.at("apply_prob_end");
    s.ramp_epochs = sj.at("ramp_epochs");
    s.hier_mix = sj.at("hier_mix");
    s.orientation = parse_enum(index_orientation_from_string, sj.at("orientation"));
    s.semi_fraction = sj.at("semi_fraction");
    s.extra_tokens = sj.at("extra_tokens");
    const auto& kj = j.at("classifier");
    c.classifier.model = model_from(kj.at("model"));
    c.classifier.train.epochs = kj.at("epochs");
    c.classifier.train.batch_size = kj.at("batch_size");
    c.classifier.train.optimizer = optimizer_from(kj.at("optimizer"));
    c.classifier.threshold = kj.at("threshold");
    const auto& rj = j.at("rl");
    auto& r = c.rl.rl;
    r.beta = rj.at("beta");
    r.kl_truncation = rj.at("kl_truncation");
    r.clip_eps = rj.at("clip_eps");
    r.rollouts_per_update = rj.at("rollouts_per_update");
    r.ppo_epochs = rj.at("ppo_epochs");
    r.iterations = rj.at("iterations");
    r.objective = parse_enum(rl_objective_from_string, rj.at("objective"));
    r.reward_clip = rj.at("reward_clip");
    r.per_token = rj.at("per_token");
    r.prob_floor = rj.at("prob_floor");
    r.temperature = rj.at("temperature");
    r.max_length = rj.at("max_length");
    r.max_input_tokens = rj.at("max_input_tokens");
    r.optimizer = optimizer_from(rj.at("optimizer"));
    c.rl.min_context_utterances = rj.at("min_context_utterances");
    c.rl.eval_contexts = rj.at("eval_contexts");
    c.rl.eval_samples = rj.at("eval_samples");
    const auto& dj = j.at("decode");
    auto& d = c.decode.decode;
    d.strategy = parse_enum(decode_strategy_from_string, dj.at("strategy"));
    d.beam_size = dj.at("beam_size");
    d.max_length = dj.at("max_length");
    d.length_penalty = dj.at("length_penalty");
    d.temperature = dj.at("temperature");
    c.decode.rerank = dj.at("rerank");
    c.decode.reranker = dj.at("reranker");
    const auto& ej = j.at("eval");
    c.eval.K = ej.at("K");
    c.eval.D = ej.at("D");
    c.eval.judge = ej.at("judge");
    c.eval.beams = ej.at("beams").get<std::vector<int>>();
    c.eval.golden_prefix = ej.at("golden_prefix").get<std::vector<int>>();
    c.eval.probe_turn = ej.at("probe_turn");
    const auto& vj = j.at("serve");
    c.serve.host = vj.at("host");
    c.serve.port = vj.at("port");
    c.serve.registry = vj.at("registry");
    c.serve.store = vj.at("store");
    c.serve.turn_limit = vj.at("turn_limit");
    c.inputs.model = j.at("inputs").at("model");
    c.inputs.classifier = j.at("inputs").at("classifier");
    if (c.workers < 1) throw DataError("config: workers must be >= 1");
    if (c.eval.K < 2) throw DataError("config: eval.K must be >= 2");
    if (c.eval.judge != "oracle" && c.eval.judge != "classifier")
      throw DataError("config: eval.judge must be oracle or classifier");
    if (c.decode.reranker != "oracle" && c.decode.reranker != "classifier")
      throw DataError("config: decode.reranker must be oracle or classifier");
    try {
      c.sampling.validate();
      c.rl.rl.validate();
      c.corpus.synthetic.validate();
    } catch (const std::invalid_argument& e) {
      throw DataError(std::string("config: ") + e.what());
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("config: ") + e.what());
  }
}

ExperimentConfig load_experiment(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  try {
    return experiment_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("config " + path.string() + ": " + e.what());
  }
}

void apply_override(nlohmann::json& config, const std::string& dotted_key, const std::string& value) {
  const auto known = to_json(ExperimentConfig{});
  const nlohmann::json* k = &known;
  nlohmann::json* node = &config;
  std::stringstream ss(dotted_key);
  std::vector<std::string> parts;
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  if (parts.empty()) throw DataError("empty override key");
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!k->is_object() || !k->contains(parts[i])) throw DataError("config: unknown key " + dotted_key);
    k = &k->at(parts[i]);
    if (i + 1 < parts.size()) {
      if (!node->contains(parts[i])) (*node)[parts[i]] = nlohmann::json::object();
      node = &(*node)[parts[i]];
    }
  }
  if (k->is_object()) throw DataError("config: " + dotted_key + " is a section, not a value");
  nlohmann::json v = nlohmann::json::parse(value, nullptr, false);
  if (v.is_discarded() || (k->is_string() && !v.is_string())) v = value;
  (*node)[parts.back()] = v;
}

std::uint64_t stream_seed(const ExperimentConfig& c, Stream s) {
  return derive_seed(c.seed, static_cast<std::uint64_t>(s));
}

fs::path make_run_dir(const ExperimentConfig& c, const std::string& command) {
  std::string name = c.run_name;
  if (name.empty()) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
    name = command + "-" + buf;
    for (int n = 2; fs::exists(fs::path(c.output_dir) / name); ++n) name = command + "-" + buf + "-" + std::to_string(n);
  }
  const auto dir = fs::path(c.output_dir) / name;
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << to_json(c).dump(2) << "\n";
  return dir;
}

// -- corpus -------------------------------------------------------------------

namespace {

void write_json(const fs::path& path, const nlohmann::json& j) { std::ofstream(path) << j.dump(2) << "\n"; }

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

fs::path require(const std::string& path, const char* what) {
  if (path.empty()) throw DataError(std::string("missing input: ") + what);
  if (!fs::exists(path)) throw DataError(std::string(what) + " not found: " + path);
  return path;
}

}  // namespace

Corpus load_corpus(const ExperimentConfig& c) {
  Corpus out;
  if (!c.corpus.dir.empty()) {
    const fs::path dir = require(c.corpus.dir, "corpus.dir");
    out.train = load_dialogues(dir / "train.jsonl");
    out.test = load_dialogues(dir / "test.jsonl");
    out.vocab = Vocabulary(read_json(dir / "vocab.json").at("surfaces").get<std::vector<std::string>>());
    return out;
  }
  if (!c.corpus.train.empty()) {
    const auto fmt = parse_enum(dialogue_format_from_string, nlohmann::json(c.corpus.format));
    out.train = load_dialogues(require(c.corpus.train, "corpus.train"), fmt);
    if (!c.corpus.test.empty()) {
      out.test = load_dialogues(require(c.corpus.test, "corpus.test"), fmt);
    } else {
      const auto n_test = static_cast<std::size_t>(c.corpus.test_fraction * static_cast<double>(out.train.size()));
      out.test.assign(out.train.end() - static_cast<std::ptrdiff_t>(n_test), out.train.end());
      out.train.resize(out.train.size() - n_test);
    }
    if (out.train.empty()) throw DataError("training corpus is empty");
    out.vocab = build_vocabulary(out.train);
    return out;
  }
  auto sc = c.corpus.synthetic;
  out.train = generate_synthetic_dialogues(sc);
  sc.seed = derive_seed(sc.seed, 1);
  sc.dialogues = c.corpus.synthetic_test_dialogues;
  out.test = generate_synthetic_dialogues(sc);
  out.vocab = Vocabulary(synthetic_surfaces(c.corpus.synthetic));
  return out;
}

std::vector<TrainingPair> corpus_pairs(std::span<const Dialogue> dialogues, const Tokenizer& tok) {
  std::vector<TrainingPair> out;
  for (const auto& d : dialogues) {
    const auto u = encode_dialogue(d, tok);
    const auto p = make_training_pairs(u, ContextPolicy::full);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::vector<Utterance> corpus_prompts(std::span<const Dialogue> dialogues, const Tokenizer& tok, std::size_t n) {
  if (dialogues.size() < n)
    throw DataError("need " + std::to_string(n) + " test dialogues for prompts, have " +
                    std::to_string(dialogues.size()));
  std::vector<Utterance> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (dialogues[i].turns.empty()) throw DataError("test dialogue " + dialogues[i].id + " has no turns");
    auto u = encode_dialogue(dialogues[i], tok).front();
    u.speaker = Speaker::human;
    out.push_back(std::move(u));
  }
  return out;
}

std::unique_ptr<CoherenceClassifier> make_judge(const ExperimentConfig& c, const std::string& kind,
                                                const Vocabulary& vocab) {
  if (kind == "oracle") return std::make_unique<KeywordOracle>(FactLexicon(vocab));
  if (kind == "classifier") {
    auto loaded = load_classifier(require(c.inputs.classifier, "inputs.classifier"));
    if (loaded.vocab.hash() != vocab.hash()) throw DataError("classifier vocabulary differs from the corpus");
    return std::make_unique<EncoderClassifier>(std::move(loaded.classifier));
  }
  throw DataError("unknown judge: " + kind);
}

Transformer train_model(const ExperimentConfig& c, const Corpus& corpus,
                        const std::function<void(int, const EpochReport&)>& on_epoch) {
  const WhitespaceTokenizer tok(corpus.vocab);
  const auto pairs = corpus_pairs(corpus.train, tok);
  if (pairs.empty()) throw DataError("corpus yields no training pairs");
  std::vector<Utterance> pool;
  if (c.sampling.mode == SamplingMode::noise)
    for (const auto& d : corpus.train)
      for (auto& u : encode_dialogue(d, tok)) pool.push_back(std::move(u));
  auto mc = c.model;
  mc.vocab_size = static_cast<int>(corpus.vocab.size());
  TrainState st(Transformer(mc, stream_seed(c, Stream::model_init)), c.train, stream_seed(c, Stream::train_order));
  std::mt19937_64 srng(stream_seed(c, Stream::sampling));
  for (int e = 0; e < c.epochs; ++e) {
    const auto rep = hierarchical_train_epoch(st, pairs, c.sampling, srng, pool);
    if (on_epoch) on_epoch(e, rep);
  }
  return std::move(st.model);
}

SelfTalkRun self_talk_run(const ExperimentConfig& c, const DialogueModel& model, const Corpus& corpus,
                          const CoherenceClassifier& judge, const CoherenceClassifier* reranker) {
  const WhitespaceTokenizer tok(corpus.vocab);
  const auto prompts = corpus_prompts(corpus.test, tok, c.eval.D);
  const auto responder = c.decode.rerank && reranker
                             ? rerank_responder(model, *reranker, c.decode.decode, c.train.max_input_tokens)
                             : model_responder(model, c.decode.decode, c.train.max_input_tokens);
  return run_self_talk(responder, prompts, c.eval.K, stream_seed(c, Stream::self_talk), &judge,
                       c.inputs.model.empty() ? "model" : c.inputs.model, c.workers);
}

// -- stages -------------------------------------------------------------------

namespace {

struct LoadedInputs {
  Corpus corpus;
  std::unique_ptr<Transformer> model;
};

LoadedInputs load_model_and_corpus(const ExperimentConfig& c) {
  LoadedInputs in{load_corpus(c), nullptr};
  auto lm = load_model(require(c.inputs.model, "inputs.model"));
  if (lm.vocab.hash() != in.corpus.vocab.hash()) throw DataError("model vocabulary differs from the corpus");
  in.model = std::make_unique<Transformer>(std::move(lm.model));
  return in;
}

void append_line(const fs::path& path, const nlohmann::json& j) {
  std::ofstream(path, std::ios::app) << j.dump() << "\n";
}

std::unique_ptr<CoherenceClassifier> maybe_reranker(const ExperimentConfig& c, const Vocabulary& vocab) {
  return c.decode.rerank ? make_judge(c, c.decode.reranker, vocab) : nullptr;
}

}  // namespace

nlohmann::json stage_ingest(const ExperimentConfig& c, const fs::path& dir) {
  const auto corpus = load_corpus(c);
  save_dialogues(dir / "train.jsonl", corpus.train);
  save_dialogues(dir / "test.jsonl", corpus.test);
  const std::vector<std::string> surfaces(corpus.vocab.surfaces().begin() + special::kCount,
                                          corpus.vocab.surfaces().end());
  write_json(dir / "vocab.json", {{"surfaces", surfaces}, {"hash", std::to_string(corpus.vocab.hash())}});
  const WhitespaceTokenizer tok(corpus.vocab);
  const nlohmann::json summary = {{"train_dialogues", corpus.train.size()},
                                  {"test_dialogues", corpus.test.size()},
                                  {"train_pairs", corpus_pairs(corpus.train, tok).size()},
                                  {"vocab_size", corpus.vocab.size()}};
  write_json(dir / "summary.json", summary);
  return summary;
}

nlohmann::json stage_train(const ExperimentConfig& c, const fs::path& dir) {
  const auto corpus = load_corpus(c);
  const auto log = dir / "train_log.jsonl";
  fs::remove(log);
  const auto model = train_model(c, corpus, [&](int e, const EpochReport& r) {
    append_line(log, {{"epoch", e}, {"mean_loss", r.mean_loss}, {"steps", r.steps}, {"lr", r.lr}});
  });
  save_model(dir / "model.bin", model, corpus.vocab, {{"sampling", to_string(c.sampling.mode)}});
  const WhitespaceTokenizer tok(corpus.vocab);
  const auto test_pairs = corpus_pairs(corpus.test, tok);
  nlohmann::json summary = {{"model", (dir / "model.bin").string()}, {"sampling", to_string(c.sampling.mode)}};
  if (!test_pairs.empty()) summary["test_ppl"] = perplexity(model, test_pairs, c.train.max_input_tokens);
  write_json(dir / "summary.json", summary);
  return summary;
}

nlohmann::json stage_train_classifier(const ExperimentConfig& c, const fs::path& dir) {
  const auto corpus = load_corpus(c);
  const WhitespaceTokenizer tok(corpus.vocab);
  std::vector<CoherenceExample> train, dev;
  if (!c.corpus.coherence_examples.empty()) {
    auto all = load_coherence_examples(require(c.corpus.coherence_examples, "corpus.coherence_examples"), tok);
    const auto n_dev = std::max<std::size_t>(1, all.size() / 10);
    if (all.size() < 2) throw DataError("need at least two coherence examples");
    dev.assign(all.end() - static_cast<std::ptrdiff_t>(n_dev), all.end());
    all.resize(all.size() - n_dev);
    train = std::move(all);
  } else {
    train = synthetic_coherence_examples(corpus.train, tok);
    dev = synthetic_coherence_examples(corpus.test, tok);
  }
  auto mc = c.classifier.model;
  mc.vocab_size = static_cast<int>(corpus.vocab.size());
  auto tc = c.classifier.train;
  tc.seed = stream_seed(c, Stream::classifier);
  ClassifierTrainReport report;
  const auto clf = train_classifier(EncoderClassifier(mc, tc.seed, c.classifier.threshold), train, dev, tc, &report);
  save_classifier(dir / "classifier.bin", clf, corpus.vocab);
  const nlohmann::json summary = {{"classifier", (dir / "classifier.bin").string()},
                                  {"train_examples", train.size()},
                                  {"dev_examples", dev.size()},
                                  {"dev_accuracy", report.dev_accuracy},
                                  {"train_loss", report.train_loss},
                                  {"best_epoch", report.best_epoch},
                                  {"best_dev_accuracy", report.best_dev_accuracy}};
  write_json(dir / "summary.json", summary);
  return summary;
}

nlohmann::json stage_rl_finetune(const ExperimentConfig& c, const fs::path& dir) {
  auto in = load_model_and_corpus(c);
  const WhitespaceTokenizer tok(in.corpus.vocab);
  const auto judge = make_judge(c, c.eval.judge, in.corpus.vocab);
  std::vector<DialogueContext> train_ctx, test_ctx;
  for (const auto& p : corpus_pairs(in.corpus.train, tok))
    if (p.context.utterances.size() >= c.rl.min_context_utterances) train_ctx.push_back(p.context);
  for (const auto& p : corpus_pairs(in.corpus.test, tok))
    if (p.context.utterances.size() >= c.rl.min_context_utterances && test_ctx.size() < c.rl.eval_contexts)
      test_ctx.push_back(p.context);
  if (train_ctx.empty() || test_ctx.empty()) throw DataError("no contexts reach rl.min_context_utterances");
  auto rc = c.rl.rl;
  rc.seed = stream_seed(c, Stream::rl);
  const auto eval_seed = derive_seed(rc.seed, 1);
  const double before = mean_sampled_coherence(*in.model, *judge, test_ctx, rc, c.rl.eval_samples, eval_seed);
  const auto log = dir / "rl_log.jsonl";
  fs::remove(log);
  const auto res = rl_finetune(*in.model, *judge, train_ctx, rc, [&](const RLIterationMetrics& m) {
    append_line(log, to_json(m));
  });
  const double after = mean_sampled_coherence(res.policy, *judge, test_ctx, rc, c.rl.eval_samples, eval_seed);
  save_model(dir / "model.bin", res.policy, in.corpus.vocab, {{"rl_from", c.inputs.model}});
  const nlohmann::json summary = {{"model", (dir / "model.bin").string()},
                                  {"judge", c.eval.judge},
                                  {"iterations", rc.iterations},
                                  {"coherence_before", before},
                                  {"coherence_after", after},
                                  {"gain", after - before}};
  write_json(dir / "summary.json", summary);
  return summary;
}

nlohmann::json stage_self_talk(const ExperimentConfig& c, const fs::path& dir) {
  auto in = load_model_and_corpus(c);
  const auto judge = make_judge(c, c.eval.judge, in.corpus.vocab);
  const auto reranker = maybe_reranker(c, in.corpus.vocab);
  const auto run = self_talk_run(c, *in.model, in.corpus, *judge, reranker.get());
  const WhitespaceTokenizer tok(in.corpus.vocab);
  save_transcripts(dir / "transcripts.jsonl", run.transcripts, &tok);
  auto report = compute_metrics(run.transcripts, c.inputs.model);
  const auto test_pairs = corpus_pairs(in.corpus.test, tok);
  if (!test_pairs.empty()) report.ppl = perplexity(*in.model, test_pairs, c.train.max_input_tokens);
  const auto j = to_json(report);
  write_json(dir / "metrics.json", j);
  return j;
}

EvalOutcome stage_eval(const fs::path& run_dir) {
  const auto c = load_experiment(run_dir / "config.json");
  EvalOutcome out;
  out.stored = metrics_from_json(read_json(run_dir / "metrics.json"));
  const auto corpus = load_corpus(c);
  const WhitespaceTokenizer tok(corpus.vocab);
  const auto transcripts = load_transcripts(run_dir / "transcripts.jsonl", &tok);
  if (transcripts.empty()) throw DataError("no transcripts in " + run_dir.string());
  out.recomputed = compute_metrics(transcripts, c.inputs.model);
  if (out.stored.ppl) {
    auto lm = load_model(require(c.inputs.model, "inputs.model"));
    out.recomputed.ppl = perplexity(lm.model, corpus_pairs(corpus.test, tok), c.train.max_input_tokens);
  }
  out.identical = to_json(out.stored).dump() == to_json(out.recomputed).dump();
  return out;
}

nlohmann::json stage_figures(const ExperimentConfig& c, const fs::path& dir) {
  auto in = load_model_and_corpus(c);
  const auto judge = make_judge(c, c.eval.judge, in.corpus.vocab);
  const WhitespaceTokenizer tok(in.corpus.vocab);
  nlohmann::json summary = nlohmann::json::object();

  // Coherence per turn for the configured decoder.
  const auto reranker = maybe_reranker(c, in.corpus.vocab);
  const auto run = self_talk_run(c, *in.model, in.corpus, *judge, reranker.get());
  const auto rates = coherence_rates(run.transcripts);
  std::vector<std::pair<int, double>> rows;
  for (std::size_t k = 0; k < rates.size(); ++k) rows.emplace_back(static_cast<int>(k + 1), rates[k]);
  write_curve_csv(dir / "turn_curve.csv", rows);
  summary["turn_curve"] = rates;

  // Final-turn coherence per beam size under re-ranking.
  const auto rr = make_judge(c, c.decode.reranker, in.corpus.vocab);
  rows.clear();
  for (int beam : c.eval.beams) {
    auto bc = c;
    bc.decode.rerank = true;
    bc.decode.decode.beam_size = beam;
    const auto br = self_talk_run(bc, *in.model, in.corpus, *judge, rr.get());
    rows.emplace_back(beam, coherence_rate(br.transcripts, c.eval.K - 1));
  }
  write_curve_csv(dir / "beam_curve.csv", rows, "beam,rate");
  summary["beam_curve"] = rows;

  // Contradiction of the probe turn against each earlier utterance.
  if (c.eval.K > c.eval.probe_turn) {
    const auto contra = contradiction_by_turn(run.transcripts, *judge, c.eval.probe_turn);
    rows.clear();
    for (std::size_t t = 0; t < contra.size(); ++t) rows.emplace_back(static_cast<int>(t + 1), contra[t]);
    write_curve_csv(dir / "contradiction_by_turn.csv", rows, "turn,contradiction_rate");
    summary["contradiction_by_turn"] = contra;
  }

  // Golden-prefix curves: one row per (g, position).
  std::vector<std::vector<Utterance>> dialogues;
  for (std::size_t i = 0; i < std::min(c.eval.D, in.corpus.test.size()); ++i) {
    auto u = encode_dialogue(in.corpus.test[i], tok);
    if (!u.empty()) u.front().speaker = Speaker::human;
    dialogues.push_back(std::move(u));
  }
  const auto responder = model_responder(*in.model, c.decode.decode, c.train.max_input_tokens);
  std::ofstream gp(dir / "golden_prefix.csv");
  gp << "g,position,rate\n";
  nlohmann::json gj = nlohmann::json::object();
  for (int g : c.eval.golden_prefix) {
    if (g > c.eval.K) continue;
    const auto pr = golden_prefix_run(responder, dialogues, g, c.eval.K, *judge,
                                      stream_seed(c, Stream::figures), c.workers);
    for (std::size_t k = 0; k < pr.curve.size(); ++k) gp << g << "," << k + 2 << "," << pr.curve[k] << "\n";
    gj[std::to_string(g)] = {{"curve", pr.curve}, {"skipped", pr.skipped}};
  }
  summary["golden_prefix"] = gj;
  write_json(dir / "figures.json", summary);
  return summary;
}

}  // namespace hsdial
