#include "hsdial/synthetic.hpp"

#include <algorithm>
#include <random>
#include <set>
#include <stdexcept>

namespace hsdial {

void SyntheticConfig::validate() const {
  if (dialogues < 0) throw std::invalid_argument("dialogues must be >= 0");
  if (turns < 2) throw std::invalid_argument("turns must be >= 2");
  if (topics < 1 || facts_per_topic < 1) throw std::invalid_argument("need at least one topic and fact");
  if (filler_words < 1 || min_filler < 0 || max_filler < min_filler)
    throw std::invalid_argument("bad filler settings");
  if (moods < 0) throw std::invalid_argument("moods must be >= 0");
  if (opening_facts < 0) throw std::invalid_argument("opening_facts must be >= 0");
  if (stay_prob < 0 || stay_prob > 1 || reassert_prob < 0 || reassert_prob > 1)
    throw std::invalid_argument("probabilities must be in [0, 1]");
}

namespace {

std::string topic_name(int t) { return "t" + std::to_string(t); }
std::string fact_name(int f) { return "f" + std::to_string(f); }
std::string filler_name(int w) { return "w" + std::to_string(w); }
std::string mood_name(int m) { return "m" + std::to_string(m); }

}  // namespace

std::vector<std::string> synthetic_surfaces(const SyntheticConfig& cfg) {
  std::vector<std::string> out;
  for (int t = 0; t < cfg.topics; ++t) out.push_back(topic_name(t));
  for (int f = 0; f < cfg.topics * cfg.facts_per_topic; ++f) {
    out.push_back("+" + fact_name(f));
    out.push_back("-" + fact_name(f));
  }
  for (int w = 0; w < cfg.filler_words; ++w) out.push_back(filler_name(w));
  for (int m = 0; m < cfg.moods; ++m) out.push_back(mood_name(m));
  return out;
}

std::vector<Dialogue> generate_synthetic_dialogues(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<int> topic_d(0, cfg.topics - 1);
  std::uniform_int_distribution<int> filler_d(0, cfg.filler_words - 1);
  std::uniform_int_distribution<int> filler_n(cfg.min_filler, cfg.max_filler);
  std::bernoulli_distribution coin(0.5);
  std::bernoulli_distribution stay(cfg.stay_prob);
  std::bernoulli_distribution reassert(cfg.reassert_prob);
  const int facts = cfg.topics * cfg.facts_per_topic;
  std::vector<std::vector<bool>> table(static_cast<std::size_t>(cfg.moods));
  {
    std::mt19937_64 world(cfg.world_seed);
    for (auto& row : table)
      for (int f = 0; f < facts; ++f) row.push_back(coin(world));
  }
  std::uniform_int_distribution<int> mood_d(0, std::max(0, cfg.moods - 1));

  std::vector<Dialogue> out;
  out.reserve(static_cast<std::size_t>(cfg.dialogues));
  for (int d = 0; d < cfg.dialogues; ++d) {
    std::vector<bool> polarity(static_cast<std::size_t>(facts));
    const int mood = cfg.moods > 0 ? mood_d(rng) : -1;
    for (int f = 0; f < facts; ++f)
      polarity[static_cast<std::size_t>(f)] = mood >= 0 ? table[static_cast<std::size_t>(mood)][static_cast<std::size_t>(f)]
                                                       : coin(rng);
    std::set<int> mentioned;
    Dialogue dlg;
    dlg.id = "syn-" + std::to_string(cfg.seed) + "-" + std::to_string(d);
    int topic = topic_d(rng);
    dlg.topic = topic_name(topic);
    for (int k = 0; k < cfg.turns; ++k) {
      if (k > 0 && !stay(rng)) {
        // ring graph: move to a neighbour
        topic = (topic + (cfg.cycle || coin(rng) ? 1 : cfg.topics - 1)) % cfg.topics;
      }
      std::string text = topic_name(topic);
      if (k == 0 && mood >= 0) text = mood_name(mood) + " " + text;
      std::set<int> used;
      for (int a = 0; a < std::min(cfg.facts_per_turn, cfg.facts_per_topic); ++a) {
        std::vector<int> old_facts, new_facts;
        for (int j = 0; j < cfg.facts_per_topic; ++j) {
          const int f = topic * cfg.facts_per_topic + j;
          if (used.count(f)) continue;
          (mentioned.count(f) ? old_facts : new_facts).push_back(f);
        }
        const bool use_old = !old_facts.empty() && (new_facts.empty() || reassert(rng));
        const auto& pool = use_old ? old_facts : new_facts;
        const int f = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
        used.insert(f);
        text += std::string(" ") + (polarity[static_cast<std::size_t>(f)] ? "+" : "-") + fact_name(f);
      }
      if (k == 0 && cfg.opening_facts > 0) {
        std::vector<int> rest;
        for (int f = 0; f < facts; ++f)
          if (!used.count(f)) rest.push_back(f);
        std::shuffle(rest.begin(), rest.end(), rng);
        rest.resize(std::min<std::size_t>(rest.size(), static_cast<std::size_t>(cfg.opening_facts)));
        for (int f : rest) {
          used.insert(f);
          text += std::string(" ") + (polarity[static_cast<std::size_t>(f)] ? "+" : "-") + fact_name(f);
        }
      }
      mentioned.insert(used.begin(), used.end());
      for (int n = filler_n(rng); n > 0; --n) text += " " + filler_name(filler_d(rng));
      dlg.turns.push_back({k % 2 == 0 ? Speaker::human : Speaker::bot, std::move(text)});
    }
    out.push_back(std::move(dlg));
  }
  return out;
}

std::vector<CoherenceExample> synthetic_coherence_examples(std::span<const Dialogue> dialogues,
                                                           const Tokenizer& tok) {
  const FactLexicon lex(tok.vocabulary());
  std::vector<CoherenceExample> out;
  for (const auto& d : dialogues) {
    const auto utts = encode_dialogue(d, tok);
    for (std::size_t k = 1; k < utts.size(); ++k) {
      CoherenceExample ex;
      ex.context.utterances.assign(utts.begin(), utts.begin() + static_cast<std::ptrdiff_t>(k));
      ex.response = utts[k];
      ex.label = CoherenceLabel::coherent;
      out.push_back(ex);

      std::set<int> seen;
      for (const auto& u : ex.context.utterances)
        for (TokenId t : u.tokens)
          if (auto f = lex.lookup(t)) seen.insert(f->fact);
      for (auto& t : ex.response.tokens) {
        auto f = lex.lookup(t);
        if (!f || !seen.count(f->fact)) continue;
        if (auto flipped = lex.token(f->fact, !f->positive)) {
          t = *flipped;
          ex.label = CoherenceLabel::contradiction;
          out.push_back(ex);
          break;
        }
      }
    }
  }
  return out;
}

}  // namespace hsdial
