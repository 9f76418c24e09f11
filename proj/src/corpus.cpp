#include "hsdial/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

namespace hsdial {

namespace {

const std::vector<std::string>& special_surfaces() {
  static const std::vector<std::string> s = {"<pad>", "<unk>", "<bos>", "<eos>",
                                             "<sep>", "<cls>", "<human>", "<bot>"};
  return s;
}

std::string lowercase(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

}  // namespace

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& surfaces) {
  for (const auto& s : special_surfaces()) {
    index_.emplace(s, static_cast<TokenId>(surfaces_.size()));
    surfaces_.push_back(s);
  }
  for (const auto& s : surfaces) {
    if (s.empty() || index_.count(s)) continue;
    index_.emplace(s, static_cast<TokenId>(surfaces_.size()));
    surfaces_.push_back(s);
  }
}

TokenId Vocabulary::id(std::string_view surface) const {
  auto it = index_.find(std::string(surface));
  return it == index_.end() ? special::kUnk : it->second;
}

bool Vocabulary::contains(std::string_view surface) const { return index_.count(std::string(surface)) != 0; }

const std::string& Vocabulary::surface(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= surfaces_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
  return surfaces_[static_cast<std::size_t>(id)];
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& s : surfaces_) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    h ^= 0xffu;
    h *= 1099511628211ull;
  }
  return h;
}

std::vector<std::string> WhitespaceTokenizer::split(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(lowercase(w));
  return out;
}

std::vector<TokenId> WhitespaceTokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& w : split(text)) ids.push_back(vocab_.id(w));
  return ids;
}

std::string WhitespaceTokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (!out.empty()) out += ' ';
    out += vocab_.surface(id);
  }
  return out;
}

std::string to_string(Speaker s) {
  switch (s) {
    case Speaker::human: return "human";
    case Speaker::bot: return "bot";
    default: return "unknown";
  }
}

Speaker speaker_from_string(std::string_view s) {
  const std::string l = lowercase(s);
  if (l == "human" || l == "user" || l == "apprentice") return Speaker::human;
  if (l == "bot" || l == "wizard" || l == "model") return Speaker::bot;
  return Speaker::unknown;
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::predicted: return "predicted";
    case Provenance::noise: return "noise";
    default: return "golden";
  }
}

std::size_t DialogueContext::flat_length() const {
  if (utterances.empty()) return 0;
  std::size_t n = utterances.size() - 1;
  for (const auto& u : utterances) n += u.tokens.size();
  return n;
}

std::vector<TokenId> DialogueContext::flatten() const {
  std::vector<TokenId> out;
  out.reserve(flat_length());
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    if (i) out.push_back(special::kSep);
    out.insert(out.end(), utterances[i].tokens.begin(), utterances[i].tokens.end());
  }
  return out;
}

std::vector<std::vector<TokenId>> split_flat(std::span<const TokenId> flat) {
  std::vector<std::vector<TokenId>> out(1);
  for (TokenId t : flat) {
    if (t == special::kSep) {
      out.emplace_back();
    } else {
      out.back().push_back(t);
    }
  }
  if (flat.empty()) out.clear();
  return out;
}

DialogueFormat dialogue_format_from_string(std::string_view s) {
  if (s == "jsonl" || s == "jsonl-dialogue") return DialogueFormat::jsonl;
  if (s == "plain" || s == "plain-turns") return DialogueFormat::plain_turns;
  throw std::invalid_argument("unknown dialogue format: " + std::string(s));
}

namespace {

Dialogue parse_jsonl_record(const std::string& line, std::size_t lineno) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("malformed JSON: ") + e.what(), lineno);
  }
  if (!j.is_object() || !j.contains("turns") || !j["turns"].is_array()) {
    throw DataError("record lacks a \"turns\" array", lineno);
  }
  Dialogue d;
  d.id = j.value("id", std::string("line-") + std::to_string(lineno));
  if (j.contains("topic") && j["topic"].is_string()) d.topic = j["topic"].get<std::string>();
  for (const auto& t : j["turns"]) {
    Turn turn;
    if (t.is_string()) {
      turn.text = t.get<std::string>();
    } else if (t.is_object() && t.contains("text") && t["text"].is_string()) {
      turn.text = t["text"].get<std::string>();
      if (t.contains("speaker") && t["speaker"].is_string()) {
        turn.speaker = speaker_from_string(t["speaker"].get<std::string>());
      }
    } else {
      throw DataError("turn must be a string or an object with \"text\"", lineno);
    }
    if (WhitespaceTokenizer::split(turn.text).empty()) throw DataError("empty utterance", lineno);
    d.turns.push_back(std::move(turn));
  }
  if (d.turns.size() < 2) throw DataError("dialogue needs at least 2 turns", lineno);
  return d;
}

}  // namespace

std::vector<Dialogue> parse_dialogues(std::string_view text, DialogueFormat format) {
  std::vector<Dialogue> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  if (format == DialogueFormat::jsonl) {
    while (std::getline(in, line)) {
      ++lineno;
      if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
      out.push_back(parse_jsonl_record(line, lineno));
    }
    return out;
  }
  // plain-turns: one utterance per line, blank line between dialogues,
  // optional "speaker:" prefix.
  Dialogue cur;
  std::size_t start_line = 0;
  auto flush = [&]() {
    if (cur.turns.empty()) return;
    if (cur.turns.size() < 2) throw DataError("dialogue needs at least 2 turns", start_line);
    cur.id = "plain-" + std::to_string(out.size());
    out.push_back(std::move(cur));
    cur = Dialogue{};
  };
  while (std::getline(in, line)) {
    ++lineno;
    auto words = WhitespaceTokenizer::split(line);
    if (words.empty()) {
      flush();
      continue;
    }
    if (cur.turns.empty()) start_line = lineno;
    Turn t;
    std::string_view body = line;
    const auto colon = body.find(':');
    if (colon != std::string_view::npos) {
      const Speaker sp = speaker_from_string(body.substr(0, colon));
      if (sp != Speaker::unknown) {
        t.speaker = sp;
        body = body.substr(colon + 1);
      }
    }
    if (WhitespaceTokenizer::split(body).empty()) throw DataError("empty utterance", lineno);
    t.text = std::string(body);
    const auto b = t.text.find_first_not_of(" \t");
    t.text = t.text.substr(b);
    cur.turns.push_back(std::move(t));
  }
  flush();
  return out;
}

std::vector<Dialogue> load_dialogues(const std::filesystem::path& path, DialogueFormat format) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_dialogues(ss.str(), format);
}

std::string serialize_dialogues(std::span<const Dialogue> dialogues) {
  std::string out;
  for (const auto& d : dialogues) {
    nlohmann::json j;
    j["id"] = d.id;
    j["topic"] = d.topic;
    j["turns"] = nlohmann::json::array();
    for (const auto& t : d.turns) j["turns"].push_back({{"speaker", to_string(t.speaker)}, {"text", t.text}});
    out += j.dump();
    out += '\n';
  }
  return out;
}

void save_dialogues(const std::filesystem::path& path, std::span<const Dialogue> dialogues) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << serialize_dialogues(dialogues);
}

Vocabulary build_vocabulary(std::span<const Dialogue> dialogues) {
  std::set<std::string> words;
  for (const auto& d : dialogues)
    for (const auto& t : d.turns)
      for (auto& w : WhitespaceTokenizer::split(t.text)) words.insert(std::move(w));
  return Vocabulary(std::vector<std::string>(words.begin(), words.end()));
}

std::vector<Utterance> encode_dialogue(const Dialogue& d, const Tokenizer& tok) {
  std::vector<Utterance> out;
  out.reserve(d.turns.size());
  for (const auto& t : d.turns) {
    Utterance u;
    u.tokens = tok.encode(t.text);
    u.speaker = t.speaker;
    if (u.tokens.empty()) throw DataError("empty utterance in dialogue " + d.id);
    out.push_back(std::move(u));
  }
  return out;
}

std::vector<TrainingPair> make_training_pairs(std::span<const Utterance> turns, ContextPolicy policy) {
  std::vector<TrainingPair> out;
  if (turns.size() < 2) return out;
  for (std::size_t k = 1; k < turns.size(); ++k) {
    TrainingPair p;
    if (policy == ContextPolicy::full) {
      p.context.utterances.assign(turns.begin(), turns.begin() + static_cast<std::ptrdiff_t>(k));
    } else {
      p.context.utterances.push_back(turns[k - 1]);
    }
    p.response = turns[k];
    out.push_back(std::move(p));
  }
  return out;
}

DialogueContext truncate_context(DialogueContext context, std::size_t max_input_tokens) {
  if (max_input_tokens == 0) throw std::invalid_argument("max_input_tokens must be >= 1");
  auto& us = context.utterances;
  while (us.size() > 1 && context.flat_length() > max_input_tokens) us.erase(us.begin());
  if (us.size() == 1 && us.front().tokens.size() > max_input_tokens) {
    auto& t = us.front().tokens;
    t.erase(t.begin(), t.end() - static_cast<std::ptrdiff_t>(max_input_tokens));
  }
  return context;
}

}  // namespace hsdial
