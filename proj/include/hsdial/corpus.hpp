#pragma once

// Dialogue data: vocabulary, tokenization, ingestion and context building.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace hsdial {

using TokenId = int;

/// Raised for malformed input data; `line()` is 1-based, 0 when unknown.
class DataError : public std::runtime_error {
 public:
  DataError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kBos = 2;
inline constexpr TokenId kEos = 3;
inline constexpr TokenId kSep = 4;
inline constexpr TokenId kCls = 5;
inline constexpr TokenId kHuman = 6;
inline constexpr TokenId kBot = 7;
inline constexpr TokenId kCount = 8;
}  // namespace special

class Vocabulary {
 public:
  /// Specials only.
  Vocabulary();
  /// Specials followed by `surfaces` (duplicates and specials ignored).
  explicit Vocabulary(const std::vector<std::string>& surfaces);

  std::size_t size() const { return surfaces_.size(); }
  TokenId id(std::string_view surface) const;  // kUnk when absent
  bool contains(std::string_view surface) const;
  const std::string& surface(TokenId id) const;
  const std::vector<std::string>& surfaces() const { return surfaces_; }
  /// FNV-1a over the surface list; identifies the vocabulary in checkpoints.
  std::uint64_t hash() const;

 private:
  std::vector<std::string> surfaces_;
  std::unordered_map<std::string, TokenId> index_;
};

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::vector<TokenId> encode(std::string_view text) const = 0;
  virtual std::string decode(std::span<const TokenId> ids) const = 0;
  virtual const Vocabulary& vocabulary() const = 0;
};

/// Lowercased whitespace split over a closed vocabulary; OOV maps to UNK.
class WhitespaceTokenizer : public Tokenizer {
 public:
  explicit WhitespaceTokenizer(Vocabulary vocab) : vocab_(std::move(vocab)) {}

  static std::vector<std::string> split(std::string_view text);

  std::vector<TokenId> encode(std::string_view text) const override;
  std::string decode(std::span<const TokenId> ids) const override;
  const Vocabulary& vocabulary() const override { return vocab_; }

 private:
  Vocabulary vocab_;
};

enum class Speaker { unknown, human, bot };
enum class Provenance { golden, predicted, noise };

std::string to_string(Speaker s);
Speaker speaker_from_string(std::string_view s);
std::string to_string(Provenance p);

struct Utterance {
  std::vector<TokenId> tokens;
  Speaker speaker = Speaker::unknown;
  Provenance provenance = Provenance::golden;

  std::size_t size() const { return tokens.size(); }
  friend bool operator==(const Utterance&, const Utterance&) = default;
};

struct DialogueContext {
  std::vector<Utterance> utterances;

  /// Token count after flattening with one SEP between utterances.
  std::size_t flat_length() const;
  std::vector<TokenId> flatten() const;
  friend bool operator==(const DialogueContext&, const DialogueContext&) = default;
};

/// Splits a flattened context back into utterance token lists at SEP.
std::vector<std::vector<TokenId>> split_flat(std::span<const TokenId> flat);

struct TrainingPair {
  DialogueContext context;
  Utterance response;
};

struct Turn {
  Speaker speaker = Speaker::unknown;
  std::string text;
  friend bool operator==(const Turn&, const Turn&) = default;
};

struct Dialogue {
  std::string id;
  std::string topic;
  std::vector<Turn> turns;
  friend bool operator==(const Dialogue&, const Dialogue&) = default;
};

enum class DialogueFormat { jsonl, plain_turns };
DialogueFormat dialogue_format_from_string(std::string_view s);

/// Reads dialogues; an empty file yields an empty list.
std::vector<Dialogue> load_dialogues(const std::filesystem::path& path,
                                     DialogueFormat format = DialogueFormat::jsonl);
std::vector<Dialogue> parse_dialogues(std::string_view text, DialogueFormat format = DialogueFormat::jsonl);
void save_dialogues(const std::filesystem::path& path, std::span<const Dialogue> dialogues);
std::string serialize_dialogues(std::span<const Dialogue> dialogues);

/// Closed vocabulary from every turn of `dialogues`, in sorted surface order.
Vocabulary build_vocabulary(std::span<const Dialogue> dialogues);

std::vector<Utterance> encode_dialogue(const Dialogue& d, const Tokenizer& tok);

enum class ContextPolicy { full, last_one };

/// n turns yield n-1 pairs; pair k answers turn k+1.
std::vector<TrainingPair> make_training_pairs(std::span<const Utterance> turns, ContextPolicy policy);

/// Drops whole oldest utterances, then oldest tokens of the sole survivor,
/// until the flattened length fits.
DialogueContext truncate_context(DialogueContext context, std::size_t max_input_tokens);

}  // namespace hsdial
