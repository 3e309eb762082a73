#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace gcnforge {

enum class Speaker : std::uint8_t { A, B };

inline Speaker other(Speaker s) { return s == Speaker::A ? Speaker::B : Speaker::A; }

struct Turn {
  Speaker speaker = Speaker::A;
  std::string text;

  friend bool operator==(const Turn&, const Turn&) = default;
};

struct Conversation {
  std::string id;
  std::vector<Turn> turns;
  // Set on conversations produced by the generator.
  std::optional<std::string> source_prompt_id;
  bool synthetic = false;

  friend bool operator==(const Conversation&, const Conversation&) = default;
};

struct Corpus {
  std::string name;
  std::vector<Conversation> conversations;

  std::size_t size() const { return conversations.size(); }
  bool empty() const { return conversations.empty(); }
};

// Throws DataError when a conversation has fewer than two turns, an empty
// turn, or speakers that do not alternate starting with A.
void validate_conversation(const Conversation& conv);
// Also rejects duplicate ids.
void validate_corpus(const Corpus& corpus);

// Dialogue JSONL: one {"id", "turns": [{"speaker", "text"}]} object per line.
// Speakers are relabelled so the first turn is A; unknown fields are ignored.
Corpus parse_jsonl(std::string_view text, std::string name);
Corpus load_jsonl(const std::filesystem::path& path);
std::string to_jsonl(const Corpus& corpus);
void save_jsonl(const Corpus& corpus, const std::filesystem::path& path);

struct SeedSplit {
  Corpus seed;
  Corpus rest;
};

struct TrainValSplit {
  Corpus train;
  Corpus val;
};

// Samples round(fraction * |corpus|) conversations (at least one) without
// replacement. Both halves keep the corpus order.
SeedSplit sample_seed(const Corpus& corpus, double fraction, std::uint64_t rng_seed);
// |val| = max(1, round(val_fraction * |corpus|)); needs at least two conversations.
TrainValSplit split_train_val(const Corpus& corpus, double val_fraction, std::uint64_t rng_seed);

Corpus concat_corpora(const Corpus& a, const Corpus& b, std::string name);

// Lowercases ASCII, splits on whitespace and detaches every ASCII punctuation
// character as its own token.
std::vector<std::string> tokenize(std::string_view text);

using TokenSequence = std::vector<int>;

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kSep = 3;
  static constexpr int kSpkA = 4;
  static constexpr int kSpkB = 5;
  static constexpr int kUnk = 6;
  static constexpr int kNumSpecials = 7;

  Vocab();
  // Word tokens in id order; they receive ids kNumSpecials, kNumSpecials+1, ...
  explicit Vocab(std::vector<std::string> words);

  std::size_t size() const { return tokens_.size(); }
  int id_of(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token_of(int id) const;
  // Tokens that may appear inside a turn: every word plus UNK.
  static bool is_word(int id) { return id == kUnk || id >= kNumSpecials; }

  std::vector<int> encode_text(std::string_view text) const;
  std::string decode_text(std::span<const int> ids) const;

  std::string to_json() const;
  static Vocab from_json(std::string_view json);
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Tokens ranked by descending frequency, ties broken lexicographically;
// tokens seen fewer than min_freq times are left out (they encode as UNK).
Vocab build_vocab(const Corpus& corpus, std::size_t max_size, std::size_t min_freq);

inline int speaker_token(Speaker s) { return s == Speaker::A ? Vocab::kSpkA : Vocab::kSpkB; }

// BOS (SPK tokens... SEP)+ EOS. Trailing turns are dropped whole until the
// sequence fits in max_len; throws DataError if even the first turn does not.
TokenSequence encode_conversation(const Conversation& conv, const Vocab& vocab,
                                  std::size_t max_len);
// Appends SPK tokens... SEP for one turn.
void append_turn(TokenSequence& out, const Turn& turn, const Vocab& vocab);

enum class DecodeMode { kStrict, kTolerant };

// Inverse of encode_conversation. Tolerant mode stops at the first malformed
// position and keeps the complete turns read so far; strict mode throws.
// Either way, zero complete turns is a DataError.
Conversation decode_tokens(std::span<const int> tokens, const Vocab& vocab,
                           DecodeMode mode = DecodeMode::kTolerant, std::string id = {});

struct Prompt {
  std::string source_conversation_id;
  std::vector<Turn> turns;  // exactly three
  std::size_t target_turn_count = 0;
};

struct PromptSet {
  std::vector<Prompt> prompts;
  std::size_t skipped = 0;
};

inline constexpr std::size_t kPromptTurns = 3;

PromptSet extract_prompts(const Corpus& corpus);
// BOS followed by the prompt turns, ready for continuation.
TokenSequence encode_prompt(const Prompt& prompt, const Vocab& vocab);

// Deterministic template-grammar dialogues over a fixed 20-topic lexicon.
// Every turn names the topic and introduces a content word that the next
// turn must echo.
Corpus make_toy_corpus(std::size_t n_conversations, std::uint64_t grammar_seed);
std::span<const std::string_view> toy_topics();

}  // namespace gcnforge
