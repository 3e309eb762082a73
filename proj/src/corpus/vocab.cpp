#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "gcnforge/corpus.hpp"
#include "gcnforge/error.hpp"
#include "json.hpp"

namespace gcnforge {

namespace {

constexpr std::string_view kSpecialNames[Vocab::kNumSpecials] = {"PAD",   "BOS",   "EOS", "SEP",
                                                                 "SPK_A", "SPK_B", "UNK"};
constexpr std::string_view kSpecialTokens[Vocab::kNumSpecials] = {
    "<pad>", "<bos>", "<eos>", "<sep>", "<spk_a>", "<spk_b>", "<unk>"};

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return out;
}

Vocab::Vocab() : Vocab(std::vector<std::string>{}) {}

Vocab::Vocab(std::vector<std::string> words) {
  tokens_.reserve(words.size() + kNumSpecials);
  for (const auto s : kSpecialTokens) tokens_.emplace_back(s);
  for (auto& w : words) tokens_.push_back(std::move(w));
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw DataError("vocabulary token '" + tokens_[i] + "' appears twice");
    }
  }
}

int Vocab::id_of(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const {
  return index_.contains(std::string(token));
}

const std::string& Vocab::token_of(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ShapeError("token id " + std::to_string(id) + " outside vocabulary of " +
                     std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode_text(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& tok : tokenize(text)) ids.push_back(id_of(tok));
  return ids;
}

std::string Vocab::decode_text(std::span<const int> ids) const {
  std::string out;
  for (const int id : ids) {
    if (!out.empty()) out += ' ';
    out += token_of(id);
  }
  return out;
}

std::string Vocab::to_json() const {
  nlohmann::json j;
  j["tokens"] = tokens_;
  nlohmann::json specials = nlohmann::json::object();
  for (int i = 0; i < kNumSpecials; ++i) specials[std::string(kSpecialNames[i])] = i;
  j["specials"] = std::move(specials);
  return j.dump(1);
}

Vocab Vocab::from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("vocab: malformed JSON (") + e.what() + ")");
  }
  if (!j.contains("tokens") || !j["tokens"].is_array()) {
    throw DataError("vocab: missing \"tokens\" array");
  }
  const auto tokens = j["tokens"].get<std::vector<std::string>>();
  if (tokens.size() < static_cast<std::size_t>(kNumSpecials)) {
    throw DataError("vocab: fewer tokens than special ids");
  }
  for (int i = 0; i < kNumSpecials; ++i) {
    if (tokens[static_cast<std::size_t>(i)] != kSpecialTokens[i]) {
      throw DataError("vocab: id " + std::to_string(i) + " must hold " +
                      std::string(kSpecialTokens[i]));
    }
    if (j.contains("specials")) {
      const auto& sp = j["specials"];
      const std::string key(kSpecialNames[i]);
      if (!sp.contains(key) || sp[key].get<int>() != i) {
        throw DataError("vocab: special " + key + " must map to id " + std::to_string(i));
      }
    }
  }
  return Vocab(std::vector<std::string>(tokens.begin() + kNumSpecials, tokens.end()));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write vocab '" + path.string() + "'");
  out << to_json() << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open vocab '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

Vocab build_vocab(const Corpus& corpus, std::size_t max_size, std::size_t min_freq) {
  if (max_size < static_cast<std::size_t>(Vocab::kNumSpecials) + 1) {
    throw ValidationError("vocab max_size must be at least 8, got " + std::to_string(max_size));
  }
  if (corpus.empty()) throw ValidationError("cannot build a vocabulary from an empty corpus");
  std::map<std::string, std::size_t> freq;
  for (const auto& conv : corpus.conversations) {
    for (const auto& turn : conv.turns) {
      for (auto& tok : tokenize(turn.text)) ++freq[std::move(tok)];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  const std::size_t capacity = max_size - Vocab::kNumSpecials;
  for (auto& [tok, count] : ranked) {
    if (words.size() >= capacity) break;
    if (count < min_freq) break;
    words.push_back(tok);
  }
  return Vocab(std::move(words));
}

void append_turn(TokenSequence& out, const Turn& turn, const Vocab& vocab) {
  out.push_back(speaker_token(turn.speaker));
  const auto ids = vocab.encode_text(turn.text);
  out.insert(out.end(), ids.begin(), ids.end());
  out.push_back(Vocab::kSep);
}

TokenSequence encode_conversation(const Conversation& conv, const Vocab& vocab,
                                  std::size_t max_len) {
  TokenSequence out{Vocab::kBos};
  for (std::size_t i = 0; i < conv.turns.size(); ++i) {
    TokenSequence turn;
    append_turn(turn, conv.turns[i], vocab);
    if (out.size() + turn.size() + 1 > max_len) {
      if (i == 0) {
        throw DataError("conversation '" + conv.id + "': first turn needs " +
                        std::to_string(turn.size() + 2) + " tokens, max_len is " +
                        std::to_string(max_len));
      }
      break;
    }
    out.insert(out.end(), turn.begin(), turn.end());
  }
  out.push_back(Vocab::kEos);
  return out;
}

Conversation decode_tokens(std::span<const int> tokens, const Vocab& vocab, DecodeMode mode,
                           std::string id) {
  if (tokens.empty() || tokens[0] != Vocab::kBos) {
    throw DataError("decode: token sequence must begin with BOS");
  }
  Conversation conv;
  conv.id = std::move(id);
  auto malformed = [&](std::size_t pos, const std::string& why) {
    if (mode == DecodeMode::kStrict) {
      throw DataError("decode: malformed sequence at position " + std::to_string(pos) + ": " + why);
    }
  };
  Speaker expected = Speaker::A;
  std::size_t i = 1;
  bool terminated = false;
  while (i < tokens.size()) {
    const int tok = tokens[i];
    if (tok == Vocab::kEos) {
      terminated = true;
      if (i + 1 != tokens.size()) malformed(i + 1, "tokens after EOS");
      break;
    }
    if (tok != speaker_token(expected)) {
      malformed(i, "expected the next speaker token");
      break;
    }
    std::size_t j = i + 1;
    while (j < tokens.size() && Vocab::is_word(tokens[j])) ++j;
    if (j >= tokens.size() || tokens[j] != Vocab::kSep) {
      malformed(j, "turn not terminated by SEP");
      break;
    }
    if (j == i + 1) {
      malformed(j, "empty turn");
      break;
    }
    conv.turns.push_back(Turn{expected, vocab.decode_text(tokens.subspan(i + 1, j - i - 1))});
    expected = other(expected);
    i = j + 1;
  }
  if (!terminated && i >= tokens.size()) malformed(tokens.size(), "missing EOS");
  if (conv.turns.empty()) throw DataError("decode: no complete turn in token sequence");
  return conv;
}

PromptSet extract_prompts(const Corpus& corpus) {
  PromptSet set;
  for (const auto& conv : corpus.conversations) {
    if (conv.turns.size() < kPromptTurns + 1) {
      ++set.skipped;
      continue;
    }
    Prompt p;
    p.source_conversation_id = conv.id;
    p.turns.assign(conv.turns.begin(), conv.turns.begin() + kPromptTurns);
    p.target_turn_count = conv.turns.size();
    set.prompts.push_back(std::move(p));
  }
  return set;
}

TokenSequence encode_prompt(const Prompt& prompt, const Vocab& vocab) {
  TokenSequence out{Vocab::kBos};
  for (const auto& t : prompt.turns) append_turn(out, t, vocab);
  return out;
}

}  // namespace gcnforge
