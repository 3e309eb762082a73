#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "gcnforge/corpus.hpp"
#include "gcnforge/error.hpp"
#include "gcnforge/rng.hpp"
#include "json.hpp"

namespace gcnforge {

namespace {

using nlohmann::json;

bool is_blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

Speaker parse_speaker(const json& value, const std::string& conv_id) {
  if (value.is_string()) {
    const auto& s = value.get_ref<const std::string&>();
    if (s == "A") return Speaker::A;
    if (s == "B") return Speaker::B;
  }
  throw DataError("conversation '" + conv_id + "': speaker must be \"A\" or \"B\"");
}

// Indices 0..n-1 in a seeded random order.
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t rng_seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(rng_seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

// Splits corpus into (first k of a seeded permutation, remainder), each in
// original corpus order.
std::pair<Corpus, Corpus> partition(const Corpus& corpus, std::size_t k, std::uint64_t rng_seed,
                                    const std::string& first_name,
                                    const std::string& second_name) {
  auto idx = shuffled_indices(corpus.size(), rng_seed);
  std::vector<bool> chosen(corpus.size(), false);
  for (std::size_t i = 0; i < k; ++i) chosen[idx[i]] = true;
  Corpus first{first_name, {}};
  Corpus second{second_name, {}};
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    (chosen[i] ? first : second).conversations.push_back(corpus.conversations[i]);
  }
  return {std::move(first), std::move(second)};
}

}  // namespace

void validate_conversation(const Conversation& conv) {
  if (conv.turns.size() < 2) {
    throw DataError("conversation '" + conv.id + "' has " + std::to_string(conv.turns.size()) +
                    " turn(s); at least 2 are required");
  }
  if (conv.turns.front().speaker != Speaker::A) {
    throw DataError("conversation '" + conv.id + "' must start with speaker A");
  }
  for (std::size_t i = 0; i < conv.turns.size(); ++i) {
    if (is_blank(conv.turns[i].text)) {
      throw DataError("conversation '" + conv.id + "' turn " + std::to_string(i + 1) +
                      " has empty text");
    }
    if (i > 0 && conv.turns[i].speaker == conv.turns[i - 1].speaker) {
      throw DataError("conversation '" + conv.id + "' has non-alternating speakers at turn " +
                      std::to_string(i + 1));
    }
  }
}

void validate_corpus(const Corpus& corpus) {
  std::unordered_set<std::string> ids;
  for (const auto& conv : corpus.conversations) {
    validate_conversation(conv);
    if (!ids.insert(conv.id).second) throw DataError("duplicate conversation id '" + conv.id + "'");
  }
}

Corpus parse_jsonl(std::string_view text, std::string name) {
  Corpus corpus{std::move(name), {}};
  std::unordered_set<std::string> ids;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (is_blank(line)) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError("line " + std::to_string(line_no) + ": malformed JSON (" + e.what() + ")");
    }
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (!obj.is_object() || !obj.contains("id") || !obj["id"].is_string()) {
      throw DataError(where + "expected an object with a string \"id\"");
    }
    Conversation conv;
    conv.id = obj["id"].get<std::string>();
    if (!obj.contains("turns") || !obj["turns"].is_array()) {
      throw DataError(where + "conversation '" + conv.id + "' needs a \"turns\" array");
    }
    for (const auto& t : obj["turns"]) {
      if (!t.is_object() || !t.contains("speaker") || !t.contains("text") ||
          !t["text"].is_string()) {
        throw DataError(where + "conversation '" + conv.id +
                        "' has a turn without speaker/text fields");
      }
      conv.turns.push_back(Turn{parse_speaker(t["speaker"], conv.id), t["text"].get<std::string>()});
    }
    if (!conv.turns.empty() && conv.turns.front().speaker == Speaker::B) {
      for (auto& t : conv.turns) t.speaker = other(t.speaker);
    }
    if (obj.contains("source_prompt_id") && obj["source_prompt_id"].is_string()) {
      conv.source_prompt_id = obj["source_prompt_id"].get<std::string>();
    }
    if (obj.contains("synthetic") && obj["synthetic"].is_boolean()) {
      conv.synthetic = obj["synthetic"].get<bool>();
    }
    try {
      validate_conversation(conv);
    } catch (const DataError& e) {
      throw DataError(where + e.what());
    }
    if (!ids.insert(conv.id).second) {
      throw DataError(where + "duplicate conversation id '" + conv.id + "'");
    }
    corpus.conversations.push_back(std::move(conv));
  }
  return corpus;
}

Corpus load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_jsonl(ss.str(), path.stem().string());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::string to_jsonl(const Corpus& corpus) {
  std::string out;
  for (const auto& conv : corpus.conversations) {
    json obj;
    obj["id"] = conv.id;
    json turns = json::array();
    for (const auto& t : conv.turns) {
      turns.push_back({{"speaker", t.speaker == Speaker::A ? "A" : "B"}, {"text", t.text}});
    }
    obj["turns"] = std::move(turns);
    if (conv.source_prompt_id) obj["source_prompt_id"] = *conv.source_prompt_id;
    if (conv.synthetic) obj["synthetic"] = true;
    out += obj.dump();
    out += '\n';
  }
  return out;
}

void save_jsonl(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write corpus file '" + path.string() + "'");
  out << to_jsonl(corpus);
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

SeedSplit sample_seed(const Corpus& corpus, double fraction, std::uint64_t rng_seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ValidationError("seed fraction must be in (0, 1], got " + std::to_string(fraction));
  }
  if (corpus.empty()) throw ValidationError("cannot sample a seed from an empty corpus");
  const auto n = corpus.size();
  const auto k = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))), 1, n);
  auto [seed, rest] = partition(corpus, k, rng_seed, corpus.name + "_seed", corpus.name + "_rest");
  return {std::move(seed), std::move(rest)};
}

TrainValSplit split_train_val(const Corpus& corpus, double val_fraction, std::uint64_t rng_seed) {
  if (!(val_fraction >= 0.0 && val_fraction <= 1.0)) {
    throw ValidationError("validation fraction must be in [0, 1], got " +
                          std::to_string(val_fraction));
  }
  if (corpus.size() < 2) {
    throw DataError("corpus too small to split: " + std::to_string(corpus.size()) +
                    " conversation(s), need at least 2");
  }
  const auto n = corpus.size();
  const auto k = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n))), 1, n - 1);
  auto [val, train] = partition(corpus, k, rng_seed, corpus.name + "_val", corpus.name + "_train");
  return {std::move(train), std::move(val)};
}

Corpus concat_corpora(const Corpus& a, const Corpus& b, std::string name) {
  Corpus out{std::move(name), a.conversations};
  out.conversations.insert(out.conversations.end(), b.conversations.begin(),
                           b.conversations.end());
  return out;
}

}  // namespace gcnforge
