#include <algorithm>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "gcnforge/corpus.hpp"
#include "gcnforge/error.hpp"
#include "gcnforge/util.hpp"

using namespace gcnforge;

namespace {

Conversation conv_of(std::string id, std::vector<std::string> texts) {
  Conversation c;
  c.id = std::move(id);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    c.turns.push_back({i % 2 == 0 ? Speaker::A : Speaker::B, texts[i]});
  }
  return c;
}

std::set<std::string> ids_of(const Corpus& c) {
  std::set<std::string> out;
  for (const auto& conv : c.conversations) out.insert(conv.id);
  return out;
}

}  // namespace

TEST_CASE("jsonl parsing") {
  SUBCASE("two valid conversations") {
    const auto c = parse_jsonl(
        "{\"id\":\"a\",\"turns\":[{\"speaker\":\"A\",\"text\":\"hi\"},{\"speaker\":\"B\",\"text\":\"yo\"}]}\n"
        "{\"id\":\"b\",\"turns\":[{\"speaker\":\"A\",\"text\":\"x\"},{\"speaker\":\"B\",\"text\":\"y\"}],"
        "\"knowledge\":{\"ignored\":true}}\n",
        "t");
    CHECK(c.size() == 2);
    CHECK(c.conversations[1].turns[1].text == "y");
  }
  SUBCASE("repeated speaker names the conversation") {
    try {
      parse_jsonl(
          "{\"id\":\"bad-one\",\"turns\":[{\"speaker\":\"A\",\"text\":\"hi\"},{\"speaker\":\"A\",\"text\":\"yo\"}]}",
          "t");
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("bad-one") != std::string::npos);
    }
  }
  SUBCASE("empty input is an empty corpus") { CHECK(parse_jsonl("", "t").empty()); }
  SUBCASE("speakers are relabelled so A goes first") {
    const auto c = parse_jsonl(
        "{\"id\":\"s\",\"turns\":[{\"speaker\":\"B\",\"text\":\"hi\"},{\"speaker\":\"A\",\"text\":\"yo\"}]}",
        "t");
    CHECK(c.conversations[0].turns[0].speaker == Speaker::A);
    CHECK(c.conversations[0].turns[1].speaker == Speaker::B);
  }
  SUBCASE("malformed line reports its number") {
    try {
      parse_jsonl(
          "{\"id\":\"a\",\"turns\":[{\"speaker\":\"A\",\"text\":\"hi\"},{\"speaker\":\"B\",\"text\":\"yo\"}]}\n{oops\n",
          "t");
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
  }
  SUBCASE("blank turn text and duplicate ids are rejected") {
    CHECK_THROWS_AS(parse_jsonl("{\"id\":\"a\",\"turns\":[{\"speaker\":\"A\",\"text\":\"  \"},"
                                "{\"speaker\":\"B\",\"text\":\"yo\"}]}",
                                "t"),
                    DataError);
    const std::string line =
        "{\"id\":\"a\",\"turns\":[{\"speaker\":\"A\",\"text\":\"hi\"},{\"speaker\":\"B\",\"text\":\"yo\"}]}\n";
    CHECK_THROWS_AS(parse_jsonl(line + line, "t"), DataError);
  }
}

TEST_CASE("jsonl round trip keeps lineage fields") {
  Corpus c{"x", {conv_of("c1", {"hello there", "general kenobi", "you are bold"})}};
  c.conversations[0].synthetic = true;
  c.conversations[0].source_prompt_id = "seed-9";
  const auto back = parse_jsonl(to_jsonl(c), "x");
  REQUIRE(back.size() == 1);
  CHECK(back.conversations[0] == c.conversations[0]);

  const auto dir = std::filesystem::temp_directory_path() / "gcnforge_corpus_test";
  std::filesystem::create_directories(dir);
  save_jsonl(c, dir / "c.jsonl");
  CHECK(load_jsonl(dir / "c.jsonl").conversations[0] == c.conversations[0]);
  CHECK_THROWS_AS(load_jsonl(dir / "missing.jsonl"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("seed sampling") {
  const auto corpus = make_toy_corpus(100, 3);
  const auto s = sample_seed(corpus, 0.1, 5);
  CHECK(s.seed.size() == 10);
  CHECK(s.rest.size() == 90);
  const auto again = sample_seed(corpus, 0.1, 5);
  CHECK(ids_of(again.seed) == ids_of(s.seed));
  CHECK(ids_of(sample_seed(corpus, 0.1, 6).seed) != ids_of(s.seed));

  auto all = ids_of(s.seed);
  for (const auto& id : ids_of(s.rest)) CHECK(all.insert(id).second);
  CHECK(all == ids_of(corpus));

  const auto full = sample_seed(corpus, 1.0, 5);
  CHECK(full.seed.size() == 100);
  CHECK(full.rest.empty());
  CHECK(sample_seed(make_toy_corpus(3, 1), 0.01, 1).seed.size() == 1);
  CHECK_THROWS_AS(sample_seed(corpus, 0.0, 1), ValidationError);
  CHECK_THROWS_AS(sample_seed(corpus, 1.5, 1), ValidationError);
}

TEST_CASE("train/validation split") {
  const auto ten = make_toy_corpus(10, 1);
  auto s = split_train_val(ten, 0.2, 3);
  CHECK(s.train.size() == 8);
  CHECK(s.val.size() == 2);
  auto all = ids_of(s.train);
  for (const auto& id : ids_of(s.val)) CHECK(all.insert(id).second);
  CHECK(all.size() == 10);
  CHECK(ids_of(split_train_val(ten, 0.2, 3).val) == ids_of(s.val));

  const auto two = make_toy_corpus(2, 1);
  s = split_train_val(two, 0.5, 3);
  CHECK(s.train.size() == 1);
  CHECK(s.val.size() == 1);
  CHECK(split_train_val(ten, 0.0, 3).val.size() == 1);
  CHECK_THROWS_AS(split_train_val(make_toy_corpus(1, 1), 0.5, 3), ValidationError);
}

TEST_CASE("tokenization and vocabulary") {
  CHECK(tokenize("Hello, world") == std::vector<std::string>{"hello", ",", "world"});
  const Corpus one{"c", {conv_of("a", {"Hello, world", "Hello"})}};
  const auto v = build_vocab(one, 100, 1);
  CHECK(v.size() == 7 + 3);
  CHECK(v.token_of(7) == "hello");  // most frequent first
  CHECK(v.id_of("<pad>") == Vocab::kPad);
  CHECK(v.id_of("<unk>") == Vocab::kUnk);
  CHECK(v.id_of("never-seen") == Vocab::kUnk);

  SUBCASE("min_freq threshold maps rare words to UNK") {
    const Corpus uniq{"c", {conv_of("a", {"alpha beta", "gamma delta"})}};
    const auto only_specials = build_vocab(uniq, 100, 2);
    CHECK(only_specials.size() == 7);
    for (const int id : only_specials.encode_text("alpha gamma")) CHECK(id == Vocab::kUnk);
  }
  SUBCASE("conversation order does not matter") {
    auto corpus = make_toy_corpus(40, 2);
    const auto a = build_vocab(corpus, 1000, 1);
    std::reverse(corpus.conversations.begin(), corpus.conversations.end());
    std::rotate(corpus.conversations.begin(), corpus.conversations.begin() + 7,
                corpus.conversations.end());
    CHECK(build_vocab(corpus, 1000, 1) == a);
  }
  SUBCASE("size limit and bijection") {
    const auto corpus = make_toy_corpus(50, 2);
    const auto small = build_vocab(corpus, 20, 1);
    CHECK(small.size() == 20);
    for (int id = 0; id < static_cast<int>(small.size()); ++id) {
      CHECK(small.id_of(small.token_of(id)) == id);
    }
    CHECK_THROWS_AS(build_vocab(corpus, 7, 1), ValidationError);
  }
  SUBCASE("json round trip") {
    const auto corpus = make_toy_corpus(20, 2);
    const auto full = build_vocab(corpus, 500, 1);
    CHECK(Vocab::from_json(full.to_json()) == full);
    CHECK_THROWS_AS(Vocab::from_json("{\"tokens\":[\"a\"]}"), DataError);
  }
}

TEST_CASE("conversation encoding layout") {
  const Corpus c{"c", {conv_of("a", {"hi", "yo"})}};
  const auto v = build_vocab(c, 100, 1);
  const auto ids = encode_conversation(c.conversations[0], v, 100);
  const TokenSequence expected = {Vocab::kBos, Vocab::kSpkA, v.id_of("hi"), Vocab::kSep,
                                  Vocab::kSpkB, v.id_of("yo"), Vocab::kSep, Vocab::kEos};
  CHECK(ids == expected);
}

TEST_CASE("encoding truncates whole trailing turns") {
  // Turns of 4, 5 and 6 words: 6 + 7 + 8 tokens each with SPK and SEP.
  const auto conv = conv_of("t", {"a b c d", "e f g h i", "j k l m n o"});
  const auto v = build_vocab(Corpus{"c", {conv}}, 100, 1);
  // BOS + 6 + 7 + EOS = 15 fits in 20; adding the third turn needs 23.
  const auto ids = encode_conversation(conv, v, 20);
  CHECK(ids.size() == 15);
  CHECK(ids.back() == Vocab::kEos);
  const auto back = decode_tokens(ids, v, DecodeMode::kStrict);
  REQUIRE(back.turns.size() == 2);
  CHECK(back.turns[1].text == "e f g h i");
  CHECK(encode_conversation(conv, v, 23).size() == 23);
  CHECK_THROWS_AS(encode_conversation(conv, v, 7), DataError);
}

TEST_CASE("decode tolerance") {
  const auto corpus = make_toy_corpus(30, 4);
  const auto v = build_vocab(corpus, 1000, 1);
  for (const auto& conv : corpus.conversations) {
    const auto ids = encode_conversation(conv, v, 1000);
    auto back = decode_tokens(ids, v, DecodeMode::kStrict, conv.id);
    CHECK(back == conv);
    // Without EOS every SEP-terminated turn is still recovered.
    const std::span<const int> no_eos(ids.data(), ids.size() - 1);
    CHECK(decode_tokens(no_eos, v, DecodeMode::kTolerant, conv.id).turns == conv.turns);
    CHECK_THROWS_AS(decode_tokens(no_eos, v, DecodeMode::kStrict), DataError);
  }
  const TokenSequence empty = {Vocab::kBos, Vocab::kEos};
  CHECK_THROWS_AS(decode_tokens(empty, v), DataError);
  const TokenSequence partial = {Vocab::kBos, Vocab::kSpkA, 8, Vocab::kSep, Vocab::kSpkB, 9};
  CHECK(decode_tokens(partial, v).turns.size() == 1);
}

TEST_CASE("prompt extraction") {
  Corpus c{"c", {}};
  for (int i = 0; i < 10; ++i) {
    std::vector<std::string> turns = {"one", "two", "three"};
    if (i >= 2) turns.push_back("four");
    if (i == 9) turns.push_back("five");
    c.conversations.push_back(conv_of("c" + std::to_string(i), turns));
  }
  const auto set = extract_prompts(c);
  CHECK(set.prompts.size() == 8);
  CHECK(set.skipped == 2);
  const auto& last = set.prompts.back();
  CHECK(last.source_conversation_id == "c9");
  CHECK(last.target_turn_count == 5);
  REQUIRE(last.turns.size() == 3);
  CHECK(last.turns[2].text == "three");
  const auto v = build_vocab(c, 100, 1);
  const auto ids = encode_prompt(last, v);
  CHECK(ids.front() == Vocab::kBos);
  CHECK(ids.back() == Vocab::kSep);
}

TEST_CASE("toy corpus grammar") {
  const auto a = make_toy_corpus(5, 1);
  const auto b = make_toy_corpus(5, 1);
  CHECK(to_jsonl(a) == to_jsonl(b));
  CHECK(to_jsonl(make_toy_corpus(5, 2)) != to_jsonl(a));
  CHECK_THROWS_AS(make_toy_corpus(0, 1), ValidationError);

  const auto corpus = make_toy_corpus(300, 9);
  validate_corpus(corpus);
  const auto topics = toy_topics();
  CHECK(topics.size() == 20);
  for (const auto& conv : corpus.conversations) {
    CHECK(conv.turns.size() >= 4);
    CHECK(conv.turns.size() <= 8);
    // The topic is the one topic word named in the opening turn.
    const auto first = tokenize(conv.turns[0].text);
    std::string topic;
    for (const auto t : topics) {
      if (std::find(first.begin(), first.end(), t) != first.end()) topic = std::string(t);
    }
    REQUIRE_FALSE(topic.empty());
    for (std::size_t i = 1; i < conv.turns.size(); ++i) {
      const auto toks = tokenize(conv.turns[i].text);
      CHECK(std::find(toks.begin(), toks.end(), topic) != toks.end());
    }
  }
  CHECK(build_vocab(corpus, 100000, 1).size() - Vocab::kNumSpecials <= 200);
}
