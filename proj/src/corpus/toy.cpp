#include <array>
#include <string>

#include "gcnforge/corpus.hpp"
#include "gcnforge/error.hpp"
#include "gcnforge/rng.hpp"

namespace gcnforge {

namespace {

constexpr std::size_t kTopics = 20;
constexpr std::size_t kContentPerTopic = 6;

constexpr std::array<std::string_view, kTopics> kTopicWords = {
    "music", "movies", "football", "cooking", "travel",  "books", "science",
    "art",   "history", "dogs",    "cats",    "space",   "ocean", "coffee",
    "games", "weather", "cars",    "gardens", "dance",   "poetry"};

constexpr std::array<std::array<std::string_view, kContentPerTopic>, kTopics> kContentWords = {{
    {"guitar", "drums", "jazz", "piano", "concerts", "lyrics"},
    {"actors", "scripts", "cinema", "trailers", "comedies", "directors"},
    {"goals", "coaches", "stadiums", "players", "tactics", "referees"},
    {"recipes", "spices", "ovens", "pasta", "soups", "bread"},
    {"flights", "hotels", "beaches", "maps", "trains", "museums"},
    {"novels", "authors", "chapters", "libraries", "characters", "plots"},
    {"experiments", "atoms", "labs", "theories", "physics", "chemistry"},
    {"paintings", "sculptures", "galleries", "colors", "sketches", "brushes"},
    {"empires", "battles", "kings", "castles", "ruins", "archives"},
    {"puppies", "leashes", "parks", "bones", "walks", "breeds"},
    {"kittens", "whiskers", "naps", "toys", "boxes", "purring"},
    {"planets", "rockets", "stars", "astronauts", "moons", "telescopes"},
    {"waves", "whales", "reefs", "tides", "sharks", "boats"},
    {"espresso", "beans", "mugs", "baristas", "lattes", "cafes"},
    {"puzzles", "consoles", "levels", "chess", "cards", "dice"},
    {"storms", "rain", "clouds", "snow", "winds", "forecasts"},
    {"engines", "wheels", "roads", "brakes", "racing", "garages"},
    {"flowers", "seeds", "roses", "soil", "trees", "vegetables"},
    {"ballet", "salsa", "steps", "rhythm", "costumes", "tango"},
    {"verses", "rhymes", "sonnets", "poets", "stanzas", "metaphors"},
}};

// {T} = topic, {C} = content word introduced by this turn, {P} = the content
// word introduced by the previous turn.
constexpr std::array<std::string_view, 4> kOpeners = {
    "do you like {T} ? i love {C} .",
    "let us talk about {T} and {C} .",
    "i read about {T} and {C} today .",
    "what about {T} , like {C} ?",
};

constexpr std::array<std::string_view, 6> kResponses = {
    "yes , {P} and {C} make {T} fun .",
    "{P} ? i prefer {C} for {T} .",
    "i like {P} , but {T} needs {C} .",
    "sure , {T} has {P} and {C} .",
    "true , {P} are great , {C} too in {T} .",
    "hmm , {T} with {P} or {C} ?",
};

std::string fill(std::string_view tmpl, std::string_view topic, std::string_view content,
                 std::string_view prev) {
  std::string out;
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    if (tmpl[i] == '{' && i + 2 < tmpl.size() && tmpl[i + 2] == '}') {
      switch (tmpl[i + 1]) {
        case 'T': out += topic; break;
        case 'C': out += content; break;
        case 'P': out += prev; break;
        default: throw Error("toy grammar: unknown slot");
      }
      i += 2;
    } else {
      out += tmpl[i];
    }
  }
  return out;
}

}  // namespace

std::span<const std::string_view> toy_topics() { return kTopicWords; }

Corpus make_toy_corpus(std::size_t n_conversations, std::uint64_t grammar_seed) {
  if (n_conversations == 0) throw ValidationError("toy corpus needs at least one conversation");
  Corpus corpus{"toy", {}};
  const Rng root(grammar_seed, 0x70c0);
  for (std::size_t c = 0; c < n_conversations; ++c) {
    Rng rng = root.split(c);
    const std::size_t topic = rng.below(kTopics);
    const auto& contents = kContentWords[topic];
    const std::size_t n_turns = 4 + rng.below(5);
    Conversation conv;
    conv.id = "toy-" + std::to_string(c);
    std::size_t prev = rng.below(kContentPerTopic);
    conv.turns.push_back(Turn{Speaker::A, fill(kOpeners[rng.below(kOpeners.size())],
                                               kTopicWords[topic], contents[prev], "")});
    for (std::size_t t = 1; t < n_turns; ++t) {
      // A fresh content word, different from the one being echoed.
      std::size_t next = rng.below(kContentPerTopic - 1);
      if (next >= prev) ++next;
      const auto& tmpl = kResponses[rng.below(kResponses.size())];
      conv.turns.push_back(Turn{t % 2 == 0 ? Speaker::A : Speaker::B,
                                fill(tmpl, kTopicWords[topic], contents[next], contents[prev])});
      prev = next;
    }
    corpus.conversations.push_back(std::move(conv));
  }
  return corpus;
}

}  // namespace gcnforge
