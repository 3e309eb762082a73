#include "gcnforge/error.hpp"
#include "gcnforge/gcn.hpp"
#include "gcnforge/rng.hpp"

namespace gcnforge {

namespace {

constexpr const char* kSeedTrain = "seed_train.jsonl";
constexpr const char* kSeedVal = "seed_val.jsonl";
constexpr const char* kRest = "rest.jsonl";
constexpr const char* kTest = "test.jsonl";
constexpr const char* kVocab = "vocab.json";
constexpr const char* kEmbeddings = "embeddings.bin";

Corpus renamed(Corpus c, std::string name) {
  c.name = std::move(name);
  return c;
}

}  // namespace

std::vector<std::string> PreparedData::file_names() {
  return {kSeedTrain, kSeedVal, kRest, kTest, kVocab, kEmbeddings};
}

void PreparedData::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  save_jsonl(seed_train, dir / kSeedTrain);
  save_jsonl(seed_val, dir / kSeedVal);
  save_jsonl(rest, dir / kRest);
  save_jsonl(test, dir / kTest);
  vocab.save(dir / kVocab);
  embeddings.save(dir / kEmbeddings);
}

PreparedData PreparedData::load(const std::filesystem::path& dir) {
  PreparedData d;
  d.seed_train = load_jsonl(dir / kSeedTrain);
  d.seed_val = load_jsonl(dir / kSeedVal);
  d.rest = load_jsonl(dir / kRest);
  d.test = load_jsonl(dir / kTest);
  d.vocab = Vocab::load(dir / kVocab);
  d.embeddings = EmbeddingTable::load(dir / kEmbeddings);
  if (d.embeddings.vocab_size != d.vocab.size()) {
    throw DataError("prepared data: embeddings cover " + std::to_string(d.embeddings.vocab_size) +
                    " ids but the vocabulary has " + std::to_string(d.vocab.size()));
  }
  if (d.seed_train.empty() || d.seed_val.empty()) {
    throw DataError("prepared data: seed_train and seed_val must be non-empty");
  }
  return d;
}

PreparedData prepare_data(const Corpus& corpus, const GCNConfig& config) {
  config.validate();
  validate_corpus(corpus);
  if (corpus.size() < 4) {
    throw ValidationError("corpus of " + std::to_string(corpus.size()) +
                          " conversations is too small for seed, validation and test splits");
  }
  const Rng root(config.rng_seed);
  const auto seed = sample_seed(corpus, config.seed_fraction, root.split("seed").next_u64());
  if (seed.seed.size() < 2) {
    throw ValidationError("seed sample of " + std::to_string(seed.seed.size()) +
                          " conversation cannot be split into train and validation");
  }
  if (seed.rest.size() < 2) {
    throw ValidationError("only " + std::to_string(seed.rest.size()) +
                          " conversations remain outside the seed; need at least 2 for a test split");
  }
  const auto tv = split_train_val(seed.seed, config.val_fraction, root.split("val").next_u64());
  const auto held = sample_seed(seed.rest, config.test_fraction, root.split("test").next_u64());

  PreparedData d;
  d.seed_train = renamed(tv.train, "seed_train");
  d.seed_val = renamed(tv.val, "seed_val");
  d.rest = renamed(held.rest, "rest");
  d.test = renamed(held.seed, "test");
  d.vocab = build_vocab(corpus, config.vocab_max_size, config.vocab_min_freq);
  d.embeddings =
      train_embeddings(d.seed_train, d.vocab, config.embedding_dim, config.embedding_window);
  return d;
}

}  // namespace gcnforge
