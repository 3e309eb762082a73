#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gcnforge/corpus.hpp"
#include "gcnforge/lm.hpp"

namespace gcnforge {

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Harmonic mean, 0 when both inputs are 0.
double harmonic_mean(double p, double r);

// Clipped n-gram statistics accumulated over one or many hypothesis/reference
// pairs; the corpus-level BLEU is computed from the sums.
struct BleuStats {
  explicit BleuStats(std::size_t max_n = 4);

  void add(std::span<const int> hyp, std::span<const int> ref);
  // Geometric mean of the n-gram precisions times the brevity penalty. With
  // smoothing, orders > 1 use (matches + 1) / (total + 1).
  double score(bool smooth = true) const;

  std::size_t max_n;
  std::vector<double> matches;
  std::vector<double> totals;
  double hyp_length = 0.0;
  double ref_length = 0.0;
};

double bleu(std::span<const int> hyp, std::span<const int> ref, std::size_t max_n = 4,
            bool smooth = true);
PRF rouge_n(std::span<const int> hyp, std::span<const int> ref, std::size_t n);
PRF rouge_l(std::span<const int> hyp, std::span<const int> ref);
std::size_t lcs_length(std::span<const int> a, std::span<const int> b);

// Frozen token vectors indexed by vocabulary id. Rows are unit length or
// exactly zero (tokens never observed in the training text).
struct EmbeddingTable {
  std::size_t vocab_size = 0;
  std::size_t dim = 0;
  std::vector<double> vectors;  // [vocab_size, dim]
  bool frozen = true;

  std::span<const double> row(int id) const;
  // Cosine of two rows; 0 when either row is zero.
  double cosine(int a, int b) const;

  void save(const std::filesystem::path& path) const;
  static EmbeddingTable load(const std::filesystem::path& path);

  friend bool operator==(const EmbeddingTable&, const EmbeddingTable&) = default;
};

// Positive PMI over a symmetric co-occurrence window within each turn,
// factored by truncated eigendecomposition (the PPMI matrix is symmetric, so
// its singular vectors are eigenvectors). Row i is u_i * sqrt(sigma), then
// L2-normalized. Each singular vector's largest-magnitude component is made
// positive.
EmbeddingTable train_embeddings(const Corpus& corpus, const Vocab& vocab, std::size_t dim = 32,
                                std::size_t window = 2);

// Greedy matching: every token pairs with its most similar counterpart.
// Similarity is the cosine clamped to [0, 1], and 1 for identical ids.
PRF embed_score(std::span<const int> hyp, std::span<const int> ref, const EmbeddingTable& table);

struct RewardWeights {
  double bleu = 0.1;
  double rouge1 = 0.01;
  double embed = 0.95;

  void validate() const;
};

double combined_reward(double bleu, double rouge1_f, double embed_f, const RewardWeights& w);

struct MetricReport {
  double bleu = 0.0;
  double rouge1_f = 0.0;
  double rouge2_f = 0.0;
  double rougeL_f = 0.0;
  double embed_f = 0.0;
  double combined_reward = 0.0;
  std::size_t n_samples = 0;

  std::string to_json() const;
  static MetricReport from_json(std::string_view text);
};

// Scores aligned hypothesis/reference pairs: BLEU at corpus level, ROUGE and
// embedding scores macro-averaged.
MetricReport score_responses(std::span<const TokenSequence> hyps,
                             std::span<const TokenSequence> refs, const EmbeddingTable& table,
                             const RewardWeights& weights);

struct EvalConfig {
  std::size_t max_new_tokens = 32;
  std::size_t threads = 1;
};

// One sample per turn i >= 2 of every conversation: greedy response from the
// gold context, compared with the gold turn.
struct EvalSamples {
  std::vector<TokenSequence> hyps;
  std::vector<TokenSequence> refs;
};

EvalSamples learner_responses(const LMModel& learner, const Corpus& corpus, const Vocab& vocab,
                              const EvalConfig& config);

MetricReport evaluate_learner(const LMModel& learner, const Corpus& corpus, const Vocab& vocab,
                              const EmbeddingTable& table, const EvalConfig& config,
                              const RewardWeights& weights);

}  // namespace gcnforge
