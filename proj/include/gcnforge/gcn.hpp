#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gcnforge/corpus.hpp"
#include "gcnforge/lm.hpp"
#include "gcnforge/metrics.hpp"
#include "gcnforge/ppo.hpp"

namespace gcnforge {

struct GCNConfig {
  double seed_fraction = 0.1;
  double val_fraction = 0.2;
  // Share of the non-seed conversations held out as the test split.
  double test_fraction = 0.1;
  std::size_t vocab_max_size = 5000;
  std::size_t vocab_min_freq = 1;
  std::size_t embedding_dim = 32;
  std::size_t embedding_window = 2;

  std::size_t conversations_per_iteration = 32;
  // Size of the final synthetic dataset; 0 means |seed_train|.
  std::size_t final_conversations = 0;

  // vocab_size is filled in from the prepared vocabulary.
  LMConfig generator_model{0, 32, 2, 4, 128, 0.0, 0.02};
  LMConfig learner_model{0, 32, 2, 4, 128, 0.0, 0.02};
  TrainHyper generator_pretrain{3e-3, 8, 400, 1.0, 0};
  TrainHyper learner{3e-3, 8, 1000, 1.0, 0};
  PPOConfig ppo;
  GenerationConfig gen{96, 0.9, 20, 0, true, 0};
  RewardWeights weights;
  EvalConfig eval;

  double tolerance = 1e-3;
  std::size_t patience = 3;
  std::size_t max_iterations = 50;
  std::uint64_t rng_seed = 0;
  // false runs the loop without ever updating the generator.
  bool update_generator = true;
  std::size_t threads = 1;

  GCNConfig();

  // Throws ConfigError naming the offending key.
  void validate() const;

  // Flat JSON object with dotted keys ("ppo.lr", "learner.steps", ...).
  std::string to_json() const;
  // Keys absent from `text` keep their defaults; nested objects are
  // flattened into dotted keys. Unknown keys are a ConfigError.
  static GCNConfig from_json(std::string_view text);
  // Parses `value` as the type of `key`.
  void set(std::string_view key, std::string_view value);
  static std::vector<std::string> keys();
};

// The splits every GCN experiment starts from.
struct PreparedData {
  Corpus seed_train;
  Corpus seed_val;
  Corpus rest;  // non-seed conversations outside the test split
  Corpus test;
  Vocab vocab;
  EmbeddingTable embeddings;

  void save(const std::filesystem::path& dir) const;
  static PreparedData load(const std::filesystem::path& dir);
  static std::vector<std::string> file_names();
};

// Seed sample, 80/20 train/val split of the seed, test sample of the rest.
// The vocabulary covers the whole corpus; embeddings are fitted on seed_train.
PreparedData prepare_data(const Corpus& corpus, const GCNConfig& config);

LMModel pretrain_generator(const Corpus& seed_train, const Vocab& vocab, const GCNConfig& config);

struct GeneratedData {
  Corpus dataset;
  RolloutBatch rollouts;
};

// Samples n prompts (with replacement only when there are fewer than n),
// continues each by self-play and keeps the conversations that gained at
// least one complete turn. Synthetic conversations start with their prompt's
// turns verbatim.
GeneratedData generate_dataset(const LMModel& generator, const LMModel& reference,
                               const ValueHead& value_head, const PromptSet& prompts,
                               const Vocab& vocab, std::size_t n, const GenerationConfig& gen,
                               std::uint64_t sample_seed, std::size_t threads);

// Fresh learner from init_lm(learner_model, base_seed), trained on the
// response examples of `train_data`.
LMModel spawn_and_train_learner(const Corpus& train_data, const Vocab& vocab,
                                const LMConfig& learner_model, const TrainHyper& hyper,
                                std::uint64_t base_seed);

struct IterationRecord {
  std::size_t iteration = 0;
  std::size_t dataset_size = 0;
  double reward = 0.0;
  MetricReport report;
  PPOStats ppo;
  double rollout_kl = 0.0;
  bool ppo_applied = false;
  double seconds = 0.0;

  // Everything except the wall-clock time, so identical runs serialize
  // identically.
  std::string to_json() const;
  static IterationRecord from_json(std::string_view text);
};

// Generator, frozen reference and PPO state of one meta-loop.
class GCNLoop {
 public:
  GCNLoop(const GCNConfig& config, const PreparedData& data, LMModel pretrained);

  // One round of generate, learn, evaluate and (unless disabled) update.
  IterationRecord step();

  const LMModel& generator() const { return generator_; }
  const LMModel& reference() const { return reference_; }
  const PPOState& ppo_state() const { return ppo_; }
  std::size_t iterations_done() const { return iteration_; }

 private:
  GCNConfig config_;
  const PreparedData* data_;
  PromptSet prompts_;
  LMModel generator_;
  LMModel reference_;
  PPOState ppo_;
  std::size_t iteration_ = 0;
};

// Convergence test over the reward history so far.
bool converged(std::span<const IterationRecord> history, double tolerance, std::size_t patience);

struct GCNRun {
  std::vector<IterationRecord> history;
  std::size_t best_iteration = 0;
  LMModel best_generator;
  Corpus final_dataset;
  LMModel final_learner;
  std::size_t final_train_size = 0;
  MetricReport final_val_report;
};

struct RunOptions {
  // When set, the run directory is written as the loop progresses.
  std::optional<std::filesystem::path> run_dir;
  std::function<void(const IterationRecord&)> on_iteration;
};

// Pretrains the generator, iterates GCNLoop until convergence or
// max_iterations, then trains the final learner on seed_train plus a fresh
// synthetic dataset from the best generator.
GCNRun run_gcn(const GCNConfig& config, const PreparedData& data, const RunOptions& options = {});
// Same, starting from an already pretrained generator.
GCNRun run_gcn(const GCNConfig& config, const PreparedData& data, const LMModel& pretrained,
               const RunOptions& options = {});

struct ConditionResult {
  std::string condition;
  MetricReport report;
  std::size_t train_conversations = 0;
};

struct BaselineResults {
  // full_data, seed_only, gcn, gcn_no_rl
  std::vector<ConditionResult> conditions;
  GCNRun gcn;
  GCNRun gcn_no_rl;

  const ConditionResult& at(std::string_view condition) const;
  std::string to_csv() const;
};

// Trains the four learners and scores each on the test split. The two GCN
// conditions run from identical seeds and differ only in update_generator.
// Run directories go to <out_dir>/gcn and <out_dir>/gcn_no_rl when given.
BaselineResults run_baselines(const GCNConfig& config, const PreparedData& data,
                              const std::optional<std::filesystem::path>& out_dir = std::nullopt);

}  // namespace gcnforge
