#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gcnforge/corpus.hpp"
#include "gcnforge/rng.hpp"
#include "gcnforge/tensor.hpp"

namespace gcnforge {

struct LMConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t max_seq = 256;
  double dropout = 0.1;
  double init_scale = 0.02;

  // Throws ConfigError unless d_model % n_heads == 0, max_seq >= 16 and the
  // remaining fields are in range.
  void validate() const;

  friend bool operator==(const LMConfig&, const LMConfig&) = default;
};

struct TransformerBlock {
  Tensor ln1_gain, ln1_bias;
  Tensor w_qkv, b_qkv;  // [d, 3d], [3d]
  Tensor w_out, b_out;  // [d, d], [d]
  Tensor ln2_gain, ln2_bias;
  Tensor w_fc, b_fc;      // [d, 4d], [4d]
  Tensor w_proj, b_proj;  // [4d, d], [d]
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Pre-LayerNorm decoder-only transformer. The output projection is the token
// embedding itself (weight tying).
class LMModel {
 public:
  LMConfig config;
  Tensor tok_emb;  // [vocab, d]
  Tensor pos_emb;  // [max_seq, d]
  std::vector<TransformerBlock> blocks;
  Tensor lnf_gain, lnf_bias;

  const Tensor& output_weight() const { return tok_emb; }

  // Stable order; this is also the checkpoint payload order.
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  // Deep copy with independent storage.
  LMModel clone() const;
};

// Gaussian(0, init_scale^2) weights, zero biases, unit LayerNorm gains.
LMModel init_lm(const LMConfig& config, std::uint64_t rng_seed);

struct ForwardPass {
  Tensor logits;  // [n, vocab]
  Tensor hidden;  // [n, d], final normalized hidden state
};

// Runs the packed sequences through the model on `tape`. When dropout_rng is
// given, dropout is applied (training mode); otherwise the pass is
// deterministic.
ForwardPass forward_packed(Tape& tape, const LMModel& model,
                           std::span<const std::span<const int>> seqs, Rng* dropout_rng = nullptr);

// Eval-mode logits for a single sequence, shape [len, vocab].
Tensor forward(const LMModel& model, std::span<const int> tokens);

// One training sequence. loss_mask[t] != 0 marks tokens[t] as a prediction
// target (predicted from position t - 1); loss_mask[0] is ignored.
struct Example {
  TokenSequence tokens;
  std::vector<std::uint8_t> loss_mask;
};

struct LmDataset {
  std::vector<Example> examples;
  std::size_t dropped = 0;  // examples that could not fit in max_seq
};

// Mean next-token NLL over unmasked targets; PAD targets never count.
Tensor nll_loss(Tape& tape, const LMModel& model, std::span<const Example> batch,
                Rng* dropout_rng = nullptr);
double nll_loss(const LMModel& model, std::span<const Example> batch);

struct TrainHyper {
  double lr = 1e-3;
  std::size_t batch_size = 8;
  std::size_t steps = 200;
  double clip_norm = 1.0;
  std::uint64_t rng_seed = 0;
};

// Called after each step with the number of steps taken and that step's
// batch loss; returning false ends training early.
using StepCallback = std::function<bool(std::size_t, double)>;

// Adam with global-norm clipping; returns the loss of every step.
std::vector<double> train_supervised(LMModel& model, const LmDataset& dataset,
                                     const TrainHyper& hyper, const StepCallback& after_step = {});

struct GenerationConfig {
  std::size_t max_new_tokens = 64;
  // 0 selects greedy argmax decoding.
  double temperature = 0.9;
  // 0 disables top-k filtering.
  std::size_t top_k = 20;
  std::uint64_t rng_seed = 0;
  // Forces the alternating speaker token after every SEP and restricts the
  // remaining positions to tokens that keep the dialogue well formed.
  bool enforce_dialogue_grammar = true;
  // Stop after this many SEP tokens have been generated (0 = no limit).
  std::size_t max_turns = 0;
};

struct ScoredTokens {
  TokenSequence ids;  // prefix followed by the generated tokens
  std::size_t prompt_length = 0;
  // Per generated token: log-probability under the sampling distribution
  // (0 for forced tokens).
  std::vector<double> logprobs;
  std::vector<std::uint8_t> forced;

  std::size_t generated() const { return ids.size() - prompt_length; }
};

ScoredTokens generate(const LMModel& model, std::span<const int> prefix,
                      const GenerationConfig& gen);
ScoredTokens generate(const LMModel& model, std::span<const int> prefix,
                      const GenerationConfig& gen, Rng& rng);

// log p(tokens[t] | tokens[<t]) for t = from_pos .. len-1.
std::vector<double> logprob_of(const LMModel& model, std::span<const int> tokens,
                               std::size_t from_pos);

// Key/value-cached decoding, one token at a time.
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const LMModel& model);

  // Feeds one token; returns next-token logits.
  std::span<const double> step(int token);
  std::span<const double> logits() const { return logits_; }
  std::span<const double> hidden() const { return hidden_; }
  std::size_t length() const { return length_; }

 private:
  const LMModel* model_;
  std::vector<std::vector<double>> keys_;    // per layer, [length, d]
  std::vector<std::vector<double>> values_;  // per layer, [length, d]
  std::vector<double> emb_t_;                // token embedding transposed, [d, vocab]
  std::vector<double> logits_;
  std::vector<double> hidden_;
  std::vector<double> probs_;
  std::size_t length_ = 0;
};

// Full conversations with every position in the loss (generator pretraining).
LmDataset lm_dataset_from(const Corpus& corpus, const Vocab& vocab, std::size_t max_seq);

// One example per turn i >= 2: previous turns plus turn i's speaker token as
// context, turn i's tokens and SEP as the only loss targets. Context is
// dropped whole turns at a time from the left until the example fits.
LmDataset learner_dataset_from(const Corpus& corpus, const Vocab& vocab, std::size_t max_seq);

// BOS + as many trailing context turns as fit in `budget` tokens, followed by
// the speaker token of the turn to predict.
TokenSequence response_prompt(std::span<const Turn> context, Speaker next, const Vocab& vocab,
                              std::size_t budget);

// 8-byte magic, u64 header length, JSON header (config, tensor table,
// checksum), then little-endian float64 payloads in header order.
void save_checkpoint(const LMModel& model, const std::filesystem::path& path);
LMModel load_checkpoint(const std::filesystem::path& path);

}  // namespace gcnforge
