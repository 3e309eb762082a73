#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gcnforge/corpus.hpp"
#include "gcnforge/lm.hpp"
#include "gcnforge/optim.hpp"
#include "gcnforge/tensor.hpp"

namespace gcnforge {

struct PPOConfig {
  double clip_eps = 0.2;
  double kl_coef = 0.05;
  std::size_t ppo_epochs = 4;
  std::size_t minibatch_size = 8;
  double lr = 5e-4;
  double value_loss_coef = 0.5;
  double entropy_coef = 0.0;
  bool advantage_whitening = true;
  double max_grad_norm = 1.0;
  double gamma = 1.0;
  double lambda = 0.95;

  void validate() const;
};

// Linear critic over the generator's final hidden state. It reads the hidden
// state as a constant, so value-loss gradients never reach the generator.
struct ValueHead {
  Tensor weight;  // [d, 1]
  Tensor bias;    // [1]

  std::vector<Tensor> parameters() const { return {weight, bias}; }
};

ValueHead init_value_head(std::size_t d_model, std::uint64_t rng_seed);
// v[i] = hidden[i] . weight + bias for every row; recorded on the tape.
Tensor value_forward(Tape& tape, const ValueHead& head, const Tensor& hidden);

// One self-play continuation. Per-token vectors are aligned with
// `generated`: entry t describes the action that produced generated[t].
struct Episode {
  std::string source_id;
  TokenSequence prompt;
  TokenSequence generated;
  std::vector<double> old_logprobs;
  std::vector<double> ref_logprobs;
  std::vector<std::uint8_t> forced;
  std::vector<double> values;
  double terminal_reward = 0.0;
  std::vector<double> rewards;
  std::vector<double> advantages;
  std::vector<double> returns;

  // prompt followed by generated
  TokenSequence full() const;
  std::size_t actions() const;
};

struct RolloutBatch {
  std::vector<Episode> episodes;

  std::size_t size() const { return episodes.size(); }
  // Mean of (old - ref) over unforced positions: the sampled estimate of
  // KL(policy || reference).
  double mean_kl() const;
  double mean_terminal_reward() const;
};

struct RolloutRequest {
  std::string source_id;
  TokenSequence prefix;
  // Generated turns allowed before stopping (0 = until EOS or budget).
  std::size_t max_turns = 0;
};

// One request per prompt: BOS + its three turns, generating up to the
// source conversation's remaining turn count.
std::vector<RolloutRequest> rollout_requests(std::span<const Prompt> prompts, const Vocab& vocab);

// Samples one episode per request. Episode k draws from
// Rng(gen.rng_seed).split(k), so results do not depend on `threads`. The
// policy log-probabilities stored for PPO are the generator's plain softmax
// over the full vocabulary, computed by a separate forward pass over the
// finished sequence; reference log-probabilities come from `reference` the
// same way.
RolloutBatch collect_rollouts(const LMModel& generator, const LMModel& reference,
                              const ValueHead& value_head, std::span<const RolloutRequest> requests,
                              const GenerationConfig& gen, std::size_t threads = 1);

// r_t = -kl_coef * (old_t - ref_t) on unforced positions, 0 on forced ones;
// the last unforced position also receives the episode's terminal reward.
void assign_rewards(RolloutBatch& batch, double dataset_reward, double kl_coef);
void assign_rewards(RolloutBatch& batch, std::span<const double> episode_rewards, double kl_coef);

// GAE over the unforced positions of each episode; forced positions get zero
// advantage and return. Returns are computed before whitening.
void compute_advantages(RolloutBatch& batch, double gamma, double lambda, bool whiten);

struct PPOState {
  ValueHead value_head;
  AdamState adam;
};

PPOState init_ppo_state(const LMModel& generator, const PPOConfig& config, std::uint64_t rng_seed);

struct PPOStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double mean_kl = 0.0;
  double clip_fraction = 0.0;
  // Values from the very first minibatch, where the ratio is exactly 1.
  double first_clip_fraction = 0.0;
  double first_policy_loss = 0.0;
  double first_mean_advantage = 0.0;
  std::size_t minibatches = 0;
  bool aborted = false;
  std::string abort_reason;
};

// Clipped-surrogate PPO over shuffled minibatches of episodes. If any loss or
// gradient turns non-finite, generator, value head and optimizer state are
// restored to their values on entry and the returned stats are marked aborted.
PPOStats ppo_update(LMModel& generator, PPOState& state, const RolloutBatch& batch,
                    const PPOConfig& config, Rng& rng);

}  // namespace gcnforge
