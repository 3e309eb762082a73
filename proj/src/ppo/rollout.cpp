#include <algorithm>
#include <cmath>

#include "gcnforge/error.hpp"
#include "gcnforge/ppo.hpp"
#include "gcnforge/util.hpp"

namespace gcnforge {

void PPOConfig::validate() const {
  if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("ppo.clip_eps must be in (0, 1)");
  if (!(kl_coef >= 0.0)) throw ConfigError("ppo.kl_coef must be >= 0");
  if (ppo_epochs == 0 || minibatch_size == 0) {
    throw ConfigError("ppo.ppo_epochs and ppo.minibatch_size must be positive");
  }
  if (!(lr >= 0.0)) throw ConfigError("ppo.lr must be >= 0");
  if (!(value_loss_coef >= 0.0 && entropy_coef >= 0.0)) {
    throw ConfigError("ppo loss coefficients must be >= 0");
  }
  if (!(max_grad_norm > 0.0)) throw ConfigError("ppo.max_grad_norm must be positive");
  if (!(gamma >= 0.0 && gamma <= 1.0 && lambda >= 0.0 && lambda <= 1.0)) {
    throw ConfigError("ppo.gamma and ppo.lambda must be in [0, 1]");
  }
}

ValueHead init_value_head(std::size_t d_model, std::uint64_t rng_seed) {
  Rng rng = Rng(rng_seed).split("value-head");
  ValueHead h;
  h.weight = Tensor::zeros({d_model, 1}, true);
  for (auto& x : h.weight.data()) x = 0.02 * rng.normal();
  h.bias = Tensor::zeros({1}, true);
  return h;
}

Tensor value_forward(Tape& tape, const ValueHead& head, const Tensor& hidden) {
  // Detached copy of the features.
  const Tensor features = Tensor::from(hidden.shape(), {hidden.data().begin(), hidden.data().end()});
  const Tensor v = tape.add(tape.matmul(features, head.weight), head.bias);
  return tape.reshape(v, {hidden.dim(0)});
}

TokenSequence Episode::full() const {
  TokenSequence out = prompt;
  out.insert(out.end(), generated.begin(), generated.end());
  return out;
}

std::size_t Episode::actions() const {
  return static_cast<std::size_t>(std::count(forced.begin(), forced.end(), 0));
}

double RolloutBatch::mean_kl() const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& ep : episodes) {
    for (std::size_t t = 0; t < ep.generated.size(); ++t) {
      if (ep.forced[t]) continue;
      sum += ep.old_logprobs[t] - ep.ref_logprobs[t];
      ++n;
    }
  }
  return n > 0 ? sum / static_cast<double>(n) : 0.0;
}

double RolloutBatch::mean_terminal_reward() const {
  if (episodes.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& ep : episodes) sum += ep.terminal_reward;
  return sum / static_cast<double>(episodes.size());
}

std::vector<RolloutRequest> rollout_requests(std::span<const Prompt> prompts, const Vocab& vocab) {
  std::vector<RolloutRequest> out;
  out.reserve(prompts.size());
  for (const auto& p : prompts) {
    if (p.target_turn_count <= kPromptTurns) {
      throw DataError("prompt from '" + p.source_conversation_id + "' has nothing to generate");
    }
    out.push_back({p.source_conversation_id, encode_prompt(p, vocab),
                   p.target_turn_count - kPromptTurns});
  }
  return out;
}

RolloutBatch collect_rollouts(const LMModel& generator, const LMModel& reference,
                              const ValueHead& value_head, std::span<const RolloutRequest> requests,
                              const GenerationConfig& gen, std::size_t threads) {
  if (requests.empty()) throw ValidationError("collect_rollouts: no prompts");
  if (!(generator.config == reference.config)) {
    throw ShapeError("collect_rollouts: generator and reference configs differ");
  }
  RolloutBatch batch;
  batch.episodes.resize(requests.size());
  const Rng root(gen.rng_seed);
  parallel_for(requests.size(), threads, [&](std::size_t k) {
    const auto& req = requests[k];
    GenerationConfig g = gen;
    g.max_turns = req.max_turns;
    Rng rng = root.split(k);
    const auto sampled = generate(generator, req.prefix, g, rng);

    Episode ep;
    ep.source_id = req.source_id;
    ep.prompt = req.prefix;
    ep.generated.assign(sampled.ids.begin() + static_cast<long>(sampled.prompt_length),
                        sampled.ids.end());
    ep.forced = sampled.forced;
    if (!ep.generated.empty()) {
      const std::size_t p = sampled.prompt_length;
      const auto& ids = sampled.ids;
      Tape tape(false);
      const std::span<const int> seqs[] = {ids};
      const auto pass = forward_packed(tape, generator, seqs);
      std::vector<std::size_t> rows(ep.generated.size());
      for (std::size_t t = 0; t < rows.size(); ++t) rows[t] = p + t - 1;
      const auto lp = tape.token_logprobs(tape.gather_rows(pass.logits, rows), ep.generated);
      ep.old_logprobs.assign(lp.data().begin(), lp.data().end());
      const auto v = value_forward(tape, value_head, tape.gather_rows(pass.hidden, rows));
      ep.values.assign(v.data().begin(), v.data().end());
      ep.ref_logprobs = logprob_of(reference, ids, p);
    }
    batch.episodes[k] = std::move(ep);
  });
  return batch;
}

namespace {

void shape_rewards(Episode& ep, double terminal, double kl_coef) {
  const std::size_t n = ep.generated.size();
  if (ep.old_logprobs.size() != n || ep.ref_logprobs.size() != n || ep.forced.size() != n) {
    throw ShapeError("assign_rewards: episode '" + ep.source_id + "' has misaligned per-token data");
  }
  ep.terminal_reward = terminal;
  ep.rewards.assign(n, 0.0);
  std::size_t last = n;
  for (std::size_t t = 0; t < n; ++t) {
    if (ep.forced[t]) continue;
    ep.rewards[t] = -kl_coef * (ep.old_logprobs[t] - ep.ref_logprobs[t]);
    last = t;
  }
  if (last < n) ep.rewards[last] += terminal;
}

}  // namespace

void assign_rewards(RolloutBatch& batch, double dataset_reward, double kl_coef) {
  for (auto& ep : batch.episodes) shape_rewards(ep, dataset_reward, kl_coef);
}

void assign_rewards(RolloutBatch& batch, std::span<const double> episode_rewards, double kl_coef) {
  if (episode_rewards.size() != batch.size()) {
    throw ShapeError("assign_rewards: " + std::to_string(episode_rewards.size()) +
                     " rewards for " + std::to_string(batch.size()) + " episodes");
  }
  for (std::size_t k = 0; k < batch.size(); ++k) {
    shape_rewards(batch.episodes[k], episode_rewards[k], kl_coef);
  }
}

void compute_advantages(RolloutBatch& batch, double gamma, double lambda, bool whiten) {
  if (batch.episodes.empty()) throw ValidationError("compute_advantages: empty batch");
  double sum = 0.0, sq = 0.0;
  std::size_t count = 0;
  for (auto& ep : batch.episodes) {
    const std::size_t n = ep.generated.size();
    if (ep.rewards.size() != n || ep.values.size() != n) {
      throw ShapeError("compute_advantages: episode '" + ep.source_id +
                       "' lacks rewards or values");
    }
    ep.advantages.assign(n, 0.0);
    ep.returns.assign(n, 0.0);
    double next_value = 0.0;
    double next_adv = 0.0;
    for (std::size_t t = n; t-- > 0;) {
      if (ep.forced[t]) continue;
      const double delta = ep.rewards[t] + gamma * next_value - ep.values[t];
      const double adv = delta + gamma * lambda * next_adv;
      ep.advantages[t] = adv;
      ep.returns[t] = adv + ep.values[t];
      next_value = ep.values[t];
      next_adv = adv;
      sum += adv;
      ++count;
    }
  }
  if (!whiten || count == 0) return;
  const double mean = sum / static_cast<double>(count);
  for (const auto& ep : batch.episodes) {
    for (std::size_t t = 0; t < ep.generated.size(); ++t) {
      if (!ep.forced[t]) sq += (ep.advantages[t] - mean) * (ep.advantages[t] - mean);
    }
  }
  const double sd = std::sqrt(sq / static_cast<double>(count));
  const double scale = sd < 1e-8 ? 1.0 : 1.0 / sd;
  for (auto& ep : batch.episodes) {
    for (std::size_t t = 0; t < ep.generated.size(); ++t) {
      if (!ep.forced[t]) ep.advantages[t] = (ep.advantages[t] - mean) * scale;
    }
  }
}

}  // namespace gcnforge
