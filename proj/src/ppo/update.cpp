#include <algorithm>
#include <cmath>
#include <numeric>

#include "gcnforge/error.hpp"
#include "gcnforge/ppo.hpp"

namespace gcnforge {

PPOState init_ppo_state(const LMModel& generator, const PPOConfig& config,
                        std::uint64_t rng_seed) {
  PPOState s;
  s.value_head = init_value_head(generator.config.d_model, rng_seed);
  s.adam.lr = config.lr;
  return s;
}

namespace {

struct Snapshot {
  std::vector<std::vector<double>> params;
  AdamState adam;
};

std::vector<Tensor> trainable(const LMModel& generator, const ValueHead& head) {
  auto params = generator.parameters();
  for (auto& t : head.parameters()) params.push_back(t);
  return params;
}

Snapshot take_snapshot(std::span<const Tensor> params, const AdamState& adam) {
  Snapshot s;
  for (const auto& p : params) s.params.emplace_back(p.data().begin(), p.data().end());
  s.adam = adam;
  return s;
}

void restore(std::span<Tensor> params, AdamState& adam, const Snapshot& s) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::copy(s.params[i].begin(), s.params[i].end(), params[i].data().begin());
    params[i].zero_grad();
  }
  adam = s.adam;
}

struct MinibatchResult {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double mean_advantage = 0.0;
  bool empty = true;
};

MinibatchResult run_minibatch(const LMModel& generator, const ValueHead& head,
                              const RolloutBatch& batch, std::span<const std::size_t> members,
                              const PPOConfig& config) {
  std::vector<TokenSequence> seqs;
  std::vector<std::span<const int>> views;
  std::vector<std::size_t> rows;
  std::vector<int> targets;
  std::vector<double> old_lp, adv, ret;
  std::size_t offset = 0;
  for (const std::size_t k : members) {
    const auto& ep = batch.episodes[k];
    if (ep.actions() == 0) continue;
    seqs.push_back(ep.full());
    const std::size_t p = ep.prompt.size();
    for (std::size_t t = 0; t < ep.generated.size(); ++t) {
      if (ep.forced[t]) continue;
      rows.push_back(offset + p + t - 1);
      targets.push_back(ep.generated[t]);
      old_lp.push_back(ep.old_logprobs[t]);
      adv.push_back(ep.advantages[t]);
      ret.push_back(ep.returns[t]);
    }
    offset += seqs.back().size();
  }
  MinibatchResult r;
  if (rows.empty()) return r;
  r.empty = false;
  for (const auto& s : seqs) views.emplace_back(s);

  const std::size_t m = rows.size();
  Tape tape;
  const auto pass = forward_packed(tape, generator, views);
  const Tensor logits = tape.gather_rows(pass.logits, rows);
  const Tensor new_lp = tape.token_logprobs(logits, targets);
  const Tensor ratio = tape.exp(tape.sub(new_lp, Tensor::from({m}, old_lp)));
  const Tensor a = Tensor::from({m}, adv);
  const Tensor surr1 = tape.mul(ratio, a);
  const Tensor surr2 = tape.mul(tape.clamp(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps), a);
  const Tensor policy_loss = tape.scale(tape.mean(tape.minimum(surr1, surr2)), -1.0);

  const Tensor values = value_forward(tape, head, tape.gather_rows(pass.hidden, rows));
  const Tensor err = tape.sub(values, Tensor::from({m}, ret));
  const Tensor value_loss = tape.mean(tape.mul(err, err));

  Tensor total = tape.add(policy_loss, tape.scale(value_loss, config.value_loss_coef));
  Tensor entropy;
  if (config.entropy_coef > 0.0) {
    entropy = tape.mean(tape.entropy(logits));
    total = tape.sub(total, tape.scale(entropy, config.entropy_coef));
  } else {
    Tape side(false);
    entropy = side.mean(side.entropy(logits));
  }
  tape.backward(total);

  r.policy_loss = policy_loss.item();
  r.value_loss = value_loss.item();
  r.entropy = entropy.item();
  std::size_t clipped = 0;
  for (const double x : ratio.data()) clipped += std::abs(x - 1.0) > config.clip_eps ? 1 : 0;
  r.clip_fraction = static_cast<double>(clipped) / static_cast<double>(m);
  r.mean_advantage = std::accumulate(adv.begin(), adv.end(), 0.0) / static_cast<double>(m);
  return r;
}

}  // namespace

PPOStats ppo_update(LMModel& generator, PPOState& state, const RolloutBatch& batch,
                    const PPOConfig& config, Rng& rng) {
  config.validate();
  for (const auto& ep : batch.episodes) {
    if (ep.advantages.size() != ep.generated.size() || ep.returns.size() != ep.generated.size()) {
      throw ValidationError("ppo_update: advantages have not been computed for episode '" +
                            ep.source_id + "'");
    }
  }
  auto params = trainable(generator, state.value_head);
  const Snapshot snapshot = take_snapshot(params, state.adam);
  state.adam.lr = config.lr;

  PPOStats stats;
  stats.mean_kl = batch.mean_kl();
  std::vector<std::size_t> order(batch.size());
  std::iota(order.begin(), order.end(), 0);
  try {
    zero_grads(params);
    for (std::size_t epoch = 0; epoch < config.ppo_epochs; ++epoch) {
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      for (std::size_t start = 0; start < order.size(); start += config.minibatch_size) {
        const std::size_t end = std::min(order.size(), start + config.minibatch_size);
        const auto r = run_minibatch(generator, state.value_head, batch,
                                     std::span<const std::size_t>(order).subspan(start, end - start),
                                     config);
        if (r.empty) continue;
        if (stats.minibatches == 0) {
          stats.first_clip_fraction = r.clip_fraction;
          stats.first_policy_loss = r.policy_loss;
          stats.first_mean_advantage = r.mean_advantage;
        }
        ++stats.minibatches;
        stats.policy_loss += r.policy_loss;
        stats.value_loss += r.value_loss;
        stats.entropy += r.entropy;
        stats.clip_fraction += r.clip_fraction;
        clip_grad_norm(params, config.max_grad_norm);
        adam_step(params, state.adam);
        for (const auto& p : params) require_finite(p, "ppo parameter");
      }
    }
  } catch (const NumericError& e) {
    restore(params, state.adam, snapshot);
    PPOStats aborted;
    aborted.mean_kl = stats.mean_kl;
    aborted.aborted = true;
    aborted.abort_reason = e.what();
    return aborted;
  }
  if (stats.minibatches > 0) {
    const double n = static_cast<double>(stats.minibatches);
    stats.policy_loss /= n;
    stats.value_loss /= n;
    stats.entropy /= n;
    stats.clip_fraction /= n;
  }
  return stats;
}

}  // namespace gcnforge
