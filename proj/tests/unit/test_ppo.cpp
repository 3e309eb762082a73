#include <cmath>
#include <limits>

#include "doctest.h"
#include "gcnforge/error.hpp"
#include "gcnforge/ppo.hpp"

using namespace gcnforge;

namespace {

struct Fixture {
  Corpus corpus = make_toy_corpus(12, 5);
  Vocab vocab = build_vocab(corpus, 500, 1);
  LMModel generator;
  LMModel reference;
  PPOConfig config;
  PPOState state;
  std::vector<RolloutRequest> requests;

  Fixture() {
    LMConfig c;
    c.vocab_size = vocab.size();
    c.d_model = 16;
    c.n_heads = 2;
    c.n_layers = 1;
    c.max_seq = 96;
    generator = init_lm(c, 1);
    reference = generator.clone();
    // Move the generator away from the reference so KL terms are non-zero.
    Rng rng(3);
    for (auto& p : generator.parameters()) {
      for (auto& x : p.data()) x += 0.05 * rng.normal();
    }
    state = init_ppo_state(generator, config, 2);
    requests = rollout_requests(extract_prompts(corpus).prompts, vocab);
  }

  RolloutBatch rollouts(std::uint64_t seed, std::size_t threads = 1) {
    GenerationConfig g;
    g.max_new_tokens = 30;
    g.rng_seed = seed;
    return collect_rollouts(generator, reference, state.value_head, requests, g, threads);
  }
};

Episode toy_episode(std::vector<double> old_lp, std::vector<double> ref_lp,
                    std::vector<std::uint8_t> forced) {
  Episode ep;
  ep.prompt = {Vocab::kBos};
  ep.generated.assign(old_lp.size(), 7);
  ep.old_logprobs = std::move(old_lp);
  ep.ref_logprobs = std::move(ref_lp);
  ep.forced = std::move(forced);
  ep.values.assign(ep.generated.size(), 0.0);
  return ep;
}

bool same_logits(const LMModel& a, const LMModel& b, std::span<const int> toks) {
  const auto x = forward(a, toks);
  const auto y = forward(b, toks);
  return std::equal(x.data().begin(), x.data().end(), y.data().begin());
}

}  // namespace

TEST_CASE("reward shaping examples") {
  SUBCASE("no shaping leaves only the terminal reward") {
    RolloutBatch b;
    b.episodes.push_back(toy_episode({-1, -2, -3}, {-2, -1, -0.5}, {0, 1, 0}));
    assign_rewards(b, 0.7, 0.0);
    CHECK(b.episodes[0].rewards == std::vector<double>{0.0, 0.0, 0.7});
  }
  SUBCASE("identical policy and reference give zero KL") {
    RolloutBatch b;
    b.episodes.push_back(toy_episode({-1, -2}, {-1, -2}, {0, 0}));
    assign_rewards(b, 0.0, 0.3);
    CHECK(b.episodes[0].rewards == std::vector<double>{0.0, 0.0});
    CHECK(b.mean_kl() == 0.0);
  }
  SUBCASE("logprob gap of 0.5 at beta 0.1") {
    RolloutBatch b;
    b.episodes.push_back(toy_episode({-1.0, -2.0}, {-1.5, -2.0}, {0, 0}));
    assign_rewards(b, 0.0, 0.1);
    CHECK(b.episodes[0].rewards[0] == doctest::Approx(-0.05).epsilon(1e-15));
  }
  SUBCASE("forced positions carry nothing, terminal lands on the last action") {
    RolloutBatch b;
    b.episodes.push_back(toy_episode({-1, -2, 0}, {-3, -1, 0}, {0, 0, 1}));
    assign_rewards(b, 1.0, 0.1);
    CHECK(b.episodes[0].rewards[2] == 0.0);
    CHECK(b.episodes[0].rewards[1] == doctest::Approx(1.0 - 0.1 * (-2 + 1)));
  }
  SUBCASE("misaligned data is rejected") {
    RolloutBatch b;
    b.episodes.push_back(toy_episode({-1, -2}, {-1}, {0, 0}));
    CHECK_THROWS_AS(assign_rewards(b, 1.0, 0.1), ShapeError);
  }
}

TEST_CASE("advantage estimation") {
  SUBCASE("one step") {
    RolloutBatch b;
    b.episodes.push_back(toy_episode({-1}, {-1}, {0}));
    assign_rewards(b, 0.8, 0.0);
    compute_advantages(b, 1.0, 0.95, false);
    CHECK(b.episodes[0].advantages[0] == 0.8);
    CHECK(b.episodes[0].returns[0] == 0.8);
  }
  SUBCASE("all zero") {
    RolloutBatch b;
    b.episodes.push_back(toy_episode({-1, -1, -1}, {-1, -1, -1}, {0, 1, 0}));
    assign_rewards(b, 0.0, 0.1);
    compute_advantages(b, 1.0, 0.95, false);
    for (const double a : b.episodes[0].advantages) CHECK(a == 0.0);
  }
  SUBCASE("matches a hand-rolled GAE recursion, skipping forced steps") {
    RolloutBatch b;
    auto ep = toy_episode({-1, -1, -1, -1}, {-1, -1, -1, -1}, {0, 0, 1, 0});
    ep.values = {0.1, 0.4, 9.0, -0.2};
    b.episodes.push_back(ep);
    assign_rewards(b, 1.0, 0.0);
    compute_advantages(b, 0.9, 0.8, false);
    // Action steps are t = 0, 1, 3 with rewards 0, 0, 1.
    const double d3 = 1.0 - (-0.2);
    const double d1 = 0.0 + 0.9 * -0.2 - 0.4;
    const double d0 = 0.0 + 0.9 * 0.4 - 0.1;
    const double a3 = d3;
    const double a1 = d1 + 0.9 * 0.8 * a3;
    const double a0 = d0 + 0.9 * 0.8 * a1;
    const auto& got = b.episodes[0];
    CHECK(got.advantages[3] == doctest::Approx(a3).epsilon(1e-15));
    CHECK(got.advantages[1] == doctest::Approx(a1).epsilon(1e-15));
    CHECK(got.advantages[0] == doctest::Approx(a0).epsilon(1e-15));
    CHECK(got.advantages[2] == 0.0);
    CHECK(got.returns[1] == doctest::Approx(a1 + 0.4).epsilon(1e-15));
  }
  SUBCASE("whitening contract") {
    Fixture f;
    auto b = f.rollouts(4);
    assign_rewards(b, 0.5, 0.05);
    compute_advantages(b, 1.0, 0.95, true);
    double sum = 0, sq = 0;
    std::size_t n = 0;
    for (const auto& ep : b.episodes) {
      for (std::size_t t = 0; t < ep.generated.size(); ++t) {
        if (ep.forced[t]) {
          CHECK(ep.advantages[t] == 0.0);
          continue;
        }
        sum += ep.advantages[t];
        ++n;
      }
    }
    const double mean = sum / static_cast<double>(n);
    for (const auto& ep : b.episodes) {
      for (std::size_t t = 0; t < ep.generated.size(); ++t) {
        if (!ep.forced[t]) sq += (ep.advantages[t] - mean) * (ep.advantages[t] - mean);
      }
    }
    CHECK(std::abs(mean) <= 1e-9);
    CHECK(std::abs(std::sqrt(sq / static_cast<double>(n)) - 1.0) <= 1e-6);
  }
  SUBCASE("empty batch") {
    RolloutBatch b;
    CHECK_THROWS_AS(compute_advantages(b, 1.0, 0.95, true), ValidationError);
  }
}

TEST_CASE("rollout collection") {
  Fixture f;
  const auto b = f.rollouts(11);
  CHECK(b.size() == f.requests.size());
  for (std::size_t k = 0; k < b.size(); ++k) {
    const auto& ep = b.episodes[k];
    CHECK(ep.source_id == f.requests[k].source_id);
    CHECK(ep.old_logprobs.size() == ep.generated.size());
    CHECK(ep.values.size() == ep.generated.size());
    for (const double x : ep.old_logprobs) CHECK(x <= 0.0);
    const auto full = ep.full();
    const auto re = logprob_of(f.generator, full, ep.prompt.size());
    const auto ref = logprob_of(f.reference, full, ep.prompt.size());
    for (std::size_t t = 0; t < ep.generated.size(); ++t) {
      if (ep.forced[t]) continue;
      CHECK(std::abs(re[t] - ep.old_logprobs[t]) <= 1e-9);
      CHECK(ref[t] == ep.ref_logprobs[t]);
    }
  }
  SUBCASE("thread count does not change results") {
    const auto b3 = f.rollouts(11, 3);
    for (std::size_t k = 0; k < b.size(); ++k) {
      CHECK(b3.episodes[k].generated == b.episodes[k].generated);
      CHECK(b3.episodes[k].old_logprobs == b.episodes[k].old_logprobs);
    }
  }
  SUBCASE("reward plumbing identity") {
    auto c = b;
    const double beta = 0.07;
    assign_rewards(c, 0.42, beta);
    for (const auto& ep : c.episodes) {
      double shaped = 0.0, kl = 0.0;
      for (std::size_t t = 0; t < ep.generated.size(); ++t) {
        shaped += ep.rewards[t];
        if (!ep.forced[t]) kl += ep.old_logprobs[t] - ep.ref_logprobs[t];
      }
      CHECK(std::abs(shaped - (0.42 - beta * kl)) <= 1e-12);
    }
  }
}

TEST_CASE("ppo update") {
  Fixture f;
  auto b = f.rollouts(21);
  assign_rewards(b, 0.3, f.config.kl_coef);
  compute_advantages(b, 1.0, 0.95, true);

  SUBCASE("first minibatch has ratio one") {
    Rng rng(1);
    const auto stats = ppo_update(f.generator, f.state, b, f.config, rng);
    CHECK_FALSE(stats.aborted);
    CHECK(stats.first_clip_fraction == 0.0);
    CHECK(std::abs(stats.first_policy_loss + stats.first_mean_advantage) <= 1e-12);
    CHECK(stats.minibatches == f.config.ppo_epochs * ((b.size() + 7) / 8));
    CHECK(std::isfinite(stats.policy_loss));
    CHECK(std::isfinite(stats.value_loss));
  }
  SUBCASE("zero learning rate leaves the generator untouched") {
    const auto before = f.generator.clone();
    auto cfg = f.config;
    cfg.lr = 0.0;
    Rng rng(1);
    ppo_update(f.generator, f.state, b, cfg, rng);
    CHECK(same_logits(before, f.generator, b.episodes[0].full()));
  }
  SUBCASE("zero advantages only move the value head") {
    for (auto& ep : b.episodes) std::fill(ep.advantages.begin(), ep.advantages.end(), 0.0);
    const auto before = f.generator.clone();
    const std::vector<double> w0(f.state.value_head.weight.data().begin(),
                                 f.state.value_head.weight.data().end());
    Rng rng(1);
    ppo_update(f.generator, f.state, b, f.config, rng);
    CHECK(same_logits(before, f.generator, b.episodes[0].full()));
    CHECK(std::vector<double>(f.state.value_head.weight.data().begin(),
                              f.state.value_head.weight.data().end()) != w0);
  }
  SUBCASE("non-finite loss restores every parameter") {
    auto bad = b;
    bad.episodes.back().old_logprobs[0] = -1e300;
    bad.episodes.back().forced[0] = 0;
    const auto before = f.generator.clone();
    const std::vector<double> w0(f.state.value_head.weight.data().begin(),
                                 f.state.value_head.weight.data().end());
    const auto t0 = f.state.adam.t;
    auto cfg = f.config;
    cfg.minibatch_size = 1;
    Rng rng(1);
    const auto stats = ppo_update(f.generator, f.state, bad, cfg, rng);
    CHECK(stats.aborted);
    CHECK_FALSE(stats.abort_reason.empty());
    CHECK(same_logits(before, f.generator, b.episodes[0].full()));
    CHECK(std::vector<double>(f.state.value_head.weight.data().begin(),
                              f.state.value_head.weight.data().end()) == w0);
    CHECK(f.state.adam.t == t0);
  }
  SUBCASE("missing advantages are rejected") {
    auto raw = f.rollouts(22);
    Rng rng(1);
    CHECK_THROWS_AS(ppo_update(f.generator, f.state, raw, f.config, rng), ValidationError);
  }
}

TEST_CASE("clip arithmetic") {
  // ratio 1.5, eps 0.2, advantage 1: min(1.5, 1.2) = 1.2.
  Tape tape(false);
  const Tensor ratio = Tensor::from({1}, {1.5});
  const Tensor a = Tensor::from({1}, {1.0});
  const auto clipped = tape.mul(tape.clamp(ratio, 0.8, 1.2), a);
  const auto obj = tape.minimum(tape.mul(ratio, a), clipped);
  CHECK(obj.item() == doctest::Approx(1.2).epsilon(1e-15));
}

TEST_CASE("config validation") {
  PPOConfig c;
  CHECK_NOTHROW(c.validate());
  c.clip_eps = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = PPOConfig{};
  c.kl_coef = -0.1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
