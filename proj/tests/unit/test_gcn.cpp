#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <set>
#include <unistd.h>

#include "doctest.h"
#include "gcnforge/error.hpp"
#include "gcnforge/gcn.hpp"
#include "gcnforge/util.hpp"

using namespace gcnforge;
namespace fs = std::filesystem;

namespace {

GCNConfig tiny_config() {
  GCNConfig c;
  for (auto* m : {&c.generator_model, &c.learner_model}) {
    m->d_model = 16;
    m->n_layers = 1;
    m->n_heads = 2;
    m->max_seq = 96;
  }
  c.generator_pretrain.steps = 20;
  c.learner.steps = 10;
  c.conversations_per_iteration = 6;
  c.gen.max_new_tokens = 40;
  c.eval.max_new_tokens = 12;
  c.max_iterations = 2;
  c.rng_seed = 3;
  return c;
}

const PreparedData& tiny_data() {
  static const PreparedData d = prepare_data(make_toy_corpus(150, 2), tiny_config());
  return d;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() /
                     ("gcnforge-test-gcn-" + std::to_string(::getpid()) + "-" + name);
  fs::remove_all(p);
  return p;
}

bool same_parameters(const LMModel& a, const LMModel& b) {
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!std::equal(pa[i].data().begin(), pa[i].data().end(), pb[i].data().begin(),
                    pb[i].data().end())) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("config keys and JSON") {
  const GCNConfig d;
  CHECK_FALSE(d.ppo.advantage_whitening);
  CHECK(d.weights.bleu == 0.1);
  CHECK(d.weights.rouge1 == 0.01);
  CHECK(d.weights.embed == 0.95);
  CHECK(d.seed_fraction == 0.1);
  CHECK(d.tolerance == 1e-3);
  CHECK(d.patience == 3);
  CHECK(d.max_iterations == 50);

  SUBCASE("round trip") {
    GCNConfig c = tiny_config();
    c.tolerance = std::numeric_limits<double>::infinity();
    c.ppo.lr = 0.25;
    const GCNConfig back = GCNConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(std::isinf(back.tolerance));
  }
  SUBCASE("nested objects flatten to dotted keys") {
    const auto c = GCNConfig::from_json(R"({"ppo": {"lr": 0.5}, "learner.steps": 7})");
    CHECK(c.ppo.lr == 0.5);
    CHECK(c.learner.steps == 7);
  }
  SUBCASE("set parses by key type") {
    GCNConfig c;
    c.set("gen.temperature", "0.7");
    c.set("max_iterations", "4");
    c.set("update_generator", "false");
    CHECK(c.gen.temperature == 0.7);
    CHECK(c.max_iterations == 4);
    CHECK_FALSE(c.update_generator);
  }
  SUBCASE("bad input") {
    CHECK_THROWS_AS(GCNConfig::from_json(R"({"no_such_key": 1})"), ConfigError);
    CHECK_THROWS_AS(GCNConfig::from_json("{"), ConfigError);
    GCNConfig c;
    CHECK_THROWS_AS(c.set("max_iterations", "-1"), ConfigError);
    CHECK_THROWS_AS(c.set("max_iterations", "1.5"), ConfigError);
    CHECK_THROWS_AS(c.set("update_generator", "maybe"), ConfigError);
    CHECK_THROWS_AS(c.set("nope", "1"), ConfigError);
  }
  SUBCASE("validation") {
    GCNConfig c;
    c.seed_fraction = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = GCNConfig{};
    c.conversations_per_iteration = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = GCNConfig{};
    c.learner_model.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }
}

TEST_CASE("prepared splits") {
  const Corpus corpus = make_toy_corpus(1000, 1);
  GCNConfig c;
  c.embedding_dim = 8;
  const PreparedData d = prepare_data(corpus, c);
  CHECK(d.seed_train.size() == 80);
  CHECK(d.seed_val.size() == 20);
  CHECK(d.test.size() == 90);
  CHECK(d.rest.size() == 810);
  std::set<std::string> ids;
  for (const auto* part : {&d.seed_train, &d.seed_val, &d.rest, &d.test}) {
    for (const auto& conv : part->conversations) CHECK(ids.insert(conv.id).second);
  }
  CHECK(ids.size() == 1000);
  CHECK(d.embeddings.vocab_size == d.vocab.size());

  const fs::path dir = temp_dir("prepared");
  d.save(dir);
  const PreparedData back = PreparedData::load(dir);
  CHECK(back.seed_train.conversations == d.seed_train.conversations);
  CHECK(back.vocab == d.vocab);
  CHECK(back.embeddings == d.embeddings);
  fs::remove_all(dir);

  CHECK_THROWS_AS(prepare_data(make_toy_corpus(3, 1), c), ValidationError);
}

TEST_CASE("generator pretraining") {
  const auto& d = tiny_data();
  const GCNConfig c = tiny_config();
  const LMModel g = pretrain_generator(d.seed_train, d.vocab, c);
  const LMModel untrained = init_lm(g.config, 0);
  const auto ds = lm_dataset_from(d.seed_train, d.vocab, g.config.max_seq);
  CHECK(nll_loss(g, ds.examples) < nll_loss(untrained, ds.examples));
  CHECK(same_parameters(g, pretrain_generator(d.seed_train, d.vocab, c)));
  CHECK_THROWS_AS(pretrain_generator(Corpus{}, d.vocab, c), ValidationError);
}

TEST_CASE("dataset generation") {
  const auto& d = tiny_data();
  const GCNConfig c = tiny_config();
  const LMModel g = pretrain_generator(d.seed_train, d.vocab, c);
  const ValueHead head = init_value_head(g.config.d_model, 1);
  const auto prompts = extract_prompts(d.seed_train);
  REQUIRE(prompts.prompts.size() > 0);

  SUBCASE("counts, prefixes and alternation") {
    const auto out = generate_dataset(g, g, head, prompts, d.vocab, 16, c.gen, 9, 1);
    CHECK(out.rollouts.size() == 16);
    CHECK(out.dataset.size() <= 16);
    for (const auto& conv : out.dataset.conversations) {
      CHECK(conv.synthetic);
      REQUIRE(conv.source_prompt_id.has_value());
      const auto src = std::find_if(d.seed_train.conversations.begin(),
                                    d.seed_train.conversations.end(),
                                    [&](const Conversation& s) { return s.id == *conv.source_prompt_id; });
      REQUIRE(src != d.seed_train.conversations.end());
      REQUIRE(conv.turns.size() > kPromptTurns);
      for (std::size_t i = 0; i < kPromptTurns; ++i) CHECK(conv.turns[i] == src->turns[i]);
      CHECK_NOTHROW(validate_conversation(conv));
    }
  }
  SUBCASE("more conversations than prompts samples with replacement") {
    const std::size_t n = prompts.prompts.size() + 5;
    const auto out = generate_dataset(g, g, head, prompts, d.vocab, n, c.gen, 9, 1);
    CHECK(out.rollouts.size() == n);
  }
  SUBCASE("thread count does not matter") {
    const auto a = generate_dataset(g, g, head, prompts, d.vocab, 8, c.gen, 4, 1);
    const auto b = generate_dataset(g, g, head, prompts, d.vocab, 8, c.gen, 4, 3);
    CHECK(a.dataset.conversations == b.dataset.conversations);
  }
  SUBCASE("no prompts") {
    CHECK_THROWS_AS(generate_dataset(g, g, head, PromptSet{}, d.vocab, 4, c.gen, 1, 1),
                    ValidationError);
  }
}

TEST_CASE("learner spawning") {
  const auto& d = tiny_data();
  const GCNConfig c = tiny_config();
  const LMModel a = spawn_and_train_learner(d.seed_train, d.vocab, c.learner_model, c.learner, 8);
  const LMModel b = spawn_and_train_learner(d.seed_train, d.vocab, c.learner_model, c.learner, 8);
  CHECK(same_parameters(a, b));
  LMConfig lc = c.learner_model;
  lc.vocab_size = d.vocab.size();
  CHECK_FALSE(same_parameters(a, init_lm(lc, 8)));
  CHECK_THROWS_AS(spawn_and_train_learner(Corpus{}, d.vocab, c.learner_model, c.learner, 8),
                  ValidationError);
}

TEST_CASE("meta-loop iterations") {
  const auto& d = tiny_data();
  GCNConfig c = tiny_config();
  const LMModel pretrained = pretrain_generator(d.seed_train, d.vocab, c);

  SUBCASE("reward is the learner report's combined reward") {
    GCNLoop loop(c, d, pretrained.clone());
    const auto r1 = loop.step();
    const auto r2 = loop.step();
    CHECK(r1.iteration == 1);
    CHECK(r2.iteration == 2);
    CHECK(r1.reward == r1.report.combined_reward);
    CHECK(r1.dataset_size <= c.conversations_per_iteration);
    CHECK(r1.ppo_applied);
    CHECK(r1.rollout_kl == 0.0);
    CHECK(r1.report.n_samples > 0);
  }
  SUBCASE("zero PPO learning rate leaves the generator unchanged") {
    c.ppo.lr = 0.0;
    GCNLoop loop(c, d, pretrained.clone());
    loop.step();
    CHECK(same_parameters(loop.generator(), pretrained));
  }
  SUBCASE("frozen generator condition never updates") {
    c.update_generator = false;
    GCNLoop loop(c, d, pretrained.clone());
    const auto r = loop.step();
    CHECK_FALSE(r.ppo_applied);
    CHECK(same_parameters(loop.generator(), pretrained));
  }
  SUBCASE("both conditions see the same first iteration") {
    const auto a = GCNLoop(c, d, pretrained.clone()).step();
    c.update_generator = false;
    const auto b = GCNLoop(c, d, pretrained.clone()).step();
    CHECK(a.reward == b.reward);
    CHECK(a.report.to_json() == b.report.to_json());
    CHECK(a.rollout_kl == b.rollout_kl);
  }
  SUBCASE("record JSON round trip") {
    GCNLoop loop(c, d, pretrained.clone());
    const auto r = loop.step();
    CHECK(IterationRecord::from_json(r.to_json()).to_json() == r.to_json());
  }
}

TEST_CASE("stopping rule") {
  auto history = [](std::vector<double> rewards) {
    std::vector<IterationRecord> h;
    for (const double r : rewards) {
      IterationRecord rec;
      rec.reward = r;
      h.push_back(rec);
    }
    return h;
  };
  CHECK_FALSE(converged(history({0.5}), 1e-3, 1));
  CHECK(converged(history({0.5, 0.5004}), 1e-3, 1));
  CHECK_FALSE(converged(history({0.5, 0.5004, 0.6}), 1e-3, 1));
  CHECK_FALSE(converged(history({0.1, 0.5, 0.5, 0.5}), 1e-3, 3));
  CHECK(converged(history({0.5, 0.5, 0.5, 0.5}), 1e-3, 3));
  const double inf = std::numeric_limits<double>::infinity();
  CHECK_FALSE(converged(history({0.1, 0.9, 0.2}), inf, 3));
  CHECK(converged(history({0.1, 0.9, 0.2, 0.7}), inf, 3));
}

TEST_CASE("full runs") {
  const auto& d = tiny_data();

  SUBCASE("one iteration still yields a final learner") {
    GCNConfig c = tiny_config();
    c.max_iterations = 1;
    const GCNRun run = run_gcn(c, d);
    CHECK(run.history.size() == 1);
    CHECK(run.best_iteration == 1);
    CHECK(run.final_train_size == d.seed_train.size() + run.final_dataset.size());
    CHECK(run.final_dataset.size() <= d.seed_train.size());
    CHECK(run.final_val_report.n_samples > 0);
  }
  SUBCASE("infinite tolerance stops after patience + 1 iterations") {
    GCNConfig c = tiny_config();
    c.tolerance = std::numeric_limits<double>::infinity();
    c.patience = 2;
    c.max_iterations = 10;
    CHECK(run_gcn(c, d).history.size() == 3);
  }
  SUBCASE("run directory and best generator audit") {
    GCNConfig c = tiny_config();
    c.max_iterations = 3;
    c.patience = 5;
    const fs::path dir = temp_dir("run");
    RunOptions opts;
    opts.run_dir = dir;
    std::size_t seen = 0;
    opts.on_iteration = [&](const IterationRecord&) { ++seen; };
    const GCNRun run = run_gcn(c, d, opts);
    CHECK(seen == run.history.size());
    for (const char* f : {"config.json", "history.jsonl", "dprime_final.jsonl",
                          "final_report.json", "checkpoints/final_learner.ckpt"}) {
      CHECK(fs::exists(dir / f));
    }
    std::size_t best = 0;
    for (std::size_t i = 0; i < run.history.size(); ++i) {
      CHECK(fs::exists(dir / "checkpoints" / ("gen_iter_" + std::to_string(i + 1) + ".ckpt")));
      if (run.history[i].reward > run.history[best].reward) best = i;
    }
    CHECK(run.best_iteration == run.history[best].iteration);
    const LMModel reloaded = load_checkpoint(
        dir / "checkpoints" / ("gen_iter_" + std::to_string(run.best_iteration) + ".ckpt"));
    CHECK(same_parameters(reloaded, run.best_generator));
    const Corpus dprime = load_jsonl(dir / "dprime_final.jsonl");
    CHECK(dprime.conversations == run.final_dataset.conversations);
    const LMModel learner = load_checkpoint(dir / "checkpoints/final_learner.ckpt");
    EvalConfig ec = c.eval;
    const auto report = evaluate_learner(learner, d.seed_val, d.vocab, d.embeddings, ec, c.weights);
    CHECK(std::abs(report.combined_reward - run.final_val_report.combined_reward) <= 1e-9);
    fs::remove_all(dir);
  }
}

TEST_CASE("baseline conditions") {
  const auto& d = tiny_data();
  GCNConfig c = tiny_config();
  c.max_iterations = 1;
  const auto res = run_baselines(c, d);
  REQUIRE(res.conditions.size() == 4);
  const char* order[] = {"full_data", "seed_only", "gcn", "gcn_no_rl"};
  for (std::size_t i = 0; i < 4; ++i) CHECK(res.conditions[i].condition == order[i]);
  CHECK(res.at("full_data").train_conversations > res.at("seed_only").train_conversations);
  CHECK(res.gcn.history.front().ppo_applied);
  CHECK_FALSE(res.gcn_no_rl.history.front().ppo_applied);
  CHECK(res.gcn.history.front().reward == res.gcn_no_rl.history.front().reward);
  const auto csv = res.to_csv();
  CHECK(csv.rfind("condition,bleu,rouge1,rouge2,rougeL,embed,combined\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  CHECK_THROWS_AS(res.at("nope"), ValidationError);
}
