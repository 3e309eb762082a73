#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "gcnforge/error.hpp"
#include "gcnforge/gcn.hpp"
#include "gcnforge/util.hpp"
#include "json.hpp"

namespace gcnforge {

namespace {

using nlohmann::json;

std::uint64_t derive(std::uint64_t seed, std::string_view label, std::uint64_t k = 0) {
  return Rng(seed).split(label).split(k).next_u64();
}

LMConfig with_vocab(LMConfig c, const Vocab& vocab) {
  c.vocab_size = vocab.size();
  return c;
}

json stats_json(const PPOStats& s) {
  return {{"policy_loss", s.policy_loss},
          {"value_loss", s.value_loss},
          {"entropy", s.entropy},
          {"mean_kl", s.mean_kl},
          {"clip_fraction", s.clip_fraction},
          {"first_clip_fraction", s.first_clip_fraction},
          {"first_policy_loss", s.first_policy_loss},
          {"first_mean_advantage", s.first_mean_advantage},
          {"minibatches", s.minibatches},
          {"aborted", s.aborted},
          {"abort_reason", s.abort_reason}};
}

PPOStats stats_from(const json& j) {
  PPOStats s;
  s.policy_loss = j.at("policy_loss").get<double>();
  s.value_loss = j.at("value_loss").get<double>();
  s.entropy = j.at("entropy").get<double>();
  s.mean_kl = j.at("mean_kl").get<double>();
  s.clip_fraction = j.at("clip_fraction").get<double>();
  s.first_clip_fraction = j.at("first_clip_fraction").get<double>();
  s.first_policy_loss = j.at("first_policy_loss").get<double>();
  s.first_mean_advantage = j.at("first_mean_advantage").get<double>();
  s.minibatches = j.at("minibatches").get<std::size_t>();
  s.aborted = j.at("aborted").get<bool>();
  s.abort_reason = j.at("abort_reason").get<std::string>();
  return s;
}

}  // namespace

std::string IterationRecord::to_json() const {
  const json j = {{"iteration", iteration},
                  {"dataset_size", dataset_size},
                  {"reward", reward},
                  {"report", json::parse(report.to_json())},
                  {"rollout_kl", rollout_kl},
                  {"ppo_applied", ppo_applied},
                  {"ppo", stats_json(ppo)}};
  return j.dump();
}

IterationRecord IterationRecord::from_json(std::string_view text) {
  try {
    const auto j = json::parse(text);
    IterationRecord r;
    r.iteration = j.at("iteration").get<std::size_t>();
    r.dataset_size = j.at("dataset_size").get<std::size_t>();
    r.reward = j.at("reward").get<double>();
    r.report = MetricReport::from_json(j.at("report").dump());
    r.rollout_kl = j.at("rollout_kl").get<double>();
    r.ppo_applied = j.at("ppo_applied").get<bool>();
    r.ppo = stats_from(j.at("ppo"));
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("iteration record: ") + e.what());
  }
}

LMModel pretrain_generator(const Corpus& seed_train, const Vocab& vocab, const GCNConfig& config) {
  if (seed_train.empty()) throw ValidationError("pretrain_generator: seed_train is empty");
  const LMConfig lc = with_vocab(config.generator_model, vocab);
  LMModel model = init_lm(lc, derive(config.rng_seed, "generator-init"));
  const auto dataset = lm_dataset_from(seed_train, vocab, lc.max_seq);
  if (dataset.examples.empty()) {
    throw ValidationError("pretrain_generator: no seed conversation fits in max_seq " +
                          std::to_string(lc.max_seq));
  }
  TrainHyper hyper = config.generator_pretrain;
  hyper.rng_seed = derive(config.rng_seed, "generator-pretrain");
  train_supervised(model, dataset, hyper);
  return model;
}

GeneratedData generate_dataset(const LMModel& generator, const LMModel& reference,
                               const ValueHead& value_head, const PromptSet& prompts,
                               const Vocab& vocab, std::size_t n, const GenerationConfig& gen,
                               std::uint64_t sample_seed, std::size_t threads) {
  const auto& pool = prompts.prompts;
  if (pool.empty()) throw ValidationError("generate_dataset: no prompts available");
  if (n == 0) throw ValidationError("generate_dataset: n must be positive");
  Rng rng = Rng(sample_seed).split("prompts");
  std::vector<std::size_t> picks;
  if (pool.size() < n) {
    for (std::size_t i = 0; i < n; ++i) picks.push_back(rng.below(pool.size()));
  } else {
    std::vector<std::size_t> order(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = 0; i < n; ++i) {
      std::swap(order[i], order[i + rng.below(order.size() - i)]);
      picks.push_back(order[i]);
    }
  }
  std::vector<Prompt> chosen;
  for (const auto i : picks) chosen.push_back(pool[i]);
  const auto requests = rollout_requests(chosen, vocab);
  GenerationConfig g = gen;
  g.rng_seed = Rng(sample_seed).split("rollouts").next_u64();

  GeneratedData out;
  out.rollouts = collect_rollouts(generator, reference, value_head, requests, g, threads);
  out.dataset.name = "synthetic";
  for (std::size_t k = 0; k < out.rollouts.size(); ++k) {
    const auto& ep = out.rollouts.episodes[k];
    const Conversation decoded = decode_tokens(ep.full(), vocab, DecodeMode::kTolerant);
    if (decoded.turns.size() <= kPromptTurns) continue;
    Conversation conv;
    conv.id = "syn" + std::to_string(k) + ":" + chosen[k].source_conversation_id;
    conv.turns = chosen[k].turns;
    conv.turns.insert(conv.turns.end(), decoded.turns.begin() + kPromptTurns, decoded.turns.end());
    conv.source_prompt_id = chosen[k].source_conversation_id;
    conv.synthetic = true;
    out.dataset.conversations.push_back(std::move(conv));
  }
  return out;
}

LMModel spawn_and_train_learner(const Corpus& train_data, const Vocab& vocab,
                                const LMConfig& learner_model, const TrainHyper& hyper,
                                std::uint64_t base_seed) {
  if (train_data.empty()) throw ValidationError("spawn_and_train_learner: empty training data");
  LMModel learner = init_lm(with_vocab(learner_model, vocab), base_seed);
  const auto dataset = learner_dataset_from(train_data, vocab, learner.config.max_seq);
  if (dataset.examples.empty()) {
    throw ValidationError("spawn_and_train_learner: training data yields no response examples");
  }
  train_supervised(learner, dataset, hyper);
  return learner;
}

namespace {

TrainHyper learner_hyper(const GCNConfig& config) {
  TrainHyper h = config.learner;
  h.rng_seed = derive(config.rng_seed, "learner-train");
  return h;
}

std::uint64_t learner_base_seed(const GCNConfig& config) {
  return derive(config.rng_seed, "learner-init");
}

LMModel train_learner(const Corpus& data, const Vocab& vocab, const GCNConfig& config) {
  return spawn_and_train_learner(data, vocab, config.learner_model, learner_hyper(config),
                                 learner_base_seed(config));
}

}  // namespace

GCNLoop::GCNLoop(const GCNConfig& config, const PreparedData& data, LMModel pretrained)
    : config_(config),
      data_(&data),
      prompts_(extract_prompts(data.seed_train)),
      generator_(std::move(pretrained)),
      reference_(generator_.clone()),
      ppo_(init_ppo_state(generator_, config.ppo, derive(config.rng_seed, "ppo-state"))) {
  config_.validate();
  if (prompts_.prompts.empty()) {
    throw ValidationError("seed_train has no conversation with more than " +
                          std::to_string(kPromptTurns) + " turns to prompt from");
  }
}

IterationRecord GCNLoop::step() {
  const auto start = std::chrono::steady_clock::now();
  const auto& d = *data_;
  IterationRecord rec;
  rec.iteration = ++iteration_;

  auto generated = generate_dataset(generator_, reference_, ppo_.value_head, prompts_, d.vocab,
                                    config_.conversations_per_iteration, config_.gen,
                                    derive(config_.rng_seed, "iteration", rec.iteration),
                                    config_.threads);
  rec.dataset_size = generated.dataset.size();
  rec.rollout_kl = generated.rollouts.mean_kl();
  if (!generated.dataset.empty()) {
    const LMModel learner = train_learner(generated.dataset, d.vocab, config_);
    EvalConfig ec = config_.eval;
    ec.threads = config_.threads;
    rec.report = evaluate_learner(learner, d.seed_val, d.vocab, d.embeddings, ec, config_.weights);
  }
  rec.reward = rec.report.combined_reward;

  if (config_.update_generator) {
    auto& batch = generated.rollouts;
    assign_rewards(batch, rec.reward, config_.ppo.kl_coef);
    compute_advantages(batch, config_.ppo.gamma, config_.ppo.lambda,
                       config_.ppo.advantage_whitening);
    Rng shuffle = Rng(config_.rng_seed).split("ppo-shuffle").split(rec.iteration);
    rec.ppo = ppo_update(generator_, ppo_, batch, config_.ppo, shuffle);
    rec.ppo_applied = !rec.ppo.aborted;
  }
  rec.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

bool converged(std::span<const IterationRecord> history, double tolerance, std::size_t patience) {
  if (history.size() < patience + 1) return false;
  for (std::size_t i = history.size() - patience; i < history.size(); ++i) {
    if (!(std::abs(history[i].reward - history[i - 1].reward) < tolerance)) return false;
  }
  return true;
}

namespace {

void write_history(const std::filesystem::path& path, std::span<const IterationRecord> history) {
  std::string text;
  for (const auto& r : history) text += r.to_json() + "\n";
  write_file(path, text);
}

}  // namespace

GCNRun run_gcn(const GCNConfig& config, const PreparedData& data, const RunOptions& options) {
  config.validate();
  return run_gcn(config, data, pretrain_generator(data.seed_train, data.vocab, config), options);
}

GCNRun run_gcn(const GCNConfig& config, const PreparedData& data, const LMModel& pretrained,
               const RunOptions& options) {
  config.validate();
  std::filesystem::path ckpt_dir;
  if (options.run_dir) {
    ckpt_dir = *options.run_dir / "checkpoints";
    std::filesystem::create_directories(ckpt_dir);
    write_file(*options.run_dir / "config.json", config.to_json() + "\n");
  }

  GCNLoop loop(config, data, pretrained.clone());
  GCNRun run;
  double best_reward = -INFINITY;
  while (run.history.size() < config.max_iterations) {
    // The generator that produces this iteration's dataset is the one the
    // reward belongs to; the update happens afterwards.
    LMModel used = loop.generator().clone();
    run.history.push_back(loop.step());
    const auto& rec = run.history.back();
    if (options.run_dir) {
      save_checkpoint(used, ckpt_dir / ("gen_iter_" + std::to_string(rec.iteration) + ".ckpt"));
      write_history(*options.run_dir / "history.jsonl", run.history);
    }
    if (rec.reward > best_reward) {
      best_reward = rec.reward;
      run.best_iteration = rec.iteration;
      run.best_generator = std::move(used);
    }
    if (options.on_iteration) options.on_iteration(rec);
    if (converged(run.history, config.tolerance, config.patience)) break;
  }

  const std::size_t n =
      config.final_conversations > 0 ? config.final_conversations : data.seed_train.size();
  const auto prompts = extract_prompts(data.seed_train);
  run.final_dataset =
      generate_dataset(run.best_generator, loop.reference(), loop.ppo_state().value_head, prompts,
                       data.vocab, n, config.gen, derive(config.rng_seed, "final-dataset"),
                       config.threads)
          .dataset;
  run.final_dataset.name = "dprime_final";
  const Corpus train = concat_corpora(data.seed_train, run.final_dataset, "final_train");
  run.final_train_size = train.size();
  run.final_learner = train_learner(train, data.vocab, config);
  EvalConfig ec = config.eval;
  ec.threads = config.threads;
  run.final_val_report = evaluate_learner(run.final_learner, data.seed_val, data.vocab,
                                          data.embeddings, ec, config.weights);
  if (options.run_dir) {
    save_checkpoint(run.final_learner, ckpt_dir / "final_learner.ckpt");
    save_jsonl(run.final_dataset, *options.run_dir / "dprime_final.jsonl");
    write_file(*options.run_dir / "final_report.json", run.final_val_report.to_json() + "\n");
  }
  return run;
}

const ConditionResult& BaselineResults::at(std::string_view condition) const {
  for (const auto& c : conditions) {
    if (c.condition == condition) return c;
  }
  throw ValidationError("no baseline condition named '" + std::string(condition) + "'");
}

std::string BaselineResults::to_csv() const {
  std::string out = "condition,bleu,rouge1,rouge2,rougeL,embed,combined\n";
  char buf[256];
  for (const auto& c : conditions) {
    const auto& r = c.report;
    std::snprintf(buf, sizeof(buf), "%s,%.12f,%.12f,%.12f,%.12f,%.12f,%.12f\n", c.condition.c_str(),
                  r.bleu, r.rouge1_f, r.rouge2_f, r.rougeL_f, r.embed_f, r.combined_reward);
    out += buf;
  }
  return out;
}

BaselineResults run_baselines(const GCNConfig& config, const PreparedData& data,
                              const std::optional<std::filesystem::path>& out_dir) {
  config.validate();
  if (data.test.empty()) throw ValidationError("run_baselines: the test split is empty");
  EvalConfig ec = config.eval;
  ec.threads = config.threads;
  auto score = [&](const LMModel& learner) {
    return evaluate_learner(learner, data.test, data.vocab, data.embeddings, ec, config.weights);
  };

  BaselineResults res;
  const Corpus full = concat_corpora(data.seed_train, data.rest, "full_train");
  res.conditions.push_back(
      {"full_data", score(train_learner(full, data.vocab, config)), full.size()});
  res.conditions.push_back({"seed_only", score(train_learner(data.seed_train, data.vocab, config)),
                            data.seed_train.size()});

  const LMModel pretrained = pretrain_generator(data.seed_train, data.vocab, config);
  for (const bool update : {true, false}) {
    GCNConfig c = config;
    c.update_generator = update;
    RunOptions opts;
    if (out_dir) opts.run_dir = *out_dir / (update ? "gcn" : "gcn_no_rl");
    GCNRun run = run_gcn(c, data, pretrained, opts);
    res.conditions.push_back(
        {update ? "gcn" : "gcn_no_rl", score(run.final_learner), run.final_train_size});
    (update ? res.gcn : res.gcn_no_rl) = std::move(run);
  }
  if (out_dir) write_file(*out_dir / "baselines.csv", res.to_csv());
  return res;
}

}  // namespace gcnforge
