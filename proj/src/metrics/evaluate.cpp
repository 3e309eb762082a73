#include "gcnforge/error.hpp"
#include "gcnforge/metrics.hpp"
#include "gcnforge/util.hpp"
#include "json.hpp"

namespace gcnforge {

std::string MetricReport::to_json() const {
  const nlohmann::json j = {{"bleu", bleu},           {"rouge1_f", rouge1_f},
                            {"rouge2_f", rouge2_f},   {"rougeL_f", rougeL_f},
                            {"embed_f", embed_f},     {"combined_reward", combined_reward},
                            {"n_samples", n_samples}};
  return j.dump();
}

MetricReport MetricReport::from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    MetricReport r;
    r.bleu = j.at("bleu").get<double>();
    r.rouge1_f = j.at("rouge1_f").get<double>();
    r.rouge2_f = j.at("rouge2_f").get<double>();
    r.rougeL_f = j.at("rougeL_f").get<double>();
    r.embed_f = j.at("embed_f").get<double>();
    r.combined_reward = j.at("combined_reward").get<double>();
    r.n_samples = j.at("n_samples").get<std::size_t>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("metric report: ") + e.what());
  }
}

MetricReport score_responses(std::span<const TokenSequence> hyps,
                             std::span<const TokenSequence> refs, const EmbeddingTable& table,
                             const RewardWeights& weights) {
  if (hyps.size() != refs.size()) {
    throw ShapeError("score_responses: " + std::to_string(hyps.size()) + " hypotheses for " +
                     std::to_string(refs.size()) + " references");
  }
  if (refs.empty()) throw ValidationError("score_responses: no samples to evaluate");
  weights.validate();
  BleuStats stats(4);
  MetricReport r;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    stats.add(hyps[i], refs[i]);
    r.rouge1_f += rouge_n(hyps[i], refs[i], 1).f1;
    r.rouge2_f += rouge_n(hyps[i], refs[i], 2).f1;
    r.rougeL_f += rouge_l(hyps[i], refs[i]).f1;
    r.embed_f += embed_score(hyps[i], refs[i], table).f1;
  }
  const double n = static_cast<double>(refs.size());
  r.n_samples = refs.size();
  r.bleu = stats.score(true);
  r.rouge1_f /= n;
  r.rouge2_f /= n;
  r.rougeL_f /= n;
  r.embed_f /= n;
  r.combined_reward = combined_reward(r.bleu, r.rouge1_f, r.embed_f, weights);
  return r;
}

EvalSamples learner_responses(const LMModel& learner, const Corpus& corpus, const Vocab& vocab,
                              const EvalConfig& config) {
  if (learner.config.vocab_size != vocab.size()) {
    throw ValidationError("evaluate: learner vocabulary has " +
                          std::to_string(learner.config.vocab_size) + " tokens, vocab file has " +
                          std::to_string(vocab.size()));
  }
  if (config.max_new_tokens == 0 || config.max_new_tokens + 2 > learner.config.max_seq) {
    throw ConfigError("evaluate: max_new_tokens must be in [1, max_seq - 2]");
  }
  struct Position {
    const Conversation* conv;
    std::size_t turn;
  };
  std::vector<Position> positions;
  for (const auto& conv : corpus.conversations) {
    for (std::size_t i = 1; i < conv.turns.size(); ++i) positions.push_back({&conv, i});
  }
  if (positions.empty()) throw ValidationError("evaluate: corpus has no evaluable turns");

  EvalSamples out;
  out.hyps.resize(positions.size());
  out.refs.resize(positions.size());
  GenerationConfig gen;
  gen.temperature = 0.0;
  gen.top_k = 0;
  gen.max_new_tokens = config.max_new_tokens;
  gen.enforce_dialogue_grammar = false;
  gen.max_turns = 1;
  const std::size_t budget = learner.config.max_seq - config.max_new_tokens;
  parallel_for(positions.size(), config.threads, [&](std::size_t k) {
    const auto& [conv, i] = positions[k];
    const std::span<const Turn> context(conv->turns.data(), i);
    const auto prompt = response_prompt(context, conv->turns[i].speaker, vocab, budget);
    const auto result = generate(learner, prompt, gen);
    TokenSequence hyp;
    for (std::size_t t = result.prompt_length; t < result.ids.size(); ++t) {
      if (!Vocab::is_word(result.ids[t])) break;
      hyp.push_back(result.ids[t]);
    }
    out.hyps[k] = std::move(hyp);
    out.refs[k] = vocab.encode_text(conv->turns[i].text);
  });
  return out;
}

MetricReport evaluate_learner(const LMModel& learner, const Corpus& corpus, const Vocab& vocab,
                              const EmbeddingTable& table, const EvalConfig& config,
                              const RewardWeights& weights) {
  const auto samples = learner_responses(learner, corpus, vocab, config);
  return score_responses(samples.hyps, samples.refs, table, weights);
}

}  // namespace gcnforge
