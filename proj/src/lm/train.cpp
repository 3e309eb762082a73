#include <algorithm>
#include <cmath>
#include <numeric>

#include "gcnforge/error.hpp"
#include "gcnforge/lm.hpp"
#include "gcnforge/optim.hpp"

namespace gcnforge {

LmDataset lm_dataset_from(const Corpus& corpus, const Vocab& vocab, std::size_t max_seq) {
  LmDataset out;
  for (const auto& conv : corpus.conversations) {
    TokenSequence tokens;
    try {
      tokens = encode_conversation(conv, vocab, max_seq);
    } catch (const DataError&) {
      ++out.dropped;
      continue;
    }
    std::vector<std::uint8_t> mask(tokens.size(), 1);
    mask[0] = 0;
    out.examples.push_back({std::move(tokens), std::move(mask)});
  }
  return out;
}

TokenSequence response_prompt(std::span<const Turn> context, Speaker next, const Vocab& vocab,
                              std::size_t budget) {
  std::vector<TokenSequence> encoded(context.size());
  for (std::size_t i = 0; i < context.size(); ++i) append_turn(encoded[i], context[i], vocab);
  // BOS and the trailing speaker token are always present.
  std::size_t used = 2;
  std::size_t first = context.size();
  while (first > 0 && used + encoded[first - 1].size() <= budget) {
    used += encoded[first - 1].size();
    --first;
  }
  TokenSequence out{Vocab::kBos};
  for (std::size_t i = first; i < context.size(); ++i) {
    out.insert(out.end(), encoded[i].begin(), encoded[i].end());
  }
  out.push_back(speaker_token(next));
  return out;
}

LmDataset learner_dataset_from(const Corpus& corpus, const Vocab& vocab, std::size_t max_seq) {
  LmDataset out;
  for (const auto& conv : corpus.conversations) {
    for (std::size_t i = 1; i < conv.turns.size(); ++i) {
      TokenSequence target = vocab.encode_text(conv.turns[i].text);
      target.push_back(Vocab::kSep);
      if (target.size() + 2 > max_seq) {
        ++out.dropped;
        continue;
      }
      const std::span<const Turn> context(conv.turns.data(), i);
      Example ex;
      ex.tokens = response_prompt(context, conv.turns[i].speaker, vocab, max_seq - target.size());
      ex.loss_mask.assign(ex.tokens.size(), 0);
      ex.tokens.insert(ex.tokens.end(), target.begin(), target.end());
      ex.loss_mask.resize(ex.tokens.size(), 1);
      out.examples.push_back(std::move(ex));
    }
  }
  return out;
}

std::vector<double> train_supervised(LMModel& model, const LmDataset& dataset,
                                     const TrainHyper& hyper, const StepCallback& after_step) {
  if (dataset.examples.empty()) throw ValidationError("train_supervised: empty dataset");
  if (hyper.batch_size == 0) throw ConfigError("train_supervised: batch_size must be positive");
  if (!(hyper.lr >= 0.0)) throw ConfigError("train_supervised: lr must be >= 0");

  const Rng root(hyper.rng_seed);
  Rng order_rng = root.split("order");
  Rng dropout_rng = root.split("dropout");
  auto params = model.parameters();
  zero_grads(params);
  AdamState adam;
  adam.lr = hyper.lr;

  const std::size_t n = dataset.examples.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n;
  std::vector<double> curve;
  curve.reserve(hyper.steps);
  std::vector<Example> batch;
  for (std::size_t step = 0; step < hyper.steps; ++step) {
    batch.clear();
    while (batch.size() < std::min(hyper.batch_size, n)) {
      if (cursor == n) {
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
        cursor = 0;
      }
      batch.push_back(dataset.examples[order[cursor++]]);
    }
    try {
      Tape tape;
      const Tensor loss = nll_loss(tape, model, batch, &dropout_rng);
      tape.backward(loss);
      if (hyper.clip_norm > 0.0) clip_grad_norm(params, hyper.clip_norm);
      curve.push_back(loss.item());
      adam_step(params, adam);
      for (const auto& p : params) require_finite(p, "parameter");
    } catch (const NumericError& e) {
      throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (after_step && !after_step(step + 1, curve.back())) break;
  }
  return curve;
}

}  // namespace gcnforge
