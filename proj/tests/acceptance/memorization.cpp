#include <chrono>
#include <cstdio>

#include "criteria.hpp"
#include "gcnforge/lm.hpp"

using namespace gcnforge;

namespace acceptance {

Outcome memorization() {
  const auto start = std::chrono::steady_clock::now();
  const Corpus corpus = make_toy_corpus(8, 3);
  const Vocab vocab = build_vocab(corpus, 1000, 1);
  LMConfig lc;
  lc.vocab_size = vocab.size();
  lc.d_model = 32;
  lc.n_layers = 2;
  lc.n_heads = 4;
  lc.max_seq = 64;
  lc.dropout = 0.0;
  auto dataset = learner_dataset_from(corpus, vocab, lc.max_seq);
  if (dataset.examples.size() < 16) return {false, "toy corpus yielded fewer than 16 examples"};
  dataset.examples.resize(16);

  LMModel learner = init_lm(lc, 11);
  const double initial = nll_loss(learner, dataset.examples);
  TrainHyper hyper;
  hyper.lr = 3e-3;
  hyper.batch_size = 8;
  hyper.steps = 2000;
  hyper.rng_seed = 11;
  // The full-dataset NLL is checked every 10 steps; training stops once it
  // is below the target.
  std::size_t steps = 0;
  double nll = initial;
  train_supervised(learner, dataset, hyper, [&](std::size_t step, double) {
    steps = step;
    if (step % 10 != 0) return true;
    nll = nll_loss(learner, dataset.examples);
    return nll >= 0.05;
  });
  const double final_nll = nll_loss(learner, dataset.examples);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  char buf[220];
  std::snprintf(buf, sizeof(buf),
                "per-token NLL %.3f at init, %.4f after %zu of at most %zu steps, %.1f s",
                initial, final_nll, steps, hyper.steps, secs);
  return {final_nll < 0.05 && steps <= hyper.steps && secs < 60.0, buf};
}

}  // namespace acceptance
