#include <chrono>
#include <cmath>
#include <cstdio>

#include "criteria.hpp"
#include "gcnforge/metrics.hpp"
#include "support/metric_oracles.hpp"

using namespace gcnforge;

namespace acceptance {

Outcome metric_oracles() {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(2024);
  constexpr std::size_t kPairs = 200;
  double worst = 0.0;
  std::vector<oracle::Seq> hyps, refs;
  for (std::size_t k = 0; k < kPairs; ++k) {
    // Alternate between small and wider alphabets to cover both heavy and
    // sparse overlap.
    const int alphabet = k % 2 == 0 ? 4 : 12;
    const auto h = oracle::random_seq(rng, 1, 12, alphabet);
    const auto r = oracle::random_seq(rng, 1, 12, alphabet);
    hyps.push_back(h);
    refs.push_back(r);
    for (const bool smooth : {true, false}) {
      worst = std::max(worst, std::abs(bleu(h, r, 4, smooth) - oracle::bleu({h}, {r}, 4, smooth)));
    }
    for (std::size_t n = 1; n <= 2; ++n) {
      const auto a = rouge_n(h, r, n);
      const auto b = oracle::rouge_n(h, r, n);
      worst = std::max({worst, std::abs(a.precision - b.p), std::abs(a.recall - b.r),
                        std::abs(a.f1 - b.f)});
    }
    const auto a = rouge_l(h, r);
    const auto b = oracle::rouge_l(h, r);
    worst = std::max({worst, std::abs(a.precision - b.p), std::abs(a.recall - b.r),
                      std::abs(a.f1 - b.f)});
  }
  BleuStats corpus(4);
  for (std::size_t k = 0; k < kPairs; ++k) corpus.add(hyps[k], refs[k]);
  worst = std::max(worst, std::abs(corpus.score(true) - oracle::bleu(hyps, refs, 4, true)));

  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%zu pairs, max abs difference %.3g, %.2f s", kPairs, worst,
                secs);
  return {worst <= 1e-9 && secs < 5.0, buf};
}

}  // namespace acceptance
