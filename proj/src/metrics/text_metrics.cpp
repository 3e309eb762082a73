#include <algorithm>
#include <cmath>
#include <map>

#include "gcnforge/error.hpp"
#include "gcnforge/metrics.hpp"

namespace gcnforge {

namespace {

using NgramCounts = std::map<std::vector<int>, std::size_t>;

NgramCounts ngrams(std::span<const int> seq, std::size_t n) {
  NgramCounts out;
  if (n == 0 || seq.size() < n) return out;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) {
    ++out[std::vector<int>(seq.begin() + i, seq.begin() + i + n)];
  }
  return out;
}

std::size_t clipped_overlap(const NgramCounts& hyp, const NgramCounts& ref) {
  std::size_t total = 0;
  for (const auto& [gram, count] : hyp) {
    const auto it = ref.find(gram);
    if (it != ref.end()) total += std::min(count, it->second);
  }
  return total;
}

}  // namespace

double harmonic_mean(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

BleuStats::BleuStats(std::size_t max_n_)
    : max_n(max_n_), matches(max_n_, 0.0), totals(max_n_, 0.0) {
  if (max_n == 0) throw ConfigError("bleu: max_n must be positive");
}

void BleuStats::add(std::span<const int> hyp, std::span<const int> ref) {
  if (ref.empty()) throw ValidationError("bleu: empty reference");
  hyp_length += static_cast<double>(hyp.size());
  ref_length += static_cast<double>(ref.size());
  for (std::size_t n = 1; n <= max_n; ++n) {
    const auto h = ngrams(hyp, n);
    matches[n - 1] += static_cast<double>(clipped_overlap(h, ngrams(ref, n)));
    totals[n - 1] += hyp.size() >= n ? static_cast<double>(hyp.size() - n + 1) : 0.0;
  }
}

double BleuStats::score(bool smooth) const {
  if (hyp_length == 0.0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    double m = matches[n - 1];
    double t = totals[n - 1];
    if (smooth && n > 1) {
      m += 1.0;
      t += 1.0;
    }
    if (m == 0.0 || t == 0.0) return 0.0;
    log_sum += std::log(m / t);
  }
  const double bp = std::min(1.0, std::exp(1.0 - ref_length / hyp_length));
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

double bleu(std::span<const int> hyp, std::span<const int> ref, std::size_t max_n, bool smooth) {
  BleuStats stats(max_n);
  stats.add(hyp, ref);
  return stats.score(smooth);
}

PRF rouge_n(std::span<const int> hyp, std::span<const int> ref, std::size_t n) {
  if (ref.empty()) throw ValidationError("rouge: empty reference");
  if (n == 0) throw ConfigError("rouge: n must be positive");
  const auto h = ngrams(hyp, n);
  const auto r = ngrams(ref, n);
  const double overlap = static_cast<double>(clipped_overlap(h, r));
  const double nh = hyp.size() >= n ? static_cast<double>(hyp.size() - n + 1) : 0.0;
  const double nr = ref.size() >= n ? static_cast<double>(ref.size() - n + 1) : 0.0;
  PRF out;
  out.precision = nh > 0.0 ? overlap / nh : 0.0;
  out.recall = nr > 0.0 ? overlap / nr : 0.0;
  out.f1 = harmonic_mean(out.precision, out.recall);
  return out;
}

std::size_t lcs_length(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

PRF rouge_l(std::span<const int> hyp, std::span<const int> ref) {
  if (ref.empty()) throw ValidationError("rouge: empty reference");
  PRF out;
  if (hyp.empty()) return out;
  const double l = static_cast<double>(lcs_length(hyp, ref));
  out.precision = l / static_cast<double>(hyp.size());
  out.recall = l / static_cast<double>(ref.size());
  out.f1 = harmonic_mean(out.precision, out.recall);
  return out;
}

void RewardWeights::validate() const {
  if (!(bleu >= 0.0 && rouge1 >= 0.0 && embed >= 0.0)) {
    throw ConfigError("reward weights must be non-negative");
  }
}

double combined_reward(double bleu_score, double rouge1_f, double embed_f, const RewardWeights& w) {
  for (const double x : {bleu_score, rouge1_f, embed_f}) {
    if (!(x >= 0.0 && x <= 1.0 + 1e-12)) {
      throw ValidationError("combined_reward: component " + std::to_string(x) + " outside [0, 1]");
    }
  }
  return w.bleu * bleu_score + w.rouge1 * rouge1_f + w.embed * embed_f;
}

}  // namespace gcnforge
