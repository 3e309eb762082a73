#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "gcnforge/error.hpp"
#include "gcnforge/kernels.hpp"
#include "gcnforge/lm.hpp"
#include "gcnforge/optim.hpp"

namespace gcnforge {

IncrementalDecoder::IncrementalDecoder(const LMModel& model)
    : model_(&model),
      keys_(model.blocks.size()),
      values_(model.blocks.size()),
      emb_t_(model.tok_emb.numel()),
      logits_(model.config.vocab_size),
      hidden_(model.config.d_model),
      probs_(model.config.max_seq) {
  kernels::transpose(model.config.vocab_size, model.config.d_model,
                     model.tok_emb.data().data(), emb_t_.data());
}

std::span<const double> IncrementalDecoder::step(int token) {
  const auto& cfg = model_->config;
  if (length_ >= cfg.max_seq) {
    throw ShapeError("decoder: sequence too long (max_seq " + std::to_string(cfg.max_seq) + ")");
  }
  const std::size_t d = cfg.d_model;
  const std::size_t hd = d / cfg.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  // The tape ops below run unrecorded on single rows; they share their loops
  // with forward_packed, so the results match a full forward pass.
  Tape tape(false);
  const int tok[] = {token};
  const int pos[] = {static_cast<int>(length_)};
  Tensor x = tape.add(tape.embedding_lookup(model_->tok_emb, tok),
                      tape.embedding_lookup(model_->pos_emb, pos));
  for (std::size_t l = 0; l < model_->blocks.size(); ++l) {
    const auto& b = model_->blocks[l];
    Tensor h = tape.layer_norm(x, b.ln1_gain, b.ln1_bias);
    Tensor qkv = tape.add(tape.matmul(h, b.w_qkv), b.b_qkv);
    const double* row = qkv.data().data();
    auto& keys = keys_[l];
    auto& values = values_[l];
    keys.insert(keys.end(), row + d, row + 2 * d);
    values.insert(values.end(), row + 2 * d, row + 3 * d);
    Tensor a = Tensor::zeros({1, d});
    for (std::size_t head = 0; head < cfg.n_heads; ++head) {
      kernels::attend_row(row + head * hd, keys.data() + head * hd, values.data() + head * hd, d,
                          length_ + 1, hd, scale, probs_.data(), a.data().data() + head * hd);
    }
    require_finite(a, "decoder attention");
    a = tape.add(tape.matmul(a, b.w_out), b.b_out);
    x = tape.add(x, a);
    h = tape.layer_norm(x, b.ln2_gain, b.ln2_bias);
    Tensor f = tape.gelu(tape.add(tape.matmul(h, b.w_fc), b.b_fc));
    f = tape.add(tape.matmul(f, b.w_proj), b.b_proj);
    x = tape.add(x, f);
  }
  Tensor hidden = tape.layer_norm(x, model_->lnf_gain, model_->lnf_bias);
  std::copy(hidden.data().begin(), hidden.data().end(), hidden_.begin());
  kernels::gemm_nn(1, d, cfg.vocab_size, hidden_.data(), emb_t_.data(), logits_.data(), false);
  ++length_;
  return logits_;
}

namespace {

struct Choice {
  int token;
  double logprob;
};

// Picks the next token among `allowed` candidates. The recorded log-probability
// is taken under the distribution actually sampled from: temperature-scaled,
// top-k truncated and renormalized over the allowed set (temperature 1 when
// decoding greedily).
Choice choose(std::span<const double> logits, std::vector<int>& allowed,
              const GenerationConfig& gen, Rng& rng) {
  if (allowed.empty()) throw Error("generate: no token is allowed at this position");
  const double temp = gen.temperature > 0.0 ? gen.temperature : 1.0;
  if (gen.top_k > 0 && gen.top_k < allowed.size()) {
    std::stable_sort(allowed.begin(), allowed.end(),
                     [&](int a, int b) { return logits[a] > logits[b]; });
    allowed.resize(gen.top_k);
    std::sort(allowed.begin(), allowed.end());
  }
  std::vector<double> scaled(allowed.size());
  for (std::size_t i = 0; i < allowed.size(); ++i) scaled[i] = logits[allowed[i]] / temp;
  const double lse = kernels::log_sum_exp(scaled.data(), scaled.size());
  std::size_t pick = 0;
  if (gen.temperature <= 0.0) {
    for (std::size_t i = 1; i < allowed.size(); ++i) {
      if (scaled[i] > scaled[pick]) pick = i;
    }
  } else {
    std::vector<double> probs(allowed.size());
    double z = 0.0;
    for (std::size_t i = 0; i < allowed.size(); ++i) {
      probs[i] = std::exp(scaled[i] - lse);
      z += probs[i];
    }
    for (auto& p : probs) p /= z;
    pick = sample_categorical(probs, rng);
  }
  return {allowed[pick], scaled[pick] - lse};
}

}  // namespace

ScoredTokens generate(const LMModel& model, std::span<const int> prefix,
                      const GenerationConfig& gen) {
  Rng rng(gen.rng_seed);
  return generate(model, prefix, gen, rng);
}

ScoredTokens generate(const LMModel& model, std::span<const int> prefix,
                      const GenerationConfig& gen, Rng& rng) {
  const auto& cfg = model.config;
  if (prefix.empty() || prefix.front() != Vocab::kBos) {
    throw ShapeError("generate: prefix must start with BOS");
  }
  if (prefix.size() >= cfg.max_seq) {
    throw ShapeError("generate: prefix of " + std::to_string(prefix.size()) +
                     " tokens leaves no room below max_seq " + std::to_string(cfg.max_seq));
  }
  if (gen.temperature < 0.0) throw ConfigError("generate: temperature must be >= 0");

  ScoredTokens out;
  out.ids.assign(prefix.begin(), prefix.end());
  out.prompt_length = prefix.size();

  // Speaker of the most recent turn in the prefix, if any.
  bool have_speaker = false;
  Speaker last_speaker = Speaker::B;
  for (const int t : prefix) {
    if (t == Vocab::kSpkA || t == Vocab::kSpkB) {
      have_speaker = true;
      last_speaker = t == Vocab::kSpkA ? Speaker::A : Speaker::B;
    }
  }

  IncrementalDecoder dec(model);
  std::span<const double> logits;
  for (const int t : prefix) logits = dec.step(t);

  const std::size_t budget = std::min(gen.max_new_tokens, cfg.max_seq - prefix.size());
  std::size_t turns_done = 0;
  std::vector<int> allowed;
  allowed.reserve(cfg.vocab_size);
  for (std::size_t n = 0; n < budget; ++n) {
    const int last = out.ids.back();
    int token = -1;
    double lp = 0.0;
    bool forced = false;
    if (gen.enforce_dialogue_grammar && (last == Vocab::kSep || last == Vocab::kBos)) {
      const Speaker next = have_speaker ? other(last_speaker) : Speaker::A;
      token = speaker_token(next);
      forced = true;
      have_speaker = true;
      last_speaker = next;
    } else {
      allowed.clear();
      if (gen.enforce_dialogue_grammar) {
        // Inside a turn: real words, plus SEP once the turn is non-empty.
        for (int id = Vocab::kNumSpecials; id < static_cast<int>(cfg.vocab_size); ++id) {
          allowed.push_back(id);
        }
        if (last != Vocab::kSpkA && last != Vocab::kSpkB) allowed.push_back(Vocab::kSep);
      } else {
        allowed.resize(cfg.vocab_size);
        std::iota(allowed.begin(), allowed.end(), 0);
      }
      const auto c = choose(logits, allowed, gen, rng);
      token = c.token;
      lp = c.logprob;
    }
    out.ids.push_back(token);
    out.logprobs.push_back(lp);
    out.forced.push_back(forced ? 1 : 0);
    if (token == Vocab::kEos) break;
    if (token == Vocab::kSep && gen.max_turns > 0 && ++turns_done >= gen.max_turns) break;
    if (n + 1 < budget) logits = dec.step(token);
  }
  return out;
}

std::vector<double> logprob_of(const LMModel& model, std::span<const int> tokens,
                               std::size_t from_pos) {
  if (from_pos < 1 || from_pos >= tokens.size()) {
    throw ShapeError("logprob_of: from_pos " + std::to_string(from_pos) +
                     " out of range for sequence of " + std::to_string(tokens.size()));
  }
  Tape tape(false);
  const std::span<const int> seqs[] = {tokens};
  const auto pass = forward_packed(tape, model, seqs);
  std::vector<std::size_t> rows;
  std::vector<int> targets;
  for (std::size_t t = from_pos; t < tokens.size(); ++t) {
    rows.push_back(t - 1);
    targets.push_back(tokens[t]);
  }
  const Tensor lp = tape.token_logprobs(tape.gather_rows(pass.logits, rows), targets);
  return {lp.data().begin(), lp.data().end()};
}

}  // namespace gcnforge
