#include <cmath>

#include "gcnforge/error.hpp"
#include "gcnforge/lm.hpp"

namespace gcnforge {

void LMConfig::validate() const {
  if (vocab_size < static_cast<std::size_t>(Vocab::kNumSpecials) + 1) {
    throw ConfigError("vocab_size must be at least 8, got " + std::to_string(vocab_size));
  }
  if (d_model == 0 || n_layers == 0 || n_heads == 0) {
    throw ConfigError("d_model, n_layers and n_heads must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (max_seq < 16) throw ConfigError("max_seq must be at least 16");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  if (!(init_scale > 0.0)) throw ConfigError("init_scale must be positive");
}

std::vector<NamedTensor> LMModel::named_parameters() const {
  std::vector<NamedTensor> out{{"tok_emb", tok_emb}, {"pos_emb", pos_emb}};
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    out.push_back({p + "ln1.gain", b.ln1_gain});
    out.push_back({p + "ln1.bias", b.ln1_bias});
    out.push_back({p + "attn.w_qkv", b.w_qkv});
    out.push_back({p + "attn.b_qkv", b.b_qkv});
    out.push_back({p + "attn.w_out", b.w_out});
    out.push_back({p + "attn.b_out", b.b_out});
    out.push_back({p + "ln2.gain", b.ln2_gain});
    out.push_back({p + "ln2.bias", b.ln2_bias});
    out.push_back({p + "mlp.w_fc", b.w_fc});
    out.push_back({p + "mlp.b_fc", b.b_fc});
    out.push_back({p + "mlp.w_proj", b.w_proj});
    out.push_back({p + "mlp.b_proj", b.b_proj});
  }
  out.push_back({"lnf.gain", lnf_gain});
  out.push_back({"lnf.bias", lnf_bias});
  return out;
}

std::vector<Tensor> LMModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& nt : named_parameters()) out.push_back(nt.tensor);
  return out;
}

std::size_t LMModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& nt : named_parameters()) n += nt.tensor.numel();
  return n;
}

LMModel LMModel::clone() const {
  LMModel m;
  m.config = config;
  m.tok_emb = tok_emb.clone();
  m.pos_emb = pos_emb.clone();
  for (const auto& b : blocks) {
    m.blocks.push_back(TransformerBlock{b.ln1_gain.clone(), b.ln1_bias.clone(), b.w_qkv.clone(),
                                        b.b_qkv.clone(), b.w_out.clone(), b.b_out.clone(),
                                        b.ln2_gain.clone(), b.ln2_bias.clone(), b.w_fc.clone(),
                                        b.b_fc.clone(), b.w_proj.clone(), b.b_proj.clone()});
  }
  m.lnf_gain = lnf_gain.clone();
  m.lnf_bias = lnf_bias.clone();
  return m;
}

namespace {

Tensor gaussian(Shape shape, double scale, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (auto& x : t.data()) x = scale * rng.normal();
  return t;
}

Tensor filled(Shape shape, double value) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (auto& x : t.data()) x = value;
  return t;
}

}  // namespace

LMModel init_lm(const LMConfig& config, std::uint64_t rng_seed) {
  config.validate();
  Rng rng = Rng(rng_seed).split("lm-init");
  const std::size_t d = config.d_model;
  const double s = config.init_scale;
  LMModel m;
  m.config = config;
  m.tok_emb = gaussian({config.vocab_size, d}, s, rng);
  m.pos_emb = gaussian({config.max_seq, d}, s, rng);
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    TransformerBlock b;
    b.ln1_gain = filled({d}, 1.0);
    b.ln1_bias = filled({d}, 0.0);
    b.w_qkv = gaussian({d, 3 * d}, s, rng);
    b.b_qkv = filled({3 * d}, 0.0);
    b.w_out = gaussian({d, d}, s, rng);
    b.b_out = filled({d}, 0.0);
    b.ln2_gain = filled({d}, 1.0);
    b.ln2_bias = filled({d}, 0.0);
    b.w_fc = gaussian({d, 4 * d}, s, rng);
    b.b_fc = filled({4 * d}, 0.0);
    b.w_proj = gaussian({4 * d, d}, s, rng);
    b.b_proj = filled({d}, 0.0);
    m.blocks.push_back(std::move(b));
  }
  m.lnf_gain = filled({d}, 1.0);
  m.lnf_bias = filled({d}, 0.0);
  return m;
}

ForwardPass forward_packed(Tape& tape, const LMModel& model,
                           std::span<const std::span<const int>> seqs, Rng* dropout_rng) {
  if (seqs.empty()) throw ShapeError("forward: empty batch");
  const auto& cfg = model.config;
  std::vector<int> ids;
  std::vector<int> positions;
  std::vector<std::size_t> segments;
  for (const auto& s : seqs) {
    if (s.empty()) throw ShapeError("forward: empty sequence");
    if (s.size() > cfg.max_seq) {
      throw ShapeError("forward: sequence too long (" + std::to_string(s.size()) + " > max_seq " +
                       std::to_string(cfg.max_seq) + ")");
    }
    ids.insert(ids.end(), s.begin(), s.end());
    for (std::size_t p = 0; p < s.size(); ++p) positions.push_back(static_cast<int>(p));
    segments.push_back(s.size());
  }
  const bool drop = dropout_rng != nullptr && cfg.dropout > 0.0;

  Tensor x = tape.add(tape.embedding_lookup(model.tok_emb, ids),
                      tape.embedding_lookup(model.pos_emb, positions));
  if (drop) x = tape.dropout(x, cfg.dropout, *dropout_rng);
  for (const auto& b : model.blocks) {
    Tensor h = tape.layer_norm(x, b.ln1_gain, b.ln1_bias);
    Tensor qkv = tape.add(tape.matmul(h, b.w_qkv), b.b_qkv);
    Tensor a = tape.causal_attention(qkv, cfg.n_heads, segments);
    a = tape.add(tape.matmul(a, b.w_out), b.b_out);
    if (drop) a = tape.dropout(a, cfg.dropout, *dropout_rng);
    x = tape.add(x, a);
    h = tape.layer_norm(x, b.ln2_gain, b.ln2_bias);
    Tensor f = tape.gelu(tape.add(tape.matmul(h, b.w_fc), b.b_fc));
    f = tape.add(tape.matmul(f, b.w_proj), b.b_proj);
    if (drop) f = tape.dropout(f, cfg.dropout, *dropout_rng);
    x = tape.add(x, f);
  }
  Tensor hidden = tape.layer_norm(x, model.lnf_gain, model.lnf_bias);
  Tensor logits = tape.matmul_nt(hidden, model.output_weight());
  return {std::move(logits), std::move(hidden)};
}

Tensor forward(const LMModel& model, std::span<const int> tokens) {
  Tape tape(false);
  const std::span<const int> seqs[] = {tokens};
  return forward_packed(tape, model, seqs).logits;
}

Tensor nll_loss(Tape& tape, const LMModel& model, std::span<const Example> batch,
                Rng* dropout_rng) {
  std::vector<std::span<const int>> seqs;
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
  for (const auto& ex : batch) {
    if (ex.loss_mask.size() != ex.tokens.size()) {
      throw ShapeError("nll_loss: loss mask length " + std::to_string(ex.loss_mask.size()) +
                       " does not match sequence length " + std::to_string(ex.tokens.size()));
    }
    seqs.emplace_back(ex.tokens);
    for (std::size_t t = 0; t < ex.tokens.size(); ++t) {
      const bool has_next = t + 1 < ex.tokens.size();
      const int next = has_next ? ex.tokens[t + 1] : Vocab::kPad;
      targets.push_back(next);
      mask.push_back(has_next && ex.loss_mask[t + 1] != 0 && next != Vocab::kPad ? 1 : 0);
    }
  }
  const auto pass = forward_packed(tape, model, seqs, dropout_rng);
  return tape.cross_entropy(pass.logits, targets, mask);
}

double nll_loss(const LMModel& model, std::span<const Example> batch) {
  Tape tape(false);
  return nll_loss(tape, model, batch).item();
}

}  // namespace gcnforge
