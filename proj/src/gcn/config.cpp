#include <algorithm>
#include <charconv>
#include <cmath>

#include "gcnforge/error.hpp"
#include "gcnforge/gcn.hpp"
#include "json.hpp"

namespace gcnforge {

namespace {

using nlohmann::json;

template <class Config, class Visitor>
void visit_fields(Config& c, Visitor&& v) {
  v("seed_fraction", c.seed_fraction);
  v("val_fraction", c.val_fraction);
  v("test_fraction", c.test_fraction);
  v("vocab_max_size", c.vocab_max_size);
  v("vocab_min_freq", c.vocab_min_freq);
  v("embedding_dim", c.embedding_dim);
  v("embedding_window", c.embedding_window);
  v("conversations_per_iteration", c.conversations_per_iteration);
  v("final_conversations", c.final_conversations);
  for (auto [prefix, m] : {std::pair{"generator_model.", &c.generator_model},
                           std::pair{"learner_model.", &c.learner_model}}) {
    const std::string p = prefix;
    v(p + "d_model", m->d_model);
    v(p + "n_layers", m->n_layers);
    v(p + "n_heads", m->n_heads);
    v(p + "max_seq", m->max_seq);
    v(p + "dropout", m->dropout);
    v(p + "init_scale", m->init_scale);
  }
  for (auto [prefix, h] : {std::pair{"generator_pretrain.", &c.generator_pretrain},
                           std::pair{"learner.", &c.learner}}) {
    const std::string p = prefix;
    v(p + "lr", h->lr);
    v(p + "batch_size", h->batch_size);
    v(p + "steps", h->steps);
    v(p + "clip_norm", h->clip_norm);
  }
  v("ppo.clip_eps", c.ppo.clip_eps);
  v("ppo.kl_coef", c.ppo.kl_coef);
  v("ppo.ppo_epochs", c.ppo.ppo_epochs);
  v("ppo.minibatch_size", c.ppo.minibatch_size);
  v("ppo.lr", c.ppo.lr);
  v("ppo.value_loss_coef", c.ppo.value_loss_coef);
  v("ppo.entropy_coef", c.ppo.entropy_coef);
  v("ppo.advantage_whitening", c.ppo.advantage_whitening);
  v("ppo.max_grad_norm", c.ppo.max_grad_norm);
  v("ppo.gamma", c.ppo.gamma);
  v("ppo.lambda", c.ppo.lambda);
  v("gen.max_new_tokens", c.gen.max_new_tokens);
  v("gen.temperature", c.gen.temperature);
  v("gen.top_k", c.gen.top_k);
  v("gen.enforce_dialogue_grammar", c.gen.enforce_dialogue_grammar);
  v("weights.bleu", c.weights.bleu);
  v("weights.rouge1", c.weights.rouge1);
  v("weights.embed", c.weights.embed);
  v("eval.max_new_tokens", c.eval.max_new_tokens);
  v("tolerance", c.tolerance);
  v("patience", c.patience);
  v("max_iterations", c.max_iterations);
  v("rng_seed", c.rng_seed);
  v("update_generator", c.update_generator);
  v("threads", c.threads);
}

void assign(double& field, const json& j, const std::string& key) {
  if (j.is_number()) {
    field = j.get<double>();
  } else if (j.is_string() && j.get<std::string>() == "inf") {
    field = INFINITY;
  } else {
    throw ConfigError("config key '" + key + "' expects a number");
  }
}

template <class Int>
void assign(Int& field, const json& j, const std::string& key) {
  if (!j.is_number_integer() || (!j.is_number_unsigned() && j.get<long long>() < 0)) {
    throw ConfigError("config key '" + key + "' expects a non-negative integer");
  }
  field = j.get<Int>();
}

void assign(bool& field, const json& j, const std::string& key) {
  if (!j.is_boolean()) throw ConfigError("config key '" + key + "' expects true or false");
  field = j.get<bool>();
}

void flatten(const json& j, const std::string& prefix, json& out) {
  for (const auto& [k, v] : j.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) {
      flatten(v, key, out);
    } else {
      out[key] = v;
    }
  }
}

json parse_scalar(std::string_view value) {
  if (value == "true") return true;
  if (value == "false") return false;
  if (value == "inf") return "inf";
  const char* first = value.data();
  const char* last = value.data() + value.size();
  std::uint64_t u = 0;
  if (auto [p, ec] = std::from_chars(first, last, u); ec == std::errc() && p == last) return u;
  double d = 0.0;
  if (auto [p, ec] = std::from_chars(first, last, d); ec == std::errc() && p == last) return d;
  return std::string(value);
}

}  // namespace

GCNConfig::GCNConfig() {
  // A dataset-level reward is broadcast to every episode; whitening would
  // subtract it right back out.
  ppo.advantage_whitening = false;
}

void GCNConfig::validate() const {
  if (!(seed_fraction > 0.0 && seed_fraction <= 1.0)) {
    throw ConfigError("seed_fraction must be in (0, 1]");
  }
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in (0, 1)");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("test_fraction must be in (0, 1)");
  }
  if (conversations_per_iteration == 0) throw ConfigError("conversations_per_iteration must be positive");
  if (max_iterations == 0) throw ConfigError("max_iterations must be positive");
  if (patience == 0) throw ConfigError("patience must be positive");
  if (!(tolerance >= 0.0)) throw ConfigError("tolerance must be >= 0");
  if (embedding_dim == 0 || embedding_window == 0) {
    throw ConfigError("embedding_dim and embedding_window must be positive");
  }
  for (const auto* h : {&generator_pretrain, &learner}) {
    if (h->batch_size == 0 || h->steps == 0) {
      throw ConfigError("training batch_size and steps must be positive");
    }
    if (!(h->lr >= 0.0) || !(h->clip_norm > 0.0)) {
      throw ConfigError("training lr must be >= 0 and clip_norm positive");
    }
  }
  if (gen.max_new_tokens == 0 || eval.max_new_tokens == 0) {
    throw ConfigError("gen.max_new_tokens and eval.max_new_tokens must be positive");
  }
  if (!(gen.temperature >= 0.0)) throw ConfigError("gen.temperature must be >= 0");
  if (eval.max_new_tokens >= learner_model.max_seq) {
    throw ConfigError("eval.max_new_tokens must be below learner_model.max_seq");
  }
  ppo.validate();
  weights.validate();
  for (const auto* m : {&generator_model, &learner_model}) {
    LMConfig probe = *m;
    probe.vocab_size = Vocab::kNumSpecials + 1;
    probe.validate();
  }
}

std::string GCNConfig::to_json() const {
  json j = json::object();
  visit_fields(*this, [&](const std::string& key, const auto& field) {
    using T = std::decay_t<decltype(field)>;
    if constexpr (std::is_same_v<T, double>) {
      if (std::isinf(field)) {
        j[key] = "inf";
        return;
      }
    }
    j[key] = field;
  });
  return j.dump(1);
}

GCNConfig GCNConfig::from_json(std::string_view text) {
  json parsed;
  try {
    parsed = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: malformed JSON (") + e.what() + ")");
  }
  if (!parsed.is_object()) throw ConfigError("config: top level must be an object");
  json flat = json::object();
  flatten(parsed, "", flat);
  GCNConfig c;
  std::size_t used = 0;
  visit_fields(c, [&](const std::string& key, auto& field) {
    const auto it = flat.find(key);
    if (it == flat.end()) return;
    assign(field, *it, key);
    ++used;
  });
  if (used != flat.size()) {
    const auto known = keys();
    for (const auto& [k, v] : flat.items()) {
      if (std::find(known.begin(), known.end(), k) == known.end()) {
        throw ConfigError("config: unknown key '" + k + "'");
      }
    }
  }
  return c;
}

void GCNConfig::set(std::string_view key, std::string_view value) {
  const json j = parse_scalar(value);
  bool found = false;
  visit_fields(*this, [&](const std::string& k, auto& field) {
    if (k != key) return;
    assign(field, j, k);
    found = true;
  });
  if (!found) throw ConfigError("config: unknown key '" + std::string(key) + "'");
}

std::vector<std::string> GCNConfig::keys() {
  std::vector<std::string> out;
  GCNConfig c;
  visit_fields(c, [&](const std::string& k, const auto&) { out.push_back(k); });
  return out;
}

}  // namespace gcnforge
