#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "gcnforge/cli.hpp"
#include "gcnforge/error.hpp"
#include "gcnforge/gcn.hpp"
#include "gcnforge/util.hpp"
#include "json.hpp"

namespace gcnforge {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Written before the heavy work starts and rewritten when the command ends,
// so failed runs still leave a record.
class Manifest {
 public:
  Manifest(fs::path path, std::string command) : path_(std::move(path)) {
    j_["command"] = std::move(command);
    j_["tool_version"] = kToolVersion;
    j_["started_at"] = utc_now();
    j_["finished_at"] = nullptr;
    j_["status"] = "running";
    j_["inputs"] = json::object();
    j_["config"] = json::object();
  }

  void input(const fs::path& file) { j_["inputs"][file.string()] = file_sha256(file); }
  void config(const json& c) { j_["config"] = c; }
  json& extra() { return j_; }

  void write() {
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    write_file(path_, j_.dump(1) + "\n");
  }
  void finish(bool ok, const std::string& error = {}) {
    j_["finished_at"] = utc_now();
    j_["status"] = ok ? "ok" : "failed";
    if (!ok) j_["error"] = error;
    write();
  }

 private:
  fs::path path_;
  json j_;
};

struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> sets;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON config with flat dotted keys")
        ->check(CLI::ExistingFile);
    app->add_option("--set", sets, "Override one config key: key=value")->take_all();
  }

  GCNConfig resolve() const {
    GCNConfig c = config_path.empty() ? GCNConfig{} : GCNConfig::from_json(read_file(config_path));
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) {
        throw ConfigError("--set expects key=value, got '" + s + "'");
      }
      c.set(std::string_view(s).substr(0, eq), std::string_view(s).substr(eq + 1));
    }
    return c;
  }
};

std::size_t resolve_threads(const std::optional<std::size_t>& flag) {
  return flag ? std::max<std::size_t>(*flag, 1) : default_threads();
}

void record_data_dir(Manifest& m, const fs::path& dir) {
  for (const auto& name : PreparedData::file_names()) {
    if (fs::exists(dir / name)) m.input(dir / name);
  }
}

// Runs `body` between the two manifest writes.
template <class Body>
void with_manifest(Manifest& m, Body&& body) {
  m.write();
  try {
    body();
  } catch (const std::exception& e) {
    m.finish(false, e.what());
    throw;
  }
  m.finish(true);
}

int cmd_make_toy_corpus(const fs::path& out_path, std::size_t n, std::uint64_t seed,
                        std::ostream& out) {
  Manifest m(fs::path(out_path.string() + ".manifest.json"), "make-toy-corpus");
  m.config({{"n", n}, {"seed", seed}});
  with_manifest(m, [&] {
    const Corpus corpus = make_toy_corpus(n, seed);
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    save_jsonl(corpus, out_path);
    out << "wrote " << corpus.size() << " conversations to " << out_path.string() << "\n";
  });
  return 0;
}

int cmd_prepare(const fs::path& corpus_path, const GCNConfig& config, const fs::path& out_dir,
                std::ostream& out) {
  if (!fs::exists(corpus_path)) throw IoError("corpus file not found: " + corpus_path.string());
  Manifest m(out_dir / "manifest.json", "prepare");
  m.config(json::parse(config.to_json()));
  m.input(corpus_path);
  with_manifest(m, [&] {
    const Corpus corpus = load_jsonl(corpus_path);
    const PreparedData data = prepare_data(corpus, config);
    data.save(out_dir);
    out << "seed_train " << data.seed_train.size() << ", seed_val " << data.seed_val.size()
        << ", rest " << data.rest.size() << ", test " << data.test.size() << ", vocab "
        << data.vocab.size() << "\n";
  });
  return 0;
}

void print_iteration(std::ostream& out, const IterationRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "iter=%zu reward=%.9f\n", r.iteration, r.reward);
  out << buf << std::flush;
}

int cmd_run_gcn(const fs::path& data_dir, const GCNConfig& config, const fs::path& out_dir,
                const std::string& config_path, std::ostream& out) {
  config.validate();
  Manifest m(out_dir / "manifest.json", "run-gcn");
  m.config(json::parse(config.to_json()));
  record_data_dir(m, data_dir);
  if (!config_path.empty()) m.input(config_path);
  with_manifest(m, [&] {
    const PreparedData data = PreparedData::load(data_dir);
    RunOptions opts;
    opts.run_dir = out_dir;
    opts.on_iteration = [&](const IterationRecord& r) { print_iteration(out, r); };
    const GCNRun run = run_gcn(config, data, opts);
    char buf[200];
    std::snprintf(buf, sizeof(buf),
                  "best_iteration=%zu final_train_size=%zu final_val_reward=%.9f\n",
                  run.best_iteration, run.final_train_size, run.final_val_report.combined_reward);
    out << buf;
  });
  return 0;
}

int cmd_baselines(const fs::path& data_dir, const GCNConfig& config, const fs::path& out_dir,
                  const std::string& config_path, std::ostream& out) {
  config.validate();
  Manifest m(out_dir / "manifest.json", "baselines");
  m.config(json::parse(config.to_json()));
  record_data_dir(m, data_dir);
  if (!config_path.empty()) m.input(config_path);
  m.extra()["condition_seeds"] = {{"full_data", config.rng_seed},
                                  {"seed_only", config.rng_seed},
                                  {"gcn", config.rng_seed},
                                  {"gcn_no_rl", config.rng_seed}};
  with_manifest(m, [&] {
    const PreparedData data = PreparedData::load(data_dir);
    const BaselineResults res = run_baselines(config, data, out_dir);
    out << res.to_csv();
  });
  return 0;
}

int cmd_eval(const fs::path& model_path, const fs::path& corpus_path, const fs::path& data_dir,
             const fs::path& out_path, const GCNConfig& config, std::ostream& out) {
  for (const auto& p : {model_path, corpus_path}) {
    if (!fs::exists(p)) throw IoError("file not found: " + p.string());
  }
  Manifest m(fs::path(out_path.string() + ".manifest.json"), "eval");
  m.config(json::parse(config.to_json()));
  m.input(model_path);
  m.input(corpus_path);
  record_data_dir(m, data_dir);
  with_manifest(m, [&] {
    const Corpus corpus = load_jsonl(corpus_path);
    if (corpus.empty()) throw ValidationError("corpus '" + corpus_path.string() + "' is empty");
    const Vocab vocab = Vocab::load(data_dir / "vocab.json");
    const EmbeddingTable table = EmbeddingTable::load(data_dir / "embeddings.bin");
    const LMModel learner = load_checkpoint(model_path);
    EvalConfig ec = config.eval;
    ec.threads = config.threads;
    const MetricReport r = evaluate_learner(learner, corpus, vocab, table, ec, config.weights);
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    write_file(out_path, r.to_json() + "\n");
    out << r.to_json() << "\n";
  });
  return 0;
}

std::vector<IterationRecord> read_history(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("missing history file: " + path.string());
  std::vector<IterationRecord> out;
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(IterationRecord::from_json(line));
  }
  if (out.empty()) throw DataError("history file '" + path.string() + "' has no records");
  return out;
}

int cmd_report(const fs::path& run_dir, const fs::path& out_dir, std::ostream& out) {
  const fs::path history_path = run_dir / "history.jsonl";
  Manifest m(out_dir / "manifest.json", "report");
  if (fs::exists(history_path)) m.input(history_path);
  with_manifest(m, [&] {
    const auto history = read_history(history_path);
    std::string curve = "iteration,reward,mean_kl,clip_fraction\n";
    char buf[256];
    std::size_t best = 0;
    for (std::size_t i = 0; i < history.size(); ++i) {
      const auto& r = history[i];
      std::snprintf(buf, sizeof(buf), "%zu,%.12f,%.12f,%.12f\n", r.iteration, r.reward,
                    r.rollout_kl, r.ppo.clip_fraction);
      curve += buf;
      if (r.reward > history[best].reward) best = i;
    }
    fs::create_directories(out_dir);
    write_file(out_dir / "reward_curve.csv", curve);

    std::ostringstream s;
    s << "iterations " << history.size() << "\n";
    std::snprintf(buf, sizeof(buf), "best_iteration %zu reward %.9f\n", history[best].iteration,
                  history[best].reward);
    s << buf;
    std::snprintf(buf, sizeof(buf), "last_iteration %zu reward %.9f\n", history.back().iteration,
                  history.back().reward);
    s << buf;
    for (const auto& candidate : {run_dir / "final_report.json"}) {
      if (!fs::exists(candidate)) continue;
      const auto r = MetricReport::from_json(read_file(candidate));
      std::snprintf(buf, sizeof(buf), "final_learner_val_reward %.9f\n", r.combined_reward);
      s << buf;
    }
    for (const auto& candidate : {run_dir / "baselines.csv", run_dir.parent_path() / "baselines.csv"}) {
      if (!fs::exists(candidate)) continue;
      s << "\nbaselines (" << candidate.string() << ")\n";
      std::istringstream csv(read_file(candidate));
      std::string line;
      while (std::getline(csv, line)) {
        std::string cell;
        std::istringstream row(line);
        bool first = true;
        while (std::getline(row, cell, ',')) {
          std::snprintf(buf, sizeof(buf), first ? "%-10s" : " %14s", cell.c_str());
          s << buf;
          first = false;
        }
        s << "\n";
      }
      break;
    }
    write_file(out_dir / "summary.txt", s.str());
    out << s.str();
  });
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Generative conversational networks: synthetic dialogue data via PPO", "gcn-forge"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  std::optional<std::size_t> threads;
  auto add_threads = [&](CLI::App* sub) {
    sub->add_option("--threads", threads, "Worker threads (default: GCN_FORGE_THREADS or 1)");
  };

  std::string toy_out;
  std::size_t toy_n = 1000;
  std::uint64_t toy_seed = 0;
  auto* toy = app.add_subcommand("make-toy-corpus", "Write a template-grammar dialogue corpus");
  toy->add_option("--out", toy_out, "Output JSONL path")->required();
  toy->add_option("--n", toy_n, "Number of conversations")->check(CLI::PositiveNumber);
  toy->add_option("--seed", toy_seed, "Grammar seed");

  std::string corpus_path, out_dir, data_dir, model_path, out_path, run_dir;
  std::optional<double> seed_fraction, val_fraction, test_fraction;
  std::optional<std::uint64_t> rng_seed;
  ConfigFlags prep_cfg, gcn_cfg, base_cfg, eval_cfg;

  auto* prep = app.add_subcommand("prepare", "Split a corpus and build vocabulary and embeddings");
  prep->add_option("--corpus", corpus_path, "Dialogue JSONL corpus")->required();
  prep->add_option("--seed-fraction", seed_fraction, "Share of the corpus used as seed data");
  prep->add_option("--val-fraction", val_fraction, "Share of the seed held out for validation");
  prep->add_option("--test-fraction", test_fraction, "Share of the rest held out for testing");
  prep->add_option("--rng-seed", rng_seed, "Split seed");
  prep->add_option("--out-dir", out_dir, "Output directory")->required();
  prep_cfg.attach(prep);

  auto* gcn = app.add_subcommand("run-gcn", "Run the generator/learner meta-loop");
  gcn->add_option("--data-dir", data_dir, "Directory written by prepare")->required();
  gcn->add_option("--out-dir", out_dir, "Run directory")->required();
  gcn_cfg.attach(gcn);
  add_threads(gcn);

  auto* base = app.add_subcommand("baselines", "Train and compare the four learner conditions");
  base->add_option("--data-dir", data_dir, "Directory written by prepare")->required();
  base->add_option("--out-dir", out_dir, "Output directory")->required();
  base_cfg.attach(base);
  add_threads(base);

  auto* eval = app.add_subcommand("eval", "Score one learner checkpoint on a corpus");
  eval->add_option("--model", model_path, "Learner checkpoint")->required();
  eval->add_option("--corpus", corpus_path, "Dialogue JSONL corpus")->required();
  eval->add_option("--data-dir", data_dir, "Directory with vocab.json and embeddings.bin")
      ->required();
  eval->add_option("--out", out_path, "Metric report JSON path")->required();
  eval_cfg.attach(eval);
  add_threads(eval);

  auto* report = app.add_subcommand("report", "Summarize a run directory");
  report->add_option("--run-dir", run_dir, "Run directory")->required();
  report->add_option("--out", out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (toy->parsed()) return cmd_make_toy_corpus(toy_out, toy_n, toy_seed, out);
    if (prep->parsed()) {
      GCNConfig c = prep_cfg.resolve();
      if (seed_fraction) c.seed_fraction = *seed_fraction;
      if (val_fraction) c.val_fraction = *val_fraction;
      if (test_fraction) c.test_fraction = *test_fraction;
      if (rng_seed) c.rng_seed = *rng_seed;
      return cmd_prepare(corpus_path, c, out_dir, out);
    }
    if (gcn->parsed()) {
      GCNConfig c = gcn_cfg.resolve();
      c.threads = resolve_threads(threads);
      return cmd_run_gcn(data_dir, c, out_dir, gcn_cfg.config_path, out);
    }
    if (base->parsed()) {
      GCNConfig c = base_cfg.resolve();
      c.threads = resolve_threads(threads);
      return cmd_baselines(data_dir, c, out_dir, base_cfg.config_path, out);
    }
    if (eval->parsed()) {
      GCNConfig c = eval_cfg.resolve();
      c.threads = resolve_threads(threads);
      return cmd_eval(model_path, corpus_path, data_dir, out_path, c, out);
    }
    if (report->parsed()) return cmd_report(run_dir, out_dir, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace gcnforge
