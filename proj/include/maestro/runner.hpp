#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "maestro/agents.hpp"
#include "maestro/clpo.hpp"
#include "maestro/core.hpp"
#include "maestro/gradcheck.hpp"
#include "maestro/orchestrator.hpp"
#include "maestro/reliability.hpp"
#include "maestro/reward.hpp"
#include "maestro/selector.hpp"

namespace maestro::runner {

inline constexpr const char* kCodeVersion = "maestro 0.1.0";
inline constexpr std::uint64_t kDefaultSeeds[] = {25, 42, 99};

enum ExitCode : int { ok = 0, config_error = 1, run_failures = 2, verification_failure = 3 };

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DatasetError : public Error {
 public:
  using Error::Error;
};

enum class Mode { eval, train, simulate, gradcheck };

NLOHMANN_JSON_SERIALIZE_ENUM(Mode, {{Mode::eval, "eval"},
                                    {Mode::train, "train"},
                                    {Mode::simulate, "simulate"},
                                    {Mode::gradcheck, "gradcheck"}})

enum class SelectorKind { oracle, uniform, adversarial, majority, trainable, endpoint };

NLOHMANN_JSON_SERIALIZE_ENUM(SelectorKind, {{SelectorKind::oracle, "oracle"},
                                            {SelectorKind::uniform, "uniform"},
                                            {SelectorKind::adversarial, "adversarial"},
                                            {SelectorKind::majority, "majority"},
                                            {SelectorKind::trainable, "trainable"},
                                            {SelectorKind::endpoint, "endpoint"}})

struct SelectorConfig {
  SelectorKind kind = SelectorKind::trainable;
  std::string params_path;  // trainable; empty = zero (uniform) policy
  bool sample = false;      // trainable: sample instead of argmax
  EndpointSpec endpoint;
};

// How training instances are cut from rollout episodes.
enum class Subsample { round, one_correct };

NLOHMANN_JSON_SERIALIZE_ENUM(Subsample, {{Subsample::round, "round"}, {Subsample::one_correct, "one_correct"}})

struct TrainConfig {
  int train_questions = 256;  // synthetic questions when no dataset is given
  int holdout_questions = 200;
  Subsample subsample = Subsample::round;
  int instances_per_episode = 1;  // one_correct only
  SelectorKind rollout_selector = SelectorKind::uniform;
  std::vector<double> rank_sweep;  // empty: weights.rank only
  clpo::Objective objective = clpo::Objective::clpo;
};

struct SimulateConfig {
  double p = 0.6;
  double q = 0.7;
  int R = 3;
  std::int64_t episodes = 100000;
};

struct GradcheckConfig {
  int instances = 100;
  bool self_test = false;  // inject a sign error into the choice gradient
};

struct RunConfig {
  Mode mode = Mode::eval;
  ProtocolConfig protocol;
  std::vector<AgentConfig> agents;  // length N; filled with defaults when empty
  SelectorConfig selector;
  RewardConfig reward;
  clpo::LossWeights weights;
  clpo::TrainSchedule schedule;
  TrainConfig train;
  SimulateConfig simulate;
  GradcheckConfig gradcheck;
  std::string dataset_path;
  int synthetic_questions = 0;  // eval without a dataset
  std::string output_dir = "maestro_out";
  std::uint64_t seed = 42;
  std::vector<std::uint64_t> seeds;  // non-empty: multi-seed run, mean reported
  int parallel = 1;

  // Fills N default agents, propagates protocol-level settings and checks the
  // invariants. Throws ConfigError.
  void finalize() {
    try {
      protocol.validate();
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    if (agents.empty()) agents.assign(static_cast<std::size_t>(protocol.N), AgentConfig{});
    if (static_cast<int>(agents.size()) != protocol.N)
      throw ConfigError("agents list must have exactly N = " + std::to_string(protocol.N) + " entries");
    for (auto& a : agents) {
      a.K = protocol.K;
      a.epsilon = protocol.epsilon;
      try {
        a.validate();
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
    }
    protocol.reward = reward;
    if (reward.rationale_bonus_weight < 0) throw ConfigError("reward: bonus weight must be >= 0");
    try {
      weights.validate();
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    if (parallel < 1) throw ConfigError("parallel must be >= 1");
    if (output_dir.empty()) throw ConfigError("output_dir must be non-empty");
    if (mode == Mode::eval && dataset_path.empty() && synthetic_questions <= 0)
      throw ConfigError("eval needs a dataset path or synthetic_questions > 0");
    if (mode == Mode::train && dataset_path.empty() && train.train_questions <= 0)
      throw ConfigError("train needs a dataset path or train_questions > 0");
    if (selector.kind == SelectorKind::endpoint) {
      try {
        selector.endpoint.validate();
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
    }
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{
      {"mode", c.mode},
      {"protocol", c.protocol},
      {"agents", c.agents},
      {"selector",
       {{"kind", c.selector.kind},
        {"params_path", c.selector.params_path},
        {"sample", c.selector.sample},
        {"endpoint", c.selector.endpoint}}},
      {"reward",
       {{"rationale_bonus_weight", c.reward.rationale_bonus_weight},
        {"numeric_tolerance", c.reward.numeric_tolerance}}},
      {"weights", c.weights},
      {"schedule", c.schedule},
      {"train",
       {{"train_questions", c.train.train_questions},
        {"holdout_questions", c.train.holdout_questions},
        {"subsample", c.train.subsample},
        {"instances_per_episode", c.train.instances_per_episode},
        {"rollout_selector", c.train.rollout_selector},
        {"rank_sweep", c.train.rank_sweep},
        {"objective", c.train.objective}}},
      {"simulate",
       {{"p", c.simulate.p}, {"q", c.simulate.q}, {"R", c.simulate.R}, {"episodes", c.simulate.episodes}}},
      {"gradcheck", {{"instances", c.gradcheck.instances}, {"self_test", c.gradcheck.self_test}}},
      {"dataset_path", c.dataset_path},
      {"synthetic_questions", c.synthetic_questions},
      {"output_dir", c.output_dir},
      {"seed", c.seed},
      {"seeds", c.seeds},
      {"parallel", c.parallel}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  const RunConfig d;
  c.mode = j.value("mode", d.mode);
  c.protocol = j.contains("protocol") ? j.at("protocol").get<ProtocolConfig>() : d.protocol;
  c.agents = j.contains("agents") ? j.at("agents").get<std::vector<AgentConfig>>() : d.agents;
  if (auto s = j.find("selector"); s != j.end()) {
    c.selector.kind = s->value("kind", d.selector.kind);
    c.selector.params_path = s->value("params_path", d.selector.params_path);
    c.selector.sample = s->value("sample", d.selector.sample);
    if (s->contains("endpoint")) c.selector.endpoint = s->at("endpoint").get<EndpointSpec>();
  }
  if (auto r = j.find("reward"); r != j.end()) {
    c.reward.rationale_bonus_weight = r->value("rationale_bonus_weight", d.reward.rationale_bonus_weight);
    c.reward.numeric_tolerance = r->value("numeric_tolerance", d.reward.numeric_tolerance);
  }
  c.weights = j.contains("weights") ? j.at("weights").get<clpo::LossWeights>() : d.weights;
  c.schedule = j.contains("schedule") ? j.at("schedule").get<clpo::TrainSchedule>() : d.schedule;
  if (auto t = j.find("train"); t != j.end()) {
    c.train.train_questions = t->value("train_questions", d.train.train_questions);
    c.train.holdout_questions = t->value("holdout_questions", d.train.holdout_questions);
    c.train.subsample = t->value("subsample", d.train.subsample);
    c.train.instances_per_episode = t->value("instances_per_episode", d.train.instances_per_episode);
    c.train.rollout_selector = t->value("rollout_selector", d.train.rollout_selector);
    c.train.rank_sweep = t->value("rank_sweep", d.train.rank_sweep);
    c.train.objective = t->value("objective", d.train.objective);
  }
  if (auto s = j.find("simulate"); s != j.end()) {
    c.simulate.p = s->value("p", d.simulate.p);
    c.simulate.q = s->value("q", d.simulate.q);
    c.simulate.R = s->value("R", d.simulate.R);
    c.simulate.episodes = s->value("episodes", d.simulate.episodes);
  }
  if (auto g = j.find("gradcheck"); g != j.end()) {
    c.gradcheck.instances = g->value("instances", d.gradcheck.instances);
    c.gradcheck.self_test = g->value("self_test", d.gradcheck.self_test);
  }
  c.dataset_path = j.value("dataset_path", d.dataset_path);
  c.synthetic_questions = j.value("synthetic_questions", d.synthetic_questions);
  c.output_dir = j.value("output_dir", d.output_dir);
  c.seed = j.value("seed", d.seed);
  c.seeds = j.value("seeds", d.seeds);
  c.parallel = j.value("parallel", d.parallel);
}

// MAESTRO_* environment variables override config keys.
inline void apply_env_overrides(nlohmann::json& j) {
  struct Override {
    const char* env;
    const char* pointer;
    enum { string, integer, real } type;
  };
  static constexpr Override table[] = {
      {"MAESTRO_SEED", "/seed", Override::integer},
      {"MAESTRO_OUTPUT_DIR", "/output_dir", Override::string},
      {"MAESTRO_DATASET", "/dataset_path", Override::string},
      {"MAESTRO_PARALLEL", "/parallel", Override::integer},
      {"MAESTRO_EPSILON", "/protocol/epsilon", Override::real},
      {"MAESTRO_ROUNDS", "/protocol/R", Override::integer},
      {"MAESTRO_BASE_URL", "/selector/endpoint/base_url", Override::string},
      {"MAESTRO_MODEL", "/selector/endpoint/model_name", Override::string},
  };
  for (const auto& o : table) {
    const char* v = std::getenv(o.env);
    if (!v || !*v) continue;
    const nlohmann::json::json_pointer ptr(o.pointer);
    try {
      switch (o.type) {
        case Override::string: j[ptr] = std::string(v); break;
        case Override::integer: j[ptr] = std::stoll(v); break;
        case Override::real: j[ptr] = std::stod(v); break;
      }
    } catch (const std::logic_error&) {
      throw ConfigError(std::string("invalid value for ") + o.env + ": " + v);
    }
  }
}

inline RunConfig load_config(const std::string& path, bool env_overrides = true) {
  nlohmann::json j = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config " + path + ": " + e.what());
    }
  }
  if (env_overrides) apply_env_overrides(j);
  try {
    return j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a64(nlohmann::json(c).dump())); }

// ---- Datasets -----------------------------------------------------------------

inline std::string json_scalar_string(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number()) return v.dump();
  throw DatasetError("expected a string or number");
}

// JSONL, one {"id", "question", "answer"?} object per line. Gold answers are
// normalized on load; duplicate ids are rejected.
inline std::vector<Question> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open dataset " + path);
  std::vector<Question> out;
  std::map<std::string, int> first_line;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Question q;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_object()) throw DatasetError("not a JSON object");
      q.id = json_scalar_string(j.at("id"));
      q.text = j.at("question").get<std::string>();
      if (auto a = j.find("answer"); a != j.end() && !a->is_null())
        q.gold_answer = normalize_answer(json_scalar_string(*a));
    } catch (const std::exception& e) {
      throw DatasetError(path + ":" + std::to_string(lineno) + ": malformed line: " + e.what());
    }
    if (q.id.empty()) throw DatasetError(path + ":" + std::to_string(lineno) + ": empty id");
    if (auto [it, inserted] = first_line.emplace(q.id, lineno); !inserted)
      throw DatasetError(path + ": duplicate id '" + q.id + "' on lines " + std::to_string(it->second) +
                         " and " + std::to_string(lineno));
    out.push_back(std::move(q));
  }
  return out;
}

// Arithmetic placeholders with integer gold answers for simulated runs.
inline std::vector<Question> synthetic_questions(int count, std::uint64_t seed,
                                                 const std::string& prefix = "syn") {
  Rng rng(mix_seed(seed, fnv1a64(prefix)));
  std::vector<Question> out;
  for (int i = 0; i < count; ++i) {
    const auto a = rng.between(2, 99), b = rng.between(2, 99);
    char id[32];
    std::snprintf(id, sizeof id, "%s-%05d", prefix.c_str(), i);
    out.push_back({id, "What is " + std::to_string(a) + " + " + std::to_string(b) + "?",
                   std::to_string(a + b)});
  }
  return out;
}

// ---- Trace files --------------------------------------------------------------

inline std::string trace_file_name(const std::string& id) {
  std::string s;
  for (char c : id) s.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_');
  return s + "-" + hex64(fnv1a64(id)).substr(0, 8) + ".jsonl";
}

// Append-only episode trace: a header line, one line per completed round, and
// an end line.
class TraceWriter {
 public:
  TraceWriter(const std::filesystem::path& path, const Question& q, const ProtocolConfig& protocol)
      : out_(path, std::ios::out | std::ios::trunc) {
    if (!out_) throw Error("cannot open trace file " + path.string());
    write({{"type", "episode"}, {"question", q}, {"N", protocol.N}, {"K", protocol.K}, {"R", protocol.R}});
  }

  void round(const RoundRecord& r) {
    nlohmann::json j = r;
    j["type"] = "round";
    write(j);
  }

  void end(const EpisodeTrace& t) {
    write({{"type", "end"}, {"terminated_reason", t.terminated_reason}, {"final_answer", t.final_answer()}});
  }

 private:
  void write(const nlohmann::json& j) {
    out_ << j.dump() << '\n';
    out_.flush();
  }
  std::ofstream out_;
};

struct LoadedTrace {
  EpisodeTrace trace;
  int N = 0;
  int K = 0;
  bool complete = false;  // end line present
};

// Reloads a trace file and re-validates it; throws on any violation.
inline LoadedTrace read_trace_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open trace file " + path.string());
  LoadedTrace lt;
  std::string line;
  int lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    const auto j = nlohmann::json::parse(line);
    const auto type = j.at("type").get<std::string>();
    if (type == "episode") {
      j.at("question").get_to(lt.trace.question);
      lt.N = j.at("N").get<int>();
      lt.K = j.at("K").get<int>();
      header = true;
    } else if (type == "round") {
      if (!header) throw Error(path.string() + ": round before header");
      lt.trace.rounds.push_back(j.get<RoundRecord>());
    } else if (type == "end") {
      j.at("terminated_reason").get_to(lt.trace.terminated_reason);
      if (lt.trace.rounds.empty() || j.at("final_answer").get<std::string>() != lt.trace.final_answer())
        throw Error(path.string() + ": end record disagrees with the last broadcast");
      lt.complete = true;
    } else {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": unknown record type " + type);
    }
  }
  if (!header) throw Error(path.string() + ": missing header");
  if (auto v = validate_trace(lt.trace, lt.N, lt.K); !v.empty())
    throw Error(path.string() + ": " + v.front());
  return lt;
}

// ---- Wiring -------------------------------------------------------------------

inline std::shared_ptr<const Selector> make_selector(const SelectorConfig& cfg,
                                                     const std::shared_ptr<const HttpTransport>& transport,
                                                     std::shared_ptr<const PolicyParams> params = nullptr) {
  switch (cfg.kind) {
    case SelectorKind::oracle: return std::make_shared<OracleSelector>();
    case SelectorKind::uniform: return std::make_shared<UniformSelector>();
    case SelectorKind::adversarial: return std::make_shared<AdversarialSelector>();
    case SelectorKind::majority: return std::make_shared<MajorityVoteSelector>();
    case SelectorKind::endpoint: return std::make_shared<EndpointSelector>(cfg.endpoint, transport);
    case SelectorKind::trainable: {
      if (!params) {
        if (cfg.params_path.empty()) {
          params = std::make_shared<PolicyParams>(PolicyParams::zeros());
        } else {
          std::ifstream in(cfg.params_path);
          if (!in) throw ConfigError("cannot open params file " + cfg.params_path);
          params = std::make_shared<PolicyParams>(nlohmann::json::parse(in).get<PolicyParams>());
        }
      }
      return std::make_shared<TrainableSelector>(std::move(params),
                                                 cfg.sample ? SelectionMode::sample : SelectionMode::argmax);
    }
  }
  throw ConfigError("unknown selector kind");
}

inline std::vector<AgentConfig> seeded_agents(const RunConfig& cfg, std::uint64_t seed) {
  auto agents = cfg.agents;
  for (std::size_t i = 0; i < agents.size(); ++i) agents[i].seed = mix_seed(seed, 0xa6e47ULL, i);
  return agents;
}

// Runs fn(i) for i in [0, n) on up to `parallel` threads.
template <class Fn>
void parallel_for(std::size_t n, int parallel, Fn&& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, parallel));
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::out | std::ios::trunc | std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

inline void write_manifest(const RunConfig& cfg, const std::filesystem::path& dir) {
  nlohmann::json m = {{"code_version", kCodeVersion},
                      {"config_hash", config_hash(cfg)},
                      {"seed", cfg.seed},
                      {"seeds", cfg.seeds},
                      {"mode", cfg.mode},
                      {"config", cfg}};
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

// ---- eval ---------------------------------------------------------------------

struct EvalResult {
  nlohmann::json report;
  std::vector<EpisodeTrace> traces;   // completed episodes, question order
  std::vector<std::string> failures;  // question ids
  int exit_code = ExitCode::ok;
};

struct Hooks {
  std::shared_ptr<const HttpTransport> transport = std::make_shared<HttplibTransport>();
  std::shared_ptr<const Selector> selector;  // overrides cfg.selector when set
};

inline std::vector<Question> eval_questions(const RunConfig& cfg) {
  if (!cfg.dataset_path.empty()) return load_dataset(cfg.dataset_path);
  return synthetic_questions(cfg.synthetic_questions, 0x5eed, "eval");
}

inline nlohmann::json metrics_json(const std::vector<EpisodeTrace>& traces, int R) {
  std::vector<EpisodeTrace> labeled;
  for (const auto& t : traces)
    if (t.question.gold_answer && !t.rounds.empty()) labeled.push_back(t);
  if (labeled.empty()) return nullptr;
  const auto m = reliability::metrics_report(labeled, R);
  nlohmann::json j = m;
  std::int64_t within = 0;
  for (const auto& t : labeled) {
    const auto outcomes = reliability::round_outcomes(t);
    within += std::any_of(outcomes.begin(), outcomes.end(),
                          [](const reliability::RoundOutcome& o) { return o.covered && o.identified; });
  }
  j["success_within_R"] = static_cast<double>(within) / static_cast<double>(labeled.size());
  return j;
}

inline EvalResult run_eval_single(const RunConfig& cfg, std::uint64_t seed,
                                  const std::filesystem::path& out_dir, const Hooks& hooks,
                                  const std::vector<Question>& questions) {
  const auto agents = make_agents(cfg.protocol, seeded_agents(cfg, seed), hooks.transport);
  const auto selector = hooks.selector ? hooks.selector : make_selector(cfg.selector, hooks.transport);
  const auto trace_dir = out_dir / "traces";
  std::filesystem::create_directories(trace_dir);

  std::vector<std::optional<EpisodeTrace>> results(questions.size());
  std::vector<std::string> errors(questions.size());
  parallel_for(questions.size(), cfg.parallel, [&](std::size_t i) {
    const auto& q = questions[i];
    const auto path = trace_dir / trace_file_name(q.id);
    for (int attempt = 0; attempt < 2 && !results[i]; ++attempt) {
      try {
        TraceWriter writer(path, q, cfg.protocol);
        auto trace = run_episode(q, *selector, cfg.protocol, agents, seed,
                                 [&](const RoundRecord& r) { writer.round(r); });
        writer.end(trace);
        results[i] = std::move(trace);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  });

  EvalResult res;
  nlohmann::json failed = nlohmann::json::array();
  for (std::size_t i = 0; i < questions.size(); ++i) {
    if (results[i]) {
      res.traces.push_back(std::move(*results[i]));
    } else {
      res.failures.push_back(questions[i].id);
      failed.push_back({{"id", questions[i].id}, {"error", errors[i]}});
    }
  }
  res.report = {{"seed", seed},
                {"questions", questions.size()},
                {"completed", res.traces.size()},
                {"failed", failed},
                {"metrics", metrics_json(res.traces, cfg.protocol.R)}};
  res.exit_code = res.failures.empty() ? ExitCode::ok : ExitCode::run_failures;
  return res;
}

// One trace file per question, a metrics report and a manifest. With
// cfg.seeds set, one sub-directory per seed plus the mean over seeds.
inline EvalResult run_eval(RunConfig cfg, const Hooks& hooks = {}) {
  cfg.mode = Mode::eval;
  cfg.finalize();
  const auto questions = eval_questions(cfg);
  const std::filesystem::path out(cfg.output_dir);
  std::filesystem::create_directories(out);
  write_manifest(cfg, out);

  if (cfg.seeds.empty()) {
    auto res = run_eval_single(cfg, cfg.seed, out, hooks, questions);
    write_text(out / "report.json", res.report.dump(2) + "\n");
    return res;
  }

  EvalResult all;
  nlohmann::json per_seed = nlohmann::json::array();
  std::map<std::string, double> sums;
  int with_metrics = 0;
  for (auto seed : cfg.seeds) {
    auto res = run_eval_single(cfg, seed, out / ("seed-" + std::to_string(seed)), hooks, questions);
    write_text(out / ("seed-" + std::to_string(seed)) / "report.json", res.report.dump(2) + "\n");
    if (!res.report["metrics"].is_null()) {
      ++with_metrics;
      for (const char* k : {"accuracy", "coverage", "identification", "bound", "success_within_R"})
        sums[k] += res.report["metrics"][k].get<double>();
    }
    per_seed.push_back(res.report);
    for (auto& id : res.failures) all.failures.push_back("seed " + std::to_string(seed) + ": " + id);
    for (auto& t : res.traces) all.traces.push_back(std::move(t));
  }
  nlohmann::json mean = nlohmann::json::object();
  for (const auto& [k, v] : sums) mean[k] = v / with_metrics;
  all.report = {{"seeds", cfg.seeds}, {"per_seed", per_seed}, {"mean", mean}};
  all.exit_code = all.failures.empty() ? ExitCode::ok : ExitCode::run_failures;
  write_text(out / "report.json", all.report.dump(2) + "\n");
  return all;
}

// ---- train --------------------------------------------------------------------

// Exactly one correct candidate plus n-1 wrong ones drawn from the pooled
// candidates of all rounds, placed at uniformly random positions.
inline std::optional<clpo::TrainingInstance> one_correct_instance(const std::vector<Candidate>& pool,
                                                                  const Question& q, std::size_t n,
                                                                  const RewardConfig& reward, Rng& rng) {
  std::vector<std::size_t> right, wrong;
  for (std::size_t i = 0; i < pool.size(); ++i) (is_correct(pool[i], q) ? right : wrong).push_back(i);
  if (right.empty() || wrong.size() + 1 < n) return std::nullopt;
  std::vector<std::size_t> picked{right[rng.below(right.size())]};
  rng.shuffle(wrong.begin(), wrong.end());
  picked.insert(picked.end(), wrong.begin(), wrong.begin() + static_cast<std::ptrdiff_t>(n - 1));
  rng.shuffle(picked.begin(), picked.end());
  clpo::TrainingInstance inst;
  for (auto i : picked) {
    inst.candidates.push_back(pool[i]);
    inst.rewards.push_back(compute_reward(pool[i], q, reward));
  }
  return inst;
}

inline std::vector<clpo::TrainingInstance> collect_instances(const RunConfig& cfg,
                                                             const std::vector<Question>& questions,
                                                             std::uint64_t seed, const Hooks& hooks) {
  auto protocol = cfg.protocol;
  protocol.parallel_agents = false;  // episodes already run concurrently
  const auto agents = make_agents(protocol, seeded_agents(cfg, seed), hooks.transport);
  SelectorConfig rollout_cfg;
  rollout_cfg.kind = cfg.train.rollout_selector;
  const auto selector = make_selector(rollout_cfg, hooks.transport);

  std::vector<std::vector<clpo::TrainingInstance>> per_question(questions.size());
  parallel_for(questions.size(), cfg.parallel, [&](std::size_t i) {
    const auto& q = questions[i];
    if (!q.gold_answer) return;
    const auto trace = run_episode(q, *selector, protocol, agents, seed);
    auto& out = per_question[i];
    if (cfg.train.subsample == Subsample::round) {
      for (const auto& r : trace.rounds) out.push_back({r.slate.candidates, r.rewards});
    } else {
      std::vector<Candidate> pool;
      for (const auto& r : trace.rounds) pool.insert(pool.end(), r.slate.candidates.begin(), r.slate.candidates.end());
      Rng rng(mix_seed(seed, fnv1a64(q.id), 0x0c0ecULL));
      const auto n = static_cast<std::size_t>(protocol.N * protocol.K);
      for (int k = 0; k < cfg.train.instances_per_episode; ++k)
        if (auto inst = one_correct_instance(pool, q, n, cfg.reward, rng)) out.push_back(std::move(*inst));
    }
  });
  std::vector<clpo::TrainingInstance> all;
  for (auto& v : per_question)
    for (auto& inst : v) all.push_back(std::move(inst));
  return all;
}

// Identification of the argmax policy over instances (covered = some reward of
// exactly 1, i.e. a correct candidate at beta = 0).
inline reliability::Estimate instance_identification(const PolicyParams& params,
                                                     const std::vector<clpo::TrainingInstance>& data) {
  std::vector<reliability::RoundOutcome> outcomes;
  for (const auto& inst : data) {
    reliability::RoundOutcome o;
    for (double r : inst.rewards) o.covered = o.covered || r >= 1.0;
    Slate s;
    s.candidates = inst.candidates;
    const auto d = select_trainable(params, s, SelectionMode::argmax);
    o.identified = inst.rewards[static_cast<std::size_t>(d.chosen_flat_index)] >= 1.0;
    outcomes.push_back(o);
  }
  return reliability::estimate_identification(outcomes);
}

struct TrainRun {
  double rank_weight = 0;
  reliability::Estimate before;
  reliability::Estimate after;
  std::int64_t steps = 0;
  PolicyParams params;
  std::vector<clpo::StepRecord> curve;
};

struct TrainResult {
  nlohmann::json report;
  std::vector<TrainRun> runs;  // per seed x rank weight
  int exit_code = ExitCode::ok;
};

inline std::string format_weight(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

inline TrainResult run_train(RunConfig cfg, const Hooks& hooks = {}) {
  cfg.mode = Mode::train;
  cfg.finalize();
  const std::filesystem::path out(cfg.output_dir);
  std::filesystem::create_directories(out);
  write_manifest(cfg, out);

  std::vector<Question> train_q, holdout_q;
  if (!cfg.dataset_path.empty()) {
    auto all = load_dataset(cfg.dataset_path);
    const auto cut = all.size() - std::min<std::size_t>(all.size() / 5, static_cast<std::size_t>(cfg.train.holdout_questions));
    train_q.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cut));
    holdout_q.assign(all.begin() + static_cast<std::ptrdiff_t>(cut), all.end());
  } else {
    train_q = synthetic_questions(cfg.train.train_questions, 0x7a1, "train");
    holdout_q = synthetic_questions(cfg.train.holdout_questions, 0x401d, "holdout");
  }
  const auto seeds = cfg.seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : cfg.seeds;
  const auto sweep = cfg.train.rank_sweep.empty() ? std::vector<double>{cfg.weights.rank} : cfg.train.rank_sweep;

  TrainResult res;
  nlohmann::json runs = nlohmann::json::array();
  std::map<std::string, std::pair<double, int>> mean_after;
  for (auto seed : seeds) {
    const auto train_data = collect_instances(cfg, train_q, seed, hooks);
    const auto holdout = collect_instances(cfg, holdout_q, mix_seed(seed, 0x401dULL), hooks);
    if (train_data.empty()) throw Error("run_train: rollouts produced no training instances");
    const auto initial = PolicyParams::zeros(kDefaultFeatureDim, cfg.agents.front().simulated.vocab_size);
    const auto before = instance_identification(initial, holdout);
    for (double rank : sweep) {
      auto weights = cfg.weights;
      weights.rank = rank;
      auto schedule = cfg.schedule;
      schedule.seed = seed;
      auto trained = clpo::train(initial, train_data, weights, schedule, cfg.train.objective);
      TrainRun run{rank, before, instance_identification(trained.params, holdout),
                   static_cast<std::int64_t>(trained.curve.size()), std::move(trained.params),
                   std::move(trained.curve)};
      const std::string tag = "seed-" + std::to_string(seed) + "_rank-" + format_weight(rank);
      write_text(out / ("params_" + tag + ".json"), nlohmann::json(run.params).dump() + "\n");
      write_text(out / ("loss_curve_" + tag + ".csv"), clpo::format_loss_curve(run.curve));
      runs.push_back({{"seed", seed},
                      {"rank_weight", rank},
                      {"train_instances", train_data.size()},
                      {"holdout_instances", holdout.size()},
                      {"steps", run.steps},
                      {"identification_before", run.before},
                      {"identification_after", run.after},
                      {"final_loss", run.curve.empty() ? 0.0 : run.curve.back().terms.total}});
      auto& m = mean_after[format_weight(rank)];
      m.first += run.after.value;
      ++m.second;
      res.runs.push_back(std::move(run));
    }
  }
  nlohmann::json mean = nlohmann::json::object();
  for (const auto& [k, v] : mean_after) mean[k] = v.first / v.second;
  res.report = {{"objective", cfg.train.objective}, {"runs", runs}, {"mean_identification_after", mean}};
  write_text(out / "train_report.json", res.report.dump(2) + "\n");
  return res;
}

// ---- simulate / gradcheck -----------------------------------------------------

inline nlohmann::json run_simulate(const SimulateConfig& s, std::uint64_t seed) {
  const auto sim = reliability::simulate_protocol(s.p, s.q, s.R, s.episodes, seed);
  const double bound = reliability::reliability_lower_bound(s.p, s.q, s.R);
  const double sigma = reliability::binomial_sigma(bound, s.episodes);
  return {{"p", s.p},
          {"q", s.q},
          {"R", s.R},
          {"episodes", s.episodes},
          {"seed", seed},
          {"empirical_success", sim.rate},
          {"ci", {sim.ci.ci_low, sim.ci.ci_high}},
          {"bound", bound},
          {"sigma", sigma},
          {"within_3_sigma", std::abs(sim.rate - bound) <= 3 * sigma}};
}

inline gradcheck::Report run_gradcheck(const RunConfig& cfg) {
  gradcheck::Options opt;
  opt.instances = cfg.gradcheck.instances;
  opt.inject_choice_sign_error = cfg.gradcheck.self_test;
  opt.seed = cfg.seed;
  return gradcheck::run(opt);
}

}  // namespace maestro::runner
