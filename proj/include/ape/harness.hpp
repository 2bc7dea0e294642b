#pragma once

// Run configuration, evaluation metrics, baseline comparison, checkpoint
// plumbing and gradient checks used by the CLI and the acceptance suite.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ape/answerability.hpp"
#include "ape/datagen.hpp"
#include "ape/encoder.hpp"
#include "ape/errors.hpp"
#include "ape/numerics.hpp"
#include "ape/policy_training.hpp"
#include "ape/scheduler.hpp"

namespace ape {

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

struct EvalConfig {
  std::vector<std::size_t> k_values{2, 3, 5};
  /// Budget multipliers applied to L*k; {1} gives the default B = L*k.
  std::vector<double> budget_scales{1.0};
  std::vector<std::string> policies{"ape", "greedy_p", "round_robin", "static_topk"};
  bool record_wall_time = false;
};

struct PathConfig {
  std::string train_data = "run/train.tsv";
  std::string test_data = "run/test.tsv";
  std::string encoder = "run/encoder.ckpt";
  std::string has_answer = "run/hasanswer.ckpt";
  std::string scheduler = "run/scheduler.ckpt";
  std::string report = "run/report.csv";
  std::string curve = "run/curve.csv";
};

struct RunConfig {
  EncoderConfig encoder;
  GenConfig data;
  std::size_t test_questions = 500;
  std::uint64_t test_seed = 1000001;
  HasAnswerTrainConfig has_answer;
  RLConfig rl;
  EvalConfig eval;
  PathConfig paths;
  std::optional<std::uint64_t> seed;

  void validate() const {
    encoder.validate();
    data.validate();
    rl.validate();
    if (data.vocab_size != encoder.vocab_size) {
      throw ConfigError("data.vocab_size must equal encoder.vocab_size");
    }
    if (data.question_length + 1 > encoder.max_seq_len) {
      throw ConfigError("data.question_length leaves no room for passage tokens within encoder.max_seq_len");
    }
    if (has_answer.batch_size == 0) throw ConfigError("hasanswer.batch_size must be > 0");
    if (!(has_answer.learning_rate > 0.0)) throw ConfigError("hasanswer.learning_rate must be > 0");
    if (has_answer.depth_samples == 0) throw ConfigError("hasanswer.depth_samples must be > 0");
    if (!(has_answer.heldout_fraction >= 0.0 && has_answer.heldout_fraction < 1.0)) {
      throw ConfigError("hasanswer.heldout_fraction must lie in [0, 1)");
    }
    for (std::size_t k : eval.k_values) {
      if (k == 0 || k > data.passages_per_question) {
        throw ConfigError("eval.k values must lie in [1, data.passages]");
      }
    }
    for (double s : eval.budget_scales) {
      if (!(s >= 0.0)) throw ConfigError("eval.budget_scales must be >= 0");
    }
    for (const auto& p : eval.policies) {
      if (p != "ape" && p != "greedy_p" && p != "round_robin" && p != "static_topk") {
        throw ConfigError("eval.policies: unknown policy '" + p + "'");
      }
    }
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) {
    throw ConfigError("invalid value '" + value + "' for key " + key);
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("invalid value '" + value + "' for key " + key + " (expected true/false)");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& value) {
  std::vector<T> out;
  std::string item;
  std::istringstream in(value);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError("empty list element in key " + key);
    if constexpr (std::is_same_v<T, std::string>) {
      out.push_back(item);
    } else {
      out.push_back(parse_number<T>(key, item));
    }
  }
  if (out.empty()) throw ConfigError("empty list for key " + key);
  return out;
}

}  // namespace detail

/// Applies one key = value setting. Unknown keys throw ConfigError.
inline void apply_setting(RunConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_number;
  using std::size_t;
  using u64 = std::uint64_t;
  const std::map<std::string, std::function<void()>> setters{
      {"encoder.num_layers", [&] { c.encoder.num_layers = parse_number<size_t>(key, value); }},
      {"encoder.model_dim", [&] { c.encoder.model_dim = parse_number<size_t>(key, value); }},
      {"encoder.num_heads", [&] { c.encoder.num_heads = parse_number<size_t>(key, value); }},
      {"encoder.ffn_dim", [&] { c.encoder.ffn_dim = parse_number<size_t>(key, value); }},
      {"encoder.vocab_size", [&] { c.encoder.vocab_size = parse_number<size_t>(key, value); }},
      {"encoder.max_seq_len", [&] { c.encoder.max_seq_len = parse_number<size_t>(key, value); }},
      {"encoder.init_seed", [&] { c.encoder.init_seed = parse_number<u64>(key, value); }},
      {"data.num_questions", [&] { c.data.num_questions = parse_number<size_t>(key, value); }},
      {"data.passages", [&] { c.data.passages_per_question = parse_number<size_t>(key, value); }},
      {"data.question_length", [&] { c.data.question_length = parse_number<size_t>(key, value); }},
      {"data.passage_length", [&] { c.data.passage_length = parse_number<size_t>(key, value); }},
      {"data.vocab_size", [&] { c.data.vocab_size = parse_number<size_t>(key, value); }},
      {"data.relevance_rate", [&] { c.data.relevance_rate = parse_number<double>(key, value); }},
      {"data.rank_decay", [&] { c.data.rank_decay = parse_number<double>(key, value); }},
      {"data.signal_strength", [&] { c.data.signal_strength = parse_number<double>(key, value); }},
      {"data.plain_fraction", [&] { c.data.plain_fraction = parse_number<double>(key, value); }},
      {"data.mention_count", [&] { c.data.mention_count = parse_number<size_t>(key, value); }},
      {"data.answer_vocab", [&] { c.data.answer_vocab = parse_number<size_t>(key, value); }},
      {"data.seed", [&] { c.data.seed = parse_number<u64>(key, value); }},
      {"data.test_questions", [&] { c.test_questions = parse_number<size_t>(key, value); }},
      {"data.test_seed", [&] { c.test_seed = parse_number<u64>(key, value); }},
      {"hasanswer.learning_rate", [&] { c.has_answer.learning_rate = parse_number<double>(key, value); }},
      {"hasanswer.batch_size", [&] { c.has_answer.batch_size = parse_number<size_t>(key, value); }},
      {"hasanswer.epochs", [&] { c.has_answer.epochs = parse_number<size_t>(key, value); }},
      {"hasanswer.adam_beta1", [&] { c.has_answer.adam_beta1 = parse_number<double>(key, value); }},
      {"hasanswer.adam_beta2", [&] { c.has_answer.adam_beta2 = parse_number<double>(key, value); }},
      {"hasanswer.adam_epsilon", [&] { c.has_answer.adam_epsilon = parse_number<double>(key, value); }},
      {"hasanswer.pooling", [&] { c.has_answer.pooling = parse_pooling(value); }},
      {"hasanswer.hidden_size", [&] { c.has_answer.hidden_size = parse_number<size_t>(key, value); }},
      {"hasanswer.heldout_fraction", [&] { c.has_answer.heldout_fraction = parse_number<double>(key, value); }},
      {"hasanswer.depth_samples", [&] { c.has_answer.depth_samples = parse_number<size_t>(key, value); }},
      {"rl.gamma", [&] { c.rl.gamma = parse_number<double>(key, value); }},
      {"rl.step_cost", [&] { c.rl.step_cost = parse_number<double>(key, value); }},
      {"rl.tau", [&] { c.rl.temperature = parse_number<double>(key, value); }},
      {"rl.learning_rate", [&] { c.rl.learning_rate = parse_number<double>(key, value); }},
      {"rl.batch_size", [&] { c.rl.batch_size = parse_number<size_t>(key, value); }},
      {"rl.epochs", [&] { c.rl.epochs = parse_number<size_t>(key, value); }},
      {"rl.max_steps", [&] { c.rl.max_steps = parse_number<size_t>(key, value); }},
      {"rl.baseline", [&] { c.rl.baseline = parse_baseline(value); }},
      {"rl.baseline_decay", [&] { c.rl.baseline_decay = parse_number<double>(key, value); }},
      {"rl.grad_norm_ceiling", [&] { c.rl.grad_norm_ceiling = parse_number<double>(key, value); }},
      {"rl.init_embedding_std", [&] { c.rl.init_embedding_std = parse_number<double>(key, value); }},
      {"rl.divergence_patience", [&] { c.rl.divergence_patience = parse_number<size_t>(key, value); }},
      {"eval.k", [&] { c.eval.k_values = detail::parse_list<size_t>(key, value); }},
      {"eval.budget_scales", [&] { c.eval.budget_scales = detail::parse_list<double>(key, value); }},
      {"eval.policies", [&] { c.eval.policies = detail::parse_list<std::string>(key, value); }},
      {"eval.record_wall_time", [&] { c.eval.record_wall_time = detail::parse_bool(key, value); }},
      {"paths.train_data", [&] { c.paths.train_data = value; }},
      {"paths.test_data", [&] { c.paths.test_data = value; }},
      {"paths.encoder", [&] { c.paths.encoder = value; }},
      {"paths.hasanswer", [&] { c.paths.has_answer = value; }},
      {"paths.scheduler", [&] { c.paths.scheduler = value; }},
      {"paths.report", [&] { c.paths.report = value; }},
      {"paths.curve", [&] { c.paths.curve = value; }},
  };
  const auto it = setters.find(key);
  if (it == setters.end()) throw ConfigError("unknown configuration key: " + key);
  try {
    it->second();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.find(key) != std::string::npos) throw;
    throw ConfigError(key + ": " + msg);
  }
}

/// Parses flat `key = value` text with `#` comments.
inline RunConfig parse_run_config(std::string_view text, RunConfig base = {}) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    apply_setting(base, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
  return base;
}

/// Applies `key=value` overrides.
inline void apply_overrides(RunConfig& c, std::span<const std::string> overrides) {
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
    apply_setting(c, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
}

inline RunConfig load_run_config(const std::string& path, std::span<const std::string> overrides = {}) {
  RunConfig c;
  if (!path.empty()) {
    std::string text;
    try {
      text = read_file_bytes(path);
    } catch (const std::exception&) {
      throw ConfigError("cannot read config file " + path);
    }
    c = parse_run_config(text);
  }
  apply_overrides(c, overrides);
  c.validate();
  return c;
}

/// Per-stage seeds derived from the run seed.
inline std::uint64_t stage_seed(std::uint64_t run_seed, std::uint64_t stage) {
  std::uint64_t x = run_seed * 0x9E3779B97F4A7C15ULL + stage;
  return Rng::splitmix64(x);
}
inline constexpr std::uint64_t kStageHasAnswer = 1;
inline constexpr std::uint64_t kStageSchedulerInit = 2;
inline constexpr std::uint64_t kStageReinforce = 3;

inline GenConfig train_gen_config(const RunConfig& c) { return c.data; }
inline GenConfig test_gen_config(const RunConfig& c) {
  GenConfig g = c.data;
  g.num_questions = c.test_questions;
  g.seed = c.test_seed;
  return g;
}

inline HasAnswerTrainConfig has_answer_config(const RunConfig& c, std::uint64_t run_seed) {
  HasAnswerTrainConfig h = c.has_answer;
  h.seed = stage_seed(run_seed, kStageHasAnswer);
  return h;
}

inline RLConfig rl_config(const RunConfig& c, std::uint64_t run_seed) {
  RLConfig r = c.rl;
  r.seed = stage_seed(run_seed, kStageReinforce);
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline void require_file(const std::string& path, const std::string& what) {
  if (!std::filesystem::exists(path)) throw ConfigError("missing " + what + " checkpoint: " + path);
}

inline void ensure_parent_dir(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
}

inline void save_blocks(const std::string& path, std::span<const ParamBlock* const> blocks) {
  ensure_parent_dir(path);
  write_file_bytes(path, serialize_checkpoint(blocks));
}

inline EncoderModel load_encoder(const std::string& path, const EncoderConfig& cfg) {
  require_file(path, "encoder");
  return EncoderModel(cfg, deserialize_checkpoint(read_file_bytes(path)));
}

inline HasAnswerModel load_has_answer(const std::string& path, std::size_t input_dim,
                                      const HasAnswerTrainConfig& cfg) {
  require_file(path, "HasAnswer");
  HasAnswerModel m = HasAnswerModel::zeros(input_dim, cfg.hidden_size, cfg.pooling);
  auto targets = m.all_blocks();
  assign_checkpoint(targets, deserialize_checkpoint(read_file_bytes(path)));
  return m;
}

inline SchedulerParams load_scheduler(const std::string& path, std::size_t max_rank, std::size_t num_layers) {
  require_file(path, "scheduler");
  SchedulerParams p(max_rank, num_layers);
  auto targets = p.mutable_blocks();
  assign_checkpoint(targets, deserialize_checkpoint(read_file_bytes(path)));
  return p;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct RetainedSet {
  std::string question_id;
  std::vector<std::size_t> ranks;
};

/// Fraction of questions whose retained set holds at least one passage
/// labelled has-answer.
inline double answer_recall_at_k(const Dataset& data, std::span<const RetainedSet> retained,
                                 std::size_t k) {
  if (data.size() != retained.size()) {
    throw ArgumentError("answer_recall_at_k: " + std::to_string(retained.size()) +
                        " retained sets for " + std::to_string(data.size()) + " questions");
  }
  if (data.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].id != retained[i].question_id) {
      throw ArgumentError("answer_recall_at_k: question id mismatch at " + std::to_string(i) + ": '" +
                          data[i].id + "' vs '" + retained[i].question_id + "'");
    }
    if (retained[i].ranks.size() > k) {
      throw ArgumentError("answer_recall_at_k: retained set larger than k for question " + data[i].id);
    }
    bool hit = false;
    for (std::size_t r : retained[i].ranks) {
      if (r >= data[i].passages.size()) throw ArgumentError("answer_recall_at_k: rank out of range");
      hit = hit || data[i].passages[r].label == 1;
    }
    hits += hit ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

struct EvalRow {
  std::string policy;
  std::size_t k = 0;
  std::int64_t budget = 0;
  double recall_at_k = 0.0;
  double mean_layers = 0.0;
  double mean_layers_relevant = 0.0;
  double wall_ms = 0.0;
  std::uint64_t seed = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<std::uint64_t> seeds;
};

inline constexpr std::string_view kEvalCsvHeader =
    "policy,k,B,recall_at_k,mean_layers,mean_layers_relevant,wall_ms,seed";

inline std::string format_eval_csv(const EvalReport& report) {
  std::ostringstream out;
  out << kEvalCsvHeader << '\n' << std::setprecision(17);
  for (const auto& r : report.rows) {
    out << r.policy << ',' << r.k << ',' << r.budget << ',' << r.recall_at_k << ',' << r.mean_layers
        << ',' << r.mean_layers_relevant << ',' << r.wall_ms << ',' << r.seed << '\n';
  }
  return out.str();
}

/// Result of running one policy over a dataset.
struct PolicyRun {
  EvalRow row;
  std::vector<ScheduleTrace> traces;
  std::vector<RetainedSet> retained;
};

struct PolicySpec {
  std::string name;
  Policy policy = Policy::argmax;
  const SchedulerParams* params = nullptr;
};

/// Evaluates one policy on cached probability tables.
inline PolicyRun evaluate_policy(const Dataset& data, std::span<const ProbabilityTable> tables,
                                 const PolicySpec& spec, std::size_t k, std::int64_t budget,
                                 double step_cost = 0.1, bool record_wall_time = false) {
  if (tables.size() != data.size()) throw ArgumentError("evaluate_policy: table count mismatch");
  const auto start = std::chrono::steady_clock::now();
  PolicyRun run;
  BudgetConfig bc;
  bc.budget = budget;
  bc.k = k;
  bc.policy = spec.policy;
  bc.step_cost = step_cost;
  double layer_sum = 0.0, layer_count = 0.0, rel_sum = 0.0, rel_count = 0.0;
  // Argmax, round robin and static top-k never draw from the generator.
  Rng unused(0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    TableStepper stepper(tables[i]);
    const std::vector<int> labels = labels_of(data[i]);
    ScheduleOutcome out = run_schedule(stepper, *spec.params, bc, unused, labels);
    for (const auto& s : out.passages) {
      layer_sum += static_cast<double>(s.layer);
      layer_count += 1.0;
      if (labels[s.rank] == 1) {
        rel_sum += static_cast<double>(s.layer);
        rel_count += 1.0;
      }
    }
    run.retained.push_back({data[i].id, out.trace.retained});
    run.traces.push_back(std::move(out.trace));
  }
  run.row.policy = spec.name;
  run.row.k = k;
  run.row.budget = budget;
  run.row.recall_at_k = answer_recall_at_k(data, run.retained, k);
  run.row.mean_layers = layer_count > 0 ? layer_sum / layer_count : 0.0;
  run.row.mean_layers_relevant = rel_count > 0 ? rel_sum / rel_count : 0.0;
  if (record_wall_time) {
    run.row.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  }
  return run;
}

inline std::int64_t scaled_budget(std::size_t num_layers, std::size_t k, double scale) {
  return static_cast<std::int64_t>(std::llround(scale * static_cast<double>(num_layers * k)));
}

/// Evaluates every configured policy at every configured (k, B).
inline EvalReport run_eval(const RunConfig& cfg, const Dataset& test, std::span<const ProbabilityTable> tables,
                           std::size_t num_layers, const SchedulerParams* trained, std::uint64_t seed) {
  const SchedulerParams zero(cfg.data.passages_per_question, num_layers);
  EvalReport report;
  report.seeds.push_back(seed);
  for (std::size_t k : cfg.eval.k_values) {
    for (double scale : cfg.eval.budget_scales) {
      const std::int64_t budget = scaled_budget(num_layers, k, scale);
      for (const auto& name : cfg.eval.policies) {
        PolicySpec spec{name, Policy::argmax, &zero};
        if (name == "ape") {
          if (trained == nullptr) throw ConfigError("run_eval: policy 'ape' needs a trained scheduler");
          spec.params = trained;
        } else if (name == "round_robin") {
          spec.policy = Policy::round_robin;
        } else if (name == "static_topk") {
          spec.policy = Policy::static_topk;
        }
        PolicyRun run = evaluate_policy(test, tables, spec, k, budget, cfg.rl.step_cost,
                                        cfg.eval.record_wall_time);
        run.row.seed = seed;
        report.rows.push_back(run.row);
      }
    }
  }
  return report;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ArgumentError("median of empty sequence");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Median recall across seeds for one (policy, k, B) cell.
inline double median_recall(const EvalReport& report, const std::string& policy, std::size_t k,
                            std::int64_t budget) {
  std::vector<double> v;
  for (const auto& r : report.rows) {
    if (r.policy == policy && r.k == k && r.budget == budget) v.push_back(r.recall_at_k);
  }
  return median(std::move(v));
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct PipelineArtifacts {
  EncoderModel encoder;
  HasAnswerTrainResult has_answer;
  SchedulerTrainResult scheduler;
  std::vector<ProbabilityTable> test_tables;
  EvalReport report;
};

/// gen-data -> train-hasanswer -> train-scheduler -> eval in memory for one
/// run seed. The datasets are passed in so several seeds can share them.
inline PipelineArtifacts run_pipeline(const RunConfig& cfg, const Dataset& train, const Dataset& test,
                                      std::uint64_t seed) {
  PipelineArtifacts a{EncoderModel(cfg.encoder), {}, {}, {}, {}};
  a.has_answer = train_has_answer(train, a.encoder, has_answer_config(cfg, seed));
  const auto tables = build_probability_tables(train, a.encoder, a.has_answer.model);
  std::vector<std::vector<int>> labels;
  labels.reserve(train.size());
  for (const auto& q : train) labels.push_back(labels_of(q));
  SchedulerParams init = initial_scheduler_params(cfg.data.passages_per_question, cfg.encoder.num_layers,
                                                  stage_seed(seed, kStageSchedulerInit), cfg.rl.init_embedding_std);
  a.scheduler = train_scheduler_on_tables(tables, labels, std::move(init), rl_config(cfg, seed));
  a.test_tables = build_probability_tables(test, a.encoder, a.has_answer.model);
  a.report = run_eval(cfg, test, a.test_tables, cfg.encoder.num_layers, &a.scheduler.params, seed);
  return a;
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

/// |a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from
/// reporting rounding noise as relative error.
inline double relative_error(double analytic, double numeric, double floor = 1e-5) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradcheckResult {
  double max_relative_error = 0.0;
  std::size_t entries_checked = 0;
  std::string worst_entry;
};

namespace detail {

inline void record(GradcheckResult& r, double analytic, double numeric, const std::string& where) {
  const double e = relative_error(analytic, numeric);
  ++r.entries_checked;
  if (e >= r.max_relative_error || r.worst_entry.empty()) {
    r.max_relative_error = std::max(e, r.max_relative_error);
    r.worst_entry = where;
  }
}

}  // namespace detail

/// Central differences of the HasAnswer BCE loss with respect to every MLP
/// parameter and every activation of a random hidden state.
inline GradcheckResult gradcheck_has_answer(std::uint64_t seed, std::size_t configurations,
                                            double eps = 1e-6) {
  GradcheckResult result;
  Rng rng(seed);
  for (std::size_t c = 0; c < configurations; ++c) {
    const std::size_t d = 2 + rng.uniform_index(5);
    const std::size_t hidden = 2 + rng.uniform_index(6);
    const std::size_t rows = 1 + rng.uniform_index(5);
    const Pooling pooling = static_cast<Pooling>(rng.uniform_index(3));
    const int y = rng.bernoulli(0.5) ? 1 : 0;
    HasAnswerModel model(d, hidden, pooling, rng.next_u64());
    fill_normal(model.w2().value, rng, 1.0);
    fill_normal(model.b1().value, rng, 0.5);
    model.b2().value(0, 0) = rng.normal();
    {
      std::vector<std::vector<double>> sample(8, std::vector<double>(d));
      for (auto& s : sample)
        for (auto& v : s) v = rng.normal();
      model.fit_input_standardisation(sample);
    }
    HiddenState h;
    h.activations = Tensor2(rows, d);
    fill_normal(h.activations, rng, 1.0);

    auto loss_at = [&](const HiddenState& hs) {
      return bce_loss(has_answer_prob(hs, model), y);
    };
    auto params = model.mutable_blocks();
    zero_grads(params);
    const Tensor2 dx = backprop_bce(h, y, model);
    for (ParamBlock* b : params) {
      for (std::size_t i = 0; i < b->value.size(); ++i) {
        const double saved = b->value.data()[i];
        b->value.data()[i] = saved + eps;
        const double up = loss_at(h);
        b->value.data()[i] = saved - eps;
        const double down = loss_at(h);
        b->value.data()[i] = saved;
        detail::record(result, b->grad.data()[i], (up - down) / (2.0 * eps),
                       b->name + "[" + std::to_string(i) + "] config " + std::to_string(c));
      }
    }
    for (std::size_t i = 0; i < h.activations.size(); ++i) {
      HiddenState hp = h, hm = h;
      hp.activations.data()[i] += eps;
      hm.activations.data()[i] -= eps;
      detail::record(result, dx.data()[i], (loss_at(hp) - loss_at(hm)) / (2.0 * eps),
                     "activation[" + std::to_string(i) + "] config " + std::to_string(c));
    }
    zero_grads(params);
  }
  return result;
}

/// Random small decision sequences (N <= 4 candidates, <= 3 steps) with
/// random advantages; checks d/dtheta of sum_t A_t log pi(a_t) against
/// central differences for every scheduler parameter.
inline GradcheckResult gradcheck_log_policy(std::uint64_t seed, std::size_t configurations,
                                            double eps = 1e-6) {
  GradcheckResult result;
  Rng rng(seed);
  for (std::size_t c = 0; c < configurations; ++c) {
    const std::size_t n = 2 + rng.uniform_index(3);
    const std::size_t layers = 1 + rng.uniform_index(3);
    const std::size_t steps = 1 + rng.uniform_index(3);
    const double tau = 0.5 + rng.uniform();
    SchedulerParams params = SchedulerParams::random_init(n, layers, rng.next_u64(), 6, 3);
    fill_normal(params.g().w2.value, rng, 0.5);
    fill_normal(params.f().w2.value, rng, 0.5);
    params.g().b2.value(0, 0) = rng.normal();
    params.f().b2.value(0, 0) = rng.normal();

    std::vector<std::vector<double>> p_table(n, std::vector<double>(layers));
    for (auto& row : p_table)
      for (auto& v : row) v = rng.uniform();
    std::vector<DecisionRecord> decisions(steps);
    std::vector<double> advantages(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      const std::size_t m = 1 + rng.uniform_index(n);
      for (std::size_t rank = 0; rank < m; ++rank) {
        const std::size_t l = rng.uniform_index(layers);
        decisions[t].candidates.push_back({rank, l, p_table[rank][l]});
      }
      decisions[t].chosen = rng.uniform_index(m);
      advantages[t] = rng.normal();
    }
    auto objective = [&]() {
      double s = 0.0;
      for (std::size_t t = 0; t < steps; ++t) s += advantages[t] * log_policy(decisions[t], params, tau);
      return s;
    };
    auto blocks = params.mutable_blocks();
    zero_grads(blocks);
    for (std::size_t t = 0; t < steps; ++t) {
      accumulate_log_policy_gradient(decisions[t], tau, advantages[t], params);
    }
    for (ParamBlock* b : blocks) {
      for (std::size_t i = 0; i < b->value.size(); ++i) {
        const double saved = b->value.data()[i];
        b->value.data()[i] = saved + eps;
        const double up = objective();
        b->value.data()[i] = saved - eps;
        const double down = objective();
        b->value.data()[i] = saved;
        detail::record(result, b->grad.data()[i], (up - down) / (2.0 * eps),
                       b->name + "[" + std::to_string(i) + "] config " + std::to_string(c));
      }
    }
    zero_grads(blocks);
  }
  return result;
}

}  // namespace ape
