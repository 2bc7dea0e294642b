#pragma once

// REINFORCE training of the scheduler with the encoder and HasAnswer frozen.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ape/answerability.hpp"
#include "ape/datagen.hpp"
#include "ape/encoder.hpp"
#include "ape/errors.hpp"
#include "ape/numerics.hpp"
#include "ape/scheduler.hpp"

namespace ape {

enum class BaselineKind { none, moving_average };

inline std::string to_string(BaselineKind b) {
  return b == BaselineKind::none ? "none" : "moving_average";
}

inline BaselineKind parse_baseline(std::string_view s) {
  if (s == "none") return BaselineKind::none;
  if (s == "moving_average") return BaselineKind::moving_average;
  throw ConfigError("unknown baseline '" + std::string(s) + "'");
}

struct RLConfig {
  double gamma = 0.8;
  double step_cost = 0.1;
  double temperature = 1.0;
  double learning_rate = 0.01;
  std::size_t batch_size = 24;  // questions per update
  std::size_t epochs = 1;
  std::size_t max_steps = 240;
  BaselineKind baseline = BaselineKind::moving_average;
  double baseline_decay = 0.9;
  double grad_norm_ceiling = 1e4;
  std::size_t divergence_patience = 10;
  double init_embedding_std = 0.1;  // scheduler rank/layer embeddings at init
  std::uint64_t seed = 1;

  void validate() const {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("rl.gamma must lie in [0, 1]");
    if (!(temperature > 0.0)) throw ConfigError("rl.tau must be > 0");
    if (!(learning_rate > 0.0)) throw ConfigError("rl.learning_rate must be > 0");
    if (batch_size == 0) throw ConfigError("rl.batch_size must be > 0");
    if (!(baseline_decay >= 0.0 && baseline_decay < 1.0)) {
      throw ConfigError("rl.baseline_decay must lie in [0, 1)");
    }
    if (!(grad_norm_ceiling > 0.0)) throw ConfigError("rl.grad_norm_ceiling must be > 0");
    if (!(init_embedding_std >= 0.0)) throw ConfigError("rl.init_embedding_std must be >= 0");
  }
};

/// G_t = sum_{t' >= t} gamma^(t'-t) r_t'.
inline std::vector<double> discounted_returns(std::span<const double> rewards, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ArgumentError("discounted_returns: gamma outside [0, 1]");
  std::vector<double> g(rewards.size());
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc = rewards[i] + gamma * acc;
    g[i] = acc;
  }
  return g;
}

struct Episode {
  ScheduleTrace trace;
  std::vector<DecisionRecord> decisions;
  std::uint64_t params_hash = 0;
  double temperature = 1.0;

  std::vector<double> rewards() const {
    std::vector<double> r;
    r.reserve(trace.steps.size());
    for (const auto& s : trace.steps) r.push_back(s.reward);
    return r;
  }
};

/// Samples one softmax-policy episode on a cached probability table.
inline Episode sample_episode(const ProbabilityTable& table, std::span<const int> labels,
                              const SchedulerParams& params, const RLConfig& cfg, Rng& rng) {
  BudgetConfig budget;
  budget.budget = static_cast<std::int64_t>(cfg.max_steps);
  budget.k = 1;
  budget.policy = Policy::softmax;
  budget.temperature = cfg.temperature;
  budget.step_cost = cfg.step_cost;
  TableStepper stepper(table);
  ScheduleOutcome out = run_schedule(stepper, params, budget, rng, labels);
  Episode ep;
  ep.trace = std::move(out.trace);
  ep.decisions = std::move(out.decisions);
  ep.params_hash = params.content_hash();
  ep.temperature = cfg.temperature;
  return ep;
}

/// log pi(chosen | candidates) under softmax(q / tau).
inline double log_policy(const DecisionRecord& d, const SchedulerParams& params, double temperature) {
  std::vector<double> q;
  q.reserve(d.candidates.size());
  for (const auto& c : d.candidates) q.push_back(priority(c.p, c.rank, c.layer, params));
  return q.at(d.chosen) / temperature - log_sum_exp(q, temperature);
}

namespace detail {

/// Coefficients on dq(n, l)/dtheta, merged over all decisions that saw the
/// same (rank, layer) candidate.
struct PriorityCoefficients {
  std::map<std::pair<std::size_t, std::size_t>, std::pair<double, double>> by_state;  // -> (p, coeff)

  void add(const Candidate& c, double coeff) {
    auto [it, inserted] = by_state.try_emplace({c.rank, c.layer}, c.p, 0.0);
    if (!inserted && it->second.first != c.p) {
      // Same passage and depth seen with a different p: cannot merge.
      throw ArgumentError("episode candidates disagree on p for one (rank, layer)");
    }
    it->second.second += coeff;
  }

  void apply(SchedulerParams& params) const {
    for (const auto& [key, pc] : by_state) {
      if (pc.second != 0.0) accumulate_priority_gradient(pc.first, key.first, key.second, pc.second, params);
    }
  }
};

/// Adds weight * d log pi(chosen)/dq_i for each candidate.
inline void add_log_policy_terms(const DecisionRecord& d, const SchedulerParams& params,
                                 double temperature, double weight, PriorityCoefficients& acc) {
  std::vector<double> q;
  q.reserve(d.candidates.size());
  for (const auto& c : d.candidates) q.push_back(priority(c.p, c.rank, c.layer, params));
  const std::vector<double> pi = softmax(q, temperature);
  for (std::size_t i = 0; i < d.candidates.size(); ++i) {
    const double indicator = i == d.chosen ? 1.0 : 0.0;
    acc.add(d.candidates[i], weight * (indicator - pi[i]) / temperature);
  }
}

}  // namespace detail

/// Adds coeff * d log pi(chosen | candidates)/dtheta to the parameter gradients.
inline void accumulate_log_policy_gradient(const DecisionRecord& d, double temperature, double coeff,
                                           SchedulerParams& params) {
  detail::PriorityCoefficients acc;
  detail::add_log_policy_terms(d, params, temperature, coeff, acc);
  acc.apply(params);
}

/// Per-step moving-average return baseline.
class ReturnBaseline {
 public:
  ReturnBaseline() = default;
  ReturnBaseline(BaselineKind kind, double decay) : kind_(kind), decay_(decay) {}

  double at(std::size_t t) const {
    if (kind_ == BaselineKind::none) return 0.0;
    return t < values_.size() ? values_[t] : 0.0;
  }

  /// Overrides the value at step t (used to pin advantages in tests).
  void set(std::size_t t, double v) {
    if (values_.size() <= t) values_.resize(t + 1, 0.0);
    values_[t] = v;
  }

  void update(std::span<const std::vector<double>> batch_returns) {
    if (kind_ == BaselineKind::none) return;
    std::vector<double> sum, count;
    for (const auto& g : batch_returns) {
      if (sum.size() < g.size()) {
        sum.resize(g.size(), 0.0);
        count.resize(g.size(), 0.0);
      }
      for (std::size_t t = 0; t < g.size(); ++t) {
        sum[t] += g[t];
        count[t] += 1.0;
      }
    }
    if (values_.size() < sum.size()) values_.resize(sum.size(), 0.0);
    for (std::size_t t = 0; t < sum.size(); ++t) {
      values_[t] = decay_ * values_[t] + (1.0 - decay_) * (sum[t] / count[t]);
    }
  }

  BaselineKind kind() const noexcept { return kind_; }
  const std::vector<double>& values() const noexcept { return values_; }

 private:
  BaselineKind kind_ = BaselineKind::none;
  double decay_ = 0.9;
  std::vector<double> values_;
};

struct BatchStats {
  double mean_return = 0.0;  // mean G_0 per episode
  double mean_length = 0.0;
  double grad_norm = 0.0;
};

/// Fills the gradients of the REINFORCE loss
///   -(1/|batch|) sum_episodes sum_t (G_t - b_t) log pi(a_t)
/// without stepping the optimiser.
inline BatchStats reinforce_gradient(std::span<const Episode> episodes, SchedulerParams& params,
                                     const RLConfig& cfg, const ReturnBaseline& baseline,
                                     std::vector<std::vector<double>>* returns_out = nullptr) {
  if (episodes.empty()) throw ArgumentError("reinforce_update: empty batch");
  const std::uint64_t hash = params.content_hash();
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    if (episodes[i].params_hash != hash) {
      throw StaleEpisodeError("reinforce_update: episode " + std::to_string(i) +
                              " was sampled under different scheduler parameters");
    }
  }
  auto blocks = params.mutable_blocks();
  zero_grads(blocks);
  BatchStats stats;
  const double scale = 1.0 / static_cast<double>(episodes.size());
  for (const auto& ep : episodes) {
    const std::vector<double> g = discounted_returns(ep.rewards(), cfg.gamma);
    if (ep.decisions.size() != g.size()) {
      throw ArgumentError("reinforce_update: episode lacks per-step decision records");
    }
    detail::PriorityCoefficients acc;
    for (std::size_t t = 0; t < g.size(); ++t) {
      const double advantage = g[t] - baseline.at(t);
      if (advantage == 0.0) continue;
      detail::add_log_policy_terms(ep.decisions[t], params, ep.temperature, -advantage * scale, acc);
    }
    stats.mean_return += (g.empty() ? 0.0 : g[0]) * scale;
    stats.mean_length += static_cast<double>(g.size()) * scale;
    if (returns_out) returns_out->push_back(g);
    acc.apply(params);
  }
  std::vector<const ParamBlock*> cblocks(blocks.begin(), blocks.end());
  stats.grad_norm = grad_norm(cblocks);
  return stats;
}

/// One REINFORCE step: gradient, Adam update of the scheduler parameters,
/// then the baseline update.
inline BatchStats reinforce_update(std::span<const Episode> episodes, SchedulerParams& params,
                                   const RLConfig& cfg, Adam& adam, ReturnBaseline& baseline) {
  std::vector<std::vector<double>> returns;
  const BatchStats stats = reinforce_gradient(episodes, params, cfg, baseline, &returns);
  adam.step(params.mutable_blocks());
  baseline.update(returns);
  return stats;
}

struct LearningCurvePoint {
  std::size_t batch = 0;
  double mean_return = 0.0;
  double mean_length = 0.0;
  double grad_norm = 0.0;
};

inline std::string format_learning_curve(std::span<const LearningCurvePoint> curve) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "batch,mean_return,mean_len,grad_norm\n";
  for (const auto& p : curve) {
    out << p.batch << ',' << p.mean_return << ',' << p.mean_length << ',' << p.grad_norm << '\n';
  }
  return out.str();
}

struct SchedulerTrainResult {
  SchedulerParams params;
  std::vector<LearningCurvePoint> curve;
};

/// Scheduler initialisation used for training: random embeddings and first
/// layers, zero output layers (so it starts as the greedy-on-p policy).
inline SchedulerParams initial_scheduler_params(std::size_t max_rank, std::size_t num_layers,
                                                std::uint64_t seed, double embedding_std = 0.1) {
  return SchedulerParams::random_init(max_rank, num_layers, seed, 64, 16, embedding_std);
}

/// REINFORCE over cached probability tables (one per question).
inline SchedulerTrainResult train_scheduler_on_tables(std::span<const ProbabilityTable> tables,
                                                      std::span<const std::vector<int>> labels,
                                                      SchedulerParams params, const RLConfig& cfg) {
  cfg.validate();
  if (tables.size() != labels.size()) throw ArgumentError("train_scheduler: tables/labels size mismatch");
  Rng rng(cfg.seed);
  Adam adam({cfg.learning_rate, 0.9, 0.999, 1e-8});
  ReturnBaseline baseline(cfg.baseline, cfg.baseline_decay);
  SchedulerTrainResult result;

  std::vector<std::size_t> order(tables.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t batch_index = 0;
  std::size_t over_ceiling = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Episode> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(sample_episode(tables[order[i]], labels[order[i]], params, cfg, rng));
      }
      const BatchStats stats = reinforce_update(batch, params, cfg, adam, baseline);
      result.curve.push_back({batch_index, stats.mean_return, stats.mean_length, stats.grad_norm});
      if (!std::isfinite(stats.grad_norm) || stats.grad_norm > cfg.grad_norm_ceiling) {
        if (++over_ceiling >= cfg.divergence_patience || !std::isfinite(stats.grad_norm)) {
          std::ostringstream msg;
          msg << "train_scheduler: gradient norm " << stats.grad_norm << " above ceiling "
              << cfg.grad_norm_ceiling << " for " << over_ceiling
              << " consecutive batches (last batch " << batch_index << "); param norms:";
          for (const ParamBlock* b : params.blocks()) msg << ' ' << b->name << '=' << value_norm(*b);
          throw TrainingDivergedError(msg.str());
        }
      } else {
        over_ceiling = 0;
      }
    }
  }
  zero_grads(params.mutable_blocks());
  result.params = std::move(params);
  return result;
}

inline std::vector<ProbabilityTable> build_probability_tables(const Dataset& data,
                                                              const EncoderModel& encoder,
                                                              const HasAnswerModel& has_answer) {
  std::vector<ProbabilityTable> tables;
  tables.reserve(data.size());
  for (const auto& q : data) tables.push_back(build_probability_table(q, encoder, has_answer));
  return tables;
}

/// Trains the scheduler on a dataset. The encoder and HasAnswer head are
/// only read; their content hashes are checked before and after.
inline SchedulerTrainResult train_scheduler(const Dataset& data, const EncoderModel& encoder,
                                            const HasAnswerModel& has_answer, const RLConfig& cfg,
                                            std::size_t max_rank) {
  const std::uint64_t enc_hash = encoder.content_hash();
  const std::uint64_t ha_hash = has_answer.content_hash();
  const auto tables = build_probability_tables(data, encoder, has_answer);
  std::vector<std::vector<int>> labels;
  labels.reserve(data.size());
  for (const auto& q : data) labels.push_back(labels_of(q));
  SchedulerParams init = initial_scheduler_params(max_rank, encoder.num_layers(), cfg.seed ^ 0x5c4edULL,
                                                  cfg.init_embedding_std);
  SchedulerTrainResult result = train_scheduler_on_tables(tables, labels, std::move(init), cfg);
  if (encoder.content_hash() != enc_hash || has_answer.content_hash() != ha_hash) {
    throw std::logic_error("train_scheduler: frozen model parameters changed");
  }
  return result;
}

}  // namespace ape
