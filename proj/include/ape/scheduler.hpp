#pragma once

// Budgeted adaptive layer scheduling.
//
// Each passage n carries a layer index l_n, its has-answer probability p_n at
// that layer and a priority
//     q_n = sigmoid(g(x_n)) * p_n + f(x_n),   x_n = [p_n, rank_emb[n], layer_emb[l_n]]
// where g and f are two-layer ReLU MLPs. Every step forwards exactly one
// active passage by one layer and refreshes only that passage's p and q.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ape/answerability.hpp"
#include "ape/datagen.hpp"
#include "ape/encoder.hpp"
#include "ape/errors.hpp"
#include "ape/numerics.hpp"

namespace ape {

inline constexpr std::size_t kPositionEmbeddingDim = 16;
inline constexpr std::size_t kSchedulerHidden = 64;

/// One of the two priority MLPs (input -> hidden -> 1, ReLU).
struct PriorityMlp {
  ParamBlock w1, b1, w2, b2;

  PriorityMlp() = default;
  PriorityMlp(const std::string& prefix, std::size_t input_dim, std::size_t hidden)
      : w1(prefix + ".w1", input_dim, hidden),
        b1(prefix + ".b1", 1, hidden),
        w2(prefix + ".w2", hidden, 1),
        b2(prefix + ".b2", 1, 1) {}

  double forward(std::span<const double> x, std::vector<double>* hidden_pre = nullptr) const {
    const std::size_t hid = w1.value.cols();
    if (hidden_pre) hidden_pre->assign(hid, 0.0);
    double out = b2.value(0, 0);
    for (std::size_t j = 0; j < hid; ++j) {
      double z = b1.value(0, j);
      for (std::size_t i = 0; i < x.size(); ++i) z += x[i] * w1.value(i, j);
      if (hidden_pre) (*hidden_pre)[j] = z;
      if (z > 0.0) out += z * w2.value(j, 0);
    }
    return out;
  }

  /// Accumulates coeff * d(out)/d(theta) and adds coeff * d(out)/dx to x_grad.
  void backward(std::span<const double> x, std::span<const double> hidden_pre, double coeff,
                std::span<double> x_grad) {
    b2.grad(0, 0) += coeff;
    for (std::size_t j = 0; j < hidden_pre.size(); ++j) {
      const double z = hidden_pre[j];
      if (z <= 0.0) continue;
      w2.grad(j, 0) += coeff * z;
      const double dz = coeff * w2.value(j, 0);
      b1.grad(0, j) += dz;
      for (std::size_t i = 0; i < x.size(); ++i) {
        w1.grad(i, j) += dz * x[i];
        x_grad[i] += dz * w1.value(i, j);
      }
    }
  }
};

/// Trainable scheduler weights: the g and f MLPs plus rank and layer
/// embeddings. A default-constructed (all-zero) instance gives q = 0.5 * p.
class SchedulerParams {
 public:
  SchedulerParams() = default;
  SchedulerParams(std::size_t max_rank, std::size_t num_layers,
                  std::size_t hidden = kSchedulerHidden,
                  std::size_t emb_dim = kPositionEmbeddingDim)
      : g_("scheduler.g", 1 + 2 * emb_dim, hidden),
        f_("scheduler.f", 1 + 2 * emb_dim, hidden),
        rank_embedding_("scheduler.rank_embedding", max_rank, emb_dim),
        layer_embedding_("scheduler.layer_embedding", num_layers + 1, emb_dim) {}

  /// Random embeddings and first layers; zero output layers, so the initial
  /// policy still ranks by p exactly like the all-zero parameters.
  static SchedulerParams random_init(std::size_t max_rank, std::size_t num_layers,
                                     std::uint64_t seed, std::size_t hidden = kSchedulerHidden,
                                     std::size_t emb_dim = kPositionEmbeddingDim,
                                     double embedding_std = 1.0) {
    SchedulerParams p(max_rank, num_layers, hidden, emb_dim);
    Rng rng(seed);
    const double in_std = std::sqrt(2.0 / static_cast<double>(1 + 2 * emb_dim));
    fill_normal(p.rank_embedding_.value, rng, embedding_std);
    fill_normal(p.layer_embedding_.value, rng, embedding_std);
    fill_normal(p.g_.w1.value, rng, in_std);
    fill_normal(p.f_.w1.value, rng, in_std);
    return p;
  }

  std::size_t max_rank() const noexcept { return rank_embedding_.value.rows(); }
  std::size_t num_layers() const noexcept {
    return layer_embedding_.value.rows() == 0 ? 0 : layer_embedding_.value.rows() - 1;
  }
  std::size_t embedding_dim() const noexcept { return rank_embedding_.value.cols(); }
  std::size_t input_dim() const noexcept { return 1 + 2 * embedding_dim(); }

  PriorityMlp& g() noexcept { return g_; }
  PriorityMlp& f() noexcept { return f_; }
  const PriorityMlp& g() const noexcept { return g_; }
  const PriorityMlp& f() const noexcept { return f_; }
  ParamBlock& rank_embedding() noexcept { return rank_embedding_; }
  ParamBlock& layer_embedding() noexcept { return layer_embedding_; }
  const ParamBlock& rank_embedding() const noexcept { return rank_embedding_; }
  const ParamBlock& layer_embedding() const noexcept { return layer_embedding_; }

  std::vector<const ParamBlock*> blocks() const {
    return {&g_.w1, &g_.b1, &g_.w2, &g_.b2, &f_.w1, &f_.b1, &f_.w2, &f_.b2,
            &rank_embedding_, &layer_embedding_};
  }
  std::vector<ParamBlock*> mutable_blocks() {
    return {&g_.w1, &g_.b1, &g_.w2, &g_.b2, &f_.w1, &f_.b1, &f_.w2, &f_.b2,
            &rank_embedding_, &layer_embedding_};
  }

  std::size_t parameter_count() const { return ape::parameter_count(blocks()); }
  std::uint64_t content_hash() const { return ape::content_hash(blocks()); }

  /// Builds the MLP input [p, rank_emb[n], layer_emb[l]].
  std::vector<double> features(double p, std::size_t n, std::size_t l) const {
    if (n >= max_rank()) {
      throw ConfigError("scheduler: rank " + std::to_string(n) + " outside rank embedding table of " +
                        std::to_string(max_rank()) + " rows");
    }
    if (l > num_layers()) {
      throw ConfigError("scheduler: layer " + std::to_string(l) + " outside layer embedding table of " +
                        std::to_string(layer_embedding_.value.rows()) + " rows");
    }
    std::vector<double> x;
    x.reserve(input_dim());
    x.push_back(p);
    const auto re = rank_embedding_.value.row(n);
    const auto le = layer_embedding_.value.row(l);
    x.insert(x.end(), re.begin(), re.end());
    x.insert(x.end(), le.begin(), le.end());
    return x;
  }

 private:
  PriorityMlp g_, f_;
  ParamBlock rank_embedding_, layer_embedding_;
};

/// q = sigmoid(g) * p + f.
inline double combine_priority(double p, double g_out, double f_out) noexcept {
  return sigmoid(g_out) * p + f_out;
}

inline double priority(double p, std::size_t n, std::size_t l, const SchedulerParams& params) {
  const std::vector<double> x = params.features(p, n, l);
  return combine_priority(p, params.g().forward(x), params.f().forward(x));
}

/// Adds coeff * dq/dtheta for q = priority(p, n, l) into the parameter
/// gradients, including the rank and layer embedding rows. Returns q.
inline double accumulate_priority_gradient(double p, std::size_t n, std::size_t l, double coeff,
                                           SchedulerParams& params) {
  const std::vector<double> x = params.features(p, n, l);
  std::vector<double> g_hidden, f_hidden;
  const double g_out = params.g().forward(x, &g_hidden);
  const double f_out = params.f().forward(x, &f_hidden);
  const double s = sigmoid(g_out);
  std::vector<double> x_grad(x.size(), 0.0);
  params.g().backward(x, g_hidden, coeff * s * (1.0 - s) * p, x_grad);
  params.f().backward(x, f_hidden, coeff, x_grad);
  const std::size_t e = params.embedding_dim();
  for (std::size_t i = 0; i < e; ++i) {
    params.rank_embedding().grad(n, i) += x_grad[1 + i];
    params.layer_embedding().grad(l, i) += x_grad[1 + e + i];
  }
  return combine_priority(p, g_out, f_out);
}

// ---------------------------------------------------------------------------
// Episode configuration and trace
// ---------------------------------------------------------------------------

enum class Policy { argmax, softmax, round_robin, static_topk };

inline std::string to_string(Policy p) {
  switch (p) {
    case Policy::argmax: return "argmax";
    case Policy::softmax: return "softmax";
    case Policy::round_robin: return "round_robin";
    case Policy::static_topk: return "static_topk";
  }
  return "argmax";
}

inline Policy parse_policy(std::string_view s) {
  if (s == "argmax") return Policy::argmax;
  if (s == "softmax") return Policy::softmax;
  if (s == "round_robin") return Policy::round_robin;
  if (s == "static_topk") return Policy::static_topk;
  throw ConfigError("unknown policy '" + std::string(s) + "'");
}

struct BudgetConfig {
  std::int64_t budget = 0;  // B, layer-forward steps
  std::size_t k = 1;        // retained passages
  Policy policy = Policy::argmax;
  double temperature = 1.0;  // softmax policy only
  double step_cost = 0.1;    // c, used for trace rewards

  /// The default budget rule B = L * k.
  static BudgetConfig standard(std::size_t num_layers, std::size_t k) {
    BudgetConfig cfg;
    cfg.k = k;
    cfg.budget = static_cast<std::int64_t>(num_layers * k);
    return cfg;
  }
};

/// Reward for selecting a passage: 1 - c when it holds an answer, -c otherwise.
inline double step_reward(int label, double step_cost) {
  return label == 1 ? 1.0 - step_cost : -step_cost;
}

struct TraceStep {
  std::size_t t = 0;      // 1-based step index
  std::size_t rank = 0;   // chosen passage
  std::size_t layer = 0;  // its layer after the step
  double p = 0.0;         // its probability after the step
  double q = 0.0;         // its priority after the step
  double reward = 0.0;

  friend bool operator==(const TraceStep&, const TraceStep&) = default;
};

struct ScheduleTrace {
  std::vector<TraceStep> steps;
  std::size_t budget_used = 0;
  std::vector<std::size_t> retained;  // ranks, in retention order

  friend bool operator==(const ScheduleTrace&, const ScheduleTrace&) = default;
};

/// Per-passage scheduler state.
struct PassageComputeState {
  std::size_t rank = 0;
  std::size_t layer = 0;
  double p = 0.0;
  double q = 0.0;
  bool active = true;
};

/// One candidate seen by the policy at a decision point.
struct Candidate {
  std::size_t rank = 0;
  std::size_t layer = 0;
  double p = 0.0;
};

/// A decision point of a sampled episode: the active candidates in rank
/// order, the chosen index into that list and its log-probability.
struct DecisionRecord {
  std::vector<Candidate> candidates;
  std::size_t chosen = 0;
  double log_prob = 0.0;
};

struct ScheduleOutcome {
  ScheduleTrace trace;
  std::vector<PassageComputeState> passages;
  std::vector<DecisionRecord> decisions;  // filled for the softmax policy
};

/// Drives passages one layer at a time and reports their has-answer
/// probability.
template <typename S>
concept PassageStepper = requires(S s, const S cs, std::size_t n) {
  { cs.num_passages() } -> std::convertible_to<std::size_t>;
  { cs.num_layers() } -> std::convertible_to<std::size_t>;
  { cs.initial_prob(n) } -> std::convertible_to<double>;
  { s.advance(n) } -> std::convertible_to<double>;
};

/// Precomputed p for every (passage, layer); steps are table lookups.
class ProbabilityTable {
 public:
  ProbabilityTable() = default;
  explicit ProbabilityTable(std::vector<std::vector<double>> probs) : probs_(std::move(probs)) {
    for (const auto& row : probs_) {
      if (row.size() != layers_plus_one()) {
        throw DimensionError("ProbabilityTable: ragged rows");
      }
    }
  }

  std::size_t num_passages() const noexcept { return probs_.size(); }
  std::size_t num_layers() const noexcept { return probs_.empty() ? 0 : probs_[0].size() - 1; }
  double prob(std::size_t n, std::size_t l) const { return probs_.at(n).at(l); }
  const std::vector<std::vector<double>>& rows() const noexcept { return probs_; }

 private:
  std::size_t layers_plus_one() const noexcept { return probs_.empty() ? 0 : probs_[0].size(); }
  std::vector<std::vector<double>> probs_;
};

class TableStepper {
 public:
  explicit TableStepper(const ProbabilityTable& table)
      : table_(&table), layers_(table.num_passages(), 0) {}

  std::size_t num_passages() const noexcept { return table_->num_passages(); }
  std::size_t num_layers() const noexcept { return table_->num_layers(); }
  double initial_prob(std::size_t n) const { return table_->prob(n, 0); }
  double advance(std::size_t n) {
    if (layers_.at(n) >= num_layers()) {
      throw AlreadyCompleteError("TableStepper: passage " + std::to_string(n) + " is complete");
    }
    return table_->prob(n, ++layers_[n]);
  }

 private:
  const ProbabilityTable* table_;
  std::vector<std::size_t> layers_;
};

/// Runs the frozen encoder and HasAnswer head. Layer-0 states are built at
/// construction, outside the budget.
class EncoderStepper {
 public:
  EncoderStepper(const QuestionInstance& instance, const EncoderModel& encoder,
                 const HasAnswerModel& has_answer)
      : encoder_(&encoder), has_answer_(&has_answer) {
    states_.reserve(instance.passages.size());
    probs_.reserve(instance.passages.size());
    for (const auto& p : instance.passages) {
      states_.push_back(embed(instance.question, p.tokens, encoder, p.rank));
      probs_.push_back(has_answer_prob(states_.back(), has_answer));
    }
  }

  std::size_t num_passages() const noexcept { return states_.size(); }
  std::size_t num_layers() const noexcept { return encoder_->num_layers(); }
  double initial_prob(std::size_t n) const { return probs_.at(n); }
  double advance(std::size_t n) {
    states_.at(n) = forward_layer(states_[n], *encoder_);
    probs_[n] = has_answer_prob(states_[n], *has_answer_);
    return probs_[n];
  }
  const HiddenState& state(std::size_t n) const { return states_.at(n); }

 private:
  const EncoderModel* encoder_;
  const HasAnswerModel* has_answer_;
  std::vector<HiddenState> states_;
  std::vector<double> probs_;
};

/// Builds the (passage, layer) probability table for one question.
inline ProbabilityTable build_probability_table(const QuestionInstance& instance,
                                                const EncoderModel& encoder,
                                                const HasAnswerModel& has_answer) {
  std::vector<std::vector<double>> rows;
  rows.reserve(instance.passages.size());
  for (const auto& p : instance.passages) {
    std::vector<double> row;
    HiddenState h = embed(instance.question, p.tokens, encoder, p.rank);
    row.push_back(has_answer_prob(h, has_answer));
    while (h.layer_index < encoder.num_layers()) {
      h = forward_layer(h, encoder);
      row.push_back(has_answer_prob(h, has_answer));
    }
    rows.push_back(std::move(row));
  }
  return ProbabilityTable(std::move(rows));
}

/// Ranks of the k passages with the most layers; ties by higher p, then
/// lower rank.
inline std::vector<std::size_t> retain_top_k(std::span<const PassageComputeState> passages,
                                             std::size_t k) {
  std::vector<std::size_t> order(passages.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& pa = passages[a];
    const auto& pb = passages[b];
    if (pa.layer != pb.layer) return pa.layer > pb.layer;
    if (pa.p != pb.p) return pa.p > pb.p;
    return pa.rank < pb.rank;
  });
  order.resize(std::min(k, order.size()));
  std::vector<std::size_t> ranks;
  ranks.reserve(order.size());
  for (std::size_t i : order) ranks.push_back(passages[i].rank);
  return ranks;
}

namespace detail {

inline std::size_t select_passage(std::span<const PassageComputeState> passages, Policy policy,
                                  double temperature, Rng& rng, DecisionRecord* record) {
  std::size_t best = passages.size();
  switch (policy) {
    case Policy::argmax:
      for (std::size_t i = 0; i < passages.size(); ++i) {
        if (!passages[i].active) continue;
        if (best == passages.size() || passages[i].q > passages[best].q) best = i;
      }
      return best;
    case Policy::round_robin:
      for (std::size_t i = 0; i < passages.size(); ++i) {
        if (!passages[i].active) continue;
        if (best == passages.size() || passages[i].layer < passages[best].layer) best = i;
      }
      return best;
    case Policy::static_topk:
      for (std::size_t i = 0; i < passages.size(); ++i)
        if (passages[i].active) return i;
      return best;
    case Policy::softmax: {
      std::vector<std::size_t> active;
      std::vector<double> scores;
      for (std::size_t i = 0; i < passages.size(); ++i) {
        if (!passages[i].active) continue;
        active.push_back(i);
        scores.push_back(passages[i].q);
      }
      const std::vector<double> probs = softmax(scores, temperature);
      const std::size_t pick = rng.categorical(probs);
      if (record) {
        record->candidates.clear();
        for (std::size_t i : active) {
          record->candidates.push_back({passages[i].rank, passages[i].layer, passages[i].p});
        }
        record->chosen = pick;
        record->log_prob = (scores[pick] - *std::max_element(scores.begin(), scores.end())) /
                               temperature -
                           (log_sum_exp(scores, temperature) -
                            *std::max_element(scores.begin(), scores.end()) / temperature);
      }
      return active[pick];
    }
  }
  return best;
}

}  // namespace detail

/// The budgeted selection loop over any passage stepper. `labels` (one per
/// passage, may be empty) only feed the trace rewards.
template <PassageStepper S>
ScheduleOutcome run_schedule(S& stepper, const SchedulerParams& params, const BudgetConfig& cfg,
                             Rng& rng, std::span<const int> labels = {}) {
  const std::size_t n_passages = stepper.num_passages();
  const std::size_t num_layers = stepper.num_layers();
  if (cfg.budget < 0) throw ArgumentError("schedule: budget must be >= 0");
  if (cfg.k < 1 || cfg.k > n_passages) {
    throw ArgumentError("schedule: k=" + std::to_string(cfg.k) + " must lie in [1, " +
                        std::to_string(n_passages) + "]");
  }
  if (!labels.empty() && labels.size() != n_passages) {
    throw ArgumentError("schedule: label count does not match passage count");
  }
  if (cfg.policy == Policy::softmax && !(cfg.temperature > 0.0)) {
    throw ArgumentError("schedule: softmax temperature must be positive");
  }

  ScheduleOutcome out;
  out.passages.resize(n_passages);
  for (std::size_t n = 0; n < n_passages; ++n) {
    auto& s = out.passages[n];
    s.rank = n;
    s.layer = 0;
    s.p = stepper.initial_prob(n);
    s.q = priority(s.p, n, 0, params);
    s.active = num_layers > 0;
  }

  std::size_t remaining_active = num_layers > 0 ? n_passages : 0;
  const auto budget = static_cast<std::size_t>(cfg.budget);
  for (std::size_t t = 1; t <= budget && remaining_active > 0; ++t) {
    DecisionRecord record;
    const bool recording = cfg.policy == Policy::softmax;
    const std::size_t n =
        detail::select_passage(out.passages, cfg.policy, cfg.temperature, rng,
                               recording ? &record : nullptr);
    auto& s = out.passages[n];
    s.p = stepper.advance(n);
    ++s.layer;
    s.q = priority(s.p, n, s.layer, params);
    if (s.layer == num_layers) {
      s.active = false;
      --remaining_active;
    }
    const double r = labels.empty() ? 0.0 : step_reward(labels[n], cfg.step_cost);
    out.trace.steps.push_back(TraceStep{t, n, s.layer, s.p, s.q, r});
    if (recording) out.decisions.push_back(std::move(record));
  }
  out.trace.budget_used = out.trace.steps.size();
  out.trace.retained = retain_top_k(out.passages, cfg.k);
  return out;
}

inline std::vector<int> labels_of(const QuestionInstance& instance) {
  std::vector<int> labels;
  labels.reserve(instance.passages.size());
  for (const auto& p : instance.passages) labels.push_back(p.label);
  return labels;
}

struct ScheduleResult {
  std::vector<HiddenState> retained_states;  // in retention order
  ScheduleTrace trace;
  std::vector<PassageComputeState> passages;
};

/// Schedules one question with the real encoder and returns the retained
/// passages' current hidden states.
inline ScheduleResult schedule(const QuestionInstance& instance, const EncoderModel& encoder,
                               const HasAnswerModel& has_answer, const SchedulerParams& params,
                               const BudgetConfig& cfg, Rng& rng) {
  EncoderStepper stepper(instance, encoder, has_answer);
  const std::vector<int> labels = labels_of(instance);
  ScheduleOutcome outcome = run_schedule(stepper, params, cfg, rng, labels);
  ScheduleResult result;
  for (std::size_t n : outcome.trace.retained) result.retained_states.push_back(stepper.state(n));
  result.trace = std::move(outcome.trace);
  result.passages = std::move(outcome.passages);
  return result;
}

// ---------------------------------------------------------------------------
// Trace export
// ---------------------------------------------------------------------------
//
// One line per step: t<TAB>n<TAB>l<TAB>p<TAB>q<TAB>r, doubles printed with 17
// significant digits, then a final line: retained<TAB><space-separated ranks>.

inline std::string format_trace(const ScheduleTrace& trace) {
  std::ostringstream out;
  out << std::setprecision(17);
  for (const auto& s : trace.steps) {
    out << s.t << '\t' << s.rank << '\t' << s.layer << '\t' << s.p << '\t' << s.q << '\t'
        << s.reward << '\n';
  }
  out << "retained\t";
  for (std::size_t i = 0; i < trace.retained.size(); ++i) {
    if (i) out << ' ';
    out << trace.retained[i];
  }
  out << '\n';
  return out.str();
}

/// Parses format_trace output back into a trace (budget_used = step count).
inline ScheduleTrace parse_trace(std::string_view text) {
  ScheduleTrace trace;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  bool saw_retained = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.rfind("retained\t", 0) == 0) {
      std::istringstream ranks(line.substr(9));
      std::size_t r;
      while (ranks >> r) trace.retained.push_back(r);
      saw_retained = true;
      continue;
    }
    std::istringstream fields(line);
    TraceStep s;
    if (!(fields >> s.t >> s.rank >> s.layer >> s.p >> s.q >> s.reward)) {
      throw ParseError("malformed trace step", line_no, 0);
    }
    trace.steps.push_back(s);
  }
  if (!saw_retained) throw ParseError("trace lacks retained line", line_no, 0);
  trace.budget_used = trace.steps.size();
  return trace;
}

}  // namespace ape
