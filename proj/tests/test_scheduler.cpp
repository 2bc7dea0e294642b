#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "ape/datagen.hpp"
#include "ape/policy_training.hpp"
#include "ape/scheduler.hpp"

using namespace ape;

namespace {

ProbabilityTable random_table(Rng& rng, std::size_t n, std::size_t layers) {
  std::vector<std::vector<double>> rows(n, std::vector<double>(layers + 1));
  for (auto& r : rows)
    for (auto& v : r) v = 0.01 + 0.98 * rng.uniform();
  return ProbabilityTable(std::move(rows));
}

SchedulerParams random_params(std::size_t n, std::size_t layers, std::uint64_t seed) {
  SchedulerParams p = SchedulerParams::random_init(n, layers, seed);
  Rng rng(seed + 1);
  fill_normal(p.g().w2.value, rng, 0.3);
  fill_normal(p.f().w2.value, rng, 0.3);
  return p;
}

Policy policy_at(std::size_t i) {
  constexpr Policy all[] = {Policy::argmax, Policy::softmax, Policy::round_robin, Policy::static_topk};
  return all[i % 4];
}

}  // namespace

TEST(Priority, ZeroParamsGiveHalfP) {
  const SchedulerParams zero(5, 3);
  for (double p : {0.01, 0.3, 0.99}) EXPECT_EQ(priority(p, 2, 1, zero), 0.5 * p);
}

TEST(Priority, AnalyticExampleWithFixedMlpOutputs) {
  SchedulerParams params(4, 2);
  params.g().b2.value(0, 0) = 2.0;
  params.f().b2.value(0, 0) = 0.3;
  EXPECT_NEAR(priority(0.7, 1, 1, params), 0.8807970779778823 * 0.7 + 0.3, 1e-15);
  EXPECT_NEAR(priority(0.7, 1, 1, params), 0.9165579546, 1e-10);
}

TEST(Priority, SaturatedGateAndZeroBiasGiveP) {
  SchedulerParams params(4, 2);
  params.g().b2.value(0, 0) = 30.0;
  for (double p : {0.05, 0.5, 0.95}) EXPECT_NEAR(priority(p, 0, 0, params), p, 1e-12);
}

TEST(Priority, InputDimensionIs33) {
  const SchedulerParams params(20, 6);
  EXPECT_EQ(params.input_dim(), 33u);
  EXPECT_EQ(params.g().w1.value.rows(), 33u);
  EXPECT_EQ(params.f().w1.value.cols(), 64u);
  EXPECT_EQ(params.layer_embedding().value.rows(), 7u);
}

TEST(Priority, RankOrLayerOutsideTableIsConfigError) {
  const SchedulerParams params(3, 2);
  EXPECT_THROW(priority(0.5, 3, 0, params), ConfigError);
  EXPECT_THROW(priority(0.5, 0, 3, params), ConfigError);
}

TEST(StepReward, ReferenceValues) {
  EXPECT_DOUBLE_EQ(step_reward(1, 0.1), 0.9);
  EXPECT_DOUBLE_EQ(step_reward(0, 0.1), -0.1);
  EXPECT_DOUBLE_EQ(step_reward(1, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(step_reward(0, 0.0), 0.0);
}

TEST(Schedule, ArgumentErrors) {
  Rng rng(1);
  const ProbabilityTable table = random_table(rng, 3, 2);
  const SchedulerParams params(3, 2);
  BudgetConfig cfg;
  cfg.k = 4;
  cfg.budget = 3;
  TableStepper s1(table);
  EXPECT_THROW(run_schedule(s1, params, cfg, rng), ArgumentError);
  cfg.k = 0;
  TableStepper s2(table);
  EXPECT_THROW(run_schedule(s2, params, cfg, rng), ArgumentError);
  cfg.k = 1;
  cfg.budget = -1;
  TableStepper s3(table);
  EXPECT_THROW(run_schedule(s3, params, cfg, rng), ArgumentError);
}

TEST(Schedule, ZeroBudgetRetainsByLayerZeroProbabilityThenRank) {
  const ProbabilityTable table({{0.2, 0.9}, {0.7, 0.1}, {0.5, 0.5}, {0.7, 0.3}});
  const SchedulerParams params(4, 1);
  BudgetConfig cfg;
  cfg.budget = 0;
  cfg.k = 2;
  Rng rng(0);
  TableStepper stepper(table);
  const auto out = run_schedule(stepper, params, cfg, rng);
  EXPECT_TRUE(out.trace.steps.empty());
  EXPECT_EQ(out.trace.retained, (std::vector<std::size_t>{1, 3}));
  for (const auto& s : out.passages) EXPECT_EQ(s.layer, 0u);

  // Equal probabilities reduce the chain to the k lowest ranks.
  const ProbabilityTable flat({{0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}});
  TableStepper flat_stepper(flat);
  EXPECT_EQ(run_schedule(flat_stepper, params, cfg, rng).trace.retained, (std::vector<std::size_t>{0, 1}));
}

TEST(Schedule, ArgmaxMatchesBruteForceStepSimulation) {
  // N = 3, L = 2, B = 3 with a fixed p per (n, l).
  const std::vector<std::vector<double>> p{{0.6, 0.3, 0.8}, {0.5, 0.9, 0.2}, {0.55, 0.55, 0.95}};
  const ProbabilityTable table(p);
  Rng prng(3);
  for (int variant = 0; variant < 20; ++variant) {
    const SchedulerParams params =
        variant == 0 ? SchedulerParams(3, 2) : random_params(3, 2, static_cast<std::uint64_t>(variant));
    // Oracle: explicit loop over the three steps.
    std::size_t layer[3] = {0, 0, 0};
    std::vector<TraceStep> expected;
    for (std::size_t t = 1; t <= 3; ++t) {
      std::size_t best = 3;
      double best_q = 0.0;
      for (std::size_t n = 0; n < 3; ++n) {
        if (layer[n] == 2) continue;
        const double q = priority(p[n][layer[n]], n, layer[n], params);
        if (best == 3 || q > best_q) {
          best = n;
          best_q = q;
        }
      }
      ++layer[best];
      const double pn = p[best][layer[best]];
      expected.push_back({t, best, layer[best], pn, priority(pn, best, layer[best], params), 0.0});
    }
    BudgetConfig cfg;
    cfg.budget = 3;
    cfg.k = 1;
    TableStepper stepper(table);
    const auto out = run_schedule(stepper, params, cfg, prng);
    EXPECT_EQ(out.trace.steps, expected) << "variant " << variant;
    EXPECT_EQ(out.trace.budget_used, 3u);
  }
}

TEST(Schedule, ZeroParamsEqualGreedyOnP) {
  Rng rng(5);
  const SchedulerParams zero(8, 4);
  for (int trial = 0; trial < 50; ++trial) {
    const ProbabilityTable table = random_table(rng, 8, 4);
    const std::int64_t budget = static_cast<std::int64_t>(rng.uniform_index(40));
    BudgetConfig cfg;
    cfg.budget = budget;
    cfg.k = 3;
    TableStepper stepper(table);
    const auto out = run_schedule(stepper, zero, cfg, rng);
    // Greedy on p: highest current p among unfinished passages, lowest rank on ties.
    std::vector<std::size_t> layer(8, 0);
    std::vector<std::size_t> chosen;
    for (std::int64_t t = 0; t < budget; ++t) {
      std::size_t best = 8;
      for (std::size_t n = 0; n < 8; ++n) {
        if (layer[n] == 4) continue;
        if (best == 8 || table.prob(n, layer[n]) > table.prob(best, layer[best])) best = n;
      }
      if (best == 8) break;
      ++layer[best];
      chosen.push_back(best);
    }
    std::vector<std::size_t> got;
    for (const auto& s : out.trace.steps) got.push_back(s.rank);
    EXPECT_EQ(got, chosen);
  }
}

TEST(Schedule, BudgetConservationUnderEveryPolicy) {
  Rng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.uniform_index(10);
    const std::size_t layers = 1 + rng.uniform_index(6);
    const std::int64_t budget = static_cast<std::int64_t>(rng.uniform_index(81));
    const ProbabilityTable table = random_table(rng, n, layers);
    const SchedulerParams params = random_params(n, layers, static_cast<std::uint64_t>(trial));
    BudgetConfig cfg;
    cfg.budget = budget;
    cfg.k = 1 + rng.uniform_index(n);
    cfg.policy = policy_at(static_cast<std::size_t>(trial));
    TableStepper stepper(table);
    const auto out = run_schedule(stepper, params, cfg, rng);
    std::size_t total = 0;
    for (const auto& s : out.passages) {
      total += s.layer;
      EXPECT_EQ(s.active, s.layer < layers);
    }
    const std::size_t expected = std::min<std::size_t>(static_cast<std::size_t>(budget), n * layers);
    ASSERT_EQ(total, expected) << "trial " << trial;
    ASSERT_EQ(out.trace.budget_used, expected);
  }
}

TEST(Schedule, IncrementalPrioritiesEqualRecomputedOnes) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const ProbabilityTable table = random_table(rng, 6, 4);
    const SchedulerParams params = random_params(6, 4, static_cast<std::uint64_t>(100 + trial));
    for (std::int64_t b = 0; b <= 24; b += 3) {
      BudgetConfig cfg;
      cfg.budget = b;
      cfg.k = 2;
      TableStepper stepper(table);
      const auto out = run_schedule(stepper, params, cfg, rng);
      for (const auto& s : out.passages) {
        EXPECT_LE(std::abs(s.q - priority(table.prob(s.rank, s.layer), s.rank, s.layer, params)), 1e-15);
      }
    }
  }
}

TEST(Schedule, EachStepAdvancesOnePassageByOneLayer) {
  Rng rng(10);
  const ProbabilityTable table = random_table(rng, 5, 3);
  const SchedulerParams params = random_params(5, 3, 4);
  BudgetConfig cfg;
  cfg.budget = 15;
  cfg.k = 2;
  TableStepper stepper(table);
  const auto out = run_schedule(stepper, params, cfg, rng);
  std::vector<std::size_t> layer(5, 0);
  for (const auto& s : out.trace.steps) {
    EXPECT_EQ(s.layer, layer[s.rank] + 1);
    layer[s.rank] = s.layer;
    EXPECT_EQ(s.p, table.prob(s.rank, s.layer));
  }
}

TEST(Schedule, RetentionIsLexicographicTopK) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(8);
    const ProbabilityTable table = random_table(rng, n, 3);
    BudgetConfig cfg;
    cfg.budget = static_cast<std::int64_t>(rng.uniform_index(3 * n + 1));
    cfg.k = 1 + rng.uniform_index(n);
    cfg.policy = policy_at(static_cast<std::size_t>(trial));
    TableStepper stepper(table);
    const auto out = run_schedule(stepper, random_params(n, 3, 5), cfg, rng);
    std::vector<PassageComputeState> sorted = out.passages;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
      return std::tuple(-static_cast<long>(a.layer), -a.p, a.rank) <
             std::tuple(-static_cast<long>(b.layer), -b.p, b.rank);
    });
    std::vector<std::size_t> expected;
    for (std::size_t i = 0; i < cfg.k; ++i) expected.push_back(sorted[i].rank);
    EXPECT_EQ(out.trace.retained, expected);
  }
}

TEST(Schedule, RoundRobinAndStaticTopKBehaveAsDocumented) {
  Rng rng(12);
  const ProbabilityTable table = random_table(rng, 5, 3);
  const SchedulerParams params(5, 3);
  BudgetConfig cfg;
  cfg.budget = 7;
  cfg.k = 2;
  cfg.policy = Policy::round_robin;
  TableStepper rr(table);
  std::vector<std::size_t> ranks;
  for (const auto& s : run_schedule(rr, params, cfg, rng).trace.steps) ranks.push_back(s.rank);
  EXPECT_EQ(ranks, (std::vector<std::size_t>{0, 1, 2, 3, 4, 0, 1}));

  cfg.policy = Policy::static_topk;
  TableStepper st(table);
  const auto out = run_schedule(st, params, cfg, rng);
  ranks.clear();
  for (const auto& s : out.trace.steps) ranks.push_back(s.rank);
  EXPECT_EQ(ranks, (std::vector<std::size_t>{0, 0, 0, 1, 1, 1, 2}));
  EXPECT_EQ(out.trace.retained, (std::vector<std::size_t>{0, 1}));
}

TEST(Schedule, ArgmaxIsDeterministic) {
  Rng rng(13);
  const ProbabilityTable table = random_table(rng, 10, 6);
  const SchedulerParams params = random_params(10, 6, 8);
  BudgetConfig cfg = BudgetConfig::standard(6, 3);
  TableStepper a(table), b(table);
  Rng r1(1), r2(2);
  EXPECT_EQ(format_trace(run_schedule(a, params, cfg, r1).trace),
            format_trace(run_schedule(b, params, cfg, r2).trace));
}

TEST(Schedule, UnrestrictedBudgetReproducesFullEncoding) {
  GenConfig g;
  g.num_questions = 3;
  g.passages_per_question = 5;
  const Dataset data = generate(g);
  const EncoderModel enc(EncoderConfig{});
  const HasAnswerModel ha(enc.model_dim(), 16, Pooling::max, 3);
  const SchedulerParams params = random_params(5, enc.num_layers(), 2);
  for (const auto& q : data) {
    BudgetConfig cfg;
    cfg.k = 5;
    cfg.budget = static_cast<std::int64_t>(5 * enc.num_layers());
    Rng rng(1);
    const ScheduleResult r = schedule(q, enc, ha, params, cfg, rng);
    ASSERT_EQ(r.retained_states.size(), 5u);
    for (const auto& h : r.retained_states) {
      const auto& p = q.passages[h.passage_index];
      EXPECT_EQ(h.layer_index, enc.num_layers());
      EXPECT_EQ(h.activations, encode_full(q.question, p.tokens, enc).activations);
    }
  }
}

TEST(Schedule, EncoderAndTableSteppersProduceTheSameTrace) {
  GenConfig g;
  g.num_questions = 2;
  const Dataset data = generate(g);
  const EncoderModel enc(EncoderConfig{});
  const HasAnswerModel ha(enc.model_dim(), 16, Pooling::max, 4);
  const SchedulerParams params = random_params(20, enc.num_layers(), 3);
  for (const auto& q : data) {
    const BudgetConfig cfg = BudgetConfig::standard(enc.num_layers(), 3);
    Rng r1(0), r2(0);
    const ScheduleResult real = schedule(q, enc, ha, params, cfg, r1);
    const ProbabilityTable table = build_probability_table(q, enc, ha);
    TableStepper stepper(table);
    const std::vector<int> labels = labels_of(q);
    EXPECT_EQ(run_schedule(stepper, params, cfg, r2, labels).trace, real.trace);
  }
}

TEST(Trace, FormatIsTabSeparatedAndRoundTrips) {
  ScheduleTrace t;
  t.steps.push_back({1, 2, 1, 0.25, 0.125, 0.9});
  t.steps.push_back({2, 0, 1, 0.5, 0.3, -0.1});
  t.budget_used = 2;
  t.retained = {2, 0};
  const std::string text = format_trace(t);
  EXPECT_EQ(text, "1\t2\t1\t0.25\t0.125\t0.90000000000000002\n"
                  "2\t0\t1\t0.5\t0.29999999999999999\t-0.10000000000000001\n"
                  "retained\t2 0\n");
  EXPECT_EQ(parse_trace(text), t);
}

TEST(Trace, MalformedTraceIsRejected) {
  EXPECT_THROW(parse_trace("1\t2\n"), ParseError);
  EXPECT_THROW(parse_trace("1\t2\t1\t0.5\t0.5\t0.9\n"), ParseError);
}
