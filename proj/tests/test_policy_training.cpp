#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "ape/answerability.hpp"
#include "ape/datagen.hpp"
#include "ape/harness.hpp"
#include "ape/policy_training.hpp"
#include "synthetic_tables.hpp"

using namespace ape;
using ape::testing::synthetic_tables;

namespace {

SchedulerParams nonzero_params(std::size_t n, std::size_t layers, std::uint64_t seed) {
  SchedulerParams p = SchedulerParams::random_init(n, layers, seed);
  Rng rng(seed + 7);
  fill_normal(p.g().w2.value, rng, 0.3);
  fill_normal(p.f().w2.value, rng, 0.3);
  return p;
}

double mean_return(const ape::testing::SyntheticTables& data, const SchedulerParams& params,
                   const RLConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  double total = 0.0;
  for (std::size_t i = 0; i < data.tables.size(); ++i) {
    const Episode ep = sample_episode(data.tables[i], data.labels[i], params, cfg, rng);
    const auto g = discounted_returns(ep.rewards(), cfg.gamma);
    total += g.empty() ? 0.0 : g[0];
  }
  return total / static_cast<double>(data.tables.size());
}

}  // namespace

TEST(Returns, HandSummedExample) {
  const std::vector<double> r{0.9, -0.1, 0.9};
  const auto g = discounted_returns(r, 0.8);
  ASSERT_EQ(g.size(), 3u);
  EXPECT_NEAR(g[0], 1.396, 1e-12);
  EXPECT_NEAR(g[1], -0.1 + 0.8 * 0.9, 1e-12);
  EXPECT_DOUBLE_EQ(g[2], 0.9);
}

TEST(Returns, GammaZeroIsMyopic) {
  const std::vector<double> r{0.3, -1.0, 2.5, 0.0};
  EXPECT_EQ(discounted_returns(r, 0.0), r);
}

TEST(Returns, ZeroRewardsAndEmpty) {
  EXPECT_EQ(discounted_returns(std::vector<double>(5, 0.0), 0.8), std::vector<double>(5, 0.0));
  EXPECT_TRUE(discounted_returns(std::vector<double>{}, 0.8).empty());
}

TEST(Returns, LinearInRewards) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> r(1 + rng.uniform_index(30));
    for (auto& v : r) v = rng.normal();
    const double a = rng.normal() * 3.0;
    const double gamma = rng.uniform();
    std::vector<double> scaled(r);
    for (auto& v : scaled) v *= a;
    const auto g = discounted_returns(r, gamma);
    const auto gs = discounted_returns(scaled, gamma);
    for (std::size_t t = 0; t < r.size(); ++t) EXPECT_NEAR(gs[t], a * g[t], 1e-10 * (1.0 + std::abs(a * g[t])));
  }
}

TEST(Returns, GammaOutsideUnitIntervalThrows) {
  const std::vector<double> r{1.0};
  EXPECT_THROW(discounted_returns(r, -0.1), ArgumentError);
  EXPECT_THROW(discounted_returns(r, 1.5), ArgumentError);
}

TEST(RLConfig, DefaultsAndValidation) {
  RLConfig c;
  EXPECT_DOUBLE_EQ(c.gamma, 0.8);
  EXPECT_DOUBLE_EQ(c.step_cost, 0.1);
  EXPECT_DOUBLE_EQ(c.learning_rate, 0.01);
  EXPECT_EQ(c.batch_size, 24u);
  EXPECT_EQ(c.epochs, 1u);
  EXPECT_EQ(c.max_steps, 240u);
  EXPECT_NO_THROW(c.validate());
  c.temperature = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RLConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RLConfig{};
  c.gamma = 1.1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_baseline("ema"), ConfigError);
}

TEST(Episode, LogProbabilitiesRecomputable) {
  auto data = synthetic_tables(5, 6, 3, 11);
  const SchedulerParams params = nonzero_params(6, 3, 5);
  RLConfig cfg;
  Rng rng(2);
  for (std::size_t i = 0; i < data.tables.size(); ++i) {
    const Episode ep = sample_episode(data.tables[i], data.labels[i], params, cfg, rng);
    ASSERT_EQ(ep.decisions.size(), ep.trace.steps.size());
    for (const auto& d : ep.decisions) {
      EXPECT_NEAR(d.log_prob, log_policy(d, params, cfg.temperature), 1e-12);
      for (const auto& c : d.candidates) EXPECT_EQ(c.p, data.tables[i].prob(c.rank, c.layer));
    }
  }
}

TEST(Reinforce, ZeroAdvantageLeavesParamsUnchanged) {
  auto data = synthetic_tables(1, 5, 3, 1);
  SchedulerParams params = nonzero_params(5, 3, 9);
  RLConfig cfg;
  Rng rng(4);
  std::vector<Episode> batch{sample_episode(data.tables[0], data.labels[0], params, cfg, rng)};
  const auto g = discounted_returns(batch[0].rewards(), cfg.gamma);
  ReturnBaseline baseline(BaselineKind::moving_average, 0.9);
  for (std::size_t t = 0; t < g.size(); ++t) baseline.set(t, g[t]);
  Adam adam({cfg.learning_rate, 0.9, 0.999, 1e-8});
  const std::uint64_t before = params.content_hash();
  const BatchStats stats = reinforce_update(batch, params, cfg, adam, baseline);
  EXPECT_EQ(stats.grad_norm, 0.0);
  EXPECT_EQ(params.content_hash(), before);
}

TEST(Reinforce, TwoCandidateGradientMatchesFiniteDifferences) {
  SchedulerParams params = nonzero_params(2, 2, 21);
  DecisionRecord d;
  d.candidates = {{0, 1, 0.35}, {1, 0, 0.8}};
  d.chosen = 1;
  const double tau = 0.7, eps = 1e-6;
  auto blocks = params.mutable_blocks();
  zero_grads(blocks);
  accumulate_log_policy_gradient(d, tau, 1.0, params);
  std::size_t checked = 0;
  for (ParamBlock* b : blocks) {
    for (std::size_t i = 0; i < b->value.size(); ++i) {
      const double saved = b->value.data()[i];
      b->value.data()[i] = saved + eps;
      const double up = log_policy(d, params, tau);
      b->value.data()[i] = saved - eps;
      const double down = log_policy(d, params, tau);
      b->value.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      EXPECT_LT(relative_error(b->grad.data()[i], numeric), 1e-4) << b->name << "[" << i << "]";
      ++checked;
    }
  }
  EXPECT_GT(checked, 2000u);
}

TEST(Reinforce, RandomizedLogPolicyGradients) {
  const GradcheckResult r = gradcheck_log_policy(77, 20);
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_entry;
  EXPECT_GT(r.entries_checked, 0u);
}

TEST(Reinforce, StaleEpisodeRejected) {
  auto data = synthetic_tables(2, 4, 2, 5);
  SchedulerParams params = nonzero_params(4, 2, 3);
  RLConfig cfg;
  Rng rng(1);
  std::vector<Episode> batch{sample_episode(data.tables[0], data.labels[0], params, cfg, rng),
                             sample_episode(data.tables[1], data.labels[1], params, cfg, rng)};
  params.f().b2.value(0, 0) += 1e-3;
  Adam adam({cfg.learning_rate, 0.9, 0.999, 1e-8});
  ReturnBaseline baseline(cfg.baseline, cfg.baseline_decay);
  EXPECT_THROW(reinforce_update(batch, params, cfg, adam, baseline), StaleEpisodeError);
}

TEST(Reinforce, EmptyBatchRejected) {
  SchedulerParams params(4, 2);
  RLConfig cfg;
  Adam adam({cfg.learning_rate, 0.9, 0.999, 1e-8});
  ReturnBaseline baseline;
  EXPECT_THROW(reinforce_update(std::span<const Episode>{}, params, cfg, adam, baseline), ArgumentError);
}

TEST(Reinforce, TemperatureLimitConcentratesOnArgmax) {
  const ProbabilityTable table({{0.2, 0.2}, {0.6, 0.6}, {0.5, 0.5}, {0.1, 0.1}});
  const SchedulerParams zero(4, 1);
  BudgetConfig bc;
  bc.budget = 1;
  bc.k = 1;
  bc.policy = Policy::softmax;
  bc.temperature = 1e-3;
  Rng rng(8);
  const int trials = 20000;
  int hits = 0;
  for (int i = 0; i < trials; ++i) {
    TableStepper st(table);
    hits += run_schedule(st, zero, bc, rng).trace.steps.at(0).rank == 1 ? 1 : 0;
  }
  EXPECT_GT(static_cast<double>(hits) / trials, 0.999);
}

TEST(Reinforce, StepCostOneBoundsReturns) {
  auto data = synthetic_tables(30, 6, 3, 17);
  const SchedulerParams params = nonzero_params(6, 3, 2);
  RLConfig cfg;
  cfg.step_cost = 1.0;
  Rng rng(5);
  for (std::size_t i = 0; i < data.tables.size(); ++i) {
    const Episode ep = sample_episode(data.tables[i], data.labels[i], params, cfg, rng);
    ASSERT_EQ(ep.trace.steps.size(), 18u);  // max_steps above N*L, so every layer is run
    double expected = 0.0, discount = 1.0;
    for (const auto& s : ep.trace.steps) {
      EXPECT_LE(s.reward, 0.0);
      if (data.labels[i][s.rank] == 0) expected -= discount;
      discount *= cfg.gamma;
    }
    EXPECT_NEAR(discounted_returns(ep.rewards(), cfg.gamma)[0], expected, 1e-12);
  }
}

TEST(TrainScheduler, ImprovesHeldOutReturn) {
  const auto train = synthetic_tables(400, 8, 4, 100);
  const auto held_out = synthetic_tables(200, 8, 4, 200);
  RLConfig cfg;
  cfg.seed = 12;
  cfg.max_steps = 16;
  cfg.epochs = 2;
  const SchedulerParams init = initial_scheduler_params(8, 4, 33);
  const double before = mean_return(held_out, init, cfg, 99);
  const auto result = train_scheduler_on_tables(train.tables, train.labels, init, cfg);
  const double after = mean_return(held_out, result.params, cfg, 99);
  EXPECT_GT(after, before);
}

TEST(TrainScheduler, SmoothedCurveNonDecreasing) {
  const auto train = synthetic_tables(480, 8, 4, 300);
  RLConfig cfg;
  cfg.max_steps = 16;
  cfg.epochs = 3;
  constexpr std::size_t kWindows = 4;
  std::vector<std::vector<double>> window_means(kWindows);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    cfg.seed = seed;
    const auto result =
        train_scheduler_on_tables(train.tables, train.labels, initial_scheduler_params(8, 4, seed + 50), cfg);
    const std::size_t per = result.curve.size() / kWindows;
    ASSERT_GT(per, 0u);
    for (std::size_t w = 0; w < kWindows; ++w) {
      double s = 0.0;
      for (std::size_t i = w * per; i < (w + 1) * per; ++i) s += result.curve[i].mean_return;
      window_means[w].push_back(s / static_cast<double>(per));
    }
  }
  for (std::size_t w = 1; w < kWindows; ++w) {
    EXPECT_GE(median(window_means[w]), median(window_means[w - 1])) << "window " << w;
  }
}

TEST(TrainScheduler, DeterministicGivenSeed) {
  const auto train = synthetic_tables(60, 6, 3, 7);
  RLConfig cfg;
  cfg.seed = 4;
  const auto a = train_scheduler_on_tables(train.tables, train.labels, initial_scheduler_params(6, 3, 1), cfg);
  const auto b = train_scheduler_on_tables(train.tables, train.labels, initial_scheduler_params(6, 3, 1), cfg);
  EXPECT_EQ(a.params.content_hash(), b.params.content_hash());
  EXPECT_EQ(format_learning_curve(a.curve), format_learning_curve(b.curve));
}

TEST(TrainScheduler, DivergenceDetected) {
  const auto train = synthetic_tables(48 * 12, 6, 3, 8);
  RLConfig cfg;
  cfg.baseline = BaselineKind::none;
  cfg.grad_norm_ceiling = 1e-12;
  try {
    train_scheduler_on_tables(train.tables, train.labels, initial_scheduler_params(6, 3, 1), cfg);
    FAIL() << "expected TrainingDivergedError";
  } catch (const TrainingDivergedError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("ceiling"), std::string::npos);
    EXPECT_NE(msg.find("scheduler.g.w1"), std::string::npos);
  }
  cfg.divergence_patience = 1000;
  EXPECT_NO_THROW(
      train_scheduler_on_tables(train.tables, train.labels, initial_scheduler_params(6, 3, 1), cfg));
}

TEST(TrainScheduler, LearningCurveCsv) {
  const std::vector<LearningCurvePoint> curve{{0, 0.5, 12.0, 0.25}};
  const std::string csv = format_learning_curve(curve);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "batch,mean_return,mean_len,grad_norm");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
}

TEST(TrainScheduler, FrozenBaseUnchanged) {
  GenConfig g;
  g.num_questions = 40;
  g.passages_per_question = 6;
  g.seed = 3;
  const Dataset data = generate(g);
  EncoderConfig ec;
  ec.num_layers = 2;
  ec.model_dim = 16;
  ec.num_heads = 2;
  ec.ffn_dim = 32;
  const EncoderModel encoder(ec);
  HasAnswerTrainConfig hc;
  hc.epochs = 1;
  const auto ha = train_has_answer(data, encoder, hc);
  const auto enc_ckpt = serialize_checkpoint(encoder.blocks());
  const auto ha_ckpt = serialize_checkpoint(ha.model.blocks());
  RLConfig cfg;
  cfg.max_steps = 12;
  const auto result = train_scheduler(data, encoder, ha.model, cfg, 6);
  EXPECT_EQ(serialize_checkpoint(encoder.blocks()), enc_ckpt);
  EXPECT_EQ(serialize_checkpoint(ha.model.blocks()), ha_ckpt);
  EXPECT_FALSE(result.curve.empty());
}
