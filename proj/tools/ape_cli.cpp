// ape: data generation, training, evaluation and tracing for adaptive
// passage encoding.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ape/harness.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonOptions& opts, bool seed_required) {
  cmd->add_option("--config", opts.config_path, "flat key = value run configuration");
  cmd->add_option("--set", opts.overrides, "override one setting, key=value (repeatable)");
  auto* seed = cmd->add_option("--seed", opts.seed, "run seed");
  if (seed_required) seed->required();
}

ape::RunConfig load(const CommonOptions& opts) {
  ape::RunConfig cfg = ape::load_run_config(opts.config_path, opts.overrides);
  cfg.seed = opts.seed;
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  ape::ensure_parent_dir(path);
  ape::write_file_bytes(path, text);
}

std::string hex(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

int cmd_gen_data(const CommonOptions& opts) {
  ape::RunConfig cfg = load(opts);
  if (opts.seed) cfg.data.seed = *opts.seed;
  const ape::Dataset train = ape::generate(ape::train_gen_config(cfg));
  const ape::Dataset test = ape::generate(ape::test_gen_config(cfg));
  ape::ensure_parent_dir(cfg.paths.train_data);
  ape::ensure_parent_dir(cfg.paths.test_data);
  ape::write_dataset(train, cfg.paths.train_data);
  ape::write_dataset(test, cfg.paths.test_data);
  std::cout << "wrote " << train.size() << " questions to " << cfg.paths.train_data << " and "
            << test.size() << " to " << cfg.paths.test_data << '\n';
  return kExitOk;
}

int cmd_train_hasanswer(const CommonOptions& opts) {
  const ape::RunConfig cfg = load(opts);
  const ape::Dataset train = ape::read_dataset(cfg.paths.train_data);
  const ape::EncoderModel encoder(cfg.encoder);
  ape::save_blocks(cfg.paths.encoder, encoder.blocks());
  const auto result = ape::train_has_answer(train, encoder, ape::has_answer_config(cfg, *opts.seed));
  ape::save_blocks(cfg.paths.has_answer, result.model.blocks());
  std::cout << std::setprecision(6) << "epoch,train_loss,heldout_loss,heldout_auc\n"
            << "init,," << result.initial_heldout_loss << ',' << result.initial_heldout_auc << '\n';
  for (const auto& e : result.log) {
    std::cout << e.epoch << ',' << e.train_loss << ',' << e.heldout_loss << ',' << e.heldout_auc << '\n';
  }
  std::cout << "encoder " << cfg.paths.encoder << " hash " << hex(encoder.content_hash()) << '\n'
            << "hasanswer " << cfg.paths.has_answer << " hash " << hex(result.model.content_hash()) << '\n';
  return kExitOk;
}

struct FrozenModels {
  ape::EncoderModel encoder;
  ape::HasAnswerModel has_answer;
};

FrozenModels load_frozen(const ape::RunConfig& cfg) {
  ape::EncoderModel encoder = ape::load_encoder(cfg.paths.encoder, cfg.encoder);
  ape::HasAnswerModel ha = ape::load_has_answer(cfg.paths.has_answer, encoder.model_dim(), cfg.has_answer);
  return {std::move(encoder), std::move(ha)};
}

int cmd_train_scheduler(const CommonOptions& opts) {
  const ape::RunConfig cfg = load(opts);
  const FrozenModels models = load_frozen(cfg);
  const ape::Dataset train = ape::read_dataset(cfg.paths.train_data);
  const std::uint64_t enc_hash = models.encoder.content_hash();
  const std::uint64_t ha_hash = models.has_answer.content_hash();

  const auto tables = ape::build_probability_tables(train, models.encoder, models.has_answer);
  std::vector<std::vector<int>> labels;
  for (const auto& q : train) labels.push_back(ape::labels_of(q));
  ape::SchedulerParams init = ape::initial_scheduler_params(
      cfg.data.passages_per_question, cfg.encoder.num_layers,
      ape::stage_seed(*opts.seed, ape::kStageSchedulerInit), cfg.rl.init_embedding_std);
  const auto result =
      ape::train_scheduler_on_tables(tables, labels, std::move(init), ape::rl_config(cfg, *opts.seed));
  if (models.encoder.content_hash() != enc_hash || models.has_answer.content_hash() != ha_hash) {
    std::cerr << "error: frozen model parameters changed during scheduler training\n";
    return kExitFailure;
  }
  ape::save_blocks(cfg.paths.scheduler, result.params.blocks());
  write_text(cfg.paths.curve, ape::format_learning_curve(result.curve));
  std::cout << "scheduler " << cfg.paths.scheduler << " hash " << hex(result.params.content_hash())
            << " after " << result.curve.size() << " batches; curve " << cfg.paths.curve << '\n';
  return kExitOk;
}

bool wants_trained(const ape::RunConfig& cfg) {
  for (const auto& p : cfg.eval.policies)
    if (p == "ape") return true;
  return false;
}

int cmd_eval(const CommonOptions& opts) {
  const ape::RunConfig cfg = load(opts);
  std::optional<ape::SchedulerParams> trained;
  if (wants_trained(cfg)) {
    trained = ape::load_scheduler(cfg.paths.scheduler, cfg.data.passages_per_question, cfg.encoder.num_layers);
  }
  const FrozenModels models = load_frozen(cfg);
  const ape::Dataset test = ape::read_dataset(cfg.paths.test_data);
  const auto tables = ape::build_probability_tables(test, models.encoder, models.has_answer);
  const ape::EvalReport report = ape::run_eval(cfg, test, tables, cfg.encoder.num_layers,
                                               trained ? &*trained : nullptr, *opts.seed);
  const std::string csv = ape::format_eval_csv(report);
  write_text(cfg.paths.report, csv);
  std::cout << csv;
  return kExitOk;
}

struct TraceOptions {
  std::size_t question = 0;
  std::string policy = "ape";
  std::string dataset = "test";
  std::optional<std::size_t> k;
  std::optional<std::int64_t> budget;
  std::string out;
};

int cmd_trace(const CommonOptions& opts, const TraceOptions& topts) {
  const ape::RunConfig cfg = load(opts);
  const ape::Dataset data =
      ape::read_dataset(topts.dataset == "train" ? cfg.paths.train_data : cfg.paths.test_data);
  if (topts.question >= data.size()) {
    std::cerr << "error: --question " << topts.question << " outside dataset of " << data.size()
              << " questions\n";
    return kExitFailure;
  }
  const FrozenModels models = load_frozen(cfg);
  const std::size_t n = cfg.data.passages_per_question;
  const std::size_t L = cfg.encoder.num_layers;
  ape::SchedulerParams params(n, L);
  ape::BudgetConfig bc;
  bc.policy = ape::Policy::argmax;
  if (topts.policy == "ape") {
    params = ape::load_scheduler(cfg.paths.scheduler, n, L);
  } else if (topts.policy == "round_robin") {
    bc.policy = ape::Policy::round_robin;
  } else if (topts.policy == "static_topk") {
    bc.policy = ape::Policy::static_topk;
  } else if (topts.policy != "greedy_p") {
    throw ape::ConfigError("trace: unknown policy '" + topts.policy + "'");
  }
  bc.k = topts.k.value_or(cfg.eval.k_values.front());
  bc.budget = topts.budget.value_or(static_cast<std::int64_t>(L * bc.k));
  bc.step_cost = cfg.rl.step_cost;
  ape::Rng rng(opts.seed.value_or(0));
  const ape::ScheduleResult result =
      ape::schedule(data[topts.question], models.encoder, models.has_answer, params, bc, rng);
  const std::string text = ape::format_trace(result.trace);
  if (topts.out.empty()) {
    std::cout << text;
  } else {
    write_text(topts.out, text);
  }
  return kExitOk;
}

int cmd_gradcheck(const CommonOptions& opts, std::size_t configurations) {
  const ape::RunConfig cfg = load(opts);
  (void)cfg;
  const std::uint64_t seed = opts.seed.value_or(1);
  constexpr double kTolerance = 1e-4;
  const auto ha = ape::gradcheck_has_answer(seed, configurations);
  const auto pg = ape::gradcheck_log_policy(seed + 1, configurations);
  std::cout << std::setprecision(3) << "hasanswer_bce max_rel_err " << ha.max_relative_error << " over "
            << ha.entries_checked << " entries (worst " << ha.worst_entry << ")\n"
            << "log_policy max_rel_err " << pg.max_relative_error << " over " << pg.entries_checked
            << " entries (worst " << pg.worst_entry << ")\n";
  const bool ok = ha.max_relative_error < kTolerance && pg.max_relative_error < kTolerance;
  std::cout << (ok ? "gradcheck passed\n" : "gradcheck FAILED\n");
  return ok ? kExitOk : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive passage encoding: data, training, evaluation"};
  app.require_subcommand(1);

  CommonOptions gen_opts, ha_opts, sched_opts, eval_opts, trace_opts, grad_opts;
  auto* gen = app.add_subcommand("gen-data", "generate train and test datasets");
  add_common(gen, gen_opts, false);
  auto* ha = app.add_subcommand("train-hasanswer", "train the HasAnswer head on a frozen encoder");
  add_common(ha, ha_opts, true);
  auto* sched = app.add_subcommand("train-scheduler", "train the scheduler with REINFORCE");
  add_common(sched, sched_opts, true);
  auto* ev = app.add_subcommand("eval", "evaluate policies and write the report CSV");
  add_common(ev, eval_opts, true);
  auto* tr = app.add_subcommand("trace", "dump one scheduling episode");
  add_common(tr, trace_opts, false);
  TraceOptions topts;
  tr->add_option("--question", topts.question, "question index")->required();
  tr->add_option("--policy", topts.policy, "ape, greedy_p, round_robin or static_topk");
  tr->add_option("--dataset", topts.dataset, "train or test")->check(CLI::IsMember({"train", "test"}));
  tr->add_option("--k", topts.k, "retained passages (default: first eval.k)");
  tr->add_option("--budget", topts.budget, "budget B (default: L*k)");
  tr->add_option("--out", topts.out, "write the trace here instead of stdout");
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  add_common(gc, grad_opts, false);
  std::size_t configurations = 20;
  gc->add_option("--configs", configurations, "random configurations per check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(gen_opts);
    if (*ha) return cmd_train_hasanswer(ha_opts);
    if (*sched) return cmd_train_scheduler(sched_opts);
    if (*ev) return cmd_eval(eval_opts);
    if (*tr) return cmd_trace(trace_opts, topts);
    if (*gc) return cmd_gradcheck(grad_opts, configurations);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
