#pragma once

// HasAnswer head: pool a passage hidden state, then a two-layer ReLU MLP and
// a sigmoid give the probability that the passage contains an answer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ape/datagen.hpp"
#include "ape/encoder.hpp"
#include "ape/errors.hpp"
#include "ape/numerics.hpp"

namespace ape {

enum class Pooling { max, mean, first_token };

inline std::string to_string(Pooling p) {
  switch (p) {
    case Pooling::max: return "max";
    case Pooling::mean: return "mean";
    case Pooling::first_token: return "first";
  }
  return "max";
}

inline Pooling parse_pooling(std::string_view s) {
  if (s == "max") return Pooling::max;
  if (s == "mean") return Pooling::mean;
  if (s == "first" || s == "first_token" || s == "cls") return Pooling::first_token;
  throw ConfigError("unknown pooling mode '" + std::string(s) + "'");
}

/// Pools rows of `x` into one vector. For max pooling, `argmax` (if given)
/// receives the winning row per column, lowest row on ties.
inline std::vector<double> pool(const Tensor2& x, Pooling mode,
                                std::vector<std::size_t>* argmax = nullptr) {
  if (x.rows() == 0) throw ArgumentError("pool: empty activations");
  std::vector<double> out(x.cols());
  switch (mode) {
    case Pooling::max: {
      if (argmax) argmax->assign(x.cols(), 0);
      for (std::size_t c = 0; c < x.cols(); ++c) {
        double best = x(0, c);
        std::size_t best_row = 0;
        for (std::size_t r = 1; r < x.rows(); ++r) {
          if (x(r, c) > best) {
            best = x(r, c);
            best_row = r;
          }
        }
        out[c] = best;
        if (argmax) (*argmax)[c] = best_row;
      }
      break;
    }
    case Pooling::mean: {
      for (std::size_t c = 0; c < x.cols(); ++c) {
        double acc = 0.0;
        for (std::size_t r = 0; r < x.rows(); ++r) acc += x(r, c);
        out[c] = acc / static_cast<double>(x.rows());
      }
      break;
    }
    case Pooling::first_token: {
      const auto r0 = x.row(0);
      out.assign(r0.begin(), r0.end());
      break;
    }
  }
  return out;
}

inline std::vector<double> pool(const HiddenState& h, Pooling mode) {
  return pool(h.activations, mode);
}

/// Two-layer ReLU MLP over a standardised pooled vector. The standardisation
/// (input_mean, input_scale) is fitted once from training data and is not
/// trained by gradient descent; it defaults to the identity.
class HasAnswerModel {
 public:
  HasAnswerModel() = default;

  /// He-initialised hidden layer; the output layer starts near zero so the
  /// untrained model predicts p close to 0.5.
  HasAnswerModel(std::size_t input_dim, std::size_t hidden, Pooling pooling, std::uint64_t seed)
      : pooling_(pooling),
        input_mean_("hasanswer.input_mean", 1, input_dim),
        input_scale_("hasanswer.input_scale", Tensor2(1, input_dim, 1.0)),
        w1_("hasanswer.w1", input_dim, hidden),
        b1_("hasanswer.b1", 1, hidden),
        w2_("hasanswer.w2", hidden, 1),
        b2_("hasanswer.b2", 1, 1) {
    Rng rng(seed);
    fill_normal(w1_.value, rng, std::sqrt(2.0 / static_cast<double>(input_dim)));
    fill_normal(w2_.value, rng, 1e-2);
  }

  static HasAnswerModel zeros(std::size_t input_dim, std::size_t hidden,
                              Pooling pooling = Pooling::max) {
    HasAnswerModel m(input_dim, hidden, pooling, 0);
    for (ParamBlock* b : m.mutable_blocks()) b->value.fill(0.0);
    return m;
  }

  /// Sets the per-dimension standardisation from example statistics.
  void fit_input_standardisation(std::span<const std::vector<double>> pooled) {
    if (pooled.empty()) return;
    const double n = static_cast<double>(pooled.size());
    for (std::size_t c = 0; c < input_dim(); ++c) {
      double mean = 0.0;
      for (const auto& x : pooled) mean += x[c];
      mean /= n;
      double var = 0.0;
      for (const auto& x : pooled) var += (x[c] - mean) * (x[c] - mean);
      var /= n;
      input_mean_.value(0, c) = mean;
      input_scale_.value(0, c) = 1.0 / std::sqrt(var + 1e-8);
    }
  }

  /// Applies the fixed standardisation.
  std::vector<double> standardise(std::span<const double> pooled) const {
    if (pooled.size() != input_dim()) {
      throw DimensionError("HasAnswerModel: pooled length " + std::to_string(pooled.size()) +
                           " does not match input dim " + std::to_string(input_dim()));
    }
    std::vector<double> x(pooled.size());
    for (std::size_t c = 0; c < x.size(); ++c) {
      x[c] = (pooled[c] - input_mean_.value(0, c)) * input_scale_.value(0, c);
    }
    return x;
  }

  Pooling pooling() const noexcept { return pooling_; }
  void set_pooling(Pooling p) noexcept { pooling_ = p; }
  std::size_t input_dim() const noexcept { return w1_.value.rows(); }
  std::size_t hidden_size() const noexcept { return w1_.value.cols(); }

  const ParamBlock& input_mean() const noexcept { return input_mean_; }
  const ParamBlock& input_scale() const noexcept { return input_scale_; }
  ParamBlock& w1() noexcept { return w1_; }
  ParamBlock& b1() noexcept { return b1_; }
  ParamBlock& w2() noexcept { return w2_; }
  ParamBlock& b2() noexcept { return b2_; }
  const ParamBlock& w1() const noexcept { return w1_; }
  const ParamBlock& b1() const noexcept { return b1_; }
  const ParamBlock& w2() const noexcept { return w2_; }
  const ParamBlock& b2() const noexcept { return b2_; }

  /// Every block, including the fixed standardisation (checkpoint order).
  std::vector<const ParamBlock*> blocks() const {
    return {&input_mean_, &input_scale_, &w1_, &b1_, &w2_, &b2_};
  }
  std::vector<ParamBlock*> all_blocks() {
    return {&input_mean_, &input_scale_, &w1_, &b1_, &w2_, &b2_};
  }
  /// Trainable MLP blocks only.
  std::vector<ParamBlock*> mutable_blocks() { return {&w1_, &b1_, &w2_, &b2_}; }
  std::vector<const ParamBlock*> trainable_blocks() const { return {&w1_, &b1_, &w2_, &b2_}; }

  std::size_t parameter_count() const { return ape::parameter_count(blocks()); }
  std::uint64_t content_hash() const { return ape::content_hash(blocks()); }

  /// Pre-sigmoid output for an already pooled vector.
  double logit(std::span<const double> pooled) const {
    const std::vector<double> x = standardise(pooled);
    double out = b2_.value(0, 0);
    for (std::size_t j = 0; j < hidden_size(); ++j) {
      double z = b1_.value(0, j);
      for (std::size_t i = 0; i < x.size(); ++i) z += x[i] * w1_.value(i, j);
      if (z > 0.0) out += z * w2_.value(j, 0);
    }
    return out;
  }

  double prob_from_pooled(std::span<const double> pooled) const { return sigmoid(logit(pooled)); }

  friend bool operator==(const HasAnswerModel& a, const HasAnswerModel& b) {
    return a.pooling_ == b.pooling_ && a.input_mean_.value == b.input_mean_.value &&
           a.input_scale_.value == b.input_scale_.value && a.w1_.value == b.w1_.value &&
           a.b1_.value == b.b1_.value &&
           a.w2_.value == b.w2_.value && a.b2_.value == b.b2_.value;
  }

 private:
  Pooling pooling_ = Pooling::max;
  ParamBlock input_mean_, input_scale_;
  ParamBlock w1_, b1_, w2_, b2_;
};

inline double has_answer_prob(const HiddenState& h, const HasAnswerModel& model) {
  return model.prob_from_pooled(pool(h.activations, model.pooling()));
}

inline constexpr double kProbClamp = 1e-12;

/// Binary cross-entropy with p clamped to [1e-12, 1 - 1e-12].
inline double bce_loss(double p, int y) {
  const double pc = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  return y == 1 ? -std::log(pc) : -std::log(1.0 - pc);
}

struct BceBackward {
  double loss = 0.0;
  double prob = 0.0;
  std::vector<double> pooled_grad;  // dL/d(pooled input)
};

/// Accumulates `scale * dL/dparam` into the model's gradient slots for one
/// pooled example and returns the loss and input gradient.
inline BceBackward accumulate_bce_gradient(std::span<const double> pooled, int y,
                                           HasAnswerModel& model, double scale = 1.0) {
  const std::size_t in = model.input_dim();
  const std::size_t hid = model.hidden_size();
  const std::vector<double> x = model.standardise(pooled);
  const Tensor2& w1 = model.w1().value;
  const Tensor2& w2 = model.w2().value;

  std::vector<double> z(hid), a(hid);
  double logit = model.b2().value(0, 0);
  for (std::size_t j = 0; j < hid; ++j) {
    double acc = model.b1().value(0, j);
    for (std::size_t i = 0; i < in; ++i) acc += x[i] * w1(i, j);
    z[j] = acc;
    a[j] = acc > 0.0 ? acc : 0.0;
    logit += a[j] * w2(j, 0);
  }
  BceBackward out;
  out.prob = sigmoid(logit);
  out.loss = bce_loss(out.prob, y);
  const double dlogit = out.prob - static_cast<double>(y);

  model.b2().grad(0, 0) += scale * dlogit;
  out.pooled_grad.assign(in, 0.0);
  for (std::size_t j = 0; j < hid; ++j) {
    model.w2().grad(j, 0) += scale * a[j] * dlogit;
    if (z[j] <= 0.0) continue;
    const double dz = w2(j, 0) * dlogit;
    model.b1().grad(0, j) += scale * dz;
    for (std::size_t i = 0; i < in; ++i) {
      model.w1().grad(i, j) += scale * x[i] * dz;
      out.pooled_grad[i] += w1(i, j) * dz;
    }
  }
  for (std::size_t i = 0; i < in; ++i) out.pooled_grad[i] *= model.input_scale().value(0, i);
  return out;
}

/// Full backward pass from hidden state: accumulates MLP parameter gradients
/// and returns dL/d(activations). Max pooling routes each column's gradient
/// to its argmax row.
inline Tensor2 backprop_bce(const HiddenState& h, int y, HasAnswerModel& model,
                            double* loss_out = nullptr) {
  std::vector<std::size_t> argmax;
  const std::vector<double> pooled = pool(h.activations, model.pooling(), &argmax);
  const BceBackward back = accumulate_bce_gradient(pooled, y, model);
  if (loss_out) *loss_out = back.loss;
  const Tensor2& x = h.activations;
  Tensor2 dx(x.rows(), x.cols());
  for (std::size_t c = 0; c < x.cols(); ++c) {
    switch (model.pooling()) {
      case Pooling::max: dx(argmax[c], c) = back.pooled_grad[c]; break;
      case Pooling::mean:
        for (std::size_t r = 0; r < x.rows(); ++r)
          dx(r, c) = back.pooled_grad[c] / static_cast<double>(x.rows());
        break;
      case Pooling::first_token: dx(0, c) = back.pooled_grad[c]; break;
    }
  }
  return dx;
}

/// Area under the ROC curve via the rank-sum statistic, ties averaged.
/// Returns 0.5 when one class is absent.
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("roc_auc: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t npos = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]] == 1) {
        rank_sum_pos += avg_rank;
        ++npos;
      }
    }
    i = j + 1;
  }
  const std::size_t nneg = scores.size() - npos;
  if (npos == 0 || nneg == 0) return 0.5;
  const double np = static_cast<double>(npos);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * static_cast<double>(nneg));
}

// ---------------------------------------------------------------------------
// Supervised training
// ---------------------------------------------------------------------------

struct HasAnswerTrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 24;
  std::size_t epochs = 2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-6;
  Pooling pooling = Pooling::max;
  std::size_t hidden_size = 64;
  double heldout_fraction = 0.2;
  /// Layer depths sampled per passage when building examples.
  std::size_t depth_samples = 1;
  std::uint64_t seed = 1;
};

/// One pooled training example: the passage at a given depth.
struct PooledExample {
  std::vector<double> features;
  int label = 0;
  std::size_t layer = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double heldout_loss = 0.0;
  double heldout_auc = 0.0;
};

struct HasAnswerTrainResult {
  HasAnswerModel model;
  HasAnswerModel initial_model;
  double initial_heldout_loss = 0.0;
  double initial_heldout_auc = 0.0;
  std::vector<EpochLog> log;
};

/// Pools each passage at `depth_samples` uniformly drawn layers in 0..L.
inline std::vector<PooledExample> build_pooled_examples(const Dataset& data,
                                                        std::span<const std::size_t> questions,
                                                        const EncoderModel& encoder,
                                                        Pooling pooling, std::size_t depth_samples,
                                                        Rng& rng) {
  std::vector<PooledExample> out;
  const std::size_t L = encoder.num_layers();
  for (std::size_t qi : questions) {
    const auto& q = data.at(qi);
    for (const auto& p : q.passages) {
      std::vector<std::size_t> depths(depth_samples);
      for (auto& d : depths) d = rng.uniform_index(L + 1);
      const std::size_t deepest = *std::max_element(depths.begin(), depths.end());
      std::vector<std::vector<double>> pooled_at;
      HiddenState h = embed(q.question, p.tokens, encoder, p.rank);
      pooled_at.push_back(pool(h.activations, pooling));
      while (h.layer_index < deepest) {
        h = forward_layer(h, encoder);
        pooled_at.push_back(pool(h.activations, pooling));
      }
      for (std::size_t d : depths) out.push_back(PooledExample{pooled_at[d], p.label, d});
    }
  }
  return out;
}

struct HeldoutMetrics {
  double loss = 0.0;
  double auc = 0.5;
};

inline HeldoutMetrics evaluate_pooled(const HasAnswerModel& model,
                                      std::span<const PooledExample> examples) {
  HeldoutMetrics m;
  if (examples.empty()) return m;
  std::vector<double> scores;
  std::vector<int> labels;
  scores.reserve(examples.size());
  labels.reserve(examples.size());
  for (const auto& ex : examples) {
    const double p = model.prob_from_pooled(ex.features);
    m.loss += bce_loss(p, ex.label);
    scores.push_back(p);
    labels.push_back(ex.label);
  }
  m.loss /= static_cast<double>(examples.size());
  m.auc = roc_auc(scores, labels);
  return m;
}

/// Splits question indices into (train, held-out) by a seeded shuffle.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_questions(
    std::size_t count, double heldout_fraction, Rng& rng) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = count; i > 1; --i) std::swap(idx[i - 1], idx[rng.uniform_index(i)]);
  const auto n_held = static_cast<std::size_t>(std::floor(heldout_fraction * static_cast<double>(count)));
  std::vector<std::size_t> held(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_held));
  std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(n_held), idx.end());
  std::sort(held.begin(), held.end());
  std::sort(train.begin(), train.end());
  return {std::move(train), std::move(held)};
}

/// Minibatch Adam on binary cross-entropy over mixed-depth pooled examples.
/// The encoder is only read.
inline HasAnswerTrainResult train_has_answer(const Dataset& data, const EncoderModel& encoder,
                                             const HasAnswerTrainConfig& cfg) {
  if (data.empty()) throw ArgumentError("train_has_answer: empty dataset");
  if (cfg.batch_size == 0) throw ConfigError("hasanswer.batch_size must be > 0");
  Rng rng(cfg.seed);
  HasAnswerModel model(encoder.model_dim(), cfg.hidden_size, cfg.pooling, rng.next_u64());

  auto [train_q, held_q] = split_questions(data.size(), cfg.heldout_fraction, rng);
  const auto train = build_pooled_examples(data, train_q, encoder, cfg.pooling,
                                           cfg.depth_samples, rng);
  const auto held = build_pooled_examples(data, held_q, encoder, cfg.pooling,
                                          cfg.depth_samples, rng);

  {
    std::vector<std::vector<double>> feats;
    feats.reserve(train.size());
    for (const auto& ex : train) feats.push_back(ex.features);
    model.fit_input_standardisation(feats);
  }

  HasAnswerTrainResult result;
  result.initial_model = model;
  const HeldoutMetrics init = evaluate_pooled(model, held);
  result.initial_heldout_loss = init.loss;
  result.initial_heldout_auc = init.auc;

  Adam adam({cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon});
  auto params = model.mutable_blocks();
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
    double epoch_loss = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(end - start);
      zero_grads(params);
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = train[order[i]];
        batch_loss += accumulate_bce_gradient(ex.features, ex.label, model, scale).loss;
      }
      if (!std::isfinite(batch_loss)) {
        std::ostringstream msg;
        msg << "train_has_answer: non-finite loss in epoch " << epoch << ", batch "
            << batch_index << " (examples " << start << ".." << end << "); param norms:";
        for (const ParamBlock* b : model.blocks()) msg << ' ' << b->name << '=' << value_norm(*b);
        throw TrainingDivergedError(msg.str());
      }
      epoch_loss += batch_loss;
      adam.step(params);
    }
    const HeldoutMetrics m = evaluate_pooled(model, held);
    result.log.push_back(EpochLog{epoch, train.empty() ? 0.0 : epoch_loss / static_cast<double>(train.size()),
                                  m.loss, m.auc});
  }
  zero_grads(params);
  result.model = std::move(model);
  return result;
}

}  // namespace ape
