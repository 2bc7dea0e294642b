#pragma once

// Frozen toy transformer encoder with single-passage, single-layer stepping.
//
// Block variant (pre-norm):
//   y  = x + MultiHeadAttention(LayerNorm1(x))
//   x' = y + W2 * relu(W1 * LayerNorm2(y) + b1) + b2
// Attention has no projection biases and no mask. LayerNorm epsilon is 1e-5.
// Layer 0 is the embedding output: token row + position row.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ape/errors.hpp"
#include "ape/numerics.hpp"

namespace ape {

using TokenId = std::uint32_t;

struct EncoderConfig {
  std::size_t num_layers = 6;
  std::size_t model_dim = 32;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 64;
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = 64;
  std::uint64_t init_seed = 1;

  static constexpr std::size_t kMaxSeqLenLimit = 256;

  void validate() const {
    if (model_dim == 0 || num_heads == 0 || ffn_dim == 0 || vocab_size == 0 || max_seq_len == 0) {
      throw ConfigError("encoder: dimensions must be positive");
    }
    if (model_dim % num_heads != 0) {
      throw ConfigError("encoder: model_dim " + std::to_string(model_dim) +
                        " is not divisible by num_heads " + std::to_string(num_heads));
    }
    if (max_seq_len > kMaxSeqLenLimit) {
      throw ConfigError("encoder: max_seq_len " + std::to_string(max_seq_len) +
                        " exceeds 256");
    }
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

/// Representation of one passage after `layer_index` encoder layers.
struct HiddenState {
  std::size_t passage_index = 0;
  std::size_t layer_index = 0;
  Tensor2 activations;  // (seq_len, model_dim)
  std::size_t question_length = 0;
  bool truncated = false;
};

struct EncoderLayerParams {
  ParamBlock ln1_gain, ln1_bias;
  ParamBlock wq, wk, wv, wo;
  ParamBlock ln2_gain, ln2_bias;
  ParamBlock w1, b1, w2, b2;
};

class EncoderModel {
 public:
  /// Seeded random initialisation; identical config gives identical weights.
  explicit EncoderModel(const EncoderConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    allocate();
    Rng rng(cfg_.init_seed);
    const double d = static_cast<double>(cfg_.model_dim);
    fill_normal(token_embedding_.value, rng, 1.0);
    for (std::size_t pos = 0; pos < cfg_.max_seq_len; ++pos) {
      for (std::size_t i = 0; i < cfg_.model_dim; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / d);
        const double angle = static_cast<double>(pos) * freq;
        position_embedding_.value(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
      }
    }
    for (auto& layer : layers_) {
      layer.ln1_gain.value.fill(1.0);
      layer.ln2_gain.value.fill(1.0);
      fill_normal(layer.wq.value, rng, 1.0 / std::sqrt(d));
      fill_normal(layer.wk.value, rng, 1.0 / std::sqrt(d));
      fill_normal(layer.wv.value, rng, 1.0 / std::sqrt(d));
      fill_normal(layer.wo.value, rng, 1.0 / std::sqrt(d));
      fill_normal(layer.w1.value, rng, std::sqrt(2.0 / d));
      fill_normal(layer.w2.value, rng, 1.0 / std::sqrt(static_cast<double>(cfg_.ffn_dim)));
    }
  }

  /// Builds a model from explicit parameter values in blocks() order.
  EncoderModel(const EncoderConfig& cfg, const std::vector<ParamBlock>& values) : cfg_(cfg) {
    cfg_.validate();
    allocate();
    std::vector<ParamBlock*> targets;
    for (const ParamBlock* b : blocks()) targets.push_back(const_cast<ParamBlock*>(b));
    assign_checkpoint(targets, values);
  }

  const EncoderConfig& config() const noexcept { return cfg_; }
  std::size_t num_layers() const noexcept { return cfg_.num_layers; }
  std::size_t model_dim() const noexcept { return cfg_.model_dim; }

  const ParamBlock& token_embedding() const noexcept { return token_embedding_; }
  const ParamBlock& position_embedding() const noexcept { return position_embedding_; }
  const EncoderLayerParams& layer(std::size_t i) const { return layers_.at(i); }

  std::vector<const ParamBlock*> blocks() const {
    std::vector<const ParamBlock*> out{&token_embedding_, &position_embedding_};
    for (const auto& l : layers_) {
      for (const ParamBlock* b : {&l.ln1_gain, &l.ln1_bias, &l.wq, &l.wk, &l.wv, &l.wo,
                                  &l.ln2_gain, &l.ln2_bias, &l.w1, &l.b1, &l.w2, &l.b2}) {
        out.push_back(b);
      }
    }
    return out;
  }

  std::size_t parameter_count() const { return ape::parameter_count(blocks()); }
  std::uint64_t content_hash() const { return ape::content_hash(blocks()); }

 private:
  void allocate() {
    const std::size_t d = cfg_.model_dim;
    token_embedding_ = ParamBlock("token_embedding", cfg_.vocab_size, d);
    position_embedding_ = ParamBlock("position_embedding", cfg_.max_seq_len, d);
    layers_.clear();
    layers_.reserve(cfg_.num_layers);
    for (std::size_t i = 0; i < cfg_.num_layers; ++i) {
      const std::string p = "layer" + std::to_string(i) + ".";
      layers_.push_back(EncoderLayerParams{
          ParamBlock(p + "ln1_gain", 1, d), ParamBlock(p + "ln1_bias", 1, d),
          ParamBlock(p + "wq", d, d),       ParamBlock(p + "wk", d, d),
          ParamBlock(p + "wv", d, d),       ParamBlock(p + "wo", d, d),
          ParamBlock(p + "ln2_gain", 1, d), ParamBlock(p + "ln2_bias", 1, d),
          ParamBlock(p + "w1", d, cfg_.ffn_dim), ParamBlock(p + "b1", 1, cfg_.ffn_dim),
          ParamBlock(p + "w2", cfg_.ffn_dim, d), ParamBlock(p + "b2", 1, d)});
    }
  }

  EncoderConfig cfg_;
  ParamBlock token_embedding_;
  ParamBlock position_embedding_;
  std::vector<EncoderLayerParams> layers_;
};

namespace detail {

inline Tensor2 layer_norm(const Tensor2& x, const Tensor2& gain, const Tensor2& bias,
                          double eps = 1e-5) {
  Tensor2 out(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mean = 0.0;
    for (double v : x.row(r)) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : x.row(r)) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < x.cols(); ++c) {
      out(r, c) = (x(r, c) - mean) * inv * gain(0, c) + bias(0, c);
    }
  }
  return out;
}

inline Tensor2 multi_head_attention(const Tensor2& y, const EncoderLayerParams& p,
                                    std::size_t num_heads) {
  const Tensor2 q = matmul(y, p.wq.value);
  const Tensor2 k = matmul(y, p.wk.value);
  const Tensor2 v = matmul(y, p.wv.value);
  const std::size_t seq = y.rows();
  const std::size_t d = y.cols();
  const std::size_t dh = d / num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor2 context(seq, d);
  std::vector<double> scores(seq);
  for (std::size_t h = 0; h < num_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < seq; ++i) {
      for (std::size_t j = 0; j < seq; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) acc += q(i, off + c) * k(j, off + c);
        scores[j] = acc * scale;
      }
      const double mx = *std::max_element(scores.begin(), scores.end());
      double total = 0.0;
      for (double& s : scores) {
        s = std::exp(s - mx);
        total += s;
      }
      for (double& s : scores) s /= total;
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < seq; ++j) acc += scores[j] * v(j, off + c);
        context(i, off + c) = acc;
      }
    }
  }
  return matmul(context, p.wo.value);
}

}  // namespace detail

/// Layer-0 state of the question-prefixed passage. Over-long input loses
/// passage tail tokens; the question is never truncated.
inline HiddenState embed(std::span<const TokenId> question_tokens,
                         std::span<const TokenId> passage_tokens, const EncoderModel& model,
                         std::size_t passage_index = 0) {
  const auto& cfg = model.config();
  if (question_tokens.size() > cfg.max_seq_len) {
    throw ArgumentError("embed: question length " + std::to_string(question_tokens.size()) +
                        " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  const std::size_t room = cfg.max_seq_len - question_tokens.size();
  const std::size_t kept = std::min(room, passage_tokens.size());
  const std::size_t seq = question_tokens.size() + kept;
  if (seq == 0) throw ArgumentError("embed: empty input");

  HiddenState h;
  h.passage_index = passage_index;
  h.layer_index = 0;
  h.question_length = question_tokens.size();
  h.truncated = kept < passage_tokens.size();
  h.activations = Tensor2(seq, cfg.model_dim);
  const Tensor2& tok = model.token_embedding().value;
  const Tensor2& pos = model.position_embedding().value;
  for (std::size_t i = 0; i < seq; ++i) {
    const TokenId id = i < question_tokens.size() ? question_tokens[i]
                                                  : passage_tokens[i - question_tokens.size()];
    if (id >= cfg.vocab_size) {
      throw ArgumentError("embed: token id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(cfg.vocab_size));
    }
    for (std::size_t c = 0; c < cfg.model_dim; ++c) {
      h.activations(i, c) = tok(id, c) + pos(i, c);
    }
  }
  return h;
}

/// Advances one passage by exactly one encoder layer.
inline HiddenState forward_layer(const HiddenState& h, const EncoderModel& model) {
  if (h.layer_index >= model.num_layers()) {
    throw AlreadyCompleteError("forward_layer: passage " + std::to_string(h.passage_index) +
                               " is already at layer " + std::to_string(h.layer_index));
  }
  const EncoderLayerParams& p = model.layer(h.layer_index);
  const Tensor2& x = h.activations;

  const Tensor2 normed1 = detail::layer_norm(x, p.ln1_gain.value, p.ln1_bias.value);
  const Tensor2 y = add(x, detail::multi_head_attention(normed1, p, model.config().num_heads));

  const Tensor2 normed2 = detail::layer_norm(y, p.ln2_gain.value, p.ln2_bias.value);
  Tensor2 hidden = add_row_broadcast(matmul(normed2, p.w1.value), p.b1.value);
  for (double& v : hidden.data()) v = v > 0.0 ? v : 0.0;
  const Tensor2 ffn = add_row_broadcast(matmul(hidden, p.w2.value), p.b2.value);

  HiddenState out;
  out.passage_index = h.passage_index;
  out.layer_index = h.layer_index + 1;
  out.question_length = h.question_length;
  out.truncated = h.truncated;
  out.activations = add(y, ffn);
  return out;
}

inline HiddenState encode_full(std::span<const TokenId> question_tokens,
                               std::span<const TokenId> passage_tokens, const EncoderModel& model,
                               std::size_t passage_index = 0) {
  HiddenState h = embed(question_tokens, passage_tokens, model, passage_index);
  while (h.layer_index < model.num_layers()) h = forward_layer(h, model);
  return h;
}

}  // namespace ape
