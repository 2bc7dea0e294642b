#pragma once

// Dense float64 arithmetic, seeded randomness, trainable parameter blocks,
// the Adam optimiser and the binary checkpoint format.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ape/errors.hpp"

namespace ape {

// ---------------------------------------------------------------------------
// Tensor2
// ---------------------------------------------------------------------------

/// Row-major rows x cols matrix of doubles.
class Tensor2 {
 public:
  Tensor2() = default;
  Tensor2(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor2(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("Tensor2: data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string());
    }
  }

  /// Builds a tensor from nested rows; all rows must have equal length.
  static Tensor2 from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("Tensor2::from_rows: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor2(r, c, std::move(data));
  }

  static Tensor2 identity(std::size_t n) {
    Tensor2 t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor2& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  std::string shape_string() const {
    return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
  }

  friend bool operator==(const Tensor2& a, const Tensor2& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Standard matrix product. Each output entry accumulates left to right over
/// the shared dimension.
inline Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: cannot multiply " + a.shape_string() + " by " +
                         b.shape_string());
  }
  Tensor2 out(a.rows(), b.cols());
  const std::size_t n = a.cols();
  const std::size_t m = b.cols();
  const double* bd = b.data().data();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* o = out.row(i).data();
    const double* ar = a.row(i).data();
    // k-outer keeps each out(i, j) summed over k in increasing order.
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = ar[k];
      const double* br = bd + k * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += aik * br[j];
    }
  }
  return out;
}

/// a * b^T without materialising the transpose.
inline Tensor2 matmul_transposed(const Tensor2& a, const Tensor2& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_transposed: cannot multiply " + a.shape_string() +
                         " by transpose of " + b.shape_string());
  }
  Tensor2 out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(j, k);
      out(i, j) = acc;
    }
  }
  return out;
}

inline Tensor2 transpose(const Tensor2& a) {
  Tensor2 out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline Tensor2 add(const Tensor2& a, const Tensor2& b) {
  if (!a.same_shape(b)) {
    throw DimensionError("add: shapes " + a.shape_string() + " and " + b.shape_string() +
                         " differ");
  }
  Tensor2 out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

/// Adds a (1 x cols) bias row to every row of `a`.
inline Tensor2 add_row_broadcast(const Tensor2& a, const Tensor2& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw DimensionError("add_row_broadcast: bias " + bias.shape_string() +
                         " does not broadcast over " + a.shape_string());
  }
  Tensor2 out = a;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bias(0, c);
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()) + " differ");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// ---------------------------------------------------------------------------
// Scalar functions
// ---------------------------------------------------------------------------

/// Logistic function, evaluated on the branch that never overflows exp().
inline double sigmoid(double x) noexcept {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Temperature softmax with max-shift.
inline std::vector<double> softmax(std::span<const double> scores, double temperature = 1.0) {
  if (scores.empty()) throw ArgumentError("softmax: empty score sequence");
  if (!(temperature > 0.0)) throw ArgumentError("softmax: temperature must be positive");
  const double mx = *std::max_element(scores.begin(), scores.end());
  std::vector<double> out(scores.size());
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp((scores[i] - mx) / temperature);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

/// log(sum(exp(x_i / temperature))), max-shifted.
inline double log_sum_exp(std::span<const double> scores, double temperature = 1.0) {
  if (scores.empty()) throw ArgumentError("log_sum_exp: empty score sequence");
  const double mx = *std::max_element(scores.begin(), scores.end());
  double total = 0.0;
  for (double s : scores) total += std::exp((s - mx) / temperature);
  return mx / temperature + std::log(total);
}

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

/// xoshiro256** seeded through splitmix64. The output stream depends only on
/// the seed, so golden values are portable across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) {
    std::uint64_t sm = seed;
    for (auto& s : state_) s = splitmix64(sm);
  }

  static std::uint64_t splitmix64(std::uint64_t& x) noexcept {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t result = std::rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = std::rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), unbiased by rejection.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw ArgumentError("uniform_index: empty range");
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  /// Standard normal via Box-Muller (one draw per call).
  double normal() noexcept {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Draws index i with probability weights[i]. Weights must be non-negative
  /// and sum to 1 within 1e-9.
  std::size_t categorical(std::span<const double> weights) {
    if (weights.empty()) throw ArgumentError("categorical: empty weights");
    double total = 0.0;
    for (double w : weights) {
      if (!std::isfinite(w) || w < 0.0) {
        throw ArgumentError("categorical: weights must be finite and non-negative");
      }
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw ArgumentError("categorical: weights sum to " + std::to_string(total) +
                          ", expected 1");
    }
    const double u = uniform();
    double cumulative = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] > 0.0) last_positive = i;
      cumulative += weights[i];
      if (u < cumulative) return i;
    }
    return last_positive;
  }

  const std::array<std::uint64_t, 4>& state() const noexcept { return state_; }

 private:
  std::array<std::uint64_t, 4> state_{};
};

// ---------------------------------------------------------------------------
// Parameters and optimisation
// ---------------------------------------------------------------------------

/// A named trainable tensor with a gradient slot of the same shape.
struct ParamBlock {
  std::string name;
  Tensor2 value;
  Tensor2 grad;

  ParamBlock() = default;
  ParamBlock(std::string n, Tensor2 v)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}
  ParamBlock(std::string n, std::size_t rows, std::size_t cols)
      : ParamBlock(std::move(n), Tensor2(rows, cols)) {}

  void zero_grad() { grad.fill(0.0); }
};

inline void fill_normal(Tensor2& t, Rng& rng, double stddev) {
  for (double& v : t.data()) v = rng.normal() * stddev;
}

inline void zero_grads(std::span<ParamBlock* const> blocks) {
  for (ParamBlock* b : blocks) b->zero_grad();
}

/// L2 norm over all gradient entries, accumulated in block order.
inline double grad_norm(std::span<const ParamBlock* const> blocks) {
  double acc = 0.0;
  for (const ParamBlock* b : blocks)
    for (double g : b->grad.data()) acc += g * g;
  return std::sqrt(acc);
}

inline double value_norm(const ParamBlock& b) {
  double acc = 0.0;
  for (double v : b.value.data()) acc += v * v;
  return std::sqrt(acc);
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction. Moment buffers are keyed by position, so the
/// same block list must be passed to every step().
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// Descends along the stored gradients.
  void step(std::span<ParamBlock* const> blocks) {
    if (first_.empty()) {
      for (ParamBlock* b : blocks) {
        first_.emplace_back(b->value.size(), 0.0);
        second_.emplace_back(b->value.size(), 0.0);
      }
    }
    if (first_.size() != blocks.size()) {
      throw ArgumentError("Adam::step: parameter list changed between steps");
    }
    ++t_;
    const double correction1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double correction2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
      auto& value = blocks[bi]->value.data();
      const auto& grad = blocks[bi]->grad.data();
      auto& m = first_[bi];
      auto& v = second_[bi];
      for (std::size_t i = 0; i < value.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * grad[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
        const double m_hat = m[i] / correction1;
        const double v_hat = v[i] / correction2;
        value[i] -= cfg_.learning_rate * m_hat / (std::sqrt(v_hat) + cfg_.epsilon);
      }
    }
  }

  std::uint64_t steps_taken() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return cfg_; }

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
//
// Layout, all integers little-endian:
//   bytes 0..3   magic "APE1"
//   u32          number of blocks
//   per block:   u32 name length, name bytes (UTF-8, no terminator),
//                u64 rows, u64 cols, rows*cols IEEE-754 binary64 values
//                in row-major order.

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>(bits & 0xffU));
    bits >>= 8;
  }
}

template <typename T>
T get_le(std::string_view in, std::size_t& pos) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  if (pos + sizeof(U) > in.size()) {
    throw ParseError("checkpoint truncated", 1, pos);
  }
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bits |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += sizeof(U);
  return std::bit_cast<T>(bits);
}

}  // namespace detail

inline constexpr std::string_view kCheckpointMagic = "APE1";

inline std::string serialize_checkpoint(std::span<const ParamBlock* const> blocks) {
  std::string out(kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(blocks.size()));
  for (const ParamBlock* b : blocks) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(b->name.size()));
    out += b->name;
    detail::put_le<std::uint64_t>(out, b->value.rows());
    detail::put_le<std::uint64_t>(out, b->value.cols());
    for (double v : b->value.data()) detail::put_le<double>(out, v);
  }
  return out;
}

/// Parses a checkpoint into fresh blocks (zeroed gradients).
inline std::vector<ParamBlock> deserialize_checkpoint(std::string_view bytes) {
  if (bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
    throw ParseError("bad checkpoint magic, expected APE1", 1, 0);
  }
  std::size_t pos = kCheckpointMagic.size();
  const auto count = detail::get_le<std::uint32_t>(bytes, pos);
  std::vector<ParamBlock> blocks;
  blocks.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::get_le<std::uint32_t>(bytes, pos);
    if (pos + name_len > bytes.size()) throw ParseError("checkpoint truncated in name", 1, pos);
    std::string name(bytes.substr(pos, name_len));
    pos += name_len;
    const auto rows = detail::get_le<std::uint64_t>(bytes, pos);
    const auto cols = detail::get_le<std::uint64_t>(bytes, pos);
    if (cols != 0 && rows > (bytes.size() - pos) / 8 / cols) {
      throw ParseError("checkpoint truncated in payload of " + name, 1, pos);
    }
    std::vector<double> data(rows * cols);
    for (double& v : data) v = detail::get_le<double>(bytes, pos);
    blocks.emplace_back(std::move(name), Tensor2(rows, cols, std::move(data)));
  }
  if (pos != bytes.size()) throw ParseError("trailing bytes after checkpoint", 1, pos);
  return blocks;
}

/// Copies values from `loaded` into `targets`, matching by position; names and
/// shapes must agree.
inline void assign_checkpoint(std::span<ParamBlock* const> targets,
                              const std::vector<ParamBlock>& loaded) {
  if (targets.size() != loaded.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(loaded.size()) +
                      " blocks, expected " + std::to_string(targets.size()));
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i]->name != loaded[i].name || !targets[i]->value.same_shape(loaded[i].value)) {
      throw ConfigError("checkpoint block " + loaded[i].name + loaded[i].value.shape_string() +
                        " does not match " + targets[i]->name +
                        targets[i]->value.shape_string());
    }
    targets[i]->value = loaded[i].value;
    targets[i]->zero_grad();
  }
}

inline void write_file_bytes(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("failed writing " + path);
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Content hash of parameter values (names, shapes and payload).
inline std::uint64_t content_hash(std::span<const ParamBlock* const> blocks) {
  return fnv1a64(serialize_checkpoint(blocks));
}

inline std::size_t parameter_count(std::span<const ParamBlock* const> blocks) {
  std::size_t n = 0;
  for (const ParamBlock* b : blocks) n += b->value.size();
  return n;
}

}  // namespace ape
