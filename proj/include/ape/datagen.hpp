#pragma once

// Seeded synthetic retrieval corpus and its line-oriented file format.
//
// Vocabulary layout for vocab size V (integer division):
//   filler tokens  [0, 5V/8)
//   key tokens     [5V/8, 13V/16)
//   answer tokens  [13V/16, 29V/32)
//   decoy tokens   [29V/32, V)
// Every question starts with its key token k and is assigned one answer
// token a and one decoy token b. Passages come in three kinds:
//   relevant  fillers + planted bigram (k, a) + `mention_count` extra tokens,
//             each a with probability (1 + s) / 2, otherwise b
//   decoy     fillers + reversed pair (a, k) + `mention_count` extra tokens,
//             each a with probability (1 - s) / 2, otherwise b
//   plain     fillers only
// where s is the signal strength. A distractor is plain with probability
// s * plain_fraction, otherwise a decoy. At s = 0 relevant passages and
// decoys differ only in the order of the planted pair.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ape/encoder.hpp"
#include "ape/errors.hpp"
#include "ape/numerics.hpp"

namespace ape {

struct Passage {
  std::size_t rank = 0;
  int label = 0;  // has-answer label, 0 or 1
  std::vector<TokenId> tokens;

  friend bool operator==(const Passage&, const Passage&) = default;
};

struct QuestionInstance {
  std::string id;
  std::vector<TokenId> question;
  std::vector<Passage> passages;  // passages[n].rank == n

  std::size_t num_passages() const noexcept { return passages.size(); }
  bool any_relevant() const noexcept {
    for (const auto& p : passages)
      if (p.label == 1) return true;
    return false;
  }

  friend bool operator==(const QuestionInstance&, const QuestionInstance&) = default;
};

using Dataset = std::vector<QuestionInstance>;

struct VocabLayout {
  TokenId key_begin, answer_begin, decoy_begin, end;

  explicit VocabLayout(std::size_t vocab)
      : key_begin(static_cast<TokenId>(vocab * 5 / 8)),
        answer_begin(static_cast<TokenId>(vocab * 13 / 16)),
        decoy_begin(static_cast<TokenId>(vocab * 29 / 32)),
        end(static_cast<TokenId>(vocab)) {}

  std::size_t answer_span() const noexcept { return decoy_begin - answer_begin; }
  bool is_key(TokenId t) const noexcept { return t >= key_begin && t < answer_begin; }
  bool is_answer(TokenId t) const noexcept { return t >= answer_begin && t < decoy_begin; }
  bool is_decoy(TokenId t) const noexcept { return t >= decoy_begin && t < end; }
};

struct GenConfig {
  std::size_t num_questions = 1000;
  std::size_t passages_per_question = 20;
  std::size_t question_length = 4;
  std::size_t passage_length = 20;
  std::size_t vocab_size = 256;
  /// Relevance probability of the top-ranked passage.
  double relevance_rate = 0.3;
  /// Rank decay rho: P(relevant | rank n) = relevance_rate * (1 - rho)^n.
  double rank_decay = 0.2;
  /// Answer-versus-decoy bias of the extra mentions, and the scale of the
  /// plain-distractor share.
  double signal_strength = 0.5;
  double plain_fraction = 0.5;
  std::size_t mention_count = 4;
  /// Number of distinct answer (and decoy) tokens questions draw from.
  std::size_t answer_vocab = 1;
  std::uint64_t seed = 1;

  void validate() const {
    if (passages_per_question == 0) throw ConfigError("datagen: passages_per_question must be > 0");
    if (question_length == 0) throw ConfigError("datagen: question_length must be > 0");
    if (passage_length < mention_count + 3) {
      throw ConfigError("datagen: passage_length must be at least mention_count + 3");
    }
    if (vocab_size < 32) throw ConfigError("datagen: vocab_size must be >= 32");
    if (answer_vocab == 0 || answer_vocab > VocabLayout(vocab_size).answer_span()) {
      throw ConfigError("datagen: answer_vocab must lie in [1, " +
                        std::to_string(VocabLayout(vocab_size).answer_span()) + "]");
    }
    for (auto [name, v] : {std::pair{"relevance_rate", relevance_rate},
                           std::pair{"rank_decay", rank_decay},
                           std::pair{"signal_strength", signal_strength},
                           std::pair{"plain_fraction", plain_fraction}}) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw ConfigError(std::string("datagen: ") + name + " must lie in [0,1]");
      }
    }
  }

  double relevance_prior(std::size_t rank) const {
    return relevance_rate * std::pow(1.0 - rank_decay, static_cast<double>(rank));
  }
};


/// True when `tokens` contains `key` immediately followed by an answer token.
inline bool contains_planted_bigram(std::span<const TokenId> tokens, TokenId key,
                                    const VocabLayout& layout) {
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    if (tokens[i] == key && layout.is_answer(tokens[i + 1])) return true;
  }
  return false;
}

inline Dataset generate(const GenConfig& cfg) {
  cfg.validate();
  const VocabLayout layout(cfg.vocab_size);
  Rng rng(cfg.seed);
  const auto filler = [&] { return static_cast<TokenId>(rng.uniform_index(layout.key_begin)); };
  const double s = cfg.signal_strength;

  Dataset data;
  data.reserve(cfg.num_questions);
  for (std::size_t qi = 0; qi < cfg.num_questions; ++qi) {
    QuestionInstance inst;
    inst.id = std::to_string(qi);
    const auto key = static_cast<TokenId>(layout.key_begin +
                                          rng.uniform_index(layout.answer_begin - layout.key_begin));
    const auto ans = static_cast<TokenId>(layout.answer_begin + rng.uniform_index(cfg.answer_vocab));
    const auto decoy = static_cast<TokenId>(layout.decoy_begin + rng.uniform_index(cfg.answer_vocab));
    inst.question.push_back(key);
    while (inst.question.size() < cfg.question_length) inst.question.push_back(filler());

    for (std::size_t n = 0; n < cfg.passages_per_question; ++n) {
      Passage p;
      p.rank = n;
      p.tokens.resize(cfg.passage_length);
      for (auto& t : p.tokens) t = filler();
      const bool relevant = rng.bernoulli(cfg.relevance_prior(n));
      p.label = relevant ? 1 : 0;
      if (!relevant && rng.bernoulli(s * cfg.plain_fraction)) {
        inst.passages.push_back(std::move(p));
        continue;
      }
      const std::size_t at = rng.uniform_index(cfg.passage_length - 1);
      p.tokens[at] = relevant ? key : ans;
      p.tokens[at + 1] = relevant ? ans : key;
      const double answer_share = relevant ? 0.5 * (1.0 + s) : 0.5 * (1.0 - s);
      std::vector<bool> taken(cfg.passage_length, false);
      for (std::size_t i = at; i < std::min(at + 3, cfg.passage_length); ++i) taken[i] = true;
      for (std::size_t m = 0; m < cfg.mention_count; ++m) {
        std::size_t slot;
        do slot = rng.uniform_index(cfg.passage_length); while (taken[slot]);
        taken[slot] = true;
        p.tokens[slot] = rng.bernoulli(answer_share) ? ans : decoy;
      }
      inst.passages.push_back(std::move(p));
    }
    data.push_back(std::move(inst));
  }
  return data;
}

// ---------------------------------------------------------------------------
// Dataset file format
// ---------------------------------------------------------------------------
//
// UTF-8, one record per line, every line terminated by '\n':
//   qid<TAB>q:<ids><TAB>p:<rank>,<label>,<ids>[<TAB>p:...]
// where <ids> are space-separated decimal token ids.

inline std::string format_record(const QuestionInstance& q) {
  std::string out = q.id;
  out += "\tq:";
  for (std::size_t i = 0; i < q.question.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(q.question[i]);
  }
  for (const auto& p : q.passages) {
    out += "\tp:" + std::to_string(p.rank) + "," + std::to_string(p.label) + ",";
    for (std::size_t i = 0; i < p.tokens.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(p.tokens[i]);
    }
  }
  return out;
}

namespace detail {

inline std::vector<TokenId> parse_ids(std::string_view s, std::size_t line, std::size_t offset) {
  std::vector<TokenId> ids;
  std::size_t i = 0;
  while (i < s.size()) {
    std::size_t j = s.find(' ', i);
    if (j == std::string_view::npos) j = s.size();
    const std::string_view tok = s.substr(i, j - i);
    TokenId v = 0;
    const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (tok.empty() || ec != std::errc{} || ptr != tok.data() + tok.size()) {
      throw ParseError("bad token id '" + std::string(tok) + "'", line, offset + i);
    }
    ids.push_back(v);
    i = j + 1;
  }
  if (ids.empty()) throw ParseError("empty token list", line, offset);
  return ids;
}

inline std::size_t parse_count(std::string_view s, std::size_t line, std::size_t offset) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size()) {
    throw ParseError("bad integer '" + std::string(s) + "'", line, offset);
  }
  return v;
}

}  // namespace detail

/// Parses one record (without its newline). `line_offset` is the byte offset
/// of the line start within the file, used for error positions.
inline QuestionInstance parse_record(std::string_view line, std::size_t line_no,
                                     std::size_t line_offset = 0) {
  std::vector<std::pair<std::string_view, std::size_t>> fields;
  std::size_t start = 0;
  for (;;) {
    const std::size_t tab = line.find('\t', start);
    fields.emplace_back(line.substr(start, tab - start), line_offset + start);
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  if (fields.size() < 3) {
    throw ParseError("expected qid, question and at least one passage", line_no,
                     line_offset + line.size());
  }
  QuestionInstance q;
  if (fields[0].first.empty()) throw ParseError("empty question id", line_no, fields[0].second);
  q.id = std::string(fields[0].first);

  const auto [qfield, qoff] = fields[1];
  if (!qfield.starts_with("q:")) throw ParseError("expected 'q:' field", line_no, qoff);
  q.question = detail::parse_ids(qfield.substr(2), line_no, qoff + 2);

  for (std::size_t f = 2; f < fields.size(); ++f) {
    const auto [pfield, poff] = fields[f];
    if (!pfield.starts_with("p:")) throw ParseError("expected 'p:' field", line_no, poff);
    const std::string_view body = pfield.substr(2);
    const std::size_t c1 = body.find(',');
    const std::size_t c2 = c1 == std::string_view::npos ? c1 : body.find(',', c1 + 1);
    if (c2 == std::string_view::npos) {
      throw ParseError("passage field needs rank,label,tokens", line_no, poff);
    }
    Passage p;
    p.rank = detail::parse_count(body.substr(0, c1), line_no, poff + 2);
    const std::size_t label = detail::parse_count(body.substr(c1 + 1, c2 - c1 - 1), line_no,
                                                  poff + 3 + c1);
    if (label > 1) throw ParseError("label must be 0 or 1", line_no, poff + 3 + c1);
    p.label = static_cast<int>(label);
    if (p.rank != q.passages.size()) {
      throw ParseError("passage ranks must be 0..N-1 in order", line_no, poff + 2);
    }
    p.tokens = detail::parse_ids(body.substr(c2 + 1), line_no, poff + 3 + c2);
    q.passages.push_back(std::move(p));
  }
  return q;
}

inline std::string format_dataset(const Dataset& data) {
  std::string out;
  for (const auto& q : data) {
    out += format_record(q);
    out += '\n';
  }
  return out;
}

/// Parses a whole file image. An unterminated final line is reported as
/// truncated.
inline Dataset parse_dataset(std::string_view text) {
  Dataset data;
  std::size_t pos = 0;
  std::size_t line_no = 1;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) {
      throw ParseError("truncated record (missing newline)", line_no, text.size());
    }
    data.push_back(parse_record(text.substr(pos, nl - pos), line_no, pos));
    pos = nl + 1;
    ++line_no;
  }
  return data;
}

inline void write_dataset(const Dataset& data, const std::string& path) {
  write_file_bytes(path, format_dataset(data));
}

inline Dataset read_dataset(const std::string& path) { return parse_dataset(read_file_bytes(path)); }

}  // namespace ape
