// SPDX-License-Identifier: Apache-2.0
//
// Synthetic molecular domain.
//
// Vocabulary (32 symbols):
//   0 PAD, 1 BOS, 2 EOS                      control, never in text form
//   C N O S P F B K                          backbone atoms
//   ( )                                      branch open / close
//   1 2 3                                    ring-analogue markers
//   a..p                                     side groups
//
// Decoding is total. Tokens are read left to right:
//   * a backbone token appends an atom to the current chain;
//   * a ring or side-group token decorates the anchor: the last atom of the
//     current chain, or the atom the current branch hangs off when the chain
//     is still empty; with no anchor it is dropped;
//   * '(' opens a branch off the last atom of the current chain (dropped
//     while the current chain is empty);
//   * ')' closes the innermost open branch, unmatched closes are ignored;
//   * EOS stops decoding, PAD and BOS are ignored;
//   * branches still open at the end are closed, branches without atoms
//     are removed.
// Decorations are stored as sorted multisets, so the canonical key is the
// depth-first serialization  atom rings sides (branch)(branch)...  with
// trailing ')' omitted (they are implied), and the empty structure written as
// "∅". The canonical form is never longer than the input. The skeleton key
// drops side groups.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "moltenflow/error.hpp"
#include "moltenflow/rng.hpp"

namespace moltenflow::toy {

using Token = std::uint8_t;
using TokenString = std::vector<Token>;

inline constexpr std::size_t kVocabSize = 32;
inline constexpr std::size_t kMaxLen = 64;
inline constexpr std::size_t kFeatureBits = 512;
inline constexpr Token kPad = 0;
inline constexpr Token kBos = 1;
inline constexpr Token kEos = 2;
inline constexpr const char* kEmptyKey = "\xE2\x88\x85";  // "∅"

// Text symbol of every token id; control tokens have no text form.
inline constexpr std::string_view kSymbols{"\0\0\0CNOSPFBK()123abcdefghijklmnop", 32};
inline constexpr std::string_view kBackbone = "CNOSPFBK";
inline constexpr std::string_view kRings = "123";
inline constexpr std::string_view kSides = "abcdefghijklmnop";
static_assert(kSymbols.size() == kVocabSize);

enum class TokenKind { Control, Backbone, Open, Close, Ring, Side };

inline TokenKind kind_of(Token t) {
  if (t <= kEos) return TokenKind::Control;
  const char c = kSymbols[t];
  if (c == '(') return TokenKind::Open;
  if (c == ')') return TokenKind::Close;
  if (c >= '1' && c <= '3') return TokenKind::Ring;
  if (c >= 'a' && c <= 'p') return TokenKind::Side;
  return TokenKind::Backbone;
}

inline Token token_of(char c) {
  for (std::size_t i = 3; i < kSymbols.size(); ++i)
    if (kSymbols[i] == c) return static_cast<Token>(i);
  throw ContractViolation(std::string("toyset: unknown symbol '") + c + "'");
}

inline TokenString parse_tokens(std::string_view text) {
  require(text.size() <= kMaxLen, "toyset: token string longer than " + std::to_string(kMaxLen));
  TokenString out;
  out.reserve(text.size());
  for (char c : text) out.push_back(token_of(c));
  return out;
}

inline std::string to_text(const TokenString& tokens) {
  std::string s;
  for (Token t : tokens) {
    require(t < kVocabSize, "toyset: token id out of range");
    if (t > kEos) s.push_back(kSymbols[t]);
  }
  return s;
}

/// Fixed-width bit set of hashed token n-grams.
class FeatureSet {
 public:
  explicit FeatureSet(std::size_t width = kFeatureBits) : width_(width), words_((width + 63) / 64, 0) {}

  std::size_t width() const noexcept { return width_; }
  void set(std::size_t bit) { words_[bit / 64] |= std::uint64_t{1} << (bit % 64); }
  bool test(std::size_t bit) const { return (words_[bit / 64] >> (bit % 64)) & 1u; }
  std::size_t count() const {
    std::size_t c = 0;
    for (auto w : words_) c += static_cast<std::size_t>(__builtin_popcountll(w));
    return c;
  }
  const std::vector<std::uint64_t>& words() const noexcept { return words_; }

  friend bool operator==(const FeatureSet&, const FeatureSet&) = default;

 private:
  std::size_t width_;
  std::vector<std::uint64_t> words_;
};

/// |A ∩ B| / |A ∪ B|, 1 when both are empty.
inline double tanimoto(const FeatureSet& a, const FeatureSet& b) {
  require(a.width() == b.width(), "tanimoto: feature widths differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.words().size(); ++i) {
    inter += static_cast<std::size_t>(__builtin_popcountll(a.words()[i] & b.words()[i]));
    uni += static_cast<std::size_t>(__builtin_popcountll(a.words()[i] | b.words()[i]));
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct Descriptors {
  int atoms = 0;
  int branches = 0;
  int max_depth = 0;
  int rings = 0;
  int sides = 0;
  int hetero = 0;
  int tokens = 0;
  int skeleton_tokens = 0;
};

struct Structure {
  std::string canonical_key;
  std::string skeleton_key;
  TokenString canonical_tokens;
  FeatureSet features;
  Descriptors desc;
};

struct PropertyVector {
  double p1 = 0.0;  // maximize, [0, 1]
  double p2 = 1.0;  // minimize, [1, 10]
  friend bool operator==(const PropertyVector&, const PropertyVector&) = default;
};

namespace detail {

struct Atom {
  char symbol = 'C';
  std::string rings;
  std::string sides;
  std::vector<int> children;  // chain ids
};
struct Chain {
  int parent = -1;  // atom id this branch hangs off, -1 for the root chain
  std::vector<int> atoms;
};
struct Tree {
  std::vector<Atom> atoms;
  std::vector<Chain> chains;
};

inline std::uint64_t fnv1a(const Token* p, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline void serialize_chain(const Tree& t, int c, std::string& out, int depth, Descriptors& d) {
  d.max_depth = std::max(d.max_depth, depth);
  for (int a : t.chains[static_cast<std::size_t>(c)].atoms) {
    const Atom& at = t.atoms[static_cast<std::size_t>(a)];
    out.push_back(at.symbol);
    out += at.rings;
    out += at.sides;
    for (int ch : at.children) {
      out.push_back('(');
      serialize_chain(t, ch, out, depth + 1, d);
      out.push_back(')');
    }
  }
}

}  // namespace detail

inline FeatureSet ngram_features(const TokenString& tokens) {
  FeatureSet f;
  for (std::size_t n = 1; n <= 3; ++n)
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
      const std::uint64_t h = detail::fnv1a(tokens.data() + i, n, 0xcbf29ce484222325ULL ^ n);
      f.set(static_cast<std::size_t>(h % kFeatureBits));
    }
  return f;
}

/// Total decoding of any token sequence over the vocabulary.
inline Structure decode(const TokenString& tokens) {
  detail::Tree t;
  t.chains.push_back({});
  std::vector<int> stack{0};
  auto anchor = [&]() -> int {
    const auto& ch = t.chains[static_cast<std::size_t>(stack.back())];
    return ch.atoms.empty() ? ch.parent : ch.atoms.back();
  };
  for (Token tok : tokens) {
    require(tok < kVocabSize, "decode: token id out of range");
    const TokenKind k = kind_of(tok);
    if (tok == kEos) break;
    switch (k) {
      case TokenKind::Control: break;
      case TokenKind::Backbone: {
        const int id = static_cast<int>(t.atoms.size());
        t.atoms.push_back({kSymbols[tok], {}, {}, {}});
        t.chains[static_cast<std::size_t>(stack.back())].atoms.push_back(id);
        break;
      }
      case TokenKind::Ring:
      case TokenKind::Side: {
        const int a = anchor();
        if (a < 0) break;
        auto& atom = t.atoms[static_cast<std::size_t>(a)];
        (k == TokenKind::Ring ? atom.rings : atom.sides).push_back(kSymbols[tok]);
        break;
      }
      case TokenKind::Open: {
        const auto& cur = t.chains[static_cast<std::size_t>(stack.back())];
        if (cur.atoms.empty()) break;
        const int a = cur.atoms.back();
        const int c = static_cast<int>(t.chains.size());
        t.chains.push_back({a, {}});
        t.atoms[static_cast<std::size_t>(a)].children.push_back(c);
        stack.push_back(c);
        break;
      }
      case TokenKind::Close:
        if (stack.size() > 1) stack.pop_back();
        break;
    }
  }
  Descriptors d;
  for (auto& atom : t.atoms) {
    std::sort(atom.rings.begin(), atom.rings.end());
    std::sort(atom.sides.begin(), atom.sides.end());
    std::erase_if(atom.children, [&](int c) { return t.chains[static_cast<std::size_t>(c)].atoms.empty(); });
    d.branches += static_cast<int>(atom.children.size());
    d.rings += static_cast<int>(atom.rings.size());
    d.sides += static_cast<int>(atom.sides.size());
    if (atom.symbol != 'C') ++d.hetero;
  }
  d.atoms = static_cast<int>(t.atoms.size());

  Structure s;
  std::string key;
  detail::serialize_chain(t, 0, key, 0, d);
  while (!key.empty() && key.back() == ')') key.pop_back();
  if (t.atoms.empty()) d.max_depth = 0;
  s.canonical_tokens.reserve(key.size());
  for (char c : key) s.canonical_tokens.push_back(token_of(c));
  std::string skel;
  for (char c : key)
    if (!(c >= 'a' && c <= 'p')) skel.push_back(c);
  d.tokens = static_cast<int>(key.size());
  d.skeleton_tokens = static_cast<int>(skel.size());
  s.canonical_key = key.empty() ? std::string(kEmptyKey) : key;
  s.skeleton_key = skel.empty() ? std::string(kEmptyKey) : skel;
  s.features = ngram_features(s.canonical_tokens);
  s.desc = d;
  return s;
}

/// Canonical token string; decode(encode(s)) reproduces s.
inline TokenString encode(const Structure& s) { return s.canonical_tokens; }

/// Skeleton key derived from a canonical key (side groups stripped).
inline std::string skeleton_of(const std::string& canonical_key) {
  if (canonical_key == kEmptyKey) return canonical_key;
  std::string out;
  for (char c : canonical_key)
    if (!(c >= 'a' && c <= 'p')) out.push_back(c);
  return out.empty() ? std::string(kEmptyKey) : out;
}

// Property oracle constants.
//   p1 = exp(-(q_len + q_side + q_het + q_branch) / 4), a geometric mean of
//        four Gaussian desirabilities exp(-q):
//        q_len    = ((atoms - 12) / 5)^2
//        q_side   = ((sides - 3) / 2.5)^2
//        q_het    = ((hetero / atoms - 0.3) / 0.3)^2   (fraction 0 when empty)
//        q_branch = ((branches - 2) / 1.5)^2
//   p2 = 1 + 9 * (1 - exp(-c / 2)),
//        c = 0.035 atoms + 0.2 branches + 0.15 depth^2 + 0.35 rings + 0.03 sides
// The p1 optimum needs twelve atoms and two branches, both of which raise p2.
struct OracleConstants {
  static constexpr double len_center = 12.0, len_width = 5.0;
  static constexpr double side_center = 3.0, side_width = 2.5;
  static constexpr double het_center = 0.3, het_width = 0.3;
  static constexpr double branch_center = 2.0, branch_width = 1.5;
  static constexpr double c_atom = 0.035, c_branch = 0.2, c_depth = 0.15, c_ring = 0.35,
                          c_side = 0.03, c_scale = 2.0;
};

inline double complexity(const Descriptors& d) {
  using K = OracleConstants;
  return K::c_atom * d.atoms + K::c_branch * d.branches +
         K::c_depth * d.max_depth * d.max_depth + K::c_ring * d.rings + K::c_side * d.sides;
}

inline PropertyVector oracle_properties(const Structure& s) {
  using K = OracleConstants;
  const Descriptors& d = s.desc;
  auto q = [](double x, double c, double w) { return ((x - c) / w) * ((x - c) / w); };
  const double het = d.atoms > 0 ? static_cast<double>(d.hetero) / d.atoms : 0.0;
  const double qsum = q(d.atoms, K::len_center, K::len_width) + q(d.sides, K::side_center, K::side_width) +
                      q(het, K::het_center, K::het_width) +
                      q(d.branches, K::branch_center, K::branch_width);
  PropertyVector p;
  p.p1 = std::exp(-qsum / 4.0);
  p.p2 = 1.0 + 9.0 * (1.0 - std::exp(-complexity(d) / K::c_scale));
  return p;
}

// ---------------------------------------------------------------- datasets

struct LengthBounds {
  int min_atoms = 2;
  int max_atoms = 20;
  std::size_t max_tokens = 48;
};

enum class Split { Train, Validation, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "?";
}

struct Record {
  TokenString tokens;  // canonical
  PropertyVector props;
};

struct Dataset {
  std::vector<Record> records;
  std::vector<Split> split;

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == s) out.push_back(i);
    return out;
  }
  std::vector<Record> subset(Split s) const {
    std::vector<Record> out;
    for (std::size_t i : indices(s)) out.push_back(records[i]);
    return out;
  }
};

/// Skeleton-grouped split: groups are ordered by a 64-bit FNV-1a hash of the
/// skeleton key (key as tie-break); the first round(0.81 G) groups go to
/// train, the next round(0.09 G) to validation, the rest to test. Singleton
/// groups are treated like any other group.
inline std::vector<Split> skeleton_split(const std::vector<Record>& records,
                                         double train_frac = 0.81, double val_frac = 0.09) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < records.size(); ++i)
    groups[decode(records[i].tokens).skeleton_key].push_back(i);
  std::vector<std::pair<std::uint64_t, std::string>> order;
  for (const auto& [key, _] : groups) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : key) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    order.emplace_back(h, key);
  }
  std::sort(order.begin(), order.end());
  const std::size_t g = order.size();
  const auto n_train = static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(g)));
  const auto n_val = std::min(g - std::min(g, n_train),
                              static_cast<std::size_t>(std::llround(val_frac * static_cast<double>(g))));
  std::vector<Split> out(records.size(), Split::Test);
  for (std::size_t k = 0; k < g; ++k) {
    const Split s = k < n_train ? Split::Train : (k < n_train + n_val ? Split::Validation : Split::Test);
    for (std::size_t i : groups[order[k].second]) out[i] = s;
  }
  return out;
}

/// One random structure from the generative walk:
///   target atom count ~ U{min_atoms..max_atoms};
///   each atom is 'C' w.p. 0.6, otherwise uniform over the other backbone symbols;
///   it carries a ring marker w.p. 0.1, a side group w.p. 0.3 and a second one w.p. 0.15;
///   below depth 2 a branch of 1-4 atoms is opened w.p. 0.18 (drawn from the atom budget).
/// The token string is truncated to max_tokens and returned in canonical form.
inline TokenString random_walk_tokens(Rng& rng, const LengthBounds& b) {
  require(b.min_atoms >= 0 && b.max_atoms >= b.min_atoms, "random_walk: bad atom bounds");
  std::string text;
  int budget = b.min_atoms + static_cast<int>(rng.index(static_cast<std::size_t>(b.max_atoms - b.min_atoms + 1)));
  auto atom = [&](std::string& out) {
    out.push_back(rng.bernoulli(0.6) ? 'C' : kBackbone[1 + rng.index(kBackbone.size() - 1)]);
    if (rng.bernoulli(0.1)) out.push_back(kRings[rng.index(kRings.size())]);
    if (rng.bernoulli(0.3)) {
      out.push_back(kSides[rng.index(kSides.size())]);
      if (rng.bernoulli(0.15)) out.push_back(kSides[rng.index(kSides.size())]);
    }
  };
  auto chain = [&](auto&& self, int n, int depth, std::string& out) -> void {
    for (int i = 0; i < n && budget > 0; ++i) {
      atom(out);
      --budget;
      if (depth < 2 && budget > 1 && rng.bernoulli(0.18)) {
        const int len = std::min(budget - 1, 1 + static_cast<int>(rng.index(4)));
        out.push_back('(');
        self(self, len, depth + 1, out);
        out.push_back(')');
      }
    }
  };
  chain(chain, budget, 0, text);
  if (text.size() > b.max_tokens) text.resize(b.max_tokens);
  return encode(decode(parse_tokens(text.substr(0, std::min(text.size(), kMaxLen)))));
}

/// Deterministic dataset of `count` distinct structures with oracle labels and
/// a skeleton split.
inline Dataset generate_dataset(std::uint64_t seed, std::size_t count, const LengthBounds& bounds = {}) {
  require(count >= 1, "generate_dataset: count must be >= 1");
  require(bounds.max_tokens <= kMaxLen, "generate_dataset: max_tokens exceeds max length");
  Rng rng(seed);
  Dataset ds;
  std::map<std::string, bool> seen;
  const std::size_t max_attempts = 50 * count + 1000;
  for (std::size_t attempt = 0; ds.records.size() < count && attempt < max_attempts; ++attempt) {
    TokenString toks = random_walk_tokens(rng, bounds);
    Structure s = decode(toks);
    if (!seen.emplace(s.canonical_key, true).second) continue;
    ds.records.push_back({toks, oracle_properties(s)});
  }
  ds.split = skeleton_split(ds.records);
  return ds;
}

// Line format: tokens<TAB>p1<TAB>p2, values printed with 17 significant digits.
inline std::string format_record(const Record& r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "\t%.17g\t%.17g", r.props.p1, r.props.p2);
  return to_text(r.tokens) + buf;
}

inline void write_dataset(const std::string& path, const std::vector<Record>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write dataset", path);
  for (const auto& r : records) out << format_record(r) << '\n';
  if (!out) throw IoError("short write", path);
}

inline std::vector<Record> read_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset", path);
  std::vector<Record> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos)
      throw IoError("malformed dataset line " + std::to_string(lineno), path);
    Record r;
    r.tokens = parse_tokens(std::string_view(line).substr(0, t1));
    r.props.p1 = std::stod(line.substr(t1 + 1, t2 - t1 - 1));
    r.props.p2 = std::stod(line.substr(t2 + 1));
    out.push_back(std::move(r));
  }
  return out;
}

inline Dataset read_dataset(const std::string& path) {
  Dataset ds;
  ds.records = read_records(path);
  if (ds.records.empty()) throw IoError("empty dataset", path);
  ds.split = skeleton_split(ds.records);
  return ds;
}

}  // namespace moltenflow::toy
