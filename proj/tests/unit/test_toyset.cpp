// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <set>

#include "moltenflow/toyset.hpp"

using namespace moltenflow;
using namespace moltenflow::toy;

namespace {

TokenString random_string(Rng& rng, std::size_t max_len = kMaxLen) {
  TokenString t(rng.index(max_len + 1));
  for (auto& x : t) x = static_cast<Token>(rng.index(kVocabSize));
  return t;
}

FeatureSet bits(std::initializer_list<std::size_t> on, std::size_t width = kFeatureBits) {
  FeatureSet f(width);
  for (auto b : on) f.set(b);
  return f;
}

}  // namespace

TEST(Decode, EmptyStringIsMinimalStructure) {
  Structure s = decode({});
  EXPECT_EQ(s.canonical_key, kEmptyKey);
  EXPECT_EQ(s.skeleton_key, kEmptyKey);
  EXPECT_EQ(s.desc.atoms, 0);
  EXPECT_DOUBLE_EQ(oracle_properties(s).p2, 1.0);
}

TEST(Decode, RobustnessRules) {
  EXPECT_EQ(decode(parse_tokens(")C")).canonical_key, "C");
  EXPECT_EQ(decode(parse_tokens("C(N")).canonical_key, "C(N");
  EXPECT_EQ(decode(parse_tokens("C(N)")).canonical_key, "C(N");
  EXPECT_EQ(decode(parse_tokens("C(N)O")).canonical_key, "C(N)O");
  EXPECT_EQ(decode(parse_tokens("C((N)O")).canonical_key, "C(N)O");
  EXPECT_EQ(decode(parse_tokens("C()N")).canonical_key, "CN");
  EXPECT_EQ(decode(parse_tokens("a1(C")).canonical_key, "C");
  EXPECT_EQ(decode(parse_tokens("Cba")).canonical_key, "Cab");
  EXPECT_EQ(decode(parse_tokens("Cba")).skeleton_key, "C");
  TokenString eos = parse_tokens("CN");
  eos.insert(eos.begin() + 1, kEos);
  EXPECT_EQ(decode(eos).canonical_key, "C");
}

TEST(Decode, ParseRejectsUnknownSymbolsAndOverlongInput) {
  EXPECT_THROW(parse_tokens("Cx"), ContractViolation);
  EXPECT_THROW(parse_tokens(std::string(kMaxLen + 1, 'C')), ContractViolation);
}

TEST(Decode, UniformRandomStringsAlwaysDecode) {
  Rng rng(17);
  for (int i = 0; i < 100000; ++i) {
    const TokenString t = random_string(rng);
    Structure s = decode(t);
    ASSERT_FALSE(s.canonical_key.empty());
    ASSERT_LE(s.canonical_tokens.size(), std::min(kMaxLen, t.size()));
    ASSERT_EQ(s.skeleton_key, skeleton_of(s.canonical_key));
  }
}

TEST(Decode, EncodeDecodeRoundTrip) {
  Rng rng(5);
  for (int i = 0; i < 10000; ++i) {
    Structure s = decode(random_string(rng));
    Structure again = decode(encode(s));
    ASSERT_EQ(again.canonical_key, s.canonical_key);
    ASSERT_EQ(again.canonical_tokens, s.canonical_tokens);
    ASSERT_EQ(again.features, s.features);
  }
}

TEST(Decode, SkeletonInvariantUnderSideGroupSubstitution) {
  Rng rng(8);
  Dataset ds = generate_dataset(3, 500);
  for (const auto& r : ds.records) {
    TokenString mutated = r.tokens;
    for (auto& t : mutated)
      if (kind_of(t) == TokenKind::Side) t = token_of(kSides[rng.index(kSides.size())]);
    EXPECT_EQ(decode(mutated).skeleton_key, decode(r.tokens).skeleton_key);
  }
}

TEST(Oracle, BoundsOverRandomStructures) {
  Rng rng(23);
  for (int i = 0; i < 100000; ++i) {
    PropertyVector p = oracle_properties(decode(random_string(rng)));
    ASSERT_GE(p.p1, 0.0);
    ASSERT_LE(p.p1, 1.0);
    ASSERT_GE(p.p2, 1.0);
    ASSERT_LE(p.p2, 10.0);
  }
}

TEST(Oracle, PureFunctionOfCanonicalKey) {
  // Different spellings of the same structure.
  PropertyVector a = oracle_properties(decode(parse_tokens("C(Nba)O")));
  PropertyVector b = oracle_properties(decode(parse_tokens(")C(Nab)O(")));
  EXPECT_EQ(a, b);
}

TEST(Oracle, ObjectivesConflict) {
  // More atoms and branches toward the p1 optimum raise p2.
  PropertyVector small = oracle_properties(decode(parse_tokens("CC")));
  PropertyVector good = oracle_properties(decode(parse_tokens("CCNCaC(CCNb)CCO(CCc)C")));
  EXPECT_GT(good.p1, small.p1);
  EXPECT_GT(good.p2, small.p2);
}

TEST(Tanimoto, Examples) {
  EXPECT_DOUBLE_EQ(tanimoto(bits({1, 2, 3}), bits({2, 3, 4})), 0.5);
  EXPECT_DOUBLE_EQ(tanimoto(bits({1, 9}), bits({1, 9})), 1.0);
  EXPECT_DOUBLE_EQ(tanimoto(bits({1}), bits({2})), 0.0);
  EXPECT_DOUBLE_EQ(tanimoto(bits({}), bits({})), 1.0);
  EXPECT_THROW(tanimoto(bits({1}, 512), bits({1}, 256)), ContractViolation);
}

TEST(Tanimoto, SymmetricAndReflexive) {
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    Structure a = decode(random_string(rng)), b = decode(random_string(rng));
    EXPECT_EQ(tanimoto(a.features, b.features), tanimoto(b.features, a.features));
    EXPECT_EQ(tanimoto(a.features, a.features), 1.0);
  }
}

TEST(Dataset, DeterministicPerSeed) {
  Dataset a = generate_dataset(42, 300), b = generate_dataset(42, 300), c = generate_dataset(43, 300);
  ASSERT_EQ(a.records.size(), 300u);
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].tokens, b.records[i].tokens);
    EXPECT_EQ(a.records[i].props, b.records[i].props);
  }
  EXPECT_EQ(a.split, b.split);
  bool differs = false;
  for (std::size_t i = 0; i < a.records.size(); ++i) differs |= a.records[i].tokens != c.records[i].tokens;
  EXPECT_TRUE(differs);
}

TEST(Dataset, RecordsAreCanonicalDistinctAndWithinBounds) {
  LengthBounds lb;
  Dataset ds = generate_dataset(9, 1000, lb);
  std::set<std::string> keys;
  for (const auto& r : ds.records) {
    Structure s = decode(r.tokens);
    EXPECT_EQ(s.canonical_tokens, r.tokens);
    EXPECT_LE(r.tokens.size(), lb.max_tokens);
    EXPECT_TRUE(keys.insert(s.canonical_key).second);
    EXPECT_EQ(oracle_properties(s), r.props);
  }
}

TEST(Dataset, SkeletonSplitIsDisjointWithTargetFractions) {
  Dataset ds = generate_dataset(42, 3000);
  std::map<std::string, std::set<Split>> where;
  for (std::size_t i = 0; i < ds.records.size(); ++i)
    where[decode(ds.records[i].tokens).skeleton_key].insert(ds.split[i]);
  std::map<Split, std::size_t> groups;
  for (const auto& [key, s] : where) {
    EXPECT_EQ(s.size(), 1u) << key;
    ++groups[*s.begin()];
  }
  const double g = static_cast<double>(where.size());
  EXPECT_EQ(groups[Split::Train], static_cast<std::size_t>(std::llround(0.81 * g)));
  EXPECT_EQ(groups[Split::Validation], static_cast<std::size_t>(std::llround(0.09 * g)));
  EXPECT_EQ(groups[Split::Test], where.size() - groups[Split::Train] - groups[Split::Validation]);
}

TEST(Dataset, FileRoundTrip) {
  Dataset ds = generate_dataset(1, 50);
  const std::string path = ::testing::TempDir() + "toy_roundtrip.tsv";
  write_dataset(path, ds.records);
  Dataset back = read_dataset(path);
  ASSERT_EQ(back.records.size(), ds.records.size());
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    EXPECT_EQ(back.records[i].tokens, ds.records[i].tokens);
    EXPECT_EQ(back.records[i].props, ds.records[i].props);
  }
  EXPECT_EQ(back.split, ds.split);
  EXPECT_THROW(read_records(path + ".missing"), IoError);
}

#ifdef MOLTENFLOW_DATA_DIR
// The shipped benchmark file must be exactly what the generator and oracle produce.
TEST(Dataset, ShippedSeedFileMatchesGenerator) {
  const auto shipped = read_records(std::string(MOLTENFLOW_DATA_DIR) + "/toy_seed42.tsv");
  Dataset fresh = generate_dataset(42, shipped.size());
  ASSERT_EQ(fresh.records.size(), shipped.size());
  for (std::size_t i = 0; i < shipped.size(); ++i) {
    ASSERT_EQ(format_record(fresh.records[i]), format_record(shipped[i])) << "line " << i + 1;
  }
}
#endif
