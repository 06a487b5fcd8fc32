#include <gtest/gtest.h>

#include <atomic>
#include <set>

#include "xids/common.hpp"

using namespace xids;

TEST(SplitMix64, MatchesReferenceSequence) {
  // Reference outputs of splitmix64 seeded with 1234567.
  detail::SplitMix64 rng(1234567);
  EXPECT_EQ(rng(), 6457827717110365317ULL);
  EXPECT_EQ(rng(), 3203168211198807973ULL);
  EXPECT_EQ(rng(), 9817491932198370423ULL);
}

TEST(SplitMix64, Uniform01InUnitInterval) {
  detail::SplitMix64 rng(9);
  for (int i = 0; i < 10000; ++i) {
    const double u = detail::uniform01(rng);
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}

TEST(SplitMix64, UniformIndexCoversRange) {
  detail::SplitMix64 rng(3);
  std::set<std::size_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto k = detail::uniform_index(rng, 7);
    ASSERT_LT(k, 7u);
    seen.insert(k);
  }
  EXPECT_EQ(seen.size(), 7u);
}

TEST(SampleWithoutReplacement, DistinctAndInRange) {
  detail::SplitMix64 rng(5);
  const auto s = detail::sample_without_replacement(rng, 50, 20);
  ASSERT_EQ(s.size(), 20u);
  std::set<std::size_t> u(s.begin(), s.end());
  EXPECT_EQ(u.size(), 20u);
  for (auto v : s) EXPECT_LT(v, 50u);
}

TEST(SampleWithoutReplacement, FullDrawIsPermutation) {
  detail::SplitMix64 rng(6);
  auto s = detail::sample_without_replacement(rng, 10, 10);
  std::sort(s.begin(), s.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(s[i], i);
}

TEST(DeriveSeed, StreamsDiffer) {
  EXPECT_NE(detail::derive_seed(42, 0), detail::derive_seed(42, 1));
  EXPECT_NE(detail::derive_seed(42, 0), detail::derive_seed(43, 0));
  EXPECT_EQ(detail::derive_seed(42, 7), detail::derive_seed(42, 7));
}

TEST(Fingerprint, Fnv1aKnownVectors) {
  // Standard FNV-1a 64-bit test vectors.
  EXPECT_EQ(detail::fingerprint(""), "cbf29ce484222325");
  EXPECT_EQ(detail::fingerprint("a"), "af63dc4c8601ec8c");
  EXPECT_EQ(detail::fingerprint("foobar"), "85944171f73967e8");
}

TEST(ParallelFor, VisitsEveryIndexOnce) {
  std::vector<std::atomic<int>> hits(257);
  detail::parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i]++; });
  for (auto& h : hits) EXPECT_EQ(h.load(), 1);
}

TEST(ParallelFor, PropagatesExceptions) {
  EXPECT_THROW(detail::parallel_for(10, 3,
                                    [](std::size_t i) {
                                      if (i == 5) throw Error(Errc::invalid_argument, "boom");
                                    }),
               Error);
}

TEST(FormatFixed, Rounds) {
  EXPECT_EQ(detail::format_fixed(0.98234, 2), "0.98");
  EXPECT_EQ(detail::format_fixed(0.0, 2), "0.00");
}

TEST(Error, CarriesCode) {
  try {
    throw Error(Errc::not_found, "x");
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::not_found);
    EXPECT_STREQ(errc_name(e.code()), "not_found");
  }
}
