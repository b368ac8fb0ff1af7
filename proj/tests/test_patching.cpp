#include <gtest/gtest.h>

#include <numeric>

#include "droppatch/error.hpp"
#include "droppatch/patching.hpp"
#include "test_util.hpp"

using namespace droppatch;
using namespace droppatch::patch;

namespace {
std::vector<double> iota_window(std::size_t n) {
  std::vector<double> w(n);
  std::iota(w.begin(), w.end(), 0.0);
  return w;
}
}  // namespace

TEST(Patchify, DefaultLookbackDropsOldestRemainder) {
  auto w = iota_window(512);
  auto ps = patchify(w, {12});
  EXPECT_EQ(ps.count(), 42u);
  EXPECT_EQ(ps.patch_len(), 12u);
  EXPECT_EQ(ps.patches(0, 0), 8.0);      // steps 0..7 discarded
  EXPECT_EQ(ps.patches(41, 11), 511.0);  // most recent step kept
  for (std::size_t i = 0; i < 42; ++i) EXPECT_EQ(ps.original_positions[i], i);
}

TEST(Patchify, ColdStartShape) {
  auto ps = patchify(iota_window(96), {12});
  EXPECT_EQ(ps.count(), 8u);
  EXPECT_EQ(ps.patches(0, 0), 0.0);
}

TEST(Patchify, SinglePatchIsWindow) {
  auto w = iota_window(12);
  auto ps = patchify(w, {12});
  EXPECT_EQ(ps.count(), 1u);
  EXPECT_EQ(ps.patches.values, w);
  EXPECT_EQ(unpatchify(ps), w);
}

TEST(Patchify, ShortWindowIsError) {
  EXPECT_THROW(patchify(iota_window(11), {12}), DataError);
  EXPECT_THROW(patchify(iota_window(11), {0}), ConfigError);
}

TEST(Patchify, RoundTrips) {
  Rng rng(13);
  std::vector<double> w(504);
  for (auto& v : w) v = standard_normal(rng);
  EXPECT_EQ(unpatchify(patchify(w, {12})), w);

  auto w512 = iota_window(512);
  auto tail = std::vector<double>(w512.begin() + 8, w512.end());
  EXPECT_EQ(unpatchify(patchify(w512, {12})), tail);
}

TEST(Patchify, PropertySweep) {
  Rng rng(21);
  for (std::size_t len = 1; len < 80; len += 3) {
    for (std::size_t lp = 1; lp <= len; lp += 2) {
      std::vector<double> w(len);
      for (auto& v : w) v = uniform(rng, -5, 5);
      auto ps = patchify(w, {lp});
      ASSERT_EQ(ps.count(), patch_count(len, {lp}));
      ASSERT_EQ(ps.count(), len / lp);
      // unpatchify then patchify is the identity on the set
      auto again = patchify(unpatchify(ps), {lp});
      ASSERT_EQ(again, ps);
      // conservation over the covered region
      const std::size_t skip = len - ps.count() * lp;
      double a = 0.0, b = 0.0;
      for (std::size_t i = skip; i < len; ++i) a += w[i];
      for (double v : ps.patches.values) b += v;
      ASSERT_NEAR(a, b, 1e-12 * (1 + std::abs(a)));
    }
  }
}
