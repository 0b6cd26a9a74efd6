#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "rethseg/grad_check.hpp"
#include "rethseg/ops.hpp"
#include "rethseg/patch.hpp"
#include "test_util.hpp"

namespace rethseg {
namespace {

using testing::random_extent;
using testing::random_tensor;

TEST(Image2Patches, SingleSliceIsWholeMap) {
  std::mt19937_64 rng(1);
  auto u = random_tensor({4, 6, 2}, rng);
  auto seq = image2patches(u, 1);
  EXPECT_EQ(seq.patches.shape(), (Shape{1, 4, 6, 2}));
  EXPECT_EQ(seq.patches.storage(), u.storage());
  EXPECT_EQ(patches2image(seq), u);
}

TEST(Image2Patches, RasterOrderOnIndexedMap) {
  Tensor<double> u({4, 4, 1});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) u.at(i, j, 0) = static_cast<double>(10 * i + j);
  auto seq = image2patches(u, 2);
  ASSERT_EQ(seq.patches.shape(), (Shape{4, 2, 2, 1}));
  const auto& p = seq.patches.storage();
  EXPECT_EQ(std::vector<double>(p.begin(), p.begin() + 4), (std::vector<double>{0, 1, 10, 11}));
  EXPECT_EQ(std::vector<double>(p.begin() + 12, p.end()), (std::vector<double>{22, 23, 32, 33}));
}

TEST(Image2Patches, MatchesIndexFormula) {
  std::mt19937_64 rng(2);
  auto u = random_tensor({8, 8, 3}, rng);
  const std::size_t n = 4;
  auto seq = image2patches(u, n);
  ASSERT_EQ(seq.patches.shape(), (Shape{16, 2, 2, 3}));
  for (std::size_t t = 0; t < 16; ++t)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t d = 0; d < 3; ++d)
          EXPECT_EQ(seq.patches.at(t, i, j, d), u.at((t / n) * 2 + i, (t % n) * 2 + j, d));
}

TEST(Image2Patches, RejectsRemainderNamingExtents) {
  try {
    image2patches(Tensor<double>({6, 8, 1}), 4);
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("6x8"), std::string::npos);
    EXPECT_NE(msg.find("n=4"), std::string::npos);
  }
  EXPECT_THROW(image2patches(Tensor<double>({4, 4, 1}), 0), ShapeError);
}

TEST(Patches2Image, RejectsInconsistentExtents) {
  PatchSequence<double> bad{Tensor<double>({4, 2, 2, 1}), 2, 4, 6};
  EXPECT_THROW(patches2image(bad), ShapeError);
  PatchSequence<double> wrong_count{Tensor<double>({3, 2, 2, 1}), 2, 4, 4};
  EXPECT_THROW(patches2image(wrong_count), ShapeError);
}

TEST(PatchAlgebra, RoundTripIsBitExactAndPermutesValues) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = random_extent(rng, 1, 4);
    const Shape shape{n * random_extent(rng, 1, 4), n * random_extent(rng, 1, 4), random_extent(rng, 1, 4)};
    auto u = random_tensor(shape, rng);
    auto seq = image2patches(u, n);
    ASSERT_EQ(patches2image(seq), u);
    auto a = u.storage();
    auto b = seq.patches.storage();
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    ASSERT_EQ(a, b);
  }
}

TEST(PatchAlgebra, TapeRoundTripGradientIsIdentity) {
  std::mt19937_64 rng(4);
  auto u = random_tensor({6, 4, 2}, rng);
  Tensor<double> w = random_tensor({6, 4, 2}, rng);
  const double err = grad_check(
      [&](Tape<double>& tape, Var<double> x) {
        return sum(mul(patches2image(image2patches(x, 2), 2), tape.constant(w)));
      },
      u, 1e-4);  // linear map: no truncation error, larger step limits rounding
  EXPECT_LT(err, 1e-10);

  Tape<double> tape;
  auto x = tape.leaf(u, true);
  tape.backward(sum(mul(patches2image(image2patches(x, 2), 2), tape.constant(w))));
  for (std::size_t i = 0; i < u.size(); ++i) EXPECT_EQ(x.grad()[i], w[i]);
}

TEST(PatchAlgebra, TapeOpsAgreeWithTensorOps) {
  std::mt19937_64 rng(5);
  auto u = random_tensor({4, 8, 3}, rng);
  Tape<double> tape;
  auto p = image2patches(tape.constant(u), 2);
  EXPECT_EQ(p.value(), image2patches(u, 2).patches);
  EXPECT_EQ(patches2image(p, 2).value(), u);
}

}  // namespace
}  // namespace rethseg
