#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "rethseg/data.hpp"
#include "rethseg/metrics.hpp"
#include "test_util.hpp"

namespace rethseg {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("rethseg_data_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

TEST(CoOccurrenceSpec, GroupsFollowPairs) {
  const CoOccurrenceSpec spec;
  EXPECT_EQ(spec.class_groups(), (std::vector<int>{0, 1, 2, 2, 3, 3}));
  EXPECT_EQ(spec.paired_classes(), (std::vector<int>{2, 3, 4, 5}));
}

TEST(CoOccurrenceSpec, KeyValueRoundTrip) {
  CoOccurrenceSpec spec;
  spec.num_classes = 7;
  spec.texture_pairs = {{1, 6}, {3, 4}};
  spec.noise_sigma = 0.125;
  spec.seed = 99;
  EXPECT_EQ(CoOccurrenceSpec::from_keyvalues(KeyValues::parse(spec.to_keyvalues().dump())), spec);
  spec.texture_pairs.clear();
  EXPECT_EQ(CoOccurrenceSpec::from_keyvalues(KeyValues::parse(spec.to_keyvalues().dump())), spec);
}

TEST(CoOccurrenceSpec, RejectsInvalidPairs) {
  CoOccurrenceSpec spec;
  spec.texture_pairs = {{2, 6}};
  EXPECT_THROW(spec.validate(), DataError);
  spec.texture_pairs = {{0, 1}};
  EXPECT_THROW(spec.validate(), DataError);
  spec.texture_pairs = {{2, 3}, {3, 4}};
  EXPECT_THROW(spec.validate(), DataError);
  spec.texture_pairs = {};
  spec.num_classes = 3;
  EXPECT_THROW(spec.validate(), DataError);
}

TEST(GenerateSample, DeterministicPerSeedAndIndex) {
  const CoOccurrenceSpec spec;
  const auto a = generate_sample(spec, 7), b = generate_sample(spec, 7), c = generate_sample(spec, 8);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_NE(a.mask, c.mask);
  auto other = spec;
  other.seed = 1;
  EXPECT_NE(generate_sample(other, 7).image, a.image);
}

TEST(GenerateSample, ValuesInRange) {
  const CoOccurrenceSpec spec;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const auto s = generate_sample(spec, i);
    EXPECT_EQ(s.image.shape(), (Shape{64, 64, 3}));
    for (double v : s.image.storage()) ASSERT_TRUE(v >= 0 && v <= 1);
    for (int l : s.mask) ASSERT_TRUE(l >= 0 && l < 6);
  }
}

TEST(GenerateSample, NoiselessUnpairedBlobsMatchTemplates) {
  CoOccurrenceSpec spec;
  spec.noise_sigma = 0;
  spec.texture_pairs.clear();
  const auto groups = spec.class_groups();
  for (std::uint64_t i = 0; i < 10; ++i) {
    const auto s = generate_sample(spec, i);
    for (std::size_t y = 0; y < 64; ++y) {
      for (std::size_t x = 0; x < 64; ++x) {
        const auto t = texture_color(groups[s.mask[y * 64 + x]], static_cast<long>(y), static_cast<long>(x));
        for (std::size_t c = 0; c < 3; ++c) ASSERT_EQ(s.image.at(y, x, c), t[c]);
      }
    }
  }
}

TEST(GenerateSample, PairedTexturesArePixelIdentical) {
  const CoOccurrenceSpec spec;
  const auto groups = spec.class_groups();
  for (const auto& [a, b] : spec.texture_pairs) {
    for (long y = 0; y < 8; ++y)
      for (long x = 0; x < 8; ++x) EXPECT_EQ(texture_color(groups[a], y, x), texture_color(groups[b], y, x));
  }
}

// For the default spec the rule reads: a {2,3} blob is 2 when its nearest
// other-texture blob is class 1 and 3 otherwise; a {4,5} blob is 4 next to
// class 1 and 5 next to {2,3}.
TEST(GenerateLayout, PairedLabelsFollowNearestContext) {
  const CoOccurrenceSpec spec;
  std::size_t paired = 0;
  for (std::uint64_t i = 0; i < 200; ++i) {
    const auto blobs = generate_layout(spec, i);
    std::set<int> present;
    for (const auto& b : blobs) present.insert(b.group);
    if (blobs.size() >= 2) {
      EXPECT_GE(present.size(), 2u);
    }
    for (const auto& b : blobs) {
      if (b.group == 1) {
        EXPECT_EQ(b.label, 1);
        continue;
      }
      const Blob* nearest = nullptr;
      for (const auto& o : blobs) {
        if (o.group == b.group) continue;
        if (nearest == nullptr ||
            std::hypot(o.cy - b.cy, o.cx - b.cx) < std::hypot(nearest->cy - b.cy, nearest->cx - b.cx)) {
          nearest = &o;
        }
      }
      ASSERT_NE(nearest, nullptr);
      const bool next_to_one = nearest->group == 1;
      if (b.group == 2) {
        EXPECT_EQ(b.label, next_to_one ? 2 : 3);
      }
      if (b.group == 3) {
        EXPECT_EQ(b.label, next_to_one ? 4 : 5);
      }
      ++paired;
    }
  }
  EXPECT_GT(paired, 500u);
}

TEST(WindowOracle, PairedClassesStayAmbiguous) {
  const CoOccurrenceSpec spec;
  ConfusionMatrix cm(spec.num_classes);
  for (std::uint64_t i = 0; i < 100; ++i) {
    const auto s = generate_sample(spec, i);
    cm.accumulate(window_oracle_predict(spec, s.image), s.mask);
  }
  const auto iou = per_class_iou(cm);
  double paired = 0;
  for (int c : spec.paired_classes()) paired += iou[c];
  paired /= 4;
  EXPECT_LE(paired, 0.55);
  EXPECT_GT(iou[1], 0.6);  // unpaired texture is recognized locally
  EXPECT_EQ(iou[3], 0.0);  // the upper member of each pair is never chosen
  EXPECT_EQ(iou[5], 0.0);
}

TEST(Augment, IdentityDrawIsSubWindow) {
  const auto s = generate_sample(CoOccurrenceSpec{}, 3);
  const auto out = apply_augment(s, AugmentParams{0, 1, false, 8, 5}, 48, 40);
  ASSERT_EQ(out.image.shape(), (Shape{48, 40, 3}));
  for (std::size_t y = 0; y < 48; ++y) {
    for (std::size_t x = 0; x < 40; ++x) {
      ASSERT_EQ(out.mask[y * 40 + x], s.mask[(y + 8) * 64 + x + 5]);
      for (std::size_t c = 0; c < 3; ++c) ASSERT_EQ(out.image.at(y, x, c), s.image.at(y + 8, x + 5, c));
    }
  }
}

TEST(Augment, FlipIsAnInvolution) {
  const auto s = generate_sample(CoOccurrenceSpec{}, 4);
  const AugmentParams flip{0, 1, true, 0, 0};
  const auto twice = apply_augment(apply_augment(s, flip, 64, 64), flip, 64, 64);
  EXPECT_EQ(twice.image, s.image);
  EXPECT_EQ(twice.mask, s.mask);
  const auto once = apply_augment(s, flip, 64, 64);
  EXPECT_EQ(once.mask[5], s.mask[58]);
}

TEST(Augment, BlobCentresKeepTheirClass) {
  const CoOccurrenceSpec spec;
  Rng rng(5);
  std::size_t checked = 0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    const auto s = generate_sample(spec, i);
    const auto blobs = generate_layout(spec, i);
    const AugmentParams p = draw_augment(rng, 64, 64, 48, 48);
    const auto out = apply_augment(s, p, 48, 48);
    // forward map: rotate and zoom about the centre, flip, then crop
    const double c = 31.5, th = p.theta_deg * std::acos(-1.0) / 180.0;
    for (const auto& b : blobs) {
      const double dy = b.cy - c, dx = b.cx - c;
      const double ty = c + p.zoom * (std::cos(th) * dy - std::sin(th) * dx);
      double tx = c + p.zoom * (std::sin(th) * dy + std::cos(th) * dx);
      if (p.flip) tx = 63 - tx;
      const long y = std::lround(ty) - static_cast<long>(p.crop_y), x = std::lround(tx) - static_cast<long>(p.crop_x);
      if (y < 0 || x < 0 || y >= 48 || x >= 48) continue;
      ASSERT_EQ(out.mask[static_cast<std::size_t>(y * 48 + x)], b.label) << "sample " << i;
      ++checked;
    }
  }
  EXPECT_GT(checked, 300u);
}

TEST(Augment, NeverInventsClasses) {
  const CoOccurrenceSpec spec;
  Rng rng(6);
  for (std::uint64_t i = 0; i < 50; ++i) {
    const auto s = generate_sample(spec, i);
    const std::set<int> before(s.mask.begin(), s.mask.end());
    const auto out = augment(s, rng, 48, 48);
    for (int l : out.mask) ASSERT_TRUE(l == kIgnoreIndex || before.count(l) == 1);
    for (double v : out.image.storage()) ASSERT_TRUE(v >= 0 && v <= 1 + 1e-12);
  }
}

TEST(Augment, RejectsOversizedCrop) {
  const auto s = generate_sample(CoOccurrenceSpec{}, 0);
  Rng rng(0);
  EXPECT_THROW(augment(s, rng, 65, 64), ShapeError);
  EXPECT_THROW(apply_augment(s, AugmentParams{0, 1, false, 20, 0}, 48, 48), ShapeError);
}

TEST(SampleIO, RoundTripWithinQuantization) {
  const auto dir = scratch_dir("roundtrip");
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    SegSample s{testing::random_tensor<double>({static_cast<std::size_t>(5 + trial), 7, 3}, rng, 0, 1), {}};
    for (std::size_t i = 0; i < s.height() * s.width(); ++i) s.mask.push_back(static_cast<int>(rng() % 6));
    s.mask[0] = kIgnoreIndex;
    save_sample((dir / "a.ppm").string(), (dir / "a.pgm").string(), s);
    const auto back = load_sample((dir / "a.ppm").string(), (dir / "a.pgm").string());
    EXPECT_EQ(back.mask, s.mask);
    ASSERT_EQ(back.image.shape(), s.image.shape());
    EXPECT_LE(max_abs_diff(back.image, s.image), 0.5 / 255 + 1e-12);
  }
}

TEST(SampleIO, MalformedFilesReportByteOffset) {
  const auto dir = scratch_dir("malformed");
  const SegSample s{Tensor<double>({4, 4, 3}, 0.25), std::vector<int>(16, 1)};
  save_sample((dir / "a.ppm").string(), (dir / "a.pgm").string(), s);
  const auto path = (dir / "a.ppm").string();
  fs::resize_file(path, fs::file_size(path) - 5);
  try {
    load_image_ppm(path);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos) << e.what();
  }
  std::ofstream(dir / "bad.pgm") << "P5\n4 x\n255\n";
  try {
    load_mask_pgm((dir / "bad.pgm").string());
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("byte 5"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_image_ppm((dir / "a.pgm").string()), DataError);
  EXPECT_THROW(load_image_ppm((dir / "missing.ppm").string()), DataError);
}

TEST(Dataset, WriteAndLoadSplits) {
  const auto dir = scratch_dir("dataset");
  CoOccurrenceSpec spec;
  spec.seed = 3;
  write_dataset(dir, spec, SplitCounts{3, 2, 2});
  EXPECT_EQ(load_dataset_spec(dir), spec);
  const auto train = load_split(dir, "train");
  const auto test = load_split(dir, "test");
  ASSERT_EQ(train.size(), 3u);
  ASSERT_EQ(test.size(), 2u);
  EXPECT_EQ(train[1].mask, generate_sample(spec, 1).mask);
  EXPECT_EQ(test[0].mask, generate_sample(spec, 5).mask);
  EXPECT_THROW(load_split(dir, "nope"), DataError);
  EXPECT_THROW(load_dataset_spec(dir / "train"), DataError);
}

}  // namespace
}  // namespace rethseg
