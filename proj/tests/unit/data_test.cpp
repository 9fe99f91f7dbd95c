#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <fstream>

#include "fixtures.hpp"
#include "jdnet/data.hpp"
#include "jdnet/image.hpp"

namespace jdnet {
namespace {

using fixtures::TempDir;

Image gradient_image(int h, int w) {
  Image img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      img.at(y, x, 0) = static_cast<float>(x) / (w - 1);
      img.at(y, x, 1) = static_cast<float>(y) / (h - 1);
      img.at(y, x, 2) = 0.25f;
    }
  quantize_8bit(img);
  return img;
}

// -- manifest --------------------------------------------------------------------

TEST(Manifest, PairsMatchingFiles) {
  TempDir dir("manifest");
  write_png(dir / "rain-001.png", Image(4, 4, 0.5f));
  write_png(dir / "norain-001.png", Image(4, 4, 0.25f));
  const auto m = load_manifest(dir.path());
  ASSERT_EQ(m.pairs.size(), 1u);
  EXPECT_EQ(m.pairs[0].id, "001");
  EXPECT_EQ(m.pairs[0].rainy.filename(), "rain-001.png");
  EXPECT_EQ(m.pairs[0].clean.filename(), "norain-001.png");
  EXPECT_TRUE(m.warnings.empty());
}

TEST(Manifest, LexicographicOrderAndUnpairedWarnings) {
  TempDir dir("manifest-order");
  for (const char* id : {"b", "a", "c"}) {
    write_png(dir / (std::string("rain-") + id + ".png"), Image(2, 2));
    write_png(dir / (std::string("norain-") + id + ".png"), Image(2, 2));
  }
  write_png(dir / "rain-orphan.png", Image(2, 2));
  write_png(dir / "norain-lonely.png", Image(2, 2));
  std::ofstream(dir / "notes.txt") << "ignored";
  const auto m = load_manifest(dir.path());
  ASSERT_EQ(m.pairs.size(), 3u);
  EXPECT_EQ(m.pairs[0].id, "a");
  EXPECT_EQ(m.pairs[1].id, "b");
  EXPECT_EQ(m.pairs[2].id, "c");
  ASSERT_EQ(m.warnings.size(), 2u);
  EXPECT_NE(m.warnings[0].find("norain-lonely.png"), std::string::npos);
  EXPECT_NE(m.warnings[1].find("rain-orphan.png"), std::string::npos);
}

TEST(Manifest, CustomPattern) {
  TempDir dir("manifest-pattern");
  write_png(dir / "7_in.png", Image(2, 2));
  write_png(dir / "7_gt.png", Image(2, 2));
  const auto pattern = PairPattern::parse("<id>_in.png:<id>_gt.png");
  const auto m = load_manifest(dir.path(), pattern);
  ASSERT_EQ(m.pairs.size(), 1u);
  EXPECT_EQ(m.pairs[0].id, "7");
  EXPECT_THROW((void)PairPattern::parse("rain.png:norain.png"), ShapeError);
  EXPECT_THROW((void)PairPattern::parse("rain-<id>.png"), ShapeError);
}

TEST(Manifest, EmptyDirectoryHasNoPairs) {
  TempDir dir("manifest-empty");
  try {
    (void)load_manifest(dir.path());
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("no pairs found"), std::string::npos);
  }
  EXPECT_THROW((void)load_manifest(dir / "missing"), IoError);
}

TEST(Manifest, LoadPairsRejectsMismatchedSizes) {
  TempDir dir("manifest-sizes");
  write_png(dir / "rain-1.png", Image(4, 4));
  write_png(dir / "norain-1.png", Image(4, 6));
  EXPECT_THROW((void)load_pairs(load_manifest(dir.path())), IoError);
}

// -- synthesis -------------------------------------------------------------------

TEST(Synthesis, FixedSeedIsByteIdentical) {
  const Image clean = gradient_image(64, 64);
  RainSynthConfig cfg;
  cfg.seed = 42;
  const auto a = synthesize_rain(clean, cfg);
  const auto b = synthesize_rain(clean, cfg);
  EXPECT_EQ(a.rainy, b.rainy);
  EXPECT_NE(a.rainy, clean);
  cfg.seed = 43;
  EXPECT_NE(synthesize_rain(clean, cfg).rainy, a.rainy);
}

TEST(Synthesis, NoStreaksOrZeroIntensityIsIdentity) {
  const Image clean = gradient_image(32, 48);
  RainSynthConfig cfg;
  cfg.streak_count = {0, 0};
  EXPECT_EQ(synthesize_rain(clean, cfg).rainy, clean);
  cfg = {};
  cfg.intensity = {0.0, 0.0};
  EXPECT_EQ(synthesize_rain(clean, cfg).rainy, clean);
}

TEST(Synthesis, RainIsAdditiveAndClamped) {
  const Image clean = gradient_image(64, 64);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RainSynthConfig cfg;
    cfg.seed = seed;
    const auto pair = synthesize_rain(clean, cfg);
    EXPECT_EQ(pair.clean, clean);
    for (std::size_t i = 0; i < clean.pixels.size(); ++i) {
      ASSERT_GE(pair.rainy.pixels[i], clean.pixels[i]);
      ASSERT_LE(pair.rainy.pixels[i], 1.0f);
    }
  }
}

TEST(Synthesis, InvalidRangesRejected) {
  RainSynthConfig cfg;
  cfg.streak_count = {5, 2};
  EXPECT_THROW(cfg.validate(), ShapeError);
  cfg = {};
  cfg.intensity = {0.2, 1.5};
  EXPECT_THROW(cfg.validate(), ShapeError);
}

TEST(Synthesis, SyntheticPairsAreDeterministic) {
  const auto a = make_synthetic_pairs(3, 32, 9);
  const auto b = make_synthetic_pairs(3, 32, 9);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].rainy, b[i].rainy);
    EXPECT_EQ(a[i].clean, b[i].clean);
    EXPECT_EQ(a[i].clean.height, 32);
  }
  EXPECT_NE(a[0].clean, a[1].clean);
}

// -- cropping --------------------------------------------------------------------

TEST(Crop, FullSizeIsIdentity) {
  const auto pair = make_synthetic_pairs(1, 64, 1)[0];
  Rng rng(1);
  const auto c = random_crop(pair, 64, rng);
  EXPECT_EQ(c.rainy, pair.rainy);
  EXPECT_EQ(c.clean, pair.clean);
}

TEST(Crop, SameWindowOnBothImages) {
  const auto pair = make_synthetic_pairs(1, 96, 2)[0];
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    Rng probe = rng;
    const auto c = random_crop(pair, 64, rng);
    const int top = static_cast<int>(probe.uniform_int(0, 32));
    const int left = static_cast<int>(probe.uniform_int(0, 32));
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        for (int ch = 0; ch < 3; ++ch)
          ASSERT_EQ(c.rainy.at(y, x, ch) - c.clean.at(y, x, ch),
                    pair.rainy.at(top + y, left + x, ch) - pair.clean.at(top + y, left + x, ch));
  }
}

TEST(Crop, SeededOffsetsReplay) {
  const auto pair = make_synthetic_pairs(1, 80, 3)[0];
  Rng a(11), b(11);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(random_crop(pair, 64, a).rainy, random_crop(pair, 64, b).rainy);
}

TEST(Crop, UndersizedImageRejected) {
  ImagePair pair{Image(63, 128), Image(63, 128), "x"};
  Rng rng(4);
  EXPECT_THROW((void)random_crop(pair, 64, rng), ShapeError);
}

TEST(Crop, OffsetsAreUniform) {
  // Each pixel encodes its own coordinates so the offset can be read back.
  ImagePair pair{Image(128, 128), Image(128, 128), "grid"};
  for (int y = 0; y < 128; ++y)
    for (int x = 0; x < 128; ++x) {
      pair.rainy.at(y, x, 0) = static_cast<float>(y);
      pair.rainy.at(y, x, 1) = static_cast<float>(x);
    }
  constexpr int kOffsets = 65;
  constexpr int kDraws = 10000;
  std::vector<int> rows(kOffsets), cols(kOffsets);
  Rng rng(5);
  for (int i = 0; i < kDraws; ++i) {
    const auto c = random_crop(pair, 64, rng);
    const int top = static_cast<int>(c.rainy.at(0, 0, 0));
    const int left = static_cast<int>(c.rainy.at(0, 0, 1));
    ++rows[top];
    ++cols[left];
  }
  auto p_value = [](const std::vector<int>& counts, int draws) {
    const double expected = static_cast<double>(draws) / counts.size();
    double stat = 0;
    for (int n : counts) stat += (n - expected) * (n - expected) / expected;
    const boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
    return boost::math::cdf(boost::math::complement(dist, stat));
  };
  EXPECT_GT(p_value(rows, kDraws), 0.01);
  EXPECT_GT(p_value(cols, kDraws), 0.01);
}

// -- tensors -------------------------------------------------------------------

TEST(ToTensor, ChannelOrderIsRgb) {
  // 2x2: red, green / blue, white.
  Image img(2, 2);
  img.at(0, 0, 0) = 1;
  img.at(0, 1, 1) = 1;
  img.at(1, 0, 2) = 1;
  for (int ch = 0; ch < 3; ++ch) img.at(1, 1, ch) = 1;
  const auto [o, b] = to_tensor<float>({ImagePair{img, img, "rgb"}});
  ASSERT_EQ(o.shape(), (Shape{1, 3, 2, 2}));
  const std::vector<float> want{1, 0, 0, 1, 0, 1, 0, 1, 0, 0, 1, 1};
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(o.data()[i], want[i]) << i;
}

TEST(ToTensor, EightBitRoundTripIsLossless) {
  const auto pairs = make_synthetic_pairs(3, 16, 6);
  std::vector<ImagePair> quantized = pairs;
  for (auto& p : quantized) {
    quantize_8bit(p.rainy);
    quantize_8bit(p.clean);
  }
  const auto [o, b] = to_tensor<float>(quantized);
  EXPECT_EQ(o.shape(), (Shape{3, 3, 16, 16}));
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(tensor_to_image(o, i), quantized[i].rainy);
    EXPECT_EQ(tensor_to_image(b, i), quantized[i].clean);
  }
}

TEST(ToTensor, MixedSizesRejected) {
  std::vector<ImagePair> batch{{Image(4, 4), Image(4, 4), "a"}, {Image(4, 8), Image(4, 8), "b"}};
  EXPECT_THROW((void)to_tensor<float>(batch), ShapeError);
}

TEST(Png, WriteReadRoundTrip) {
  TempDir dir("png");
  Image img = gradient_image(5, 7);
  write_png(dir / "g.png", img);
  EXPECT_EQ(read_png(dir / "g.png"), img);
  EXPECT_THROW((void)read_png(dir / "absent.png"), IoError);
  std::ofstream(dir / "bad.png") << "not a png";
  EXPECT_THROW((void)read_png(dir / "bad.png"), IoError);
}

}  // namespace
}  // namespace jdnet
