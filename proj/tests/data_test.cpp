#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "sib/data/dataset.hpp"
#include "sib/errors.hpp"

using namespace sib;
using namespace sib::data;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sib_data_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

double background_mean(const LabeledSample& s) {
  double sum = 0, n = 0;
  for (std::size_t i = 0; i < s.gt_mask.size(); ++i) {
    if (s.gt_mask[i] == 0.0) {
      sum += s.image[i];
      n += 1;
    }
  }
  return sum / n;
}

}  // namespace

TEST(Synthetic, DeterministicForRecipeAndSeed) {
  const SyntheticRecipe r{.classes = 3, .side = 16, .n_train = 20, .n_test = 10, .spurious = 0.5, .seed = 7};
  const auto a = generate_synthetic(r), b = generate_synthetic(r);
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train.samples[i].image, b.train.samples[i].image);
    EXPECT_EQ(a.train.samples[i].gt_mask, b.train.samples[i].gt_mask);
  }
  auto r2 = r;
  r2.seed = 8;
  EXPECT_NE(generate_synthetic(r2).train.samples[0].image, a.train.samples[0].image);
}

TEST(Synthetic, MaskEqualsRenderedSupport) {
  // Foreground intensities sit above 0.55 and backgrounds below it by construction.
  for (std::size_t side : {16u, 32u, 64u}) {
    const auto ds = generate_synthetic({.classes = 10, .side = side, .n_train = 60, .n_test = 20, .spurious = 0.3, .seed = 1});
    for (const auto* split : {&ds.train, &ds.test}) {
      for (const auto& s : split->samples) {
        double fg = 0;
        for (std::size_t i = 0; i < s.gt_mask.size(); ++i) {
          EXPECT_EQ(s.gt_mask[i], s.image[i] > 0.55 ? 1.0 : 0.0) << s.id;
          EXPECT_GE(s.image[i], 0.0);
          EXPECT_LE(s.image[i], 1.0);
          fg += s.gt_mask[i];
        }
        EXPECT_GT(fg, 0.0) << "empty mask for " << s.id << " class " << s.label << " side " << side;
      }
    }
  }
}

TEST(Synthetic, ClassesBalancedWithinOne) {
  const auto ds = generate_synthetic({.classes = 3, .side = 16, .n_train = 100, .n_test = 31, .spurious = 0, .seed = 2});
  for (const auto* split : {&ds.train, &ds.test}) {
    std::vector<std::size_t> counts(3);
    for (const auto& s : split->samples) ++counts.at(s.label);
    const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
    EXPECT_LE(*hi - *lo, 1u);
  }
}

TEST(Synthetic, NoSpuriousMeansBandIndependentOfClassAndSplit) {
  const SyntheticRecipe r{.classes = 2, .side = 16, .n_train = 2000, .n_test = 2000, .spurious = 0.0, .seed = 3};
  for (bool train : {true, false}) {
    double agree = 0;
    for (std::size_t i = 0; i < 2000; ++i) agree += background_band(r, train, i) == i % 2 ? 1 : 0;
    EXPECT_NEAR(agree / 2000, 0.5, 0.05);
  }
}

TEST(Synthetic, FullSpuriousIsSeparableByBackgroundOnTrainOnly) {
  const auto ds = generate_synthetic({.classes = 2, .side = 32, .n_train = 400, .n_test = 400, .spurious = 1.0, .seed = 4});
  auto acc = [](const Dataset& d) {
    double hit = 0;
    for (const auto& s : d.samples) hit += (background_mean(s) > 0.25 ? 1u : 0u) == s.label ? 1 : 0;
    return hit / static_cast<double>(d.size());
  };
  EXPECT_GT(acc(ds.train), 0.9);
  EXPECT_NEAR(acc(ds.test), 0.5, 0.08);
}

TEST(Synthetic, InvalidRecipeIsConfigError) {
  EXPECT_THROW((void)generate_synthetic({.classes = 11, .side = 16, .n_train = 1, .n_test = 1, .spurious = 0, .seed = 0}), ConfigError);
  EXPECT_THROW((void)generate_synthetic({.classes = 1, .side = 16, .n_train = 1, .n_test = 1, .spurious = 0, .seed = 0}), ConfigError);
  EXPECT_THROW((void)generate_synthetic({.classes = 3, .side = 24, .n_train = 1, .n_test = 1, .spurious = 0, .seed = 0}), ConfigError);
  EXPECT_THROW((void)generate_synthetic({.classes = 3, .side = 16, .n_train = 1, .n_test = 1, .spurious = 1.5, .seed = 0}), ConfigError);
}

TEST(Pgm, EncodeDecodeRoundTrip) {
  ad::Tensor t({2, 3}, std::vector<double>{0, 1.0 / 255, 0.5, 1, 254.0 / 255, 7.0 / 255});
  t[2] = 128.0 / 255;
  EXPECT_EQ(decode_pgm(encode_pgm(t)), t);
}

TEST(Pgm, HeaderWithCommentAndTruncation) {
  const std::string text = "P5\n# note\n2 1\n255\n";
  std::vector<std::uint8_t> b(text.begin(), text.end());
  b.push_back(255);
  EXPECT_THROW((void)decode_pgm(b), ParseError);
  b.push_back(0);
  const auto t = decode_pgm(b);
  EXPECT_EQ(t.shape(), (ad::Shape{1, 2}));
  EXPECT_EQ(t[0], 1.0);
  const std::string p2 = "P2\n1 1\n255\n0";
  EXPECT_THROW((void)decode_pgm(std::vector<std::uint8_t>(p2.begin(), p2.end())), ParseError);
}

TEST(Folder, SaveLoadRoundTripIsBitwise) {
  const auto ds = generate_synthetic({.classes = 3, .side = 16, .n_train = 12, .n_test = 3, .spurious = 0.2, .seed = 5});
  const auto dir = temp_dir("roundtrip");
  save_dataset(ds.train, dir);
  const auto back = load_folder(dir);
  ASSERT_EQ(back.size(), ds.train.size());
  EXPECT_EQ(back.classes, 3u);
  EXPECT_EQ(back.split, "train");
  EXPECT_EQ(back.recipe.at("seed"), "5");
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_EQ(back.samples[i].id, ds.train.samples[i].id);
  for (const auto& s : back.samples) {
    const auto& orig = ds.train.samples.at(std::stoul(s.id));
    EXPECT_EQ(s.label, orig.label);
    EXPECT_EQ(s.image, orig.image);
    EXPECT_EQ(s.gt_mask, orig.gt_mask);
  }
  fs::remove_all(dir);
}

TEST(Folder, EmptyDirectoryIsEmptyDataset) {
  const auto dir = temp_dir("empty");
  const auto ds = load_folder(dir);
  EXPECT_TRUE(ds.empty());
  fs::remove_all(dir);
}

TEST(Folder, MissingMaskNamesTheFile) {
  const auto dir = temp_dir("nomask");
  fs::create_directories(dir / "class_0");
  write_pgm(dir / "class_0" / "a.pgm", ad::Tensor({2, 2}, 0.5));
  try {
    (void)load_folder(dir);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("a.pgm"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Folder, MaskSizeMismatchIsError) {
  const auto dir = temp_dir("mismatch");
  fs::create_directories(dir / "class_1");
  write_pgm(dir / "class_1" / "a.pgm", ad::Tensor({2, 2}, 0.5));
  write_pgm(dir / "class_1" / "a.mask.pgm", ad::Tensor({2, 3}, 1.0));
  EXPECT_THROW((void)load_folder(dir), IoError);
  fs::remove_all(dir);
}

TEST(Batches, SameSeedAndEpochSameOrder) {
  const auto ds = generate_synthetic({.classes = 2, .side = 16, .n_train = 10, .n_test = 2, .spurious = 0, .seed = 6}).train;
  const auto a = batches(ds, 3, 1, 4), b = batches(ds, 3, 1, 4), c = batches(ds, 3, 1, 5);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].indices, b[i].indices);
  std::vector<std::size_t> fa, fc;
  for (const auto& x : a) fa.insert(fa.end(), x.indices.begin(), x.indices.end());
  for (const auto& x : c) fc.insert(fc.end(), x.indices.begin(), x.indices.end());
  EXPECT_NE(fa, fc);
}

TEST(Batches, SizeRules) {
  const auto ds = generate_synthetic({.classes = 2, .side = 16, .n_train = 5, .n_test = 2, .spurious = 0, .seed = 6}).train;
  const auto one = batches(ds, 8, 0, 0);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].x.shape(), (ad::Shape{5, 1, 16, 16}));
  const auto twos = batches(ds, 2, 0, 0);
  ASSERT_EQ(twos.size(), 2u);
  EXPECT_EQ(twos[0].labels.size(), 2u);
  EXPECT_EQ(twos[1].labels.size(), 2u);
  const auto threes = batches(ds, 3, 0, 0);
  ASSERT_EQ(threes.size(), 2u);
  EXPECT_EQ(threes[1].labels.size(), 2u);
  std::set<std::size_t> seen;
  for (const auto& b : threes) seen.insert(b.indices.begin(), b.indices.end());
  EXPECT_EQ(seen.size(), 5u);
}

TEST(Batches, BatchCarriesImagesMasksAndLabels) {
  const auto ds = generate_synthetic({.classes = 3, .side = 16, .n_train = 6, .n_test = 2, .spurious = 0, .seed = 9}).train;
  const auto bs = batches(ds, 6, 2, 0);
  const auto& b = bs.at(0);
  for (std::size_t k = 0; k < 6; ++k) {
    const auto& s = ds.samples[b.indices[k]];
    EXPECT_EQ(b.labels[k], s.label);
    for (std::size_t i = 0; i < 256; ++i) {
      EXPECT_EQ(b.x[k * 256 + i], s.image[i]);
      EXPECT_EQ(b.masks[k * 256 + i], s.gt_mask[i]);
    }
  }
}
