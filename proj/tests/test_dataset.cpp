#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "advdiff/dataset.hpp"
#include "advdiff/encoders.hpp"
#include "advdiff/image_io.hpp"

using namespace advdiff;
namespace fs = std::filesystem;

TEST(ToyDataset, EightImagesCoverEveryClass) {
  const auto data = gen_toy_dataset(DatasetSpec{8, 32, 0.25}, 3);
  ASSERT_EQ(data.size(), 8u);
  std::set<std::size_t> labels(data.labels.begin(), data.labels.end());
  EXPECT_EQ(labels.size(), kToyClasses);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(data.labels[i], i);
  for (const auto& img : data.images) {
    EXPECT_EQ(img.shape(), (Shape{1, 3, 32, 32}));
    for (Real v : img.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(ToyDataset, SplitsFollowValFraction) {
  const auto data = gen_toy_dataset(DatasetSpec{40, 16, 0.25}, 1);
  std::size_t val = 0;
  for (const auto& s : data.splits) {
    EXPECT_TRUE(s == "train" || s == "val");
    val += s == "val";
  }
  EXPECT_EQ(val, 10u);
}

TEST(ToyDataset, Deterministic) {
  const auto a = gen_toy_dataset(DatasetSpec{16, 16, 0.25}, 9);
  const auto b = gen_toy_dataset(DatasetSpec{16, 16, 0.25}, 9);
  const auto c = gen_toy_dataset(DatasetSpec{16, 16, 0.25}, 10);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a.images[i].numel(); ++j) {
      EXPECT_EQ(a.images[i][j], b.images[i][j]);
      differs |= a.images[i][j] != c.images[i][j];
    }
  }
  EXPECT_TRUE(differs);
}

TEST(ToyDataset, ClassPrototypesAreDistinct) {
  const auto data = gen_toy_dataset(DatasetSpec{64, 32, 0.25}, 0);
  const auto ens = build_default_ensemble<Real>(100);
  std::vector<std::vector<double>> mean(kToyClasses);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto e = ens.victim.embed(data.images[i]);
    auto& m = mean[data.labels[i]];
    m.resize(e.numel(), 0.0);
    for (std::size_t j = 0; j < e.numel(); ++j) m[j] += e[j];
  }
  for (std::size_t a = 0; a < kToyClasses; ++a)
    for (std::size_t b = a + 1; b < kToyClasses; ++b) {
      double dot = 0, na = 0, nb = 0;
      for (std::size_t j = 0; j < mean[a].size(); ++j) {
        dot += mean[a][j] * mean[b][j];
        na += mean[a][j] * mean[a][j];
        nb += mean[b][j] * mean[b][j];
      }
      EXPECT_LT(dot / std::sqrt(na * nb), 0.99) << toy_class_name(a) << " vs " << toy_class_name(b);
    }
}

TEST(ToyDataset, ClassNamesAndErrors) {
  std::set<std::string> names;
  for (std::size_t c = 0; c < kToyClasses; ++c) names.insert(toy_class_name(c));
  EXPECT_EQ(names.size(), kToyClasses);
  Rng rng(1);
  EXPECT_THROW(render_toy_image(kToyClasses, 32, rng), ConfigError);
  EXPECT_THROW(render_toy_image(0, 4, rng), ConfigError);
  EXPECT_THROW(gen_toy_dataset(DatasetSpec{0, 32, 0.25}, 0), ConfigError);
  EXPECT_THROW(gen_toy_dataset(DatasetSpec{8, 32, 1.0}, 0), ConfigError);
}

TEST(ToyDataset, SaveLoadRoundTrip) {
  const auto dir = fs::temp_directory_path() / "advdiff_dataset_test";
  fs::remove_all(dir);
  const auto data = gen_toy_dataset(DatasetSpec{12, 16, 0.25}, 5);
  save_dataset(data, dir);
  EXPECT_TRUE(fs::exists(dir / "labels.csv"));
  EXPECT_TRUE(fs::exists(dir / "img_0000.png"));
  const auto back = load_dataset(dir);
  ASSERT_EQ(back.size(), data.size());
  EXPECT_EQ(back.labels, data.labels);
  EXPECT_EQ(back.splits, data.splits);
  for (std::size_t i = 0; i < data.size(); ++i)
    EXPECT_LE(max_abs(sub(back.images[i], data.images[i])), 0.5f / 255.0f + 1e-6f);
  fs::remove_all(dir);
}

TEST(ToyDataset, LoadRejectsBadLabels) {
  const auto dir = fs::temp_directory_path() / "advdiff_dataset_bad";
  fs::remove_all(dir);
  fs::create_directories(dir);
  EXPECT_THROW(load_dataset(dir), FormatError);
  {
    std::ofstream os(dir / "labels.csv");
    os << "file,label,split\nimg_0000.png,12,train\n";
  }
  save_image(Tensor<Real>::zeros({1, 3, 16, 16}), dir / "img_0000.png");
  EXPECT_THROW(load_dataset(dir), FormatError);
  fs::remove_all(dir);
}
