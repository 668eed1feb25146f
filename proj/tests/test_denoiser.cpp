#include <gtest/gtest.h>

#include <filesystem>

#include "advdiff/dataset.hpp"
#include "advdiff/denoiser.hpp"

using namespace advdiff;

namespace {

std::vector<Tensor<Real>> toy_images(std::size_t count, std::size_t size, std::uint64_t seed) {
  return gen_toy_dataset(DatasetSpec{count, size, 0.25}, seed).images;
}

}  // namespace

TEST(Denoiser, OutputShapeMatchesInput) {
  const DenoiserModel model(1);
  Rng rng(2);
  const auto x = Tensor<Real>::randn({1, 3, 8, 8}, rng);
  EXPECT_EQ(model.forward(x, 3).shape(), x.shape());
  EXPECT_THROW(model.forward(Tensor<Real>::zeros({1, 2, 8, 8}), 3), ShapeError);
}

TEST(Denoiser, TimestepFeaturesDifferAcrossSteps) {
  const auto a = timestep_features(1, 32);
  const auto b = timestep_features(2, 32);
  EXPECT_EQ(a.shape(), (Shape{1, 32}));
  EXPECT_GT(max_abs(sub(a, b)), 1e-3f);
}

TEST(Denoiser, OneStepChangesParameters) {
  const auto data = toy_images(4, 16, 3);
  const auto sched = make_default_schedule(50);
  DenoiserModel before(5);
  const auto trained = train_denoiser(data, sched, {1, 2e-3, 2, 5});
  auto after = trained.model;
  auto p0 = before.parameters();
  auto p1 = after.parameters();
  bool changed = false;
  for (std::size_t i = 0; i < p0.size(); ++i)
    for (std::size_t j = 0; j < p0[i].second->numel(); ++j) changed |= (*p0[i].second)[j] != (*p1[i].second)[j];
  EXPECT_TRUE(changed);
  EXPECT_EQ(trained.loss_trace.size(), 1u);
}

TEST(Denoiser, ZeroDatasetLossDecreases) {
  const std::vector<Tensor<Real>> data(4, Tensor<Real>::zeros({1, 3, 8, 8}));
  const auto sched = make_default_schedule(20);
  const auto run = train_denoiser(data, sched, {60, 3e-3, 2, 11});
  const auto window = [&](std::size_t from) {
    double acc = 0.0;
    for (std::size_t i = from; i < from + 10; ++i) acc += run.loss_trace[i];
    return acc / 10.0;
  };
  EXPECT_LT(window(20), window(0));
  EXPECT_LT(window(50), window(20));
}

// Frozen from a seeded run: 120 steps on 16x16 shapes.
TEST(Denoiser, TrainingReducesValidationLoss) {
  const auto train = toy_images(16, 16, 21);
  const auto val = toy_images(8, 16, 22);
  const auto sched = make_default_schedule(50);
  const DenoiserModel untrained(31);
  const auto run = train_denoiser(train, sched, {120, 3e-3, 4, 31});
  const double before = denoiser_loss(untrained, val, sched, 64, 99);
  const double after = denoiser_loss(run.model, val, sched, 64, 99);
  EXPECT_LT(after, 0.7 * before) << "before " << before << " after " << after;
}

TEST(Denoiser, SaveLoadRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "advdiff_denoiser_test";
  std::filesystem::remove_all(dir);
  const DenoiserModel model(8);
  const auto sched = make_linear_schedule(30, 1e-3, 0.1);
  model.save(dir, sched);
  NoiseSchedule loaded_sched = make_default_schedule(1);
  const auto loaded = DenoiserModel::load(dir, &loaded_sched);
  EXPECT_EQ(loaded_sched.steps(), 30);
  EXPECT_DOUBLE_EQ(loaded_sched.beta_end(), 0.1);
  Rng rng(4);
  const auto x = Tensor<Real>::randn({1, 3, 8, 8}, rng);
  const auto a = model.forward(x, 7);
  const auto b = loaded.forward(x, 7);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
  std::filesystem::remove_all(dir);
}
