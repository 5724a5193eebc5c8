#include <gtest/gtest.h>

#include <fstream>

#include "strokenext/checkpoint.hpp"
#include "strokenext/errors.hpp"
#include "support/tempdir.hpp"

using namespace strokenext;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary) << bytes;
}

training::Checkpoint sample_checkpoint() {
  StrokeNeXt<float> model(make_model_config(VariantName::nano, FusionMode::k2conv, 0, 0.2, 2,
                                            data::Task::subtype, 9));
  auto ckpt = training::capture(model);
  ckpt.optimizer.step = 17;
  ckpt.optimizer.config.beta2 = 0.99;
  for (const auto& p : ckpt.params) {
    training::Moments m;
    m.m.assign(p.values.size(), 0.25);
    m.v.assign(p.values.size(), 1.0 / 3.0);
    ckpt.optimizer.moments.push_back(std::move(m));
  }
  ckpt.scheduler = {1e-5, 0.4321, 2};
  ckpt.epoch = 7;
  ckpt.split_seed = 99;
  ckpt.split_ratios = {0.7, 0.2, 0.1};
  ckpt.split_stratified = true;
  ckpt.image_size = 64;
  ckpt.class_names = {"hemorrhage", "ischemia"};
  return ckpt;
}

}  // namespace

TEST(Checkpoint, RoundTripIsExact) {
  TempDir dir;
  const auto ckpt = sample_checkpoint();
  save_checkpoint(ckpt, dir / "a.ckpt");
  const auto back = load_checkpoint(dir / "a.ckpt", ckpt.model);
  EXPECT_EQ(back.model, ckpt.model);
  EXPECT_EQ(back.params, ckpt.params);
  EXPECT_EQ(back.buffers, ckpt.buffers);
  EXPECT_EQ(back.optimizer.step, 17u);
  ASSERT_EQ(back.optimizer.moments.size(), ckpt.optimizer.moments.size());
  EXPECT_EQ(back.optimizer.moments[3].v, ckpt.optimizer.moments[3].v);
  EXPECT_EQ(back.optimizer.config.beta2, 0.99);
  EXPECT_EQ(back.scheduler.lr, 1e-5);
  EXPECT_EQ(back.scheduler.best, 0.4321);
  EXPECT_EQ(back.scheduler.bad_epochs, 2u);
  EXPECT_EQ(back.epoch, 7u);
  EXPECT_EQ(back.split_seed, 99u);
  EXPECT_EQ(back.split_ratios, ckpt.split_ratios);
  EXPECT_TRUE(back.split_stratified);
  EXPECT_EQ(back.image_size, 64);
  EXPECT_EQ(back.class_names, ckpt.class_names);
  save_checkpoint(back, dir / "b.ckpt");
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
}

TEST(Checkpoint, RestoredModelReproducesOutputs) {
  TempDir dir;
  const auto cfg = make_model_config(VariantName::nano, FusionMode::sum, 0, 0.0, 2, data::Task::presence, 4);
  StrokeNeXt<float> a(cfg);
  save_checkpoint(training::capture(a), dir / "m.ckpt");
  StrokeNeXt<float> b(make_model_config(VariantName::nano, FusionMode::sum, 0, 0.0, 2, data::Task::presence, 5));
  training::restore(b, load_checkpoint(dir / "m.ckpt"));
  FeatureMap<float> x(2, 3, 32, 32);
  Rng rng(1);
  for (auto& v : x.values) v = static_cast<float>(rng.normal());
  EXPECT_EQ(a.forward(x, {}).values, b.forward(x, {}).values);
}

TEST(Checkpoint, CorruptionDetected) {
  TempDir dir;
  save_checkpoint(sample_checkpoint(), dir / "a.ckpt");
  const auto bytes = slurp(dir / "a.ckpt");

  spit(dir / "trunc.ckpt", bytes.substr(0, bytes.size() - 5));
  EXPECT_THROW(load_checkpoint(dir / "trunc.ckpt"), IntegrityError);
  spit(dir / "short.ckpt", bytes.substr(0, 10));
  EXPECT_THROW(load_checkpoint(dir / "short.ckpt"), IntegrityError);

  auto magic = bytes;
  magic[0] = 'X';
  spit(dir / "magic.ckpt", magic);
  EXPECT_THROW(load_checkpoint(dir / "magic.ckpt"), IntegrityError);

  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  spit(dir / "flip.ckpt", flipped);
  EXPECT_THROW(load_checkpoint(dir / "flip.ckpt"), IntegrityError);

  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST(Checkpoint, FingerprintMismatchRejected) {
  TempDir dir;
  const auto ckpt = sample_checkpoint();
  save_checkpoint(ckpt, dir / "a.ckpt");
  auto other = ckpt.model;
  other.fusion.mode = FusionMode::sum;
  EXPECT_THROW(load_checkpoint(dir / "a.ckpt", other), FingerprintMismatch);
  auto tiny = make_model_config(VariantName::tiny, FusionMode::k2conv, 0, 0.2, 2,
                                data::Task::subtype, 3);
  EXPECT_THROW(load_checkpoint(dir / "a.ckpt", tiny), FingerprintMismatch);
  EXPECT_NO_THROW(load_checkpoint(dir / "a.ckpt", ckpt.model));
}

TEST(Checkpoint, AtomicWriteLeavesNoTemporary) {
  TempDir dir;
  save_checkpoint(sample_checkpoint(), dir / "a.ckpt");
  std::size_t files = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir.path())) {
    (void)e;
    ++files;
  }
  EXPECT_EQ(files, 1u);
}
