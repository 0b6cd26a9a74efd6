#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "rethseg/train.hpp"

namespace rethseg {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("rethseg_train_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// 16x16 two-stage network on 16x16 co-occurrence samples.
TrainConfig micro_train_config(BlockVariant variant = BlockVariant::rethinker_e_convlstm) {
  TrainConfig cfg;
  cfg.base_lr = 0.02;
  cfg.epochs = 4;
  cfg.crop_h = cfg.crop_w = 16;
  cfg.batch = 2;
  cfg.seed = 5;
  cfg.model.input_h = cfg.model.input_w = 16;
  cfg.model.stages = {StageConfig{8, 2, variant, 2}, StageConfig{8, 2, variant, 1}};
  cfg.model.decoder_low_level_stage = 0;
  cfg.model.decoder_channels = 8;
  cfg.model.decoder_low_level_channels = 4;
  return cfg;
}

CoOccurrenceSpec micro_spec() {
  CoOccurrenceSpec spec;
  spec.height = spec.width = 16;
  spec.grid = 2;
  spec.seed = 17;
  return spec;
}

std::vector<SegSample> micro_samples(std::size_t n, std::uint64_t first = 0) {
  std::vector<SegSample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sample(micro_spec(), first + i));
  return out;
}

TEST(LrSchedule, StepDecay) {
  const TrainConfig cfg;
  EXPECT_EQ(lr_at(0, cfg), 0.001);
  EXPECT_EQ(lr_at(49, cfg), 0.001);
  EXPECT_EQ(lr_at(50, cfg), 0.0001);
  EXPECT_EQ(lr_at(100, cfg), 1e-5);
  EXPECT_EQ(lr_at(150, cfg), 1e-6);
  for (std::size_t e = 1; e < 400; ++e) EXPECT_LE(lr_at(e, cfg), lr_at(e - 1, cfg));
}

TEST(MomentumStep, ZeroMomentumIsPlainSgd) {
  TensorMap<double> p{{"w", Tensor<double>({2}, std::vector<double>{1.0, -2.0})}};
  TensorMap<double> g{{"w", Tensor<double>({2}, std::vector<double>{0.5, 0.25})}};
  TensorMap<double> v{{"w", Tensor<double>({2})}};
  momentum_step(p, g, v, 0.1, 0.0);
  EXPECT_EQ(p.at("w")[0], 1.0 - 0.1 * 0.5);
  EXPECT_EQ(p.at("w")[1], -2.0 - 0.1 * 0.25);
}

TEST(MomentumStep, VelocityDecaysWithoutGradient) {
  TensorMap<double> p{{"w", Tensor<double>({1})}};
  TensorMap<double> g{{"w", Tensor<double>({1})}};
  TensorMap<double> v{{"w", Tensor<double>({1}, 3.0)}};
  double expected = 3.0;
  for (int k = 0; k < 10; ++k) {
    momentum_step(p, g, v, 0.01, 0.9);
    expected *= 0.9;
    EXPECT_EQ(v.at("w")[0], expected);
  }
}

TEST(MomentumStep, QuadraticMatchesRecurrence) {
  // f(p) = 0.5 a p^2, gradient a p
  const double a = 3.0, lr = 0.05, mu = 0.9;
  TensorMap<double> p{{"x", Tensor<double>({1}, 2.0)}};
  TensorMap<double> v{{"x", Tensor<double>({1})}};
  double pr = 2.0, vr = 0.0;
  for (int k = 0; k < 2; ++k) {
    TensorMap<double> g{{"x", Tensor<double>({1}, a * p.at("x")[0])}};
    momentum_step(p, g, v, lr, mu);
    vr = mu * vr + a * pr;
    pr = pr - lr * vr;
    EXPECT_EQ(p.at("x")[0], pr);
    EXPECT_EQ(v.at("x")[0], vr);
  }
}

TEST(MomentumStep, MissingEntriesAreErrors) {
  TensorMap<double> p{{"w", Tensor<double>({1})}};
  TensorMap<double> g{{"w", Tensor<double>({1})}};
  TensorMap<double> none;
  EXPECT_THROW(momentum_step(p, g, none, 0.1, 0.9), UsageError);
  EXPECT_THROW(momentum_step(p, none, g, 0.1, 0.9), UsageError);
}

TEST(TrainConfig, KeyValueRoundTripAndValidation) {
  auto cfg = micro_train_config();
  cfg.dataset_root = "/data/x";
  cfg.augment = false;
  cfg.model.seed = cfg.seed;
  EXPECT_EQ(TrainConfig::from_keyvalues(KeyValues::parse(cfg.to_keyvalues().dump())), cfg);
  for (const char* bad : {"base_lr = 0", "momentum = 1", "lr_drop_factor = 1", "batch = 0", "augment = maybe"}) {
    auto kv = cfg.to_keyvalues();
    kv.merge(KeyValues::parse(bad));
    EXPECT_THROW(TrainConfig::from_keyvalues(kv), ConfigError) << bad;
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto dir = scratch_dir("ckpt");
  const auto train = micro_samples(4);
  auto cfg = micro_train_config();
  cfg.epochs = 1;
  auto run = [&](auto tag) {
    using T = decltype(tag);
    auto state = init_state<T>(cfg);
    run_training<T>(state, train, {});
    const auto path = (dir / "a.ckpt").string();
    save_state(path, state);
    const auto back = from_checkpoint<T>(load_checkpoint(path));
    EXPECT_EQ(back.config, state.config);
    EXPECT_EQ(back.model.parameters, state.model.parameters);
    EXPECT_EQ(back.velocity, state.velocity);
    EXPECT_EQ(back.epoch, 1u);
    EXPECT_TRUE(back.rng == state.rng);
    for (const auto& [name, st] : state.model.running_stats) {
      EXPECT_EQ(back.model.running_stats.at(name).mean, st.mean);
      EXPECT_EQ(back.model.running_stats.at(name).var, st.var);
    }
    using Other = std::conditional_t<std::is_same_v<T, float>, double, float>;
    EXPECT_THROW(from_checkpoint<Other>(load_checkpoint(path)), DataError);
  };
  run(double{});
  run(float{});
}

TEST(Checkpoint, RejectsUnknownVersionAndTruncation) {
  const auto dir = scratch_dir("badckpt");
  const auto path = (dir / "a.ckpt").string();
  save_state(path, init_state<float>(micro_train_config()));
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  auto write = [&](const std::string& b) { std::ofstream(path, std::ios::binary) << b; };
  std::string v2 = bytes;
  v2[4] = 2;
  write(v2);
  try {
    load_checkpoint(path);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos) << e.what();
  }
  write(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_checkpoint(path), DataError);
  write("RTHX" + bytes.substr(4));
  EXPECT_THROW(load_checkpoint(path), DataError);
  write(bytes);
  EXPECT_NO_THROW(load_checkpoint(path));
}

TEST(Training, ReproducibleAndResumable) {
  const auto dir = scratch_dir("resume");
  const auto train = micro_samples(6), val = micro_samples(2, 100);
  const auto cfg = micro_train_config();

  auto unbroken = init_state<double>(cfg);
  const auto logs = run_training<double>(unbroken, train, val);
  auto again = init_state<double>(cfg);
  const auto logs_again = run_training<double>(again, train, val);
  ASSERT_EQ(logs.size(), 4u);
  for (std::size_t e = 0; e < logs.size(); ++e) {
    EXPECT_EQ(logs[e].train_loss, logs_again[e].train_loss);
    EXPECT_EQ(logs[e].val_miou, logs_again[e].val_miou);
  }

  auto first = init_state<double>(cfg);
  run_training<double>(first, train, val, {}, 2);
  ASSERT_EQ(first.epoch, 2u);
  const auto path = (dir / "mid.ckpt").string();
  save_state(path, first);
  auto resumed = from_checkpoint<double>(load_checkpoint(path));
  const auto tail = run_training<double>(resumed, train, val);
  ASSERT_EQ(tail.size(), 2u);
  EXPECT_EQ(tail[1].train_loss, logs[3].train_loss);
  EXPECT_EQ(resumed.model.parameters, unbroken.model.parameters);
  EXPECT_EQ(resumed.velocity, unbroken.velocity);
  EXPECT_TRUE(resumed.rng == unbroken.rng);
}

TEST(Training, NonFiniteLossNamesTheStep) {
  auto train = micro_samples(4);
  train[0].image[7] = std::nan("");
  auto cfg = micro_train_config();
  cfg.batch = 1;
  cfg.augment = false;
  auto state = init_state<double>(cfg);
  try {
    run_training<double>(state, train, {});
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0, step"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("sample 0"), std::string::npos) << e.what();
  }
}

TEST(Training, ZeroEpochsWritesInitialCheckpoint) {
  const auto dir = scratch_dir("zero");
  write_dataset(dir / "data", micro_spec(), SplitCounts{2, 1, 1});
  auto cfg = micro_train_config();
  cfg.epochs = 0;
  cfg.dataset_root = (dir / "data").string();
  const auto logs = train_to_dir<float>(cfg, dir / "run");
  EXPECT_TRUE(logs.empty());
  const auto state = from_checkpoint<float>(load_checkpoint((dir / "run" / "last.ckpt").string()));
  EXPECT_EQ(state.epoch, 0u);
  EXPECT_EQ(state.model.parameters, init_state<float>(cfg).model.parameters);
  EXPECT_TRUE(fs::exists(dir / "run" / "best.ckpt"));
}

TEST(Training, DirectoryRunLogsEveryEpoch) {
  const auto dir = scratch_dir("dirrun");
  write_dataset(dir / "data", micro_spec(), SplitCounts{4, 2, 1});
  auto cfg = micro_train_config();
  cfg.epochs = 2;
  cfg.dataset_root = (dir / "data").string();
  train_to_dir<float>(cfg, dir / "run");
  std::ifstream log(dir / "run" / "log.csv");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) ++lines;
  EXPECT_EQ(lines, 3u);
  EXPECT_EQ(from_checkpoint<float>(load_checkpoint((dir / "run" / "last.ckpt").string())).epoch, 2u);

  auto wrong = cfg;
  wrong.model.num_classes = 4;
  EXPECT_THROW(train_to_dir<float>(wrong, dir / "run2"), DataError);
}

TEST(Training, DirectoryResumeExtendsTheRun) {
  const auto dir = scratch_dir("dirresume");
  write_dataset(dir / "data", micro_spec(), SplitCounts{4, 2, 1});
  auto cfg = micro_train_config();
  cfg.epochs = 3;
  cfg.dataset_root = (dir / "data").string();
  train_to_dir<float>(cfg, dir / "full");

  auto shorter = cfg;
  shorter.epochs = 2;
  train_to_dir<float>(shorter, dir / "split");
  const auto tail = train_to_dir<float>(cfg, dir / "split", (dir / "split" / "last.ckpt").string());
  ASSERT_EQ(tail.size(), 1u);
  const auto full = from_checkpoint<float>(load_checkpoint((dir / "full" / "last.ckpt").string()));
  const auto split = from_checkpoint<float>(load_checkpoint((dir / "split" / "last.ckpt").string()));
  EXPECT_EQ(split.epoch, 3u);
  EXPECT_EQ(split.model.parameters, full.model.parameters);

  auto changed = cfg;
  changed.base_lr = 0.5;
  try {
    train_to_dir<float>(changed, dir / "split", (dir / "split" / "last.ckpt").string());
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("base_lr"), std::string::npos) << e.what();
  }
}

TEST(Training, LossFallsOverFirstEpochs) {
  std::vector<SegSample> train;
  for (std::uint64_t i = 0; i < 24; ++i) train.push_back(generate_sample(CoOccurrenceSpec{}, i));
  TrainConfig cfg;
  cfg.epochs = 5;
  auto state = init_state<float>(cfg);
  const auto logs = run_training<float>(state, train, {});
  ASSERT_EQ(logs.size(), 5u);
  EXPECT_LT(logs[4].train_loss, logs[0].train_loss);
}

TEST(Evaluate, RepeatableAndChecksClasses) {
  const auto cfg = micro_train_config();
  const auto state = init_state<double>(cfg);
  const auto samples = micro_samples(3);
  const auto a = make_report(evaluate(state.model, samples)), b = make_report(evaluate(state.model, samples));
  EXPECT_EQ(a.to_keyvalues().dump(), b.to_keyvalues().dump());
  auto bad = samples;
  bad[1].mask[3] = 9;
  EXPECT_THROW(evaluate(state.model, bad), DataError);
}

TEST(Evaluate, UntrainedModelIsNearChance) {
  auto cfg = micro_train_config();
  cfg.model.num_classes = 2;
  const auto state = init_state<float>(cfg);
  Rng rng(8);
  std::vector<SegSample> samples;
  for (int i = 0; i < 50; ++i) {
    SegSample s{Tensor<double>({16, 16, 3}), std::vector<int>(256)};
    for (auto& v : s.image.storage()) v = rng.uniform();
    for (std::size_t p = 0; p < 256; ++p) s.mask[p] = static_cast<int>((p + i) % 2);
    samples.push_back(std::move(s));
  }
  EXPECT_NEAR(pixel_acc(evaluate(state.model, samples)), 0.5, 0.1);
}

TEST(Evaluate, OverfitSampleIsRecovered) {
  const auto dir = scratch_dir("overfit");
  auto cfg = micro_train_config();
  cfg.augment = false;
  cfg.batch = 1;
  cfg.epochs = 400;
  cfg.lr_drop_every = 200;
  const auto sample = micro_samples(1, 3);
  auto state = init_state<float>(cfg);
  run_training<float>(state, sample, {});
  EXPECT_GT(miou(evaluate(state.model, sample)), 0.95);

  save_image_ppm((dir / "in.ppm").string(), sample[0].image);
  const auto labels = infer(state.model, (dir / "in.ppm").string(), (dir / "out").string());
  const auto [mask, extent] = load_mask_pgm((dir / "out_mask.pgm").string());
  EXPECT_EQ(mask, labels);
  EXPECT_EQ(extent, (std::pair<std::size_t, std::size_t>{16, 16}));
  std::size_t agree = 0;
  for (std::size_t p = 0; p < 256; ++p) {
    EXPECT_LT(mask[p], 6);
    agree += mask[p] == sample[0].mask[p];
  }
  EXPECT_GT(agree, 0.95 * 256);
  EXPECT_EQ(load_image_ppm((dir / "out_overlay.ppm").string()).shape(), (Shape{16, 16, 3}));
}

TEST(Ablate, IdenticalConfigsGiveZeroGap) {
  auto cfg = micro_train_config(BlockVariant::baseline_c);
  cfg.epochs = 1;
  const auto train = micro_samples(4), test = micro_samples(2, 50);
  const auto results = ablate<float>({{"a", cfg}, {"b", cfg}}, 2, train, test);
  ASSERT_EQ(results.size(), 2u);
  EXPECT_EQ(results[0].miou, results[1].miou);
  EXPECT_EQ(results[1].mean() - results[0].mean(), 0.0);
  EXPECT_NE(ablation_table(results).find("gap b - a = 0.0000"), std::string::npos);
}

TEST(Ablate, RejectsConfigsDifferingBeyondVariant) {
  const auto c = micro_train_config(BlockVariant::baseline_c);
  EXPECT_NO_THROW(check_comparable({c, with_variant(c, BlockVariant::rethinker_d_conv3d)}));
  auto other = c;
  other.base_lr = 0.5;
  EXPECT_THROW(check_comparable({c, other}), ConfigError);
  auto fewer = c;
  fewer.model.stages[1].variant.reset();
  EXPECT_THROW(check_comparable({c, fewer}), ConfigError);
}

TEST(Infer, RejectsIncompatibleImage) {
  const auto dir = scratch_dir("infer");
  const auto state = init_state<float>(micro_train_config());
  save_image_ppm((dir / "odd.ppm").string(), Tensor<double>({18, 16, 3}, 0.5));
  EXPECT_THROW(infer(state.model, (dir / "odd.ppm").string(), (dir / "o").string()), ShapeError);
}

}  // namespace
}  // namespace rethseg
