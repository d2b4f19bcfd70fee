// Copyright 2026 The vqspeech Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "vqspeech/trainer.h"

#include <cmath>
#include <cstring>
#include <numbers>

#include <gtest/gtest.h>

#include "test_support.h"
#include "vqspeech/config.h"

namespace vqspeech {
namespace {

using testing::TempDir;

Config small_config(std::string_view objective, int updates = 3) {
  Config c;
  c.set("objective", objective);
  c.set("corpus.utterances", "6");
  c.set("corpus.eval_utterances", "4");
  c.set("quantizer.K", "8");
  c.set("train.updates", std::to_string(updates));
  c.set("train.batch_size", "2");
  c.set("train.segment_length", "2400");
  c.set("train.warmup", "1");
  c.set("decoder.channels", "8");
  c.set("context.channels", "16");
  c.set("eval.triplets", "500");
  return c;
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

void expect_models_identical(Model& a, Model& b) {
  auto ta = parameter_tensors(a);
  auto tb = parameter_tensors(b);
  ASSERT_EQ(ta.size(), tb.size());
  for (size_t i = 0; i < ta.size(); ++i) {
    ASSERT_EQ(ta[i].name, tb[i].name);
    ASSERT_EQ(ta[i].size(), tb[i].size());
    EXPECT_EQ(std::memcmp(ta[i].data, tb[i].data, ta[i].size() * sizeof(double)), 0)
        << ta[i].name;
  }
}

void expect_metrics_identical(const UpdateMetrics& a, const UpdateMetrics& b) {
  EXPECT_EQ(a.update, b.update);
  EXPECT_TRUE(same_bits(a.lr, b.lr));
  EXPECT_TRUE(same_bits(a.task_loss, b.task_loss));
  EXPECT_TRUE(same_bits(a.quant_loss, b.quant_loss));
  EXPECT_TRUE(same_bits(a.diversity, b.diversity));
  EXPECT_TRUE(same_bits(a.perplexity, b.perplexity));
}

TEST(Schedule, WarmupEndpoints) {
  const ScheduleSpec paper;  // 1e-7 -> 1e-4 over 500 updates
  EXPECT_EQ(lr_at(0, paper, 300000), 1e-7);
  EXPECT_NEAR(lr_at(500, paper, 300000), 1e-4, 1e-4 * 1e-12);
  EXPECT_NEAR(lr_at(300000, paper, 300000), paper.lr_final, 1e-20);
  EXPECT_NEAR(lr_at(250, paper, 300000), 0.5 * (1e-7 + 1e-4), 1e-18);
  EXPECT_VQ_ERROR(lr_at(300001, paper, 300000), ErrorKind::kRange);
}

TEST(Schedule, ContinuousAtJunction) {
  const ScheduleSpec s{ScheduleKind::kWarmupCosine, 1e-6, 3e-3, 1e-5, 40};
  // Both pieces evaluated at the junction.
  const double warm = s.lr_init + (s.lr_peak - s.lr_init) * 40.0 / 40.0;
  const double cosine = s.lr_final + (s.lr_peak - s.lr_final) * (1.0 + std::cos(0.0)) / 2.0;
  EXPECT_LE(std::abs(lr_at(40, s, 200) - warm) / warm, 1e-12);
  EXPECT_LE(std::abs(lr_at(40, s, 200) - cosine) / cosine, 1e-12);
  // Step sizes on either side are both small compared to the value.
  EXPECT_LT(std::abs(lr_at(41, s, 200) - lr_at(40, s, 200)), 1e-3 * s.lr_peak);
  EXPECT_NEAR(lr_at(39, s, 200), s.lr_peak - (s.lr_peak - s.lr_init) / 40.0, 1e-15);
}

TEST(Schedule, CosineHalfwayAndValidation) {
  const ScheduleSpec s{ScheduleKind::kCosine, 1e-7, 1e-3, 1e-4, 0};
  EXPECT_EQ(lr_at(0, s, 100), 1e-3);
  EXPECT_NEAR(lr_at(50, s, 100), 0.5 * (1e-3 + 1e-4), 1e-15);
  EXPECT_NEAR(lr_at(100, s, 100), 1e-4, 1e-15);
  ScheduleSpec bad = s;
  bad.lr_final = 2e-3;
  EXPECT_VQ_ERROR(bad.validate(100), ErrorKind::kConfig);
  bad = ScheduleSpec{};
  EXPECT_VQ_ERROR(bad.validate(500), ErrorKind::kConfig);
}

TEST(Temperature, AnnealsFromStartToEnd) {
  const TemperatureSchedule t;
  EXPECT_DOUBLE_EQ(t.at(0, 100), 2.0);
  // Updates run 0..99, so the end value is reached at update 99.
  EXPECT_NEAR(t.at(99, 100), 0.5, 1e-12);
  EXPECT_EQ(t.at(100, 100), 0.5);
  for (int u = 1; u < 100; ++u) EXPECT_LT(t.at(u, 100), t.at(u - 1, 100));
  const TemperatureSchedule fast{2.0, 0.5, 0.5};
  EXPECT_DOUBLE_EQ(fast.at(1, 100), 1.0);
  EXPECT_DOUBLE_EQ(fast.at(10, 100), 0.5);
}

TEST(TrainConfig, PresetsAndValidation) {
  const TrainConfig desk = TrainConfig::from_config(Config{});
  EXPECT_LE(desk.updates, 500);
  EXPECT_LE(desk.batch_size, 8);
  EXPECT_EQ(desk.segment_length, 4800);
  EXPECT_EQ(desk.model.kmeans.beta, 0.25);
  const TrainConfig paper = TrainConfig::from_config(preset_config("paper-vqwav2vec"));
  EXPECT_EQ(paper.updates, 300000);
  EXPECT_EQ(paper.lr_schedule.lr_init, 1e-7);
  EXPECT_EQ(paper.lr_schedule.lr_peak, 1e-4);
  EXPECT_EQ(paper.lr_schedule.warmup_updates, 500);
  EXPECT_EQ(receptive_field(paper.model.encoder).samples, 465);
  EXPECT_EQ(frame_rate(paper.model.encoder), 100.0);
  EXPECT_VQ_ERROR(preset_config("nope"), ErrorKind::kConfig);

  Config c;
  c.set("train.segment_length", "200");
  EXPECT_VQ_ERROR(TrainConfig::from_config(c).validate(), ErrorKind::kConfig);
  c = Config{};
  c.set("quantizer.G", "3");
  EXPECT_VQ_ERROR(TrainConfig::from_config(c).validate(), ErrorKind::kConfig);
  EXPECT_VQ_ERROR(parse_objective("vq-something"), ErrorKind::kConfig);
}

TEST(Model, ObjectivesShareEncoderAndCodebookForASeed) {
  const ModelConfig a = TrainConfig::from_config(small_config("vqvae")).model;
  const ModelConfig b = TrainConfig::from_config(small_config("vqwav2vec-gumbel")).model;
  const Model ma = Model::init(a, 5);
  const Model mb = Model::init(b, 5);
  EXPECT_EQ(ma.encoder.layers[1].weight, mb.encoder.layers[1].weight);
  EXPECT_EQ(ma.codebook.entries, mb.codebook.entries);
  EXPECT_GT(mb.projection.weight.size(), 0);
  EXPECT_EQ(ma.projection.weight.size(), 0);
}

TEST(Training, DeterministicMetricLogs) {
  for (const char* obj : {"vqvae", "vqwav2vec-kmeans", "vqwav2vec-gumbel"}) {
    const Config c = small_config(obj, 2);
    const auto data = dataset_for(c, false);
    Trainer t1(c), t2(c);
    const auto a = train(t1, data);
    const auto b = train(t2, data);
    ASSERT_EQ(a.size(), 2u);
    for (size_t i = 0; i < a.size(); ++i) expect_metrics_identical(a[i], b[i]);
    expect_models_identical(t1.model(), t2.model());
  }
}

TEST(Training, WorkersDoNotChangeResults) {
  const Config c = small_config("vqwav2vec-kmeans", 2);
  const auto data = dataset_for(c, false);
  Trainer t1(c), t3(c);
  TrainOptions three;
  three.workers = 3;
  const auto a = train(t1, data);
  const auto b = train(t3, data, three);
  for (size_t i = 0; i < a.size(); ++i) expect_metrics_identical(a[i], b[i]);
  expect_models_identical(t1.model(), t3.model());
}

TEST(Training, ContrastiveLossFallsOver300Updates) {
  Config c;
  c.set("corpus.utterances", "200");
  c.set("quantizer.beta", "0.01");
  c.set("train.codebook_restart", "true");
  c.set("train.kmeans_diversity", "true");
  const auto data = dataset_for(c, false);
  Trainer t(c);
  const auto log = train(t, data);
  ASSERT_EQ(log.size(), 300u);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 10; ++i) {
    first += log[i].task_loss / 10;
    last += log[290 + i].task_loss / 10;
  }
  EXPECT_LT(last, first);
}

TEST(Training, LrColumnFollowsSchedule) {
  const Config c = small_config("vqwav2vec-kmeans", 4);
  const auto data = dataset_for(c, false);
  Trainer t(c);
  const auto log = train(t, data);
  for (const auto& m : log) {
    EXPECT_EQ(m.lr, lr_at(m.update, t.train_config().lr_schedule, 4));
    EXPECT_TRUE(std::isfinite(m.task_loss));
    EXPECT_GE(m.perplexity, 1.0);
  }
  EXPECT_VQ_ERROR(t.step(data), ErrorKind::kState);
}

TEST(Training, SgdStepIsExactlyMinusLrTimesGradient) {
  for (const char* obj : {"vqvae", "vqwav2vec-kmeans", "vqwav2vec-gumbel"}) {
    Config c = small_config(obj, 3);
    c.set("train.optimizer", "sgd");
    c.set("train.codebook_init", "uniform");
    const auto data = dataset_for(c, false);
    Trainer t(c);
    t.step(data);
    Model before = t.model();
    const UpdateMetrics m = t.step(data);
    Model grad = t.last_gradients();
    auto pb = parameter_tensors(before);
    auto pa = parameter_tensors(t.model());
    auto pg = parameter_tensors(grad);
    ASSERT_EQ(pb.size(), pg.size());
    int64_t changed = 0;
    for (size_t i = 0; i < pb.size(); ++i) {
      for (Eigen::Index j = 0; j < pb[i].size(); ++j) {
        const double expected = pb[i].data[j] - m.lr * pg[i].data[j];
        ASSERT_TRUE(same_bits(pa[i].data[j], expected)) << obj << " " << pb[i].name << " " << j;
        changed += pa[i].data[j] != pb[i].data[j];
      }
    }
    EXPECT_GT(changed, 0) << obj;
  }
}

TEST(Checkpoint, RoundTripPreservesNextUpdateBitwise) {
  for (const char* obj : {"vqvae", "vqwav2vec-kmeans", "vqwav2vec-gumbel"}) {
    TempDir dir;
    Config c = small_config(obj, 3);
    c.set("train.codebook_restart", "true");
    const auto data = dataset_for(c, false);
    Trainer a(c);
    a.step(data);
    a.save(dir / "ck.bin");
    Trainer b = Trainer::load(dir / "ck.bin");
    EXPECT_EQ(b.update(), 1);
    EXPECT_EQ(b.config().hash(), c.hash());
    expect_models_identical(a.model(), b.model());
    expect_metrics_identical(a.step(data), b.step(data));
    expect_models_identical(a.model(), b.model());
    // Adam moments survive too.
    expect_models_identical(const_cast<Model&>(a.optimizer().first),
                            const_cast<Model&>(b.optimizer().first));
  }
}

TEST(Checkpoint, RejectsCorruptFiles) {
  TempDir dir;
  testing::write_text(dir / "junk.bin", "not a checkpoint");
  EXPECT_VQ_ERROR(Trainer::load(dir / "junk.bin"), ErrorKind::kFormat);
  EXPECT_VQ_ERROR(Trainer::load(dir / "absent.bin"), ErrorKind::kPath);

  const Config c = small_config("vqwav2vec-kmeans", 2);
  Trainer t(c);
  t.save(dir / "ok.bin");
  std::string bytes = testing::read_text(dir / "ok.bin");
  testing::write_text(dir / "short.bin", bytes.substr(0, bytes.size() / 2));
  EXPECT_VQ_ERROR(Trainer::load(dir / "short.bin"), ErrorKind::kFormat);
}

TEST(Training, DivergenceSavesLastFiniteState) {
  TempDir dir;
  Config c = small_config("vqwav2vec-kmeans", 50);
  c.set("train.optimizer", "sgd");
  c.set("train.schedule", "cosine");
  c.set("train.lr_peak", "1e200");
  c.set("train.lr_final", "1e200");
  const auto data = dataset_for(c, false);
  Trainer t(c);
  TrainOptions options;
  options.divergence_checkpoint = dir / "diverged.bin";
  EXPECT_VQ_ERROR(train(t, data, options), ErrorKind::kDivergence);
  ASSERT_TRUE(std::filesystem::exists(dir / "diverged.bin"));
  Trainer saved = Trainer::load(dir / "diverged.bin");
  for (const auto& tensor : parameter_tensors(saved.model())) {
    for (Eigen::Index j = 0; j < tensor.size(); ++j) ASSERT_TRUE(std::isfinite(tensor.data[j]));
  }
}

TEST(Training, ShortUtteranceIsNamed) {
  const Config c = small_config("vqwav2vec-kmeans");
  std::vector<Utterance> data = dataset_for(c, false);
  data[2].wave.samples.resize(100);
  try {
    Trainer(c).check_data(data);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kData);
    EXPECT_NE(std::string(e.what()).find("2"), std::string::npos);
  }
}

TEST(Metrics, CsvRoundTrip) {
  TempDir dir;
  const std::vector<UpdateMetrics> log = {{0, 1e-7, 1.5, 0.25, -0.1, 7.5},
                                          {1, 2.5e-4, 1.0 / 3.0, 0.0, 0.0, 1.0}};
  write_metrics(dir / "m.csv", log, "prov");
  const std::string text = testing::read_text(dir / "m.csv");
  EXPECT_EQ(text.rfind("# prov\nupdate,lr,task_loss,quant_loss,diversity,perplexity\n", 0), 0u);
  const auto back = read_metrics(dir / "m.csv");
  ASSERT_EQ(back.size(), 2u);
  for (size_t i = 0; i < 2; ++i) expect_metrics_identical(back[i], log[i]);
}

TEST(Sweep, ParsesDefaultShapes) {
  const auto shapes = parse_codebook_list("4x8,8x8,320x2,512x1");
  const std::vector<std::pair<int, int>> expected = {{4, 8}, {8, 8}, {320, 2}, {512, 1}};
  EXPECT_EQ(shapes, expected);
  for (const auto& [K, G] : shapes) {
    Config c;
    c.set("quantizer.K", std::to_string(K));
    c.set("quantizer.G", std::to_string(G));
    EXPECT_NO_THROW(TrainConfig::from_config(c).validate());
  }
  EXPECT_VQ_ERROR(parse_codebook_list("4x"), ErrorKind::kConfig);
  EXPECT_VQ_ERROR(parse_codebook_list("0x2"), ErrorKind::kConfig);
}

TEST(Sweep, SingleShapeMatchesDirectTrainAndKeepsOrder) {
  Config base = small_config("vqwav2vec-kmeans", 2);
  const auto data = dataset_for(base, false);
  const auto eval = dataset_for(base, true);
  const std::vector<std::pair<int, int>> one = {{4, 4}};
  const auto rows = sweep_codebooks(base, one, data, eval);
  ASSERT_EQ(rows.size(), 1u);

  Config direct = base;
  direct.set("quantizer.K", "4");
  direct.set("quantizer.G", "4");
  Trainer t(direct);
  const auto log = train(t, data);
  expect_metrics_identical(rows[0].final, log.back());
  const ModelEvaluation ev = evaluate_with_config(t.model(), eval, direct);
  EXPECT_EQ(rows[0].abx_error, ev.abx.error_rate);
  EXPECT_EQ(rows[0].purity, ev.purity);

  const std::vector<std::pair<int, int>> two = {{16, 1}, {2, 2}};
  const auto ordered = sweep_codebooks(base, two, data, eval);
  ASSERT_EQ(ordered.size(), 2u);
  EXPECT_EQ(ordered[0].K, 16);
  EXPECT_EQ(ordered[1].G, 2);
  const std::vector<std::pair<int, int>> bad = {{4, 4}, {4, 3}};
  EXPECT_VQ_ERROR(sweep_codebooks(base, bad, data, eval), ErrorKind::kConfig);
}

TEST(Extraction, KMeansAndNoiselessGumbel) {
  for (const char* obj : {"vqwav2vec-kmeans", "vqwav2vec-gumbel"}) {
    const Config c = small_config(obj);
    const auto data = dataset_for(c, true);
    const Model m = Model::init(TrainConfig::from_config(c).model, 3);
    const Extraction a = extract(m, data[0].wave);
    const Extraction b = extract(m, data[0].wave);
    EXPECT_EQ(a.quantized.indices, b.quantized.indices);
    EXPECT_EQ(a.dense.values.rows(), static_cast<Eigen::Index>(data[0].frame_labels.size()));
    EXPECT_EQ(a.quantized.indices.cols(), 2);
  }
}

}  // namespace
}  // namespace vqspeech
