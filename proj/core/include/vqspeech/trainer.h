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

// Optimization loop, schedules, checkpoints and the codebook sweep.

#ifndef VQSPEECH_TRAINER_H_
#define VQSPEECH_TRAINER_H_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vqspeech/common.h"
#include "vqspeech/config.h"
#include "vqspeech/encoder.h"
#include "vqspeech/evaluation.h"
#include "vqspeech/objectives.h"
#include "vqspeech/quantizer.h"
#include "vqspeech/signal_io.h"

namespace vqspeech {

enum class Objective { kVqVae, kVqWav2VecKMeans, kVqWav2VecGumbel };

Objective parse_objective(std::string_view name);
std::string_view objective_name(Objective objective);

enum class ScheduleKind { kCosine, kWarmupCosine };

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::kWarmupCosine;
  double lr_init = 1e-7;
  double lr_peak = 1e-4;
  double lr_final = 1e-5;
  int warmup_updates = 500;

  // Throws kConfig unless rates are positive, lr_final <= lr_peak and
  // warmup_updates < total.
  void validate(int total) const;
};

// Linear warmup from lr_init to lr_peak, then a half-cosine from lr_peak to
// lr_final at update == total. Without warmup the cosine starts at lr_peak.
double lr_at(int update, const ScheduleSpec& spec, int total);

// Gumbel temperature: multiplicative decay from start, floored at end. With
// decay == 0 the factor is chosen to reach `end` at the last update.
struct TemperatureSchedule {
  double start = 2.0;
  double end = 0.5;
  double decay = 0.0;

  double at(int update, int total) const;
};

enum class OptimizerKind { kSgd, kAdam };

struct ModelConfig {
  Objective objective = Objective::kVqWav2VecKMeans;
  EncoderConfig encoder = EncoderConfig::desk();
  int codebook_size = 32;
  int groups = 2;
  KMeansConfig kmeans;
  TemperatureSchedule temperature;
  DecoderConfig decoder;
  AggregatorConfig aggregator;
  ContrastiveConfig contrastive;

  bool uses_gumbel() const { return objective == Objective::kVqWav2VecGumbel; }
  bool is_contrastive() const { return objective != Objective::kVqVae; }
  int dim() const { return encoder.output_dim(); }
  void validate() const;
};

struct TrainConfig {
  ModelConfig model;
  int updates = 300;
  int batch_size = 4;
  int segment_length = 4800;
  ScheduleSpec lr_schedule;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  uint64_t seed = 1;
  double diversity_weight = 0.1;
  bool kmeans_diversity = false;
  bool codebook_from_data = true;
  // After each k-means update, codewords no batch frame selected are moved
  // onto random encoder frames of that batch.
  bool codebook_restart = false;

  static TrainConfig from_config(const Config& config);
  void validate() const;
};

// Named presets: "desk" (the registry defaults), "paper-vqvae" and
// "paper-vqwav2vec" (paper-scale updates, batch, segments and schedules).
Config preset_config(std::string_view name);

struct Model {
  ModelConfig config;
  EncoderParameters encoder;
  Codebook codebook;
  GumbelProjection projection;  // Gumbel objective only
  DecoderParameters decoder;    // vq-vae only
  AggregatorParameters aggregator;
  StepProjections steps;

  // Components are seeded independently, so models with different
  // objectives built from the same seed share encoder and codebook.
  static Model init(const ModelConfig& config, uint64_t seed);
  static Model zeros(const ModelConfig& config);
};

struct TensorView {
  std::string name;
  double* data = nullptr;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index size() const { return rows * cols; }
};

// Non-empty parameter tensors in a fixed order.
std::vector<TensorView> parameter_tensors(Model& model);

struct Utterance {
  Waveform wave;
  std::vector<int> frame_labels;  // empty when unaligned
  std::optional<int> speaker;
};

// In-memory synthetic corpus from corpus.*; the held-out set uses a
// different seed stream.
std::vector<Utterance> synthetic_dataset(const Config& config, bool held_out);
std::vector<Utterance> load_dataset(const std::filesystem::path& manifest);
// Training (or held-out) data per data.manifest / data.eval_manifest.
std::vector<Utterance> dataset_for(const Config& config, bool held_out);

// Replaces every codeword with a distinct encoder frame (group slice) drawn
// from random crops of `data`; sampling falls back to replacement when there
// are fewer frames than codewords.
void init_codebook_from_data(Model& model, std::span<const Utterance> data,
                             int segment_length, uint64_t seed);

struct UpdateMetrics {
  int update = 0;
  double lr = 0.0;
  double task_loss = 0.0;
  double quant_loss = 0.0;
  double diversity = 0.0;
  double perplexity = 0.0;
};

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::kAdam;
  int64_t step = 0;
  Model first;   // Adam first moments
  Model second;  // Adam second moments
};

struct TrainOptions {
  int workers = 1;
  // Where to save the last finite state when training diverges.
  std::filesystem::path divergence_checkpoint;
  std::function<void(const UpdateMetrics&)> on_update;
};

class Trainer {
 public:
  explicit Trainer(const Config& config);

  const Config& config() const { return config_; }
  const TrainConfig& train_config() const { return train_; }
  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const OptimizerState& optimizer() const { return optimizer_; }
  int update() const { return update_; }
  // Batch-averaged gradient used by the most recent step.
  const Model& last_gradients() const { return last_gradients_; }

  // One parameter update on a batch cropped from `data`. With
  // train.codebook_init=data, update 0 first re-initializes the codebook
  // from `data`. Throws
  // kDivergence, leaving the parameters untouched, on a non-finite loss
  // or gradient.
  UpdateMetrics step(std::span<const Utterance> data, int workers = 1);

  // Throws kData naming the first utterance too short to train on.
  void check_data(std::span<const Utterance> data) const;

  void save(const std::filesystem::path& path) const;
  static Trainer load(const std::filesystem::path& path);

 private:
  Config config_;
  TrainConfig train_;
  Model model_;
  OptimizerState optimizer_;
  Model last_gradients_;
  int update_ = 0;
};

// The untrained model a Trainer built from `config` would start its first
// update from, including the data-driven codebook initialization.
Model baseline_model(const Config& config, std::span<const Utterance> data);

// Runs the remaining updates.
std::vector<UpdateMetrics> train(Trainer& trainer, std::span<const Utterance> data,
                                 const TrainOptions& options = {});

void write_metrics(const std::filesystem::path& path,
                   std::span<const UpdateMetrics> log,
                   std::string_view comment = {});
std::vector<UpdateMetrics> read_metrics(const std::filesystem::path& path);

struct Extraction {
  DenseFeatures dense;
  QuantizationResult quantized;
};

// Inference: k-means selection, or noise-free hard Gumbel argmax.
Extraction extract(const Model& model, const Waveform& wave);

// One segment per aligned run; features are z_q (quantized) or z_e.
std::vector<Segment> model_segments(const Model& model,
                                    std::span<const Utterance> data,
                                    bool quantized);

struct ModelEvaluation {
  AbxResult abx;
  CooccurrenceMatrix cooccurrence;
  double purity = 0.0;
};

ModelEvaluation evaluate_model(const Model& model, std::span<const Utterance> data,
                               int64_t n_triplets, uint64_t seed, AbxMode mode,
                               bool quantized = true, bool per_group = false);

// ABX triplet seed derived from the config seed.
uint64_t evaluation_seed(const Config& config);

// evaluate_model driven by eval.* and a seed derived from `seed`.
ModelEvaluation evaluate_with_config(const Model& model, std::span<const Utterance> data,
                                     const Config& config);

struct SweepRow {
  int K = 0;
  int G = 0;
  UpdateMetrics final;
  double abx_error = 0.0;
  double purity = 0.0;
};

// Parses "KxG,KxG,...".
std::vector<std::pair<int, int>> parse_codebook_list(std::string_view text);

// Trains one model per (K, G) from `base`, in the given order, and scores
// it on `eval`.
std::vector<SweepRow> sweep_codebooks(const Config& base,
                                      std::span<const std::pair<int, int>> shapes,
                                      std::span<const Utterance> data,
                                      std::span<const Utterance> eval,
                                      const TrainOptions& options = {});

void write_sweep_table(const std::filesystem::path& path,
                       std::span<const SweepRow> rows,
                       std::string_view comment = {});

}  // namespace vqspeech

#endif  // VQSPEECH_TRAINER_H_
