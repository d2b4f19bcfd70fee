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

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace vqspeech {

namespace {

// Seed streams.
constexpr uint64_t kStreamInit = 10;
constexpr uint64_t kStreamBatch = 11;
constexpr uint64_t kStreamGumbel = 12;
constexpr uint64_t kStreamDistractor = 13;
constexpr uint64_t kStreamCorpus = 14;
constexpr uint64_t kStreamHeldOut = 15;
constexpr uint64_t kStreamAbx = 16;
constexpr uint64_t kStreamCodebook = 17;

constexpr char kMagic[8] = {'V', 'Q', 'S', 'P', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCheckpointVersion = 1;

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.98;
constexpr double kAdamEps = 1e-6;

}  // namespace

Objective parse_objective(std::string_view name) {
  if (name == "vqvae") return Objective::kVqVae;
  if (name == "vqwav2vec-kmeans") return Objective::kVqWav2VecKMeans;
  if (name == "vqwav2vec-gumbel") return Objective::kVqWav2VecGumbel;
  throw Error(ErrorKind::kConfig,
              "unknown objective '" + std::string(name) +
                  "' (vqvae, vqwav2vec-kmeans, vqwav2vec-gumbel)");
}

std::string_view objective_name(Objective objective) {
  switch (objective) {
    case Objective::kVqVae: return "vqvae";
    case Objective::kVqWav2VecKMeans: return "vqwav2vec-kmeans";
    case Objective::kVqWav2VecGumbel: return "vqwav2vec-gumbel";
  }
  return "vqvae";
}

void ScheduleSpec::validate(int total) const {
  if (!(lr_init > 0 && lr_peak > 0 && lr_final > 0)) {
    throw Error(ErrorKind::kConfig, "learning rates must be positive");
  }
  if (lr_final > lr_peak) {
    throw Error(ErrorKind::kConfig, "lr_final must not exceed lr_peak");
  }
  if (kind == ScheduleKind::kWarmupCosine &&
      (warmup_updates < 0 || warmup_updates >= total)) {
    throw Error(ErrorKind::kConfig, "warmup updates must be in [0, " +
                                        std::to_string(total) + ")");
  }
}

double lr_at(int update, const ScheduleSpec& spec, int total) {
  if (update < 0 || update > total) {
    throw Error(ErrorKind::kRange, "update " + std::to_string(update) +
                                       " outside [0, " + std::to_string(total) + "]");
  }
  const int warmup = spec.kind == ScheduleKind::kWarmupCosine ? spec.warmup_updates : 0;
  if (update < warmup) {
    return spec.lr_init + (spec.lr_peak - spec.lr_init) * update / warmup;
  }
  const int span = total - warmup;
  const double progress = span > 0 ? static_cast<double>(update - warmup) / span : 1.0;
  return spec.lr_final + (spec.lr_peak - spec.lr_final) *
                             (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
}

double TemperatureSchedule::at(int update, int total) const {
  double factor = decay;
  if (factor == 0.0) {
    factor = std::pow(end / start, 1.0 / std::max(total - 1, 1));
  }
  const double tau = start * std::pow(factor, update);
  return start >= end ? std::max(tau, end) : std::min(tau, end);
}

void ModelConfig::validate() const {
  encoder.validate();
  if (codebook_size < 1 || groups < 1) {
    throw Error(ErrorKind::kConfig, "K and G must be positive");
  }
  if (dim() % groups != 0) {
    throw Error(ErrorKind::kConfig, "G = " + std::to_string(groups) +
                                        " does not divide D = " + std::to_string(dim()));
  }
  if (kmeans.beta < 0) throw Error(ErrorKind::kConfig, "beta must be non-negative");
  if (!(temperature.start > 0 && temperature.end > 0 && temperature.decay >= 0)) {
    throw Error(ErrorKind::kConfig, "temperatures must be positive");
  }
  if (objective == Objective::kVqVae) {
    decoder.validate();
  } else {
    aggregator.validate();
    if (contrastive.steps < 1 || contrastive.n_distractors < 1) {
      throw Error(ErrorKind::kConfig, "context.steps and context.distractors must be >= 1");
    }
  }
}

TrainConfig TrainConfig::from_config(const Config& c) {
  TrainConfig t;
  ModelConfig& m = t.model;
  m.objective = parse_objective(c.get("objective"));
  const int rate = c.get_int("corpus.sample_rate");
  const std::string& preset = c.get("encoder.preset");
  if (preset == "desk") {
    m.encoder = EncoderConfig::desk(rate);
  } else if (preset == "paper") {
    m.encoder = EncoderConfig::paper(rate);
  } else {
    throw Error(ErrorKind::kConfig, "encoder.preset must be desk or paper, got '" + preset + "'");
  }
  m.encoder.activation = parse_activation(c.get("encoder.activation"));
  m.encoder = m.encoder.with_extra_downsample(c.get_int("encoder.extra_downsample"));
  m.codebook_size = c.get_int("quantizer.K");
  m.groups = c.get_int("quantizer.G");
  m.kmeans.beta = c.get_double("quantizer.beta");
  m.temperature.start = c.get_double("quantizer.tau_start");
  m.temperature.end = c.get_double("quantizer.tau_end");
  m.temperature.decay = c.get_double("quantizer.tau_decay");

  const int D = m.encoder.output_dim();
  m.decoder = DecoderConfig::desk(D, c.get_int("decoder.channels"));
  m.decoder.layers.clear();
  for (int d : c.get_int_list("decoder.dilations")) {
    m.decoder.layers.push_back({m.decoder.channels, c.get_int("decoder.kernel"), d});
  }
  m.decoder.use_speaker = c.get_bool("decoder.use_speaker");
  m.decoder.n_speakers = m.decoder.use_speaker ? c.get_int("decoder.n_speakers") : 0;

  m.aggregator = AggregatorConfig::desk(D, c.get_int("context.channels"),
                                        c.get_int("context.layers"),
                                        c.get_int("context.kernel"));
  m.contrastive.steps = c.get_int("context.steps");
  m.contrastive.n_distractors = c.get_int("context.distractors");
  m.contrastive.lambda = c.get_double("context.lambda");
  const std::string& targets = c.get("context.targets");
  if (targets == "quantized") {
    m.contrastive.targets = TargetStream::kQuantized;
  } else if (targets == "dense") {
    m.contrastive.targets = TargetStream::kDense;
  } else {
    throw Error(ErrorKind::kConfig, "context.targets must be quantized or dense");
  }
  const std::string& sampling = c.get("context.sampling");
  if (sampling == "utterance") {
    m.contrastive.sampling = DistractorSampling::kUtterance;
  } else if (sampling == "window") {
    m.contrastive.sampling = DistractorSampling::kWindow;
  } else {
    throw Error(ErrorKind::kConfig, "context.sampling must be utterance or window");
  }
  const std::string& form = c.get("context.distractor_form");
  if (form == "log") {
    m.contrastive.form = DistractorForm::kLogSigmoid;
  } else if (form == "sigmoid") {
    m.contrastive.form = DistractorForm::kSigmoid;
  } else {
    throw Error(ErrorKind::kConfig, "context.distractor_form must be log or sigmoid");
  }

  t.updates = c.get_int("train.updates");
  t.batch_size = c.get_int("train.batch_size");
  t.segment_length = c.get_int("train.segment_length");
  const std::string& opt = c.get("train.optimizer");
  if (opt == "adam") {
    t.optimizer = OptimizerKind::kAdam;
  } else if (opt == "sgd") {
    t.optimizer = OptimizerKind::kSgd;
  } else {
    throw Error(ErrorKind::kConfig, "train.optimizer must be adam or sgd");
  }
  const std::string& sched = c.get("train.schedule");
  if (sched == "cosine") {
    t.lr_schedule.kind = ScheduleKind::kCosine;
  } else if (sched == "warmup-cosine") {
    t.lr_schedule.kind = ScheduleKind::kWarmupCosine;
  } else {
    throw Error(ErrorKind::kConfig, "train.schedule must be cosine or warmup-cosine");
  }
  t.lr_schedule.lr_init = c.get_double("train.lr_init");
  t.lr_schedule.lr_peak = c.get_double("train.lr_peak");
  t.lr_schedule.lr_final = c.get_double("train.lr_final");
  t.lr_schedule.warmup_updates = c.get_int("train.warmup");
  t.seed = static_cast<uint64_t>(c.get_int64("seed"));
  t.diversity_weight = c.get_double("train.diversity_weight");
  t.kmeans_diversity = c.get_bool("train.kmeans_diversity");
  const std::string& init = c.get("train.codebook_init");
  if (init != "data" && init != "uniform") {
    throw Error(ErrorKind::kConfig, "train.codebook_init must be data or uniform");
  }
  t.codebook_from_data = init == "data";
  t.codebook_restart = c.get_bool("train.codebook_restart");
  t.validate();
  return t;
}

void TrainConfig::validate() const {
  model.validate();
  if (updates < 1) throw Error(ErrorKind::kConfig, "train.updates must be >= 1");
  if (batch_size < 1) throw Error(ErrorKind::kConfig, "train.batch_size must be >= 1");
  const int rf = receptive_field(model.encoder).samples;
  if (segment_length < rf) {
    throw Error(ErrorKind::kConfig, "train.segment_length " + std::to_string(segment_length) +
                                        " is shorter than the receptive field " +
                                        std::to_string(rf));
  }
  lr_schedule.validate(updates);
  if (diversity_weight < 0) {
    throw Error(ErrorKind::kConfig, "train.diversity_weight must be non-negative");
  }
}

Config preset_config(std::string_view name) {
  Config c;
  if (name == "desk") return c;
  if (name == "paper-vqvae") {
    c.set("objective", "vqvae");
    c.set("encoder.preset", "paper");
    c.set("quantizer.K", "320");
    c.set("quantizer.G", "2");
    c.set("train.updates", "300000");
    c.set("train.batch_size", "64");
    c.set("train.segment_length", "512");
    c.set("train.schedule", "cosine");
    c.set("train.lr_peak", "2e-4");
    c.set("train.lr_final", "1e-6");
    c.set("train.warmup", "0");
    return c;
  }
  if (name == "paper-vqwav2vec") {
    c.set("objective", "vqwav2vec-kmeans");
    c.set("encoder.preset", "paper");
    c.set("quantizer.K", "320");
    c.set("quantizer.G", "2");
    c.set("context.channels", "512");
    c.set("train.updates", "300000");
    c.set("train.batch_size", "20");
    c.set("train.segment_length", "150000");
    c.set("train.schedule", "warmup-cosine");
    c.set("train.lr_init", "1e-7");
    c.set("train.lr_peak", "1e-4");
    c.set("train.lr_final", "1e-5");
    c.set("train.warmup", "500");
    return c;
  }
  throw Error(ErrorKind::kConfig, "unknown preset '" + std::string(name) +
                                      "' (desk, paper-vqvae, paper-vqwav2vec)");
}

Model Model::init(const ModelConfig& config, uint64_t seed) {
  config.validate();
  Model m;
  m.config = config;
  const int D = config.dim();
  const int K = config.codebook_size;
  const int G = config.groups;
  m.encoder = EncoderParameters::init(config.encoder, derive_seed(seed, kStreamInit, 0));
  m.codebook = Codebook::init(K, G, D, derive_seed(seed, kStreamInit, 1));
  if (config.uses_gumbel()) {
    m.projection = GumbelProjection::init(K, G, D, derive_seed(seed, kStreamInit, 2));
  }
  if (config.objective == Objective::kVqVae) {
    m.decoder = DecoderParameters::init(config.decoder, derive_seed(seed, kStreamInit, 3));
  } else {
    m.aggregator =
        AggregatorParameters::init(config.aggregator, derive_seed(seed, kStreamInit, 4));
    m.steps = StepProjections::init(config.contrastive.steps, config.aggregator.output_dim(),
                                    D, derive_seed(seed, kStreamInit, 5));
  }
  return m;
}

Model Model::zeros(const ModelConfig& config) {
  Model m;
  m.config = config;
  const int D = config.dim();
  const int K = config.codebook_size;
  const int G = config.groups;
  m.encoder = EncoderParameters::zeros(config.encoder);
  m.codebook = Codebook::zeros(K, G, D);
  if (config.uses_gumbel()) m.projection = GumbelProjection::zeros(K, G, D);
  if (config.objective == Objective::kVqVae) {
    m.decoder = DecoderParameters::zeros(config.decoder);
  } else {
    m.aggregator = AggregatorParameters::zeros(config.aggregator);
    m.steps = StepProjections::zeros(config.contrastive.steps,
                                     config.aggregator.output_dim(), D);
  }
  return m;
}

std::vector<TensorView> parameter_tensors(Model& model) {
  std::vector<TensorView> out;
  auto add = [&](std::string name, auto& t) {
    if (t.size() > 0) out.push_back({std::move(name), t.data(), t.rows(), t.cols()});
  };
  auto add_conv = [&](const std::string& prefix, ConvParameters& p) {
    add(prefix + ".weight", p.weight);
    add(prefix + ".bias", p.bias);
  };
  for (size_t i = 0; i < model.encoder.layers.size(); ++i) {
    add_conv("encoder.layer" + std::to_string(i), model.encoder.layers[i]);
  }
  add("codebook.entries", model.codebook.entries);
  add("quantizer.projection.weight", model.projection.weight);
  add("quantizer.projection.bias", model.projection.bias);
  add_conv("decoder.input", model.decoder.input);
  for (size_t i = 0; i < model.decoder.layers.size(); ++i) {
    add_conv("decoder.layer" + std::to_string(i), model.decoder.layers[i]);
  }
  add("decoder.cond_weight", model.decoder.cond_weight);
  add("decoder.cond_bias", model.decoder.cond_bias);
  add("decoder.speaker_embedding", model.decoder.speaker_embedding);
  add("decoder.out_weight", model.decoder.out_weight);
  add("decoder.out_bias", model.decoder.out_bias);
  for (size_t i = 0; i < model.aggregator.layers.size(); ++i) {
    add_conv("aggregator.layer" + std::to_string(i), model.aggregator.layers[i]);
  }
  for (size_t k = 0; k < model.steps.weight.size(); ++k) {
    add("context.step" + std::to_string(k + 1) + ".weight", model.steps.weight[k]);
    add("context.step" + std::to_string(k + 1) + ".bias", model.steps.bias[k]);
  }
  return out;
}

namespace {

CorpusOptions corpus_options(const Config& c) {
  const TrainConfig t = TrainConfig::from_config(c);
  CorpusOptions o;
  o.sample_rate = c.get_int("corpus.sample_rate");
  o.geometry = frame_geometry(t.model.encoder);
  o.n_speakers = c.get_int("corpus.speakers");
  o.noise_std = c.get_double("corpus.noise");
  o.min_utterance_samples = c.get_int("corpus.min_length");
  return o;
}

}  // namespace

std::vector<Utterance> synthetic_dataset(const Config& config, bool held_out) {
  const uint64_t seed = static_cast<uint64_t>(config.get_int64("seed"));
  const int n = config.get_int(held_out ? "corpus.eval_utterances" : "corpus.utterances");
  const SyntheticCorpus corpus = generate_synthetic_corpus(
      n, config.get_int("corpus.classes"),
      derive_seed(seed, held_out ? kStreamHeldOut : kStreamCorpus), corpus_options(config));
  std::vector<Utterance> out(corpus.waveforms.size());
  for (size_t i = 0; i < out.size(); ++i) {
    out[i].wave = corpus.waveforms[i];
    out[i].frame_labels = corpus.alignments[i].labels;
    out[i].speaker = corpus.speakers[i];
  }
  return out;
}

std::vector<Utterance> load_dataset(const std::filesystem::path& manifest) {
  const DatasetManifest m = read_manifest(manifest);
  std::vector<Utterance> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) {
    Utterance u;
    u.wave = load_waveform(e.audio_path);
    if (u.wave.sample_rate != m.sample_rate) {
      throw Error(ErrorKind::kData, e.audio_path + " has sample rate " +
                                        std::to_string(u.wave.sample_rate) +
                                        ", manifest declares " +
                                        std::to_string(m.sample_rate));
    }
    if (e.alignment_path) u.frame_labels = read_alignment(*e.alignment_path).labels;
    u.speaker = e.speaker_id;
    out.push_back(std::move(u));
  }
  return out;
}

std::vector<Utterance> dataset_for(const Config& config, bool held_out) {
  const std::string& path = config.get(held_out ? "data.eval_manifest" : "data.manifest");
  if (!path.empty()) return load_dataset(path);
  return synthetic_dataset(config, held_out);
}

namespace {

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  workers = std::min(workers, n);
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct Example {
  Waveform crop;
  std::optional<int> speaker;
  EncoderTrace trace;
  Matrix z_e;
  QuantizationResult q;
  Matrix soft;        // soft k-means assignments when penalized
  Matrix grad_probs;  // upstream diversity gradient
  Model grad;
  double task = 0.0;
  double quant = 0.0;
};

int minimum_frames(const ModelConfig& m) {
  return m.is_contrastive() ? m.contrastive.steps + 1 : 1;
}

bool model_finite(const Model& model) {
  for (const auto& t : parameter_tensors(const_cast<Model&>(model))) {
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      if (!std::isfinite(t.data[i])) return false;
    }
  }
  return true;
}

void restart_unused_codewords(std::span<const Example> ex, const CountMatrix& counts,
                              uint64_t seed, int update, Model& model,
                              OptimizerState& optimizer) {
  const ModelConfig& mc = model.config;
  const int G = mc.groups;
  const int sub = model.codebook.sub_dim();
  Eigen::Index frames = 0;
  for (const auto& e : ex) frames += e.z_e.rows();
  std::mt19937_64 rng(derive_seed(seed, kStreamCodebook, static_cast<uint64_t>(update) + 1));
  std::uniform_int_distribution<Eigen::Index> pick(0, frames * G - 1);
  const bool adam = optimizer.kind == OptimizerKind::kAdam;
  for (int k = 0; k < mc.codebook_size; ++k) {
    if (counts.col(k).sum() > 0) continue;
    Eigen::Index r = pick(rng);
    const int g = static_cast<int>(r % G);
    r /= G;
    size_t b = 0;
    while (r >= ex[b].z_e.rows()) r -= ex[b++].z_e.rows();
    model.codebook.entries.row(k) = ex[b].z_e.row(r).segment(g * sub, sub);
    if (adam) {
      optimizer.first.codebook.entries.row(k).setZero();
      optimizer.second.codebook.entries.row(k).setZero();
    }
  }
}

}  // namespace

void init_codebook_from_data(Model& model, std::span<const Utterance> data,
                             int segment_length, uint64_t seed) {
  if (data.empty()) throw Error(ErrorKind::kData, "no utterances to initialize the codebook");
  Codebook& cb = model.codebook;
  const int K = cb.size();
  const int G = cb.groups;
  const int d = cb.sub_dim();
  constexpr int kMaxCrops = 64;
  std::mt19937_64 rng(seed);
  std::vector<RowVector> frames;
  for (int n = 0; n < kMaxCrops && static_cast<int>(frames.size()) < 4 * K; ++n) {
    const Utterance& utt = data[std::uniform_int_distribution<size_t>(0, data.size() - 1)(rng)];
    const int len = utt.wave.size();
    int offset = 0;
    int length = len;
    if (len > segment_length) {
      offset = std::uniform_int_distribution<int>(0, len - segment_length)(rng);
      length = segment_length;
    }
    Waveform crop;
    crop.sample_rate = utt.wave.sample_rate;
    crop.samples.assign(utt.wave.samples.begin() + offset,
                        utt.wave.samples.begin() + offset + length);
    const Matrix z = encode_forward(crop, model.encoder, model.config.encoder).values;
    for (Eigen::Index t = 0; t < z.rows(); ++t) frames.push_back(z.row(t));
  }
  // Codewords are shared by all groups, so every group slice is a candidate.
  const int n = static_cast<int>(frames.size()) * G;
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  for (int k = 0; k < K; ++k) {
    const int pick = k < n ? order[k] : std::uniform_int_distribution<int>(0, n - 1)(rng);
    cb.entries.row(k) = frames[pick / G].segment((pick % G) * d, d);
  }
}

Trainer::Trainer(const Config& config)
    : config_(config), train_(TrainConfig::from_config(config)) {
  model_ = Model::init(train_.model, train_.seed);
  optimizer_.kind = train_.optimizer;
  if (optimizer_.kind == OptimizerKind::kAdam) {
    optimizer_.first = Model::zeros(train_.model);
    optimizer_.second = Model::zeros(train_.model);
  }
}

void Trainer::check_data(std::span<const Utterance> data) const {
  if (data.empty()) throw Error(ErrorKind::kData, "no training utterances");
  const ModelConfig& m = train_.model;
  const int need = minimum_frames(m);
  for (size_t i = 0; i < data.size(); ++i) {
    const Utterance& u = data[i];
    if (u.wave.sample_rate != m.encoder.input_sample_rate) {
      throw Error(ErrorKind::kData, "utterance " + std::to_string(i) + " has sample rate " +
                                        std::to_string(u.wave.sample_rate) + ", encoder expects " +
                                        std::to_string(m.encoder.input_sample_rate));
    }
    const int len = std::min(u.wave.size(), train_.segment_length);
    if (encoder_output_length(m.encoder, len) < need) {
      throw Error(ErrorKind::kData, "utterance " + std::to_string(i) + " (" +
                                        std::to_string(u.wave.size()) +
                                        " samples) yields fewer than " +
                                        std::to_string(need) + " latent frames");
    }
    if (m.objective == Objective::kVqVae && m.decoder.use_speaker &&
        (!u.speaker || *u.speaker < 0 || *u.speaker >= m.decoder.n_speakers)) {
      throw Error(ErrorKind::kData, "utterance " + std::to_string(i) +
                                        " needs a speaker id in [0, " +
                                        std::to_string(m.decoder.n_speakers) + ")");
    }
  }
}

UpdateMetrics Trainer::step(std::span<const Utterance> data, int workers) {
  const TrainConfig& tc = train_;
  const ModelConfig& mc = tc.model;
  const int u = update_;
  if (u >= tc.updates) {
    throw Error(ErrorKind::kState, "all " + std::to_string(tc.updates) +
                                       " updates have been applied");
  }
  if (data.empty()) throw Error(ErrorKind::kData, "no training utterances");
  if (u == 0 && tc.codebook_from_data) {
    init_codebook_from_data(model_, data, tc.segment_length,
                            derive_seed(tc.seed, kStreamCodebook));
  }
  const int B = tc.batch_size;
  const int G = mc.groups;
  const double lr = lr_at(u, tc.lr_schedule, tc.updates);
  const double tau = mc.temperature.at(u, tc.updates);
  const bool soft_kmeans = !mc.uses_gumbel() && tc.kmeans_diversity;
  const bool penalize = (mc.uses_gumbel() || soft_kmeans) && tc.diversity_weight > 0;

  std::vector<Example> ex(B);
  {
    std::mt19937_64 rng(derive_seed(tc.seed, kStreamBatch, static_cast<uint64_t>(u)));
    for (int b = 0; b < B; ++b) {
      const Utterance& utt =
          data[std::uniform_int_distribution<size_t>(0, data.size() - 1)(rng)];
      const int len = utt.wave.size();
      int offset = 0;
      int length = len;
      if (len > tc.segment_length) {
        offset = std::uniform_int_distribution<int>(0, len - tc.segment_length)(rng);
        length = tc.segment_length;
      }
      ex[b].crop.sample_rate = utt.wave.sample_rate;
      ex[b].crop.samples.assign(utt.wave.samples.begin() + offset,
                                utt.wave.samples.begin() + offset + length);
      ex[b].speaker = utt.speaker;
    }
  }
  auto example_seed = [&](uint64_t stream, int b) {
    return derive_seed(tc.seed, stream, static_cast<uint64_t>(u) * B + b);
  };

  parallel_for(B, workers, [&](int b) {
    Example& e = ex[b];
    e.z_e = encode_forward(e.crop, model_.encoder, mc.encoder, &e.trace).values;
    if (mc.uses_gumbel()) {
      GumbelConfig gc;
      gc.temperature = tau;
      e.q = gumbel_select(e.z_e, model_.codebook, model_.projection, gc,
                          example_seed(kStreamGumbel, b));
    } else {
      e.q = kmeans_select(e.z_e, model_.codebook);
      if (soft_kmeans) e.soft = kmeans_soft_assignment(e.z_e, model_.codebook);
    }
  });

  // The penalty couples the batch through the averaged probabilities.
  double diversity = 0.0;
  CountMatrix counts = ex[0].q.selection_counts;
  for (int b = 1; b < B; ++b) counts += ex[b].q.selection_counts;
  if (mc.uses_gumbel() || soft_kmeans) {
    Eigen::Index rows = 0;
    for (const auto& e : ex) rows += mc.uses_gumbel() ? e.q.gumbel->probs.rows() : e.soft.rows();
    Matrix stacked(rows, mc.codebook_size);
    Eigen::Index r = 0;
    for (const auto& e : ex) {
      const Matrix& p = mc.uses_gumbel() ? e.q.gumbel->probs : e.soft;
      stacked.middleRows(r, p.rows()) = p;
      r += p.rows();
    }
    const DiversityPenalty pen = diversity_penalty(average_group_probs(stacked, G));
    diversity = pen.loss;
    if (penalize) {
      const double frames = static_cast<double>(rows / G);
      // Multiplied by B because the batch gradient is divided by B below.
      const double scale = B * tc.diversity_weight / frames;
      for (auto& e : ex) {
        const Eigen::Index n = mc.uses_gumbel() ? e.q.gumbel->probs.rows() : e.soft.rows();
        e.grad_probs.resize(n, mc.codebook_size);
        for (Eigen::Index i = 0; i < n; ++i) e.grad_probs.row(i) = scale * pen.grad.row(i % G);
      }
    }
  } else {
    Matrix freq(G, mc.codebook_size);
    for (int g = 0; g < G; ++g) {
      freq.row(g) = counts.row(g).cast<double>() / static_cast<double>(counts.row(g).sum());
    }
    diversity = diversity_penalty(freq).loss;
  }

  const int stride = total_stride(mc.encoder);
  parallel_for(B, workers, [&](int b) {
    Example& e = ex[b];
    Model& g = e.grad;
    g = Model::zeros(mc);
    Matrix grad_zq;
    Matrix grad_ze_extra;
    if (mc.objective == Objective::kVqVae) {
      ReconstructionResult rec = reconstruction_loss(e.crop, e.q.z_q, stride, e.speaker,
                                                     model_.decoder, mc.decoder);
      e.task = rec.nll;
      g.decoder = std::move(rec.grads);
      grad_zq = std::move(rec.grad_z_q);
    } else {
      const bool quantized_targets = mc.contrastive.targets == TargetStream::kQuantized;
      AggregatorTrace at;
      const ContextFeatures ctx =
          aggregate_context(e.q.z_q, model_.aggregator, mc.aggregator, &at);
      ContrastiveResult cr =
          contrastive_loss(quantized_targets ? e.q.z_q : e.z_e, ctx.values, model_.steps,
                           mc.contrastive, example_seed(kStreamDistractor, b));
      e.task = cr.loss;
      g.steps = std::move(cr.grad_projections);
      grad_zq = aggregate_backward(cr.grad_context, at, model_.aggregator, mc.aggregator,
                                   g.aggregator);
      if (quantized_targets) {
        grad_zq += cr.grad_targets;
      } else {
        grad_ze_extra = std::move(cr.grad_targets);
      }
    }
    Matrix grad_ze;
    if (mc.uses_gumbel()) {
      GumbelGradients gg =
          gumbel_backward(grad_zq, e.q, e.z_e, model_.codebook, model_.projection,
                          e.grad_probs.size() ? &e.grad_probs : nullptr);
      grad_ze = std::move(gg.grad_z_e);
      g.codebook.entries = std::move(gg.grad_entries);
      g.projection = std::move(gg.grad_projection);
    } else {
      KMeansLoss kl = kmeans_loss_and_grads(e.z_e, model_.codebook, mc.kmeans, e.q);
      e.quant = kl.loss;
      grad_ze = straight_through(grad_zq, kl);
      g.codebook.entries = std::move(kl.grad_entries);
      if (e.grad_probs.size()) {
        grad_ze += kmeans_soft_assignment_backward(e.grad_probs, e.soft, e.z_e,
                                                   model_.codebook, g.codebook.entries);
      }
    }
    if (grad_ze_extra.size()) grad_ze += grad_ze_extra;
    g.encoder = encode_backward(grad_ze, e.trace, model_.encoder, mc.encoder).params;
  });

  UpdateMetrics metrics;
  metrics.update = u;
  metrics.lr = lr;
  metrics.diversity = diversity;
  for (const auto& e : ex) {
    metrics.task_loss += e.task;
    metrics.quant_loss += e.quant;
  }
  metrics.task_loss /= B;
  metrics.quant_loss /= B;
  const UsageStats usage = usage_stats_from_counts(counts);
  for (double p : usage.perplexity) metrics.perplexity += p;
  metrics.perplexity /= G;

  // Fixed-order reduction.
  Model total = std::move(ex[0].grad);
  auto total_views = parameter_tensors(total);
  for (int b = 1; b < B; ++b) {
    auto views = parameter_tensors(ex[b].grad);
    for (size_t i = 0; i < views.size(); ++i) {
      for (Eigen::Index j = 0; j < views[i].size(); ++j) {
        total_views[i].data[j] += views[i].data[j];
      }
    }
  }
  bool finite = std::isfinite(metrics.task_loss) && std::isfinite(metrics.quant_loss) &&
                std::isfinite(metrics.diversity);
  for (auto& v : total_views) {
    for (Eigen::Index j = 0; j < v.size(); ++j) {
      v.data[j] /= B;
      finite = finite && std::isfinite(v.data[j]);
    }
  }
  if (!finite) {
    throw Error(ErrorKind::kDivergence,
                "non-finite loss or gradient at update " + std::to_string(u));
  }

  last_gradients_ = total;
  auto params = parameter_tensors(model_);
  if (optimizer_.kind == OptimizerKind::kSgd) {
    for (size_t i = 0; i < params.size(); ++i) {
      for (Eigen::Index j = 0; j < params[i].size(); ++j) {
        params[i].data[j] -= lr * total_views[i].data[j];
      }
    }
  } else {
    auto m1 = parameter_tensors(optimizer_.first);
    auto m2 = parameter_tensors(optimizer_.second);
    const double t = static_cast<double>(optimizer_.step + 1);
    const double c1 = 1.0 - std::pow(kAdamBeta1, t);
    const double c2 = 1.0 - std::pow(kAdamBeta2, t);
    for (size_t i = 0; i < params.size(); ++i) {
      for (Eigen::Index j = 0; j < params[i].size(); ++j) {
        const double grad = total_views[i].data[j];
        double& m = m1[i].data[j];
        double& v = m2[i].data[j];
        m = kAdamBeta1 * m + (1.0 - kAdamBeta1) * grad;
        v = kAdamBeta2 * v + (1.0 - kAdamBeta2) * grad * grad;
        params[i].data[j] -= lr * (m / c1) / (std::sqrt(v / c2) + kAdamEps);
      }
    }
  }
  if (tc.codebook_restart && !mc.uses_gumbel()) {
    restart_unused_codewords(ex, counts, tc.seed, u, model_, optimizer_);
  }
  ++optimizer_.step;
  ++update_;
  return metrics;
}

namespace {

template <typename T>
void put_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(const char* p) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

struct NamedTensor {
  std::string name;
  TensorView view;
};

std::vector<NamedTensor> checkpoint_tensors(Model& model, OptimizerState& opt) {
  std::vector<NamedTensor> out;
  for (auto& v : parameter_tensors(model)) out.push_back({v.name, v});
  if (opt.kind == OptimizerKind::kAdam) {
    for (auto& v : parameter_tensors(opt.first)) out.push_back({"optimizer.m/" + v.name, v});
    for (auto& v : parameter_tensors(opt.second)) out.push_back({"optimizer.v/" + v.name, v});
  }
  return out;
}

}  // namespace

void Trainer::save(const std::filesystem::path& path) const {
  auto& self = const_cast<Trainer&>(*this);
  const auto tensors = checkpoint_tensors(self.model_, self.optimizer_);
  nlohmann::ordered_json manifest;
  manifest["format"] = "vqspeech-checkpoint";
  manifest["tool_version"] = std::string(kVersion);
  manifest["config"] = config_.canonical();
  manifest["config_hash"] = hex64(config_.hash());
  manifest["seed"] = train_.seed;
  manifest["objective"] = std::string(objective_name(train_.model.objective));
  manifest["update"] = update_;
  manifest["optimizer"] = {
      {"kind", optimizer_.kind == OptimizerKind::kAdam ? "adam" : "sgd"},
      {"step", optimizer_.step}};
  auto& list = manifest["tensors"] = nlohmann::ordered_json::array();
  int64_t offset = 0;
  for (const auto& t : tensors) {
    list.push_back({{"name", t.name},
                    {"shape", {t.view.rows, t.view.cols}},
                    {"offset", offset}});
    offset += t.view.size();
  }
  const std::string text = manifest.dump();

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error(ErrorKind::kPath, "cannot write " + path.string());
    out.write(kMagic, sizeof(kMagic));
    put_le<uint32_t>(out, kCheckpointVersion);
    put_le<uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : tensors) {
      for (Eigen::Index j = 0; j < t.view.size(); ++j) put_le<double>(out, t.view.data[j]);
    }
    if (!out) throw Error(ErrorKind::kIo, "write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Trainer Trainer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kPath, "cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const size_t header = sizeof(kMagic) + sizeof(uint32_t) + sizeof(uint64_t);
  if (bytes.size() < header || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw Error(ErrorKind::kFormat, path.string() + " is not a vqspeech checkpoint");
  }
  const uint32_t version = get_le<uint32_t>(bytes.data() + sizeof(kMagic));
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::kFormat, "unsupported checkpoint version " + std::to_string(version));
  }
  const uint64_t text_size = get_le<uint64_t>(bytes.data() + sizeof(kMagic) + sizeof(uint32_t));
  if (bytes.size() < header + text_size) {
    throw Error(ErrorKind::kFormat, "truncated checkpoint manifest");
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(header, text_size));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("bad checkpoint manifest: ") + e.what());
  }
  const size_t data_begin = header + text_size;
  try {
    Config config;
    config.load_text(manifest.at("config").get<std::string>(), "checkpoint config");
    if (hex64(config.hash()) != manifest.at("config_hash").get<std::string>()) {
      throw Error(ErrorKind::kFormat, "checkpoint config hash mismatch");
    }
    Trainer trainer(config);
    trainer.update_ = manifest.at("update").get<int>();
    trainer.optimizer_.step = manifest.at("optimizer").at("step").get<int64_t>();
    std::map<std::string, std::pair<std::vector<int64_t>, int64_t>> stored;
    for (const auto& t : manifest.at("tensors")) {
      stored[t.at("name").get<std::string>()] = {t.at("shape").get<std::vector<int64_t>>(),
                                                 t.at("offset").get<int64_t>()};
    }
    auto tensors = checkpoint_tensors(trainer.model_, trainer.optimizer_);
    if (tensors.size() != stored.size()) {
      throw Error(ErrorKind::kFormat, "checkpoint has " + std::to_string(stored.size()) +
                                          " tensors, config expects " +
                                          std::to_string(tensors.size()));
    }
    for (auto& t : tensors) {
      auto it = stored.find(t.name);
      if (it == stored.end()) throw Error(ErrorKind::kFormat, "checkpoint lacks tensor " + t.name);
      const auto& [shape, offset] = it->second;
      if (shape.size() != 2 || shape[0] != t.view.rows || shape[1] != t.view.cols) {
        throw Error(ErrorKind::kFormat, "tensor " + t.name + " has the wrong shape");
      }
      const size_t begin = data_begin + static_cast<size_t>(offset) * sizeof(double);
      if (offset < 0 || begin + t.view.size() * sizeof(double) > bytes.size()) {
        throw Error(ErrorKind::kFormat, "tensor " + t.name + " is truncated");
      }
      for (Eigen::Index j = 0; j < t.view.size(); ++j) {
        t.view.data[j] = get_le<double>(bytes.data() + begin + j * sizeof(double));
      }
    }
    return trainer;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("bad checkpoint manifest: ") + e.what());
  }
}

Model baseline_model(const Config& config, std::span<const Utterance> data) {
  Trainer trainer(config);
  const TrainConfig& tc = trainer.train_config();
  if (tc.codebook_from_data) {
    init_codebook_from_data(trainer.model(), data, tc.segment_length,
                            derive_seed(tc.seed, kStreamCodebook));
  }
  return trainer.model();
}

std::vector<UpdateMetrics> train(Trainer& trainer, std::span<const Utterance> data,
                                 const TrainOptions& options) {
  trainer.check_data(data);
  std::vector<UpdateMetrics> log;
  while (trainer.update() < trainer.train_config().updates) {
    UpdateMetrics m;
    try {
      m = trainer.step(data, options.workers);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::kDivergence && !options.divergence_checkpoint.empty() &&
          model_finite(trainer.model())) {
        trainer.save(options.divergence_checkpoint);
      }
      throw;
    }
    log.push_back(m);
    if (options.on_update) options.on_update(m);
  }
  return log;
}

void write_metrics(const std::filesystem::path& path, std::span<const UpdateMetrics> log,
                   std::string_view comment) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kPath, "cannot write " + path.string());
  out.precision(17);
  if (!comment.empty()) out << "# " << comment << "\n";
  out << "update,lr,task_loss,quant_loss,diversity,perplexity\n";
  for (const auto& m : log) {
    out << m.update << ',' << m.lr << ',' << m.task_loss << ',' << m.quant_loss << ','
        << m.diversity << ',' << m.perplexity << '\n';
  }
  if (!out) throw Error(ErrorKind::kIo, "write failed for " + path.string());
}

std::vector<UpdateMetrics> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kPath, "cannot open " + path.string());
  std::vector<UpdateMetrics> out;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "update,lr,task_loss,quant_loss,diversity,perplexity") {
        throw Error(ErrorKind::kFormat, path.string() + ": unexpected metrics header");
      }
      header = true;
      continue;
    }
    UpdateMetrics m;
    char tail = 0;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf,%lf%c", &m.update, &m.lr, &m.task_loss,
                    &m.quant_loss, &m.diversity, &m.perplexity, &tail) != 6) {
      throw Error(ErrorKind::kFormat, path.string() + ": bad metrics row '" + line + "'");
    }
    out.push_back(m);
  }
  return out;
}

Extraction extract(const Model& model, const Waveform& wave) {
  Extraction out;
  out.dense = encode_forward(wave, model.encoder, model.config.encoder);
  if (model.config.uses_gumbel()) {
    GumbelConfig gc;
    gc.noise_scale = 0.0;
    out.quantized = gumbel_select(out.dense.values, model.codebook, model.projection, gc, 0);
  } else {
    out.quantized = kmeans_select(out.dense.values, model.codebook);
  }
  return out;
}

std::vector<Segment> model_segments(const Model& model, std::span<const Utterance> data,
                                    bool quantized) {
  std::vector<Segment> out;
  for (size_t i = 0; i < data.size(); ++i) {
    if (data[i].frame_labels.empty()) {
      throw Error(ErrorKind::kData, "utterance " + std::to_string(i) + " has no alignment");
    }
    const Extraction x = extract(model, data[i].wave);
    auto segs = segments_from_alignment(quantized ? x.quantized.z_q : x.dense.values,
                                        data[i].frame_labels, static_cast<int>(i),
                                        data[i].speaker.value_or(0));
    for (auto& s : segs) out.push_back(std::move(s));
  }
  return out;
}

ModelEvaluation evaluate_model(const Model& model, std::span<const Utterance> data,
                               int64_t n_triplets, uint64_t seed, AbxMode mode,
                               bool quantized, bool per_group) {
  std::vector<Segment> segments;
  std::vector<std::pair<int64_t, int>> pairs;
  for (size_t i = 0; i < data.size(); ++i) {
    if (data[i].frame_labels.empty()) {
      throw Error(ErrorKind::kData, "utterance " + std::to_string(i) + " has no alignment");
    }
    const Extraction x = extract(model, data[i].wave);
    auto segs = segments_from_alignment(quantized ? x.quantized.z_q : x.dense.values,
                                        data[i].frame_labels, static_cast<int>(i),
                                        data[i].speaker.value_or(0));
    for (auto& s : segs) segments.push_back(std::move(s));
    auto p = code_label_pairs(x.quantized.indices, model.codebook.size(),
                              data[i].frame_labels, per_group);
    pairs.insert(pairs.end(), p.begin(), p.end());
  }
  ModelEvaluation out;
  out.abx = abx_evaluate(segments, n_triplets, seed, mode);
  out.cooccurrence = cooccurrence(pairs);
  out.purity = purity(out.cooccurrence);
  return out;
}

uint64_t evaluation_seed(const Config& config) {
  return derive_seed(static_cast<uint64_t>(config.get_int64("seed")), kStreamAbx);
}

ModelEvaluation evaluate_with_config(const Model& model, std::span<const Utterance> data,
                                     const Config& config) {
  const std::string& features = config.get("eval.features");
  if (features != "quantized" && features != "dense") {
    throw Error(ErrorKind::kConfig, "eval.features must be quantized or dense");
  }
  return evaluate_model(model, data, config.get_int64("eval.triplets"),
                        evaluation_seed(config),
                        parse_abx_mode(config.get("eval.mode")), features == "quantized",
                        config.get_bool("eval.per_group"));
}

std::vector<std::pair<int, int>> parse_codebook_list(std::string_view text) {
  std::vector<std::pair<int, int>> out;
  std::istringstream in{std::string(text)};
  std::string item;
  while (std::getline(in, item, ',')) {
    int K = 0;
    int G = 0;
    char tail = 0;
    if (std::sscanf(item.c_str(), " %dx%d %c", &K, &G, &tail) != 2 || K < 1 || G < 1) {
      throw Error(ErrorKind::kConfig, "bad codebook shape '" + item + "' (expected KxG)");
    }
    out.emplace_back(K, G);
  }
  if (out.empty()) throw Error(ErrorKind::kConfig, "empty codebook list");
  return out;
}

std::vector<SweepRow> sweep_codebooks(const Config& base,
                                      std::span<const std::pair<int, int>> shapes,
                                      std::span<const Utterance> data,
                                      std::span<const Utterance> eval,
                                      const TrainOptions& options) {
  // Reject an invalid shape before spending time on the valid ones.
  std::vector<Config> configs;
  for (const auto& [K, G] : shapes) {
    Config c = base;
    c.set("quantizer.K", std::to_string(K));
    c.set("quantizer.G", std::to_string(G));
    TrainConfig::from_config(c);
    configs.push_back(std::move(c));
  }
  std::vector<SweepRow> rows;
  for (size_t i = 0; i < configs.size(); ++i) {
    const Config& c = configs[i];
    Trainer trainer(c);
    const auto log = train(trainer, data, options);
    SweepRow row;
    row.K = shapes[i].first;
    row.G = shapes[i].second;
    row.final = log.back();
    const ModelEvaluation ev = evaluate_with_config(trainer.model(), eval, c);
    row.abx_error = ev.abx.error_rate;
    row.purity = ev.purity;
    rows.push_back(row);
  }
  return rows;
}

void write_sweep_table(const std::filesystem::path& path, std::span<const SweepRow> rows,
                       std::string_view comment) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kPath, "cannot write " + path.string());
  out.precision(17);
  if (!comment.empty()) out << "# " << comment << "\n";
  out << "K,G,updates,task_loss,quant_loss,diversity,perplexity,abx_error,purity\n";
  for (const auto& r : rows) {
    out << r.K << ',' << r.G << ',' << r.final.update + 1 << ',' << r.final.task_loss << ','
        << r.final.quant_loss << ',' << r.final.diversity << ',' << r.final.perplexity << ','
        << r.abx_error << ',' << r.purity << '\n';
  }
  if (!out) throw Error(ErrorKind::kIo, "write failed for " + path.string());
}

}  // namespace vqspeech
