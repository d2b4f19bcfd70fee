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

// Training objectives: autoregressive mu-law reconstruction from quantized
// latents, and contrastive prediction of future latents from a causal
// context network.

#ifndef VQSPEECH_OBJECTIVES_H_
#define VQSPEECH_OBJECTIVES_H_

#include <cstdint>
#include <optional>
#include <vector>

#include "vqspeech/common.h"
#include "vqspeech/conv.h"
#include "vqspeech/signal_io.h"

namespace vqspeech {

struct CausalLayerSpec {
  int channels = 0;
  int kernel = 1;
  int dilation = 1;
};

// Residual stack of dilated causal convolutions over the previous sample,
// conditioned on nearest-frame upsampled latents. Every layer must have
// `channels` channels.
struct DecoderConfig {
  int channels = 32;
  std::vector<CausalLayerSpec> layers;
  int condition_dim = 64;
  bool use_speaker = false;
  int n_speakers = 0;
  int output_levels = 256;
  Activation activation = Activation::kTanh;

  // Kernel 2, dilations 1, 2, 4, 8, 16.
  static DecoderConfig desk(int condition_dim, int channels = 32);
  void validate() const;
};

struct DecoderParameters {
  ConvParameters input;               // 1 -> C, kernel 1
  std::vector<ConvParameters> layers; // C -> C, causal
  Matrix cond_weight;                 // D x C
  RowVector cond_bias;                // C
  Matrix speaker_embedding;           // n_speakers x C (empty without speakers)
  Matrix out_weight;                  // C x levels
  RowVector out_bias;                 // levels

  static DecoderParameters init(const DecoderConfig& config, uint64_t seed);
  static DecoderParameters zeros(const DecoderConfig& config);
};

// Logits for every sample: row t predicts the mu-law level of sample t from
// samples < t and the latent frame min(t / frame_stride, T - 1).
Matrix decoder_logits(const Waveform& wave, const Matrix& z_q, int frame_stride,
                      std::optional<int> speaker, const DecoderParameters& params,
                      const DecoderConfig& config);

struct ReconstructionResult {
  double nll = 0.0;  // mean over samples, nats
  DecoderParameters grads;
  Matrix grad_z_q;
};

// Throws kRange when the speaker id is out of range or missing while the
// decoder is speaker-conditioned.
ReconstructionResult reconstruction_loss(const Waveform& wave,
                                         const Matrix& z_q, int frame_stride,
                                         std::optional<int> speaker,
                                         const DecoderParameters& params,
                                         const DecoderConfig& config);

// Causal convolution stack producing the context c_i; nonlinearity after
// every layer except the last.
struct AggregatorConfig {
  int input_dim = 64;
  std::vector<CausalLayerSpec> layers;
  Activation activation = Activation::kSilu;

  static AggregatorConfig desk(int input_dim, int channels = 64,
                               int n_layers = 3, int kernel = 3);
  int output_dim() const {
    return layers.empty() ? input_dim : layers.back().channels;
  }
  void validate() const;
};

struct AggregatorParameters {
  std::vector<ConvParameters> layers;

  static AggregatorParameters init(const AggregatorConfig& config, uint64_t seed);
  static AggregatorParameters zeros(const AggregatorConfig& config);
};

struct ContextFeatures {
  Matrix values;  // T x C
};

struct AggregatorTrace {
  std::vector<Matrix> inputs;
  std::vector<Matrix> pre_activations;
};

ContextFeatures aggregate_context(const Matrix& input,
                                  const AggregatorParameters& params,
                                  const AggregatorConfig& config,
                                  AggregatorTrace* trace = nullptr);

// Accumulates into `grad` and returns d/dinput.
Matrix aggregate_backward(const Matrix& grad_context, const AggregatorTrace& trace,
                          const AggregatorParameters& params,
                          const AggregatorConfig& config,
                          AggregatorParameters& grad);

enum class DistractorSampling {
  kUtterance,  // any other frame of the sequence
  kWindow,     // frames within `steps` of the true target
};

enum class DistractorForm {
  kLogSigmoid,  // lambda * E[log sigma(-z~ . h)]
  kSigmoid,     // lambda * E[sigma(-z~ . h)], literal printed form
};

enum class TargetStream { kQuantized, kDense };

struct ContrastiveConfig {
  int steps = 6;  // prediction horizon K
  int n_distractors = 10;
  double lambda = 1.0;
  DistractorSampling sampling = DistractorSampling::kUtterance;
  DistractorForm form = DistractorForm::kLogSigmoid;
  TargetStream targets = TargetStream::kQuantized;
};

// One affine map h_k(c) = c W_k + b_k per step offset k = 1..steps.
struct StepProjections {
  std::vector<Matrix> weight;     // C x D
  std::vector<RowVector> bias;    // D

  static StepProjections init(int steps, int context_dim, int target_dim,
                              uint64_t seed);
  static StepProjections zeros(int steps, int context_dim, int target_dim);
};

// distractors[k - 1][i] lists the distractor frames for the term (i, k).
using DistractorTable = std::vector<std::vector<std::vector<int>>>;

// Throws kLength when T <= steps.
DistractorTable sample_distractors(int frames, const ContrastiveConfig& config,
                                   uint64_t seed);

struct ContrastiveResult {
  double loss = 0.0;
  Matrix grad_targets;  // T x D
  Matrix grad_context;  // T x C
  StepProjections grad_projections;
  int terms = 0;
};

// -sum_k sum_i [log sigma(z_{i+k} . h_k(c_i)) + lambda * mean_n f(-z~_n .
// h_k(c_i))] divided by the number of (i, k) terms.
ContrastiveResult contrastive_loss(const Matrix& targets, const Matrix& context,
                                   const StepProjections& projections,
                                   const ContrastiveConfig& config,
                                   const DistractorTable& distractors);
ContrastiveResult contrastive_loss(const Matrix& targets, const Matrix& context,
                                   const StepProjections& projections,
                                   const ContrastiveConfig& config,
                                   uint64_t seed);

// Numerically stable log(sigma(x)).
double log_sigmoid(double x);
double sigmoid(double x);

}  // namespace vqspeech

#endif  // VQSPEECH_OBJECTIVES_H_
