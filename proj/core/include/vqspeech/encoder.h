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

// Strided convolutional feature extractor mapping raw audio to dense frames.

#ifndef VQSPEECH_ENCODER_H_
#define VQSPEECH_ENCODER_H_

#include <cstdint>
#include <vector>

#include "vqspeech/common.h"
#include "vqspeech/conv.h"
#include "vqspeech/signal_io.h"

namespace vqspeech {

struct EncoderLayerSpec {
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
};

struct EncoderConfig {
  std::vector<EncoderLayerSpec> layers;
  Activation activation = Activation::kSilu;
  int input_sample_rate = 16000;

  // 8 layers of 512 channels, kernels (10,8,4,4,4,1,1,1), strides
  // (5,4,2,2,2,1,1,1).
  static EncoderConfig paper(int sample_rate = 16000);
  // 4 layers of 64 channels, kernels (10,8,4,4), strides (5,4,2,2).
  static EncoderConfig desk(int sample_rate = 16000);

  // Appends a kernel = stride = `factor` layer (factor 1 is a no-op). With
  // factor 2 the "paper" preset runs at 50 Hz instead of 100 Hz.
  EncoderConfig with_extra_downsample(int factor) const;

  // Throws kConfig unless kernel >= stride >= 1 for every layer.
  void validate() const;
  int output_dim() const { return layers.back().out_channels; }
};

struct ReceptiveField {
  int samples = 0;
  double milliseconds = 0.0;
};

ReceptiveField receptive_field(const EncoderConfig& config);
int total_stride(const EncoderConfig& config);
double frame_rate(const EncoderConfig& config);
FrameGeometry frame_geometry(const EncoderConfig& config);

// Per-layer valid-convolution length recursion; 0 if the input is too short.
int encoder_output_length(const EncoderConfig& config, int input_length);

struct EncoderParameters {
  std::vector<ConvParameters> layers;

  // Weights uniform with bound init_gain(activation) / sqrt(in * kernel),
  // zero biases.
  static EncoderParameters init(const EncoderConfig& config, uint64_t seed);
  static EncoderParameters zeros(const EncoderConfig& config);
};

// z_e: T x D at the latent frame rate.
struct DenseFeatures {
  Matrix values;
  double frame_rate = 0.0;
};

// Activations saved by the forward pass for the backward pass.
struct EncoderTrace {
  std::vector<Matrix> inputs;           // input to each layer
  std::vector<Matrix> pre_activations;  // conv output before the nonlinearity
};

// Throws kLength when the waveform is shorter than the receptive field.
DenseFeatures encode_forward(const Waveform& wave,
                             const EncoderParameters& params,
                             const EncoderConfig& config,
                             EncoderTrace* trace = nullptr);

struct EncoderGradients {
  EncoderParameters params;
  std::vector<double> input;
};

// Throws kShape when `upstream` does not match the traced output.
EncoderGradients encode_backward(const Matrix& upstream,
                                 const EncoderTrace& trace,
                                 const EncoderParameters& params,
                                 const EncoderConfig& config);

}  // namespace vqspeech

#endif  // VQSPEECH_ENCODER_H_
