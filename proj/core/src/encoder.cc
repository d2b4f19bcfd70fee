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

#include "vqspeech/encoder.h"

#include <random>
#include <string>

namespace vqspeech {

EncoderConfig EncoderConfig::paper(int sample_rate) {
  EncoderConfig config;
  config.input_sample_rate = sample_rate;
  const int kernels[] = {10, 8, 4, 4, 4, 1, 1, 1};
  const int strides[] = {5, 4, 2, 2, 2, 1, 1, 1};
  for (int i = 0; i < 8; ++i) config.layers.push_back({512, kernels[i], strides[i]});
  return config;
}

EncoderConfig EncoderConfig::desk(int sample_rate) {
  EncoderConfig config;
  config.input_sample_rate = sample_rate;
  const int kernels[] = {10, 8, 4, 4};
  const int strides[] = {5, 4, 2, 2};
  for (int i = 0; i < 4; ++i) config.layers.push_back({64, kernels[i], strides[i]});
  return config;
}

EncoderConfig EncoderConfig::with_extra_downsample(int factor) const {
  if (factor != 1 && factor != 2) {
    throw Error(ErrorKind::kConfig, "extra downsample factor must be 1 or 2");
  }
  EncoderConfig out = *this;
  if (factor > 1) out.layers.push_back({output_dim(), factor, factor});
  return out;
}

void EncoderConfig::validate() const {
  if (layers.empty()) {
    throw Error(ErrorKind::kConfig, "encoder needs at least one layer");
  }
  if (input_sample_rate <= 0) {
    throw Error(ErrorKind::kConfig, "encoder sample rate must be positive");
  }
  for (size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.stride < 1 || l.kernel < l.stride || l.out_channels < 1) {
      throw Error(ErrorKind::kConfig,
                  "encoder layer " + std::to_string(i) +
                      " needs kernel >= stride >= 1 and channels >= 1");
    }
  }
}

ReceptiveField receptive_field(const EncoderConfig& config) {
  int rf = 1;
  for (auto it = config.layers.rbegin(); it != config.layers.rend(); ++it) {
    rf = (rf - 1) * it->stride + it->kernel;
  }
  return {rf, 1000.0 * rf / config.input_sample_rate};
}

int total_stride(const EncoderConfig& config) {
  int stride = 1;
  for (const auto& l : config.layers) stride *= l.stride;
  return stride;
}

double frame_rate(const EncoderConfig& config) {
  return static_cast<double>(config.input_sample_rate) / total_stride(config);
}

FrameGeometry frame_geometry(const EncoderConfig& config) {
  return {total_stride(config), receptive_field(config).samples};
}

int encoder_output_length(const EncoderConfig& config, int input_length) {
  int t = input_length;
  for (const auto& l : config.layers) {
    if (t < l.kernel) return 0;
    t = (t - l.kernel) / l.stride + 1;
  }
  return t;
}

EncoderParameters EncoderParameters::init(const EncoderConfig& config,
                                          uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  EncoderParameters params;
  int in = 1;
  for (const auto& l : config.layers) {
    params.layers.push_back(ConvParameters::scaled_uniform(
        in, l.out_channels, l.kernel, init_gain(config.activation), rng));
    in = l.out_channels;
  }
  return params;
}

EncoderParameters EncoderParameters::zeros(const EncoderConfig& config) {
  EncoderParameters params;
  int in = 1;
  for (const auto& l : config.layers) {
    params.layers.push_back(ConvParameters::zeros(in, l.out_channels, l.kernel));
    in = l.out_channels;
  }
  return params;
}

DenseFeatures encode_forward(const Waveform& wave,
                             const EncoderParameters& params,
                             const EncoderConfig& config,
                             EncoderTrace* trace) {
  config.validate();
  if (params.layers.size() != config.layers.size()) {
    throw Error(ErrorKind::kShape, "encoder parameters do not match config");
  }
  const int needed = receptive_field(config).samples;
  if (wave.size() < needed) {
    throw Error(ErrorKind::kLength,
                "waveform of " + std::to_string(wave.size()) +
                    " samples is shorter than the receptive field; need at least " +
                    std::to_string(needed));
  }
  if (trace) {
    trace->inputs.clear();
    trace->pre_activations.clear();
  }

  Matrix h = Eigen::Map<const Matrix>(wave.samples.data(), wave.size(), 1);
  for (size_t l = 0; l < config.layers.size(); ++l) {
    Matrix z = conv_valid_forward(h, params.layers[l], config.layers[l].stride);
    Matrix next = activate(z, config.activation);
    if (trace) {
      trace->inputs.push_back(std::move(h));
      trace->pre_activations.push_back(std::move(z));
    }
    h = std::move(next);
  }
  return {std::move(h), frame_rate(config)};
}

EncoderGradients encode_backward(const Matrix& upstream,
                                 const EncoderTrace& trace,
                                 const EncoderParameters& params,
                                 const EncoderConfig& config) {
  if (trace.pre_activations.size() != config.layers.size()) {
    throw Error(ErrorKind::kState, "encoder trace is missing saved activations");
  }
  const Matrix& last = trace.pre_activations.back();
  if (upstream.rows() != last.rows() || upstream.cols() != last.cols()) {
    throw Error(ErrorKind::kShape,
                "upstream gradient is " + std::to_string(upstream.rows()) + "x" +
                    std::to_string(upstream.cols()) + ", expected " +
                    std::to_string(last.rows()) + "x" + std::to_string(last.cols()));
  }
  EncoderGradients out;
  out.params = EncoderParameters::zeros(config);
  Matrix grad = upstream;
  for (size_t l = config.layers.size(); l-- > 0;) {
    const Matrix grad_z =
        grad.cwiseProduct(activation_derivative(trace.pre_activations[l], config.activation));
    grad = conv_valid_backward(trace.inputs[l], grad_z, params.layers[l],
                               config.layers[l].stride, out.params.layers[l]);
  }
  out.input.assign(grad.data(), grad.data() + grad.size());
  return out;
}

}  // namespace vqspeech
