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

// 1-D convolutions over time-major (T x C) activations.

#ifndef VQSPEECH_CONV_H_
#define VQSPEECH_CONV_H_

#include <cstdint>
#include <random>

#include "vqspeech/common.h"

namespace vqspeech {

// A bank of 1-D filters. Row `j * in_channels + c` of `weight` holds tap j of
// input channel c, so a window of `kernel` consecutive frames is a contiguous
// row-major slice and the convolution is a single matrix product.
struct ConvParameters {
  Matrix weight;   // (kernel * in_channels) x out_channels
  RowVector bias;  // out_channels
  int in_channels = 0;
  int kernel = 0;

  int out_channels() const { return static_cast<int>(weight.cols()); }

  double& tap(int out, int in, int j) { return weight(j * in_channels + in, out); }
  double tap(int out, int in, int j) const {
    return weight(j * in_channels + in, out);
  }

  static ConvParameters zeros(int in_channels, int out_channels, int kernel);
  // Weights and biases uniform in [-a, a], a = 1 / sqrt(in_channels * kernel).
  static ConvParameters uniform(int in_channels, int out_channels, int kernel,
                                std::mt19937_64& rng);
  // Weights uniform in [-a, a], a = gain / sqrt(in_channels * kernel), and
  // zero biases.
  static ConvParameters scaled_uniform(int in_channels, int out_channels, int kernel,
                                       double gain, std::mt19937_64& rng);
};

// Valid cross-correlation: out[o] = sum_j W_j x[o * stride + j] + b.
// Returns the pre-activation, floor((T - kernel) / stride) + 1 frames.
Matrix conv_valid_forward(const Matrix& x, const ConvParameters& p, int stride);

// Accumulates parameter gradients into `grad` and returns d/dx.
Matrix conv_valid_backward(const Matrix& x, const Matrix& grad_out,
                           const ConvParameters& p, int stride,
                           ConvParameters& grad);

// Causal dilated convolution, left-padded with zeros so the output has T
// frames and frame t only sees x[t - (kernel - 1 - j) * dilation].
Matrix causal_conv_forward(const Matrix& x, const ConvParameters& p,
                           int dilation);

Matrix causal_conv_backward(const Matrix& x, const Matrix& grad_out,
                            const ConvParameters& p, int dilation,
                            ConvParameters& grad);

}  // namespace vqspeech

#endif  // VQSPEECH_CONV_H_
