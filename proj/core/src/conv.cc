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

#include "vqspeech/conv.h"

#include <cmath>
#include <string>

namespace vqspeech {

namespace {

using StridedRows =
    Eigen::Map<const Matrix, Eigen::Unaligned, Eigen::OuterStride<>>;

void check_input(const Matrix& x, const ConvParameters& p) {
  if (x.cols() != p.in_channels) {
    throw Error(ErrorKind::kShape,
                "convolution expects " + std::to_string(p.in_channels) +
                    " input channels, got " + std::to_string(x.cols()));
  }
}

}  // namespace

ConvParameters ConvParameters::zeros(int in_channels, int out_channels,
                                     int kernel) {
  ConvParameters p;
  p.in_channels = in_channels;
  p.kernel = kernel;
  p.weight = Matrix::Zero(kernel * in_channels, out_channels);
  p.bias = RowVector::Zero(out_channels);
  return p;
}

ConvParameters ConvParameters::uniform(int in_channels, int out_channels,
                                       int kernel, std::mt19937_64& rng) {
  ConvParameters p = zeros(in_channels, out_channels, kernel);
  const double a = 1.0 / std::sqrt(static_cast<double>(in_channels * kernel));
  std::uniform_real_distribution<double> dist(-a, a);
  for (Eigen::Index i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = dist(rng);
  for (Eigen::Index i = 0; i < p.bias.size(); ++i) p.bias[i] = dist(rng);
  return p;
}

ConvParameters ConvParameters::scaled_uniform(int in_channels, int out_channels,
                                              int kernel, double gain,
                                              std::mt19937_64& rng) {
  ConvParameters p = zeros(in_channels, out_channels, kernel);
  const double a = gain / std::sqrt(static_cast<double>(in_channels * kernel));
  std::uniform_real_distribution<double> dist(-a, a);
  for (Eigen::Index i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = dist(rng);
  return p;
}

Matrix conv_valid_forward(const Matrix& x, const ConvParameters& p,
                          int stride) {
  check_input(x, p);
  const Eigen::Index t_in = x.rows();
  if (t_in < p.kernel) {
    throw Error(ErrorKind::kLength,
                "input of " + std::to_string(t_in) +
                    " frames is shorter than kernel " + std::to_string(p.kernel));
  }
  const Eigen::Index t_out = (t_in - p.kernel) / stride + 1;
  const Eigen::Index c = p.in_channels;
  StridedRows windows(x.data(), t_out, p.kernel * c,
                      Eigen::OuterStride<>(stride * c));
  Matrix z = windows * p.weight;
  z.rowwise() += p.bias;
  return z;
}

Matrix conv_valid_backward(const Matrix& x, const Matrix& grad_out,
                           const ConvParameters& p, int stride,
                           ConvParameters& grad) {
  const Eigen::Index t_out = grad_out.rows();
  const Eigen::Index c = p.in_channels;
  const Eigen::Index width = p.kernel * c;
  StridedRows windows(x.data(), t_out, width, Eigen::OuterStride<>(stride * c));
  grad.weight.noalias() += windows.transpose() * grad_out;
  grad.bias += grad_out.colwise().sum();

  const Matrix grad_windows = grad_out * p.weight.transpose();
  Matrix grad_x = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index o = 0; o < t_out; ++o) {
    Eigen::Map<RowVector> dst(grad_x.data() + o * stride * c, width);
    dst += grad_windows.row(o);
  }
  return grad_x;
}

Matrix causal_conv_forward(const Matrix& x, const ConvParameters& p,
                           int dilation) {
  check_input(x, p);
  const Eigen::Index t = x.rows();
  const Eigen::Index c = p.in_channels;
  Matrix z(t, p.out_channels());
  z.rowwise() = p.bias;
  for (int j = 0; j < p.kernel; ++j) {
    const Eigen::Index shift = static_cast<Eigen::Index>(p.kernel - 1 - j) * dilation;
    if (shift >= t) continue;
    z.bottomRows(t - shift).noalias() +=
        x.topRows(t - shift) * p.weight.middleRows(j * c, c);
  }
  return z;
}

Matrix causal_conv_backward(const Matrix& x, const Matrix& grad_out,
                            const ConvParameters& p, int dilation,
                            ConvParameters& grad) {
  const Eigen::Index t = x.rows();
  const Eigen::Index c = p.in_channels;
  grad.bias += grad_out.colwise().sum();
  Matrix grad_x = Matrix::Zero(t, c);
  for (int j = 0; j < p.kernel; ++j) {
    const Eigen::Index shift = static_cast<Eigen::Index>(p.kernel - 1 - j) * dilation;
    if (shift >= t) continue;
    grad.weight.middleRows(j * c, c).noalias() +=
        x.topRows(t - shift).transpose() * grad_out.bottomRows(t - shift);
    grad_x.topRows(t - shift).noalias() +=
        grad_out.bottomRows(t - shift) * p.weight.middleRows(j * c, c).transpose();
  }
  return grad_x;
}

}  // namespace vqspeech
