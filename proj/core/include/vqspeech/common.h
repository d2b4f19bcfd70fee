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

#ifndef VQSPEECH_COMMON_H_
#define VQSPEECH_COMMON_H_

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace vqspeech {

inline constexpr std::string_view kVersion = "0.1.0";

// Row-major so that a T x C activation matrix stores each frame contiguously.
using Matrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Vector = Eigen::VectorXd;
using IndexMatrix =
    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CountMatrix =
    Eigen::Matrix<int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class ErrorKind {
  kInputRange,
  kFormat,
  kShape,
  kLength,
  kState,
  kRange,
  kConfig,
  kPath,
  kData,
  kDivergence,
  kIo,
};

std::string_view error_kind_name(ErrorKind kind);

// Every failure raised by the library carries a machine-readable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }
  std::string_view kind_name() const { return error_kind_name(kind_); }

 private:
  ErrorKind kind_;
};

// Mixes (seed, stream, index) into an independent 64-bit seed (splitmix64).
uint64_t derive_seed(uint64_t seed, uint64_t stream, uint64_t index = 0);

// 64-bit FNV-1a over the bytes of `text`.
uint64_t fnv1a64(std::string_view text);
std::string hex64(uint64_t value);

enum class Activation { kSilu, kRelu, kTanh, kIdentity };

Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation activation);

// Elementwise f(z) and f'(z).
Matrix activate(const Matrix& z, Activation activation);
Matrix activation_derivative(const Matrix& z, Activation activation);

// Uniform-init gain that keeps activations at unit scale through the layer:
// sqrt(3) / |f'(0)| (sqrt(6) for relu).
double init_gain(Activation activation);

bool all_finite(const Matrix& m);

}  // namespace vqspeech

#endif  // VQSPEECH_COMMON_H_
