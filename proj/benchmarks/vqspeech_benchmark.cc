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

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "vqspeech/encoder.h"
#include "vqspeech/evaluation.h"
#include "vqspeech/quantizer.h"

namespace {

using namespace vqspeech;

Matrix gaussian(Eigen::Index r, Eigen::Index c, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// One second of audio through the desk or paper encoder.
void BM_EncoderForward(benchmark::State& state) {
  const EncoderConfig c = state.range(0) == 0 ? EncoderConfig::desk() : EncoderConfig::paper();
  const EncoderParameters p = EncoderParameters::init(c, 1);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Waveform w;
  for (int i = 0; i < 16000; ++i) w.samples.push_back(u(rng));
  for (auto _ : state) benchmark::DoNotOptimize(encode_forward(w, p, c));
  state.SetItemsProcessed(state.iterations() * w.size());
}
BENCHMARK(BM_EncoderForward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

// Nearest-codeword selection for 100 frames of 64 channels, args {K, G}.
void BM_KMeansSelect(benchmark::State& state) {
  const int K = static_cast<int>(state.range(0));
  const int G = static_cast<int>(state.range(1));
  const Codebook cb = Codebook::init(K, G, 64, 3);
  const Matrix z_e = gaussian(100, 64, 4);
  for (auto _ : state) benchmark::DoNotOptimize(kmeans_select(z_e, cb));
  state.SetItemsProcessed(state.iterations() * 100);
}
BENCHMARK(BM_KMeansSelect)->Args({8, 8})->Args({320, 2})->Args({512, 1});

// ABX over 400 short segments of 32-dimensional features.
void BM_Abx(benchmark::State& state) {
  std::vector<Segment> segments;
  for (int i = 0; i < 400; ++i) {
    segments.push_back(Segment{gaussian(4 + i % 6, 32, i), i % 8, i, i % 4});
  }
  const int64_t triplets = state.range(0);
  for (auto _ : state) {
    benchmark::DoNotOptimize(abx_evaluate(segments, triplets, 1, AbxMode::kPooled));
  }
  state.SetItemsProcessed(state.iterations() * triplets);
}
BENCHMARK(BM_Abx)->Arg(1000)->Arg(10000)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
