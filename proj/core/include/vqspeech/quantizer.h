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

// Grouped vector quantization with codewords shared across groups.
//
// A dense frame of dimension D is split into G contiguous slices of D/G.
// Every slice is replaced by one of K shared codewords, so the codebook
// stores K x (D/G) values but addresses K^G composite vectors. Selection is
// either nearest-codeword (k-means, straight-through gradients) or the
// argmax of a Gumbel-perturbed softmax over per-group projected logits.
//
// Indices are 0-based; index i here is codeword i + 1 in 1-based notation.

#ifndef VQSPEECH_QUANTIZER_H_
#define VQSPEECH_QUANTIZER_H_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "vqspeech/common.h"

namespace vqspeech {

struct Codebook {
  Matrix entries;  // K x (D / G)
  int groups = 1;
  int dim = 0;

  int size() const { return static_cast<int>(entries.rows()); }
  int sub_dim() const { return dim / groups; }

  // Codewords uniform in [-1/sqrt(D/G), 1/sqrt(D/G)].
  static Codebook init(int K, int G, int D, uint64_t seed);
  static Codebook zeros(int K, int G, int D);

  // Throws kShape unless D mod G == 0 and entries are K x (D/G).
  void validate() const;

  // The D-vector addressed by one index per group.
  RowVector composite(std::span<const int> indices) const;
};

// Row g of the result is the slice [g * D/G, (g + 1) * D/G) of `frame`.
Matrix group_reshape(std::span<const double> frame, int groups);
RowVector group_flatten(const Matrix& grouped);

struct GumbelConfig {
  double temperature = 1.0;
  bool hard = true;
  double noise_scale = 1.0;  // 0 disables the Gumbel perturbation
};

struct KMeansConfig {
  double beta = 0.25;  // commitment weight
};

// Quantities the Gumbel backward pass needs. Rows are indexed t * G + g.
struct GumbelState {
  Matrix logits;  // (T * G) x K, before noise
  Matrix noise;   // scaled Gumbel noise actually added
  Matrix probs;   // softmax((logits + noise) / temperature)
  double temperature = 1.0;
  bool hard = true;
};

struct QuantizationResult {
  Matrix z_q;                         // T x D
  IndexMatrix indices;                // T x G, values in [0, K)
  std::optional<GumbelState> gumbel;  // present for Gumbel selection
  CountMatrix selection_counts;       // G x K

  int frames() const { return static_cast<int>(z_q.rows()); }
  const Matrix* probs() const { return gumbel ? &gumbel->probs : nullptr; }
};

// Nearest codeword per (frame, group) by squared Euclidean distance; ties
// go to the lowest index.
QuantizationResult kmeans_select(const Matrix& z_e, const Codebook& codebook);

struct KMeansLoss {
  double loss = 0.0;
  Matrix grad_z_e;      // T x D, commitment term only
  Matrix grad_entries;  // K x (D / G), codebook term only
};

// mean over (t, g) of ||[z_e] - z_q||^2 + beta * ||z_e - [z_q]||^2 where [.]
// stops the gradient. The codebook term moves the selected codewords; the
// beta-weighted commitment term moves the encoder output.
KMeansLoss kmeans_loss_and_grads(const Matrix& z_e, const Codebook& codebook,
                                 const KMeansConfig& config,
                                 const QuantizationResult& selection);
KMeansLoss kmeans_loss_and_grads(const Matrix& z_e, const Codebook& codebook,
                                 const KMeansConfig& config);

// Straight-through estimator: the task gradient at z_q is copied to z_e and
// the commitment gradient is added.
Matrix straight_through(const Matrix& grad_z_q, const KMeansLoss& kmeans);

// Per-group affine map from a D/G slice to K logits.
struct GumbelProjection {
  Matrix weight;  // D x K; rows [g * D/G, (g + 1) * D/G) belong to group g
  Matrix bias;    // G x K

  static GumbelProjection init(int K, int G, int D, uint64_t seed);
  static GumbelProjection zeros(int K, int G, int D);
};

// Logits for every (frame, group), rows indexed t * G + g.
Matrix gumbel_logits(const Matrix& z_e, const GumbelProjection& projection,
                     int groups);

// Forward emits the argmax codeword (or the probability-weighted mixture when
// config.hard is false). Deterministic given `seed`.
QuantizationResult gumbel_select(const Matrix& z_e, const Codebook& codebook,
                                 const GumbelProjection& projection,
                                 const GumbelConfig& config, uint64_t seed);

// Same as gumbel_select with explicit logits: used for hand-checked cases.
QuantizationResult gumbel_select_from_logits(const Matrix& logits,
                                             const Codebook& codebook,
                                             const GumbelConfig& config,
                                             uint64_t seed);

struct GumbelGradients {
  Matrix grad_logits;  // (T * G) x K
  Matrix grad_entries;
  GumbelProjection grad_projection;
  Matrix grad_z_e;
};

// Backward through the soft surrogate sum_k p_k * entries[k] regardless of
// what the forward emitted. `grad_probs`, if given, is an additional
// gradient with respect to the stored probabilities (diversity penalty).
// Throws kState when `forward` carries no saved probabilities.
GumbelGradients gumbel_backward(const Matrix& grad_z_q,
                                const QuantizationResult& forward,
                                const Matrix& z_e, const Codebook& codebook,
                                const GumbelProjection& projection,
                                const Matrix* grad_probs = nullptr);

struct DiversityPenalty {
  double loss = 0.0;
  Matrix grad;  // G x K, with respect to the averaged probabilities
  int clamped = 0;
};

// (1 / (G K)) sum_{g,k} p_bar log p_bar: the negative entropy of the average
// selection probabilities, smallest at uniform usage. Entries <= 0 are
// clamped to 1e-10 and counted. Throws kInputRange when a row does not sum
// to 1 within 1e-6.
DiversityPenalty diversity_penalty(const Matrix& average_probs);

// Mean of (T * G) x K probabilities per group: a G x K matrix.
Matrix average_group_probs(const Matrix& probs, int groups);

// Soft nearest-codeword assignment softmax(-||x - e_k||^2) per (frame,
// group), for applying the diversity penalty to k-means selection.
Matrix kmeans_soft_assignment(const Matrix& z_e, const Codebook& codebook);
// Returns d/dz_e and accumulates d/dentries.
Matrix kmeans_soft_assignment_backward(const Matrix& grad_probs,
                                       const Matrix& probs, const Matrix& z_e,
                                       const Codebook& codebook,
                                       Matrix& grad_entries);

struct UsageStats {
  std::vector<double> entropy;  // nats, per group
  std::vector<double> perplexity;
  std::vector<int> dead_codewords;
};

// Empirical selection distribution per group. Throws kData without frames.
UsageStats codebook_usage_stats(std::span<const QuantizationResult> results);
UsageStats usage_stats_from_counts(const CountMatrix& counts);

// Discrete-feature dump: header "K=<K> G=<G> frame_rate=<Hz>", then one frame
// per line with G space-separated indices.
struct CodeDump {
  int K = 0;
  int G = 0;
  double frame_rate = 0.0;
  IndexMatrix indices;
};

void write_codes(const std::filesystem::path& path, const CodeDump& dump,
                 std::string_view comment = {});
CodeDump read_codes(const std::filesystem::path& path);

}  // namespace vqspeech

#endif  // VQSPEECH_QUANTIZER_H_
