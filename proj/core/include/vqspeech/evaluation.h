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

// Sampled-triplet ABX over sequence-averaged features and latent/phoneme
// co-occurrence analysis.

#ifndef VQSPEECH_EVALUATION_H_
#define VQSPEECH_EVALUATION_H_

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "vqspeech/common.h"

namespace vqspeech {

struct Segment {
  Matrix features;  // T x D
  int phoneme_class = 0;
  int utterance_id = 0;
  int speaker_id = 0;
};

// Splits per-frame features into runs of constant label. `labels` must have
// one entry per feature row.
std::vector<Segment> segments_from_alignment(const Matrix& features,
                                             std::span<const int> labels,
                                             int utterance_id, int speaker_id);

RowVector pool_segment(const Segment& segment);

// Zero vectors are at distance 1 from everything.
double cosine_distance(const RowVector& a, const RowVector& b);

enum class AbxMode { kWithinSpeaker, kAcrossSpeaker, kPooled };

AbxMode parse_abx_mode(std::string_view name);
std::string_view abx_mode_name(AbxMode mode);

struct AbxTriplet {
  int a = 0;
  int b = 0;
  int x = 0;
};

struct AbxPairStat {
  double errors = 0.0;
  int64_t triplets = 0;
};

struct AbxResult {
  AbxMode mode = AbxMode::kPooled;
  double error_rate = 0.0;
  double errors = 0.0;
  int64_t n_triplets = 0;
  // (class of A and X, class of B).
  std::map<std::pair<int, int>, AbxPairStat> per_pair;
};

// A and X share a class, B does not. Within-speaker: all three share a
// speaker. Across-speaker: A and B share a speaker different from X's.
// Throws kData naming the first class with fewer than two segments, or when
// no triplet satisfies the mode.
std::vector<AbxTriplet> sample_abx_triplets(std::span<const Segment> segments,
                                            int64_t n_triplets, uint64_t seed,
                                            AbxMode mode);

// Error when d(X, B) < d(X, A); ties count one half.
AbxResult score_abx_triplets(std::span<const Segment> segments,
                             std::span<const AbxTriplet> triplets, AbxMode mode);

AbxResult abx_evaluate(std::span<const Segment> segments, int64_t n_triplets,
                       uint64_t seed, AbxMode mode);

struct CooccurrenceMatrix {
  std::vector<int64_t> codes;  // column symbols, in display order
  CountMatrix counts;          // P x M
  Matrix conditional;          // P x M, columns sum to 1
  int phonemes() const { return static_cast<int>(counts.rows()); }
};

// Columns are ordered by their most probable phoneme, then by decreasing
// conditional probability of that phoneme, then by symbol. With
// n_phonemes < 0 the row count is the largest label plus one.
CooccurrenceMatrix cooccurrence(std::span<const std::pair<int64_t, int>> pairs,
                                int n_phonemes = -1);

// Composite symbol sum_g idx_g * K^g per frame, or (per_group) one symbol
// g * K + idx_g per group and frame.
std::vector<std::pair<int64_t, int>> code_label_pairs(const IndexMatrix& indices,
                                                      int K,
                                                      std::span<const int> labels,
                                                      bool per_group = false);

double purity(const CooccurrenceMatrix& m);

void write_abx_report(const std::filesystem::path& path,
                      std::span<const AbxResult> results,
                      std::string_view comment = {});
void write_cooccurrence(const std::filesystem::path& path,
                        const CooccurrenceMatrix& m,
                        std::string_view comment = {});

}  // namespace vqspeech

#endif  // VQSPEECH_EVALUATION_H_
