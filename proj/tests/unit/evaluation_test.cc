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

#include "vqspeech/evaluation.h"

#include <cmath>
#include <random>

#include <Eigen/QR>
#include <gtest/gtest.h>

#include "test_support.h"

namespace vqspeech {
namespace {

using testing::random_matrix;

Segment make_segment(const Matrix& f, int cls, int utt = 0, int spk = 0) {
  return Segment{f, cls, utt, spk};
}

// `per_class` segments for each of `classes` classes over `speakers`
// speakers, each a few iid Gaussian frames.
std::vector<Segment> random_segments(int classes, int per_class, int speakers, int dim,
                                     uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Segment> out;
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      out.push_back(make_segment(random_matrix(3 + i % 4, dim, rng), c, i, i % speakers));
    }
  }
  return out;
}

TEST(Pool, MeanOfFrames) {
  const Matrix one = (Matrix(1, 3) << 1, -2, 3).finished();
  EXPECT_EQ(pool_segment(make_segment(one, 0)), one.row(0));
  Matrix pair(2, 3);
  pair << 1, -2, 3, -1, 2, -3;
  EXPECT_EQ(pool_segment(make_segment(pair, 0)).cwiseAbs().maxCoeff(), 0.0);

  std::mt19937_64 rng(2);
  const Matrix five = random_matrix(5, 4, rng);
  const RowVector mean = pool_segment(make_segment(five, 0));
  for (int j = 0; j < 4; ++j) {
    double s = 0.0;
    for (int t = 0; t < 5; ++t) s += five(t, j);
    EXPECT_NEAR(mean[j], s / 5.0, 1e-12);
  }
  EXPECT_VQ_ERROR(pool_segment(make_segment(Matrix(0, 3), 0)), ErrorKind::kLength);
}

TEST(Cosine, HandValues) {
  const RowVector a = (RowVector(2) << 1, 0).finished();
  const RowVector b = (RowVector(2) << 1, 1).finished();
  EXPECT_NEAR(cosine_distance(b, b), 0.0, 1e-15);
  EXPECT_NEAR(cosine_distance(b, -b), 2.0, 1e-15);
  EXPECT_NEAR(cosine_distance(a, b), 1.0 - 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(cosine_distance(a, b), 0.2929, 1e-4);
  EXPECT_EQ(cosine_distance(RowVector::Zero(2), b), 1.0);
  EXPECT_EQ(cosine_distance(RowVector::Zero(2), RowVector::Zero(2)), 1.0);
}

TEST(Abx, OneHotFeaturesNeverErr) {
  std::vector<Segment> segs;
  for (int c = 0; c < 4; ++c) {
    for (int i = 0; i < 5; ++i) {
      Matrix f = Matrix::Zero(2, 4);
      f.col(c).setOnes();
      segs.push_back(make_segment(f, c, i, i % 2));
    }
  }
  for (AbxMode mode : {AbxMode::kPooled, AbxMode::kWithinSpeaker, AbxMode::kAcrossSpeaker}) {
    const AbxResult r = abx_evaluate(segs, 2000, 3, mode);
    EXPECT_EQ(r.error_rate, 0.0) << abx_mode_name(mode);
    EXPECT_EQ(r.n_triplets, 2000);
  }
}

TEST(Abx, RandomFeaturesSitAtChance) {
  const std::vector<Segment> segs = random_segments(8, 40, 4, 16, 5);
  const AbxResult r = abx_evaluate(segs, 10000, 7, AbxMode::kPooled);
  EXPECT_GE(r.error_rate, 0.47);
  EXPECT_LE(r.error_rate, 0.53);
  // Breakdown aggregates to the global rate.
  double errors = 0.0;
  int64_t n = 0;
  for (const auto& [pair, stat] : r.per_pair) {
    EXPECT_NE(pair.first, pair.second);
    errors += stat.errors;
    n += stat.triplets;
  }
  EXPECT_EQ(n, r.n_triplets);
  EXPECT_DOUBLE_EQ(errors / n, r.error_rate);
}

TEST(Abx, HandBuiltErrorAndTie) {
  std::vector<Segment> segs = {
      make_segment((Matrix(1, 2) << 1, 0).finished(), 0),    // A
      make_segment((Matrix(1, 2) << 0.1, 1).finished(), 1),  // B
      make_segment((Matrix(1, 2) << 0, 1).finished(), 0),    // X
  };
  const AbxTriplet t{0, 1, 2};
  AbxResult r = score_abx_triplets(segs, std::span<const AbxTriplet>(&t, 1), AbxMode::kPooled);
  EXPECT_EQ(r.error_rate, 1.0);
  segs[1].features << 1, 0;
  segs[1].features *= 3.0;  // same direction as A
  r = score_abx_triplets(segs, std::span<const AbxTriplet>(&t, 1), AbxMode::kPooled);
  EXPECT_EQ(r.error_rate, 0.5);
}

TEST(Abx, ModeConstraintsHold) {
  const std::vector<Segment> segs = random_segments(3, 12, 3, 4, 9);
  for (const AbxTriplet& t : sample_abx_triplets(segs, 500, 2, AbxMode::kWithinSpeaker)) {
    EXPECT_EQ(segs[t.a].phoneme_class, segs[t.x].phoneme_class);
    EXPECT_NE(segs[t.b].phoneme_class, segs[t.x].phoneme_class);
    EXPECT_NE(t.a, t.x);
    EXPECT_EQ(segs[t.a].speaker_id, segs[t.x].speaker_id);
    EXPECT_EQ(segs[t.b].speaker_id, segs[t.x].speaker_id);
  }
  for (const AbxTriplet& t : sample_abx_triplets(segs, 500, 2, AbxMode::kAcrossSpeaker)) {
    EXPECT_EQ(segs[t.a].phoneme_class, segs[t.x].phoneme_class);
    EXPECT_NE(segs[t.b].phoneme_class, segs[t.x].phoneme_class);
    EXPECT_EQ(segs[t.a].speaker_id, segs[t.b].speaker_id);
    EXPECT_NE(segs[t.a].speaker_id, segs[t.x].speaker_id);
  }
}

TEST(Abx, InsufficientClassIsNamed) {
  std::vector<Segment> segs = random_segments(2, 3, 1, 2, 1);
  segs.push_back(make_segment(Matrix::Ones(1, 2), 7));
  try {
    abx_evaluate(segs, 10, 1, AbxMode::kPooled);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kData);
    EXPECT_NE(std::string(e.what()).find("class 7"), std::string::npos) << e.what();
  }
  EXPECT_VQ_ERROR(abx_evaluate(random_segments(2, 3, 1, 2, 1), 10, 1, AbxMode::kAcrossSpeaker),
                  ErrorKind::kData);
}

TEST(Abx, InvariantToPerSegmentScalingAndRotation) {
  std::vector<Segment> segs = random_segments(5, 10, 2, 6, 13);
  const AbxResult base = abx_evaluate(segs, 3000, 4, AbxMode::kPooled);
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> scale(0.1, 10.0);

  // Powers of two keep the scaled features bitwise proportional.
  std::vector<Segment> scaled = segs;
  for (auto& s : scaled) s.features *= std::ldexp(1.0, static_cast<int>(scale(rng)) - 3);
  EXPECT_EQ(abx_evaluate(scaled, 3000, 4, AbxMode::kPooled).error_rate, base.error_rate);

  // Arbitrary positive constants and a random rotation, decision by decision.
  const Matrix q = Eigen::HouseholderQR<Matrix>(random_matrix(6, 6, rng)).householderQ();
  std::vector<Segment> moved = segs;
  for (auto& s : moved) s.features = (s.features * q) * scale(rng);
  const auto triplets = sample_abx_triplets(segs, 3000, 4, AbxMode::kPooled);
  int flips = 0;
  for (const AbxTriplet& t : triplets) {
    auto margin = [&](const std::vector<Segment>& v) {
      const RowVector x = pool_segment(v[t.x]);
      return cosine_distance(x, pool_segment(v[t.b])) - cosine_distance(x, pool_segment(v[t.a]));
    };
    const double m0 = margin(segs);
    const double m1 = margin(moved);
    EXPECT_NEAR(m0, m1, 1e-12);
    if ((m0 < 0) != (m1 < 0)) ++flips;
  }
  EXPECT_EQ(flips, 0);
  EXPECT_EQ(abx_evaluate(moved, 3000, 4, AbxMode::kPooled).error_rate, base.error_rate);
}

TEST(Abx, ClassRelabelingLeavesErrorUnchanged) {
  std::vector<Segment> segs = random_segments(4, 8, 2, 5, 17);
  const AbxResult base = abx_evaluate(segs, 4000, 6, AbxMode::kPooled);
  const int perm[] = {2, 3, 0, 1};
  for (auto& s : segs) s.phoneme_class = perm[s.phoneme_class];
  EXPECT_EQ(abx_evaluate(segs, 4000, 6, AbxMode::kPooled).error_rate, base.error_rate);
}

TEST(Segments, RunsOfConstantLabel) {
  std::mt19937_64 rng(1);
  const Matrix f = random_matrix(7, 2, rng);
  const std::vector<int> labels = {0, 0, 1, 1, 1, 0, 2};
  const auto segs = segments_from_alignment(f, labels, 4, 1);
  ASSERT_EQ(segs.size(), 4u);
  EXPECT_EQ(segs[1].phoneme_class, 1);
  EXPECT_EQ(segs[1].features, f.middleRows(2, 3));
  EXPECT_EQ(segs[3].utterance_id, 4);
  EXPECT_EQ(segs[3].speaker_id, 1);
  const std::vector<int> short_labels = {0, 1};
  EXPECT_VQ_ERROR(segments_from_alignment(f, short_labels, 0, 0), ErrorKind::kShape);
}

TEST(Cooccurrence, DeterministicAndSingleFrame) {
  const std::vector<std::pair<int64_t, int>> single = {{5, 2}};
  const CooccurrenceMatrix s = cooccurrence(single);
  ASSERT_EQ(s.phonemes(), 3);
  ASSERT_EQ(s.codes, std::vector<int64_t>{5});
  EXPECT_EQ(s.conditional(2, 0), 1.0);

  const std::vector<std::pair<int64_t, int>> det = {{9, 1}, {3, 0}, {9, 1}, {4, 2}, {3, 0}};
  const CooccurrenceMatrix d = cooccurrence(det);
  // Ordered by dominant phoneme.
  EXPECT_EQ(d.codes, (std::vector<int64_t>{3, 9, 4}));
  for (int m = 0; m < 3; ++m) EXPECT_EQ(d.conditional.col(m).maxCoeff(), 1.0);
  EXPECT_EQ(purity(d), 1.0);
}

TEST(Cooccurrence, UniformPairingNearHalf) {
  // 20 codes, 2 phonemes, 400 draws each: binomial sd is 0.025.
  std::mt19937_64 rng(3);
  std::bernoulli_distribution coin(0.5);
  std::vector<std::pair<int64_t, int>> pairs;
  for (int code = 0; code < 20; ++code) {
    for (int i = 0; i < 400; ++i) pairs.push_back({code, coin(rng) ? 1 : 0});
  }
  const CooccurrenceMatrix m = cooccurrence(pairs);
  for (int j = 0; j < 20; ++j) {
    EXPECT_NEAR(m.conditional(0, j), 0.5, 0.1);
    EXPECT_NEAR(m.conditional.col(j).sum(), 1.0, 1e-9);
  }
  EXPECT_NEAR(purity(m), 0.5, 0.05);
}

TEST(Purity, WorkedExample) {
  // code 10: (3, 1), code 11: (0, 2), code 12: (2, 2); ten frames.
  // purity = 0.4 * 0.75 + 0.2 * 1 + 0.4 * 0.5 = 0.7
  std::vector<std::pair<int64_t, int>> pairs;
  for (int i = 0; i < 3; ++i) pairs.push_back({10, 0});
  pairs.push_back({10, 1});
  for (int i = 0; i < 2; ++i) pairs.push_back({11, 1});
  for (int i = 0; i < 2; ++i) pairs.push_back({12, 0});
  for (int i = 0; i < 2; ++i) pairs.push_back({12, 1});
  EXPECT_NEAR(purity(cooccurrence(pairs)), 0.7, 1e-15);

  std::vector<std::pair<int64_t, int>> uniform;
  for (int p = 0; p < 4; ++p) uniform.push_back({0, p});
  EXPECT_DOUBLE_EQ(purity(cooccurrence(uniform)), 0.25);
}

TEST(CodeLabels, CompositeAndPerGroupSymbols) {
  IndexMatrix idx(2, 2);
  idx << 1, 2, 3, 0;
  const std::vector<int> labels = {4, 5};
  const auto comp = code_label_pairs(idx, 4, labels);
  ASSERT_EQ(comp.size(), 2u);
  EXPECT_EQ(comp[0], (std::pair<int64_t, int>{1 + 2 * 4, 4}));
  EXPECT_EQ(comp[1], (std::pair<int64_t, int>{3, 5}));
  const auto per = code_label_pairs(idx, 4, labels, true);
  ASSERT_EQ(per.size(), 4u);
  EXPECT_EQ(per[1], (std::pair<int64_t, int>{4 + 2, 4}));
}

TEST(Reports, AbxCsvHeader) {
  testing::TempDir dir;
  const AbxResult r = abx_evaluate(random_segments(2, 4, 1, 3, 1), 50, 1, AbxMode::kPooled);
  write_abx_report(dir / "abx.csv", std::span<const AbxResult>(&r, 1), "prov");
  const std::string text = testing::read_text(dir / "abx.csv");
  EXPECT_EQ(text.rfind("# prov\nmode,n_triplets,error_rate\npooled,50,", 0), 0u) << text;
}

}  // namespace
}  // namespace vqspeech
