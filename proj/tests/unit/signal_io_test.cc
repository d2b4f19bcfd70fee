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

#include "vqspeech/signal_io.h"

#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "test_support.h"
#include "vqspeech/common.h"

namespace vqspeech {
namespace {

using testing::TempDir;

// Companding written out from the formula, for comparison.
int oracle_level(double s, int levels) {
  const double mu = levels - 1;
  const double sign = s < 0 ? -1.0 : (s > 0 ? 1.0 : 0.0);
  const double f = sign * std::log1p(mu * std::abs(s)) / std::log1p(mu);
  return static_cast<int>(std::floor((f + 1.0) / 2.0 * (levels - 1) + 0.5));
}

TEST(MuLaw, Endpoints) {
  EXPECT_EQ(mu_law_level(0.0), 128);
  EXPECT_EQ(mu_law_level(1.0), 255);
  EXPECT_EQ(mu_law_level(-1.0), 0);
}

TEST(MuLaw, MatchesFormulaOnGrid) {
  for (int levels : {2, 16, 256, 1024}) {
    for (int i = -2000; i <= 2000; ++i) {
      const double s = i / 2000.0;
      ASSERT_EQ(mu_law_level(s, levels), oracle_level(s, levels)) << s << " " << levels;
    }
  }
}

TEST(MuLaw, MonotoneOnDenseGrid) {
  int prev = -1;
  for (int i = 0; i <= 10000; ++i) {
    const double s = -1.0 + 2.0 * i / 10000.0;
    const int level = mu_law_level(s);
    EXPECT_GE(level, prev);
    prev = level;
  }
}

TEST(MuLaw, RejectsOutOfRange) {
  EXPECT_VQ_ERROR(mu_law_level(1.0001), ErrorKind::kInputRange);
  Waveform w{{0.0, -1.5}, 16000};
  EXPECT_VQ_ERROR(mu_law_encode(w), ErrorKind::kInputRange);
  w.samples = {0.0, std::nan("")};
  EXPECT_VQ_ERROR(mu_law_encode(w), ErrorKind::kInputRange);
  EXPECT_VQ_ERROR(mu_law_encode(Waveform{{0.1}, 16000}, 100), ErrorKind::kInputRange);
}

TEST(MuLaw, DecodeEndpointsAndOrder) {
  EXPECT_NEAR(mu_law_value(128), 0.0, 1e-4);
  EXPECT_DOUBLE_EQ(mu_law_value(255), 1.0);
  EXPECT_DOUBLE_EQ(mu_law_value(0), -1.0);
  for (int l = 1; l < 256; ++l) EXPECT_GT(mu_law_value(l), mu_law_value(l - 1));
}

TEST(MuLaw, RoundTripWithinHalfBin) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Waveform w;
  for (int i = 0; i < 1000; ++i) w.samples.push_back(u(rng));
  const MuLawSequence m = mu_law_encode(w);
  const Waveform back = mu_law_decode(m);
  ASSERT_EQ(back.size(), w.size());
  for (int i = 0; i < w.size(); ++i) {
    EXPECT_LE(std::abs(back.samples[i] - w.samples[i]),
              mu_law_half_bin_width(m.levels[i]) + 1e-12);
  }
}

TEST(MuLaw, HalfBinMatchesBruteForceForEveryLevel) {
  // Largest observed error per level over a fine grid never exceeds the
  // reported half-bin width, and comes within a grid step of it.
  constexpr int kGrid = 2000000;
  std::vector<double> worst(256, 0.0);
  for (int i = 0; i <= kGrid; ++i) {
    const double s = -1.0 + 2.0 * i / kGrid;
    const int l = mu_law_level(s);
    worst[l] = std::max(worst[l], std::abs(mu_law_value(l) - s));
  }
  for (int l = 0; l < 256; ++l) {
    const double bound = mu_law_half_bin_width(l);
    EXPECT_LE(worst[l], bound + 1e-12) << l;
    EXPECT_GE(worst[l], bound - 2.0 / kGrid - 1e-12) << l;
  }
}

TEST(Wav, SilenceFile) {
  TempDir dir;
  testing::write_text(dir / "silence.wav",
                      testing::wav_bytes(std::vector<int16_t>(160, 0), 16000));
  const Waveform w = load_waveform(dir / "silence.wav");
  EXPECT_EQ(w.sample_rate, 16000);
  ASSERT_EQ(w.size(), 160);
  for (double s : w.samples) EXPECT_EQ(s, 0.0);
}

TEST(Wav, RejectsStereoNamingField) {
  TempDir dir;
  testing::write_text(dir / "stereo.wav",
                      testing::wav_bytes(std::vector<int16_t>(8, 0), 16000, 2));
  try {
    load_waveform(dir / "stereo.wav");
    FAIL() << "stereo accepted";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kFormat);
    EXPECT_NE(std::string(e.what()).find("channels"), std::string::npos);
  }
}

TEST(Wav, RejectsBitDepthAndBadHeader) {
  TempDir dir;
  testing::write_text(dir / "b8.wav", testing::wav_bytes(std::vector<int16_t>(8, 0), 8000, 1, 8));
  EXPECT_VQ_ERROR(load_waveform(dir / "b8.wav"), ErrorKind::kFormat);
  testing::write_text(dir / "junk.wav", "not a wav file at all");
  EXPECT_VQ_ERROR(load_waveform(dir / "junk.wav"), ErrorKind::kFormat);
  EXPECT_VQ_ERROR(load_waveform(dir / "missing.wav"), ErrorKind::kPath);
}

TEST(Wav, SquareWaveScaling) {
  TempDir dir;
  std::vector<int16_t> square;
  for (int i = 0; i < 64; ++i) square.push_back(i % 2 ? -32767 : 32767);
  testing::write_text(dir / "square.wav", testing::wav_bytes(square, 8000));
  const Waveform w = load_waveform(dir / "square.wav");
  EXPECT_EQ(w.sample_rate, 8000);
  for (int i = 0; i < 64; ++i) {
    EXPECT_EQ(w.samples[i], (i % 2 ? -32767.0 : 32767.0) / 32768.0);
  }
}

TEST(Wav, WriteLoadIdentityOnPcmLevels) {
  TempDir dir;
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> level(-32768, 32767);
  Waveform w;
  w.sample_rate = 22050;
  for (int i = 0; i < 500; ++i) w.samples.push_back(level(rng) / 32768.0);
  write_waveform(dir / "rt.wav", w);
  const Waveform back = load_waveform(dir / "rt.wav");
  EXPECT_EQ(back.sample_rate, w.sample_rate);
  EXPECT_EQ(back.samples, w.samples);
  EXPECT_EQ(testing::read_text(dir / "rt.wav"),
            testing::wav_bytes([&] {
              std::vector<int16_t> pcm;
              for (double s : w.samples) pcm.push_back(static_cast<int16_t>(std::lround(s * 32768)));
              return pcm;
            }(), 22050));
}

TEST(Geometry, FrameCountAndCentreLabels) {
  const FrameGeometry g{80, 225};
  EXPECT_EQ(latent_frame_count(224, g), 0);
  EXPECT_EQ(latent_frame_count(225, g), 1);
  EXPECT_EQ(latent_frame_count(304, g), 1);
  EXPECT_EQ(latent_frame_count(305, g), 2);

  std::vector<int> samples(465);
  for (int i = 0; i < 465; ++i) samples[i] = i;
  const auto labels = frame_labels(samples, g);
  ASSERT_EQ(labels.size(), 4u);
  for (int t = 0; t < 4; ++t) EXPECT_EQ(labels[t], t * 80 + 112);
}

TEST(Alignment, RoundTripWithComment) {
  TempDir dir;
  FrameAlignment a{{0, 0, 3, 3, 1}, 200.0};
  write_alignment(dir / "a.ali", a, "provenance line");
  const std::string text = testing::read_text(dir / "a.ali");
  EXPECT_EQ(text.rfind("# provenance line\n", 0), 0u);
  const FrameAlignment back = read_alignment(dir / "a.ali");
  EXPECT_EQ(back.labels, a.labels);
  EXPECT_DOUBLE_EQ(back.frame_rate, 200.0);
}

TEST(Alignment, RejectsMissingHeader) {
  TempDir dir;
  testing::write_text(dir / "bad.ali", "1\n2\n");
  EXPECT_VQ_ERROR(read_alignment(dir / "bad.ali"), ErrorKind::kFormat);
}

TEST(Manifest, RoundTripResolvesRelativePaths) {
  TempDir dir;
  DatasetManifest m;
  m.entries.push_back({"a.wav", std::string("a.ali"), 3});
  m.entries.push_back({"b.wav", std::nullopt, std::nullopt});
  write_manifest(dir / "m.tsv", m);
  const DatasetManifest back = read_manifest(dir / "m.tsv");
  ASSERT_EQ(back.entries.size(), 2u);
  EXPECT_EQ(back.entries[0].audio_path, (dir / "a.wav").string());
  EXPECT_EQ(back.entries[0].alignment_path, (dir / "a.ali").string());
  EXPECT_EQ(back.entries[0].speaker_id, 3);
  EXPECT_FALSE(back.entries[1].alignment_path.has_value());
  EXPECT_FALSE(back.entries[1].speaker_id.has_value());
}

TEST(Manifest, RejectsNegativeSpeaker) {
  TempDir dir;
  testing::write_text(dir / "m.tsv", "a.wav\t-\t-2\n");
  EXPECT_VQ_ERROR(read_manifest(dir / "m.tsv"), ErrorKind::kFormat);
}

TEST(Corpus, DeterministicGivenSeed) {
  const SyntheticCorpus a = generate_synthetic_corpus(1, 2, 7);
  const SyntheticCorpus b = generate_synthetic_corpus(1, 2, 7);
  ASSERT_EQ(a.waveforms.size(), 1u);
  EXPECT_EQ(a.waveforms[0].samples, b.waveforms[0].samples);
  EXPECT_EQ(a.alignments[0].labels, b.alignments[0].labels);
  const SyntheticCorpus c = generate_synthetic_corpus(1, 2, 8);
  EXPECT_NE(a.waveforms[0].samples, c.waveforms[0].samples);
}

TEST(Corpus, LabelsStayInRangeAndMatchFrameCount) {
  const CorpusOptions options;
  const SyntheticCorpus c = generate_synthetic_corpus(6, 2, 3, options);
  for (size_t u = 0; u < c.waveforms.size(); ++u) {
    const Waveform& w = c.waveforms[u];
    w.validate();
    EXPECT_GE(w.size(), options.min_utterance_samples);
    const auto& labels = c.alignments[u].labels;
    EXPECT_EQ(static_cast<int>(labels.size()), latent_frame_count(w.size(), options.geometry));
    for (int l : labels) EXPECT_TRUE(l == 0 || l == 1);
    EXPECT_GE(c.speakers[u], 0);
    EXPECT_LT(c.speakers[u], options.n_speakers);
  }
}

// Energy of `x` in [lo, hi] Hz by direct DFT.
double band_energy(const std::vector<double>& x, int rate, double lo, double hi) {
  const int n = static_cast<int>(x.size());
  double total = 0.0;
  for (int k = 1; k < n / 2; ++k) {
    const double f = static_cast<double>(k) * rate / n;
    if (f < lo || f > hi) continue;
    double re = 0.0, im = 0.0;
    for (int t = 0; t < n; ++t) {
      const double a = 2.0 * std::numbers::pi * k * t / n;
      re += x[t] * std::cos(a);
      im -= x[t] * std::sin(a);
    }
    total += re * re + im * im;
  }
  return total;
}

TEST(Corpus, ClassesDifferInSpectralBalance) {
  // Class 0 concentrates energy near 300/700 Hz, class 1 near 800/2400 Hz.
  CorpusOptions options;
  options.n_speakers = 2;
  const SyntheticCorpus c = generate_synthetic_corpus(4, 2, 21, options);
  double min_ratio0 = 1e300, max_ratio1 = 0.0;
  int seen0 = 0, seen1 = 0;
  for (size_t u = 0; u < c.waveforms.size(); ++u) {
    for (const SegmentSpan& s : c.segments[u]) {
      if (s.end - s.begin < 800) continue;
      std::vector<double> x(c.waveforms[u].samples.begin() + s.begin,
                            c.waveforms[u].samples.begin() + s.begin + 800);
      const double ratio = band_energy(x, options.sample_rate, 150, 900) /
                           band_energy(x, options.sample_rate, 1900, 3000);
      if (s.label == 0) {
        min_ratio0 = std::min(min_ratio0, ratio);
        ++seen0;
      } else {
        max_ratio1 = std::max(max_ratio1, ratio);
        ++seen1;
      }
    }
  }
  ASSERT_GT(seen0, 0);
  ASSERT_GT(seen1, 0);
  EXPECT_GT(min_ratio0, 4.0 * max_ratio1);
}

}  // namespace
}  // namespace vqspeech
