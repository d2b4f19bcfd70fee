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

// Audio ingestion, mu-law companding, manifests, alignments and the
// synthetic toy-phoneme corpus.

#ifndef VQSPEECH_SIGNAL_IO_H_
#define VQSPEECH_SIGNAL_IO_H_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace vqspeech {

// Mono audio in [-1, 1].
struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;

  // Throws kInputRange for empty, non-finite or out-of-range samples.
  void validate() const;
  int size() const { return static_cast<int>(samples.size()); }
};

struct MuLawSequence {
  std::vector<int> levels;
  int sample_rate = 16000;
  int num_levels = 256;
};

// Companded level of a single sample; mu = levels - 1 and 0.0 maps to
// levels / 2. Throws kInputRange when |sample| > 1.
int mu_law_level(double sample, int levels = 256);
// Inverse of the companding at the level's reconstruction point.
double mu_law_value(int level, int levels = 256);
// Largest |decode(encode(s)) - s| over the samples that encode to `level`:
// the wider of the two half-bins around the reconstruction point.
double mu_law_half_bin_width(int level, int levels = 256);

// `levels` must be a power of two in [2, 65536].
MuLawSequence mu_law_encode(const Waveform& wave, int levels = 256);
Waveform mu_law_decode(const MuLawSequence& sequence);

// 16-bit PCM mono RIFF/WAVE. Samples are scaled by 1/32768.
Waveform load_waveform(const std::filesystem::path& path);
// Rounds to the nearest 16-bit level, clipping at +32767.
void write_waveform(const std::filesystem::path& path, const Waveform& wave);

// Latent frames stored at the encoder frame rate.
struct FrameAlignment {
  std::vector<int> labels;
  double frame_rate = 0.0;
};

// UTF-8 "frame_rate=<Hz>" header followed by one integer per line. Lines
// starting with '#' are comments.
FrameAlignment read_alignment(const std::filesystem::path& path);
void write_alignment(const std::filesystem::path& path,
                     const FrameAlignment& alignment,
                     std::string_view comment = {});

struct ManifestEntry {
  std::string audio_path;
  std::optional<std::string> alignment_path;
  std::optional<int> speaker_id;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  int sample_rate = 16000;
};

// Tab-separated: audio_path, alignment_path or "-", speaker_id or "-".
// Relative paths are resolved against the manifest's directory on read.
DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path,
                    const DatasetManifest& manifest,
                    std::string_view comment = {});

// Geometry of a valid (unpadded) strided encoder.
struct FrameGeometry {
  int stride = 80;
  int receptive_field = 225;
};

// floor((num_samples - receptive_field) / stride) + 1, or 0 when the input is
// shorter than the receptive field.
int latent_frame_count(int num_samples, const FrameGeometry& geometry);

// Label of each latent frame: the label at the centre sample of its
// receptive field.
std::vector<int> frame_labels(const std::vector<int>& sample_labels,
                              const FrameGeometry& geometry);

struct CorpusOptions {
  int sample_rate = 16000;
  FrameGeometry geometry;
  double min_segment_ms = 50.0;
  double max_segment_ms = 150.0;
  int min_utterance_samples = 12000;
  int n_speakers = 8;
  double noise_std = 0.02;
  double f0_min = 90.0;
  double f0_max = 240.0;
  double gain_min = 0.25;
  double gain_max = 0.7;
  // Per-speaker multiplicative scaling of the class formants.
  double formant_scale_spread = 0.08;
  // Per-segment relative f0 jitter around the speaker's f0.
  double f0_jitter = 0.03;
};

struct SegmentSpan {
  int begin = 0;  // first sample
  int end = 0;    // one past the last sample
  int label = 0;
};

struct SyntheticCorpus {
  std::vector<Waveform> waveforms;
  std::vector<FrameAlignment> alignments;
  std::vector<int> speakers;
  std::vector<std::vector<SegmentSpan>> segments;
};

// The two formant centres (Hz) that define the spectral envelope of a class.
std::pair<double, double> class_formants(int phoneme_class);

// Each utterance is a sequence of random-length segments. A segment is a
// harmonic stack whose envelope is fixed by its class; pitch, gain and a
// formant scale are per-speaker, and white noise is added. Deterministic
// given `seed`.
SyntheticCorpus generate_synthetic_corpus(int n_utterances, int n_classes,
                                          uint64_t seed,
                                          const CorpusOptions& options = {});

}  // namespace vqspeech

#endif  // VQSPEECH_SIGNAL_IO_H_
