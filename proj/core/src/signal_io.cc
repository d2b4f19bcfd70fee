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

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <sstream>

#include "vqspeech/common.h"

namespace vqspeech {

namespace fs = std::filesystem;

void Waveform::validate() const {
  if (samples.empty()) {
    throw Error(ErrorKind::kInputRange, "waveform has no samples");
  }
  if (sample_rate <= 0) {
    throw Error(ErrorKind::kInputRange,
                "sample_rate must be positive, got " +
                    std::to_string(sample_rate));
  }
  for (size_t i = 0; i < samples.size(); ++i) {
    const double s = samples[i];
    if (!std::isfinite(s) || std::abs(s) > 1.0) {
      throw Error(ErrorKind::kInputRange,
                  "sample " + std::to_string(i) + " outside [-1, 1]: " +
                      std::to_string(s));
    }
  }
}

namespace {

void check_levels(int levels) {
  if (levels < 2 || levels > 65536 || (levels & (levels - 1)) != 0) {
    throw Error(ErrorKind::kInputRange,
                "mu-law levels must be a power of two in [2, 65536], got " +
                    std::to_string(levels));
  }
}

double expand(double companded, double mu) {
  const double magnitude = (std::pow(1.0 + mu, std::abs(companded)) - 1.0) / mu;
  return companded < 0 ? -magnitude : magnitude;
}

}  // namespace

int mu_law_level(double sample, int levels) {
  if (!(std::abs(sample) <= 1.0)) {
    throw Error(ErrorKind::kInputRange,
                "mu-law input outside [-1, 1]: " + std::to_string(sample));
  }
  const double mu = levels - 1;
  const double magnitude = std::log1p(mu * std::abs(sample)) / std::log1p(mu);
  const double companded = sample < 0 ? -magnitude : magnitude;
  const int level = static_cast<int>(
      std::floor((companded + 1.0) / 2.0 * (levels - 1) + 0.5));
  return std::clamp(level, 0, levels - 1);
}

double mu_law_value(int level, int levels) {
  const double companded = 2.0 * level / (levels - 1) - 1.0;
  return expand(companded, levels - 1);
}

double mu_law_half_bin_width(int level, int levels) {
  const double mu = levels - 1;
  const double centre = 2.0 * level / (levels - 1) - 1.0;
  const double half = 1.0 / (levels - 1);
  const double lo = std::max(-1.0, centre - half);
  const double hi = std::min(1.0, centre + half);
  const double value = expand(centre, mu);
  return std::max(expand(hi, mu) - value, value - expand(lo, mu));
}

MuLawSequence mu_law_encode(const Waveform& wave, int levels) {
  check_levels(levels);
  MuLawSequence out;
  out.sample_rate = wave.sample_rate;
  out.num_levels = levels;
  out.levels.reserve(wave.samples.size());
  for (double s : wave.samples) out.levels.push_back(mu_law_level(s, levels));
  return out;
}

Waveform mu_law_decode(const MuLawSequence& sequence) {
  Waveform out;
  out.sample_rate = sequence.sample_rate;
  out.samples.reserve(sequence.levels.size());
  for (int level : sequence.levels) {
    out.samples.push_back(mu_law_value(level, sequence.num_levels));
  }
  return out;
}

namespace {

uint32_t read_u32(const unsigned char* p) {
  return uint32_t{p[0]} | (uint32_t{p[1]} << 8) | (uint32_t{p[2]} << 16) |
         (uint32_t{p[3]} << 24);
}

uint16_t read_u16(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kPath, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

[[noreturn]] void wav_error(const fs::path& path, const std::string& what) {
  throw Error(ErrorKind::kFormat, path.string() + ": " + what);
}

}  // namespace

Waveform load_waveform(const fs::path& path) {
  const std::string bytes = read_file(path);
  const auto* data = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12 || std::memcmp(data, "RIFF", 4) != 0) {
    wav_error(path, "malformed header: missing RIFF tag");
  }
  if (std::memcmp(data + 8, "WAVE", 4) != 0) {
    wav_error(path, "malformed header: missing WAVE tag");
  }

  bool have_fmt = false;
  int channels = 0;
  int bits = 0;
  int sample_rate = 0;
  size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string id(bytes.data() + pos, 4);
    const uint32_t size = read_u32(data + pos + 4);
    const size_t body = pos + 8;
    if (body + size > bytes.size()) {
      wav_error(path, "malformed header: chunk '" + id + "' overruns file");
    }
    if (id == "fmt ") {
      if (size < 16) wav_error(path, "malformed header: fmt chunk too short");
      const int audio_format = read_u16(data + body);
      channels = read_u16(data + body + 2);
      sample_rate = static_cast<int>(read_u32(data + body + 4));
      bits = read_u16(data + body + 14);
      if (audio_format != 1) {
        wav_error(path, "audio_format=" + std::to_string(audio_format) +
                            " unsupported (expected 1, PCM)");
      }
      if (channels != 1) {
        wav_error(path, "channels=" + std::to_string(channels) +
                            " unsupported (expected 1)");
      }
      if (bits != 16) {
        wav_error(path, "bits_per_sample=" + std::to_string(bits) +
                            " unsupported (expected 16)");
      }
      if (sample_rate <= 0) {
        wav_error(path, "sample_rate=" + std::to_string(sample_rate) +
                            " must be positive");
      }
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) wav_error(path, "malformed header: data before fmt");
      if (size % 2 != 0) {
        wav_error(path, "data size " + std::to_string(size) +
                            " is not a multiple of the block size");
      }
      Waveform wave;
      wave.sample_rate = sample_rate;
      wave.samples.resize(size / 2);
      for (size_t i = 0; i < wave.samples.size(); ++i) {
        const auto v = static_cast<int16_t>(read_u16(data + body + 2 * i));
        wave.samples[i] = v / 32768.0;
      }
      if (wave.samples.empty()) wav_error(path, "data chunk is empty");
      return wave;
    }
    pos = body + size + (size & 1);
  }
  wav_error(path, have_fmt ? "missing data chunk" : "missing fmt chunk");
}

void write_waveform(const fs::path& path, const Waveform& wave) {
  wave.validate();
  const auto n = static_cast<uint32_t>(wave.samples.size());
  std::string out;
  out.reserve(44 + 2 * n);
  out += "RIFF";
  put_u32(out, 36 + 2 * n);
  out += "WAVE";
  out += "fmt ";
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, static_cast<uint32_t>(wave.sample_rate));
  put_u32(out, static_cast<uint32_t>(wave.sample_rate) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out += "data";
  put_u32(out, 2 * n);
  for (double s : wave.samples) {
    const long q = std::clamp(std::lround(s * 32768.0), -32768L, 32767L);
    put_u16(out, static_cast<uint16_t>(static_cast<int16_t>(q)));
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw Error(ErrorKind::kPath, "cannot write " + path.string());
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw Error(ErrorKind::kIo, "short write to " + path.string());
}

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::string rstrip(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
  return s;
}

std::ofstream open_text(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kPath, "cannot write " + path.string());
  return out;
}

void write_comment(std::ostream& out, std::string_view comment) {
  if (!comment.empty()) out << "# " << comment << "\n";
}

int parse_int(const std::string& text, const fs::path& path, int line_no) {
  try {
    size_t used = 0;
    const int v = std::stoi(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::kFormat, path.string() + ":" +
                                        std::to_string(line_no) +
                                        ": expected integer, got '" + text +
                                        "'");
  }
}

}  // namespace

FrameAlignment read_alignment(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kPath, "cannot open " + path.string());
  FrameAlignment out;
  bool have_header = false;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = rstrip(line);
    if (line.empty() || line[0] == '#') continue;
    if (!have_header) {
      if (line.rfind("frame_rate=", 0) != 0) {
        throw Error(ErrorKind::kFormat,
                    path.string() + ": missing frame_rate=<Hz> header");
      }
      out.frame_rate = std::stod(line.substr(11));
      if (!(out.frame_rate > 0)) {
        throw Error(ErrorKind::kFormat,
                    path.string() + ": frame_rate must be positive");
      }
      have_header = true;
      continue;
    }
    out.labels.push_back(parse_int(line, path, line_no));
  }
  if (!have_header) {
    throw Error(ErrorKind::kFormat,
                path.string() + ": missing frame_rate=<Hz> header");
  }
  return out;
}

void write_alignment(const fs::path& path, const FrameAlignment& alignment,
                     std::string_view comment) {
  auto out = open_text(path);
  write_comment(out, comment);
  std::ostringstream rate;
  rate.precision(17);
  rate << alignment.frame_rate;
  out << "frame_rate=" << rate.str() << "\n";
  for (int label : alignment.labels) out << label << "\n";
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kPath, "cannot open " + path.string());
  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    const fs::path candidate(p);
    return candidate.is_absolute() ? candidate.string()
                                   : (base / candidate).string();
  };

  DatasetManifest out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = rstrip(line);
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto at = line.find("sample_rate=");
      if (at != std::string::npos) {
        out.sample_rate = std::stoi(line.substr(at + 12));
      }
      continue;
    }
    const auto fields = split(line, '\t');
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (fields.size() != 3) {
      throw Error(ErrorKind::kFormat,
                  where + ": expected 3 tab-separated fields, got " +
                      std::to_string(fields.size()));
    }
    if (fields[0].empty()) {
      throw Error(ErrorKind::kFormat, where + ": empty audio_path");
    }
    ManifestEntry entry;
    entry.audio_path = resolve(fields[0]);
    if (fields[1].empty()) {
      throw Error(ErrorKind::kFormat, where + ": empty alignment_path");
    }
    if (fields[1] != "-") entry.alignment_path = resolve(fields[1]);
    if (fields[2] != "-") {
      const int speaker = parse_int(fields[2], path, line_no);
      if (speaker < 0) {
        throw Error(ErrorKind::kFormat, where + ": negative speaker_id");
      }
      entry.speaker_id = speaker;
    }
    out.entries.push_back(std::move(entry));
  }
  return out;
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest,
                    std::string_view comment) {
  auto out = open_text(path);
  write_comment(out, comment);
  out << "# sample_rate=" << manifest.sample_rate << "\n";
  for (const auto& e : manifest.entries) {
    if (e.audio_path.empty()) {
      throw Error(ErrorKind::kFormat, "manifest entry has empty audio_path");
    }
    out << e.audio_path << '\t' << e.alignment_path.value_or("-") << '\t';
    if (e.speaker_id) {
      out << *e.speaker_id;
    } else {
      out << '-';
    }
    out << '\n';
  }
}

int latent_frame_count(int num_samples, const FrameGeometry& geometry) {
  if (num_samples < geometry.receptive_field) return 0;
  return (num_samples - geometry.receptive_field) / geometry.stride + 1;
}

std::vector<int> frame_labels(const std::vector<int>& sample_labels,
                              const FrameGeometry& geometry) {
  const int frames =
      latent_frame_count(static_cast<int>(sample_labels.size()), geometry);
  std::vector<int> out(frames);
  for (int t = 0; t < frames; ++t) {
    out[t] = sample_labels[t * geometry.stride + geometry.receptive_field / 2];
  }
  return out;
}

std::pair<double, double> class_formants(int phoneme_class) {
  static constexpr std::pair<double, double> kTable[] = {
      {300, 700},  {800, 2400}, {500, 1500}, {300, 2200},
      {700, 1100}, {400, 1900}, {900, 1600}, {600, 2800},
  };
  if (phoneme_class >= 0 && phoneme_class < 8) return kTable[phoneme_class];
  // Low-discrepancy spread for larger inventories.
  const double a = std::fmod(phoneme_class * 0.6180339887, 1.0);
  const double b = std::fmod(phoneme_class * 0.3819660113 + 0.5, 1.0);
  return {300.0 + 600.0 * a, 1000.0 + 2000.0 * b};
}

namespace {

struct SpeakerVoice {
  double f0;
  double gain;
  double formant_scale;
};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

void synthesize_segment(int phoneme_class, const SpeakerVoice& voice,
                        const CorpusOptions& options, std::mt19937_64& rng,
                        std::vector<double>& out, int length) {
  const double f0 = voice.f0 * (1.0 + uniform(rng, -options.f0_jitter,
                                              options.f0_jitter));
  auto [f1, f2] = class_formants(phoneme_class);
  f1 *= voice.formant_scale;
  f2 *= voice.formant_scale;
  const double nyquist_limit =
      std::min(5000.0, 0.45 * options.sample_rate);
  const int harmonics = std::max(1, static_cast<int>(nyquist_limit / f0));

  std::vector<double> amp(harmonics), phase(harmonics);
  double energy = 0.0;
  for (int h = 0; h < harmonics; ++h) {
    const double f = (h + 1) * f0;
    const double d1 = (f - f1) / 120.0;
    const double d2 = (f - f2) / 180.0;
    amp[h] = std::exp(-0.5 * d1 * d1) + 0.7 * std::exp(-0.5 * d2 * d2) + 0.01;
    phase[h] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    energy += amp[h] * amp[h];
  }
  const double scale = voice.gain * 0.35 / std::sqrt(energy / 2.0);
  const int fade = std::max(1, options.sample_rate * 4 / 1000);
  std::normal_distribution<double> noise(0.0, options.noise_std);
  const double w = 2.0 * std::numbers::pi * f0 / options.sample_rate;

  for (int n = 0; n < length; ++n) {
    double s = 0.0;
    for (int h = 0; h < harmonics; ++h) {
      s += amp[h] * std::sin(w * (h + 1) * n + phase[h]);
    }
    double env = 1.0;
    const int edge = std::min(n, length - 1 - n);
    if (edge < fade) {
      env = 0.5 - 0.5 * std::cos(std::numbers::pi * (edge + 0.5) / fade);
    }
    const double v = scale * env * s + noise(rng);
    out.push_back(std::clamp(v, -1.0, 1.0));
  }
}

}  // namespace

SyntheticCorpus generate_synthetic_corpus(int n_utterances, int n_classes,
                                          uint64_t seed,
                                          const CorpusOptions& options) {
  if (n_classes < 2) {
    throw Error(ErrorKind::kInputRange, "n_classes must be >= 2");
  }
  if (n_utterances < 1) {
    throw Error(ErrorKind::kInputRange, "n_utterances must be >= 1");
  }
  if (options.n_speakers < 1) {
    throw Error(ErrorKind::kInputRange, "n_speakers must be >= 1");
  }

  std::vector<SpeakerVoice> voices(options.n_speakers);
  for (int s = 0; s < options.n_speakers; ++s) {
    std::mt19937_64 rng(derive_seed(seed, 1, s));
    voices[s].f0 = uniform(rng, options.f0_min, options.f0_max);
    voices[s].gain = uniform(rng, options.gain_min, options.gain_max);
    voices[s].formant_scale =
        1.0 + uniform(rng, -options.formant_scale_spread,
                      options.formant_scale_spread);
  }

  const int min_len =
      std::max(1, static_cast<int>(options.min_segment_ms *
                                   options.sample_rate / 1000.0));
  const int max_len =
      std::max(min_len, static_cast<int>(options.max_segment_ms *
                                         options.sample_rate / 1000.0));
  const double frame_rate =
      static_cast<double>(options.sample_rate) / options.geometry.stride;

  SyntheticCorpus corpus;
  for (int u = 0; u < n_utterances; ++u) {
    std::mt19937_64 rng(derive_seed(seed, 2, u));
    const int speaker =
        std::uniform_int_distribution<int>(0, options.n_speakers - 1)(rng);
    const int target =
        std::max(options.min_utterance_samples, options.geometry.receptive_field);

    Waveform wave;
    wave.sample_rate = options.sample_rate;
    std::vector<int> sample_labels;
    std::vector<SegmentSpan> spans;
    int previous = -1;
    while (wave.size() < target) {
      // Consecutive segments never share a class.
      int label;
      if (previous < 0) {
        label = std::uniform_int_distribution<int>(0, n_classes - 1)(rng);
      } else {
        label = std::uniform_int_distribution<int>(0, n_classes - 2)(rng);
        if (label >= previous) ++label;
      }
      const int length =
          std::uniform_int_distribution<int>(min_len, max_len)(rng);
      const int begin = wave.size();
      synthesize_segment(label, voices[speaker], options, rng, wave.samples,
                         length);
      sample_labels.insert(sample_labels.end(), length, label);
      spans.push_back({begin, wave.size(), label});
      previous = label;
    }

    FrameAlignment alignment;
    alignment.frame_rate = frame_rate;
    alignment.labels = frame_labels(sample_labels, options.geometry);

    corpus.waveforms.push_back(std::move(wave));
    corpus.alignments.push_back(std::move(alignment));
    corpus.speakers.push_back(speaker);
    corpus.segments.push_back(std::move(spans));
  }
  return corpus;
}

}  // namespace vqspeech
