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

#include "vqspeech/config.h"

#include <fstream>
#include <sstream>

#include "vqspeech/common.h"

namespace vqspeech {

const std::vector<ConfigKey>& Config::keys() {
  static const std::vector<ConfigKey> kKeys = {
      {"objective", "vqwav2vec-kmeans", "vqvae | vqwav2vec-kmeans | vqwav2vec-gumbel"},
      {"seed", "1", "seed for initialization, batching and sampling"},
      {"data.manifest", "", "training manifest; empty synthesizes corpus.* in memory"},
      {"data.eval_manifest", "", "evaluation manifest; empty synthesizes a held-out corpus"},
      {"corpus.utterances", "200", "synthetic training utterances"},
      {"corpus.eval_utterances", "50", "synthetic held-out utterances"},
      {"corpus.classes", "8", "synthetic phoneme classes"},
      {"corpus.speakers", "8", "synthetic speakers"},
      {"corpus.sample_rate", "16000", "synthetic sample rate (Hz)"},
      {"corpus.noise", "0.02", "standard deviation of additive white noise"},
      {"corpus.min_length", "12000", "minimum synthetic utterance length (samples)"},
      {"encoder.preset", "desk", "desk (4x64) | paper (8x512)"},
      {"encoder.activation", "silu", "silu | relu | tanh | identity"},
      {"encoder.extra_downsample", "1", "1 | 2: extra stride-2 layer after the preset"},
      {"quantizer.K", "32", "codewords per group"},
      {"quantizer.G", "2", "groups"},
      {"quantizer.beta", "0.25", "commitment weight"},
      {"quantizer.tau_start", "2.0", "initial Gumbel temperature"},
      {"quantizer.tau_end", "0.5", "final Gumbel temperature"},
      {"quantizer.tau_decay", "0", "per-update temperature factor; 0 reaches tau_end at the last update"},
      {"decoder.channels", "32", "residual channels of the reconstruction decoder"},
      {"decoder.kernel", "2", "causal kernel size"},
      {"decoder.dilations", "1,2,4,8,16", "one residual layer per dilation"},
      {"decoder.use_speaker", "false", "add a speaker embedding to the conditioning"},
      {"decoder.n_speakers", "8", "speaker embedding rows"},
      {"context.channels", "64", "aggregator channels"},
      {"context.layers", "3", "aggregator layers"},
      {"context.kernel", "3", "aggregator causal kernel size"},
      {"context.steps", "6", "prediction horizon in frames"},
      {"context.distractors", "10", "distractors per prediction"},
      {"context.lambda", "1.0", "distractor term weight"},
      {"context.targets", "quantized", "quantized | dense prediction targets"},
      {"context.sampling", "utterance", "utterance | window distractor sampling"},
      {"context.distractor_form", "log", "log (log-sigmoid) | sigmoid (as printed)"},
      {"train.updates", "300", "parameter updates"},
      {"train.batch_size", "4", "segments per update"},
      {"train.segment_length", "4800", "cropped segment length (samples)"},
      {"train.optimizer", "adam", "adam | sgd"},
      {"train.schedule", "warmup-cosine", "cosine | warmup-cosine"},
      {"train.lr_init", "1e-7", "learning rate at update 0 (warmup start)"},
      {"train.lr_peak", "2e-3", "learning rate after warmup"},
      {"train.lr_final", "1e-4", "learning rate at the last update"},
      {"train.warmup", "20", "warmup updates"},
      {"train.diversity_weight", "0.1", "weight of the codebook diversity penalty"},
      {"train.codebook_init", "data", "data (codewords drawn from encoder frames at update 0) | uniform"},
      {"train.kmeans_diversity", "false", "apply the penalty to soft k-means assignments"},
      {"train.codebook_restart", "false", "re-seed k-means codewords unused in a batch from that batch's frames"},
      {"eval.triplets", "10000", "ABX triplets per mode"},
      {"eval.mode", "pooled", "within-speaker | across-speaker | pooled | all (abx command only)"},
      {"eval.features", "quantized", "quantized | dense"},
      {"eval.per_group", "false", "co-occurrence over per-group indices instead of G-tuples"},
      {"sweep.codebooks", "4x8,8x8,320x2,512x1", "comma-separated KxG codebook shapes"},
  };
  return kKeys;
}

std::string Config::valid_keys() {
  std::string out;
  for (const auto& k : keys()) {
    if (!out.empty()) out += ", ";
    out += k.name;
  }
  return out;
}

Config::Config() {
  for (const auto& k : keys()) values_[k.name] = k.default_value;
}

void Config::set(std::string_view key, std::string_view value) {
  auto it = values_.find(key);
  if (it == values_.end()) {
    throw Error(ErrorKind::kConfig, "unknown key '" + std::string(key) +
                                        "'; valid keys: " + valid_keys());
  }
  it->second = std::string(value);
}

void Config::apply_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw Error(ErrorKind::kConfig,
                "expected key=value, got '" + std::string(assignment) + "'");
  }
  set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

void Config::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kPath, "cannot open config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  load_text(buffer.str(), path.string());
}

void Config::load_text(std::string_view text, std::string_view origin) {
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorKind::kConfig, std::string(origin) + ":" +
                                          std::to_string(line_no) +
                                          ": expected key=value");
    }
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

const std::string& Config::get(std::string_view key) const {
  auto it = values_.find(key);
  if (it == values_.end()) {
    throw Error(ErrorKind::kConfig, "unknown key '" + std::string(key) +
                                        "'; valid keys: " + valid_keys());
  }
  return it->second;
}

namespace {

[[noreturn]] void bad_value(std::string_view key, const std::string& value,
                            std::string_view expected) {
  throw Error(ErrorKind::kConfig, "key '" + std::string(key) + "' expects " +
                                      std::string(expected) + ", got '" + value +
                                      "'");
}

}  // namespace

int Config::get_int(std::string_view key) const {
  const int64_t v = get_int64(key);
  if (v < INT32_MIN || v > INT32_MAX) bad_value(key, get(key), "a 32-bit integer");
  return static_cast<int>(v);
}

int64_t Config::get_int64(std::string_view key) const {
  const std::string& v = get(key);
  try {
    size_t used = 0;
    const long long out = std::stoll(v, &used);
    if (used != v.size()) bad_value(key, v, "an integer");
    return out;
  } catch (const std::logic_error&) {
    bad_value(key, v, "an integer");
  }
}

double Config::get_double(std::string_view key) const {
  const std::string& v = get(key);
  try {
    size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) bad_value(key, v, "a number");
    return out;
  } catch (const std::logic_error&) {
    bad_value(key, v, "a number");
  }
}

bool Config::get_bool(std::string_view key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v, "true or false");
}

std::vector<int> Config::get_int_list(std::string_view key) const {
  const std::string& v = get(key);
  std::vector<int> out;
  std::istringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) bad_value(key, v, "a comma-separated integer list");
    } catch (const std::logic_error&) {
      bad_value(key, v, "a comma-separated integer list");
    }
  }
  if (out.empty()) bad_value(key, v, "a non-empty integer list");
  return out;
}

std::string Config::canonical() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

uint64_t Config::hash() const { return fnv1a64(canonical()); }

std::string provenance(const Config& config) {
  return "vqspeech " + std::string(kVersion) + " config_hash=" +
         hex64(config.hash()) + " seed=" + config.get("seed");
}

}  // namespace vqspeech
