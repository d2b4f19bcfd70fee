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

#include "cli.h"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>

#include "CLI11.hpp"
#include "vqspeech/config.h"
#include "vqspeech/evaluation.h"
#include "vqspeech/quantizer.h"
#include "vqspeech/signal_io.h"
#include "vqspeech/trainer.h"

namespace vqspeech::cli {

namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string preset;
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = ".";
  std::optional<int64_t> seed;
  int workers = 1;
  std::string checkpoint;
  std::string manifest;
  bool baseline = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--preset", f.preset, "starting configuration: desk, paper-vqvae, paper-vqwav2vec");
  cmd->add_option("--config", f.config_path, "key=value configuration file");
  cmd->add_option("--set", f.overrides, "override key=value (repeatable)")
      ->allow_extra_args(false);
  cmd->add_option("--out", f.out_dir, "output directory");
  cmd->add_option("--seed", f.seed, "seed (overrides the config)");
  cmd->add_option("--workers", f.workers, "worker threads; 1 is bitwise reproducible")
      ->check(CLI::PositiveNumber);
}

void add_checkpoint(CLI::App* cmd, CommonFlags& f, bool allow_baseline) {
  cmd->add_option("--checkpoint", f.checkpoint, "trained checkpoint");
  if (allow_baseline) {
    cmd->add_flag("--baseline", f.baseline,
                  "evaluate the untrained model (update 0) built from the config instead");
  }
}

// Preset (fresh configs only), file config, then --set overrides in order,
// then --seed.
void apply_flags(Config& config, const CommonFlags& f) {
  if (!f.config_path.empty()) config.load_file(f.config_path);
  for (const auto& o : f.overrides) config.apply_override(o);
  if (f.seed) config.set("seed", std::to_string(*f.seed));
}

Config resolve_config(const CommonFlags& f) {
  Config config = f.preset.empty() ? Config() : preset_config(f.preset);
  apply_flags(config, f);
  return config;
}

fs::path out_dir(const CommonFlags& f) {
  fs::path dir(f.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::kPath, "cannot create " + dir.string() + ": " + ec.message());
  return dir;
}

// Model from --checkpoint (config taken from the checkpoint, flags applied
// on top) or, with --baseline, freshly initialized from the flags.
struct LoadedModel {
  Config config;
  Model model;
};

LoadedModel load_model(const CommonFlags& f) {
  if (f.baseline) {
    if (!f.checkpoint.empty()) {
      throw Error(ErrorKind::kConfig, "--baseline and --checkpoint are exclusive");
    }
    Config config = resolve_config(f);
    return {config, baseline_model(config, dataset_for(config, false))};
  }
  if (f.checkpoint.empty()) throw Error(ErrorKind::kConfig, "--checkpoint is required");
  if (!fs::exists(f.checkpoint)) {
    throw Error(ErrorKind::kPath, "checkpoint " + f.checkpoint + " does not exist");
  }
  Trainer trainer = Trainer::load(f.checkpoint);
  Config config = trainer.config();
  apply_flags(config, f);
  return {config, trainer.model()};
}

std::vector<Utterance> eval_data(const Config& config, const CommonFlags& f) {
  if (!f.manifest.empty()) return load_dataset(f.manifest);
  return dataset_for(config, true);
}

void write_corpus(const fs::path& dir, const SyntheticCorpus& corpus, int sample_rate,
                  const std::string& comment) {
  fs::create_directories(dir);
  DatasetManifest manifest;
  manifest.sample_rate = sample_rate;
  for (size_t i = 0; i < corpus.waveforms.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "utt%04zu", i);
    const std::string wav = std::string(stem) + ".wav";
    const std::string ali = std::string(stem) + ".ali";
    write_waveform(dir / wav, corpus.waveforms[i]);
    write_alignment(dir / ali, corpus.alignments[i], comment);
    manifest.entries.push_back({wav, ali, corpus.speakers[i]});
  }
  write_manifest(dir / "manifest.tsv", manifest, comment);
}

int cmd_synth(const CommonFlags& f, std::ostream& out) {
  const Config config = resolve_config(f);
  const fs::path dir = out_dir(f);
  const std::string comment = provenance(config);
  // Same corpora as the in-memory datasets used by train and abx.
  const auto train = synthetic_dataset(config, false);
  const auto held_out = synthetic_dataset(config, true);
  for (const auto& [name, data] :
       {std::pair{"train", &train}, std::pair{"eval", &held_out}}) {
    SyntheticCorpus corpus;
    for (const auto& u : *data) {
      corpus.waveforms.push_back(u.wave);
      FrameAlignment a;
      a.labels = u.frame_labels;
      a.frame_rate = frame_rate(TrainConfig::from_config(config).model.encoder);
      corpus.alignments.push_back(a);
      corpus.speakers.push_back(u.speaker.value_or(0));
    }
    write_corpus(dir / name, corpus, config.get_int("corpus.sample_rate"), comment);
    out << "wrote " << data->size() << " utterances to " << (dir / name).string() << "\n";
  }
  return kOk;
}

int cmd_train(const CommonFlags& f, std::ostream& out) {
  const Config config = resolve_config(f);
  const fs::path dir = out_dir(f);
  const auto data = f.manifest.empty() ? dataset_for(config, false) : load_dataset(f.manifest);
  Trainer trainer = f.checkpoint.empty() ? Trainer(config) : Trainer::load(f.checkpoint);
  TrainOptions options;
  options.workers = f.workers;
  options.divergence_checkpoint = dir / "checkpoint.diverged.bin";
  const auto log = train(trainer, data, options);
  const std::string comment = provenance(trainer.config());
  write_metrics(dir / "metrics.csv", log, comment);
  trainer.save(dir / "checkpoint.bin");
  {
    std::ofstream cfg(dir / "config.txt");
    cfg << "# " << comment << "\n" << trainer.config().canonical();
    if (!cfg) throw Error(ErrorKind::kIo, "cannot write config.txt");
  }
  if (!log.empty()) {
    out << "trained " << log.size() << " updates; final task_loss=" << log.back().task_loss
        << " perplexity=" << log.back().perplexity << "\n";
  }
  return kOk;
}

int cmd_extract(const CommonFlags& f, std::ostream& out) {
  const LoadedModel lm = load_model(f);
  const fs::path dir = out_dir(f) / "codes";
  fs::create_directories(dir);
  const std::string comment = provenance(lm.config);
  const auto data = eval_data(lm.config, f);
  const double rate = frame_rate(lm.model.config.encoder);
  for (size_t i = 0; i < data.size(); ++i) {
    const Extraction x = extract(lm.model, data[i].wave);
    CodeDump dump;
    dump.K = lm.model.codebook.size();
    dump.G = lm.model.codebook.groups;
    dump.frame_rate = rate;
    dump.indices = x.quantized.indices;
    char name[32];
    std::snprintf(name, sizeof(name), "utt%04zu.codes", i);
    write_codes(dir / name, dump, comment);
  }
  out << "wrote " << data.size() << " code files to " << dir.string() << "\n";
  return kOk;
}

int cmd_abx(const CommonFlags& f, std::ostream& out) {
  const LoadedModel lm = load_model(f);
  const fs::path dir = out_dir(f);
  const auto data = eval_data(lm.config, f);
  const std::string& mode = lm.config.get("eval.mode");
  std::vector<AbxMode> modes;
  if (mode == "all") {
    modes = {AbxMode::kWithinSpeaker, AbxMode::kAcrossSpeaker, AbxMode::kPooled};
  } else {
    modes = {parse_abx_mode(mode)};
  }
  const std::string& features = lm.config.get("eval.features");
  if (features != "quantized" && features != "dense") {
    throw Error(ErrorKind::kConfig, "eval.features must be quantized or dense");
  }
  const auto segments = model_segments(lm.model, data, features == "quantized");
  std::vector<AbxResult> results;
  for (AbxMode m : modes) {
    results.push_back(abx_evaluate(segments, lm.config.get_int64("eval.triplets"),
                                   evaluation_seed(lm.config), m));
    out << abx_mode_name(m) << " ABX error " << results.back().error_rate << "\n";
  }
  write_abx_report(dir / "abx.csv", results, provenance(lm.config));
  return kOk;
}

int cmd_cooccur(const CommonFlags& f, std::ostream& out) {
  const LoadedModel lm = load_model(f);
  const fs::path dir = out_dir(f);
  const auto data = eval_data(lm.config, f);
  const bool per_group = lm.config.get_bool("eval.per_group");
  std::vector<std::pair<int64_t, int>> pairs;
  for (size_t i = 0; i < data.size(); ++i) {
    if (data[i].frame_labels.empty()) {
      throw Error(ErrorKind::kData, "utterance " + std::to_string(i) + " has no alignment");
    }
    const Extraction x = extract(lm.model, data[i].wave);
    auto p = code_label_pairs(x.quantized.indices, lm.model.codebook.size(),
                              data[i].frame_labels, per_group);
    pairs.insert(pairs.end(), p.begin(), p.end());
  }
  const CooccurrenceMatrix m = cooccurrence(pairs);
  const double p = purity(m);
  const std::string comment = provenance(lm.config);
  write_cooccurrence(dir / "cooccurrence.csv", m, comment);
  std::ofstream summary(dir / "cooccurrence_summary.csv");
  summary.precision(17);
  summary << "# " << comment << "\ncodes,frames,purity\n"
          << m.codes.size() << ',' << pairs.size() << ',' << p << '\n';
  if (!summary) throw Error(ErrorKind::kIo, "cannot write cooccurrence_summary.csv");
  out << m.codes.size() << " codes, purity " << p << "\n";
  return kOk;
}

int cmd_sweep(const CommonFlags& f, std::ostream& out) {
  const Config config = resolve_config(f);
  const fs::path dir = out_dir(f);
  const auto shapes = parse_codebook_list(config.get("sweep.codebooks"));
  const auto data = dataset_for(config, false);
  const auto held_out = dataset_for(config, true);
  TrainOptions options;
  options.workers = f.workers;
  const auto rows = sweep_codebooks(config, shapes, data, held_out, options);
  write_sweep_table(dir / "sweep.csv", rows, provenance(config));
  for (const auto& r : rows) {
    out << r.K << "x" << r.G << ": perplexity " << r.final.perplexity << ", ABX error "
        << r.abx_error << "\n";
  }
  return kOk;
}

int cmd_inspect(const CommonFlags& f, std::ostream& out) {
  if (f.checkpoint.empty()) throw Error(ErrorKind::kConfig, "--checkpoint is required");
  if (!fs::exists(f.checkpoint)) {
    throw Error(ErrorKind::kPath, "checkpoint " + f.checkpoint + " does not exist");
  }
  Trainer trainer = Trainer::load(f.checkpoint);
  const Config& c = trainer.config();
  out << "# " << provenance(c) << "\n";
  out << "objective=" << objective_name(trainer.train_config().model.objective) << "\n";
  out << "update=" << trainer.update() << "/" << trainer.train_config().updates << "\n";
  out << "optimizer=" << (trainer.optimizer().kind == OptimizerKind::kAdam ? "adam" : "sgd")
      << " step=" << trainer.optimizer().step << "\n";
  const auto& enc = trainer.train_config().model.encoder;
  out << "receptive_field=" << receptive_field(enc).samples << " frame_rate=" << frame_rate(enc)
      << "\n";
  int64_t total = 0;
  for (const auto& t : parameter_tensors(trainer.model())) {
    out << "tensor " << t.name << " " << t.rows << "x" << t.cols << "\n";
    total += t.size();
  }
  out << "parameters=" << total << "\n";
  return kOk;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"vqspeech: discrete speech representation learning", "vqspeech"};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", std::string(kVersion));

  CommonFlags f;
  struct Command {
    const char* name;
    const char* help;
    bool checkpoint;
    bool baseline;
    bool manifest;
  };
  const Command commands[] = {
      {"synth", "write synthetic train/eval corpora with manifests", false, false, false},
      {"train", "train a model; writes checkpoint.bin and metrics.csv", true, false, true},
      {"extract", "dump discrete codes for a manifest", true, true, true},
      {"abx", "ABX phoneme discrimination report", true, true, true},
      {"cooccur", "latent/phoneme co-occurrence matrix and purity", true, true, true},
      {"sweep", "train and score each sweep.codebooks shape", false, false, false},
      {"inspect", "print checkpoint metadata", true, false, false},
  };
  std::vector<CLI::App*> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    add_common(sub, f);
    if (c.checkpoint) add_checkpoint(sub, f, c.baseline);
    if (c.manifest) sub->add_option("--manifest", f.manifest, "dataset manifest (TSV)");
    subs.push_back(sub);
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return kOk;
  } catch (const CLI::ParseError& e) {
    std::string help = app.help();
    for (auto* sub : subs) {
      if (sub->parsed()) help = sub->help();
    }
    err << "error kind=usage: " << one_line(e.what()) << "\n" << help;
    return kUsage;
  }

  try {
    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "synth") return cmd_synth(f, out);
    if (name == "train") return cmd_train(f, out);
    if (name == "extract") return cmd_extract(f, out);
    if (name == "abx") return cmd_abx(f, out);
    if (name == "cooccur") return cmd_cooccur(f, out);
    if (name == "sweep") return cmd_sweep(f, out);
    return cmd_inspect(f, out);
  } catch (const Error& e) {
    err << "error kind=" << e.kind_name() << ": " << one_line(e.what()) << "\n";
  } catch (const std::exception& e) {
    err << "error kind=internal: " << one_line(e.what()) << "\n";
  }
  return kFailure;
}

}  // namespace vqspeech::cli
