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

#include "vqspeech/objectives.h"

#include <cmath>
#include <random>
#include <string>

namespace vqspeech {

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid(double x) {
  // log sigma(x) = -softplus(-x)
  return -(std::max(-x, 0.0) + std::log1p(std::exp(-std::abs(x))));
}

DecoderConfig DecoderConfig::desk(int condition_dim, int channels) {
  DecoderConfig config;
  config.channels = channels;
  config.condition_dim = condition_dim;
  for (int d : {1, 2, 4, 8, 16}) config.layers.push_back({channels, 2, d});
  return config;
}

void DecoderConfig::validate() const {
  if (channels < 1 || condition_dim < 1 || output_levels < 2) {
    throw Error(ErrorKind::kConfig, "decoder needs positive channels and dimensions");
  }
  for (const auto& l : layers) {
    if (l.channels != channels || l.kernel < 1 || l.dilation < 1) {
      throw Error(ErrorKind::kConfig,
                  "decoder layers need kernel >= 1, dilation >= 1 and " +
                      std::to_string(channels) + " channels");
    }
  }
  if (use_speaker && n_speakers < 1) {
    throw Error(ErrorKind::kConfig, "speaker conditioning needs n_speakers >= 1");
  }
}

namespace {

Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double a,
                      std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-a, a);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace

DecoderParameters DecoderParameters::init(const DecoderConfig& config,
                                          uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  DecoderParameters p;
  const int c = config.channels;
  p.input = ConvParameters::uniform(1, c, 1, rng);
  for (const auto& l : config.layers) {
    p.layers.push_back(ConvParameters::uniform(c, c, l.kernel, rng));
  }
  p.cond_weight = uniform_matrix(config.condition_dim, c,
                                 1.0 / std::sqrt(config.condition_dim), rng);
  p.cond_bias = RowVector::Zero(c);
  p.speaker_embedding = config.use_speaker
                            ? uniform_matrix(config.n_speakers, c, 0.1, rng)
                            : Matrix(0, c);
  p.out_weight = uniform_matrix(c, config.output_levels, 1.0 / std::sqrt(c), rng);
  p.out_bias = RowVector::Zero(config.output_levels);
  return p;
}

DecoderParameters DecoderParameters::zeros(const DecoderConfig& config) {
  DecoderParameters p;
  const int c = config.channels;
  p.input = ConvParameters::zeros(1, c, 1);
  for (const auto& l : config.layers) {
    p.layers.push_back(ConvParameters::zeros(c, c, l.kernel));
  }
  p.cond_weight = Matrix::Zero(config.condition_dim, c);
  p.cond_bias = RowVector::Zero(c);
  p.speaker_embedding = Matrix::Zero(config.use_speaker ? config.n_speakers : 0, c);
  p.out_weight = Matrix::Zero(c, config.output_levels);
  p.out_bias = RowVector::Zero(config.output_levels);
  return p;
}

namespace {

struct DecoderTrace {
  std::vector<int> targets;
  std::vector<int> frame_of;
  Matrix input;                 // T x 1, previous sample (companded)
  std::vector<Matrix> hidden;   // input to each residual layer, then final
  std::vector<Matrix> pre;      // pre-activation of each residual layer
  Matrix logits;
};

void check_decoder_inputs(const Waveform& wave, const Matrix& z_q,
                          int frame_stride, std::optional<int> speaker,
                          const DecoderParameters& params,
                          const DecoderConfig& config) {
  config.validate();
  wave.validate();
  if (frame_stride < 1) throw Error(ErrorKind::kConfig, "frame stride must be >= 1");
  if (z_q.rows() < 1 || z_q.cols() != config.condition_dim) {
    throw Error(ErrorKind::kShape,
                "decoder expects T x " + std::to_string(config.condition_dim) +
                    " latents with T >= 1");
  }
  if (params.layers.size() != config.layers.size()) {
    throw Error(ErrorKind::kShape, "decoder parameters do not match config");
  }
  if (config.use_speaker) {
    if (!speaker || *speaker < 0 || *speaker >= config.n_speakers) {
      throw Error(ErrorKind::kRange,
                  "speaker id " + (speaker ? std::to_string(*speaker) : "<none>") +
                      " outside [0, " + std::to_string(config.n_speakers) + ")");
    }
  }
}

DecoderTrace decoder_forward(const Waveform& wave, const Matrix& z_q,
                             int frame_stride, std::optional<int> speaker,
                             const DecoderParameters& params,
                             const DecoderConfig& config) {
  check_decoder_inputs(wave, z_q, frame_stride, speaker, params, config);
  const int T = wave.size();
  const int frames = static_cast<int>(z_q.rows());
  const int levels = config.output_levels;

  DecoderTrace tr;
  tr.targets = mu_law_encode(wave, levels).levels;
  tr.input = Matrix::Zero(T, 1);
  for (int t = 1; t < T; ++t) {
    tr.input(t, 0) = 2.0 * tr.targets[t - 1] / (levels - 1) - 1.0;
  }
  tr.frame_of.resize(T);
  for (int t = 0; t < T; ++t) tr.frame_of[t] = std::min(t / frame_stride, frames - 1);

  Matrix cond_frames = z_q * params.cond_weight;
  cond_frames.rowwise() += params.cond_bias;
  if (config.use_speaker) {
    cond_frames.rowwise() += params.speaker_embedding.row(*speaker);
  }
  Matrix cond(T, config.channels);
  for (int t = 0; t < T; ++t) cond.row(t) = cond_frames.row(tr.frame_of[t]);

  Matrix h = causal_conv_forward(tr.input, params.input, 1);
  for (size_t l = 0; l < config.layers.size(); ++l) {
    Matrix a = causal_conv_forward(h, params.layers[l], config.layers[l].dilation);
    a += cond;
    Matrix next = h + activate(a, config.activation);
    tr.hidden.push_back(std::move(h));
    tr.pre.push_back(std::move(a));
    h = std::move(next);
  }
  tr.logits = h * params.out_weight;
  tr.logits.rowwise() += params.out_bias;
  tr.hidden.push_back(std::move(h));
  return tr;
}

}  // namespace

Matrix decoder_logits(const Waveform& wave, const Matrix& z_q, int frame_stride,
                      std::optional<int> speaker, const DecoderParameters& params,
                      const DecoderConfig& config) {
  return decoder_forward(wave, z_q, frame_stride, speaker, params, config).logits;
}

ReconstructionResult reconstruction_loss(const Waveform& wave,
                                         const Matrix& z_q, int frame_stride,
                                         std::optional<int> speaker,
                                         const DecoderParameters& params,
                                         const DecoderConfig& config) {
  DecoderTrace tr = decoder_forward(wave, z_q, frame_stride, speaker, params, config);
  const int T = wave.size();

  // Log-softmax in place; the logits become d(nll)/d(logits).
  Matrix& grad_logits = tr.logits;
  double nll = 0.0;
  for (int t = 0; t < T; ++t) {
    auto row = grad_logits.row(t);
    const double m = row.maxCoeff();
    row.array() -= m;
    const double log_z = std::log(row.array().exp().sum());
    nll -= row[tr.targets[t]] - log_z;
    row = (row.array() - log_z).exp().matrix();
    row[tr.targets[t]] -= 1.0;
  }
  grad_logits /= static_cast<double>(T);

  ReconstructionResult out;
  out.nll = nll / T;
  out.grads = DecoderParameters::zeros(config);
  DecoderParameters& g = out.grads;

  g.out_weight.noalias() = tr.hidden.back().transpose() * grad_logits;
  g.out_bias = grad_logits.colwise().sum();
  Matrix grad_h = grad_logits * params.out_weight.transpose();
  Matrix grad_cond = Matrix::Zero(T, config.channels);
  for (size_t l = config.layers.size(); l-- > 0;) {
    const Matrix grad_a =
        grad_h.cwiseProduct(activation_derivative(tr.pre[l], config.activation));
    grad_cond += grad_a;
    grad_h += causal_conv_backward(tr.hidden[l], grad_a, params.layers[l],
                                   config.layers[l].dilation, g.layers[l]);
  }
  causal_conv_backward(tr.input, grad_h, params.input, 1, g.input);

  Matrix grad_frames = Matrix::Zero(z_q.rows(), config.channels);
  for (int t = 0; t < T; ++t) grad_frames.row(tr.frame_of[t]) += grad_cond.row(t);
  g.cond_weight.noalias() = z_q.transpose() * grad_frames;
  g.cond_bias = grad_frames.colwise().sum();
  if (config.use_speaker) {
    g.speaker_embedding.row(*speaker) = grad_frames.colwise().sum();
  }
  out.grad_z_q = grad_frames * params.cond_weight.transpose();
  return out;
}

AggregatorConfig AggregatorConfig::desk(int input_dim, int channels,
                                        int n_layers, int kernel) {
  AggregatorConfig config;
  config.input_dim = input_dim;
  for (int i = 0; i < n_layers; ++i) config.layers.push_back({channels, kernel, 1});
  return config;
}

void AggregatorConfig::validate() const {
  if (input_dim < 1) throw Error(ErrorKind::kConfig, "aggregator input_dim must be >= 1");
  for (const auto& l : layers) {
    if (l.channels < 1 || l.kernel < 1 || l.dilation < 1) {
      throw Error(ErrorKind::kConfig,
                  "aggregator layers need channels, kernel, dilation >= 1");
    }
  }
}

AggregatorParameters AggregatorParameters::init(const AggregatorConfig& config,
                                                uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  AggregatorParameters p;
  int in = config.input_dim;
  for (const auto& l : config.layers) {
    p.layers.push_back(ConvParameters::scaled_uniform(
        in, l.channels, l.kernel, init_gain(config.activation), rng));
    in = l.channels;
  }
  return p;
}

AggregatorParameters AggregatorParameters::zeros(const AggregatorConfig& config) {
  AggregatorParameters p;
  int in = config.input_dim;
  for (const auto& l : config.layers) {
    p.layers.push_back(ConvParameters::zeros(in, l.channels, l.kernel));
    in = l.channels;
  }
  return p;
}

ContextFeatures aggregate_context(const Matrix& input,
                                  const AggregatorParameters& params,
                                  const AggregatorConfig& config,
                                  AggregatorTrace* trace) {
  config.validate();
  if (params.layers.size() != config.layers.size()) {
    throw Error(ErrorKind::kShape, "aggregator parameters do not match config");
  }
  if (trace) {
    trace->inputs.clear();
    trace->pre_activations.clear();
  }
  Matrix h = input;
  const size_t n = config.layers.size();
  for (size_t l = 0; l < n; ++l) {
    Matrix z = causal_conv_forward(h, params.layers[l], config.layers[l].dilation);
    Matrix next = l + 1 < n ? activate(z, config.activation) : z;
    if (trace) {
      trace->inputs.push_back(std::move(h));
      trace->pre_activations.push_back(std::move(z));
    }
    h = std::move(next);
  }
  return {std::move(h)};
}

Matrix aggregate_backward(const Matrix& grad_context, const AggregatorTrace& trace,
                          const AggregatorParameters& params,
                          const AggregatorConfig& config,
                          AggregatorParameters& grad) {
  const size_t n = config.layers.size();
  if (trace.inputs.size() != n) {
    throw Error(ErrorKind::kState, "aggregator trace is missing saved activations");
  }
  Matrix g = grad_context;
  for (size_t l = n; l-- > 0;) {
    if (l + 1 < n) {
      g = g.cwiseProduct(activation_derivative(trace.pre_activations[l], config.activation));
    }
    g = causal_conv_backward(trace.inputs[l], g, params.layers[l],
                             config.layers[l].dilation, grad.layers[l]);
  }
  return g;
}

StepProjections StepProjections::init(int steps, int context_dim, int target_dim,
                                      uint64_t seed) {
  std::mt19937_64 rng(seed);
  StepProjections p;
  for (int k = 0; k < steps; ++k) {
    p.weight.push_back(uniform_matrix(context_dim, target_dim,
                                      1.0 / std::sqrt(context_dim), rng));
    p.bias.push_back(RowVector::Zero(target_dim));
  }
  return p;
}

StepProjections StepProjections::zeros(int steps, int context_dim, int target_dim) {
  StepProjections p;
  for (int k = 0; k < steps; ++k) {
    p.weight.push_back(Matrix::Zero(context_dim, target_dim));
    p.bias.push_back(RowVector::Zero(target_dim));
  }
  return p;
}

DistractorTable sample_distractors(int frames, const ContrastiveConfig& config,
                                   uint64_t seed) {
  if (config.steps < 1 || config.n_distractors < 1) {
    throw Error(ErrorKind::kConfig, "contrastive loss needs steps >= 1 and n_distractors >= 1");
  }
  if (frames <= config.steps) {
    throw Error(ErrorKind::kLength,
                "sequence of " + std::to_string(frames) +
                    " frames must be longer than the prediction horizon " +
                    std::to_string(config.steps));
  }
  std::mt19937_64 rng(seed);
  DistractorTable table(config.steps);
  for (int k = 1; k <= config.steps; ++k) {
    auto& per_step = table[k - 1];
    per_step.resize(frames - k);
    for (int i = 0; i + k < frames; ++i) {
      const int target = i + k;
      int lo = 0;
      int hi = frames - 1;
      if (config.sampling == DistractorSampling::kWindow) {
        lo = std::max(0, target - config.steps);
        hi = std::min(frames - 1, target + config.steps);
      }
      // Uniform over [lo, hi] without the target, with replacement.
      std::uniform_int_distribution<int> pick(lo, hi - 1);
      auto& out = per_step[i];
      out.resize(config.n_distractors);
      for (int& d : out) {
        d = pick(rng);
        if (d >= target) ++d;
      }
    }
  }
  return table;
}

ContrastiveResult contrastive_loss(const Matrix& targets, const Matrix& context,
                                   const StepProjections& projections,
                                   const ContrastiveConfig& config,
                                   const DistractorTable& distractors) {
  const int T = static_cast<int>(targets.rows());
  const Eigen::Index D = targets.cols();
  const Eigen::Index C = context.cols();
  if (context.rows() != T) {
    throw Error(ErrorKind::kShape, "context and targets differ in length");
  }
  if (T <= config.steps) {
    throw Error(ErrorKind::kLength,
                "sequence of " + std::to_string(T) +
                    " frames must be longer than the prediction horizon " +
                    std::to_string(config.steps));
  }
  if (static_cast<int>(projections.weight.size()) != config.steps ||
      static_cast<int>(distractors.size()) != config.steps) {
    throw Error(ErrorKind::kShape, "need one projection and distractor set per step");
  }

  ContrastiveResult out;
  out.grad_targets = Matrix::Zero(T, D);
  out.grad_context = Matrix::Zero(T, C);
  out.grad_projections = StepProjections::zeros(config.steps, static_cast<int>(C),
                                                static_cast<int>(D));
  for (int k = 1; k <= config.steps; ++k) out.terms += T - k;
  const double inv_terms = 1.0 / out.terms;
  const double neg_weight = config.lambda / config.n_distractors;

  double total = 0.0;
  for (int k = 1; k <= config.steps; ++k) {
    const Matrix& W = projections.weight[k - 1];
    if (W.rows() != C || W.cols() != D) {
      throw Error(ErrorKind::kShape, "step projection has the wrong shape");
    }
    const int n = T - k;
    Matrix pred = context.topRows(n) * W;
    pred.rowwise() += projections.bias[k - 1];
    Matrix grad_pred = Matrix::Zero(n, D);
    for (int i = 0; i < n; ++i) {
      const auto h = pred.row(i);
      const double s_pos = targets.row(i + k).dot(h);
      double term = log_sigmoid(s_pos);
      const double g_pos = -sigmoid(-s_pos) * inv_terms;
      grad_pred.row(i) += g_pos * targets.row(i + k);
      out.grad_targets.row(i + k) += g_pos * h;

      const auto& negs = distractors[k - 1][i];
      if (static_cast<int>(negs.size()) != config.n_distractors) {
        throw Error(ErrorKind::kShape, "distractor table has the wrong size");
      }
      double neg_sum = 0.0;
      for (int j : negs) {
        const double s = targets.row(j).dot(h);
        double g;
        if (config.form == DistractorForm::kLogSigmoid) {
          neg_sum += log_sigmoid(-s);
          g = sigmoid(s);
        } else {
          const double sn = sigmoid(-s);
          neg_sum += sn;
          g = sn * sigmoid(s);
        }
        g *= neg_weight * inv_terms;
        grad_pred.row(i) += g * targets.row(j);
        out.grad_targets.row(j) += g * h;
      }
      term += neg_weight * neg_sum;
      total -= term;
    }
    out.grad_projections.weight[k - 1].noalias() = context.topRows(n).transpose() * grad_pred;
    out.grad_projections.bias[k - 1] = grad_pred.colwise().sum();
    out.grad_context.topRows(n).noalias() += grad_pred * W.transpose();
  }
  out.loss = total * inv_terms;
  return out;
}

ContrastiveResult contrastive_loss(const Matrix& targets, const Matrix& context,
                                   const StepProjections& projections,
                                   const ContrastiveConfig& config,
                                   uint64_t seed) {
  return contrastive_loss(
      targets, context, projections, config,
      sample_distractors(static_cast<int>(targets.rows()), config, seed));
}

}  // namespace vqspeech
