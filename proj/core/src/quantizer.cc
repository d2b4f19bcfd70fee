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

#include "vqspeech/quantizer.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>

namespace vqspeech {

namespace {

void check_dense(const Matrix& z_e, const Codebook& codebook) {
  codebook.validate();
  if (z_e.cols() != codebook.dim) {
    throw Error(ErrorKind::kShape,
                "dense features have dimension " + std::to_string(z_e.cols()) +
                    ", codebook expects " + std::to_string(codebook.dim));
  }
}

CountMatrix count_selections(const IndexMatrix& indices, int K) {
  CountMatrix counts = CountMatrix::Zero(indices.cols(), K);
  for (Eigen::Index t = 0; t < indices.rows(); ++t) {
    for (Eigen::Index g = 0; g < indices.cols(); ++g) ++counts(g, indices(t, g));
  }
  return counts;
}

// Row-wise softmax, shifted by the row maximum.
void softmax_rows(Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

}  // namespace

Codebook Codebook::init(int K, int G, int D, uint64_t seed) {
  Codebook cb = zeros(K, G, D);
  const double a = 1.0 / std::sqrt(static_cast<double>(cb.sub_dim()));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-a, a);
  for (Eigen::Index i = 0; i < cb.entries.size(); ++i) cb.entries.data()[i] = dist(rng);
  return cb;
}

Codebook Codebook::zeros(int K, int G, int D) {
  if (K < 1 || G < 1 || D < 1 || D % G != 0) {
    throw Error(ErrorKind::kShape,
                "codebook needs K, G, D >= 1 and D divisible by G (K=" +
                    std::to_string(K) + " G=" + std::to_string(G) +
                    " D=" + std::to_string(D) + ")");
  }
  Codebook cb;
  cb.groups = G;
  cb.dim = D;
  cb.entries = Matrix::Zero(K, D / G);
  return cb;
}

void Codebook::validate() const {
  if (groups < 1 || dim < 1 || dim % groups != 0) {
    throw Error(ErrorKind::kShape, "codebook dimension " + std::to_string(dim) +
                                       " is not divisible by " +
                                       std::to_string(groups) + " groups");
  }
  if (entries.rows() < 1 || entries.cols() != dim / groups) {
    throw Error(ErrorKind::kShape, "codebook entries must be K x (D/G)");
  }
}

RowVector Codebook::composite(std::span<const int> indices) const {
  if (static_cast<int>(indices.size()) != groups) {
    throw Error(ErrorKind::kShape, "composite needs one index per group");
  }
  const int d = sub_dim();
  RowVector out(dim);
  for (int g = 0; g < groups; ++g) {
    if (indices[g] < 0 || indices[g] >= size()) {
      throw Error(ErrorKind::kRange, "codeword index out of range");
    }
    out.segment(g * d, d) = entries.row(indices[g]);
  }
  return out;
}

Matrix group_reshape(std::span<const double> frame, int groups) {
  const int dim = static_cast<int>(frame.size());
  if (groups < 1 || dim % groups != 0) {
    throw Error(ErrorKind::kShape, "dimension " + std::to_string(dim) +
                                       " is not divisible by " +
                                       std::to_string(groups) + " groups");
  }
  return Eigen::Map<const Matrix>(frame.data(), groups, dim / groups);
}

RowVector group_flatten(const Matrix& grouped) {
  return Eigen::Map<const RowVector>(grouped.data(), grouped.size());
}

QuantizationResult kmeans_select(const Matrix& z_e, const Codebook& codebook) {
  check_dense(z_e, codebook);
  const int T = static_cast<int>(z_e.rows());
  const int G = codebook.groups;
  const int K = codebook.size();
  const int d = codebook.sub_dim();

  QuantizationResult out;
  out.z_q.resize(T, codebook.dim);
  out.indices.resize(T, G);
  for (int t = 0; t < T; ++t) {
    const double* frame = z_e.row(t).data();
    for (int g = 0; g < G; ++g) {
      const double* x = frame + g * d;
      int best = 0;
      double best_dist = std::numeric_limits<double>::infinity();
      for (int k = 0; k < K; ++k) {
        const double* e = codebook.entries.row(k).data();
        double dist = 0.0;
        for (int i = 0; i < d; ++i) {
          const double diff = x[i] - e[i];
          dist += diff * diff;
        }
        if (dist < best_dist) {
          best_dist = dist;
          best = k;
        }
      }
      out.indices(t, g) = best;
      out.z_q.row(t).segment(g * d, d) = codebook.entries.row(best);
    }
  }
  out.selection_counts = count_selections(out.indices, K);
  return out;
}

KMeansLoss kmeans_loss_and_grads(const Matrix& z_e, const Codebook& codebook,
                                 const KMeansConfig& config,
                                 const QuantizationResult& selection) {
  check_dense(z_e, codebook);
  if (selection.z_q.rows() != z_e.rows() || selection.z_q.cols() != z_e.cols()) {
    throw Error(ErrorKind::kShape, "selection does not match dense features");
  }
  const int T = static_cast<int>(z_e.rows());
  const int G = codebook.groups;
  const int d = codebook.sub_dim();
  const double n = static_cast<double>(T) * G;

  KMeansLoss out;
  out.grad_entries = Matrix::Zero(codebook.size(), d);
  const Matrix diff = z_e - selection.z_q;
  const double mean_sq = diff.squaredNorm() / n;
  out.loss = (1.0 + config.beta) * mean_sq;
  out.grad_z_e = (2.0 * config.beta / n) * diff;
  for (int t = 0; t < T; ++t) {
    for (int g = 0; g < G; ++g) {
      out.grad_entries.row(selection.indices(t, g)) -=
          (2.0 / n) * diff.row(t).segment(g * d, d);
    }
  }
  return out;
}

KMeansLoss kmeans_loss_and_grads(const Matrix& z_e, const Codebook& codebook,
                                 const KMeansConfig& config) {
  return kmeans_loss_and_grads(z_e, codebook, config,
                               kmeans_select(z_e, codebook));
}

Matrix straight_through(const Matrix& grad_z_q, const KMeansLoss& kmeans) {
  return grad_z_q + kmeans.grad_z_e;
}

GumbelProjection GumbelProjection::init(int K, int G, int D, uint64_t seed) {
  GumbelProjection p = zeros(K, G, D);
  const double a = 1.0 / std::sqrt(static_cast<double>(D / G));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-a, a);
  for (Eigen::Index i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = dist(rng);
  return p;
}

GumbelProjection GumbelProjection::zeros(int K, int G, int D) {
  if (D % G != 0) {
    throw Error(ErrorKind::kShape, "projection dimension not divisible by G");
  }
  GumbelProjection p;
  p.weight = Matrix::Zero(D, K);
  p.bias = Matrix::Zero(G, K);
  return p;
}

Matrix gumbel_logits(const Matrix& z_e, const GumbelProjection& projection,
                     int groups) {
  const Eigen::Index T = z_e.rows();
  const Eigen::Index D = z_e.cols();
  if (projection.weight.rows() != D || projection.bias.rows() != groups) {
    throw Error(ErrorKind::kShape, "projection does not match dense features");
  }
  const Eigen::Index d = D / groups;
  const Eigen::Index K = projection.weight.cols();
  Matrix logits(T * groups, K);
  for (Eigen::Index g = 0; g < groups; ++g) {
    const Matrix block = z_e.middleCols(g * d, d) * projection.weight.middleRows(g * d, d);
    for (Eigen::Index t = 0; t < T; ++t) {
      logits.row(t * groups + g) = block.row(t) + projection.bias.row(g);
    }
  }
  return logits;
}

QuantizationResult gumbel_select_from_logits(const Matrix& logits,
                                             const Codebook& codebook,
                                             const GumbelConfig& config,
                                             uint64_t seed) {
  codebook.validate();
  if (!(config.temperature > 0)) {
    throw Error(ErrorKind::kInputRange, "Gumbel temperature must be positive");
  }
  const int G = codebook.groups;
  const int K = codebook.size();
  const int d = codebook.sub_dim();
  if (logits.cols() != K || logits.rows() % G != 0) {
    throw Error(ErrorKind::kShape, "logits must be (T * G) x K");
  }
  const int T = static_cast<int>(logits.rows() / G);

  GumbelState state;
  state.logits = logits;
  state.temperature = config.temperature;
  state.hard = config.hard;
  state.noise = Matrix::Zero(logits.rows(), K);
  if (config.noise_scale != 0.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    for (Eigen::Index i = 0; i < state.noise.size(); ++i) {
      double u = uniform(rng);
      if (u <= 0.0) u = std::numeric_limits<double>::min();
      state.noise.data()[i] = -config.noise_scale * std::log(-std::log(u));
    }
  }
  state.probs = (logits + state.noise) / config.temperature;
  softmax_rows(state.probs);

  QuantizationResult out;
  out.z_q.resize(T, codebook.dim);
  out.indices.resize(T, G);
  for (int t = 0; t < T; ++t) {
    for (int g = 0; g < G; ++g) {
      const auto p = state.probs.row(t * G + g);
      Eigen::Index best = 0;
      for (Eigen::Index k = 1; k < K; ++k) {
        if (p[k] > p[best]) best = k;
      }
      out.indices(t, g) = static_cast<int>(best);
      if (config.hard) {
        out.z_q.row(t).segment(g * d, d) = codebook.entries.row(best);
      } else {
        out.z_q.row(t).segment(g * d, d) = p * codebook.entries;
      }
    }
  }
  out.selection_counts = count_selections(out.indices, K);
  out.gumbel = std::move(state);
  return out;
}

QuantizationResult gumbel_select(const Matrix& z_e, const Codebook& codebook,
                                 const GumbelProjection& projection,
                                 const GumbelConfig& config, uint64_t seed) {
  check_dense(z_e, codebook);
  return gumbel_select_from_logits(
      gumbel_logits(z_e, projection, codebook.groups), codebook, config, seed);
}

GumbelGradients gumbel_backward(const Matrix& grad_z_q,
                                const QuantizationResult& forward,
                                const Matrix& z_e, const Codebook& codebook,
                                const GumbelProjection& projection,
                                const Matrix* grad_probs) {
  if (!forward.gumbel) {
    throw Error(ErrorKind::kState,
                "Gumbel backward needs the probabilities saved by the forward pass");
  }
  const GumbelState& state = *forward.gumbel;
  const int G = codebook.groups;
  const int K = codebook.size();
  const int d = codebook.sub_dim();
  const int T = static_cast<int>(z_e.rows());
  if (grad_z_q.rows() != T || grad_z_q.cols() != codebook.dim ||
      state.probs.rows() != static_cast<Eigen::Index>(T) * G) {
    throw Error(ErrorKind::kShape, "Gumbel backward shapes do not match forward");
  }

  GumbelGradients out;
  out.grad_logits.resize(static_cast<Eigen::Index>(T) * G, K);
  out.grad_entries = Matrix::Zero(K, d);
  out.grad_projection = GumbelProjection::zeros(K, G, codebook.dim);
  out.grad_z_e = Matrix::Zero(T, codebook.dim);

  for (int t = 0; t < T; ++t) {
    for (int g = 0; g < G; ++g) {
      const Eigen::Index r = static_cast<Eigen::Index>(t) * G + g;
      const auto p = state.probs.row(r);
      const auto upstream = grad_z_q.row(t).segment(g * d, d);
      // d/dp_k of <upstream, sum_k p_k e_k>
      RowVector grad_p = upstream * codebook.entries.transpose();
      if (grad_probs) grad_p += grad_probs->row(r);
      const double mean = grad_p.dot(p);
      out.grad_logits.row(r) =
          (p.array() * (grad_p.array() - mean)).matrix() / state.temperature;
      out.grad_entries.noalias() += p.transpose() * upstream;
    }
  }
  for (int g = 0; g < G; ++g) {
    Matrix grad_l(T, K);
    for (int t = 0; t < T; ++t) grad_l.row(t) = out.grad_logits.row(t * G + g);
    out.grad_projection.weight.middleRows(g * d, d).noalias() =
        z_e.middleCols(g * d, d).transpose() * grad_l;
    out.grad_projection.bias.row(g) = grad_l.colwise().sum();
    out.grad_z_e.middleCols(g * d, d).noalias() =
        grad_l * projection.weight.middleRows(g * d, d).transpose();
  }
  return out;
}

DiversityPenalty diversity_penalty(const Matrix& average_probs) {
  const Eigen::Index G = average_probs.rows();
  const Eigen::Index K = average_probs.cols();
  if (G < 1 || K < 1) throw Error(ErrorKind::kShape, "empty probability matrix");
  for (Eigen::Index g = 0; g < G; ++g) {
    const double sum = average_probs.row(g).sum();
    if (!(std::abs(sum - 1.0) <= 1e-6)) {
      throw Error(ErrorKind::kInputRange,
                  "average probabilities of group " + std::to_string(g) +
                      " sum to " + std::to_string(sum));
    }
  }
  constexpr double kFloor = 1e-10;
  const double scale = 1.0 / static_cast<double>(G * K);
  DiversityPenalty out;
  out.grad.resize(G, K);
  for (Eigen::Index g = 0; g < G; ++g) {
    for (Eigen::Index k = 0; k < K; ++k) {
      double p = average_probs(g, k);
      if (p <= 0.0) {
        p = kFloor;
        ++out.clamped;
      }
      const double log_p = std::log(p);
      out.loss += p * log_p;
      out.grad(g, k) = scale * (log_p + 1.0);
    }
  }
  out.loss *= scale;
  return out;
}

Matrix average_group_probs(const Matrix& probs, int groups) {
  if (groups < 1 || probs.rows() % groups != 0 || probs.rows() == 0) {
    throw Error(ErrorKind::kShape, "probabilities must be (T * G) x K");
  }
  const Eigen::Index T = probs.rows() / groups;
  Matrix avg = Matrix::Zero(groups, probs.cols());
  for (Eigen::Index t = 0; t < T; ++t) {
    for (int g = 0; g < groups; ++g) avg.row(g) += probs.row(t * groups + g);
  }
  return avg / static_cast<double>(T);
}

Matrix kmeans_soft_assignment(const Matrix& z_e, const Codebook& codebook) {
  check_dense(z_e, codebook);
  const int T = static_cast<int>(z_e.rows());
  const int G = codebook.groups;
  const int d = codebook.sub_dim();
  Matrix probs(static_cast<Eigen::Index>(T) * G, codebook.size());
  const RowVector norms = codebook.entries.rowwise().squaredNorm().transpose();
  for (int t = 0; t < T; ++t) {
    for (int g = 0; g < G; ++g) {
      const auto x = z_e.row(t).segment(g * d, d);
      probs.row(t * G + g) =
          -(norms - 2.0 * x * codebook.entries.transpose()).array() - x.squaredNorm();
    }
  }
  softmax_rows(probs);
  return probs;
}

Matrix kmeans_soft_assignment_backward(const Matrix& grad_probs,
                                       const Matrix& probs, const Matrix& z_e,
                                       const Codebook& codebook,
                                       Matrix& grad_entries) {
  const int T = static_cast<int>(z_e.rows());
  const int G = codebook.groups;
  const int d = codebook.sub_dim();
  Matrix grad_z_e = Matrix::Zero(T, codebook.dim);
  for (int t = 0; t < T; ++t) {
    for (int g = 0; g < G; ++g) {
      const Eigen::Index r = static_cast<Eigen::Index>(t) * G + g;
      const auto p = probs.row(r);
      const double mean = grad_probs.row(r).dot(p);
      // Gradient with respect to the score s_k = -||x - e_k||^2.
      const RowVector grad_s = (p.array() * (grad_probs.row(r).array() - mean)).matrix();
      const auto x = z_e.row(t).segment(g * d, d);
      // ds_k/dx = -2 (x - e_k), ds_k/de_k = 2 (x - e_k)
      grad_z_e.row(t).segment(g * d, d) =
          -2.0 * (grad_s.sum() * x - grad_s * codebook.entries);
      for (int k = 0; k < codebook.size(); ++k) {
        grad_entries.row(k) += 2.0 * grad_s[k] * (x - codebook.entries.row(k));
      }
    }
  }
  return grad_z_e;
}

UsageStats usage_stats_from_counts(const CountMatrix& counts) {
  UsageStats out;
  for (Eigen::Index g = 0; g < counts.rows(); ++g) {
    const double total = static_cast<double>(counts.row(g).sum());
    if (total <= 0) {
      throw Error(ErrorKind::kData, "usage statistics need at least one frame");
    }
    double h = 0.0;
    int dead = 0;
    for (Eigen::Index k = 0; k < counts.cols(); ++k) {
      const int64_t c = counts(g, k);
      if (c == 0) {
        ++dead;
        continue;
      }
      const double p = c / total;
      h -= p * std::log(p);
    }
    out.entropy.push_back(h);
    out.perplexity.push_back(std::exp(h));
    out.dead_codewords.push_back(dead);
  }
  return out;
}

UsageStats codebook_usage_stats(std::span<const QuantizationResult> results) {
  if (results.empty()) {
    throw Error(ErrorKind::kData, "usage statistics need at least one frame");
  }
  CountMatrix total = results.front().selection_counts;
  for (size_t i = 1; i < results.size(); ++i) {
    if (results[i].selection_counts.rows() != total.rows() ||
        results[i].selection_counts.cols() != total.cols()) {
      throw Error(ErrorKind::kShape, "selection counts have mismatched shapes");
    }
    total += results[i].selection_counts;
  }
  return usage_stats_from_counts(total);
}

void write_codes(const std::filesystem::path& path, const CodeDump& dump,
                 std::string_view comment) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kPath, "cannot write " + path.string());
  if (!comment.empty()) out << "# " << comment << "\n";
  std::ostringstream rate;
  rate.precision(17);
  rate << dump.frame_rate;
  out << "K=" << dump.K << " G=" << dump.G << " frame_rate=" << rate.str() << "\n";
  for (Eigen::Index t = 0; t < dump.indices.rows(); ++t) {
    for (Eigen::Index g = 0; g < dump.indices.cols(); ++g) {
      if (g) out << ' ';
      out << dump.indices(t, g);
    }
    out << '\n';
  }
}

CodeDump read_codes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kPath, "cannot open " + path.string());
  CodeDump dump;
  std::string line;
  bool have_header = false;
  std::vector<int> values;
  int frames = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!have_header) {
      if (std::sscanf(line.c_str(), "K=%d G=%d frame_rate=%lf", &dump.K, &dump.G,
                      &dump.frame_rate) != 3 ||
          dump.K < 1 || dump.G < 1) {
        throw Error(ErrorKind::kFormat,
                    path.string() + ": expected header K=<K> G=<G> frame_rate=<Hz>");
      }
      have_header = true;
      continue;
    }
    std::istringstream row(line);
    int v = 0;
    int count = 0;
    while (row >> v) {
      if (v < 0 || v >= dump.K) {
        throw Error(ErrorKind::kFormat, path.string() + ": index out of range");
      }
      values.push_back(v);
      ++count;
    }
    if (count != dump.G) {
      throw Error(ErrorKind::kFormat, path.string() + ": frame " +
                                          std::to_string(frames) + " has " +
                                          std::to_string(count) + " indices");
    }
    ++frames;
  }
  if (!have_header) {
    throw Error(ErrorKind::kFormat, path.string() + ": missing header");
  }
  dump.indices = Eigen::Map<IndexMatrix>(values.data(), frames, dump.G);
  return dump;
}

}  // namespace vqspeech
