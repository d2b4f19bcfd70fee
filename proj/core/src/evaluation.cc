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

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <unordered_map>

namespace vqspeech {

std::vector<Segment> segments_from_alignment(const Matrix& features,
                                             std::span<const int> labels,
                                             int utterance_id, int speaker_id) {
  if (static_cast<Eigen::Index>(labels.size()) != features.rows()) {
    throw Error(ErrorKind::kShape,
                "alignment has " + std::to_string(labels.size()) +
                    " frames, features have " + std::to_string(features.rows()));
  }
  std::vector<Segment> out;
  size_t begin = 0;
  while (begin < labels.size()) {
    size_t end = begin + 1;
    while (end < labels.size() && labels[end] == labels[begin]) ++end;
    if (labels[begin] >= 0) {
      Segment s;
      s.features = features.middleRows(begin, end - begin);
      s.phoneme_class = labels[begin];
      s.utterance_id = utterance_id;
      s.speaker_id = speaker_id;
      out.push_back(std::move(s));
    }
    begin = end;
  }
  return out;
}

RowVector pool_segment(const Segment& segment) {
  if (segment.features.rows() == 0) {
    throw Error(ErrorKind::kLength, "cannot pool an empty segment");
  }
  return segment.features.colwise().mean();
}

double cosine_distance(const RowVector& a, const RowVector& b) {
  if (a.size() != b.size()) {
    throw Error(ErrorKind::kShape, "cosine distance between vectors of size " +
                                       std::to_string(a.size()) + " and " +
                                       std::to_string(b.size()));
  }
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 1.0;
  const double c = a.dot(b) / (na * nb);
  return 1.0 - std::clamp(c, -1.0, 1.0);
}

AbxMode parse_abx_mode(std::string_view name) {
  if (name == "within-speaker" || name == "within") return AbxMode::kWithinSpeaker;
  if (name == "across-speaker" || name == "across") return AbxMode::kAcrossSpeaker;
  if (name == "pooled") return AbxMode::kPooled;
  throw Error(ErrorKind::kConfig, "unknown ABX mode '" + std::string(name) +
                                      "' (within-speaker, across-speaker, pooled)");
}

std::string_view abx_mode_name(AbxMode mode) {
  switch (mode) {
    case AbxMode::kWithinSpeaker: return "within-speaker";
    case AbxMode::kAcrossSpeaker: return "across-speaker";
    case AbxMode::kPooled: return "pooled";
  }
  return "pooled";
}

namespace {

int pick(std::mt19937_64& rng, size_t n) {
  return static_cast<int>(std::uniform_int_distribution<size_t>(0, n - 1)(rng));
}

// Segment indices grouped by a key, each list in increasing index order.
using Buckets = std::map<std::pair<int, int>, std::vector<int>>;

}  // namespace

std::vector<AbxTriplet> sample_abx_triplets(std::span<const Segment> segments,
                                            int64_t n_triplets, uint64_t seed,
                                            AbxMode mode) {
  if (n_triplets < 1) throw Error(ErrorKind::kRange, "n_triplets must be >= 1");
  std::map<int, std::vector<int>> by_class;
  for (size_t i = 0; i < segments.size(); ++i) {
    if (segments[i].features.rows() < 1) {
      throw Error(ErrorKind::kLength, "segment " + std::to_string(i) + " is empty");
    }
    by_class[segments[i].phoneme_class].push_back(static_cast<int>(i));
  }
  if (by_class.size() < 2) {
    throw Error(ErrorKind::kData, "ABX needs at least 2 phoneme classes, got " +
                                      std::to_string(by_class.size()));
  }
  for (const auto& [c, members] : by_class) {
    if (members.size() < 2) {
      throw Error(ErrorKind::kData, "phoneme class " + std::to_string(c) +
                                        " has fewer than 2 segments");
    }
  }

  // (class, speaker) -> members, and speaker -> members.
  Buckets by_class_speaker;
  std::map<int, std::vector<int>> by_speaker;
  for (size_t i = 0; i < segments.size(); ++i) {
    by_class_speaker[{segments[i].phoneme_class, segments[i].speaker_id}].push_back(
        static_cast<int>(i));
    by_speaker[segments[i].speaker_id].push_back(static_cast<int>(i));
  }
  auto count_of = [&](int c, int s) -> size_t {
    auto it = by_class_speaker.find({c, s});
    return it == by_class_speaker.end() ? 0 : it->second.size();
  };

  // For X, the speakers that can host A and B.
  auto hosts = [&](int x) {
    std::vector<int> out;
    const int c = segments[x].phoneme_class;
    const int sx = segments[x].speaker_id;
    for (const auto& [s, members] : by_speaker) {
      const size_t same = count_of(c, s);
      const size_t other = members.size() - same;
      if (mode == AbxMode::kWithinSpeaker) {
        if (s == sx && same >= 2 && other >= 1) out.push_back(s);
      } else if (s != sx && same >= 1 && other >= 1) {
        out.push_back(s);
      }
    }
    return out;
  };

  std::vector<int> all(segments.size());
  for (size_t i = 0; i < segments.size(); ++i) all[i] = static_cast<int>(i);
  std::vector<int> eligible;
  std::vector<std::vector<int>> host_lists;
  if (mode == AbxMode::kPooled) {
    eligible = all;
  } else {
    for (size_t i = 0; i < segments.size(); ++i) {
      auto h = hosts(static_cast<int>(i));
      if (!h.empty()) {
        eligible.push_back(static_cast<int>(i));
        host_lists.push_back(std::move(h));
      }
    }
    if (eligible.empty()) {
      throw Error(ErrorKind::kData, "no " + std::string(abx_mode_name(mode)) +
                                        " triplet can be formed from these segments");
    }
  }

  // The r-th element of `pool` that does not belong to class c.
  auto nth_other = [&](const std::vector<int>& pool, int c, int r) {
    for (int i : pool) {
      if (segments[i].phoneme_class == c) continue;
      if (r-- == 0) return i;
    }
    return -1;
  };

  std::mt19937_64 rng(seed);
  std::vector<AbxTriplet> out;
  out.reserve(static_cast<size_t>(n_triplets));
  for (int64_t n = 0; n < n_triplets; ++n) {
    const int e = pick(rng, eligible.size());
    AbxTriplet t;
    t.x = eligible[e];
    const int c = segments[t.x].phoneme_class;
    if (mode == AbxMode::kPooled) {
      const auto& same = by_class.at(c);
      int r = pick(rng, same.size() - 1);
      if (same[r] >= t.x) ++r;
      t.a = same[r];
      t.b = nth_other(all, c, pick(rng, segments.size() - same.size()));
    } else {
      const auto& h = host_lists[e];
      const int s = h[pick(rng, h.size())];
      const auto& same = by_class_speaker.at({c, s});
      if (mode == AbxMode::kWithinSpeaker) {
        // X is a member of `same`; skip it.
        const auto pos = std::lower_bound(same.begin(), same.end(), t.x) - same.begin();
        int r = pick(rng, same.size() - 1);
        if (r >= pos) ++r;
        t.a = same[r];
      } else {
        t.a = same[pick(rng, same.size())];
      }
      const auto& pool = by_speaker.at(s);
      t.b = nth_other(pool, c, pick(rng, pool.size() - count_of(c, s)));
    }
    out.push_back(t);
  }
  return out;
}

AbxResult score_abx_triplets(std::span<const Segment> segments,
                             std::span<const AbxTriplet> triplets, AbxMode mode) {
  std::unordered_map<int, RowVector> pooled;
  auto pooled_of = [&](int i) -> const RowVector& {
    auto it = pooled.find(i);
    if (it == pooled.end()) {
      if (i < 0 || i >= static_cast<int>(segments.size())) {
        throw Error(ErrorKind::kRange, "triplet references segment " + std::to_string(i));
      }
      it = pooled.emplace(i, pool_segment(segments[i])).first;
    }
    return it->second;
  };
  AbxResult result;
  result.mode = mode;
  for (const auto& t : triplets) {
    const double da = cosine_distance(pooled_of(t.x), pooled_of(t.a));
    const double db = cosine_distance(pooled_of(t.x), pooled_of(t.b));
    const double err = db < da ? 1.0 : (db == da ? 0.5 : 0.0);
    auto& stat = result.per_pair[{segments[t.a].phoneme_class,
                                  segments[t.b].phoneme_class}];
    stat.errors += err;
    stat.triplets += 1;
    result.errors += err;
    result.n_triplets += 1;
  }
  result.error_rate =
      result.n_triplets ? result.errors / static_cast<double>(result.n_triplets) : 0.0;
  return result;
}

AbxResult abx_evaluate(std::span<const Segment> segments, int64_t n_triplets,
                       uint64_t seed, AbxMode mode) {
  const auto triplets = sample_abx_triplets(segments, n_triplets, seed, mode);
  return score_abx_triplets(segments, triplets, mode);
}

CooccurrenceMatrix cooccurrence(std::span<const std::pair<int64_t, int>> pairs,
                                int n_phonemes) {
  if (pairs.empty()) throw Error(ErrorKind::kLength, "co-occurrence needs at least one frame");
  int P = n_phonemes;
  std::set<int64_t> symbols;
  int max_label = -1;
  for (const auto& [code, label] : pairs) {
    if (label < 0) throw Error(ErrorKind::kRange, "negative phoneme label");
    max_label = std::max(max_label, label);
    symbols.insert(code);
  }
  if (P < 0) P = max_label + 1;
  if (max_label >= P) {
    throw Error(ErrorKind::kRange, "phoneme label " + std::to_string(max_label) +
                                       " >= " + std::to_string(P));
  }
  std::vector<int64_t> sorted(symbols.begin(), symbols.end());
  std::unordered_map<int64_t, int> column;
  for (size_t m = 0; m < sorted.size(); ++m) column[sorted[m]] = static_cast<int>(m);
  const int M = static_cast<int>(sorted.size());
  CountMatrix counts = CountMatrix::Zero(P, M);
  for (const auto& [code, label] : pairs) counts(label, column[code]) += 1;

  Matrix conditional(P, M);
  std::vector<int> best(M);
  for (int m = 0; m < M; ++m) {
    const double total = static_cast<double>(counts.col(m).sum());
    for (int p = 0; p < P; ++p) conditional(p, m) = static_cast<double>(counts(p, m)) / total;
    int arg = 0;
    for (int p = 1; p < P; ++p) {
      if (conditional(p, m) > conditional(arg, m)) arg = p;
    }
    best[m] = arg;
  }
  std::vector<int> order(M);
  for (int m = 0; m < M; ++m) order[m] = m;
  std::sort(order.begin(), order.end(), [&](int l, int r) {
    if (best[l] != best[r]) return best[l] < best[r];
    const double pl = conditional(best[l], l);
    const double pr = conditional(best[r], r);
    if (pl != pr) return pl > pr;
    return sorted[l] < sorted[r];
  });

  CooccurrenceMatrix out;
  out.codes.resize(M);
  out.counts.resize(P, M);
  out.conditional.resize(P, M);
  for (int j = 0; j < M; ++j) {
    out.codes[j] = sorted[order[j]];
    out.counts.col(j) = counts.col(order[j]);
    out.conditional.col(j) = conditional.col(order[j]);
  }
  return out;
}

std::vector<std::pair<int64_t, int>> code_label_pairs(const IndexMatrix& indices,
                                                      int K,
                                                      std::span<const int> labels,
                                                      bool per_group) {
  if (static_cast<Eigen::Index>(labels.size()) != indices.rows()) {
    throw Error(ErrorKind::kShape,
                "alignment has " + std::to_string(labels.size()) +
                    " frames, codes have " + std::to_string(indices.rows()));
  }
  std::vector<std::pair<int64_t, int>> out;
  for (Eigen::Index t = 0; t < indices.rows(); ++t) {
    if (labels[t] < 0) continue;
    if (per_group) {
      for (Eigen::Index g = 0; g < indices.cols(); ++g) {
        out.emplace_back(static_cast<int64_t>(g) * K + indices(t, g), labels[t]);
      }
    } else {
      int64_t code = 0;
      int64_t scale = 1;
      for (Eigen::Index g = 0; g < indices.cols(); ++g) {
        code += scale * indices(t, g);
        scale *= K;
      }
      out.emplace_back(code, labels[t]);
    }
  }
  return out;
}

double purity(const CooccurrenceMatrix& m) {
  const double total = static_cast<double>(m.counts.sum());
  if (total <= 0.0) throw Error(ErrorKind::kLength, "purity of an empty co-occurrence matrix");
  double out = 0.0;
  for (Eigen::Index j = 0; j < m.counts.cols(); ++j) {
    const double mass = static_cast<double>(m.counts.col(j).sum()) / total;
    out += mass * m.conditional.col(j).maxCoeff();
  }
  return out;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path, std::string_view comment) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kPath, "cannot write " + path.string());
  out.precision(17);
  if (!comment.empty()) out << "# " << comment << "\n";
  return out;
}

}  // namespace

void write_abx_report(const std::filesystem::path& path,
                      std::span<const AbxResult> results,
                      std::string_view comment) {
  auto out = open_out(path, comment);
  out << "mode,n_triplets,error_rate\n";
  for (const auto& r : results) {
    out << abx_mode_name(r.mode) << ',' << r.n_triplets << ',' << r.error_rate << '\n';
  }
  out << "\nmode,class_a,class_b,n_triplets,error_rate\n";
  for (const auto& r : results) {
    for (const auto& [key, stat] : r.per_pair) {
      out << abx_mode_name(r.mode) << ',' << key.first << ',' << key.second << ','
          << stat.triplets << ',' << stat.errors / static_cast<double>(stat.triplets)
          << '\n';
    }
  }
  if (!out) throw Error(ErrorKind::kIo, "write failed for " + path.string());
}

void write_cooccurrence(const std::filesystem::path& path,
                        const CooccurrenceMatrix& m, std::string_view comment) {
  auto out = open_out(path, comment);
  out << "phoneme";
  for (int64_t code : m.codes) out << ",z" << code;
  out << '\n';
  for (Eigen::Index p = 0; p < m.conditional.rows(); ++p) {
    out << p;
    for (Eigen::Index j = 0; j < m.conditional.cols(); ++j) out << ',' << m.conditional(p, j);
    out << '\n';
  }
  if (!out) throw Error(ErrorKind::kIo, "write failed for " + path.string());
}

}  // namespace vqspeech
