#pragma once

// Representation metrics: cosine similarity maps, mutual top-K kernel
// alignment, nearest-centroid probes and position-similarity grids.

#include "iclc/errors.hpp"
#include "iclc/tensor.hpp"
#include "iclc/trace_store.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace iclc {

struct SimMap {
  MatrixD s;  // n x n, zero diagonal
  std::string metric = "cosine";
  int n() const { return static_cast<int>(s.rows()); }
};

inline SimMap similarity_map(const MatrixD& reps, const std::vector<std::string>& ids = {}) {
  const auto n = reps.rows();
  if (n < 2) throw ArgumentError("similarity map needs at least 2 samples");
  VectorD norms(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    norms(i) = reps.row(i).norm();
    if (norms(i) == 0.0) {
      const std::string who = i < static_cast<Eigen::Index>(ids.size()) ? ids[static_cast<std::size_t>(i)] : std::to_string(i);
      throw ArgumentError("zero-norm representation for sample " + who);
    }
  }
  SimMap m;
  m.s.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    m.s(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double c = reps.row(i).dot(reps.row(j)) / (norms(i) * norms(j));
      m.s(i, j) = c;
      m.s(j, i) = c;
    }
  }
  return m;
}

inline SimMap similarity_map(const RepSet& rs) {
  rs.validate();
  return similarity_map(rs.reps, rs.ids);
}

// Indices of the K largest entries of `row`; ties at equal value go to the lower index.
inline std::vector<int> top_k_indices(const Eigen::Ref<const VectorD>& row, int K) {
  std::vector<int> idx(static_cast<std::size_t>(row.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + K, idx.end(), [&](int a, int b) {
    if (row(a) != row(b)) return row(a) > row(b);
    return a < b;
  });
  idx.resize(static_cast<std::size_t>(K));
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct KernelAlignConfig {
  int K = 64;
};

struct KernelAlignment {
  std::vector<double> scores;
  double mean = 0.0;
  double std = 0.0;  // population standard deviation of the per-sample scores
};

inline KernelAlignment kernel_alignment(const SimMap& m1, const SimMap& m2, const KernelAlignConfig& cfg = {}) {
  if (m1.s.rows() != m2.s.rows() || m1.s.cols() != m2.s.cols() || m1.s.rows() != m1.s.cols()) {
    throw ArgumentError("kernel alignment: similarity maps differ in size");
  }
  const int n = m1.n();
  if (cfg.K < 1 || cfg.K >= n) throw ArgumentError("kernel alignment: need 1 <= K < n");
  KernelAlignment ka;
  ka.scores.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const VectorD r1 = m1.s.row(i).transpose();
    const VectorD r2 = m2.s.row(i).transpose();
    const auto a = top_k_indices(r1, cfg.K);
    const auto b = top_k_indices(r2, cfg.K);
    std::vector<int> common;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
    ka.scores[static_cast<std::size_t>(i)] = static_cast<double>(common.size()) / cfg.K;
  }
  ka.mean = std::accumulate(ka.scores.begin(), ka.scores.end(), 0.0) / n;
  double var = 0.0;
  for (double s : ka.scores) var += (s - ka.mean) * (s - ka.mean);
  ka.std = std::sqrt(var / n);
  return ka;
}

// ---------------------------------------------------------------------------
// Centroid probe

struct CentroidModel {
  MatrixD centroids;  // n_labels x d, row = label id
  int layer = -1;
  std::string role;
  int n_labels() const { return static_cast<int>(centroids.rows()); }
};

// Per-label means. Every label in [0, n_labels) needs at least one sample;
// n_labels < 0 infers the label count from the data.
inline CentroidModel train_centroids(const MatrixD& reps, const std::vector<int>& labels, int n_labels = -1) {
  if (static_cast<Eigen::Index>(labels.size()) != reps.rows()) throw ArgumentError("one label per row is required");
  if (n_labels < 0) n_labels = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  if (n_labels == 0) throw ArgumentError("centroid training needs at least one labelled sample");
  CentroidModel cm;
  cm.centroids = MatrixD::Zero(n_labels, reps.cols());
  std::vector<int> count(static_cast<std::size_t>(n_labels), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= n_labels) throw ArgumentError("label outside the label space: " + std::to_string(y));
    cm.centroids.row(y) += reps.row(static_cast<Eigen::Index>(i));
    ++count[static_cast<std::size_t>(y)];
  }
  for (int y = 0; y < n_labels; ++y) {
    if (count[static_cast<std::size_t>(y)] == 0) throw ArgumentError("label " + std::to_string(y) + " has no samples");
    cm.centroids.row(y) /= count[static_cast<std::size_t>(y)];
  }
  return cm;
}

inline CentroidModel train_centroids(const RepSet& rs, const std::vector<int>& labels, int n_labels = -1) {
  rs.validate();
  auto cm = train_centroids(rs.reps, labels, n_labels);
  cm.layer = rs.layer;
  cm.role = rs.role;
  return cm;
}

// Label whose centroid is nearest in Euclidean distance; ties go to the lowest label id.
inline int centroid_predict(const CentroidModel& cm, const Eigen::Ref<const VectorD>& h) {
  if (h.size() != cm.centroids.cols()) throw ArgumentError("centroid probe: dimension mismatch");
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int y = 0; y < cm.n_labels(); ++y) {
    const double d = (cm.centroids.row(y).transpose() - h).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = y;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Position-similarity grid

struct PositionGrid {
  std::vector<int> ks;
  MatrixD same;   // mean cosine over targets of h(t, k1) vs h(t, k2)
  MatrixD cross;  // mean cosine over ordered pairs t != t' of h(t, k1) vs h(t', k2)
};

// `cells` maps (target, k) to the hidden state of that target's token when
// preceded by k demonstrations.
inline PositionGrid position_similarity_grid(const std::map<std::pair<int, int>, VectorD>& cells,
                                             const std::vector<int>& targets, const std::vector<int>& ks) {
  auto cell = [&](int t, int k) -> const VectorD& {
    auto it = cells.find({t, k});
    if (it == cells.end()) {
      throw ArgumentError("position grid: missing cell (target " + std::to_string(t) + ", k " + std::to_string(k) + ")");
    }
    return it->second;
  };
  PositionGrid g;
  g.ks = ks;
  const auto nk = static_cast<Eigen::Index>(ks.size());
  g.same = MatrixD::Zero(nk, nk);
  g.cross = MatrixD::Zero(nk, nk);
  for (Eigen::Index a = 0; a < nk; ++a) {
    for (Eigen::Index b = 0; b < nk; ++b) {
      double same = 0.0;
      double cross = 0.0;
      int n_cross = 0;
      for (int t : targets) {
        same += cosine(cell(t, ks[static_cast<std::size_t>(a)]), cell(t, ks[static_cast<std::size_t>(b)]));
        for (int u : targets) {
          if (u == t) continue;
          cross += cosine(cell(t, ks[static_cast<std::size_t>(a)]), cell(u, ks[static_cast<std::size_t>(b)]));
          ++n_cross;
        }
      }
      g.same(a, b) = targets.empty() ? 0.0 : same / static_cast<double>(targets.size());
      g.cross(a, b) = n_cross ? cross / n_cross : 0.0;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Reference embeddings (ingested, never computed here)

// Reads an n x d matrix from CSV (optional non-numeric header row) or from a
// raw f32 row-major .bin with a sidecar <path>.json holding {"shape": [n, d]}.
inline MatrixD load_reference_matrix(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".bin") {
    std::ifstream jin(path + ".json");
    if (!jin) throw LoadError("missing shape manifest: " + path + ".json");
    nlohmann::json j;
    jin >> j;
    const auto shape = j.at("shape").get<std::vector<int>>();
    Matrix m(shape.at(0), shape.at(1));
    std::ifstream bin(path, std::ios::binary);
    bin.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
    if (!bin) throw LoadError("reference blob shorter than its shape: " + path);
    return m.cast<double>();
  }
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open reference matrix: " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        numeric = false;
        break;
      }
    }
    if (!numeric) {
      if (rows.empty() && line_no == 1) continue;  // header
      throw ParseError("non-numeric cell in reference matrix", line_no);
    }
    if (!rows.empty() && row.size() != rows[0].size()) throw ParseError("ragged reference matrix", line_no);
    rows.push_back(std::move(row));
  }
  MatrixD m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return m;
}

}  // namespace iclc
