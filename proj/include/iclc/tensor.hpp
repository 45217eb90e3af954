#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

namespace iclc {

// Row-major float storage matches the on-disk layout of safetensors archives
// and the trace export format, so blobs can be copied without transposition.
using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXf;
using RowVector = Eigen::Matrix<float, 1, Eigen::Dynamic>;

using MatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorD = Eigen::VectorXd;

// Numerically stable softmax in double precision.
inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

// Index of the maximum; ties resolve to the lowest index.
template <typename Range>
std::size_t argmax(const Range& values) {
  std::size_t best = 0;
  std::size_t i = 0;
  for (auto it = std::begin(values); it != std::end(values); ++it, ++i) {
    if (*it > *(std::begin(values) + static_cast<std::ptrdiff_t>(best))) best = i;
  }
  return best;
}

inline double cosine(const Eigen::Ref<const VectorD>& a, const Eigen::Ref<const VectorD>& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

// Softmax over the entries of `logits` selected by `ids` (e.g. label tokens).
inline std::vector<double> restricted_softmax(const Eigen::Ref<const VectorD>& logits, const std::vector<int>& ids) {
  std::vector<double> sel;
  sel.reserve(ids.size());
  for (int id : ids) sel.push_back(logits(id));
  return softmax(sel);
}

inline bool all_finite(const Eigen::Ref<const MatrixD>& m) { return m.allFinite(); }

}  // namespace iclc
