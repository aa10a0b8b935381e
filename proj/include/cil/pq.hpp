#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "cil/errors.hpp"
#include "cil/rng.hpp"

namespace cil {

/// Product-quantization codebook: `subspaces` independent k-means tables,
/// each with `centroids` rows of dim/subspaces floats.
struct PQCodebook {
  int subspaces = 0;
  int centroids = 0;
  int dim = 0;
  std::vector<float> table;  // subspaces × centroids × sub_dim

  int sub_dim() const { return subspaces ? dim / subspaces : 0; }

  std::span<const float> centroid(int sub, int j) const {
    const auto d = static_cast<std::size_t>(sub_dim());
    return std::span<const float>(table).subspan(
        (static_cast<std::size_t>(sub) * static_cast<std::size_t>(centroids) + static_cast<std::size_t>(j)) * d, d);
  }

  std::size_t table_bytes() const { return table.size() * sizeof(float); }
};

struct PQTrainLog {
  /// sse[sub][it] = within-cluster SSE of subspace `sub` after the
  /// assignment step of iteration `it`.
  std::vector<std::vector<double>> sse;
  /// Total SSE of the final codebook over the training set.
  double final_sse = 0.0;
};

namespace detail {

/// Squared distance with a fixed 8-lane accumulation order.
inline float squared_distance(const float* a, const float* b, std::size_t n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) {
      const float d = a[i + l] - b[i + l];
      acc[l] += d * d;
    }
  }
  for (; i < n; ++i) {
    const float d = a[i] - b[i];
    acc[0] += d * d;
  }
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

/// Index of the nearest centroid; lowest index wins ties.
inline int nearest(const float* x, const float* cents, int k, std::size_t d, float* best_dist = nullptr) {
  int best = 0;
  float best_d = std::numeric_limits<float>::infinity();
  for (int j = 0; j < k; ++j) {
    const float dist = squared_distance(x, cents + static_cast<std::size_t>(j) * d, d);
    if (dist < best_d) {
      best_d = dist;
      best = j;
    }
  }
  if (best_dist) *best_dist = best_d;
  return best;
}

}  // namespace detail

/// Per-subspace k-means: k-means++ seeding, a fixed number of Lloyd
/// iterations, and empty clusters re-seeded at the point farthest from its
/// centroid. `features` is n × dim, row-major.
inline PQCodebook pq_train(std::span<const float> features, std::size_t n, int dim, int m, int k, int iterations,
                           std::uint64_t seed, PQTrainLog* log = nullptr) {
  if (m < 1 || dim < 1 || dim % m != 0)
    throw ContractError("pq_train: feature dim " + std::to_string(dim) + " is not divisible by " + std::to_string(m));
  if (k < 1 || k > 256) throw ContractError("pq_train: centroid count must lie in [1, 256]");
  if (n < static_cast<std::size_t>(k))
    throw ContractError("pq_train: need at least k=" + std::to_string(k) + " vectors, got " + std::to_string(n));
  if (features.size() != n * static_cast<std::size_t>(dim)) throw ContractError("pq_train: feature buffer size mismatch");
  if (iterations < 0) throw ContractError("pq_train: negative iteration count");

  PQCodebook cb;
  cb.subspaces = m;
  cb.centroids = k;
  cb.dim = dim;
  const auto d = static_cast<std::size_t>(dim / m);
  const auto ku = static_cast<std::size_t>(k);
  cb.table.assign(static_cast<std::size_t>(m) * ku * d, 0.0f);
  if (log) {
    log->sse.assign(static_cast<std::size_t>(m), {});
    log->final_sse = 0.0;
  }

  std::vector<float> sub(n * d);
  std::vector<int> assign(n);
  std::vector<float> dist(n);
  for (int s = 0; s < m; ++s) {
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(features.data() + i * static_cast<std::size_t>(dim) + static_cast<std::size_t>(s) * d, d,
                  sub.data() + i * d);
    float* cents = cb.table.data() + static_cast<std::size_t>(s) * ku * d;
    Rng rng(derive_seed(seed, "pq-subspace", static_cast<std::uint64_t>(s)));

    // k-means++ seeding.
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    std::size_t first = rng.uniform_int(n);
    std::copy_n(sub.data() + first * d, d, cents);
    for (std::size_t j = 1; j < ku; ++j) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        d2[i] = std::min(d2[i], static_cast<double>(detail::squared_distance(sub.data() + i * d, cents + (j - 1) * d, d)));
        total += d2[i];
      }
      std::size_t pick = 0;
      if (total > 0.0) {
        double target = rng.uniform() * total;
        pick = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
          target -= d2[i];
          if (target < 0.0 && d2[i] > 0.0) {
            pick = i;
            break;
          }
        }
      } else {
        pick = rng.uniform_int(n);
      }
      std::copy_n(sub.data() + pick * d, d, cents + j * d);
    }

    std::vector<double> sums(ku * d);
    std::vector<std::size_t> counts(ku);
    for (int it = 0; it < iterations; ++it) {
      double sse = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        assign[i] = detail::nearest(sub.data() + i * d, cents, k, d, &dist[i]);
        sse += dist[i];
      }
      if (log) log->sse[static_cast<std::size_t>(s)].push_back(sse);

      std::fill(sums.begin(), sums.end(), 0.0);
      std::fill(counts.begin(), counts.end(), 0);
      for (std::size_t i = 0; i < n; ++i) {
        const auto a = static_cast<std::size_t>(assign[i]);
        ++counts[a];
        for (std::size_t t = 0; t < d; ++t) sums[a * d + t] += sub[i * d + t];
      }
      for (std::size_t j = 0; j < ku; ++j) {
        if (counts[j] > 0) {
          for (std::size_t t = 0; t < d; ++t)
            cents[j * d + t] = static_cast<float>(sums[j * d + t] / static_cast<double>(counts[j]));
          continue;
        }
        // Empty cluster: move it onto the worst-served point.
        std::size_t far = 0;
        for (std::size_t i = 1; i < n; ++i)
          if (dist[i] > dist[far]) far = i;
        std::copy_n(sub.data() + far * d, d, cents + j * d);
        dist[far] = 0.0f;
      }
    }
    if (log) {
      for (std::size_t i = 0; i < n; ++i) {
        float best = 0.0f;
        detail::nearest(sub.data() + i * d, cents, k, d, &best);
        log->final_sse += best;
      }
    }
  }
  return cb;
}

/// One byte per subspace: the nearest centroid (squared Euclidean, lowest
/// index on ties).
inline std::vector<std::uint8_t> pq_encode(const PQCodebook& cb, std::span<const float> feature,
                                           double* squared_error = nullptr) {
  if (feature.size() != static_cast<std::size_t>(cb.dim))
    throw ShapeError("pq_encode: feature has " + std::to_string(feature.size()) + " dims, codebook expects " +
                     std::to_string(cb.dim));
  const auto d = static_cast<std::size_t>(cb.sub_dim());
  std::vector<std::uint8_t> codes(static_cast<std::size_t>(cb.subspaces));
  double err = 0.0;
  for (int s = 0; s < cb.subspaces; ++s) {
    float dist = 0.0f;
    const float* cents = cb.table.data() + static_cast<std::size_t>(s) * static_cast<std::size_t>(cb.centroids) * d;
    codes[static_cast<std::size_t>(s)] = static_cast<std::uint8_t>(
        detail::nearest(feature.data() + static_cast<std::size_t>(s) * d, cents, cb.centroids, d, &dist));
    err += dist;
  }
  if (squared_error) *squared_error = err;
  return codes;
}

inline std::vector<float> pq_decode(const PQCodebook& cb, std::span<const std::uint8_t> codes) {
  if (codes.size() != static_cast<std::size_t>(cb.subspaces))
    throw ShapeError("pq_decode: expected " + std::to_string(cb.subspaces) + " codes, got " +
                     std::to_string(codes.size()));
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(cb.dim));
  for (int s = 0; s < cb.subspaces; ++s) {
    const int c = codes[static_cast<std::size_t>(s)];
    if (c >= cb.centroids)
      throw ContractError("pq_decode: code " + std::to_string(c) + " out of range for " +
                          std::to_string(cb.centroids) + " centroids");
    auto cent = cb.centroid(s, c);
    out.insert(out.end(), cent.begin(), cent.end());
  }
  return out;
}

}  // namespace cil
