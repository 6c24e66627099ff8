/*
 * Copyright 2026 The meshmpi Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

/// Communication cost model for the buffered, DMA-segmented exchange:
///
///     T(m, B) = alpha0 + alpha1 * ceil(m / B) + m / beta
///
/// where m is the message size in bytes, B the internal staging buffer,
/// alpha0 the fixed per-call latency, alpha1 the latency added by each
/// buffered DMA transaction, and beta the link bandwidth in bytes/ns.
/// Also provides the least-squares fit that recovers the parameters from
/// (m, B, T) samples and the bandwidth sweep used to tabulate the model.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "meshmpi/errors.hpp"

namespace meshmpi {

/// Throughout the project MB/s means 10^6 bytes per second, so
/// beta = 1250 MB/s is stored as 1.25 bytes per nanosecond.
struct ModelParams {
  double alpha0_ns = 1216.0;        // fixed call latency
  double alpha1_ns = 309.0;         // latency per buffered DMA transaction
  double beta_bytes_per_ns = 1.25;  // single-channel DMA bandwidth

  bool valid() const {
    return alpha0_ns > 0.0 && alpha1_ns > 0.0 && beta_bytes_per_ns > 0.0;
  }
};

/// One timing observation: message of m bytes moved with buffer B took T ns.
struct Sample {
  std::uint64_t message_bytes = 0;
  std::uint64_t buffer_bytes = 0;
  double time_ns = 0.0;
};

/// Number of internal DMA transactions for an m-byte message staged
/// through a B-byte buffer. Zero-length messages use no data chunks.
inline std::uint64_t chunk_count(std::uint64_t message_bytes,
                                 std::uint64_t buffer_bytes) {
  if (buffer_bytes == 0) throw ConfigError("internal buffer size must be positive");
  if (message_bytes == 0) return 0;
  return (message_bytes + buffer_bytes - 1) / buffer_bytes;
}

/// Modeled transfer time in nanoseconds.
inline double comm_time(std::uint64_t message_bytes, std::uint64_t buffer_bytes,
                        const ModelParams& p = {}) {
  const auto k = chunk_count(message_bytes, buffer_bytes);
  return p.alpha0_ns + p.alpha1_ns * static_cast<double>(k) +
         static_cast<double>(message_bytes) / p.beta_bytes_per_ns;
}

/// Effective bandwidth m / T(m, B) reported in MB/s (10^6 bytes per second).
inline double effective_bandwidth(std::uint64_t message_bytes,
                                  std::uint64_t buffer_bytes,
                                  const ModelParams& p = {}) {
  if (message_bytes == 0)
    throw ConfigError("effective bandwidth undefined for zero-byte message");
  return static_cast<double>(message_bytes) /
         comm_time(message_bytes, buffer_bytes, p) * 1000.0;
}

/// Large-message limit of the effective bandwidth, in MB/s. The per-call
/// latency alpha0 washes out; the per-chunk latency does not.
inline double bandwidth_asymptote(std::uint64_t buffer_bytes,
                                  const ModelParams& p = {}) {
  return 1000.0 / (1.0 / p.beta_bytes_per_ns +
                   p.alpha1_ns / static_cast<double>(buffer_bytes));
}

struct FitResult {
  ModelParams params;
  double rms_residual_ns = 0.0;
  /// Set when any fitted parameter came out non-positive; the raw values
  /// are still returned so the caller can inspect them.
  bool nonpositive_params = false;
};

namespace detail {

// Ordinary least squares of y on three regressors via normal equations,
// solved with Gaussian elimination in long double after unit-max column
// scaling. Throws CommError-free: rank deficiency reported by the caller.
inline bool solve_ols3(const std::vector<std::array<double, 3>>& x,
                       const std::vector<double>& y, double coef[3],
                       double* rms) {
  const std::size_t n = x.size();
  long double scale[3] = {0.0L, 0.0L, 0.0L};
  for (const auto& row : x)
    for (int j = 0; j < 3; ++j)
      scale[j] = std::max<long double>(scale[j], std::fabs(row[j]));
  for (int j = 0; j < 3; ++j)
    if (scale[j] == 0.0L) return false;

  long double g[3][4] = {};  // normal equations, augmented
  for (std::size_t i = 0; i < n; ++i) {
    long double r[3];
    for (int j = 0; j < 3; ++j) r[j] = x[i][j] / scale[j];
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) g[a][b] += r[a] * r[b];
      g[a][3] += r[a] * static_cast<long double>(y[i]);
    }
  }

  // Gaussian elimination with partial pivoting.
  int perm[3] = {0, 1, 2};
  for (int col = 0; col < 3; ++col) {
    int piv = col;
    for (int r = col + 1; r < 3; ++r)
      if (std::fabs(static_cast<double>(g[perm[r]][col])) >
          std::fabs(static_cast<double>(g[perm[piv]][col])))
        piv = r;
    std::swap(perm[col], perm[piv]);
    const long double d = g[perm[col]][col];
    if (std::fabs(static_cast<double>(d)) < 1e-12) return false;
    for (int r = col + 1; r < 3; ++r) {
      const long double f = g[perm[r]][col] / d;
      for (int c = col; c < 4; ++c) g[perm[r]][c] -= f * g[perm[col]][c];
    }
  }
  long double sol[3];
  for (int col = 2; col >= 0; --col) {
    long double acc = g[perm[col]][3];
    for (int c = col + 1; c < 3; ++c) acc -= g[perm[col]][c] * sol[c];
    sol[col] = acc / g[perm[col]][col];
  }
  for (int j = 0; j < 3; ++j)
    coef[j] = static_cast<double>(sol[j] / scale[j]);

  if (rms) {
    long double ss = 0.0L;
    for (std::size_t i = 0; i < n; ++i) {
      long double pred = 0.0L;
      for (int j = 0; j < 3; ++j) pred += static_cast<long double>(coef[j]) * x[i][j];
      const long double e = static_cast<long double>(y[i]) - pred;
      ss += e * e;
    }
    *rms = std::sqrt(static_cast<double>(ss / static_cast<long double>(n)));
  }
  return true;
}

}  // namespace detail

/// Least-squares fit of T on the regressors [1, k, m]. Recovers
/// alpha0 = c0, alpha1 = c1 and beta = 1/c2. Requires the samples to
/// span three linearly independent regressor vectors.
inline FitResult fit_params(std::span<const Sample> samples) {
  if (samples.size() < 3)
    throw ConfigError("need at least 3 samples to fit 3 parameters");
  std::vector<std::array<double, 3>> x;
  std::vector<double> y;
  x.reserve(samples.size());
  y.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.buffer_bytes == 0 || s.time_ns <= 0.0)
      throw ConfigError("sample requires B > 0 and T > 0");
    x.push_back({1.0,
                 static_cast<double>(chunk_count(s.message_bytes, s.buffer_bytes)),
                 static_cast<double>(s.message_bytes)});
    y.push_back(s.time_ns);
  }
  FitResult out;
  double coef[3];
  if (!detail::solve_ols3(x, y, coef, &out.rms_residual_ns))
    throw ConfigError("rank-deficient regressor matrix: samples do not span [1, k, m]");
  out.params.alpha0_ns = coef[0];
  out.params.alpha1_ns = coef[1];
  out.params.beta_bytes_per_ns = 1.0 / coef[2];
  out.nonpositive_params = !(coef[0] > 0.0 && coef[1] > 0.0 && coef[2] > 0.0);
  return out;
}

/// One evaluated (B, m) point of a bandwidth sweep.
struct SweepRow {
  std::uint64_t buffer_bytes = 0;
  std::uint64_t message_bytes = 0;
  double time_ns = 0.0;
  double bandwidth_mb_s = 0.0;
};

/// Evaluates the model over every (B, m) pair, ordered by B then m.
inline std::vector<SweepRow> sweep_bandwidth(const ModelParams& p,
                                             std::vector<std::uint64_t> buffers,
                                             std::vector<std::uint64_t> sizes) {
  if (buffers.empty() || sizes.empty())
    throw ConfigError("sweep requires non-empty buffer and size lists");
  std::sort(buffers.begin(), buffers.end());
  std::sort(sizes.begin(), sizes.end());
  std::vector<SweepRow> rows;
  rows.reserve(buffers.size() * sizes.size());
  for (auto b : buffers)
    for (auto m : sizes)
      rows.push_back({b, m, comm_time(m, b, p),
                      m > 0 ? effective_bandwidth(m, b, p) : 0.0});
  return rows;
}

}  // namespace meshmpi
