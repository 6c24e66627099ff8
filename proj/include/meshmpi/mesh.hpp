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

/// Simulated device: a rows x cols grid of cores, each with a bounded
/// local-memory budget and a logical clock advanced by charged compute and
/// communication costs. The mesh itself only provides the chunk-transport
/// primitive (bounded per-channel FIFO mailboxes); all timing policy lives
/// in the runtime layer above it.
///
/// Timing is endpoint-level: per-hop routing, congestion and bisection
/// effects are not modeled. No modeled quantity ever consults wall-clock
/// time; mailbox depth bounds in-flight chunks for liveness only.

#pragma once

#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "meshmpi/errors.hpp"
#include "meshmpi/perf_model.hpp"

namespace meshmpi {

/// Device geometry and rate constants. Defaults model a 16-core part:
/// 600 MHz, 2 flops/cycle/core (19.2 GFLOPS aggregate), 32 KB local memory
/// per core of which 16 KB is reserved for program text and stack.
struct MeshConfig {
  int rows = 4;
  int cols = 4;
  double clock_hz = 600e6;
  double flops_per_cycle = 2.0;
  std::uint64_t local_mem_bytes = 32768;
  std::uint64_t reserved_bytes = 16384;
  ModelParams model{};
  /// Compute efficiency factor in (0, 1]; divides the peak flop rate.
  double compute_efficiency = 1.0;
  /// Max in-flight chunks per (src, dest) channel. Affects liveness
  /// granularity only, never modeled times.
  int mailbox_depth = 4;

  int core_count() const { return rows * cols; }
  std::uint64_t usable_mem_bytes() const {
    return local_mem_bytes - reserved_bytes;
  }

  void validate() const {
    if (rows < 1 || cols < 1) throw ConfigError("mesh dims must be >= 1");
    if (reserved_bytes >= local_mem_bytes)
      throw ConfigError("reserved_bytes must be smaller than local_mem_bytes");
    if (!(clock_hz > 0.0) || !(flops_per_cycle > 0.0))
      throw ConfigError("clock_hz and flops_per_cycle must be positive");
    if (!(compute_efficiency > 0.0) || compute_efficiency > 1.0)
      throw ConfigError("compute_efficiency must be in (0, 1]");
    if (mailbox_depth < 1) throw ConfigError("mailbox_depth must be >= 1");
    if (!model.valid()) throw ConfigError("model parameters must be positive");
  }
};

/// One simulated core's identity, logical clock and accounting ledgers.
/// Owned by exactly one rank thread; never shared.
struct RankState {
  int rank = -1;
  int row = 0;
  int col = 0;
  double clock_ns = 0.0;      // logical time; non-decreasing
  double compute_ns = 0.0;    // time charged for flops
  double comm_ns = 0.0;       // time charged for transfers
  std::uint64_t mem_used_bytes = 0;
  std::uint64_t flops_total = 0;
  std::uint64_t bytes_sent = 0;
  std::uint64_t msgs_sent = 0;
  std::uint64_t chunks_sent = 0;  // payload chunks; control chunks excluded
};

/// What travels through a mailbox: one buffered DMA transaction, or one of
/// the two control markers (header/ack) that carry the sender's clock stamp.
struct ChunkEnvelope {
  enum class Kind : std::uint8_t { header, ack, data };

  Kind kind = Kind::data;
  int src_rank = -1;
  int dest_rank = -1;
  int tag = 0;
  std::uint64_t seq = 0;           // chunk index within the message
  std::uint64_t msg_bytes = 0;     // declared total message length
  double sender_clock_ns = 0.0;
  std::vector<std::byte> payload;  // empty for header/ack
};

class Mesh;

/// RAII handle for a modeled local-memory allocation.
class LocalAlloc {
public:
  LocalAlloc() = default;
  LocalAlloc(RankState* state, std::uint64_t nbytes)
      : state_(state), nbytes_(nbytes) {}
  LocalAlloc(LocalAlloc&& o) noexcept : state_(o.state_), nbytes_(o.nbytes_) {
    o.state_ = nullptr;
    o.nbytes_ = 0;
  }
  LocalAlloc& operator=(LocalAlloc&& o) noexcept {
    release();
    state_ = std::exchange(o.state_, nullptr);
    nbytes_ = std::exchange(o.nbytes_, 0);
    return *this;
  }
  LocalAlloc(const LocalAlloc&) = delete;
  LocalAlloc& operator=(const LocalAlloc&) = delete;
  ~LocalAlloc() { release(); }

  std::uint64_t size() const { return nbytes_; }

  void release() {
    if (state_) {
      state_->mem_used_bytes -= nbytes_;
      state_ = nullptr;
      nbytes_ = 0;
    }
  }

private:
  RankState* state_ = nullptr;
  std::uint64_t nbytes_ = 0;
};

/// The simulated device. Owns the per-channel mailboxes; rank state is
/// created per job by the runtime. Thread-safe for concurrent use of the
/// chunk transport by all ranks.
class Mesh {
public:
  explicit Mesh(MeshConfig config) : config_(std::move(config)) {
    config_.validate();
    const std::size_t n = static_cast<std::size_t>(config_.core_count());
    channels_ = std::vector<Channel>(n * n);
  }

  const MeshConfig& config() const { return config_; }
  int core_count() const { return config_.core_count(); }

  /// Charges flop_count flops to the rank at the peak rate scaled by the
  /// efficiency factor. Advances the logical clock and the compute ledger.
  void charge_compute(RankState& st, std::uint64_t flop_count) const {
    const double rate_flops_per_ns = config_.flops_per_cycle * config_.clock_hz *
                                     1e-9 * config_.compute_efficiency;
    const double dt = static_cast<double>(flop_count) / rate_flops_per_ns;
    st.clock_ns += dt;
    st.compute_ns += dt;
    st.flops_total += flop_count;
  }

  /// Ledger-only allocation against the core's usable memory budget.
  LocalAlloc local_alloc(RankState& st, std::uint64_t nbytes) const {
    const std::uint64_t budget = config_.usable_mem_bytes();
    if (st.mem_used_bytes + nbytes > budget)
      throw OutOfMemoryError(
          "rank " + std::to_string(st.rank) + " requested " +
          std::to_string(nbytes) + " B with " +
          std::to_string(st.mem_used_bytes) + " B in use; usable local memory is " +
          std::to_string(budget) + " B/core");
    st.mem_used_bytes += nbytes;
    return LocalAlloc(&st, nbytes);
  }

  /// Deposits a chunk into the (src, dest) mailbox. Blocks while the
  /// channel is at capacity; returns once the chunk is accepted, which is
  /// the delivery acknowledgment. FIFO order per channel.
  void transport_chunk(int src, int dest, ChunkEnvelope chunk) {
    check_rank(src);
    check_rank(dest);
    chunk.src_rank = src;
    chunk.dest_rank = dest;
    Channel& ch = channel(src, dest);
    std::unique_lock lock(ch.mutex);
    ch.cv.wait(lock, [&] {
      return aborted_.load() ||
             ch.queue.size() < static_cast<std::size_t>(config_.mailbox_depth);
    });
    if (aborted_.load()) throw JobAborted();
    ch.queue.push_back(std::move(chunk));
    ch.cv.notify_all();
  }

  /// Removes and returns the oldest chunk on the (src, dest) channel.
  /// Blocks while the channel is empty. Each chunk is retrieved once.
  ChunkEnvelope retrieve_chunk(int src, int dest) {
    check_rank(src);
    check_rank(dest);
    Channel& ch = channel(src, dest);
    std::unique_lock lock(ch.mutex);
    ch.cv.wait(lock, [&] { return aborted_.load() || !ch.queue.empty(); });
    if (aborted_.load() && ch.queue.empty()) throw JobAborted();
    ChunkEnvelope out = std::move(ch.queue.front());
    ch.queue.pop_front();
    ch.cv.notify_all();
    return out;
  }

  /// Wakes every blocked rank with JobAborted. Used when a rank fails so
  /// the remaining threads can unwind instead of waiting forever.
  void abort_job() {
    aborted_.store(true);
    for (auto& ch : channels_) {
      std::lock_guard lock(ch.mutex);
      ch.cv.notify_all();
    }
  }

  /// Clears mailboxes and the abort flag. Called by the launcher between
  /// jobs; no ranks may be running.
  void reset() {
    aborted_.store(false);
    for (auto& ch : channels_) {
      std::lock_guard lock(ch.mutex);
      ch.queue.clear();
    }
  }

private:
  struct Channel {
    std::mutex mutex;
    std::condition_variable cv;
    std::deque<ChunkEnvelope> queue;
  };

  void check_rank(int r) const {
    if (r < 0 || r >= config_.core_count())
      throw CommError("rank " + std::to_string(r) + " out of range [0, " +
                      std::to_string(config_.core_count()) + ")");
  }

  Channel& channel(int src, int dest) {
    return channels_[static_cast<std::size_t>(src) *
                         static_cast<std::size_t>(config_.core_count()) +
                     static_cast<std::size_t>(dest)];
  }

  MeshConfig config_;
  std::vector<Channel> channels_;
  std::atomic<bool> aborted_{false};
};

/// Convenience mesh_create: validates the configuration and returns an
/// idle device (all clocks 0, all ledgers 0).
inline Mesh mesh_create(const MeshConfig& config) { return Mesh(config); }

}  // namespace meshmpi
